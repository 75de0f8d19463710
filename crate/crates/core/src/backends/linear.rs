//! Small trainable backends: linear scorers over bag-of-token features.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backends::{split_pair, ChoiceScorer, Markers, PairClassifier};
use crate::choice::ChoiceSet;
use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::training::Trainable;

/// Token → feature index; every unseen token shares the last slot.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct FeatureMap {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl FeatureMap {
    fn new<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let tokens: Vec<String> = tokens.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        let mut map = Self {
            tokens,
            index: HashMap::new(),
        };
        map.reindex();
        map
    }

    fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    /// Number of features, unknown slot included.
    fn len(&self) -> usize {
        self.tokens.len() + 1
    }

    fn get(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(self.tokens.len())
    }

    /// Sparse bag of features for the non-marker tokens of `tokens`.
    fn bag(&self, tokens: &[String], markers: &Markers) -> Vec<(usize, f64)> {
        let mut counts: HashMap<usize, f64> = HashMap::new();
        for t in tokens.iter().filter(|t| !markers.is_special(t)) {
            *counts.entry(self.get(t)).or_insert(0.0) += 1.0;
        }
        let mut bag: Vec<_> = counts.into_iter().collect();
        bag.sort_unstable_by_key(|(i, _)| *i);
        bag
    }
}

fn content_tokens<'a>(seqs: impl Iterator<Item = &'a TokenSequence>, markers: &Markers) -> Vec<String> {
    seqs.flat_map(|s| s.interior().iter())
        .filter(|t| !markers.is_special(t))
        .cloned()
        .collect()
}

fn dot(weights: &[f64], bag: &[(usize, f64)]) -> f64 {
    bag.iter().map(|&(i, c)| weights[i] * c).sum()
}

fn save_json<T: Serialize>(model: &T, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(model)?;
    std::fs::write(path, json + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(serde_json::from_str(&text)?)
}

fn check_shape(path: &Path, weights: usize, expected: usize) -> Result<()> {
    if weights != expected {
        return Err(Error::InvalidArgument(format!(
            "{}: {weights} weights where {expected} are expected",
            path.display()
        )));
    }
    Ok(())
}

/// Scores a candidate as the sum of its token weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearChoiceScorer {
    markers: Markers,
    features: FeatureMap,
    weights: Vec<f64>,
}

impl LinearChoiceScorer {
    pub fn new<I: IntoIterator<Item = String>>(vocabulary: I) -> Self {
        let features = FeatureMap::new(vocabulary);
        Self {
            markers: Markers::default(),
            weights: vec![0.0; features.len()],
            features,
        }
    }

    /// Vocabulary taken from every candidate of every choice set.
    pub fn for_choice_sets(sets: &[ChoiceSet]) -> Self {
        let markers = Markers::default();
        Self::new(content_tokens(
            sets.iter().flat_map(|s| s.candidates().iter()),
            &markers,
        ))
    }

    pub fn weight(&self, token: &str) -> f64 {
        self.weights[self.features.get(token)]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut model: Self = load_json(path)?;
        model.features.reindex();
        check_shape(path, model.weights.len(), model.features.len())?;
        Ok(model)
    }
}

impl ChoiceScorer for LinearChoiceScorer {
    fn markers(&self) -> &Markers {
        &self.markers
    }

    fn score(&self, seq: &TokenSequence) -> Result<f64> {
        Ok(dot(&self.weights, &self.features.bag(seq.interior(), &self.markers)))
    }
}

impl Trainable for LinearChoiceScorer {
    type Example = ChoiceSet;

    fn parameters(&self) -> &[f64] {
        &self.weights
    }

    fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    fn logits(&self, example: &ChoiceSet) -> Result<Vec<f64>> {
        example.candidates().iter().map(|c| self.score(c)).collect()
    }

    fn accumulate_gradient(&self, example: &ChoiceSet, dlogits: &[f64], grad: &mut [f64]) -> Result<()> {
        for (cand, &d) in example.candidates().iter().zip(dlogits) {
            for (i, c) in self.features.bag(cand.interior(), &self.markers) {
                grad[i] += d * c;
            }
        }
        Ok(())
    }
}

/// Two-class classifier over a concatenated pair, with separate weights per
/// class and per segment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearPairClassifier {
    markers: Markers,
    features: FeatureMap,
    /// Laid out as `[class][segment][feature]`.
    weights: Vec<f64>,
}

impl LinearPairClassifier {
    pub fn new<I: IntoIterator<Item = String>>(vocabulary: I) -> Self {
        let features = FeatureMap::new(vocabulary);
        Self {
            markers: Markers::default(),
            weights: vec![0.0; 4 * features.len()],
            features,
        }
    }

    pub fn for_sequences(seqs: &[TokenSequence]) -> Self {
        Self::new(content_tokens(seqs.iter(), &Markers::default()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut model: Self = load_json(path)?;
        model.features.reindex();
        check_shape(path, model.weights.len(), 4 * model.features.len())?;
        Ok(model)
    }

    fn offset(&self, class: usize, segment: usize) -> usize {
        (class * 2 + segment) * self.features.len()
    }

    fn segment_bags(&self, seq: &TokenSequence) -> Result<[Vec<(usize, f64)>; 2]> {
        let [a, b] = split_pair(seq, &self.markers)?;
        Ok([self.features.bag(a, &self.markers), self.features.bag(b, &self.markers)])
    }
}

fn softmax2(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e = logits.map(|l| (l - m).exp());
    let z = e[0] + e[1];
    [e[0] / z, e[1] / z]
}

impl PairClassifier for LinearPairClassifier {
    fn markers(&self) -> &Markers {
        &self.markers
    }

    fn classify(&self, seq: &TokenSequence) -> Result<[f64; 2]> {
        let l = self.logits(seq)?;
        Ok(softmax2([l[0], l[1]]))
    }
}

impl Trainable for LinearPairClassifier {
    type Example = TokenSequence;

    fn parameters(&self) -> &[f64] {
        &self.weights
    }

    fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    fn logits(&self, example: &TokenSequence) -> Result<Vec<f64>> {
        let bags = self.segment_bags(example)?;
        let f = self.features.len();
        Ok((0..2)
            .map(|class| {
                (0..2)
                    .map(|seg| {
                        let o = self.offset(class, seg);
                        dot(&self.weights[o..o + f], &bags[seg])
                    })
                    .sum()
            })
            .collect())
    }

    fn accumulate_gradient(&self, example: &TokenSequence, dlogits: &[f64], grad: &mut [f64]) -> Result<()> {
        let bags = self.segment_bags(example)?;
        for (class, &d) in dlogits.iter().enumerate() {
            for (seg, bag) in bags.iter().enumerate() {
                let o = self.offset(class, seg);
                for &(i, c) in bag {
                    grad[o + i] += d * c;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{classify_pair, score_choice};
    use crate::corpus::wrap_special;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    #[test]
    fn scores_sum_token_weights() {
        let mut m = LinearChoiceScorer::new(toks("a b c"));
        m.parameters_mut().copy_from_slice(&[1.0, 2.0, 3.0, -1.0]);
        let seq = wrap_special(toks("a a c zzz"), &Markers::default()).unwrap();
        assert_eq!(score_choice(&m, &seq).unwrap(), 1.0 + 1.0 + 3.0 - 1.0);
        assert_eq!(m.weight("qq"), -1.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let markers = Markers::default();
        let cs = ChoiceSet::new(
            "x",
            vec![
                wrap_special(toks("a b b"), &markers).unwrap(),
                wrap_special(toks("c zzz"), &markers).unwrap(),
            ],
            Some(1),
        )
        .unwrap();
        let mut m = LinearChoiceScorer::new(toks("a b c"));
        m.parameters_mut().copy_from_slice(&[0.3, -0.2, 0.5, 0.1]);
        // objective: sum_i dlogits_i * logit_i
        let dl = [0.7, -1.3];
        let mut grad = vec![0.0; 4];
        m.accumulate_gradient(&cs, &dl, &mut grad).unwrap();
        let objective =
            |m: &LinearChoiceScorer| -> f64 { m.logits(&cs).unwrap().iter().zip(dl).map(|(l, d)| l * d).sum() };
        for i in 0..4 {
            let h = 1e-6;
            let mut plus = m.clone();
            plus.parameters_mut()[i] += h;
            let mut minus = m.clone();
            minus.parameters_mut()[i] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-6, "{i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn pair_classifier_starts_symmetric() {
        let seq = TokenSequence::with_specials(toks("[CLS] a [SEP] b [SEP]"), &Markers::default()).unwrap();
        let m = LinearPairClassifier::for_sequences(std::slice::from_ref(&seq));
        assert_eq!(classify_pair(&m, &seq).unwrap(), [0.5, 0.5]);
        assert_eq!(m.parameters().len(), 4 * 3);
    }

    #[test]
    fn save_and_load() {
        let mut m = LinearChoiceScorer::new(toks("x y"));
        m.parameters_mut()[1] = 2.5;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        let back = LinearChoiceScorer::load(&path).unwrap();
        assert_eq!(back.weight("y"), 2.5);
        assert_eq!(back.parameters(), m.parameters());

        let mut c = LinearPairClassifier::new(toks("x y"));
        c.parameters_mut()[5] = -1.0;
        c.save(&path).unwrap();
        assert_eq!(LinearPairClassifier::load(&path).unwrap().parameters(), c.parameters());
        // a choice-scorer file has the wrong shape for a pair classifier
        m.save(&path).unwrap();
        assert!(LinearPairClassifier::load(&path).is_err());
    }
}
