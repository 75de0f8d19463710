//! Model interfaces used by the pipelines, and their reference implementations.
//!
//! The four traits mirror the four ways the pipelines consume a model:
//!
//! - [`MaskedLm`]: a distribution over the vocabulary for one masked position;
//! - [`PairClassifier`]: a two-class distribution over a concatenated pair;
//! - [`ChoiceScorer`]: an unnormalized plausibility score for one candidate;
//! - [`Generator`]: a next-token distribution given a prefix.
//!
//! Callers go through the free functions ([`predict_masked`], [`classify_pair`],
//! [`score_choice`], [`next_token_distribution`]), which check preconditions and
//! validate what the backend returns. All backends are `Send + Sync`; a backend
//! that cannot serve concurrent calls serializes them internally (see
//! [`service::ServiceBackend`]).

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenSequence;
use crate::error::{Error, Result};

pub mod count;
pub mod linear;
pub mod service;

pub use count::{BigramGenerator, CountMaskedLm, PllChoiceScorer, UniformMaskedLm, UnknownCountClassifier};
pub use linear::{LinearChoiceScorer, LinearPairClassifier};
pub use service::{serve, ServedModels, ServiceBackend};

/// Tolerance for a distribution's total mass.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-9;

pub const END_OF_TEXT: &str = "<|endoftext|>";

/// Special tokens shared by a backend and the sequences built for it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Markers {
    pub begin: String,
    pub end: String,
    pub mask: String,
    pub unknown: String,
    /// Separator between the two statements of a concatenated pair.
    pub separator: String,
}

impl Default for Markers {
    fn default() -> Self {
        Self {
            begin: "[CLS]".into(),
            end: "[SEP]".into(),
            mask: "[MASK]".into(),
            unknown: "[UNK]".into(),
            separator: "[SEP]".into(),
        }
    }
}

impl Markers {
    pub fn all(&self) -> [&str; 5] {
        [&self.begin, &self.end, &self.mask, &self.unknown, &self.separator]
    }

    pub fn is_special(&self, token: &str) -> bool {
        self.all().contains(&token)
    }
}

/// A probability distribution over a backend vocabulary.
///
/// Entries are non-negative and sum to one within [`DISTRIBUTION_TOLERANCE`].
/// Iteration order is the lexicographic token order, which is also the
/// tie-break order of [`VocabDistribution::argmax`].
#[derive(Debug, Clone, PartialEq)]
pub struct VocabDistribution(Arc<BTreeMap<String, f64>>);

impl VocabDistribution {
    pub fn new(probabilities: BTreeMap<String, f64>) -> Result<Self> {
        if probabilities.is_empty() {
            return Err(Error::Backend("empty distribution".into()));
        }
        let mut total = 0.0;
        for (token, &p) in &probabilities {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::Backend(format!("invalid probability {p} for {token:?}")));
            }
            total += p;
        }
        if (total - 1.0).abs() > DISTRIBUTION_TOLERANCE {
            return Err(Error::Backend(format!("distribution sums to {total}")));
        }
        Ok(Self(Arc::new(probabilities)))
    }

    /// Normalizes non-negative weights into a distribution.
    pub fn from_weights(weights: BTreeMap<String, f64>) -> Result<Self> {
        let total: f64 = weights.values().sum();
        if !(total.is_finite() && total > 0.0) || weights.values().any(|w| *w < 0.0) {
            return Err(Error::Backend(format!("cannot normalize weights with total {total}")));
        }
        Self::new(weights.into_iter().map(|(t, w)| (t, w / total)).collect())
    }

    /// Rebuilds a full distribution from a truncated top-k response: the
    /// listed log-probabilities plus a residual mass assigned to `catch_all`.
    /// Without `other_logp` the residual is whatever mass the top entries
    /// leave. The result is renormalized.
    pub fn from_top_k(top: &[(String, f64)], other_logp: Option<f64>, catch_all: &str) -> Result<Self> {
        let mut weights = BTreeMap::new();
        for (token, logp) in top {
            if logp.is_nan() || *logp > 1e-9 {
                return Err(Error::Backend(format!("invalid log-probability {logp} for {token:?}")));
            }
            *weights.entry(token.clone()).or_insert(0.0) += logp.min(0.0).exp();
        }
        let listed: f64 = weights.values().sum();
        let residual = match other_logp {
            Some(lp) if lp.is_nan() || lp > 1e-9 => {
                return Err(Error::Backend(format!("invalid residual log-probability {lp}")));
            }
            Some(lp) => lp.min(0.0).exp(),
            None => (1.0 - listed).max(0.0),
        };
        *weights.entry(catch_all.to_owned()).or_insert(0.0) += residual;
        Self::from_weights(weights)
    }

    pub fn prob(&self, token: &str) -> Option<f64> {
        self.0.get(token).copied()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.0.contains_key(token)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.0.iter().map(|(t, p)| (t.as_str(), *p))
    }

    /// Most probable token; the lexicographically first one among equals.
    pub fn argmax(&self) -> (&str, f64) {
        let mut best: Option<(&str, f64)> = None;
        for (t, p) in self.iter() {
            if best.is_none_or(|(_, bp)| p > bp) {
                best = Some((t, p));
            }
        }
        best.expect("distribution is non-empty")
    }

    pub fn total(&self) -> f64 {
        self.0.values().sum()
    }

    pub fn as_map(&self) -> &BTreeMap<String, f64> {
        &self.0
    }
}

/// A bidirectional masked language model.
pub trait MaskedLm: Send + Sync {
    fn markers(&self) -> &Markers;

    /// Every token the backend can assign probability to, markers included.
    fn vocabulary(&self) -> &[String];

    /// Distribution for the masked token at `position`. Called only through
    /// [`predict_masked`], which has already checked the mask.
    fn predict(&self, seq: &TokenSequence, position: usize) -> Result<VocabDistribution>;
}

/// A classifier over a concatenated statement pair. Class `k` means
/// "statement `k` is the nonsense one".
pub trait PairClassifier: Send + Sync {
    fn markers(&self) -> &Markers;

    fn classify(&self, seq: &TokenSequence) -> Result<[f64; 2]>;
}

/// Scores a single candidate sequence; higher is more plausible.
pub trait ChoiceScorer: Send + Sync {
    fn markers(&self) -> &Markers;

    fn score(&self, seq: &TokenSequence) -> Result<f64>;
}

/// An autoregressive language model.
pub trait Generator: Send + Sync {
    fn end_of_text(&self) -> &str;

    /// Distribution for the token following `prefix`; an empty prefix means
    /// start of text.
    fn next_token(&self, prefix: &[String]) -> Result<VocabDistribution>;
}

macro_rules! forward_impls {
    ($($ptr:ty),*) => {$(
        impl<T: MaskedLm + ?Sized> MaskedLm for $ptr {
            fn markers(&self) -> &Markers {
                (**self).markers()
            }
            fn vocabulary(&self) -> &[String] {
                (**self).vocabulary()
            }
            fn predict(&self, seq: &TokenSequence, position: usize) -> Result<VocabDistribution> {
                (**self).predict(seq, position)
            }
        }

        impl<T: PairClassifier + ?Sized> PairClassifier for $ptr {
            fn markers(&self) -> &Markers {
                (**self).markers()
            }
            fn classify(&self, seq: &TokenSequence) -> Result<[f64; 2]> {
                (**self).classify(seq)
            }
        }

        impl<T: ChoiceScorer + ?Sized> ChoiceScorer for $ptr {
            fn markers(&self) -> &Markers {
                (**self).markers()
            }
            fn score(&self, seq: &TokenSequence) -> Result<f64> {
                (**self).score(seq)
            }
        }

        impl<T: Generator + ?Sized> Generator for $ptr {
            fn end_of_text(&self) -> &str {
                (**self).end_of_text()
            }
            fn next_token(&self, prefix: &[String]) -> Result<VocabDistribution> {
                (**self).next_token(prefix)
            }
        }
    )*};
}

forward_impls!(&T, Arc<T>, Box<T>);

/// Distribution for the masked token at `position` of a wrapped sequence.
pub fn predict_masked<M: MaskedLm + ?Sized>(
    backend: &M,
    seq: &TokenSequence,
    position: usize,
) -> Result<VocabDistribution> {
    if !seq.has_specials() {
        return Err(Error::Sequence("masked prediction needs a wrapped sequence".into()));
    }
    let mask = &backend.markers().mask;
    match seq.tokens().get(position) {
        None => Err(Error::Sequence(format!(
            "position {position} out of range for length {}",
            seq.len()
        ))),
        Some(tok) if tok != mask => Err(Error::Sequence(format!(
            "position {position} holds {tok:?}, not the mask token"
        ))),
        Some(_) => backend.predict(seq, position),
    }
}

/// Splits a concatenated pair `[begin, a.., sep, b.., sep]` into its two
/// segments.
pub fn split_pair<'a>(seq: &'a TokenSequence, markers: &Markers) -> Result<[&'a [String]; 2]> {
    let tokens = seq.tokens();
    let malformed = |why: &str| Error::Sequence(format!("malformed concatenated pair: {why}"));
    if tokens.first() != Some(&markers.begin) {
        return Err(malformed("missing begin marker"));
    }
    let seps: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| **t == markers.separator)
        .map(|(i, _)| i)
        .collect();
    match seps.as_slice() {
        [mid, last] if *last == tokens.len() - 1 && *mid > 1 && last - mid > 1 => {
            Ok([&tokens[1..*mid], &tokens[mid + 1..*last]])
        }
        [] => Err(malformed("no separator")),
        _ => Err(malformed("expected exactly two separators around non-empty segments")),
    }
}

/// Two-class nonsense distribution for a concatenated pair.
pub fn classify_pair<C: PairClassifier + ?Sized>(backend: &C, seq: &TokenSequence) -> Result<[f64; 2]> {
    split_pair(seq, backend.markers())?;
    let dist = backend.classify(seq)?;
    if dist.iter().any(|p| !p.is_finite() || *p < 0.0) || (dist[0] + dist[1] - 1.0).abs() > DISTRIBUTION_TOLERANCE {
        return Err(Error::Backend(format!("invalid class distribution {dist:?}")));
    }
    Ok(dist)
}

/// Plausibility score of one candidate sequence.
pub fn score_choice<S: ChoiceScorer + ?Sized>(backend: &S, seq: &TokenSequence) -> Result<f64> {
    if !seq.has_specials() {
        return Err(Error::Sequence("choice scoring needs a wrapped sequence".into()));
    }
    let markers = backend.markers();
    if seq.interior().iter().all(|t| markers.is_special(t)) {
        return Err(Error::Sequence(
            "sequence has no content tokens between its markers".into(),
        ));
    }
    let score = backend.score(seq)?;
    if !score.is_finite() {
        return Err(Error::Backend(format!("non-finite score {score}")));
    }
    Ok(score)
}

/// Next-token distribution given `prefix`.
pub fn next_token_distribution<G: Generator + ?Sized>(backend: &G, prefix: &[String]) -> Result<VocabDistribution> {
    backend.next_token(prefix)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(tokens: &[&str]) -> TokenSequence {
        TokenSequence::with_specials(tokens.iter().map(|t| t.to_string()).collect(), &Markers::default()).unwrap()
    }

    #[test]
    fn distribution_validation() {
        let ok: BTreeMap<_, _> = [("a".to_string(), 0.25), ("b".to_string(), 0.75)].into();
        assert!(VocabDistribution::new(ok).is_ok());
        let short: BTreeMap<_, _> = [("a".to_string(), 0.25)].into();
        assert!(VocabDistribution::new(short).is_err());
        let neg: BTreeMap<_, _> = [("a".to_string(), -0.5), ("b".to_string(), 1.5)].into();
        assert!(VocabDistribution::new(neg).is_err());
    }

    #[test]
    fn argmax_breaks_ties_lexicographically() {
        let d: BTreeMap<_, _> = [("b".to_string(), 0.4), ("a".to_string(), 0.4), ("c".to_string(), 0.2)].into();
        let d = VocabDistribution::new(d).unwrap();
        assert_eq!(d.argmax().0, "a");
    }

    #[test]
    fn top_k_renormalization() {
        let top = vec![("a".to_string(), 0.5f64.ln()), ("b".to_string(), 0.25f64.ln())];
        let d = VocabDistribution::from_top_k(&top, Some(0.125f64.ln()), "<other>").unwrap();
        // 0.5 + 0.25 + 0.125 = 0.875
        assert!((d.prob("a").unwrap() - 0.5 / 0.875).abs() < 1e-12);
        assert!((d.prob("<other>").unwrap() - 0.125 / 0.875).abs() < 1e-12);
        assert!((d.total() - 1.0).abs() < 1e-12);

        let d = VocabDistribution::from_top_k(&top, None, "<other>").unwrap();
        assert!((d.prob("<other>").unwrap() - 0.25).abs() < 1e-12);
        assert!(VocabDistribution::from_top_k(&[("a".into(), 0.5)], None, "<other>").is_err());
    }

    #[test]
    fn pair_splitting() {
        let m = Markers::default();
        let good = seq(&["[CLS]", "a", "[SEP]", "b", "c", "[SEP]"]);
        let [s0, s1] = split_pair(&good, &m).unwrap();
        assert_eq!(s0, ["a".to_string()]);
        assert_eq!(s1.len(), 2);
        assert!(split_pair(&seq(&["[CLS]", "a", "b", "[SEP]"]), &m).is_err());
        let no_sep = TokenSequence::plain(vec!["[CLS]".into(), "a".into(), "b".into()]);
        assert!(split_pair(&no_sep, &m).is_err());
        assert!(split_pair(&seq(&["[CLS]", "[SEP]", "b", "[SEP]"]), &m).is_err());
    }
}
