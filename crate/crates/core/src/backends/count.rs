//! Deterministic count-based backends.
//!
//! These exist so that every pipeline can be checked against hand-computed
//! values. The masked model is a smoothed unigram model, so its prediction
//! ignores context entirely; the generator is a smoothed bigram model.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;

use crate::backends::{ChoiceScorer, Generator, Markers, MaskedLm, PairClassifier, VocabDistribution, END_OF_TEXT};
use crate::corpus::{tokenize_reference, TokenSequence};
use crate::error::{Error, Result};
use crate::plausibility::{pseudo_log_likelihood_with_floor, Normalization, PllOptions};

fn tokenized_lines<S: AsRef<str>>(corpus: &[S]) -> Result<Vec<Vec<String>>> {
    let lines: Vec<Vec<String>> = corpus
        .iter()
        .map(AsRef::as_ref)
        .filter(|l| !l.trim().is_empty())
        .map(tokenize_reference)
        .collect::<Result<_>>()?;
    if lines.is_empty() {
        return Err(Error::EmptyInput("corpus"));
    }
    Ok(lines)
}

/// Reads a corpus file, one text per line.
pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading corpus {}", path.display()), e))?;
    Ok(text.lines().map(str::to_owned).collect())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha.is_finite() && alpha > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "smoothing alpha must be positive, got {alpha}"
        )))
    }
}

/// Smoothed unigram masked model.
///
/// With corpus token counts `c(t)`, total `N` and observed token set `V`,
/// every masked position gets `P(t) = (c(t) + alpha) / (N + alpha * |V|)` for
/// `t` in `V`. Marker tokens and the unknown symbol belong to the vocabulary
/// but carry probability zero unless the corpus itself contains them.
#[derive(Debug, Clone)]
pub struct CountMaskedLm {
    markers: Markers,
    alpha: f64,
    counts: BTreeMap<String, u64>,
    total: u64,
    vocabulary: Vec<String>,
    distribution: VocabDistribution,
}

impl CountMaskedLm {
    pub fn train<S: AsRef<str>>(corpus: &[S], alpha: f64) -> Result<Self> {
        Self::train_with_markers(corpus, alpha, Markers::default())
    }

    pub fn train_with_markers<S: AsRef<str>>(corpus: &[S], alpha: f64, markers: Markers) -> Result<Self> {
        check_alpha(alpha)?;
        let mut counts = BTreeMap::new();
        for line in tokenized_lines(corpus)? {
            for token in line {
                *counts.entry(token).or_insert(0u64) += 1;
            }
        }
        let total: u64 = counts.values().sum();
        let denom = total as f64 + alpha * counts.len() as f64;
        let mut probs: BTreeMap<String, f64> = counts
            .iter()
            .map(|(t, &c)| (t.clone(), (c as f64 + alpha) / denom))
            .collect();
        for special in markers.all() {
            probs.entry(special.to_owned()).or_insert(0.0);
        }
        let vocabulary = probs.keys().cloned().collect();
        Ok(Self {
            markers,
            alpha,
            counts,
            total,
            vocabulary,
            distribution: VocabDistribution::new(probs)?,
        })
    }

    pub fn from_corpus_file(path: &Path, alpha: f64) -> Result<Self> {
        Self::train(&read_corpus(path)?, alpha)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn count(&self, token: &str) -> u64 {
        self.counts.get(token).copied().unwrap_or(0)
    }

    /// Total number of corpus tokens.
    pub fn total_tokens(&self) -> u64 {
        self.total
    }

    /// Tokens observed in the training corpus.
    pub fn observed(&self) -> impl Iterator<Item = &str> {
        self.counts.keys().map(String::as_str)
    }

    /// The position-independent distribution every masked slot receives.
    pub fn distribution(&self) -> &VocabDistribution {
        &self.distribution
    }
}

impl MaskedLm for CountMaskedLm {
    fn markers(&self) -> &Markers {
        &self.markers
    }

    fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    fn predict(&self, _seq: &TokenSequence, _position: usize) -> Result<VocabDistribution> {
        Ok(self.distribution.clone())
    }
}

/// Masked model that spreads mass uniformly over a fixed support.
#[derive(Debug, Clone)]
pub struct UniformMaskedLm {
    markers: Markers,
    vocabulary: Vec<String>,
    distribution: VocabDistribution,
}

impl UniformMaskedLm {
    pub fn new<S: AsRef<str>>(support: &[S]) -> Result<Self> {
        let support: BTreeSet<String> = support.iter().map(|s| s.as_ref().to_owned()).collect();
        if support.is_empty() {
            return Err(Error::EmptyInput("uniform support"));
        }
        let markers = Markers::default();
        let p = 1.0 / support.len() as f64;
        let mut probs: BTreeMap<String, f64> = support.into_iter().map(|t| (t, p)).collect();
        for special in markers.all() {
            probs.entry(special.to_owned()).or_insert(0.0);
        }
        Ok(Self {
            markers,
            vocabulary: probs.keys().cloned().collect(),
            distribution: VocabDistribution::new(probs)?,
        })
    }
}

impl MaskedLm for UniformMaskedLm {
    fn markers(&self) -> &Markers {
        &self.markers
    }

    fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    fn predict(&self, _seq: &TokenSequence, _position: usize) -> Result<VocabDistribution> {
        Ok(self.distribution.clone())
    }
}

/// Smoothed bigram generator.
///
/// Each corpus line is read as `<eot> t1 .. tn <eot>`, so start of text is the
/// end-of-text context. The output vocabulary `V` is the observed tokens plus
/// end-of-text, and `P(t | prev) = (c(prev, t) + alpha) / (c(prev, *) + alpha * |V|)`.
/// A context token outside `V` is treated as the unknown symbol, which has no
/// counts and therefore yields the uniform distribution.
#[derive(Debug, Clone)]
pub struct BigramGenerator {
    alpha: f64,
    end_of_text: String,
    vocabulary: Vec<String>,
    known: HashSet<String>,
    bigrams: HashMap<String, BTreeMap<String, u64>>,
}

impl BigramGenerator {
    pub fn train<S: AsRef<str>>(corpus: &[S], alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        let eot = END_OF_TEXT.to_owned();
        let mut bigrams: HashMap<String, BTreeMap<String, u64>> = HashMap::new();
        let mut vocab = BTreeSet::from([eot.clone()]);
        for line in tokenized_lines(corpus)? {
            let mut prev = eot.clone();
            for token in line.into_iter().chain(std::iter::once(eot.clone())) {
                vocab.insert(token.clone());
                *bigrams.entry(prev).or_default().entry(token.clone()).or_insert(0) += 1;
                prev = token;
            }
        }
        Ok(Self {
            alpha,
            end_of_text: eot,
            known: vocab.iter().cloned().collect(),
            vocabulary: vocab.into_iter().collect(),
            bigrams,
        })
    }

    pub fn from_corpus_file(path: &Path, alpha: f64) -> Result<Self> {
        Self::train(&read_corpus(path)?, alpha)
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    pub fn bigram_count(&self, prev: &str, next: &str) -> u64 {
        self.bigrams.get(prev).and_then(|m| m.get(next)).copied().unwrap_or(0)
    }
}

impl Generator for BigramGenerator {
    fn end_of_text(&self) -> &str {
        &self.end_of_text
    }

    fn next_token(&self, prefix: &[String]) -> Result<VocabDistribution> {
        let context = prefix.last().unwrap_or(&self.end_of_text);
        let row = if self.known.contains(context) {
            self.bigrams.get(context)
        } else {
            None
        };
        let row_total: u64 = row.map_or(0, |r| r.values().sum());
        let denom = row_total as f64 + self.alpha * self.vocabulary.len() as f64;
        let probs = self
            .vocabulary
            .iter()
            .map(|t| {
                let c = row.and_then(|r| r.get(t)).copied().unwrap_or(0);
                (t.clone(), (c as f64 + self.alpha) / denom)
            })
            .collect();
        VocabDistribution::new(probs)
    }
}

/// Pair classifier that blames the segment holding more unknown tokens.
///
/// With `u_k` unknown tokens in segment `k`, the nonsense probability of
/// statement `k` is `(u_k + 1) / (u_0 + u_1 + 2)`.
#[derive(Debug, Clone)]
pub struct UnknownCountClassifier {
    markers: Markers,
    known: HashSet<String>,
}

impl UnknownCountClassifier {
    pub fn new<I, S>(known: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            markers: Markers::default(),
            known: known.into_iter().map(Into::into).collect(),
        }
    }

    /// Treats every token observed by `lm` as known.
    pub fn from_masked_lm(lm: &CountMaskedLm) -> Self {
        Self::new(lm.observed())
    }

    fn unknowns(&self, segment: &[String]) -> usize {
        segment
            .iter()
            .filter(|t| !self.known.contains(*t) && !self.markers.is_special(t))
            .count()
    }
}

impl PairClassifier for UnknownCountClassifier {
    fn markers(&self) -> &Markers {
        &self.markers
    }

    fn classify(&self, seq: &TokenSequence) -> Result<[f64; 2]> {
        let [a, b] = crate::backends::split_pair(seq, &self.markers)?;
        let (ua, ub) = (self.unknowns(a) as f64, self.unknowns(b) as f64);
        let denom = ua + ub + 2.0;
        Ok([(ua + 1.0) / denom, (ub + 1.0) / denom])
    }
}

/// Choice scorer that ranks candidates by masked-token pseudo-likelihood.
///
/// The score is the normalized value oriented so that higher is better: the
/// raw log-probability sum, the length-root value, or the negated
/// perplexity.
#[derive(Debug, Clone)]
pub struct PllChoiceScorer<M> {
    backend: M,
    options: PllOptions,
}

impl<M: MaskedLm> PllChoiceScorer<M> {
    pub fn new(backend: M, mode: Normalization, content_only: bool) -> Self {
        Self {
            backend,
            options: PllOptions {
                mode,
                content_only,
                ..PllOptions::default()
            },
        }
    }

    pub fn with_options(backend: M, options: PllOptions) -> Self {
        Self { backend, options }
    }

    pub fn backend(&self) -> &M {
        &self.backend
    }
}

impl<M: MaskedLm> ChoiceScorer for PllChoiceScorer<M> {
    fn markers(&self) -> &Markers {
        self.backend.markers()
    }

    fn score(&self, seq: &TokenSequence) -> Result<f64> {
        let raw = pseudo_log_likelihood_with_floor(seq, &self.backend, self.options.content_only, self.options.floor)?;
        Ok(raw.normalized(self.options.mode)?.preference())
    }
}
