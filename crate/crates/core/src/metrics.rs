//! Accuracy and corpus BLEU.
//!
//! BLEU here is corpus-level BLEU-4 over the reference tokenizer. Clipped
//! n-gram matches and candidate n-gram counts are summed over the corpus
//! before dividing. An order n ≥ 2 with no matches gets add-one smoothing;
//! an order with no candidate n-grams at all counts as precision 1. A zero
//! unigram precision is never smoothed and yields a score of 0. The
//! reference length of each example is the closest reference length, the
//! shorter one on ties.

use std::collections::HashMap;
use std::ops::{Add, AddAssign};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::tokenize_reference;
use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

pub fn accuracy(predictions: &[usize], gold: &[usize]) -> Result<AccuracyReport> {
    if predictions.len() != gold.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::EmptyInput("gold labels"));
    }
    let correct = predictions.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(AccuracyReport {
        correct,
        total: gold.len(),
        accuracy: correct as f64 / gold.len() as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    /// 0 to 100.
    pub score: f64,
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub candidate_length: usize,
    pub reference_length: usize,
}

/// Sufficient statistics for BLEU. Corpus statistics are the sum of the
/// per-example ones.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NgramStats {
    /// Clipped matches per order.
    pub matches: [usize; MAX_ORDER],
    /// Candidate n-grams per order.
    pub totals: [usize; MAX_ORDER],
    pub candidate_length: usize,
    pub reference_length: usize,
}

impl Add for NgramStats {
    type Output = Self;

    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

impl AddAssign for NgramStats {
    fn add_assign(&mut self, rhs: Self) {
        for n in 0..MAX_ORDER {
            self.matches[n] += rhs.matches[n];
            self.totals[n] += rhs.totals[n];
        }
        self.candidate_length += rhs.candidate_length;
        self.reference_length += rhs.reference_length;
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

fn closest_length(candidate: usize, references: &[Vec<String>]) -> usize {
    references
        .iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(candidate), r))
        .expect("at least one reference")
}

/// Statistics for one already tokenized example.
pub fn ngram_stats(candidate: &[String], references: &[Vec<String>]) -> Result<NgramStats> {
    if candidate.is_empty() {
        return Err(Error::EmptyInput("candidate tokens"));
    }
    if references.is_empty() {
        return Err(Error::EmptyInput("reference list"));
    }
    let mut stats = NgramStats {
        candidate_length: candidate.len(),
        reference_length: closest_length(candidate.len(), references),
        ..NgramStats::default()
    };
    for n in 1..=MAX_ORDER {
        let cand = ngram_counts(candidate, n);
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for reference in references {
            for (gram, c) in ngram_counts(reference, n) {
                let slot = max_ref.entry(gram).or_insert(0);
                *slot = (*slot).max(c);
            }
        }
        stats.totals[n - 1] = cand.values().sum();
        stats.matches[n - 1] = cand
            .iter()
            .map(|(gram, &c)| c.min(max_ref.get(gram).copied().unwrap_or(0)))
            .sum();
    }
    Ok(stats)
}

/// Turns summed statistics into a score.
pub fn bleu_from_stats(stats: &NgramStats) -> Result<BleuReport> {
    if stats.candidate_length == 0 {
        return Err(Error::EmptyInput("candidate tokens"));
    }
    let mut precisions = [1.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        let (m, t) = (stats.matches[n], stats.totals[n]);
        precisions[n] = if t == 0 {
            1.0
        } else if m == 0 && n > 0 {
            1.0 / (t as f64 + 1.0)
        } else {
            m as f64 / t as f64
        };
    }
    let (c, r) = (stats.candidate_length as f64, stats.reference_length as f64);
    let brevity_penalty = if c >= r { 1.0 } else { (1.0 - r / c).exp() };
    let score = if precisions[0] == 0.0 {
        0.0
    } else {
        let mean_log = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        (100.0 * brevity_penalty * mean_log.exp()).min(100.0)
    };
    Ok(BleuReport {
        score,
        precisions,
        brevity_penalty,
        candidate_length: stats.candidate_length,
        reference_length: stats.reference_length,
    })
}

fn example_stats<R: AsRef<str>>(id: &str, candidate: &str, references: &[R]) -> Result<NgramStats> {
    let label = |what: &str| Error::InvalidArgument(format!("example {id}: {what}"));
    let cand = match tokenize_reference(candidate) {
        Ok(t) if !t.is_empty() => t,
        _ => return Err(label("candidate is empty after tokenization")),
    };
    if references.is_empty() {
        return Err(label("no references"));
    }
    let refs: Vec<Vec<String>> = references
        .iter()
        .map(|r| tokenize_reference(r.as_ref()).map_err(|_| label("empty reference")))
        .collect::<Result<_>>()?;
    ngram_stats(&cand, &refs)
}

/// Corpus BLEU with explicit example ids, used in error messages.
pub fn corpus_bleu_with_ids<I, C, R>(ids: &[I], candidates: &[C], references: &[Vec<R>]) -> Result<BleuReport>
where
    I: AsRef<str> + Sync,
    C: AsRef<str> + Sync,
    R: AsRef<str> + Sync,
{
    if candidates.len() != references.len() || ids.len() != candidates.len() {
        return Err(Error::InvalidArgument(format!(
            "{} ids, {} candidates and {} reference lists",
            ids.len(),
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::EmptyInput("candidates"));
    }
    let per_example: Vec<NgramStats> = (0..candidates.len())
        .into_par_iter()
        .map(|i| example_stats(ids[i].as_ref(), candidates[i].as_ref(), &references[i]))
        .collect::<Result<_>>()?;
    let total = per_example.into_iter().fold(NgramStats::default(), Add::add);
    bleu_from_stats(&total)
}

/// Corpus BLEU; examples are named by position in errors.
pub fn corpus_bleu<C, R>(candidates: &[C], references: &[Vec<R>]) -> Result<BleuReport>
where
    C: AsRef<str> + Sync,
    R: AsRef<str> + Sync,
{
    let ids: Vec<String> = (0..candidates.len()).map(|i| i.to_string()).collect();
    corpus_bleu_with_ids(&ids, candidates, references)
}

pub fn per_example_bleu<R: AsRef<str>>(candidate: &str, references: &[R]) -> Result<BleuReport> {
    bleu_from_stats(&example_stats("0", candidate, references)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-9
    }

    #[test]
    fn accuracy_cases() {
        let r = accuracy(&[0, 1, 1], &[0, 1, 0]).unwrap();
        assert_eq!((r.correct, r.total), (2, 3));
        assert!(close(r.accuracy, 2.0 / 3.0));
        assert_eq!(accuracy(&[1, 0], &[1, 0]).unwrap().accuracy, 1.0);
        assert_eq!(accuracy(&[1, 0], &[0, 1]).unwrap().accuracy, 0.0);
        assert!(accuracy(&[1], &[1, 0]).is_err());
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn perfect_match() {
        let r = corpus_bleu(&["the cat sat on the mat ."], &[vec!["The cat sat on the mat."]]).unwrap();
        assert_eq!(r.score, 100.0);
        assert_eq!(r.brevity_penalty, 1.0);
    }

    #[test]
    fn worked_example() {
        let r = per_example_bleu("a b c d", &["a b c e"]).unwrap();
        assert!(close(r.precisions[0], 0.75));
        assert!(close(r.precisions[1], 2.0 / 3.0));
        assert!(close(r.precisions[2], 0.5));
        assert!(close(r.precisions[3], 0.5));
        assert!(close(r.score, 100.0 * 0.125f64.powf(0.25)));
        assert!((r.score - 59.46).abs() < 0.01);
    }

    #[test]
    fn no_overlap_is_zero() {
        assert_eq!(per_example_bleu("x y z", &["a b c"]).unwrap().score, 0.0);
    }

    #[test]
    fn short_candidate_orders_count_as_one() {
        let r = per_example_bleu("a b", &["a b"]).unwrap();
        assert_eq!(r.precisions, [1.0; 4]);
        assert_eq!(r.score, 100.0);
    }

    #[test]
    fn brevity() {
        let r = per_example_bleu("a b", &["a b c d"]).unwrap();
        assert!(close(r.brevity_penalty, (1.0f64 - 2.0).exp()));
        // closest length, shorter on ties
        let r = per_example_bleu("a b c", &["a b", "a b c d"]).unwrap();
        assert_eq!(r.reference_length, 2);
    }

    #[test]
    fn clipping() {
        let r = per_example_bleu("the the the", &["the cat"]).unwrap();
        assert!(close(r.precisions[0], 1.0 / 3.0));
    }

    #[test]
    fn empty_candidate_names_the_example() {
        let err = corpus_bleu_with_ids(&["a1", "b7"], &["ok", "  "], &[vec!["ok"], vec!["x"]]).unwrap_err();
        assert!(err.to_string().contains("b7"), "{err}");
        assert!(corpus_bleu(&["a"], &[Vec::<String>::new()]).is_err());
        assert!(corpus_bleu(&["a", "b"], &[vec!["a"]]).is_err());
    }

    #[test]
    fn report_field_names() {
        let r = per_example_bleu("a", &["a"]).unwrap();
        let v = serde_json::to_value(r).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            [
                "brevity_penalty",
                "candidate_length",
                "precisions",
                "reference_length",
                "score"
            ]
        );
        let a = serde_json::to_value(accuracy(&[0], &[0]).unwrap()).unwrap();
        assert_eq!(a, serde_json::json!({"correct": 1, "total": 1, "accuracy": 1.0}));
    }
}
