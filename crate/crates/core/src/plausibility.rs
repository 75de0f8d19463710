//! Masked-token pseudo-likelihood scoring of single statements.
//!
//! A wrapped statement is masked one position at a time, left to right. Each
//! variant goes to the masked model, and the probability it assigns to the
//! original token is accumulated in log space. The sum is the log of the
//! product of those probabilities; the more plausible of two statements is
//! the one with the larger product, optionally after per-token normalization.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backends::service::CATCH_ALL;
use crate::backends::{predict_masked, Markers, MaskedLm};
use crate::corpus::{prepare_statement, StatementPair, TokenSequence};
use crate::error::{Error, Result};

/// Probability substituted for a prediction of exactly zero.
pub const DEFAULT_FLOOR: f64 = 1e-12;

/// Normalized values closer than this are a tie.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Log of the probability product.
    #[default]
    Raw,
    /// Geometric mean per-token probability, `P^(1/N)`.
    LengthRoot,
    /// `P^(-1/N)`; lower is better.
    Perplexity,
}

impl Normalization {
    pub const ALL: [Normalization; 3] = [Normalization::Raw, Normalization::LengthRoot, Normalization::Perplexity];

    pub fn lower_is_better(self) -> bool {
        self == Normalization::Perplexity
    }
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalization::Raw => "raw",
            Normalization::LengthRoot => "length-root",
            Normalization::Perplexity => "perplexity",
        })
    }
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "raw" => Ok(Normalization::Raw),
            "length-root" => Ok(Normalization::LengthRoot),
            "perplexity" => Ok(Normalization::Perplexity),
            other => Err(Error::InvalidArgument(format!("unknown normalization {other:?}"))),
        }
    }
}

/// Scoring options shared by the pipelines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PllOptions {
    pub mode: Normalization,
    /// Skip the begin and end markers when masking.
    pub content_only: bool,
    pub floor: f64,
}

impl Default for PllOptions {
    fn default() -> Self {
        Self {
            mode: Normalization::Raw,
            content_only: false,
            floor: DEFAULT_FLOOR,
        }
    }
}

/// A copy of a sequence with exactly one position masked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedVariant {
    pub sequence: TokenSequence,
    pub masked_position: usize,
    pub original_token: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlausibilityScore {
    /// Natural log of the probability product; never positive.
    pub log_prob_sum: f64,
    /// Number of masked positions scored.
    pub token_count: usize,
    pub mode: Normalization,
    pub value: f64,
    /// Set when a zero probability was replaced by the floor.
    pub floored: bool,
}

impl PlausibilityScore {
    /// Re-normalizes from the stored log-probability sum.
    pub fn normalized(&self, mode: Normalization) -> Result<Self> {
        let raw = Self {
            mode: Normalization::Raw,
            value: self.log_prob_sum,
            ..*self
        };
        apply_normalization(&raw, mode)
    }

    /// The value oriented so that larger always means more plausible.
    pub fn preference(&self) -> f64 {
        if self.mode.lower_is_better() {
            -self.value
        } else {
            self.value
        }
    }
}

/// One variant per masked position, left to right. With `content_only` the
/// begin and end markers are left unmasked.
pub fn enumerate_masked_variants(
    seq: &TokenSequence,
    content_only: bool,
    markers: &Markers,
) -> Result<Vec<MaskedVariant>> {
    if !seq.has_specials() || seq.len() < 3 {
        return Err(Error::Sequence("masking needs a wrapped sequence".into()));
    }
    let positions = if content_only { 1..seq.len() - 1 } else { 0..seq.len() };
    Ok(positions
        .map(|i| MaskedVariant {
            sequence: seq.replaced(i, &markers.mask),
            masked_position: i,
            original_token: seq.tokens()[i].clone(),
        })
        .collect())
}

/// Pseudo-log-likelihood with the default probability floor.
pub fn pseudo_log_likelihood<M: MaskedLm + ?Sized>(
    seq: &TokenSequence,
    backend: &M,
    content_only: bool,
) -> Result<PlausibilityScore> {
    pseudo_log_likelihood_with_floor(seq, backend, content_only, DEFAULT_FLOOR)
}

/// Sums `ln P(original | variant)` over every masked variant.
///
/// A token the backend has no entry for takes the catch-all mass of a
/// truncated response, or else the unknown symbol's probability.
/// A probability of zero is replaced by `floor` and flagged on the result.
pub fn pseudo_log_likelihood_with_floor<M: MaskedLm + ?Sized>(
    seq: &TokenSequence,
    backend: &M,
    content_only: bool,
    floor: f64,
) -> Result<PlausibilityScore> {
    if !(floor > 0.0 && floor <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "probability floor {floor} not in (0, 1]"
        )));
    }
    let markers = backend.markers();
    let variants = enumerate_masked_variants(seq, content_only, markers)?;
    let mut log_prob_sum = 0.0;
    let mut floored = false;
    for v in &variants {
        let dist = predict_masked(backend, &v.sequence, v.masked_position)?;
        let p = dist
            .prob(&v.original_token)
            .or_else(|| dist.prob(CATCH_ALL))
            .or_else(|| dist.prob(&markers.unknown))
            .unwrap_or(0.0);
        let p = if p > 0.0 {
            p.min(1.0)
        } else {
            floored = true;
            floor
        };
        log_prob_sum += p.ln();
    }
    if floored {
        log::debug!("zero probability clamped to {floor} while scoring {seq}");
    }
    Ok(PlausibilityScore {
        log_prob_sum,
        token_count: variants.len(),
        mode: Normalization::Raw,
        value: log_prob_sum,
        floored,
    })
}

/// Converts a raw score to `mode`.
pub fn apply_normalization(score: &PlausibilityScore, mode: Normalization) -> Result<PlausibilityScore> {
    if score.mode != Normalization::Raw {
        return Err(Error::InvalidArgument(format!(
            "score is already {}-normalized",
            score.mode
        )));
    }
    if score.token_count == 0 {
        return Err(Error::InvalidArgument("token_count is zero".into()));
    }
    let n = score.token_count as f64;
    let value = match mode {
        Normalization::Raw => score.log_prob_sum,
        Normalization::LengthRoot => (score.log_prob_sum / n).exp(),
        Normalization::Perplexity => (-score.log_prob_sum / n).exp(),
    };
    Ok(PlausibilityScore { mode, value, ..*score })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlausibleChoice {
    /// Index of the more plausible statement.
    pub index: usize,
    pub tie: bool,
    pub scores: [PlausibilityScore; 2],
}

/// Picks the more plausible statement of a pair. Statements are
/// period-normalized, tokenized and wrapped first.
pub fn choose_plausible<M: MaskedLm + ?Sized>(
    pair: &StatementPair,
    backend: &M,
    mode: Normalization,
    content_only: bool,
) -> Result<PlausibleChoice> {
    choose_plausible_with(
        pair,
        backend,
        &PllOptions {
            mode,
            content_only,
            ..PllOptions::default()
        },
    )
}

pub fn choose_plausible_with<M: MaskedLm + ?Sized>(
    pair: &StatementPair,
    backend: &M,
    options: &PllOptions,
) -> Result<PlausibleChoice> {
    let markers = backend.markers();
    let mut scores = [None, None];
    for (slot, text) in scores.iter_mut().zip(pair.statements()) {
        let seq = prepare_statement(text, markers)?;
        let raw = pseudo_log_likelihood_with_floor(&seq, backend, options.content_only, options.floor)?;
        *slot = Some(apply_normalization(&raw, options.mode)?);
    }
    let scores = scores.map(|s| s.expect("both statements scored"));
    let (a, b) = (scores[0].preference(), scores[1].preference());
    let tie = (a - b).abs() <= TIE_TOLERANCE;
    let index = if !tie && b > a { 1 } else { 0 };
    Ok(PlausibleChoice { index, tie, scores })
}

/// Index of the statement that does not make sense.
pub fn predict_nonsense<M: MaskedLm + ?Sized>(
    pair: &StatementPair,
    backend: &M,
    mode: Normalization,
    content_only: bool,
) -> Result<usize> {
    Ok(1 - choose_plausible(pair, backend, mode, content_only)?.index)
}
