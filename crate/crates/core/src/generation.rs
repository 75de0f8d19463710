//! Reason generation by autoregressive decoding, and the identity baseline.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{next_token_distribution, Generator, VocabDistribution};
use crate::corpus::{ensure_terminal_period, tokenize_reference, GenerationItem};
use crate::error::{Error, Result};

/// Emitted when decoding ends before producing any token.
pub const FALLBACK_OUTPUT: &str = ".";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[default]
    Greedy,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub max_new_tokens: usize,
    pub strategy: Strategy,
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub seed: u64,
    /// Tokens that end decoding and are kept in the output. End-of-text
    /// always ends decoding and is never kept.
    pub stop_tokens: Vec<String>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 30,
            strategy: Strategy::Greedy,
            temperature: 1.0,
            top_k: None,
            seed: 0,
            stop_tokens: vec![".".into()],
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be at least 1".into()));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.top_k == Some(0) {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Draws a token from `dist` after temperature scaling and optional top-k
/// truncation.
pub fn sample_token<R: Rng + ?Sized>(
    dist: &VocabDistribution,
    temperature: f64,
    top_k: Option<usize>,
    rng: &mut R,
) -> String {
    let mut entries: Vec<(&str, f64)> = dist
        .iter()
        .filter(|(_, p)| *p > 0.0)
        .map(|(t, p)| (t, p.ln() / temperature))
        .collect();
    if let Some(k) = top_k {
        // stable: equal logits keep vocabulary order
        entries.sort_by(|a, b| b.1.total_cmp(&a.1));
        entries.truncate(k);
    }
    let max = entries.iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = entries.iter().map(|e| (e.1 - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for ((token, _), w) in entries.iter().zip(&weights) {
        if u < *w {
            return (*token).to_owned();
        }
        u -= w;
    }
    // rounding left u just past the last bucket
    entries
        .iter()
        .zip(&weights)
        .rev()
        .find(|(_, w)| **w > 0.0)
        .map(|((t, _), _)| (*t).to_owned())
        .expect("distribution has positive mass")
}

/// Extends `prompt` one token at a time, feeding each chosen token back in.
/// Returns only the new tokens; never empty.
pub fn decode<G: Generator + ?Sized, R: Rng + ?Sized>(
    prompt: &[String],
    backend: &G,
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<Vec<String>> {
    cfg.validate()?;
    let eot = backend.end_of_text().to_owned();
    let mut context = prompt.to_vec();
    let mut output: Vec<String> = Vec::new();
    while output.len() < cfg.max_new_tokens {
        let dist = next_token_distribution(backend, &context).map_err(|e| Error::Generation {
            partial: output.join(" "),
            source: Box::new(e),
        })?;
        let token = match cfg.strategy {
            Strategy::Greedy => dist.argmax().0.to_owned(),
            Strategy::Sample => sample_token(&dist, cfg.temperature, cfg.top_k, rng),
        };
        if token == eot {
            break;
        }
        let stop = cfg.stop_tokens.contains(&token);
        context.push(token.clone());
        output.push(token);
        if stop {
            break;
        }
    }
    if output.is_empty() {
        output.push(FALLBACK_OUTPUT.to_owned());
    }
    Ok(output)
}

/// Generates a reason for a nonsense statement. The prompt is the
/// period-normalized statement; the result excludes it.
pub fn generate_reason<G: Generator + ?Sized>(statement: &str, backend: &G, cfg: &DecodeConfig) -> Result<String> {
    generate_seeded(statement, backend, cfg, cfg.seed)
}

fn generate_seeded<G: Generator + ?Sized>(
    statement: &str,
    backend: &G,
    cfg: &DecodeConfig,
    seed: u64,
) -> Result<String> {
    let prompt = tokenize_reference(&ensure_terminal_period(statement)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(decode(&prompt, backend, cfg, &mut rng)?.join(" "))
}

/// Outputs the statement itself.
pub fn identity_baseline(statement: &str) -> Result<String> {
    if statement.trim().is_empty() {
        return Err(Error::EmptyInput("statement"));
    }
    Ok(statement.to_owned())
}

#[derive(Clone, Copy)]
pub enum GenerationSystem<'a> {
    Identity,
    Lm(&'a dyn Generator),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchGeneration {
    /// `(id, candidate)` in input order, for the items that succeeded.
    pub candidates: Vec<(String, String)>,
    /// `(id, error message)` for the items that failed.
    pub failures: Vec<(String, String)>,
}

/// Runs `system` over every item. Item `i` samples with seed `cfg.seed + i`,
/// so results do not depend on scheduling.
pub fn batch_generate(
    items: &[GenerationItem],
    system: GenerationSystem<'_>,
    cfg: &DecodeConfig,
) -> Result<BatchGeneration> {
    if items.is_empty() {
        return Err(Error::EmptyInput("generation dataset"));
    }
    cfg.validate()?;
    let results: Vec<(String, Result<String>)> = items
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let out = match system {
                GenerationSystem::Identity => identity_baseline(&item.false_statement),
                GenerationSystem::Lm(g) => {
                    generate_seeded(&item.false_statement, g, cfg, cfg.seed.wrapping_add(i as u64))
                }
            };
            (item.id.clone(), out)
        })
        .collect();
    let mut batch = BatchGeneration::default();
    for (id, r) in results {
        match r {
            Ok(c) => batch.candidates.push((id, c)),
            Err(e) => batch.failures.push((id, e.to_string())),
        }
    }
    Ok(batch)
}

/// Writes `id,candidate` rows with a header.
pub fn write_candidates(path: &Path, candidates: &[(String, String)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "candidate"])?;
    for (id, c) in candidates {
        w.write_record([id, c])?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::backends::BigramGenerator;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    #[test]
    fn greedy_hand_trace() {
        let g = BigramGenerator::train(&["x is bad ."], 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = decode(&toks("x"), &g, &DecodeConfig::default(), &mut rng).unwrap();
        assert_eq!(out.join(" "), "is bad .");
    }

    #[test]
    fn prompt_is_period_normalized() {
        // "." is most often followed by "because"
        let g = BigramGenerator::train(&["x is bad . because y . z . because y"], 1.0).unwrap();
        let out = generate_reason("x is bad", &g, &DecodeConfig::default()).unwrap();
        assert_eq!(out, "because y .");
    }

    #[test]
    fn budget_of_one() {
        let g = BigramGenerator::train(&["x is bad ."], 1.0).unwrap();
        let cfg = DecodeConfig {
            max_new_tokens: 1,
            ..DecodeConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(decode(&toks("x"), &g, &cfg, &mut rng).unwrap(), toks("is"));
        // "." is followed by end-of-text, so nothing is produced
        assert_eq!(decode(&toks("."), &g, &cfg, &mut rng).unwrap(), toks("."));
    }

    #[test]
    fn end_of_text_first_falls_back() {
        let g = BigramGenerator::train(&["x y"], 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // y -> eot
        assert_eq!(
            decode(&toks("y"), &g, &DecodeConfig::default(), &mut rng).unwrap(),
            toks(".")
        );
    }

    #[test]
    fn seeded_sampling_repeats() {
        let g = BigramGenerator::train(&["a b c . a c b . b a ."], 1.0).unwrap();
        let cfg = DecodeConfig {
            strategy: Strategy::Sample,
            seed: 42,
            max_new_tokens: 12,
            ..DecodeConfig::default()
        };
        let a = generate_reason("a", &g, &cfg).unwrap();
        let b = generate_reason("a", &g, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.split(' ').count() <= 12);
    }

    #[test]
    fn low_temperature_sampling_is_greedy() {
        let probs: BTreeMap<String, f64> = [("a", 0.2), ("b", 0.5), ("c", 0.3)]
            .into_iter()
            .map(|(t, p)| (t.to_string(), p))
            .collect();
        let dist = VocabDistribution::new(probs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            assert_eq!(sample_token(&dist, 1e-6, None, &mut rng), dist.argmax().0);
        }
        for _ in 0..100 {
            assert_eq!(sample_token(&dist, 1.0, Some(1), &mut rng), "b");
        }
    }

    #[test]
    fn config_validation() {
        let bad = [
            DecodeConfig {
                max_new_tokens: 0,
                ..DecodeConfig::default()
            },
            DecodeConfig {
                temperature: 0.0,
                ..DecodeConfig::default()
            },
            DecodeConfig {
                top_k: Some(0),
                ..DecodeConfig::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err());
        }
    }

    struct Failing;

    impl Generator for Failing {
        fn end_of_text(&self) -> &str {
            "<eot>"
        }
        fn next_token(&self, prefix: &[String]) -> Result<VocabDistribution> {
            if prefix.len() >= 3 {
                return Err(Error::Backend("down".into()));
            }
            VocabDistribution::new([("z".to_string(), 1.0)].into())
        }
    }

    #[test]
    fn failure_keeps_partial_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        match decode(&toks("a"), &Failing, &DecodeConfig::default(), &mut rng) {
            Err(Error::Generation { partial, .. }) => assert_eq!(partial, "z z"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn identity() {
        assert_eq!(identity_baseline("He drinks apple.").unwrap(), "He drinks apple.");
        let once = identity_baseline("x y").unwrap();
        assert_eq!(identity_baseline(&once).unwrap(), once);
        assert!(identity_baseline("  ").is_err());
    }

    #[test]
    fn batch() {
        let items: Vec<GenerationItem> = (0..5)
            .map(|i| GenerationItem::new(i.to_string(), &format!("statement {i}"), vec![]).unwrap())
            .collect();
        let out = batch_generate(&items, GenerationSystem::Identity, &DecodeConfig::default()).unwrap();
        assert!(out.failures.is_empty());
        for (item, (id, c)) in items.iter().zip(&out.candidates) {
            assert_eq!((id, c), (&item.id, &item.false_statement));
        }
        assert!(batch_generate(&[], GenerationSystem::Identity, &DecodeConfig::default()).is_err());

        let out = batch_generate(&items, GenerationSystem::Lm(&Failing), &DecodeConfig::default()).unwrap();
        assert_eq!(out.failures.len(), 5);
    }
}
