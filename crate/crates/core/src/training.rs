//! Fine-tuning loop: warmup/decay schedule, AdamW, seeded mini-batches.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::choice::{ChoiceSet, Selection};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, AccuracyReport};

/// Peak learning rates tried by the default sweep.
pub const SWEEP_LEARNING_RATES: [f64; 3] = [1e-5, 2e-5, 3e-5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    /// Peak learning rate.
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub adam_epsilon: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub num_train_epochs: usize,
    pub max_steps: usize,
    pub warmup_steps: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 1e-5,
            weight_decay: 0.1,
            adam_epsilon: 1e-8,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            num_train_epochs: 5,
            max_steps: 5336,
            warmup_steps: 320,
            seed: 42,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.warmup_steps == 0 || self.warmup_steps >= self.max_steps {
            return fail(format!(
                "need 0 < warmup_steps < max_steps, got {} and {}",
                self.warmup_steps, self.max_steps
            ));
        }
        if self.num_train_epochs == 0 {
            return fail("num_train_epochs must be at least 1".into());
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.adam_epsilon.is_finite() && self.adam_epsilon > 0.0) {
            return fail(format!("adam_epsilon must be positive, got {}", self.adam_epsilon));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to the peak at `warmup_steps`, then linear decay to
/// 0 at `max_steps`.
pub fn lr_at_step(step: usize, cfg: &TrainingConfig) -> Result<f64> {
    cfg.validate()?;
    if step > cfg.max_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} is past max_steps {}",
            cfg.max_steps
        )));
    }
    let peak = cfg.learning_rate;
    Ok(if step <= cfg.warmup_steps {
        peak * (step as f64 / cfg.warmup_steps as f64)
    } else {
        peak * ((cfg.max_steps - step) as f64 / (cfg.max_steps - cfg.warmup_steps) as f64)
    })
}

/// A model whose logits are differentiable in a flat parameter vector.
pub trait Trainable {
    type Example;

    fn parameters(&self) -> &[f64];
    fn parameters_mut(&mut self) -> &mut [f64];
    /// One logit per class or candidate.
    fn logits(&self, example: &Self::Example) -> Result<Vec<f64>>;
    /// Adds `Σ_k dlogits[k] · ∂logit_k/∂θ` into `grad`.
    fn accumulate_gradient(&self, example: &Self::Example, dlogits: &[f64], grad: &mut [f64]) -> Result<()>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Labeled<E> {
    pub example: E,
    pub label: usize,
}

/// Pairs each choice set with its gold index.
pub fn labeled_choice_sets(sets: Vec<ChoiceSet>) -> Result<Vec<Labeled<ChoiceSet>>> {
    sets.into_iter()
        .map(|s| match s.gold_index {
            Some(label) => Ok(Labeled { example: s, label }),
            None => Err(Error::InvalidArgument(format!(
                "choice set {} has no gold index",
                s.item_id
            ))),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    /// Mean cross-entropy of the batch, before the update.
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub records: Vec<StepRecord>,
    pub final_metrics: BTreeMap<String, f64>,
}

impl TrainingHistory {
    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    /// Writes `step,lr,loss` rows with a header.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn read_csv(path: &Path) -> Result<Vec<StepRecord>> {
        let mut r = csv::Reader::from_path(path)?;
        Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
    }

    /// Writes step count, final loss and final metrics as JSON.
    pub fn write_summary(&self, path: &Path, cfg: &TrainingConfig) -> Result<()> {
        let summary = serde_json::json!({
            "config": cfg,
            "steps": self.records.len(),
            "final_loss": self.final_loss(),
            "final_metrics": self.final_metrics,
        });
        let text = serde_json::to_string_pretty(&summary)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, cfg: &TrainingConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
            let update = (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + cfg.adam_epsilon);
            params[i] -= lr * (update + cfg.weight_decay * params[i]);
        }
    }
}

fn check_label<E>(item: &Labeled<E>, n: usize) -> Result<()> {
    if item.label >= n {
        return Err(Error::Training(format!(
            "label {} out of range for {n} logits",
            item.label
        )));
    }
    Ok(())
}

/// Minimizes mean cross-entropy over shuffled mini-batches. Stops after
/// `num_train_epochs` epochs or `max_steps` updates, whichever comes first.
pub fn fine_tune<M: Trainable>(
    mut model: M,
    data: &[Labeled<M::Example>],
    cfg: &TrainingConfig,
) -> Result<(M, TrainingHistory)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("training data"));
    }
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.num_train_epochs * steps_per_epoch).min(cfg.max_steps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(model.parameters().len());
    let mut history = TrainingHistory::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    'epochs: loop {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            if step == total_steps {
                break 'epochs;
            }
            step += 1;
            let lr = lr_at_step(step, cfg)?;
            let mut grad = vec![0.0; model.parameters().len()];
            let mut loss = 0.0;
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let item = &data[i];
                let logits = model.logits(&item.example)?;
                check_label(item, logits.len())?;
                let logp = log_softmax(&logits);
                loss -= logp[item.label] * scale;
                let dlogits: Vec<f64> = logp
                    .iter()
                    .enumerate()
                    .map(|(k, lp)| (lp.exp() - f64::from(u8::from(k == item.label))) * scale)
                    .collect();
                model.accumulate_gradient(&item.example, &dlogits, &mut grad)?;
            }
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss {loss} at step {step} (lr {lr})"
                )));
            }
            log::debug!("step {step} lr {lr:e} loss {loss:.6}");
            history.records.push(StepRecord { step, lr, loss });
            opt.step(model.parameters_mut(), &grad, lr, cfg);
        }
    }
    let train_acc = evaluate(&model, data)?;
    history
        .final_metrics
        .insert("train_accuracy".into(), train_acc.accuracy);
    if let Some(l) = history.final_loss() {
        history.final_metrics.insert("final_loss".into(), l);
    }
    Ok((model, history))
}

/// Accuracy of the argmax logit, lowest index on ties.
pub fn evaluate<M: Trainable>(model: &M, data: &[Labeled<M::Example>]) -> Result<AccuracyReport> {
    let mut predictions = Vec::with_capacity(data.len());
    for item in data {
        predictions.push(Selection::from_scores(model.logits(&item.example)?)?.index);
    }
    let gold: Vec<usize> = data.iter().map(|d| d.label).collect();
    accuracy(&predictions, &gold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// Position of the config in the grid.
    pub grid_index: usize,
    pub config: TrainingConfig,
    pub eval: AccuracyReport,
    pub history: TrainingHistory,
}

/// The default grid: the given config at each sweep learning rate.
pub fn learning_rate_grid(base: &TrainingConfig) -> Vec<TrainingConfig> {
    SWEEP_LEARNING_RATES
        .iter()
        .map(|&lr| TrainingConfig {
            learning_rate: lr,
            ..base.clone()
        })
        .collect()
}

/// Trains a copy of `model` per config and ranks by eval accuracy, highest
/// first. Equal accuracies keep grid order.
pub fn hyperparameter_sweep<M>(
    model: &M,
    grid: &[TrainingConfig],
    train: &[Labeled<M::Example>],
    eval: &[Labeled<M::Example>],
) -> Result<Vec<SweepResult>>
where
    M: Trainable + Clone + Send + Sync,
    M::Example: Sync,
{
    if grid.is_empty() {
        return Err(Error::EmptyInput("sweep grid"));
    }
    let mut results: Vec<SweepResult> = grid
        .par_iter()
        .enumerate()
        .map(|(grid_index, cfg)| {
            let (trained, mut history) = fine_tune(model.clone(), train, cfg)?;
            let report = evaluate(&trained, eval)?;
            history.final_metrics.insert("eval_accuracy".into(), report.accuracy);
            Ok(SweepResult {
                grid_index,
                config: cfg.clone(),
                eval: report,
                history,
            })
        })
        .collect::<Result<_>>()?;
    results.sort_by(|a, b| b.eval.accuracy.total_cmp(&a.eval.accuracy));
    Ok(results)
}
