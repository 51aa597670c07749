//! Context distillation: train only the cartridge so the student
//! `F(· | Z, q)` matches the teacher `F(· | C ⊕ q)` on self-study traces.

mod adam;
mod run;

pub use adam::{Adam, AdamConfig};
pub use run::{load_checkpoints, load_metrics, save_run, write_metrics_csv};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cartridge::{encode_cartridge, Cartridge};
use crate::error::{invalid, LabError, Result};
use crate::model::{backward, forward_cached, run_logits, DistillExample, FrozenModel, GradMode, KvCache};
use crate::numerics::{log_softmax, seeded_rng, Real};
use crate::selfstudy::{TraceDataset, TraceRecord};
use crate::Token;

/// Generator stream used for batch sampling.
const BATCH_STREAM: u64 = 0xba7c;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(invalid(format!("unknown precision '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Kept for configuration compatibility; batches are one trace per row.
    pub packed_seq_len: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub checkpoint_every: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Compute teacher logits once per trace up front instead of per batch.
    pub cache_teacher: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 8,
            packed_seq_len: 1024,
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            checkpoint_every: 10,
            seed: 0,
            precision: Precision::F32,
            cache_teacher: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(invalid("steps must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be >= 1"));
        }
        if self.checkpoint_every == 0 {
            return Err(invalid("checkpoint_every must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(invalid("learning_rate must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid("adam betas must lie in [0, 1)"));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(invalid("adam eps must be > 0"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    /// Student perplexity on the evaluation traces, when any were given.
    pub ppl: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub step: usize,
    pub cartridge: Cartridge<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointSeries<T> {
    pub run_id: String,
    pub checkpoints: Vec<Checkpoint<T>>,
    pub metrics: Vec<MetricsRow>,
    /// Batch loss at every step `0..=steps`.
    pub step_losses: Vec<f64>,
}

impl<T: Real> CheckpointSeries<T> {
    pub fn final_cartridge(&self) -> &Cartridge<T> {
        &self.checkpoints.last().expect("series has a final checkpoint").cartridge
    }
}

/// A trace prepared for the loss: student input, loss positions and the
/// teacher's logits at those positions.
pub fn teacher_example<T: Real>(
    model: &FrozenModel<T>,
    corpus_cache: &KvCache<T>,
    record: &TraceRecord,
) -> Result<DistillExample<T>> {
    record.validate()?;
    let (tokens, positions) = record.student_input();
    let (logits, _) = forward_cached(model, Some(corpus_cache), &tokens)?;
    let mut teacher = Vec::with_capacity(positions.len() * logits.vocab);
    for &p in &positions {
        teacher.extend_from_slice(logits.at(p));
    }
    Ok(DistillExample {
        tokens,
        positions,
        teacher,
    })
}

fn run_id<T: Real>(model: &FrozenModel<T>, init: &Cartridge<T>, dataset: &TraceDataset, cfg: &TrainConfig) -> String {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(model.digest().as_bytes());
    bytes.extend_from_slice(init.digest().as_bytes());
    bytes.extend_from_slice(&serde_json::to_vec(&dataset.records).unwrap_or_default());
    bytes.extend_from_slice(&serde_json::to_vec(cfg).unwrap_or_default());
    crate::bytes_digest(&bytes)[..16].to_string()
}

/// Trains `init` against the teacher that reads `corpus` before each trace.
///
/// Step `s` draws a batch (with replacement, from a generator seeded by
/// `cfg.seed`), records the masked-mean KL of the current cartridge, and then
/// applies an Adam update unless `s == cfg.steps`. Snapshots are taken at
/// step 0, every `checkpoint_every` steps and at the final step; evaluation
/// perplexity is measured at the same steps when `eval` is given.
pub fn distill_train<T: Real>(
    model: &FrozenModel<T>,
    init: &Cartridge<T>,
    corpus: &[Token],
    dataset: &TraceDataset,
    eval: Option<&TraceDataset>,
    cfg: &TrainConfig,
) -> Result<CheckpointSeries<T>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(invalid("training dataset is empty"));
    }
    if !init.matches(model.config()) {
        return Err(invalid("cartridge shape does not match the model"));
    }
    let corpus_cache = crate::selfstudy::teacher_cache(model, corpus)?;
    let cached: Option<Vec<DistillExample<T>>> = if cfg.cache_teacher {
        let ex: Vec<Result<DistillExample<T>>> = dataset
            .records
            .par_iter()
            .map(|r| teacher_example(model, &corpus_cache, r))
            .collect();
        Some(ex.into_iter().collect::<Result<_>>()?)
    } else {
        None
    };

    let mut cart = init.clone();
    let (nk, nv) = (cart.keys().len(), cart.values().len());
    let mut adam = Adam::<T>::new(cfg.adam(), &[nk, nv]);
    let mut rng = seeded_rng(cfg.seed, BATCH_STREAM);
    let mut series = CheckpointSeries {
        run_id: run_id(model, init, dataset, cfg),
        checkpoints: Vec::new(),
        metrics: Vec::new(),
        step_losses: Vec::with_capacity(cfg.steps + 1),
    };
    let base_steps = init.meta().training_steps;

    for step in 0..=cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.random_range(0..dataset.len()))
            .collect();
        let batch: Vec<DistillExample<T>> = match &cached {
            Some(all) => idx.iter().map(|&i| all[i].clone()).collect(),
            None => idx
                .par_iter()
                .map(|&i| teacher_example(model, &corpus_cache, &dataset.records[i]))
                .collect::<Vec<_>>()
                .into_iter()
                .collect::<Result<_>>()?,
        };
        let out = backward(model, &cart, &batch, GradMode::PrefixOnly)?;
        if !out.loss.is_finite() || !out.cartridge.norm().is_finite() {
            return Err(LabError::NonFiniteLoss {
                step,
                snapshot: encode_cartridge(&cart)?,
            });
        }
        series.step_losses.push(out.loss);

        if step % cfg.checkpoint_every == 0 || step == cfg.steps {
            cart.meta_mut().training_steps = base_steps + step as u64;
            let ppl = match eval {
                Some(ev) if !ev.is_empty() => Some(perplexity(model, Some(&cart), ev)?),
                _ => None,
            };
            series.metrics.push(MetricsRow {
                step,
                loss: out.loss,
                ppl,
            });
            series.checkpoints.push(Checkpoint {
                step,
                cartridge: cart.clone(),
            });
        }

        if step < cfg.steps {
            let (keys, values) = cart.tensors_mut();
            adam.step(&mut [keys, values], &[&out.cartridge.keys, &out.cartridge.values]);
        }
    }
    Ok(series)
}

fn perplexity_with<T: Real>(
    model: &FrozenModel<T>,
    prefix: Option<&KvCache<T>>,
    traces: &TraceDataset,
) -> Result<f64> {
    if traces.is_empty() {
        return Err(invalid("perplexity needs at least one trace"));
    }
    let parts: Vec<Result<(f64, usize)>> = traces
        .records
        .par_iter()
        .map(|r| {
            r.validate()?;
            let (tokens, positions) = r.student_input();
            let logits = run_logits(model, prefix, &tokens)?;
            let base = r.query.len() - 1;
            let mut nll = 0.0;
            for &p in &positions {
                let target = r.continuation[p - base];
                nll -= log_softmax(logits.at(p))[target as usize];
            }
            Ok((nll, positions.len()))
        })
        .collect();
    let mut nll = 0.0;
    let mut count = 0;
    for part in parts {
        let (a, b) = part?;
        nll += a;
        count += b;
    }
    Ok((nll / count as f64).exp())
}

/// `exp` of the mean masked next-token NLL of the student (model plus
/// optional cartridge) on the traces' continuations.
pub fn perplexity<T: Real>(
    model: &FrozenModel<T>,
    cartridge: Option<&Cartridge<T>>,
    traces: &TraceDataset,
) -> Result<f64> {
    perplexity_with(model, cartridge.map(|c| c.kv()), traces)
}

/// Perplexity of the teacher, which reads the whole corpus before each trace.
pub fn teacher_perplexity<T: Real>(model: &FrozenModel<T>, corpus: &[Token], traces: &TraceDataset) -> Result<f64> {
    let cache = crate::selfstudy::teacher_cache(model, corpus)?;
    perplexity_with(model, Some(&cache), traces)
}

/// First recorded step whose evaluation perplexity is at most `threshold`.
pub fn steps_to_threshold(metrics: &[MetricsRow], threshold: f64) -> Option<usize> {
    metrics
        .iter()
        .find(|r| r.ppl.is_some_and(|p| p <= threshold))
        .map(|r| r.step)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: usize, ppl: f64) -> MetricsRow {
        MetricsRow {
            step,
            loss: 0.0,
            ppl: Some(ppl),
        }
    }

    #[test]
    fn threshold_lookup() {
        let m = [row(0, 3.0), row(10, 1.2), row(20, 1.05)];
        assert_eq!(steps_to_threshold(&m, 1.10), Some(20));
        assert_eq!(steps_to_threshold(&m, 5.0), Some(0));
        assert_eq!(steps_to_threshold(&m, 1.0), None);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            checkpoint_every: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
