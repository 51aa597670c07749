//! Multiple-choice evaluation and the key-swap ablation: train one cartridge
//! per task from a shared initializer, combine task A's values with task B's
//! keys, and test whether the swapped cartridge still answers task A.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cartridge::{init_first_k, swap_keys, Cartridge};
use crate::distill::{distill_train, CheckpointSeries, TrainConfig};
use crate::error::{invalid, LabError, Result};
use crate::model::{run_logits, FrozenModel, KvCache};
use crate::numerics::{log_softmax, Real};
use crate::selfstudy::{tokens_of, EvalItem, SyntheticCorpus, TraceDataset};
use crate::stats::hypergeom_sf;
use crate::Token;

/// Fixed neutral document every ablation cartridge starts from. Its digest is
/// recorded in reports so runs stay comparable.
pub const INITIALIZER_TEXT: &str = include_str!("initializer.txt");

pub fn initializer_tokens() -> Vec<Token> {
    tokens_of(INITIALIZER_TEXT)
}

/// First-k cartridge over the shared initializer document.
pub fn shared_initializer<T: Real>(model: &FrozenModel<T>, p: usize) -> Result<Cartridge<T>> {
    init_first_k(model, &initializer_tokens(), p)
}

/// How option log-likelihoods are reduced to a score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreRule {
    /// Mean per-token log-likelihood; options of different length compete fairly.
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    pub accuracy: f64,
    pub correct: Vec<bool>,
    pub predictions: Vec<usize>,
}

/// Score of every option of `item` under the model reading `prefix` first.
pub fn option_scores<T: Real>(
    model: &FrozenModel<T>,
    prefix: Option<&KvCache<T>>,
    item: &EvalItem,
    rule: ScoreRule,
) -> Result<Vec<f64>> {
    item.validate()?;
    let base = item.question.len() - 1;
    item.options
        .iter()
        .map(|opt| {
            let mut input = item.question.clone();
            input.extend_from_slice(&opt[..opt.len() - 1]);
            let logits = run_logits(model, prefix, &input)?;
            let ll: f64 = opt
                .iter()
                .enumerate()
                .map(|(j, &t)| log_softmax(logits.at(base + j))[t as usize])
                .sum();
            Ok(match rule {
                ScoreRule::Mean => ll / opt.len() as f64,
                ScoreRule::Sum => ll,
            })
        })
        .collect()
}

/// Index of the highest score, lowest index among ties.
fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

/// Likelihood-ranking accuracy of the model with an optional cartridge.
pub fn evaluate_mc<T: Real>(
    model: &FrozenModel<T>,
    cartridge: Option<&Cartridge<T>>,
    items: &[EvalItem],
    rule: ScoreRule,
) -> Result<McResult> {
    if items.is_empty() {
        return Err(invalid("evaluation needs at least one item"));
    }
    let prefix = cartridge.map(|c| c.kv());
    let preds: Vec<Result<usize>> = items
        .par_iter()
        .map(|it| Ok(argmax(&option_scores(model, prefix, it, rule)?)))
        .collect();
    let predictions: Vec<usize> = preds.into_iter().collect::<Result<_>>()?;
    let correct: Vec<bool> = predictions
        .iter()
        .zip(items)
        .map(|(p, it)| *p == it.answer_index)
        .collect();
    let hits = correct.iter().filter(|&&c| c).count();
    Ok(McResult {
        accuracy: hits as f64 / items.len() as f64,
        correct,
        predictions,
    })
}

/// Significance level of the overlap test.
pub const OVERLAP_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub acc_baseline: f64,
    pub acc_trained: f64,
    pub acc_ablated: f64,
    pub n_eval: usize,
    pub correct_baseline: Vec<bool>,
    pub correct_trained: Vec<bool>,
    pub correct_ablated: Vec<bool>,
    pub n_train: usize,
    pub n_ablated: usize,
    pub overlap_count: usize,
    pub overlap_p_value: f64,
    pub transferable: bool,
}

/// Key-swapped accuracy beats the baseline and its correct answers overlap
/// significantly with the trained cartridge's.
pub fn is_transferable(acc_ablated: f64, acc_baseline: f64, overlap_p_value: f64) -> bool {
    acc_ablated > acc_baseline && overlap_p_value < OVERLAP_ALPHA
}

impl AblationReport {
    /// Assembles the report from the three evaluations of the same items.
    pub fn from_results(baseline: &McResult, trained: &McResult, ablated: &McResult) -> Result<Self> {
        let n = baseline.correct.len();
        if trained.correct.len() != n || ablated.correct.len() != n || n == 0 {
            return Err(invalid("evaluations cover different item counts"));
        }
        let count = |v: &[bool]| v.iter().filter(|&&c| c).count();
        let n_train = count(&trained.correct);
        let n_ablated = count(&ablated.correct);
        let overlap_count = trained
            .correct
            .iter()
            .zip(&ablated.correct)
            .filter(|(a, b)| **a && **b)
            .count();
        let overlap_p_value = hypergeom_sf(n as u64, n_train as u64, n_ablated as u64, overlap_count as u64)?;
        let acc = |c: usize| c as f64 / n as f64;
        let acc_baseline = acc(count(&baseline.correct));
        let acc_ablated = acc(n_ablated);
        Ok(Self {
            acc_baseline,
            acc_trained: acc(n_train),
            acc_ablated,
            n_eval: n,
            correct_baseline: baseline.correct.clone(),
            correct_trained: trained.correct.clone(),
            correct_ablated: ablated.correct.clone(),
            n_train,
            n_ablated,
            overlap_count,
            overlap_p_value,
            transferable: is_transferable(acc_ablated, acc_baseline, overlap_p_value),
        })
    }

    /// Per-question correctness as CSV (question, baseline, trained, ablated).
    pub fn write_correctness_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["question", "baseline", "trained", "ablated"])?;
        for i in 0..self.n_eval {
            let b = |v: bool| if v { "1" } else { "0" };
            w.write_record([
                i.to_string().as_str(),
                b(self.correct_baseline[i]),
                b(self.correct_trained[i]),
                b(self.correct_ablated[i]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One task of the ablation: its corpus, evaluation items and training traces.
pub struct AblationTask<'a> {
    pub corpus: &'a SyntheticCorpus,
    pub eval_items: &'a [EvalItem],
    pub traces: &'a TraceDataset,
}

pub struct AblationOutcome<T> {
    pub report: AblationReport,
    pub series_a: CheckpointSeries<T>,
    pub series_b: CheckpointSeries<T>,
    pub cartridge_ab: Cartridge<T>,
}

/// Trains `Z_A` and `Z_B` from `init`, builds `Z_AB` with `Z_A`'s values and
/// `Z_B`'s keys, and evaluates no cartridge, `Z_A` and `Z_AB` on task A.
pub fn run_ablation<T: Real>(
    model: &FrozenModel<T>,
    task_a: &AblationTask<'_>,
    task_b: &AblationTask<'_>,
    init: &Cartridge<T>,
    cfg: &TrainConfig,
    rule: ScoreRule,
) -> Result<AblationOutcome<T>> {
    let series_a = distill_train(model, init, &task_a.corpus.tokens, task_a.traces, None, cfg)?;
    let series_b = distill_train(model, init, &task_b.corpus.tokens, task_b.traces, None, cfg)?;
    let za = series_a.final_cartridge();
    let zb = series_b.final_cartridge();
    let cartridge_ab = swap_keys(za, zb)?;
    let baseline = evaluate_mc(model, None, task_a.eval_items, rule)?;
    let trained = evaluate_mc(model, Some(za), task_a.eval_items, rule)?;
    let ablated = evaluate_mc(model, Some(&cartridge_ab), task_a.eval_items, rule)?;
    let report = AblationReport::from_results(&baseline, &trained, &ablated)?;
    if report.overlap_count > report.n_train.min(report.n_ablated) {
        return Err(LabError::Degenerate("overlap exceeds correct counts".into()));
    }
    Ok(AblationOutcome {
        report,
        series_a,
        series_b,
        cartridge_ab,
    })
}
