//! Scripted pipelines: pre-training the toy model, the key-swap ablation and
//! the initialization convergence race.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ablation::{run_ablation, shared_initializer, AblationReport, AblationTask, ScoreRule};
use crate::cartridge::{init_first_k, init_sci_with, Cartridge};
use crate::distill::{
    distill_train, save_run, steps_to_threshold, teacher_perplexity, AdamConfig, Precision, TrainConfig,
};
use crate::error::{invalid, LabError, Result};
use crate::model::{load_model, FrozenModel, ModelConfig, Pretrainer};
use crate::numerics::{seeded_rng, Real};
use crate::selfstudy::{
    generate_traces, make_corpus, EvalItem, SyntheticCorpus, TaskSpec, TraceConfig, TraceDataset,
};
use crate::stats::{paired_t, Alternative, PairedTTest};
use crate::Token;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub learning_rate: f64,
    /// Synthetic corpora in the pre-training pool, alternating task kinds.
    pub corpora: usize,
    pub num_entities: usize,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        Self {
            steps: 400,
            batch_size: 4,
            seq_len: 128,
            learning_rate: 3e-3,
            corpora: 8,
            num_entities: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSettings {
    /// `records` or `filings`.
    pub name: String,
    pub num_entities: usize,
    /// Keep only the first this-many attributes of the built-in task.
    pub num_attributes: Option<usize>,
}

impl Default for TaskSettings {
    fn default() -> Self {
        Self {
            name: "records".into(),
            num_entities: 25,
            num_attributes: None,
        }
    }
}

impl TaskSettings {
    pub fn spec(&self) -> Result<TaskSpec> {
        let spec = TaskSpec::builtin(&self.name, self.num_entities)?;
        Ok(match self.num_attributes {
            Some(n) => spec.with_attributes(n),
            None => spec,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceSettings {
    pub count: usize,
    pub eval_count: usize,
    pub temperature: f64,
    pub max_len: usize,
}

impl Default for TraceSettings {
    fn default() -> Self {
        Self {
            count: 64,
            eval_count: 16,
            temperature: 0.7,
            max_len: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitSettings {
    pub p: usize,
    /// SCI chunk size; `p / 8` when absent.
    pub chunk_size: Option<usize>,
    pub sorted: bool,
}

impl Default for InitSettings {
    fn default() -> Self {
        Self {
            p: 64,
            chunk_size: None,
            sorted: false,
        }
    }
}

impl InitSettings {
    pub fn chunk(&self) -> usize {
        self.chunk_size.unwrap_or((self.p / 8).max(1))
    }
}

/// Single JSON document configuring the scripted experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    /// Use this model file instead of pre-training one.
    pub model_path: Option<PathBuf>,
    pub pretrain: PretrainSettings,
    pub task: TaskSettings,
    /// Second task of the ablation.
    pub task_b: TaskSettings,
    pub traces: TraceSettings,
    pub init: InitSettings,
    pub train: TrainConfig,
    /// Top-k singular values in spectral summaries; `d_head` when absent.
    pub spectral_k: Option<usize>,
    pub eval_size: usize,
    pub score_rule: ScoreRule,
    /// Perplexity threshold of the convergence race.
    pub threshold: f64,
    /// Read the threshold as a ratio to the teacher's own perplexity.
    pub relative_threshold: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            model_path: None,
            pretrain: PretrainSettings::default(),
            task: TaskSettings::default(),
            task_b: TaskSettings {
                name: "filings".into(),
                ..TaskSettings::default()
            },
            traces: TraceSettings::default(),
            init: InitSettings::default(),
            train: TrainConfig::default(),
            spectral_k: None,
            eval_size: 200,
            score_rule: ScoreRule::Mean,
            threshold: 1.10,
            relative_threshold: false,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_slice(&fs::read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if let Some(p) = &self.model_path {
            if !p.exists() {
                return Err(invalid(format!("model file {} does not exist", p.display())));
            }
        }
        if self.init.p == 0 {
            return Err(invalid("init.p must be >= 1"));
        }
        if self.eval_size == 0 {
            return Err(invalid("eval_size must be >= 1"));
        }
        if !(self.threshold.is_finite() && self.threshold > 0.0) {
            return Err(invalid("threshold must be positive"));
        }
        Ok(())
    }
}

/// Seeds of every stochastic stage, derived from one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub model: u64,
    pub corpus_a: u64,
    pub corpus_b: u64,
    pub traces_a: u64,
    pub traces_b: u64,
    pub eval_traces: u64,
    pub train: u64,
}

impl StageSeeds {
    pub fn from_master(seed: u64) -> Self {
        Self {
            model: seed,
            corpus_a: seed.wrapping_add(1),
            corpus_b: seed.wrapping_add(2),
            traces_a: seed.wrapping_add(3),
            traces_b: seed.wrapping_add(4),
            eval_traces: seed.wrapping_add(5),
            train: seed.wrapping_add(6),
        }
    }

    pub fn pairs(&self) -> Vec<(&'static str, u64)> {
        vec![
            ("model", self.model),
            ("corpus_a", self.corpus_a),
            ("corpus_b", self.corpus_b),
            ("traces_a", self.traces_a),
            ("traces_b", self.traces_b),
            ("eval_traces", self.eval_traces),
            ("train", self.train),
        ]
    }
}

/// Pool of token windows the toy model is pre-trained on: seeded corpora of
/// both built-in tasks.
fn pretrain_pool(settings: &PretrainSettings, seed: u64) -> Result<Vec<Vec<Token>>> {
    (0..settings.corpora.max(1))
        .map(|j| {
            let name = if j % 2 == 0 { "records" } else { "filings" };
            let spec = TaskSpec::builtin(name, settings.num_entities)?;
            Ok(make_corpus(&spec, seed.wrapping_mul(1_000_003).wrapping_add(j as u64))?.0.tokens)
        })
        .collect()
}

/// Initializes the model from `seed` and pre-trains it on next-token
/// prediction over synthetic corpora. Returns the model and per-step losses.
pub fn pretrain_model(
    config: ModelConfig,
    settings: &PretrainSettings,
    seed: u64,
) -> Result<(FrozenModel<f32>, Vec<f64>)> {
    if settings.seq_len < 2 || settings.batch_size == 0 {
        return Err(invalid("pre-training needs seq_len >= 2 and batch_size >= 1"));
    }
    if settings.seq_len > config.max_positions {
        return Err(invalid("pre-training seq_len exceeds max_positions"));
    }
    let model = FrozenModel::<f32>::init(config, seed)?;
    let pool = pretrain_pool(settings, seed)?;
    let mut trainer = Pretrainer::new(
        model,
        AdamConfig {
            learning_rate: settings.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut rng = seeded_rng(seed, 0x9e7a);
    let mut losses = Vec::with_capacity(settings.steps);
    for _ in 0..settings.steps {
        let batch: Vec<Vec<Token>> = (0..settings.batch_size)
            .map(|_| {
                let doc = &pool[rng.random_range(0..pool.len())];
                let len = settings.seq_len.min(doc.len());
                let start = rng.random_range(0..=doc.len() - len);
                doc[start..start + len].to_vec()
            })
            .collect();
        losses.push(trainer.step(&batch)?);
    }
    Ok((trainer.finish(), losses))
}

/// The configured model file, or a freshly pre-trained model.
pub fn obtain_model(cfg: &ExperimentConfig, seed: u64) -> Result<FrozenModel<f32>> {
    match &cfg.model_path {
        Some(path) => load_model(path),
        None => Ok(pretrain_model(cfg.model, &cfg.pretrain, seed)?.0),
    }
}

/// A task's corpus, evaluation items and training / evaluation traces.
#[derive(Debug, Clone)]
pub struct PreparedTask {
    pub corpus: SyntheticCorpus,
    pub items: Vec<EvalItem>,
    pub traces: TraceDataset,
    pub eval_traces: TraceDataset,
}

pub fn prepare_task<T: Real>(
    model: &FrozenModel<T>,
    task: &TaskSettings,
    traces: &TraceSettings,
    corpus_seed: u64,
    trace_seed: u64,
    eval_seed: u64,
) -> Result<PreparedTask> {
    let (corpus, items) = make_corpus(&task.spec()?, corpus_seed)?;
    let tc = |count, seed| TraceConfig {
        count,
        seed,
        temperature: traces.temperature,
        max_len: traces.max_len,
        ..TraceConfig::default()
    };
    let train = generate_traces(model, &corpus, &tc(traces.count, trace_seed))?;
    let eval = if traces.eval_count > 0 {
        generate_traces(model, &corpus, &tc(traces.eval_count, eval_seed))?
    } else {
        TraceDataset::default()
    };
    Ok(PreparedTask {
        corpus,
        items,
        traces: train,
        eval_traces: eval,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub report: AblationReport,
    pub seeds: StageSeeds,
    pub initializer_digest: String,
    pub model_digest: String,
}

fn ablation_generic<T: Real>(
    cfg: &ExperimentConfig,
    model: &FrozenModel<T>,
    seeds: StageSeeds,
    out: &Path,
) -> Result<AblationSummary> {
    let a = prepare_task(model, &cfg.task, &cfg.traces, seeds.corpus_a, seeds.traces_a, seeds.eval_traces)?;
    let b_traces = TraceSettings {
        eval_count: 0,
        ..cfg.traces.clone()
    };
    let b = prepare_task(model, &cfg.task_b, &b_traces, seeds.corpus_b, seeds.traces_b, seeds.eval_traces)?;
    let n_eval = cfg.eval_size.min(a.items.len());
    let items = &a.items[..n_eval];
    let init = shared_initializer(model, cfg.init.p)?;
    let train = TrainConfig {
        seed: seeds.train,
        ..cfg.train.clone()
    };
    let outcome = run_ablation(
        model,
        &AblationTask {
            corpus: &a.corpus,
            eval_items: items,
            traces: &a.traces,
        },
        &AblationTask {
            corpus: &b.corpus,
            eval_items: &b.items,
            traces: &b.traces,
        },
        &init,
        &train,
        cfg.score_rule,
    )?;
    save_run(&out.join("run_a"), &outcome.series_a, &train)?;
    save_run(&out.join("run_b"), &outcome.series_b, &train)?;
    crate::cartridge::save_cartridge(&outcome.cartridge_ab, &out.join("ablation.crtg"))?;
    outcome.report.write_correctness_csv(&out.join("correctness.csv"))?;
    let summary = AblationSummary {
        report: outcome.report,
        seeds,
        initializer_digest: crate::token_digest(&crate::ablation::initializer_tokens()),
        model_digest: model.digest(),
    };
    fs::write(out.join("ablation_report.json"), serde_json::to_vec_pretty(&summary)?)?;
    Ok(summary)
}

/// Key-swap ablation end to end; writes `ablation_report.json`,
/// `correctness.csv`, both training runs and the swapped cartridge to `out`.
pub fn run_ablation_experiment(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<AblationSummary> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let seeds = StageSeeds::from_master(seed);
    let model = obtain_model(cfg, seeds.model)?;
    match cfg.train.precision {
        Precision::F32 => ablation_generic(cfg, &model, seeds, out),
        Precision::F64 => ablation_generic(cfg, &model.cast::<f64>(), seeds, out),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub run_seed: u64,
    pub sci_steps: usize,
    pub sci_reached: bool,
    pub first_k_steps: usize,
    pub first_k_reached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub threshold: f64,
    pub relative_threshold: bool,
    /// Perplexity level actually compared against.
    pub threshold_ppl: f64,
    pub teacher_ppl: f64,
    pub chunk_size: usize,
    pub p: usize,
    pub max_steps: usize,
    pub rows: Vec<ConvergenceRow>,
    pub mean_sci_steps: f64,
    pub mean_first_k_steps: f64,
    /// `H1: mean(sci - first_k) < 0`; absent when the differences have zero variance.
    pub ttest: Option<PairedTTest>,
    pub ttest_status: String,
    pub seeds: StageSeeds,
}

/// Run seed of the `i`-th convergence pair.
pub fn convergence_run_seed(master: u64, i: usize) -> u64 {
    master.wrapping_add(100 + i as u64)
}

fn convergence_generic<T: Real>(
    cfg: &ExperimentConfig,
    model: &FrozenModel<T>,
    seeds: StageSeeds,
    n_seeds: usize,
    out: &Path,
) -> Result<ConvergenceReport> {
    let task = prepare_task(model, &cfg.task, &cfg.traces, seeds.corpus_a, seeds.traces_a, seeds.eval_traces)?;
    if task.eval_traces.is_empty() {
        return Err(invalid("convergence needs evaluation traces (traces.eval_count >= 1)"));
    }
    let teacher_ppl = teacher_perplexity(model, &task.corpus.tokens, &task.eval_traces)?;
    let threshold_ppl = if cfg.relative_threshold {
        cfg.threshold * teacher_ppl
    } else {
        cfg.threshold
    };
    let p = cfg.init.p;
    let c = cfg.init.chunk();
    let first_k = init_first_k(model, &task.corpus.tokens, p)?;
    let runs_dir = out.join("runs");
    fs::create_dir_all(&runs_dir)?;

    let race = |name: &str, init: &Cartridge<T>, train: &TrainConfig, run_seed: u64| -> Result<(usize, bool)> {
        let series = distill_train(model, init, &task.corpus.tokens, &task.traces, Some(&task.eval_traces), train)?;
        crate::distill::write_metrics_csv(&series.metrics, &runs_dir.join(format!("{name}-{run_seed}.csv")))?;
        Ok(match steps_to_threshold(&series.metrics, threshold_ppl) {
            Some(s) => (s, true),
            // Censored: never crossed within the budget.
            None => (train.steps, false),
        })
    };

    let mut rows = Vec::with_capacity(n_seeds);
    for i in 0..n_seeds {
        let run_seed = convergence_run_seed(seeds.train, i);
        let train = TrainConfig {
            seed: run_seed,
            ..cfg.train.clone()
        };
        let sci = init_sci_with(model, &task.corpus.tokens, p, c, run_seed, cfg.init.sorted)?;
        let (sci_steps, sci_reached) = race("sci", &sci, &train, run_seed)?;
        let (first_k_steps, first_k_reached) = race("first_k", &first_k, &train, run_seed)?;
        rows.push(ConvergenceRow {
            run_seed,
            sci_steps,
            sci_reached,
            first_k_steps,
            first_k_reached,
        });
    }

    let x: Vec<f64> = rows.iter().map(|r| r.sci_steps as f64).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.first_k_steps as f64).collect();
    let (ttest, ttest_status) = match paired_t(&x, &y, Alternative::Less) {
        Ok(t) => (Some(t), "ok".to_string()),
        Err(LabError::Degenerate(msg)) | Err(LabError::InvalidInput(msg)) => (None, msg),
        Err(e) => return Err(e),
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let report = ConvergenceReport {
        threshold: cfg.threshold,
        relative_threshold: cfg.relative_threshold,
        threshold_ppl,
        teacher_ppl,
        chunk_size: c,
        p,
        max_steps: cfg.train.steps,
        mean_sci_steps: mean(&x),
        mean_first_k_steps: mean(&y),
        rows,
        ttest,
        ttest_status,
        seeds,
    };
    let mut w = csv::Writer::from_path(out.join("steps_to_threshold.csv"))?;
    for r in &report.rows {
        w.serialize(r)?;
    }
    w.flush()?;
    fs::write(out.join("ttest.json"), serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}

/// SCI versus first-k: steps until evaluation perplexity crosses the
/// threshold, over `n_seeds` paired runs, plus the one-sided paired t-test.
pub fn run_convergence(cfg: &ExperimentConfig, seed: u64, n_seeds: usize, out: &Path) -> Result<ConvergenceReport> {
    cfg.validate()?;
    if n_seeds == 0 {
        return Err(invalid("convergence needs at least one seed"));
    }
    fs::create_dir_all(out)?;
    let seeds = StageSeeds::from_master(seed);
    let model = obtain_model(cfg, seeds.model)?;
    match cfg.train.precision {
        Precision::F32 => convergence_generic(cfg, &model, seeds, n_seeds, out),
        Precision::F64 => convergence_generic(cfg, &model.cast::<f64>(), seeds, n_seeds, out),
    }
}
