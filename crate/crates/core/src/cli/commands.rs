use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use crate::ablation::evaluate_mc;
use crate::analysis::{
    cross_cartridge_similarity, rotation_series, spectral_summary, write_rotations_csv,
    write_similarity_csv, write_slot_rotations_csv, write_spectra_csv, write_spectra_summary_csv,
};
use crate::cartridge::{
    init_first_k, init_rvi, init_sci_with, load_cartridge, save_cartridge, Cartridge, Role,
};
use crate::distill::{distill_train, load_checkpoints, save_run, Precision, TrainConfig};
use crate::model::{load_model, save_model, FrozenModel};
use crate::numerics::Real;
use crate::selfstudy::{
    diversity_sweep, generate_traces, load_corpus, load_eval_items, load_traces, make_corpus,
    save_corpus, save_eval_items, save_traces, write_diversity_csv, TaskSpec, TraceConfig,
};
use crate::stats::{hypergeom_test, paired_t, Alternative};

use super::experiments::{pretrain_model, run_ablation_experiment, run_convergence, ExperimentConfig};
use super::manifest::RunManifest;
use super::{
    Cli, Command, ConvergenceArgs, EvalArgs, ExperimentArgs, GenCorpusArgs, GenTracesArgs, InitArgs,
    NgramArgs, PretrainArgs, RoleArg, RotationsArgs, SchemeArg, SimilarityArgs, SpectraArgs,
    StatsCommand, TrainArgs, UsageError, LAB_DIR_ENV,
};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn require_seed(seed: Option<u64>, command: &str) -> Result<u64> {
    seed.ok_or_else(|| usage(format!("--seed is required for `{command}`")))
}

fn run_dir(out: Option<PathBuf>, command: &str) -> Result<PathBuf> {
    let dir = match out {
        Some(d) => d,
        None => {
            let root = std::env::var_os(LAB_DIR_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("cartlab-runs"));
            root.join(command)
        }
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating run directory {}", dir.display()))?;
    Ok(dir)
}

fn config_value<S: serde::Serialize>(cfg: &S) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(cfg)?)
}

pub(super) fn execute(cli: Cli, argv: &[String]) -> Result<()> {
    let out = cli.out;
    match cli.command {
        Command::GenCorpus(a) => gen_corpus(a, out, argv),
        Command::GenTraces(a) => gen_traces(a, out, argv),
        Command::Pretrain(a) => pretrain(a, out, argv),
        Command::Init(a) => init(a, out, argv),
        Command::Train(a) => train(a, out, argv),
        Command::Spectra(a) => spectra(a, out, argv),
        Command::Rotations(a) => rotations(a, out, argv),
        Command::Similarity(a) => similarity(a, out, argv),
        Command::Ablate(a) => ablate(a, out, argv),
        Command::Eval(a) => eval(a, out, argv),
        Command::Convergence(a) => convergence(a, out, argv),
        Command::NgramSweep(a) => ngram_sweep(a, out, argv),
        Command::Stats(s) => stats(s),
    }
}

fn gen_corpus(a: GenCorpusArgs, out: Option<PathBuf>, argv: &[String]) -> Result<()> {
    let seed = require_seed(a.seed, "gen-corpus")?;
    let mut spec = TaskSpec::builtin(&a.task, a.entities).map_err(|e| usage(e.to_string()))?;
    if let Some(n) = a.attributes {
        spec = spec.with_attributes(n);
    }
    let dir = run_dir(out, "gen-corpus")?;
    let (corpus, items) = make_corpus(&spec, seed)?;
    save_corpus(&corpus, &dir.join("corpus.bin"))?;
    save_eval_items(&items, &dir.join("eval.jsonl"))?;
    let mut m = RunManifest::new("gen-corpus", argv);
    m.seed("corpus", seed);
    m.config = config_value(&spec)?;
    m.finish(&dir)?;
    println!(
        "corpus: {} tokens, {} facts, {} eval items -> {}",
        corpus.len(),
        corpus.facts.len(),
        items.len(),
        dir.display()
    );
    Ok(())
}

fn gen_traces(a: GenTracesArgs, out: Option<PathBuf>, argv: &[String]) -> Result<()> {
    let seed = require_seed(a.seed, "gen-traces")?;
    let model = load_model(&a.model)?;
    let corpus = load_corpus(&a.corpus)?;
    let cfg = TraceConfig {
        count: a.count,
        seed,
        temperature: a.temperature,
        max_len: a.max_len,
        ..TraceConfig::default()
    };
    let dir = run_dir(out, "gen-traces")?;
    let ds = generate_traces(&model, &corpus, &cfg)?;
    save_traces(&ds, &dir.join("traces.jsonl"))?;
    let mut m = RunManifest::new("gen-traces", argv);
    m.seed("traces", seed);
    m.config = config_value(&cfg)?;
    m.input(&a.model)?.input(&a.corpus)?;
    m.finish(&dir)?;
    println!("{} traces -> {}", ds.len(), dir.display());
    Ok(())
}

fn load_experiment(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn pretrain(a: PretrainArgs, out: Option<PathBuf>, argv: &[String]) -> Result<()> {
    let seed = require_seed(a.seed, "pretrain")?;
    let mut cfg = load_experiment(a.config.as_deref())?;
    if let Some(s) = a.steps {
        cfg.pretrain.steps = s;
    }
    let dir = run_dir(out, "pretrain")?;
    let (model, losses) = pretrain_model(cfg.model, &cfg.pretrain, seed)?;
    save_model(&model, &dir.join("model.clab"))?;
    let mut w = csv::Writer::from_path(dir.join("pretrain_loss.csv"))?;
    w.write_record(["step", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    w.flush()?;
    let mut m = RunManifest::new("pretrain", argv);
    m.seed("model", seed);
    m.config = serde_json::json!({ "model": cfg.model, "pretrain": cfg.pretrain });
    m.finish(&dir)?;
    println!(
        "pre-trained {} steps, final loss {:.4} -> {}",
        losses.len(),
        losses.last().copied().unwrap_or(f64::NAN),
        dir.display()
    );
    Ok(())
}

fn build_init<T: Real>(a: &InitArgs, model: &FrozenModel<T>, seed: Option<u64>) -> Result<Cartridge<T>> {
    let corpus = || -> Result<Vec<crate::Token>> {
        let path = a
            .corpus
            .as_ref()
            .ok_or_else(|| usage("--corpus is required for first-k and sci"))?;
        Ok(load_corpus(path)?.tokens)
    };
    Ok(match a.scheme {
        SchemeArg::Rvi => init_rvi(model.config(), a.p, require_seed(seed, "init rvi")?)?,
        SchemeArg::FirstK => init_first_k(model, &corpus()?, a.p)?,
        SchemeArg::Sci => {
            let seed = require_seed(seed, "init sci")?;
            let c = a.chunk.unwrap_or((a.p / 8).max(1));
            init_sci_with(model, &corpus()?, a.p, c, seed, a.sorted)?
        }
    })
}

fn init(a: InitArgs, out: Option<PathBuf>, argv: &[String]) -> Result<()> {
    if a.scheme != SchemeArg::FirstK && a.seed.is_none() {
        return Err(usage("--seed is required for `init rvi` and `init sci`"));
    }
    let model = load_model(&a.model)?;
    let dir = run_dir(out, "init")?;
    let path = dir.join("cartridge.crtg");
    let digest = match Precision::from(a.precision) {
        Precision::F32 => {
            let c = build_init(&a, &model, a.seed)?;
            save_cartridge(&c, &path)?;
            c.digest()
        }
        Precision::F64 => {
            let c = build_init(&a, &model.cast::<f64>(), a.seed)?;
            save_cartridge(&c, &path)?;
            c.digest()
        }
    };
    let mut m = RunManifest::new("init", argv);
    if let Some(s) = a.seed {
        m.seed("init", s);
    }
    m.input(&a.model)?;
    if let Some(c) = &a.corpus {
        m.input(c)?;
    }
    m.finish(&dir)?;
    println!("cartridge {digest} -> {}", path.display());
    Ok(())
}

fn train_generic<T: Real>(
    model: &FrozenModel<T>,
    a: &TrainArgs,
    cfg: &TrainConfig,
    dir: &Path,
) -> Result<(f64, f64, usize)> {
    let corpus = load_corpus(&a.corpus)?;
    let traces = load_traces(&a.traces)?;
    let eval = a.eval_traces.as_deref().map(load_traces).transpose()?;
    let init: Cartridge<T> = load_cartridge(&a.init)?;
    let series = distill_train(model, &init, &corpus.tokens, &traces, eval.as_ref(), cfg)?;
    save_run(dir, &series, cfg)?;
    let first = series.step_losses[0];
    let last = *series.step_losses.last().expect("at least one step");
    Ok((first, last, series.checkpoints.len()))
}

fn train(a: TrainArgs, out: Option<PathBuf>, argv: &[String]) -> Result<()> {
    let seed = require_seed(a.seed, "train")?;
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => serde_json::from_slice(&fs::read(p)?).with_context(|| format!("reading {}", p.display()))?,
        None => TrainConfig::default(),
    };
    cfg.seed = seed;
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    if let Some(v) = a.precision {
        cfg.precision = v.into();
    }
    if a.no_teacher_cache {
        cfg.cache_teacher = false;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let model = load_model(&a.model)?;
    let dir = run_dir(out, "train")?;
    let (first, last, n) = match cfg.precision {
        Precision::F32 => train_generic(&model, &a, &cfg, &dir)?,
        Precision::F64 => train_generic(&model.cast::<f64>(), &a, &cfg, &dir)?,
    };
    let mut m = RunManifest::new("train", argv);
    m.seed("train", seed);
    m.config = config_value(&cfg)?;
    m.input(&a.model)?.input(&a.corpus)?.input(&a.traces)?.input(&a.init)?;
    if let Some(e) = &a.eval_traces {
        m.input(e)?;
    }
    m.finish(&dir)?;
    println!(
        "trained {} steps: loss {first:.6} -> {last:.6}, {n} checkpoints -> {}",
        cfg.steps,
        dir.display()
    );
    Ok(())
}

fn spectra(a: SpectraArgs, out: Option<PathBuf>, argv: &[String]) -> Result<()> {
    let cart: Cartridge<f64> = load_cartridge(&a.cartridge)?;
    let k = a.k.unwrap_or(cart.shape().3);
    let roles: Vec<Role> = match a.role {
        RoleArg::Keys => vec![Role::Keys],
        RoleArg::Values => vec![Role::Values],
        RoleArg::Both => Role::BOTH.to_vec(),
    };
    let summaries = roles
        .iter()
        .map(|&r| spectral_summary(&cart, r, k))
        .collect::<crate::Result<Vec<_>>>()
        .map_err(|e| match e {
            crate::LabError::InvalidInput(m) => usage(m),
            other => other.into(),
        })?;
    let dir = run_dir(out, "spectra")?;
    write_spectra_csv(&summaries, &dir.join("spectra.csv"))?;
    write_spectra_summary_csv(&summaries, &dir.join("spectra_summary.csv"))?;
    let mut m = RunManifest::new("spectra", argv);
    m.input(&a.cartridge)?;
    m.config = serde_json::json!({ "k": k });
    m.finish(&dir)?;
    for s in &summaries {
        let tail = s.median.last().copied().unwrap_or(f64::NAN);
        println!("{}: median spectrum 1.000 .. {tail:.4} (k = {k})", s.role);
    }
    Ok(())
}

fn rotations(a: RotationsArgs, out: Option<PathBuf>, argv: &[String]) -> Result<()> {
    let cps = load_checkpoints::<f64>(&a.run)?;
    let series = rotation_series(&cps)?;
    let dir = run_dir(out, "rotations")?;
    write_rotations_csv(&series, &dir.join("rotations.csv"))?;
    write_slot_rotations_csv(&series, &dir.join("rotations_per_slot.csv"))?;
    let keys = series.mean_rotation(Role::Keys);
    let values = series.mean_rotation(Role::Values);
    fs::write(
        dir.join("rotation_summary.json"),
        serde_json::to_vec_pretty(&serde_json::json!({
            "checkpoints": cps.len(),
            "mean_key_rotation": keys,
            "mean_value_rotation": values,
            "value_to_key_ratio": values / keys,
        }))?,
    )?;
    let mut m = RunManifest::new("rotations", argv);
    m.finish(&dir)?;
    println!("mean rotation per interval: keys {keys:.3e}, values {values:.3e}");
    Ok(())
}

fn similarity(a: SimilarityArgs, out: Option<PathBuf>, argv: &[String]) -> Result<()> {
    let ca: Cartridge<f64> = load_cartridge(&a.a)?;
    let cb: Cartridge<f64> = load_cartridge(&a.b)?;
    let rows = cross_cartridge_similarity(&ca, &cb)?;
    let dir = run_dir(out, "similarity")?;
    write_similarity_csv(&rows, &dir.join("similarity.csv"))?;
    let mut m = RunManifest::new("similarity", argv);
    m.input(&a.a)?.input(&a.b)?;
    m.finish(&dir)?;
    for r in &rows {
        println!("layer {} {}: {:.4}", r.layer, r.role, r.mean_cosine);
    }
    Ok(())
}

fn eval(a: EvalArgs, out: Option<PathBuf>, argv: &[String]) -> Result<()> {
    let model = load_model(&a.model)?;
    let items = load_eval_items(&a.items)?;
    let cart: Option<Cartridge<f32>> = a.cartridge.as_deref().map(load_cartridge).transpose()?;
    let res = evaluate_mc(&model, cart.as_ref(), &items, a.score.into())?;
    let dir = run_dir(out, "eval")?;
    fs::write(dir.join("eval.json"), serde_json::to_vec_pretty(&res)?)?;
    let mut w = csv::Writer::from_path(dir.join("correctness.csv"))?;
    w.write_record(["question", "prediction", "answer", "correct"])?;
    for (i, (p, it)) in res.predictions.iter().zip(&items).enumerate() {
        w.write_record([
            i.to_string(),
            p.to_string(),
            it.answer_index.to_string(),
            u8::from(res.correct[i]).to_string(),
        ])?;
    }
    w.flush()?;
    let mut m = RunManifest::new("eval", argv);
    m.input(&a.model)?.input(&a.items)?;
    if let Some(c) = &a.cartridge {
        m.input(c)?;
    }
    m.finish(&dir)?;
    println!("accuracy {:.4} on {} items", res.accuracy, items.len());
    Ok(())
}

fn ablate(a: ExperimentArgs, out: Option<PathBuf>, argv: &[String]) -> Result<()> {
    let seed = require_seed(a.seed, "ablate")?;
    let cfg = load_experiment(a.config.as_deref())?;
    let dir = run_dir(out, "ablate")?;
    let summary = run_ablation_experiment(&cfg, seed, &dir)?;
    let mut m = RunManifest::new("ablate", argv);
    for (name, s) in summary.seeds.pairs() {
        m.seed(name, s);
    }
    m.config = config_value(&cfg)?;
    if let Some(p) = &cfg.model_path {
        m.input(p)?;
    }
    m.finish(&dir)?;
    let r = &summary.report;
    println!(
        "baseline {:.3}  trained {:.3}  ablated {:.3}  overlap {}/{} (p = {:.4})  transferable: {}",
        r.acc_baseline, r.acc_trained, r.acc_ablated, r.overlap_count, r.n_eval, r.overlap_p_value, r.transferable
    );
    Ok(())
}

fn convergence(a: ConvergenceArgs, out: Option<PathBuf>, argv: &[String]) -> Result<()> {
    let seed = require_seed(a.seed, "convergence")?;
    let mut cfg = load_experiment(a.config.as_deref())?;
    if let Some(t) = a.threshold {
        cfg.threshold = t;
    }
    if a.relative {
        cfg.relative_threshold = true;
    }
    let dir = run_dir(out, "convergence")?;
    let report = run_convergence(&cfg, seed, a.seeds, &dir)?;
    let mut m = RunManifest::new("convergence", argv);
    for (name, s) in report.seeds.pairs() {
        m.seed(name, s);
    }
    m.seed("runs", a.seeds as u64);
    m.config = config_value(&cfg)?;
    if let Some(p) = &cfg.model_path {
        m.input(p)?;
    }
    m.finish(&dir)?;
    println!(
        "mean steps to ppl <= {:.4}: sci {:.1}, first-k {:.1}",
        report.threshold_ppl, report.mean_sci_steps, report.mean_first_k_steps
    );
    match &report.ttest {
        Some(t) => println!("paired t = {:.4}, one-sided p = {:.4}", t.t_stat, t.p_one_sided),
        None => println!("paired t-test not computed: {}", report.ttest_status),
    }
    Ok(())
}

fn ngram_sweep(a: NgramArgs, out: Option<PathBuf>, argv: &[String]) -> Result<()> {
    let seed = require_seed(a.seed, "ngram-sweep")?;
    let corpus = load_corpus(&a.corpus)?;
    let sizes: Vec<usize> = (1..=a.max_pow).map(|k| 1usize << k).collect();
    let seeds: Vec<u64> = (0..a.seeds as u64).map(|i| seed.wrapping_add(i)).collect();
    let rows = diversity_sweep(&corpus.tokens, a.p, &sizes, &seeds, a.n)?;
    let dir = run_dir(out, "ngram-sweep")?;
    write_diversity_csv(&rows, &dir.join("diversity.csv"))?;
    let mut m = RunManifest::new("ngram-sweep", argv);
    m.seed("first", seed);
    m.input(&a.corpus)?;
    m.finish(&dir)?;
    for r in &rows {
        println!("chunk {:>5}: {:.4}", r.chunk_size, r.mean_diversity);
    }
    Ok(())
}

fn stats(s: StatsCommand) -> Result<()> {
    match s {
        StatsCommand::Hypergeom {
            population,
            successes,
            draws,
            observed,
        } => {
            let t = hypergeom_test(population, successes, draws, observed).map_err(|e| usage(e.to_string()))?;
            println!("P(X >= {observed}) = {:.6}", t.p_value);
            println!("{}", serde_json::to_string(&t)?);
        }
        StatsCommand::Ttest { x, y, alternative } => {
            let alt: Alternative = alternative.parse().map_err(|e: crate::LabError| usage(e.to_string()))?;
            let t = paired_t(&x, &y, alt)?;
            println!("t = {:.6}, df = {}, one-sided p = {:.6}", t.t_stat, t.df, t.p_one_sided);
            println!("{}", serde_json::to_string(&t)?);
        }
    }
    Ok(())
}
