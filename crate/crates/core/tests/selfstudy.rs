mod oracles;

use std::collections::{HashMap, HashSet};

use cartridge_lab::model::{forward_full, FrozenModel, ModelConfig};
use cartridge_lab::numerics::seeded_rng;
use cartridge_lab::selfstudy::{
    diversity_sweep, generate_traces, load_corpus, load_eval_items, load_traces, make_corpus, ngram_diversity,
    rollout, sample_token, save_corpus, save_eval_items, save_traces, teacher_cache, text_of, tokens_of, SeedType,
    TaskSpec, TraceConfig, END_TOKEN, NUM_OPTIONS,
};
use cartridge_lab::LabError;
use oracles::{random_tokens, sharp_model};
use proptest::prelude::*;

fn small_model() -> FrozenModel<f32> {
    FrozenModel::init(ModelConfig::new(1, 2, 8, 256, 1024).unwrap(), 21).unwrap()
}

/// Parses `LABEL a=1 b=2` lines back into a table, independent of the generator.
fn parse_table(text: &str) -> HashMap<String, HashMap<String, String>> {
    let mut out = HashMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let mut parts = line.split(' ');
        let label = parts.next().unwrap().to_string();
        let attrs = parts
            .map(|kv| {
                let (k, v) = kv.split_once('=').unwrap();
                (k.to_string(), v.to_string())
            })
            .collect();
        out.insert(label, attrs);
    }
    out
}

#[test]
fn eval_items_are_answerable_by_exhaustive_scan() {
    let spec = TaskSpec::records(10);
    assert_eq!(spec.attributes.len(), 8);
    let (corpus, items) = make_corpus(&spec, 7).unwrap();
    assert_eq!(items.len(), 80);
    let text = text_of(&corpus.tokens);
    let table = parse_table(&text);
    assert_eq!(table.len(), 10);
    for item in &items {
        item.validate().unwrap();
        let q = String::from_utf8(item.question.iter().map(|&t| t as u8).collect()).unwrap();
        let (label, attr) = q.trim_end_matches('=').split_once(' ').unwrap();
        let opts: Vec<String> = item.options.iter().map(|o| text_of(o)).collect();
        assert_eq!(opts.iter().collect::<HashSet<_>>().len(), NUM_OPTIONS);
        assert_eq!(table[label][attr], opts[item.answer_index]);
        assert!(text.contains(&format!(" {attr}={}", opts[item.answer_index])));
        for (i, o) in opts.iter().enumerate() {
            if i == item.answer_index {
                continue;
            }
            let owners: Vec<&String> = table.iter().filter(|(_, row)| &row[attr] == o).map(|(l, _)| l).collect();
            assert_eq!(owners.len(), 1, "distractor {o} for {label} {attr}");
            assert_ne!(owners[0], label);
        }
    }
    let positions: HashSet<usize> = items.iter().map(|i| i.answer_index).collect();
    assert!(positions.len() > 1);
}

#[test]
fn minimal_task_and_determinism() {
    let spec = TaskSpec::records(2).with_attributes(1);
    let (corpus, items) = make_corpus(&spec, 3).unwrap();
    assert_eq!(items.len(), 2);
    let text = text_of(&corpus.tokens);
    for f in &corpus.facts {
        assert!(text.contains(&text_of(&f.value)));
    }
    for item in &items {
        assert_eq!(item.options.iter().collect::<HashSet<_>>().len(), NUM_OPTIONS);
    }
    let (again, items2) = make_corpus(&spec, 3).unwrap();
    assert_eq!(again.tokens, corpus.tokens);
    assert_eq!(items, items2);
    let (other, _) = make_corpus(&spec, 4).unwrap();
    assert_ne!(other.tokens, corpus.tokens);
}

#[test]
fn narrow_ranges_are_a_generation_error() {
    let mut spec = TaskSpec::records(4).with_attributes(1);
    spec.attributes[0].min = 10;
    spec.attributes[0].max = 13;
    assert!(matches!(make_corpus(&spec, 0), Err(LabError::Generation(_))));
    assert!(make_corpus(&TaskSpec::records(1), 0).is_err());
}

#[test]
fn corpus_and_items_round_trip() {
    let (corpus, items) = make_corpus(&TaskSpec::filings(6), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.bin");
    save_corpus(&corpus, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), corpus.tokens.iter().map(|&t| t as u8).collect::<Vec<_>>());
    assert_eq!(load_corpus(&path).unwrap(), corpus);
    let ip = dir.path().join("eval.jsonl");
    save_eval_items(&items, &ip).unwrap();
    assert_eq!(load_eval_items(&ip).unwrap(), items);
    std::fs::write(&path, b"tampered").unwrap();
    assert!(load_corpus(&path).is_err());
}

#[test]
fn greedy_rollouts_repeat() {
    let model = small_model();
    let (corpus, _) = make_corpus(&TaskSpec::records(6), 2).unwrap();
    let cache = teacher_cache(&model, &corpus.tokens).unwrap();
    let q = tokens_of("\nQ P03 dose=");
    let a = rollout(&model, &cache, &q, 0.0, 20, &mut seeded_rng(1, 0), |_, _| {}).unwrap();
    let b = rollout(&model, &cache, &q, 0.0, 20, &mut seeded_rng(2, 0), |_, _| {}).unwrap();
    assert_eq!(a, b);
    assert!(a.len() == 20 || *a.last().unwrap() == END_TOKEN);
}

#[test]
fn logged_logits_are_the_teachers() {
    let model = sharp_model(ModelConfig::new(2, 2, 8, 256, 1024).unwrap(), 3, 0.2).cast::<f32>();
    let (corpus, _) = make_corpus(&TaskSpec::records(4), 2).unwrap();
    let cache = teacher_cache(&model, &corpus.tokens).unwrap();
    let q = tokens_of("\n#chat P01");
    let mut logged = Vec::new();
    let cont = rollout(&model, &cache, &q, 1.0, 12, &mut seeded_rng(9, 0), |l, t| logged.push((l.to_vec(), t)))
        .unwrap();
    assert_eq!(logged.len(), cont.len());
    let mut full = corpus.tokens.clone();
    full.extend_from_slice(&q);
    for (i, (logits, tok)) in logged.iter().enumerate() {
        assert_eq!(*tok, cont[i]);
        let ref_logits = forward_full(&model, &full).unwrap().logits;
        let row = ref_logits.at(full.len() - 1);
        let diff = row.iter().zip(logits).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(diff < 1e-4, "step {i}: {diff}");
        full.push(cont[i]);
    }
}

#[test]
fn sampler_frequencies_follow_tempered_softmax() {
    let logits: Vec<f64> = (0..8).map(|i| (i as f64 * 0.9).sin() * 2.0).collect();
    let temp = 0.7;
    let z: Vec<f64> = logits.iter().map(|l| (l / temp).exp()).collect();
    let total: f64 = z.iter().sum();
    let probs: Vec<f64> = z.iter().map(|x| x / total).collect();
    let n = 200_000;
    let mut counts = [0usize; 8];
    let mut rng = seeded_rng(5, 0);
    for _ in 0..n {
        counts[sample_token(&logits, temp, &mut rng) as usize] += 1;
    }
    for i in 0..8 {
        let p = probs[i];
        let se = (p * (1.0 - p) / n as f64).sqrt();
        let freq = counts[i] as f64 / n as f64;
        assert!((freq - p).abs() < 4.0 * se + 1e-12, "token {i}: {freq} vs {p}");
    }
    assert_eq!(sample_token(&[1.0f32, 3.0, 3.0, 2.0], 0.0, &mut rng), 1);
}

#[test]
fn trace_generation_is_seeded_and_covers_seed_types() {
    let model = small_model();
    let (corpus, _) = make_corpus(&TaskSpec::records(6), 2).unwrap();
    let cfg = TraceConfig { count: 64, seed: 3, max_len: 8, ..TraceConfig::default() };
    let a = generate_traces(&model, &corpus, &cfg).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(2).build().unwrap();
    let b = pool.install(|| generate_traces(&model, &corpus, &cfg).unwrap());
    assert_eq!(a, b);
    assert_eq!(a.len(), 64);
    let types: HashSet<SeedType> = a.records.iter().map(|r| r.seed_type).collect();
    assert!(types.len() >= 4, "{types:?}");
    for r in &a.records {
        r.validate().unwrap();
        assert!(r.mask.iter().all(|&m| m));
        assert_eq!(r.mask.len(), r.continuation.len());
        assert!(r.continuation.len() <= 8);
    }
    let c = generate_traces(&model, &corpus, &TraceConfig { seed: 4, ..cfg.clone() }).unwrap();
    assert_ne!(a, c);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    save_traces(&a, &path).unwrap();
    assert_eq!(load_traces(&path).unwrap(), a);
}

#[test]
fn oversized_rollouts_are_a_capacity_error() {
    let model = FrozenModel::<f32>::init(ModelConfig::new(1, 1, 4, 256, 128).unwrap(), 0).unwrap();
    let (corpus, _) = make_corpus(&TaskSpec::records(3).with_attributes(2), 0).unwrap();
    let cfg = TraceConfig { count: 2, max_len: 200, ..TraceConfig::default() };
    assert!(matches!(generate_traces(&model, &corpus, &cfg), Err(LabError::Capacity { .. })));
}

fn brute_force_diversity(tokens: &[u32], n: usize) -> f64 {
    let windows = tokens.len() - n + 1;
    let mut seen: Vec<&[u32]> = Vec::new();
    for i in 0..windows {
        let w = &tokens[i..i + n];
        if !seen.contains(&w) {
            seen.push(w);
        }
    }
    seen.len() as f64 / windows as f64
}

#[test]
fn diversity_examples_and_oracle() {
    assert!((ngram_diversity(&[7, 7, 7, 7], 2).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(ngram_diversity(&[1, 2, 3, 4], 2).unwrap(), 1.0);
    assert!(matches!(ngram_diversity(&[1, 2], 3), Err(LabError::InvalidInput(_))));
    let seq = random_tokens(1024, 8, 6);
    assert_eq!(ngram_diversity(&seq, 3).unwrap(), brute_force_diversity(&seq, 3));
}

#[test]
fn small_chunks_are_at_least_as_diverse_on_a_periodic_corpus() {
    let period = random_tokens(32, 1, 256);
    let corpus: Vec<u32> = period.iter().cycle().take(2048).copied().collect();
    let seeds: Vec<u64> = (0..20).collect();
    let rows = diversity_sweep(&corpus, 64, &[2, 64], &seeds, 3).unwrap();
    assert!(rows[0].mean_diversity >= rows[1].mean_diversity, "{rows:?}");
}

proptest! {
    #[test]
    fn diversity_matches_brute_force(seq in prop::collection::vec(0u32..5, 1..80), n in 1usize..5) {
        prop_assume!(seq.len() >= n);
        let d = ngram_diversity(&seq, n).unwrap();
        prop_assert_eq!(d, brute_force_diversity(&seq, n));
        prop_assert!(d > 0.0 && d <= 1.0);
    }
}
