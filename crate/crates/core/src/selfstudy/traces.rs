use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LabError, Result};
use crate::model::{forward_cached, forward_full, FrozenModel, KvCache};
use crate::numerics::{seeded_rng, softmax, Real};
use crate::Token;

use super::{tokens_of, SyntheticCorpus};

/// Newline ends a continuation.
pub const END_TOKEN: Token = b'\n' as Token;

/// Span of corpus text a template quotes.
const QUOTE_LEN: usize = 12;

/// The six conversation-seed families. Each renders a fixed token template
/// around a sampled entity, attribute or corpus chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedType {
    Structuring,
    Summarization,
    Question,
    UseCase,
    Creative,
    Generic,
}

impl SeedType {
    pub const ALL: [SeedType; 6] = [
        SeedType::Structuring,
        SeedType::Summarization,
        SeedType::Question,
        SeedType::UseCase,
        SeedType::Creative,
        SeedType::Generic,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub seed_type: SeedType,
    pub query: Vec<Token>,
    pub continuation: Vec<Token>,
    pub mask: Vec<bool>,
}

impl TraceRecord {
    pub fn validate(&self) -> Result<()> {
        if self.query.is_empty() {
            return Err(invalid("trace query is empty"));
        }
        if self.continuation.is_empty() {
            return Err(invalid("trace continuation is empty"));
        }
        if self.mask.len() != self.continuation.len() {
            return Err(invalid("trace mask length differs from continuation"));
        }
        if !self.mask.iter().any(|&m| m) {
            return Err(invalid("trace mask selects no position"));
        }
        Ok(())
    }

    /// Student input `query ⊕ continuation[..n-1]` and the input positions
    /// whose next token is a masked continuation token.
    pub fn student_input(&self) -> (Vec<Token>, Vec<usize>) {
        let n = self.continuation.len();
        let mut input = self.query.clone();
        input.extend_from_slice(&self.continuation[..n - 1]);
        let base = self.query.len() - 1;
        let positions = (0..n).filter(|&j| self.mask[j]).map(|j| base + j).collect();
        (input, positions)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TraceDataset {
    pub records: Vec<TraceRecord>,
}

impl TraceDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceConfig {
    pub count: usize,
    pub seed: u64,
    /// 0 means greedy decoding.
    pub temperature: f64,
    pub max_len: usize,
    /// Relative weights of the seed types in [`SeedType::ALL`] order.
    pub seed_type_weights: [f64; 6],
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            count: 64,
            seed: 0,
            temperature: 0.7,
            max_len: 64,
            seed_type_weights: [1.0; 6],
        }
    }
}

impl TraceConfig {
    fn validate(&self) -> Result<()> {
        if self.max_len == 0 {
            return Err(invalid("max continuation length must be >= 1"));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(invalid("temperature must be finite and >= 0"));
        }
        let w = &self.seed_type_weights;
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
            return Err(invalid("seed type weights must be non-negative with a positive sum"));
        }
        Ok(())
    }
}

fn pick_seed_type(weights: &[f64; 6], rng: &mut ChaCha8Rng) -> SeedType {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return SeedType::ALL[i];
        }
        u -= w;
    }
    // Rounding can leave `u` a hair above the last weight.
    SeedType::ALL[weights.iter().rposition(|w| *w > 0.0).unwrap_or(5)]
}

/// Query template for `seed_type`, filled from `rng`.
pub fn render_query(corpus: &SyntheticCorpus, seed_type: SeedType, rng: &mut ChaCha8Rng) -> Vec<Token> {
    let entity = &corpus.entity_labels[rng.random_range(0..corpus.entity_labels.len())];
    let attr = &corpus.attribute_names[rng.random_range(0..corpus.attribute_names.len())];
    let text = match seed_type {
        SeedType::Structuring => format!("\n#table {entity}:"),
        SeedType::Question => format!("\nQ {entity} {attr}="),
        SeedType::UseCase => format!("\n#use {attr} of {entity}:"),
        SeedType::Generic => format!("\n#chat {entity}"),
        SeedType::Summarization | SeedType::Creative => {
            let len = QUOTE_LEN.min(corpus.tokens.len());
            let start = rng.random_range(0..=corpus.tokens.len() - len);
            let mut q = tokens_of(if seed_type == SeedType::Summarization {
                "\n#summary \""
            } else {
                "\n#rhyme \""
            });
            q.extend(
                corpus.tokens[start..start + len]
                    .iter()
                    .map(|&t| if t == END_TOKEN { b' ' as Token } else { t }),
            );
            q.extend(tokens_of("\":"));
            return q;
        }
    };
    tokens_of(&text)
}

/// Draws one token from `softmax(logits / temperature)`; greedy (lowest index
/// among ties) when `temperature == 0`.
pub fn sample_token<T: Real>(logits: &[T], temperature: f64, rng: &mut ChaCha8Rng) -> Token {
    if temperature == 0.0 {
        let mut best = 0;
        for (i, v) in logits.iter().enumerate() {
            if *v > logits[best] {
                best = i;
            }
        }
        return best as Token;
    }
    let probs = softmax(logits, temperature);
    let u = rng.random::<f64>();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as Token;
        }
    }
    (probs.len() - 1) as Token
}

/// KV cache of the corpus, with room for the longest rollout that follows.
pub fn teacher_cache<T: Real>(model: &FrozenModel<T>, corpus: &[Token]) -> Result<KvCache<T>> {
    Ok(forward_full(model, corpus)?.cache)
}

/// Decodes up to `max_len` tokens after `query` from the teacher that reads
/// `corpus_cache` first, stopping after [`END_TOKEN`]. `on_step` sees the
/// logits each token was drawn from.
pub fn rollout<T: Real>(
    model: &FrozenModel<T>,
    corpus_cache: &KvCache<T>,
    query: &[Token],
    temperature: f64,
    max_len: usize,
    rng: &mut ChaCha8Rng,
    mut on_step: impl FnMut(&[T], Token),
) -> Result<Vec<Token>> {
    let needed = corpus_cache.len() + query.len() + max_len - 1;
    if needed > model.config().max_positions {
        return Err(LabError::Capacity {
            needed,
            limit: model.config().max_positions,
        });
    }
    let mut cache = corpus_cache.with_spare(query.len() + max_len);
    let (logits, kv) = forward_cached(model, Some(&cache), query)?;
    cache.append(&kv)?;
    let mut last = logits.at(logits.positions() - 1).to_vec();
    let mut out = Vec::with_capacity(max_len);
    loop {
        let tok = sample_token(&last, temperature, rng);
        on_step(&last, tok);
        out.push(tok);
        if tok == END_TOKEN || out.len() == max_len {
            return Ok(out);
        }
        let (logits, kv) = forward_cached(model, Some(&cache), &[tok])?;
        cache.append(&kv)?;
        last = logits.at(0).to_vec();
    }
}

/// Teacher rollouts over `corpus`. Record `i` uses its own generator
/// `(cfg.seed, i)`, so output does not depend on the number of workers.
pub fn generate_traces<T: Real>(
    model: &FrozenModel<T>,
    corpus: &SyntheticCorpus,
    cfg: &TraceConfig,
) -> Result<TraceDataset> {
    cfg.validate()?;
    if corpus.entity_labels.is_empty() || corpus.attribute_names.is_empty() || corpus.is_empty() {
        return Err(invalid("corpus has no entities, attributes or tokens"));
    }
    let cache = teacher_cache(model, &corpus.tokens)?;
    let records: Vec<Result<TraceRecord>> = (0..cfg.count)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeded_rng(cfg.seed, i as u64);
            let seed_type = pick_seed_type(&cfg.seed_type_weights, &mut rng);
            let query = render_query(corpus, seed_type, &mut rng);
            let continuation = rollout(model, &cache, &query, cfg.temperature, cfg.max_len, &mut rng, |_, _| {})?;
            let mask = vec![true; continuation.len()];
            Ok(TraceRecord {
                seed_type,
                query,
                continuation,
                mask,
            })
        })
        .collect();
    Ok(TraceDataset {
        records: records.into_iter().collect::<Result<_>>()?,
    })
}

/// Line-delimited JSON, one record per line.
pub fn save_traces(ds: &TraceDataset, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in &ds.records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_traces(path: &Path) -> Result<TraceDataset> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut records = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: TraceRecord = serde_json::from_str(&line)?;
        r.validate()?;
        records.push(r);
    }
    Ok(TraceDataset { records })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greedy_ties_pick_lowest_index() {
        let mut rng = seeded_rng(0, 0);
        assert_eq!(sample_token(&[1.0f32, 3.0, 3.0, 0.0], 0.0, &mut rng), 1);
        assert_eq!(sample_token(&[0.0f64; 5], 0.0, &mut rng), 0);
    }

    #[test]
    fn student_input_positions() {
        let r = TraceRecord {
            seed_type: SeedType::Generic,
            query: vec![1, 2, 3],
            continuation: vec![7, 8, 9],
            mask: vec![true, false, true],
        };
        let (input, pos) = r.student_input();
        assert_eq!(input, vec![1, 2, 3, 7, 8]);
        assert_eq!(pos, vec![2, 4]);
    }

    #[test]
    fn seed_type_weights_are_respected() {
        let mut w = [0.0; 6];
        w[2] = 1.0;
        let mut rng = seeded_rng(1, 0);
        for _ in 0..50 {
            assert_eq!(pick_seed_type(&w, &mut rng), SeedType::Question);
        }
    }
}
