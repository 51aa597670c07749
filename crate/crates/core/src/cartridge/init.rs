use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};
use crate::model::{forward_full, FrozenModel, KvCache, ModelConfig};
use crate::numerics::{seeded_rng, Real};
use crate::{token_digest, Token};

use super::{Cartridge, CartridgeMeta, InitScheme, SwapParents};

/// I.i.d. Gaussian keys and values with standard deviation `1/sqrt(d_head)`.
pub fn init_rvi<T: Real>(config: &ModelConfig, p: usize, seed: u64) -> Result<Cartridge<T>> {
    config.validate()?;
    if p == 0 {
        return Err(invalid("cartridge size p must be >= 1"));
    }
    let std = 1.0 / (config.head_dim as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let mut rng = seeded_rng(seed, 0);
    let n = config.prefix_len(p);
    let keys: Vec<T> = (0..n).map(|_| T::of(normal.sample(&mut rng))).collect();
    let values: Vec<T> = (0..n).map(|_| T::of(normal.sample(&mut rng))).collect();
    let kv = KvCache::from_tensors(config.num_layers, config.num_heads, config.head_dim, p, keys, values)?;
    Cartridge::new(
        kv,
        CartridgeMeta {
            p,
            init_scheme: InitScheme::Rvi,
            chunk_size: None,
            seed,
            corpus_digest: String::new(),
            training_steps: 0,
            sci_offsets: Vec::new(),
            sci_sorted: false,
            parents: None,
        },
    )
}

/// The KV cache of the first `p` corpus tokens.
pub fn init_first_k<T: Real>(model: &FrozenModel<T>, corpus: &[Token], p: usize) -> Result<Cartridge<T>> {
    if p == 0 {
        return Err(invalid("cartridge size p must be >= 1"));
    }
    if corpus.len() < p {
        return Err(invalid(format!(
            "corpus has {} tokens, fewer than p = {p}",
            corpus.len()
        )));
    }
    let prefix = &corpus[..p];
    let full = forward_full(model, prefix)?;
    Cartridge::new(
        full.cache,
        CartridgeMeta {
            p,
            init_scheme: InitScheme::FirstK,
            chunk_size: None,
            seed: 0,
            corpus_digest: token_digest(prefix),
            training_steps: 0,
            sci_offsets: Vec::new(),
            sci_sorted: false,
            parents: None,
        },
    )
}

/// Initializer sequence drawn by sampled-chunk initialization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SciSample {
    pub tokens: Vec<Token>,
    /// Chunk starts in the order they were concatenated.
    pub offsets: Vec<usize>,
}

/// Draws `ceil(p / c)` chunk starts uniformly (with replacement) from
/// `0..=len - c`, concatenates the chunks and truncates to `p` tokens.
/// With `sorted`, starts are put in corpus order before concatenation.
pub fn sci_sequence(corpus: &[Token], p: usize, c: usize, seed: u64, sorted: bool) -> Result<SciSample> {
    if p == 0 {
        return Err(invalid("cartridge size p must be >= 1"));
    }
    if c == 0 {
        return Err(invalid("chunk size must be >= 1"));
    }
    if corpus.len() < c {
        return Err(invalid(format!(
            "corpus has {} tokens, fewer than chunk size {c}",
            corpus.len()
        )));
    }
    let n_chunks = p.div_ceil(c);
    let mut rng = seeded_rng(seed, 0);
    let last = corpus.len() - c;
    let mut offsets: Vec<usize> = (0..n_chunks).map(|_| rng.random_range(0..=last)).collect();
    if sorted {
        offsets.sort_unstable();
    }
    let mut tokens = Vec::with_capacity(n_chunks * c);
    for &s in &offsets {
        tokens.extend_from_slice(&corpus[s..s + c]);
    }
    tokens.truncate(p);
    Ok(SciSample { tokens, offsets })
}

/// Sampled-chunk initialization with chunks in draw order.
pub fn init_sci<T: Real>(
    model: &FrozenModel<T>,
    corpus: &[Token],
    p: usize,
    c: usize,
    seed: u64,
) -> Result<Cartridge<T>> {
    init_sci_with(model, corpus, p, c, seed, false)
}

pub fn init_sci_with<T: Real>(
    model: &FrozenModel<T>,
    corpus: &[Token],
    p: usize,
    c: usize,
    seed: u64,
    sorted: bool,
) -> Result<Cartridge<T>> {
    let sample = sci_sequence(corpus, p, c, seed, sorted)?;
    let full = forward_full(model, &sample.tokens)?;
    Cartridge::new(
        full.cache,
        CartridgeMeta {
            p,
            init_scheme: InitScheme::Sci,
            chunk_size: Some(c),
            seed,
            corpus_digest: token_digest(corpus),
            training_steps: 0,
            sci_offsets: sample.offsets,
            sci_sorted: sorted,
            parents: None,
        },
    )
}

/// Keys of `key_source`, values of `value_source`.
pub fn swap_keys<T: Real>(value_source: &Cartridge<T>, key_source: &Cartridge<T>) -> Result<Cartridge<T>> {
    if !value_source.same_shape(key_source) {
        return Err(invalid(format!(
            "cannot swap keys between shapes {:?} and {:?}",
            value_source.shape(),
            key_source.shape()
        )));
    }
    let (l, h, p, dh) = value_source.shape();
    let kv = KvCache::from_tensors(
        l,
        h,
        dh,
        p,
        key_source.keys().to_vec(),
        value_source.values().to_vec(),
    )?;
    let mut meta = value_source.meta().clone();
    meta.parents = Some(SwapParents {
        value_source: value_source.digest(),
        key_source: key_source.digest(),
    });
    Cartridge::new(kv, meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig::new(2, 2, 4, 32, 256).unwrap()
    }

    #[test]
    fn rvi_is_deterministic() {
        let a = init_rvi::<f32>(&tiny(), 5, 9).unwrap();
        let b = init_rvi::<f32>(&tiny(), 5, 9).unwrap();
        let c = init_rvi::<f32>(&tiny(), 5, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.keys(), c.keys());
    }

    #[test]
    fn first_k_shapes_and_locality() {
        let m = FrozenModel::<f32>::init(tiny(), 1).unwrap();
        let one = init_first_k(&m, &[3, 4, 5], 1).unwrap();
        assert_eq!(one.shape(), (2, 2, 1, 4));
        let a = init_first_k(&m, &[1, 2, 3, 4, 5, 6], 4).unwrap();
        let b = init_first_k(&m, &[1, 2, 3, 4, 9, 9, 9], 4).unwrap();
        assert_eq!(a.keys(), b.keys());
        assert_eq!(a.values(), b.values());
        assert!(init_first_k(&m, &[1, 2], 3).is_err());
    }

    #[test]
    fn sci_degenerate_cases_match_first_k() {
        let m = FrozenModel::<f32>::init(tiny(), 1).unwrap();
        let corpus: Vec<Token> = (0..8).collect();
        let sci = init_sci(&m, &corpus, 8, 8, 123).unwrap();
        let fk = init_first_k(&m, &corpus, 8).unwrap();
        assert_eq!(sci.keys(), fk.keys());
        assert_eq!(sci.values(), fk.values());

        // c >= p: find a seed whose single draw lands on 0.
        let corpus: Vec<Token> = (0..12).map(|i| (i * 7 % 32) as Token).collect();
        let seed = (0..1000u64)
            .find(|&s| sci_sequence(&corpus, 5, 10, s, false).unwrap().offsets == vec![0])
            .expect("some seed draws offset 0");
        let sci = init_sci(&m, &corpus, 5, 10, seed).unwrap();
        let fk = init_first_k(&m, &corpus, 5).unwrap();
        assert_eq!(sci.keys(), fk.keys());
    }

    #[test]
    fn sci_errors_and_lengths() {
        let corpus: Vec<Token> = (0..10).collect();
        assert!(sci_sequence(&corpus, 4, 11, 0, false).is_err());
        assert!(sci_sequence(&corpus, 4, 0, 0, false).is_err());
        let s = sci_sequence(&corpus, 7, 3, 0, false).unwrap();
        assert_eq!(s.offsets.len(), 3);
        assert_eq!(s.tokens.len(), 7);
        let sorted = sci_sequence(&corpus, 7, 3, 0, true).unwrap();
        let mut o = s.offsets.clone();
        o.sort_unstable();
        assert_eq!(sorted.offsets, o);
    }

    #[test]
    fn swap_keys_identity_and_composition() {
        let cfg = tiny();
        let a = init_rvi::<f32>(&cfg, 3, 1).unwrap();
        let b = init_rvi::<f32>(&cfg, 3, 2).unwrap();
        let aa = swap_keys(&a, &a).unwrap();
        assert_eq!(aa.keys(), a.keys());
        assert_eq!(aa.values(), a.values());

        let ab = swap_keys(&a, &b).unwrap();
        assert_eq!(ab.keys(), b.keys());
        assert_eq!(ab.values(), a.values());
        let parents = ab.meta().parents.as_ref().unwrap();
        assert_eq!(parents.value_source, a.digest());
        assert_eq!(parents.key_source, b.digest());

        let back = swap_keys(&ab, &a).unwrap();
        assert_eq!(back.keys(), a.keys());
        assert_eq!(back.values(), a.values());

        let other = init_rvi::<f32>(&cfg, 4, 1).unwrap();
        assert!(swap_keys(&a, &other).is_err());
    }
}
