//! The small frozen decoder-only transformer that serves as both teacher and
//! student backbone.
//!
//! Pre-norm blocks with RMS normalization, rotary position embeddings on
//! queries and keys, full multi-head attention, a GELU MLP and an untied
//! output projection. Weights are immutable once a [`FrozenModel`] exists;
//! [`Pretrainer`] owns a mutable copy while pre-training.

mod backward;
mod forward;
mod io;
mod kv;
mod pretrain;

pub use backward::{backward, BackwardOutput, CartridgeGrad, DistillExample, GradMode};
pub use forward::{forward_cached, forward_full, forward_with_prefix, FullForward, Logits};
pub(crate) use forward::run_logits;
pub use kv::KvCache;
pub use pretrain::{cross_entropy_batch, Pretrainer};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};
use crate::numerics::{seeded_rng, Real};

pub(crate) const RMS_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
const MLP_RATIO: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub model_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    /// Desk-scale default: 4 layers, 4 heads of width 16, byte vocabulary.
    fn default() -> Self {
        Self {
            num_layers: 4,
            num_heads: 4,
            head_dim: 16,
            model_dim: 64,
            vocab_size: 256,
            max_positions: 2048,
            rope_base: 10_000.0,
        }
    }
}

impl ModelConfig {
    pub fn new(
        num_layers: usize,
        num_heads: usize,
        head_dim: usize,
        vocab_size: usize,
        max_positions: usize,
    ) -> Result<Self> {
        let cfg = Self {
            num_layers,
            num_heads,
            head_dim,
            model_dim: num_heads * head_dim,
            vocab_size,
            max_positions,
            rope_base: 10_000.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.num_layers,
            self.num_heads,
            self.head_dim,
            self.model_dim,
            self.max_positions,
        ];
        if counts.contains(&0) {
            return Err(invalid("model config counts must be >= 1"));
        }
        if self.vocab_size < 2 {
            return Err(invalid("vocab_size must be >= 2"));
        }
        if self.model_dim != self.num_heads * self.head_dim {
            return Err(invalid(format!(
                "model_dim {} != num_heads {} x head_dim {}",
                self.model_dim, self.num_heads, self.head_dim
            )));
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(invalid("head_dim must be even for rotary embeddings"));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 1.0) {
            return Err(invalid("rope_base must be finite and > 1"));
        }
        Ok(())
    }

    pub fn mlp_dim(&self) -> usize {
        MLP_RATIO * self.model_dim
    }

    /// Number of scalars in one cartridge role tensor of length `p`.
    pub fn prefix_len(&self, p: usize) -> usize {
        self.num_layers * self.num_heads * p * self.head_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub attn_norm: Vec<T>,
    pub wq: Vec<T>,
    pub wk: Vec<T>,
    pub wv: Vec<T>,
    pub wo: Vec<T>,
    pub mlp_norm: Vec<T>,
    pub w1: Vec<T>,
    pub w2: Vec<T>,
}

/// All parameters. Projections are stored `[in × out]`, row-major, so a layer
/// computes `y = x · W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    pub embed: Vec<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm: Vec<T>,
    pub w_out: Vec<T>,
}

impl<T: Real> Weights<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.model_dim;
        let f = cfg.mlp_dim();
        let z = |n| vec![T::zero(); n];
        Self {
            embed: z(cfg.vocab_size * d),
            layers: (0..cfg.num_layers)
                .map(|_| LayerWeights {
                    attn_norm: z(d),
                    wq: z(d * d),
                    wk: z(d * d),
                    wv: z(d * d),
                    wo: z(d * d),
                    mlp_norm: z(d),
                    w1: z(d * f),
                    w2: z(f * d),
                })
                .collect(),
            final_norm: z(d),
            w_out: z(d * cfg.vocab_size),
        }
    }

    /// Tensors in their declared (file) order.
    pub fn tensors(&self) -> Vec<&Vec<T>> {
        let mut out = vec![&self.embed];
        for l in &self.layers {
            out.extend([&l.attn_norm, &l.wq, &l.wk, &l.wv, &l.wo, &l.mlp_norm, &l.w1, &l.w2]);
        }
        out.push(&self.final_norm);
        out.push(&self.w_out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = vec![&mut self.embed];
        for l in &mut self.layers {
            out.extend([
                &mut l.attn_norm,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.mlp_norm,
                &mut l.w1,
                &mut l.w2,
            ]);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.w_out);
        out
    }

    pub fn cast<U: Real>(&self) -> Weights<U> {
        let c = |v: &Vec<T>| v.iter().map(|x| U::of(x.as_f64())).collect::<Vec<U>>();
        Weights {
            embed: c(&self.embed),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    attn_norm: c(&l.attn_norm),
                    wq: c(&l.wq),
                    wk: c(&l.wk),
                    wv: c(&l.wv),
                    wo: c(&l.wo),
                    mlp_norm: c(&l.mlp_norm),
                    w1: c(&l.w1),
                    w2: c(&l.w2),
                })
                .collect(),
            final_norm: c(&self.final_norm),
            w_out: c(&self.w_out),
        }
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Weights<T>) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let want = Weights::<T>::zeros(cfg);
        if self.layers.len() != cfg.num_layers {
            return Err(invalid("layer count does not match config"));
        }
        for (i, (a, b)) in self.tensors().iter().zip(want.tensors()).enumerate() {
            if a.len() != b.len() {
                return Err(invalid(format!(
                    "tensor {i} has {} entries, expected {}",
                    a.len(),
                    b.len()
                )));
            }
            if a.iter().any(|x| !x.is_finite()) {
                return Err(invalid(format!("tensor {i} has non-finite entries")));
            }
        }
        Ok(())
    }
}

/// Where a model's weights came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ModelProvenance {
    pub seed: u64,
    pub pretrain_steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenModel<T> {
    config: ModelConfig,
    weights: Weights<T>,
    provenance: ModelProvenance,
}

impl<T: Real> FrozenModel<T> {
    /// Gaussian(0, 0.02) projections and embeddings, unit norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed, 0);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut weights = Weights::<T>::zeros(&config);
        {
            let w = &mut weights;
            let mut fill = |v: &mut Vec<T>| {
                v.iter_mut().for_each(|x| *x = T::of(normal.sample(&mut rng)));
            };
            fill(&mut w.embed);
            for l in &mut w.layers {
                l.attn_norm.fill(T::one());
                fill(&mut l.wq);
                fill(&mut l.wk);
                fill(&mut l.wv);
                fill(&mut l.wo);
                l.mlp_norm.fill(T::one());
                fill(&mut l.w1);
                fill(&mut l.w2);
            }
            w.final_norm.fill(T::one());
            fill(&mut w.w_out);
        }
        Ok(Self {
            config,
            weights,
            provenance: ModelProvenance { seed, pretrain_steps: 0 },
        })
    }

    pub fn from_weights(
        config: ModelConfig,
        weights: Weights<T>,
        provenance: ModelProvenance,
    ) -> Result<Self> {
        config.validate()?;
        weights.check_shapes(&config)?;
        Ok(Self { config, weights, provenance })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights<T> {
        &self.weights
    }

    pub fn provenance(&self) -> ModelProvenance {
        self.provenance
    }

    pub fn into_weights(self) -> Weights<T> {
        self.weights
    }

    pub fn cast<U: Real>(&self) -> FrozenModel<U> {
        FrozenModel {
            config: self.config,
            weights: self.weights.cast(),
            provenance: self.provenance,
        }
    }

    /// SHA-256 over the native-precision little-endian weight bytes.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for t in self.weights.tensors() {
            buf.clear();
            t.iter().for_each(|x| x.put_le(&mut buf));
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }
}

pub use io::{load_model, save_model, MODEL_FORMAT_VERSION};
