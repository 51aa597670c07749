//! The cartridge: a trainable per-layer key/value prefix of `p` slots.
//!
//! Keys and values are stored post-rotary, `[L][h][p][d_head]`, exactly like
//! a KV cache captured from a forward pass. Slots carry no position of their
//! own; the tokens that follow them start at position `p`.

mod init;
mod io;

pub use init::{init_first_k, init_rvi, init_sci, init_sci_with, sci_sequence, swap_keys, SciSample};
pub use io::{decode_cartridge, encode_cartridge, load_cartridge, save_cartridge, CARTRIDGE_FORMAT_VERSION};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};
use crate::model::{KvCache, ModelConfig};
use crate::numerics::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    Rvi,
    FirstK,
    Sci,
}

impl std::fmt::Display for InitScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InitScheme::Rvi => "rvi",
            InitScheme::FirstK => "first_k",
            InitScheme::Sci => "sci",
        })
    }
}

/// Digests of the two cartridges a key-swapped cartridge was assembled from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapParents {
    pub value_source: String,
    pub key_source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CartridgeMeta {
    pub p: usize,
    pub init_scheme: InitScheme,
    /// SCI only.
    #[serde(default)]
    pub chunk_size: Option<usize>,
    pub seed: u64,
    /// Digest of the token sequence the cartridge was initialized from; empty
    /// for random initialization.
    pub corpus_digest: String,
    pub training_steps: u64,
    /// SCI draw-order chunk starts, so the initializer sequence is replayable.
    #[serde(default)]
    pub sci_offsets: Vec<usize>,
    #[serde(default)]
    pub sci_sorted: bool,
    #[serde(default)]
    pub parents: Option<SwapParents>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cartridge<T> {
    kv: KvCache<T>,
    meta: CartridgeMeta,
}

/// Which half of a cartridge an analysis looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Keys,
    Values,
}

impl Role {
    pub const BOTH: [Role; 2] = [Role::Keys, Role::Values];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Keys => "keys",
            Role::Values => "values",
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl<T: Real> Cartridge<T> {
    pub fn new(kv: KvCache<T>, meta: CartridgeMeta) -> Result<Self> {
        if kv.is_empty() {
            return Err(invalid("cartridge needs at least one slot"));
        }
        if kv.len() != kv.capacity() {
            return Err(invalid("cartridge cache must be compact"));
        }
        if meta.p != kv.len() {
            return Err(invalid(format!("meta.p = {} but cache has {} slots", meta.p, kv.len())));
        }
        if kv.keys().iter().chain(kv.values().iter()).any(|x| !x.is_finite()) {
            return Err(invalid("cartridge has non-finite entries"));
        }
        Ok(Self { kv, meta })
    }

    pub fn kv(&self) -> &KvCache<T> {
        &self.kv
    }

    pub fn meta(&self) -> &CartridgeMeta {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut CartridgeMeta {
        &mut self.meta
    }

    pub fn p(&self) -> usize {
        self.kv.len()
    }

    /// `(L, h, p, d_head)`.
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (
            self.kv.num_layers(),
            self.kv.num_heads(),
            self.kv.len(),
            self.kv.head_dim(),
        )
    }

    pub fn matches(&self, cfg: &ModelConfig) -> bool {
        self.kv.matches(cfg)
    }

    pub fn keys(&self) -> &[T] {
        match self.kv.keys() {
            std::borrow::Cow::Borrowed(k) => k,
            std::borrow::Cow::Owned(_) => unreachable!("cartridge caches are compact"),
        }
    }

    pub fn values(&self) -> &[T] {
        match self.kv.values() {
            std::borrow::Cow::Borrowed(v) => v,
            std::borrow::Cow::Owned(_) => unreachable!("cartridge caches are compact"),
        }
    }

    pub fn role(&self, role: Role) -> &[T] {
        match role {
            Role::Keys => self.keys(),
            Role::Values => self.values(),
        }
    }

    /// `[h × p × d_head]` tensor of one role at one layer.
    pub fn layer_role(&self, layer: usize, role: Role) -> &[T] {
        let n = self.kv.num_heads() * self.p() * self.kv.head_dim();
        &self.role(role)[layer * n..(layer + 1) * n]
    }

    /// Mutable `(keys, values)` for the optimizer.
    pub fn tensors_mut(&mut self) -> (&mut [T], &mut [T]) {
        self.kv.raw_mut()
    }

    /// SHA-256 over the key then value bytes in native precision.
    pub fn digest(&self) -> String {
        let mut buf = Vec::with_capacity((self.keys().len() * 2) * T::DTYPE.width());
        for x in self.keys().iter().chain(self.values()) {
            x.put_le(&mut buf);
        }
        hex::encode(Sha256::digest(&buf))
    }

    pub fn cast<U: Real>(&self) -> Cartridge<U> {
        Cartridge {
            kv: self.kv.cast(),
            meta: self.meta.clone(),
        }
    }

    pub fn same_shape(&self, other: &Cartridge<T>) -> bool {
        self.shape() == other.shape()
    }
}
