use crate::error::{invalid, Result};
use crate::numerics::Real;

use super::ModelConfig;

/// Post-rotary keys and values for every layer, laid out
/// `[layer][head][slot][head_dim]` with a fixed slot capacity.
///
/// A cartridge is a `KvCache` whose length equals its capacity; decoding
/// appends into a cache with spare capacity.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache<T> {
    num_layers: usize,
    num_heads: usize,
    head_dim: usize,
    capacity: usize,
    len: usize,
    keys: Vec<T>,
    values: Vec<T>,
}

impl<T: Real> KvCache<T> {
    pub fn with_capacity(cfg: &ModelConfig, capacity: usize) -> Self {
        let n = cfg.prefix_len(capacity);
        Self {
            num_layers: cfg.num_layers,
            num_heads: cfg.num_heads,
            head_dim: cfg.head_dim,
            capacity,
            len: 0,
            keys: vec![T::zero(); n],
            values: vec![T::zero(); n],
        }
    }

    /// A full cache from compact `[L][h][len][d_head]` tensors.
    pub fn from_tensors(
        num_layers: usize,
        num_heads: usize,
        head_dim: usize,
        len: usize,
        keys: Vec<T>,
        values: Vec<T>,
    ) -> Result<Self> {
        let n = num_layers * num_heads * len * head_dim;
        if keys.len() != n || values.len() != n {
            return Err(invalid(format!(
                "kv tensors have {}/{} entries, expected {n}",
                keys.len(),
                values.len()
            )));
        }
        Ok(Self {
            num_layers,
            num_heads,
            head_dim,
            capacity: len,
            len,
            keys,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn matches(&self, cfg: &ModelConfig) -> bool {
        self.num_layers == cfg.num_layers
            && self.num_heads == cfg.num_heads
            && self.head_dim == cfg.head_dim
    }

    #[inline]
    fn base(&self, layer: usize, head: usize) -> usize {
        (layer * self.num_heads + head) * self.capacity * self.head_dim
    }

    /// Filled keys of one head: `len × head_dim`.
    #[inline]
    pub fn head_keys(&self, layer: usize, head: usize) -> &[T] {
        let b = self.base(layer, head);
        &self.keys[b..b + self.len * self.head_dim]
    }

    #[inline]
    pub fn head_values(&self, layer: usize, head: usize) -> &[T] {
        let b = self.base(layer, head);
        &self.values[b..b + self.len * self.head_dim]
    }

    pub fn head_keys_mut(&mut self, layer: usize, head: usize) -> &mut [T] {
        let b = self.base(layer, head);
        let n = self.len * self.head_dim;
        &mut self.keys[b..b + n]
    }

    pub fn head_values_mut(&mut self, layer: usize, head: usize) -> &mut [T] {
        let b = self.base(layer, head);
        let n = self.len * self.head_dim;
        &mut self.values[b..b + n]
    }

    /// Appends all of `other`'s filled slots.
    pub fn append(&mut self, other: &KvCache<T>) -> Result<()> {
        if other.num_layers != self.num_layers
            || other.num_heads != self.num_heads
            || other.head_dim != self.head_dim
        {
            return Err(invalid("kv cache shape mismatch on append"));
        }
        if self.len + other.len > self.capacity {
            return Err(invalid(format!(
                "kv cache capacity {} exceeded by append of {}",
                self.capacity, other.len
            )));
        }
        let dh = self.head_dim;
        for l in 0..self.num_layers {
            for h in 0..self.num_heads {
                let dst = self.base(l, h) + self.len * dh;
                let n = other.len * dh;
                self.keys[dst..dst + n].copy_from_slice(other.head_keys(l, h));
                self.values[dst..dst + n].copy_from_slice(other.head_values(l, h));
            }
        }
        self.len += other.len;
        Ok(())
    }

    /// First `len` slots, compacted so capacity equals length.
    pub fn truncated(&self, len: usize) -> Result<KvCache<T>> {
        if len > self.len {
            return Err(invalid(format!("cannot truncate cache of {} to {len}", self.len)));
        }
        let dh = self.head_dim;
        let mut keys = Vec::with_capacity(self.num_layers * self.num_heads * len * dh);
        let mut values = Vec::with_capacity(keys.capacity());
        for l in 0..self.num_layers {
            for h in 0..self.num_heads {
                keys.extend_from_slice(&self.head_keys(l, h)[..len * dh]);
                values.extend_from_slice(&self.head_values(l, h)[..len * dh]);
            }
        }
        KvCache::from_tensors(self.num_layers, self.num_heads, dh, len, keys, values)
    }

    /// Copy with room for `extra` more slots.
    pub fn with_spare(&self, extra: usize) -> KvCache<T> {
        let mut out = KvCache {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            head_dim: self.head_dim,
            capacity: self.len + extra,
            len: 0,
            keys: vec![T::zero(); self.num_layers * self.num_heads * (self.len + extra) * self.head_dim],
            values: vec![T::zero(); self.num_layers * self.num_heads * (self.len + extra) * self.head_dim],
        };
        out.append(self).expect("capacity reserved");
        out
    }

    /// Compact key tensor `[L][h][len][d_head]`.
    pub fn keys(&self) -> std::borrow::Cow<'_, [T]> {
        if self.capacity == self.len {
            std::borrow::Cow::Borrowed(&self.keys)
        } else {
            std::borrow::Cow::Owned(self.truncated(self.len).expect("len").keys)
        }
    }

    pub fn values(&self) -> std::borrow::Cow<'_, [T]> {
        if self.capacity == self.len {
            std::borrow::Cow::Borrowed(&self.values)
        } else {
            std::borrow::Cow::Owned(self.truncated(self.len).expect("len").values)
        }
    }

    pub fn into_tensors(self) -> (Vec<T>, Vec<T>) {
        if self.capacity == self.len {
            (self.keys, self.values)
        } else {
            let c = self.truncated(self.len).expect("len");
            (c.keys, c.values)
        }
    }

    /// Marks every slot as filled; contents are whatever was there (zeros
    /// for a fresh cache).
    pub(crate) fn fill_to_capacity(&mut self) {
        self.len = self.capacity;
    }

    /// Whole backing tensors. Only meaningful for compact caches.
    pub(crate) fn raw_mut(&mut self) -> (&mut [T], &mut [T]) {
        (&mut self.keys, &mut self.values)
    }

    pub fn cast<U: Real>(&self) -> KvCache<U> {
        KvCache {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            head_dim: self.head_dim,
            capacity: self.capacity,
            len: self.len,
            keys: self.keys.iter().map(|x| U::of(x.as_f64())).collect(),
            values: self.values.iter().map(|x| U::of(x.as_f64())).collect(),
        }
    }
}
