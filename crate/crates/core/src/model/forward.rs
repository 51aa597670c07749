use crate::cartridge::Cartridge;
use crate::error::{invalid, LabError, Result};
use crate::numerics::{dot, matmul, Real};
use crate::Token;

use super::{FrozenModel, KvCache, ModelConfig, RMS_EPS};

/// Per-position logits, `[positions × vocab]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<T> {
    pub vocab: usize,
    pub data: Vec<T>,
}

impl<T: Real> Logits<T> {
    pub fn positions(&self) -> usize {
        self.data.len() / self.vocab
    }

    pub fn at(&self, pos: usize) -> &[T] {
        &self.data[pos * self.vocab..(pos + 1) * self.vocab]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.vocab)
    }
}

/// Output of [`forward_full`]: logits plus every layer's cache.
#[derive(Debug, Clone)]
pub struct FullForward<T> {
    pub logits: Logits<T>,
    pub cache: KvCache<T>,
}

/// Activations saved for the backward pass.
pub(crate) struct LayerTape<T> {
    pub x_in: Vec<T>,
    pub rstd1: Vec<T>,
    pub a: Vec<T>,
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    /// `[head][t][ctx]` with `ctx = prefix + n`; only `j <= prefix + t` is set.
    pub probs: Vec<T>,
    pub attn: Vec<T>,
    pub x_mid: Vec<T>,
    pub rstd2: Vec<T>,
    pub b: Vec<T>,
    pub u: Vec<T>,
    pub g: Vec<T>,
}

pub(crate) struct Tape<T> {
    pub layers: Vec<LayerTape<T>>,
    pub x_final: Vec<T>,
    pub rstd_final: Vec<T>,
    pub f: Vec<T>,
}

pub(crate) struct Pass<T> {
    pub logits: Logits<T>,
    pub kv: Option<KvCache<T>>,
    pub tape: Option<Tape<T>>,
}

/// Causal forward over `tokens` with no prefix. The returned cache holds the
/// post-rotary keys and values of every position.
pub fn forward_full<T: Real>(model: &FrozenModel<T>, tokens: &[Token]) -> Result<FullForward<T>> {
    let pass = run(model, None, tokens, true, false)?;
    Ok(FullForward {
        logits: pass.logits,
        cache: pass.kv.expect("kv captured"),
    })
}

/// Student forward `F_Z(· | tokens)`: every layer attends over the cartridge
/// slots followed causally by the tokens. Token positions start at `p`.
pub fn forward_with_prefix<T: Real>(
    model: &FrozenModel<T>,
    cartridge: &Cartridge<T>,
    tokens: &[Token],
) -> Result<Logits<T>> {
    Ok(run(model, Some(cartridge.kv()), tokens, false, false)?.logits)
}

/// Forward over `tokens` continuing an arbitrary cache (or none). Returns the
/// logits and the new tokens' keys/values, ready to [`KvCache::append`].
pub fn forward_cached<T: Real>(
    model: &FrozenModel<T>,
    prefix: Option<&KvCache<T>>,
    tokens: &[Token],
) -> Result<(Logits<T>, KvCache<T>)> {
    let pass = run(model, prefix, tokens, true, false)?;
    Ok((pass.logits, pass.kv.expect("kv captured")))
}

/// Logits only, over an optional prefix cache.
pub(crate) fn run_logits<T: Real>(
    model: &FrozenModel<T>,
    prefix: Option<&KvCache<T>>,
    tokens: &[Token],
) -> Result<Logits<T>> {
    Ok(run(model, prefix, tokens, false, false)?.logits)
}

pub(crate) fn validate_inputs<T: Real>(
    cfg: &ModelConfig,
    prefix: Option<&KvCache<T>>,
    tokens: &[Token],
) -> Result<usize> {
    if tokens.is_empty() {
        return Err(invalid("empty token sequence"));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(invalid(format!(
            "token id {bad} out of range for vocabulary of {}",
            cfg.vocab_size
        )));
    }
    let p = match prefix {
        Some(kv) => {
            if !kv.matches(cfg) {
                return Err(invalid(format!(
                    "prefix shape (L={}, h={}, d_head={}) does not match model (L={}, h={}, d_head={})",
                    kv.num_layers(),
                    kv.num_heads(),
                    kv.head_dim(),
                    cfg.num_layers,
                    cfg.num_heads,
                    cfg.head_dim
                )));
            }
            kv.len()
        }
        None => 0,
    };
    let needed = p + tokens.len();
    if needed > cfg.max_positions {
        return Err(LabError::Capacity {
            needed,
            limit: cfg.max_positions,
        });
    }
    Ok(p)
}

pub(crate) fn rmsnorm<T: Real>(x: &[T], gain: &[T], d: usize) -> (Vec<T>, Vec<T>) {
    let eps = T::of(RMS_EPS);
    let inv_d = T::of(1.0 / d as f64);
    let mut y = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(x.len() / d);
    for row in x.chunks_exact(d) {
        let ms = dot(row, row) * inv_d;
        let r = T::one() / (ms + eps).sqrt();
        rstd.push(r);
        y.extend(row.iter().zip(gain).map(|(&xi, &g)| xi * r * g));
    }
    (y, rstd)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu<T: Real>(u: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * u * (T::one() + (c * (u + a * u * u * u)).tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Real>(u: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let th = (c * (u + a * u * u * u)).tanh();
    half * (T::one() + th) + half * u * (T::one() - th * th) * c * (T::one() + T::of(3.0) * a * u * u)
}

/// `(cos, sin)` tables for positions `start..start+n`, `[n × d_head/2]`.
pub(crate) fn rope_tables<T: Real>(cfg: &ModelConfig, start: usize, n: usize) -> (Vec<T>, Vec<T>) {
    let half = cfg.head_dim / 2;
    let mut cos = Vec::with_capacity(n * half);
    let mut sin = Vec::with_capacity(n * half);
    for pos in start..start + n {
        for i in 0..half {
            let freq = cfg.rope_base.powf(-2.0 * i as f64 / cfg.head_dim as f64);
            let angle = pos as f64 * freq;
            cos.push(T::of(angle.cos()));
            sin.push(T::of(angle.sin()));
        }
    }
    (cos, sin)
}

/// Rotates adjacent pairs of every head in place; `inverse` applies the
/// transpose (used to pull gradients back through the rotation).
pub(crate) fn apply_rope<T: Real>(x: &mut [T], cfg: &ModelConfig, cos: &[T], sin: &[T], inverse: bool) {
    let d = cfg.model_dim;
    let half = cfg.head_dim / 2;
    for (t, row) in x.chunks_exact_mut(d).enumerate() {
        let (c_row, s_row) = (&cos[t * half..(t + 1) * half], &sin[t * half..(t + 1) * half]);
        for head in row.chunks_exact_mut(cfg.head_dim) {
            for i in 0..half {
                let (c, s) = (c_row[i], if inverse { -s_row[i] } else { s_row[i] });
                let (x0, x1) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = x0 * c - x1 * s;
                head[2 * i + 1] = x0 * s + x1 * c;
            }
        }
    }
}

pub(crate) fn run<T: Real>(
    model: &FrozenModel<T>,
    prefix: Option<&KvCache<T>>,
    tokens: &[Token],
    capture_kv: bool,
    record: bool,
) -> Result<Pass<T>> {
    let cfg = model.config();
    let p = validate_inputs(cfg, prefix, tokens)?;
    let w = model.weights();
    let (n, d, nh, dh, f, vocab) = (
        tokens.len(),
        cfg.model_dim,
        cfg.num_heads,
        cfg.head_dim,
        cfg.mlp_dim(),
        cfg.vocab_size,
    );
    let ctx = p + n;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let (cos, sin) = rope_tables::<T>(cfg, p, n);

    let mut x = Vec::with_capacity(n * d);
    for &t in tokens {
        let t = t as usize;
        x.extend_from_slice(&w.embed[t * d..(t + 1) * d]);
    }

    let mut kv = capture_kv.then(|| {
        let mut c = KvCache::with_capacity(cfg, n);
        c.fill_to_capacity();
        c
    });
    let mut tape_layers = Vec::new();
    let mut scores: Vec<T> = Vec::with_capacity(ctx);

    for (l, lw) in w.layers.iter().enumerate() {
        let (a, rstd1) = rmsnorm(&x, &lw.attn_norm, d);
        let mut q = matmul(&a, &lw.wq, n, d, d);
        let mut k = matmul(&a, &lw.wk, n, d, d);
        let v = matmul(&a, &lw.wv, n, d, d);
        apply_rope(&mut q, cfg, &cos, &sin, false);
        apply_rope(&mut k, cfg, &cos, &sin, false);

        let mut attn = vec![T::zero(); n * d];
        let mut probs = if record { vec![T::zero(); nh * n * ctx] } else { Vec::new() };
        for h in 0..nh {
            let (pk, pv) = match prefix {
                Some(c) => (c.head_keys(l, h), c.head_values(l, h)),
                None => (&[][..], &[][..]),
            };
            for t in 0..n {
                let qv = &q[t * d + h * dh..t * d + (h + 1) * dh];
                scores.clear();
                for kj in pk.chunks_exact(dh) {
                    scores.push(dot(qv, kj) * scale);
                }
                for j in 0..=t {
                    scores.push(dot(qv, &k[j * d + h * dh..j * d + (h + 1) * dh]) * scale);
                }
                let max = scores.iter().fold(T::neg_infinity(), |m, &s| m.max(s));
                let mut z = T::zero();
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                let inv_z = T::one() / z;
                scores.iter_mut().for_each(|s| *s *= inv_z);

                let out = &mut attn[t * d + h * dh..t * d + (h + 1) * dh];
                for (pj, vj) in scores.iter().zip(pv.chunks_exact(dh)) {
                    for (o, &vv) in out.iter_mut().zip(vj) {
                        *o += *pj * vv;
                    }
                }
                for (j, pj) in scores[p..].iter().enumerate() {
                    let vj = &v[j * d + h * dh..j * d + (h + 1) * dh];
                    for (o, &vv) in out.iter_mut().zip(vj) {
                        *o += *pj * vv;
                    }
                }
                if record {
                    let base = (h * n + t) * ctx;
                    probs[base..base + scores.len()].copy_from_slice(&scores);
                }
            }
        }

        if let Some(kv) = kv.as_mut() {
            kv_store_layer(kv, l, &k, &v, n, nh, dh);
        }

        let proj = matmul(&attn, &lw.wo, n, d, d);
        let x_mid: Vec<T> = x.iter().zip(&proj).map(|(&a, &b)| a + b).collect();
        let (b, rstd2) = rmsnorm(&x_mid, &lw.mlp_norm, d);
        let u = matmul(&b, &lw.w1, n, d, f);
        let g: Vec<T> = u.iter().map(|&ui| gelu(ui)).collect();
        let mlp = matmul(&g, &lw.w2, n, f, d);
        let x_out: Vec<T> = x_mid.iter().zip(&mlp).map(|(&a, &b)| a + b).collect();

        if record {
            tape_layers.push(LayerTape {
                x_in: std::mem::replace(&mut x, x_out),
                rstd1,
                a,
                q,
                k,
                v,
                probs,
                attn,
                x_mid,
                rstd2,
                b,
                u,
                g,
            });
        } else {
            x = x_out;
        }
    }

    let (fo, rstd_final) = rmsnorm(&x, &w.final_norm, d);
    let logits = matmul(&fo, &w.w_out, n, d, vocab);
    let tape = record.then_some(Tape {
        layers: tape_layers,
        x_final: x,
        rstd_final,
        f: fo,
    });
    Ok(Pass {
        logits: Logits { vocab, data: logits },
        kv,
        tape,
    })
}

fn kv_store_layer<T: Real>(kv: &mut KvCache<T>, l: usize, k: &[T], v: &[T], n: usize, nh: usize, dh: usize) {
    let d = nh * dh;
    for h in 0..nh {
        let keys = kv.head_keys_mut(l, h);
        for t in 0..n {
            keys[t * dh..(t + 1) * dh].copy_from_slice(&k[t * d + h * dh..t * d + (h + 1) * dh]);
        }
        let values = kv.head_values_mut(l, h);
        for t in 0..n {
            values[t * dh..(t + 1) * dh].copy_from_slice(&v[t * d + h * dh..t * d + (h + 1) * dh]);
        }
    }
}
