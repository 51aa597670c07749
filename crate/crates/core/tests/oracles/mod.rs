//! Independent reference implementations the library is checked against.
//! Nothing here calls into the code under test except for plain data access.

#![allow(dead_code)]

use cartridge_lab::model::{FrozenModel, ModelConfig, ModelProvenance, Weights};
use cartridge_lab::numerics::seeded_rng;
use cartridge_lab::Token;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Two layers, two heads of width 8, byte vocabulary.
pub fn tiny_config() -> ModelConfig {
    ModelConfig::new(2, 2, 8, 256, 1024).unwrap()
}

/// Same as `FrozenModel::init` but with larger weights so attention patterns
/// are far from uniform and numerical checks have something to bite on.
pub fn sharp_model(config: ModelConfig, seed: u64, std: f64) -> FrozenModel<f64> {
    let mut rng = seeded_rng(seed, 77);
    let base = FrozenModel::<f64>::init(config, seed).unwrap();
    let mut w = base.into_weights();
    for t in w.tensors_mut() {
        let is_gain = t.iter().all(|&x| x == 1.0);
        for x in t.iter_mut() {
            if is_gain {
                *x = 1.0 + 0.1 * rng.sample::<f64, _>(StandardNormal);
            } else {
                *x = std * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    FrozenModel::from_weights(config, w, ModelProvenance { seed, pretrain_steps: 0 }).unwrap()
}

/// Model whose output projection is zero: every position predicts the
/// uniform distribution.
pub fn uniform_model<T: cartridge_lab::numerics::Real>(config: ModelConfig) -> FrozenModel<T> {
    let mut w: Weights<T> = FrozenModel::<T>::init(config, 1).unwrap().into_weights();
    w.w_out.iter_mut().for_each(|x| *x = T::zero());
    FrozenModel::from_weights(config, w, ModelProvenance::default()).unwrap()
}

pub fn random_tokens(n: usize, seed: u64, vocab: u32) -> Vec<Token> {
    let mut rng = seeded_rng(seed, 5);
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}

fn vecmat(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    let mut y = vec![0.0; cols];
    for (i, xi) in x.iter().enumerate() {
        for j in 0..cols {
            y[j] += xi * w[i * cols + j];
        }
    }
    y
}

fn rms(x: &[f64], g: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = 1.0 / (ms + 1e-5).sqrt();
    x.iter().zip(g).map(|(v, gi)| v * r * gi).collect()
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (u + 0.044715 * u.powi(3))).tanh())
}

/// Rotates consecutive pairs of a head vector by position-dependent angles.
fn rotate(v: &mut [f64], pos: usize, base: f64) {
    let dh = v.len();
    for i in 0..dh / 2 {
        let theta = base.powf(-2.0 * i as f64 / dh as f64) * pos as f64;
        let (s, c) = theta.sin_cos();
        let (a, b) = (v[2 * i], v[2 * i + 1]);
        v[2 * i] = a * c - b * s;
        v[2 * i + 1] = a * s + b * c;
    }
}

/// Per-layer, per-head key and value vectors of a prefix: `[l][h][slot] -> d_head`.
pub type PrefixVectors = Vec<Vec<Vec<(Vec<f64>, Vec<f64>)>>>;

/// Splits compact `[L][h][p][d_head]` tensors into per-slot vectors.
pub fn prefix_vectors(cfg: &ModelConfig, p: usize, keys: &[f64], values: &[f64]) -> PrefixVectors {
    let dh = cfg.head_dim;
    (0..cfg.num_layers)
        .map(|l| {
            (0..cfg.num_heads)
                .map(|h| {
                    (0..p)
                        .map(|s| {
                            let o = ((l * cfg.num_heads + h) * p + s) * dh;
                            (keys[o..o + dh].to_vec(), values[o..o + dh].to_vec())
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Straight-line transformer forward, one position at a time, in `f64`.
/// Returns logits per token.
pub fn reference_forward(model: &FrozenModel<f64>, prefix: Option<&PrefixVectors>, tokens: &[Token]) -> Vec<Vec<f64>> {
    let cfg = model.config();
    let w = model.weights();
    let (d, nh, dh, v) = (cfg.model_dim, cfg.num_heads, cfg.head_dim, cfg.vocab_size);
    let p = prefix.map(|pv| pv[0][0].len()).unwrap_or(0);
    let mut xs: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&t| w.embed[t as usize * d..(t as usize + 1) * d].to_vec())
        .collect();
    for (l, lw) in w.layers.iter().enumerate() {
        let normed: Vec<Vec<f64>> = xs.iter().map(|x| rms(x, &lw.attn_norm)).collect();
        let mut qs = Vec::new();
        let mut ks = Vec::new();
        let mut vs = Vec::new();
        for (t, a) in normed.iter().enumerate() {
            let mut q = vecmat(a, &lw.wq, d);
            let mut k = vecmat(a, &lw.wk, d);
            for h in 0..nh {
                rotate(&mut q[h * dh..(h + 1) * dh], p + t, cfg.rope_base);
                rotate(&mut k[h * dh..(h + 1) * dh], p + t, cfg.rope_base);
            }
            qs.push(q);
            ks.push(k);
            vs.push(vecmat(a, &lw.wv, d));
        }
        let mut new_xs = Vec::new();
        for t in 0..tokens.len() {
            let mut attn = vec![0.0; d];
            for h in 0..nh {
                let q = &qs[t][h * dh..(h + 1) * dh];
                let mut keys: Vec<&[f64]> = Vec::new();
                let mut vals: Vec<&[f64]> = Vec::new();
                if let Some(pv) = prefix {
                    for (k, vv) in &pv[l][h] {
                        keys.push(k);
                        vals.push(vv);
                    }
                }
                for j in 0..=t {
                    keys.push(&ks[j][h * dh..(h + 1) * dh]);
                    vals.push(&vs[j][h * dh..(h + 1) * dh]);
                }
                let scores: Vec<f64> = keys
                    .iter()
                    .map(|k| q.iter().zip(k.iter()).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (pj, vj) in e.iter().zip(&vals) {
                    for i in 0..dh {
                        attn[h * dh + i] += pj / z * vj[i];
                    }
                }
            }
            let proj = vecmat(&attn, &lw.wo, d);
            let mid: Vec<f64> = xs[t].iter().zip(&proj).map(|(a, b)| a + b).collect();
            let b = rms(&mid, &lw.mlp_norm);
            let u = vecmat(&b, &lw.w1, cfg.mlp_dim());
            let g: Vec<f64> = u.iter().map(|&x| gelu(x)).collect();
            let mlp = vecmat(&g, &lw.w2, d);
            new_xs.push(mid.iter().zip(&mlp).map(|(a, b)| a + b).collect());
        }
        xs = new_xs;
    }
    xs.iter()
        .map(|x| vecmat(&rms(x, &w.final_norm), &w.w_out, v))
        .collect()
}

/// Neumaier-compensated sum.
pub fn compensated_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// `Σ p_i (log p_i - log q_i)` with both distributions normalized in log space
/// and every sum compensated.
pub fn kl_oracle(teacher: &[f64], student: &[f64]) -> f64 {
    let lse = |x: &[f64]| {
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + compensated_sum(x.iter().map(|v| (v - m).exp())).ln()
    };
    let (lt, ls) = (lse(teacher), lse(student));
    compensated_sum(teacher.iter().zip(student).map(|(a, b)| {
        let lp = a - lt;
        let lq = b - ls;
        lp.exp() * (lp - lq)
    }))
}

/// Eigenvalues of a symmetric matrix by cyclic two-sided Jacobi rotations.
pub fn symmetric_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ev
}

/// Singular values via eigenvalues of the Gram matrix `MᵀM` (`rows × cols`).
pub fn gram_singular_values(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut g = vec![0.0; cols * cols];
    for i in 0..cols {
        for j in 0..cols {
            g[i * cols + j] = (0..rows).map(|r| data[r * cols + i] * data[r * cols + j]).sum();
        }
    }
    let mut ev: Vec<f64> = symmetric_eigenvalues(&g, cols)
        .into_iter()
        .map(|e| e.max(0.0).sqrt())
        .collect();
    ev.truncate(rows.min(cols));
    ev
}

/// Seeded random orthogonal matrix (Gram-Schmidt on Gaussian columns).
pub fn random_orthogonal(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeded_rng(seed, 9);
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        for c in &cols {
            let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            cols.push(v.iter().map(|x| x / norm).collect());
        }
    }
    let mut m = vec![0.0; n * n];
    for (j, c) in cols.iter().enumerate() {
        for i in 0..n {
            m[i * n + j] = c[i];
        }
    }
    m
}

/// `P(X >= k)` estimated from `trials` seeded draws without replacement.
pub fn hypergeom_monte_carlo(n_pop: u64, k_pop: u64, draws: u64, k: u64, trials: usize, seed: u64) -> (f64, f64) {
    let mut rng = seeded_rng(seed, 3);
    let mut hits = 0usize;
    for _ in 0..trials {
        let (mut marked, mut total) = (k_pop, n_pop);
        let mut got = 0;
        for _ in 0..draws {
            if rng.random_range(0..total) < marked {
                got += 1;
                marked -= 1;
            }
            total -= 1;
        }
        if got >= k {
            hits += 1;
        }
    }
    let p = hits as f64 / trials as f64;
    (p, (p * (1.0 - p) / trials as f64).sqrt())
}

/// Student-t CDF by quadrature of the unnormalized density after `x = tan θ`.
pub fn student_t_cdf_quadrature(t: f64, df: f64) -> f64 {
    let density = |theta: f64| {
        let x = theta.tan();
        let sec2 = 1.0 + x * x;
        (1.0 + x * x / df).powf(-(df + 1.0) / 2.0) * sec2
    };
    let simpson = |a: f64, b: f64, n: usize| {
        let h = (b - a) / n as f64;
        let mut s = density(a) + density(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * density(a + i as f64 * h);
        }
        s * h / 3.0
    };
    let lo = -std::f64::consts::FRAC_PI_2 + 1e-9;
    let hi = std::f64::consts::FRAC_PI_2 - 1e-9;
    let total = simpson(lo, hi, 200_000);
    simpson(lo, t.atan(), 200_000) / total
}

/// Exact one-sided sign-flip permutation p-value `P(mean* <= mean(d))`.
pub fn sign_flip_p_less(d: &[f64]) -> f64 {
    let n = d.len();
    assert!(n <= 20);
    let observed: f64 = d.iter().sum();
    let mut count = 0usize;
    for mask in 0..(1u32 << n) {
        let s: f64 = d
            .iter()
            .enumerate()
            .map(|(i, v)| if mask >> i & 1 == 1 { -v.abs() } else { v.abs() })
            .sum();
        if s <= observed + 1e-12 {
            count += 1;
        }
    }
    count as f64 / (1u64 << n) as f64
}

/// Type-7 quantile by sorting and direct interpolation.
pub fn sorted_quantile(samples: &[f64], q: f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q * (s.len() - 1) as f64;
    let i = pos.floor() as usize;
    if i + 1 >= s.len() {
        return s[s.len() - 1];
    }
    s[i] + (pos - i as f64) * (s[i + 1] - s[i])
}
