use rayon::prelude::*;

use crate::cartridge::Cartridge;
use crate::error::{invalid, Result};
use crate::numerics::{log_softmax, matmul_at_acc, matmul_bt, Real};
use crate::Token;

use super::forward::{apply_rope, gelu_grad, rope_tables, run, Tape};
use super::{FrozenModel, KvCache, Weights};

/// Whether [`backward`] also returns gradients for the model weights. Only the
/// pre-training path asks for them; cartridge training never does.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    PrefixOnly,
    WithWeights,
}

/// One sequence of a distillation batch.
#[derive(Debug, Clone)]
pub struct DistillExample<T> {
    pub tokens: Vec<Token>,
    /// Positions in `tokens` whose next-token distribution enters the loss.
    pub positions: Vec<usize>,
    /// Teacher logits, one `vocab`-sized row per entry of `positions`.
    pub teacher: Vec<T>,
}

/// Gradients shaped like a cartridge: compact `[L][h][p][d_head]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CartridgeGrad<T> {
    pub keys: Vec<T>,
    pub values: Vec<T>,
}

impl<T: Real> CartridgeGrad<T> {
    pub fn norm(&self) -> f64 {
        self.keys
            .iter()
            .chain(&self.values)
            .map(|x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct BackwardOutput<T> {
    /// Mean KL over all selected positions of the batch.
    pub loss: f64,
    pub cartridge: CartridgeGrad<T>,
    pub weights: Option<Weights<T>>,
}

/// Masked-mean `KL(teacher || student)` over the batch and its exact gradient
/// with respect to every cartridge key and value.
///
/// Examples are processed independently (possibly on worker threads) and
/// their gradients summed in batch order, so the result does not depend on
/// the number of threads.
pub fn backward<T: Real>(
    model: &FrozenModel<T>,
    cartridge: &Cartridge<T>,
    batch: &[DistillExample<T>],
    mode: GradMode,
) -> Result<BackwardOutput<T>> {
    let vocab = model.config().vocab_size;
    let total: usize = batch.iter().map(|e| e.positions.len()).sum();
    if total == 0 {
        return Err(invalid("loss mask selects no positions"));
    }
    for e in batch {
        if e.teacher.len() != e.positions.len() * vocab {
            return Err(invalid("teacher logits do not match selected positions"));
        }
        if e.positions.iter().any(|&p| p >= e.tokens.len()) {
            return Err(invalid("loss position beyond sequence end"));
        }
    }
    let inv_total = 1.0 / total as f64;
    let want_weights = mode == GradMode::WithWeights;
    let prefix = cartridge.kv();

    type Part<T> = (f64, PrefixGrad<T>, Option<Weights<T>>);
    let parts: Vec<Result<Part<T>>> = batch
        .par_iter()
        .map(|ex| {
            let pass = run(model, Some(prefix), &ex.tokens, false, true)?;
            let mut dlogits = vec![T::zero(); ex.tokens.len() * vocab];
            let mut loss = 0.0;
            for (i, &pos) in ex.positions.iter().enumerate() {
                let lp = log_softmax(&ex.teacher[i * vocab..(i + 1) * vocab]);
                let lq = log_softmax(pass.logits.at(pos));
                let row = &mut dlogits[pos * vocab..(pos + 1) * vocab];
                let mut kl = 0.0;
                for ((a, b), g) in lp.iter().zip(&lq).zip(row.iter_mut()) {
                    let (pt, ps) = (a.exp(), b.exp());
                    kl += pt * (a - b);
                    *g += T::of((ps - pt) * inv_total);
                }
                loss += kl.max(0.0);
            }
            let tape = pass.tape.expect("recorded");
            let (grad, wg) = backward_pass(model, Some(prefix), &ex.tokens, &tape, &dlogits, want_weights);
            Ok((loss, grad, wg))
        })
        .collect();

    let n = model.config().prefix_len(prefix.len());
    let mut keys = vec![T::zero(); n];
    let mut values = vec![T::zero(); n];
    let mut weights = want_weights.then(|| Weights::zeros(model.config()));
    let mut loss = 0.0;
    for part in parts {
        let (l, g, wg) = part?;
        loss += l;
        keys.iter_mut().zip(&g.keys).for_each(|(a, b)| *a += *b);
        values.iter_mut().zip(&g.values).for_each(|(a, b)| *a += *b);
        if let (Some(acc), Some(wg)) = (weights.as_mut(), wg.as_ref()) {
            acc.add_assign(wg);
        }
    }
    Ok(BackwardOutput {
        loss: loss * inv_total,
        cartridge: CartridgeGrad { keys, values },
        weights,
    })
}

pub(crate) struct PrefixGrad<T> {
    pub keys: Vec<T>,
    pub values: Vec<T>,
}

fn rmsnorm_backward<T: Real>(
    x: &[T],
    rstd: &[T],
    gain: &[T],
    dy: &[T],
    d: usize,
    mut dgain: Option<&mut [T]>,
) -> Vec<T> {
    let inv_d = T::of(1.0 / d as f64);
    let mut dx = Vec::with_capacity(x.len());
    for ((xr, dyr), &r) in x.chunks_exact(d).zip(dy.chunks_exact(d)).zip(rstd) {
        let mut s = T::zero();
        for i in 0..d {
            s += xr[i] * dyr[i] * gain[i];
        }
        let coef = r * r * r * s * inv_d;
        for i in 0..d {
            dx.push(r * dyr[i] * gain[i] - xr[i] * coef);
        }
        if let Some(dg) = dgain.as_deref_mut() {
            for i in 0..d {
                dg[i] += dyr[i] * xr[i] * r;
            }
        }
    }
    dx
}

/// Reverse pass through a recorded forward. Returns prefix gradients (compact
/// layout, empty when there is no prefix) and optionally weight gradients.
pub(crate) fn backward_pass<T: Real>(
    model: &FrozenModel<T>,
    prefix: Option<&KvCache<T>>,
    tokens: &[Token],
    tape: &Tape<T>,
    dlogits: &[T],
    want_weights: bool,
) -> (PrefixGrad<T>, Option<Weights<T>>) {
    let cfg = model.config();
    let w = model.weights();
    let (n, d, nh, dh, f, vocab) = (
        tokens.len(),
        cfg.model_dim,
        cfg.num_heads,
        cfg.head_dim,
        cfg.mlp_dim(),
        cfg.vocab_size,
    );
    let p = prefix.map_or(0, KvCache::len);
    let ctx = p + n;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let (cos, sin) = rope_tables::<T>(cfg, p, n);
    let mut gw = want_weights.then(|| Weights::<T>::zeros(cfg));

    let plen = cfg.prefix_len(p);
    let mut gk = vec![T::zero(); plen];
    let mut gv = vec![T::zero(); plen];

    if let Some(g) = gw.as_mut() {
        matmul_at_acc(&tape.f, dlogits, n, d, vocab, &mut g.w_out);
    }
    let dfo = matmul_bt(dlogits, &w.w_out, n, vocab, d);
    let mut dx = rmsnorm_backward(
        &tape.x_final,
        &tape.rstd_final,
        &w.final_norm,
        &dfo,
        d,
        gw.as_mut().map(|g| g.final_norm.as_mut_slice()),
    );

    for l in (0..cfg.num_layers).rev() {
        let lw = &w.layers[l];
        let lt = &tape.layers[l];

        // MLP: x_out = x_mid + gelu(b·W1)·W2
        let dg = matmul_bt(&dx, &lw.w2, n, d, f);
        if let Some(g) = gw.as_mut() {
            matmul_at_acc(&lt.g, &dx, n, f, d, &mut g.layers[l].w2);
        }
        let du: Vec<T> = dg.iter().zip(&lt.u).map(|(&gi, &ui)| gi * gelu_grad(ui)).collect();
        if let Some(g) = gw.as_mut() {
            matmul_at_acc(&lt.b, &du, n, d, f, &mut g.layers[l].w1);
        }
        let db = matmul_bt(&du, &lw.w1, n, f, d);
        let dnorm = rmsnorm_backward(
            &lt.x_mid,
            &lt.rstd2,
            &lw.mlp_norm,
            &db,
            d,
            gw.as_mut().map(|g| g.layers[l].mlp_norm.as_mut_slice()),
        );
        let dx_mid: Vec<T> = dx.iter().zip(&dnorm).map(|(&a, &b)| a + b).collect();

        // Attention: x_mid = x_in + attn·Wo
        let dattn = matmul_bt(&dx_mid, &lw.wo, n, d, d);
        if let Some(g) = gw.as_mut() {
            matmul_at_acc(&lt.attn, &dx_mid, n, d, d, &mut g.layers[l].wo);
        }
        let mut dq = vec![T::zero(); n * d];
        let mut dk = vec![T::zero(); n * d];
        let mut dv = vec![T::zero(); n * d];
        let mut dalpha: Vec<T> = Vec::with_capacity(ctx);
        for h in 0..nh {
            let (pk, pv) = match prefix {
                Some(c) => (c.head_keys(l, h), c.head_values(l, h)),
                None => (&[][..], &[][..]),
            };
            let gbase = (l * nh + h) * p * dh;
            for t in 0..n {
                let len = p + t + 1;
                let probs = &lt.probs[(h * n + t) * ctx..(h * n + t) * ctx + len];
                let dout = &dattn[t * d + h * dh..t * d + (h + 1) * dh];
                let qv = &lt.q[t * d + h * dh..t * d + (h + 1) * dh];

                dalpha.clear();
                for vj in pv.chunks_exact(dh) {
                    dalpha.push(crate::numerics::dot(dout, vj));
                }
                for j in 0..=t {
                    dalpha.push(crate::numerics::dot(dout, &lt.v[j * d + h * dh..j * d + (h + 1) * dh]));
                }
                let mut weighted = T::zero();
                for (a, da) in probs.iter().zip(&dalpha) {
                    weighted += *a * *da;
                }

                let dq_t = &mut dq[t * d + h * dh..t * d + (h + 1) * dh];
                for j in 0..len {
                    let a = probs[j];
                    let ds = a * (dalpha[j] - weighted) * scale;
                    if j < p {
                        let kj = &pk[j * dh..(j + 1) * dh];
                        let off = gbase + j * dh;
                        for i in 0..dh {
                            dq_t[i] += ds * kj[i];
                            gk[off + i] += ds * qv[i];
                            gv[off + i] += a * dout[i];
                        }
                    } else {
                        let jt = j - p;
                        let off = jt * d + h * dh;
                        for i in 0..dh {
                            dq_t[i] += ds * lt.k[off + i];
                            dk[off + i] += ds * qv[i];
                            dv[off + i] += a * dout[i];
                        }
                    }
                }
            }
        }
        apply_rope(&mut dq, cfg, &cos, &sin, true);
        apply_rope(&mut dk, cfg, &cos, &sin, true);
        if let Some(g) = gw.as_mut() {
            let gl = &mut g.layers[l];
            matmul_at_acc(&lt.a, &dq, n, d, d, &mut gl.wq);
            matmul_at_acc(&lt.a, &dk, n, d, d, &mut gl.wk);
            matmul_at_acc(&lt.a, &dv, n, d, d, &mut gl.wv);
        }
        let mut da = matmul_bt(&dq, &lw.wq, n, d, d);
        for (x, y) in da.iter_mut().zip(matmul_bt(&dk, &lw.wk, n, d, d)) {
            *x += y;
        }
        for (x, y) in da.iter_mut().zip(matmul_bt(&dv, &lw.wv, n, d, d)) {
            *x += y;
        }
        let dnorm = rmsnorm_backward(
            &lt.x_in,
            &lt.rstd1,
            &lw.attn_norm,
            &da,
            d,
            gw.as_mut().map(|g| g.layers[l].attn_norm.as_mut_slice()),
        );
        dx = dx_mid.iter().zip(&dnorm).map(|(&a, &b)| a + b).collect();
    }

    if let Some(g) = gw.as_mut() {
        for (t, &tok) in tokens.iter().enumerate() {
            let row = &mut g.embed[tok as usize * d..(tok as usize + 1) * d];
            for (e, &gx) in row.iter_mut().zip(&dx[t * d..(t + 1) * d]) {
                *e += gx;
            }
        }
    }
    (PrefixGrad { keys: gk, values: gv }, gw)
}
