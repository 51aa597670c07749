use rayon::prelude::*;

use crate::distill::{Adam, AdamConfig};
use crate::error::{invalid, Result};
use crate::numerics::{log_softmax, Real};
use crate::Token;

use super::backward::backward_pass;
use super::forward::run;
use super::{FrozenModel, Weights};

/// Owns a model while its weights are being pre-trained. This is the only
/// place weights change; [`Pretrainer::finish`] hands back a frozen model.
pub struct Pretrainer<T> {
    model: FrozenModel<T>,
    adam: Adam<T>,
}

impl<T: Real> Pretrainer<T> {
    pub fn new(model: FrozenModel<T>, adam: AdamConfig) -> Self {
        let shapes: Vec<usize> = model.weights.tensors().iter().map(|t| t.len()).collect();
        Self {
            adam: Adam::new(adam, &shapes),
            model,
        }
    }

    pub fn model(&self) -> &FrozenModel<T> {
        &self.model
    }

    /// One next-token cross-entropy step over `batch`. Returns the mean loss
    /// before the update.
    pub fn step(&mut self, batch: &[Vec<Token>]) -> Result<f64> {
        let (loss, grads) = cross_entropy_grad(&self.model, batch)?;
        let grads = grads.tensors();
        let grad_slices: Vec<&[T]> = grads.iter().map(|g| g.as_slice()).collect();
        let mut params = self.model.weights.tensors_mut();
        let mut param_slices: Vec<&mut [T]> = params.iter_mut().map(|p| p.as_mut_slice()).collect();
        self.adam.step(&mut param_slices, &grad_slices);
        self.model.provenance.pretrain_steps += 1;
        Ok(loss)
    }

    pub fn finish(self) -> FrozenModel<T> {
        self.model
    }
}

fn check_batch(batch: &[Vec<Token>]) -> Result<usize> {
    let total: usize = batch.iter().map(|s| s.len().saturating_sub(1)).sum();
    if total == 0 {
        return Err(invalid("pre-training batch has no next-token targets"));
    }
    Ok(total)
}

/// Mean next-token cross-entropy of `model` over `batch`.
pub fn cross_entropy_batch<T: Real>(model: &FrozenModel<T>, batch: &[Vec<Token>]) -> Result<f64> {
    let total = check_batch(batch)?;
    let mut sum = 0.0;
    for seq in batch.iter().filter(|s| s.len() >= 2) {
        let pass = run(model, None, &seq[..seq.len() - 1], false, false)?;
        for (t, &target) in seq[1..].iter().enumerate() {
            sum -= log_softmax(pass.logits.at(t))[target as usize];
        }
    }
    Ok(sum / total as f64)
}

fn cross_entropy_grad<T: Real>(
    model: &FrozenModel<T>,
    batch: &[Vec<Token>],
) -> Result<(f64, Weights<T>)> {
    let total = check_batch(batch)?;
    let inv_total = 1.0 / total as f64;
    let vocab = model.config().vocab_size;
    let parts: Vec<Result<(f64, Weights<T>)>> = batch
        .par_iter()
        .filter(|s| s.len() >= 2)
        .map(|seq| {
            let input = &seq[..seq.len() - 1];
            let pass = run(model, None, input, false, true)?;
            let mut dlogits = vec![T::zero(); input.len() * vocab];
            let mut loss = 0.0;
            for (t, &target) in seq[1..].iter().enumerate() {
                let lp = log_softmax(pass.logits.at(t));
                loss -= lp[target as usize];
                let row = &mut dlogits[t * vocab..(t + 1) * vocab];
                for (i, (g, l)) in row.iter_mut().zip(&lp).enumerate() {
                    let onehot = if i == target as usize { 1.0 } else { 0.0 };
                    *g = T::of((l.exp() - onehot) * inv_total);
                }
            }
            let tape = pass.tape.expect("recorded");
            let (_, wg) = backward_pass(model, None, input, &tape, &dlogits, true);
            Ok((loss, wg.expect("weight grads requested")))
        })
        .collect();
    let mut grads = Weights::zeros(model.config());
    let mut loss = 0.0;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        grads.add_assign(&g);
    }
    Ok((loss * inv_total, grads))
}
