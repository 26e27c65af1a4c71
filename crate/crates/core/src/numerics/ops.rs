//! Eager (tape-free) versions of the differentiable operations.

use super::kernels;
use super::tape::{check_k, Tape};
use super::tensor::Tensor;
use crate::error::Result;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.matmul(a, b)?;
    Ok(tape.value(c).clone())
}

/// Softmax over the trailing axis.
pub fn softmax(x: &Tensor) -> Tensor {
    let mut out = x.clone().with_requires_grad(false);
    let w = x.last_dim();
    out.data_mut().chunks_mut(w).for_each(kernels::softmax_row);
    out
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(x.clone());
    let gamma = tape.constant(gamma.clone());
    let beta = tape.constant(beta.clone());
    let y = tape.layer_norm(x, gamma, beta, eps)?;
    Ok(tape.value(y).clone())
}

pub fn gelu(x: &Tensor) -> Tensor {
    let mut out = x.clone().with_requires_grad(false);
    out.data_mut().iter_mut().for_each(|v| *v = kernels::gelu(*v));
    out
}

/// Indices of the `k` largest values (ties to the lower index), ascending.
pub fn top_k_indices(x: &[f64], k: usize) -> Result<Vec<usize>> {
    check_k(k, x.len())?;
    Ok(kernels::top_k(x, k))
}

/// Softmax restricted to the top-`k` logits; returns `(weights, selected)`.
pub fn masked_topk_softmax(logits: &[f64], k: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    let selected = top_k_indices(logits, k)?;
    let mut weights = vec![0.0; logits.len()];
    kernels::masked_softmax_row(logits, &selected, &mut weights);
    Ok((weights, selected))
}

/// Mean cross-entropy of `logits[B, C]`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = tape.cross_entropy(l, labels)?;
    Ok(tape.value(loss).item())
}

/// Squared coefficient of variation, population standard deviation.
pub fn cv_squared(importance: &[f64], eps: f64) -> f64 {
    kernels::cv_squared(importance, eps).0
}
