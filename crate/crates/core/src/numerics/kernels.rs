//! Raw slice kernels shared by the tape and the eager tensor functions.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// `c[bi] = a[bi] · b[bi or 0]` for `batch` independent `m×p · p×n` products.
pub(crate) fn matmul(a: &[f64], b: &[f64], batch: usize, m: usize, p: usize, n: usize, b_batched: bool) -> Vec<f64> {
    let mut c = vec![0.0; batch * m * n];
    for bi in 0..batch {
        let a = &a[bi * m * p..(bi + 1) * m * p];
        let b = if b_batched { &b[bi * p * n..(bi + 1) * p * n] } else { b };
        let c = &mut c[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let c_row = &mut c[i * n..(i + 1) * n];
            for (k, &a_ik) in a[i * p..(i + 1) * p].iter().enumerate() {
                if a_ik == 0.0 {
                    continue;
                }
                let b_row = &b[k * n..(k + 1) * n];
                for (c_ij, &b_kj) in c_row.iter_mut().zip(b_row) {
                    *c_ij += a_ik * b_kj;
                }
            }
        }
    }
    c
}

/// Gradients of [`matmul`]: `(dA, dB)` with `dA = dC·Bᵀ`, `dB = Aᵀ·dC`
/// (summed over the batch when `b` is shared).
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_backward(
    a: &[f64],
    b: &[f64],
    dc: &[f64],
    batch: usize,
    m: usize,
    p: usize,
    n: usize,
    b_batched: bool,
) -> (Vec<f64>, Vec<f64>) {
    let mut da = vec![0.0; a.len()];
    let mut db = vec![0.0; b.len()];
    for bi in 0..batch {
        let a = &a[bi * m * p..(bi + 1) * m * p];
        let boff = if b_batched { bi * p * n } else { 0 };
        let bmat = &b[boff..boff + p * n];
        let dc = &dc[bi * m * n..(bi + 1) * m * n];
        let da = &mut da[bi * m * p..(bi + 1) * m * p];
        for i in 0..m {
            let dc_row = &dc[i * n..(i + 1) * n];
            for k in 0..p {
                let b_row = &bmat[k * n..(k + 1) * n];
                da[i * p + k] += dc_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
            }
        }
        let db = &mut db[boff..boff + p * n];
        for i in 0..m {
            let dc_row = &dc[i * n..(i + 1) * n];
            for k in 0..p {
                let a_ik = a[i * p + k];
                if a_ik == 0.0 {
                    continue;
                }
                for (d, &g) in db[k * n..(k + 1) * n].iter_mut().zip(dc_row) {
                    *d += a_ik * g;
                }
            }
        }
    }
    (da, db)
}

pub(crate) fn transpose_last2(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let block = rows * cols;
    for (src, dst) in x.chunks(block).zip(out.chunks_mut(block)) {
        for i in 0..rows {
            for j in 0..cols {
                dst[j * rows + i] = src[i * cols + j];
            }
        }
    }
    out
}

pub(crate) fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub(crate) fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub(crate) fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub(crate) fn gelu_derivative(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

/// In-place max-subtracted softmax of one row.
pub(crate) fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Writes `y ⊙ (dy − ⟨dy, y⟩)` for one softmax row into `dx`.
pub(crate) fn softmax_row_backward(y: &[f64], dy: &[f64], dx: &mut [f64]) {
    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
    for ((d, &yi), &gi) in dx.iter_mut().zip(y).zip(dy) {
        *d = yi * (gi - dot);
    }
}

/// Indices of the `k` largest entries, ties to the lower index, sorted ascending.
pub(crate) fn top_k(x: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    // stable: equal values keep ascending index order
    order.sort_by(|&i, &j| x[j].total_cmp(&x[i]));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Softmax over `selected` only; zero elsewhere.
pub(crate) fn masked_softmax_row(x: &[f64], selected: &[usize], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let max = selected.iter().map(|&i| x[i]).fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for &i in selected {
        let e = (x[i] - max).exp();
        out[i] = e;
        total += e;
    }
    for &i in selected {
        out[i] /= total;
    }
}

pub(crate) struct LayerNormStats {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Row-wise layer norm over the trailing axis (population variance, eps inside the root).
pub(crate) fn layer_norm(x: &[f64], width: usize, gamma: &[f64], beta: &[f64], eps: f64) -> (Vec<f64>, LayerNormStats) {
    let rows = x.len() / width;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mean = row.iter().sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / width as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std.push(inv);
        for j in 0..width {
            let h = (row[j] - mean) * inv;
            xhat[r * width + j] = h;
            out[r * width + j] = gamma[j] * h + beta[j];
        }
    }
    (out, LayerNormStats { xhat, inv_std })
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn layer_norm_backward(
    dy: &[f64],
    width: usize,
    gamma: &[f64],
    stats: &LayerNormStats,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = dy.len() / width;
    let mut dx = vec![0.0; dy.len()];
    let mut dgamma = vec![0.0; width];
    let mut dbeta = vec![0.0; width];
    let mut dxhat = vec![0.0; width];
    for r in 0..rows {
        let span = r * width..(r + 1) * width;
        let dy = &dy[span.clone()];
        let xhat = &stats.xhat[span.clone()];
        for j in 0..width {
            dgamma[j] += dy[j] * xhat[j];
            dbeta[j] += dy[j];
            dxhat[j] = dy[j] * gamma[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / width as f64;
        let mean_dx = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / width as f64;
        let inv = stats.inv_std[r];
        for (j, d) in dx[span].iter_mut().enumerate() {
            *d = inv * (dxhat[j] - mean_d - xhat[j] * mean_dx);
        }
    }
    (dx, dgamma, dbeta)
}

/// Squared coefficient of variation with population variance; `(value, gradient)`.
pub(crate) fn cv_squared(x: &[f64], eps: f64) -> (f64, Vec<f64>) {
    let n = x.len() as f64;
    if x.len() < 2 {
        return (0.0, vec![0.0; x.len()]);
    }
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let denom = mean + eps;
    let value = var / (denom * denom);
    let grad = x
        .iter()
        .map(|v| 2.0 * (v - mean) / n / (denom * denom) - 2.0 * var / (denom * denom * denom) / n)
        .collect();
    (value, grad)
}

/// Mean negative log-likelihood; returns `(loss, softmax probabilities)`.
pub(crate) fn cross_entropy(logits: &[f64], classes: usize, labels: &[usize]) -> (f64, Vec<f64>) {
    let mut probs = logits.to_vec();
    let mut loss = 0.0;
    for (row, &label) in probs.chunks_mut(classes).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[label];
        softmax_row(row);
    }
    (loss / labels.len() as f64, probs)
}
