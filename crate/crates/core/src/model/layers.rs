//! Tape-level building blocks. Parameters arrive already bound as [`Var`]s.

use super::params::{EncoderLayer, Expert, Linear, Mlp, Norm};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};

pub fn linear(tape: &mut Tape, x: Var, p: &Linear<Var>) -> Result<Var> {
    let y = tape.matmul(x, p.weight)?;
    tape.add_bias(y, p.bias)
}

/// `output(GELU(hidden(x)))`, applied to the trailing axis.
pub fn mlp(tape: &mut Tape, x: Var, p: &Mlp<Var>) -> Result<Var> {
    let h = linear(tape, x, &p.hidden)?;
    let h = tape.gelu(h);
    linear(tape, h, &p.output)
}

pub fn norm(tape: &mut Tape, x: Var, p: &Norm<Var>, eps: f64) -> Result<Var> {
    tape.layer_norm(x, p.gamma, p.beta, eps)
}

/// Per-token `LayerNorm(MLP(x))` of `x[B, N, N]`, giving `Z[B, N, d]`.
pub fn embed(tape: &mut Tape, x: Var, mlp_p: &Mlp<Var>, norm_p: &Norm<Var>, eps: f64) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let n_in = tape.shape(mlp_p.hidden.weight)[0];
    if s.len() != 3 || s[2] != n_in {
        return Err(Error::Shape {
            op: "embed",
            lhs: s,
            rhs: vec![n_in],
        });
    }
    let h = mlp(tape, x, mlp_p)?;
    norm(tape, h, norm_p, eps)
}

/// Multi-head self-attention over `x[B, N, d]`. Returns the projected output
/// and each head's row-stochastic attention matrix `[B, N, N]`.
pub fn multi_head_attention(tape: &mut Tape, x: Var, layer: &EncoderLayer<Var>) -> Result<(Var, Vec<Var>)> {
    let mut outputs = Vec::with_capacity(layer.heads.len());
    let mut attention = Vec::with_capacity(layer.heads.len());
    for head in &layer.heads {
        let q = tape.matmul(x, head.w_q)?;
        let k = tape.matmul(x, head.w_k)?;
        let v = tape.matmul(x, head.w_v)?;
        let head_dim = tape.shape(q)[2];
        let kt = tape.transpose_last2(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (head_dim as f64).sqrt());
        let attn = tape.softmax(scores);
        outputs.push(tape.matmul(attn, v)?);
        attention.push(attn);
    }
    let concat = tape.concat(&outputs, 2)?;
    Ok((tape.matmul(concat, layer.w_o)?, attention))
}

/// Post-norm encoder layer: attention and FFN sublayers, each with a residual.
pub fn encoder_layer(tape: &mut Tape, x: Var, layer: &EncoderLayer<Var>, eps: f64) -> Result<(Var, Vec<Var>)> {
    let (attn_out, attention) = multi_head_attention(tape, x, layer)?;
    let res = tape.add(x, attn_out)?;
    let x1 = norm(tape, res, &layer.attn_norm, eps)?;
    let ffn = mlp(tape, x1, &layer.ffn)?;
    let res = tape.add(x1, ffn)?;
    Ok((norm(tape, res, &layer.ffn_norm, eps)?, attention))
}

/// Handles for one expert's pooling and classification.
#[derive(Clone, Copy, Debug)]
pub struct ExpertVars {
    /// Token scores `[B, N]`.
    pub logits: Var,
    /// Masked softmax weights `[B, N]`; holds the top-k selection.
    pub weights: Var,
    /// Pooled token `[B, d_red]`.
    pub pooled: Var,
    /// Class logits `[B, C]`.
    pub output: Var,
}

/// Masked top-k softmax of `logits[B, N]` and the weighted sum of the kept
/// rows of `h[B, N, d_red]`. Returns `(pooled[B, d_red], weights[B, N])`.
pub fn pool_top_k(tape: &mut Tape, h: Var, logits: Var, k: usize) -> Result<(Var, Var)> {
    let s = tape.shape(h).to_vec();
    let (b, n, dr) = (s[0], s[1], s[2]);
    if tape.shape(logits) != [b, n] {
        return Err(Error::Shape {
            op: "pool_top_k",
            lhs: s,
            rhs: tape.shape(logits).to_vec(),
        });
    }
    let weights = tape.masked_topk_softmax(logits, k)?;
    let w = tape.reshape(weights, &[b, 1, n])?;
    let pooled = tape.matmul(w, h)?;
    let pooled = tape.reshape(pooled, &[b, dr])?;
    Ok((pooled, weights))
}

/// Scores tokens of `h[B, N, d_red]` with `scorer`, then [`pool_top_k`].
/// Returns `(pooled[B, d_red], weights[B, N], logits[B, N])`.
pub fn expert_pool(tape: &mut Tape, h: Var, scorer: &Mlp<Var>, k: usize) -> Result<(Var, Var, Var)> {
    let s = tape.shape(h).to_vec();
    let scores = mlp(tape, h, scorer)?;
    let logits = tape.reshape(scores, &[s[0], s[1]])?;
    let (pooled, weights) = pool_top_k(tape, h, logits, k)?;
    Ok((pooled, weights, logits))
}

pub fn expert_classify(tape: &mut Tape, pooled: Var, classifier: &Mlp<Var>) -> Result<Var> {
    mlp(tape, pooled, classifier)
}

pub fn expert(tape: &mut Tape, h: Var, p: &Expert<Var>, k: usize) -> Result<ExpertVars> {
    let (pooled, weights, logits) = expert_pool(tape, h, &p.attention, k)?;
    let output = expert_classify(tape, pooled, &p.classifier)?;
    Ok(ExpertVars {
        logits,
        weights,
        pooled,
        output,
    })
}

/// Flattens each subject's reduced tokens (ROI-major) and maps them to a
/// softmax over experts. Returns `(v[B, N·d_red], g[B, E], π[B, E])`.
pub fn gate(tape: &mut Tape, h: Var, p: &Mlp<Var>) -> Result<(Var, Var, Var)> {
    let s = tape.shape(h).to_vec();
    let v = tape.reshape(h, &[s[0], s[1] * s[2]])?;
    let g = mlp(tape, v, p)?;
    let pi = tape.softmax(g);
    Ok((v, g, pi))
}

/// `Σ_e π[:, e] · y_e` for `π[B, E]` and expert logits `y_e[B, C]`.
pub fn combine(tape: &mut Tape, pi: Var, outputs: &[Var]) -> Result<Var> {
    let ps = tape.shape(pi).to_vec();
    if ps.len() != 2 || ps[1] != outputs.len() {
        return Err(Error::Shape {
            op: "combine",
            lhs: ps,
            rhs: vec![outputs.len()],
        });
    }
    let b = ps[0];
    let ys = outputs
        .iter()
        .map(|&y| {
            let s = tape.shape(y).to_vec();
            if s.len() != 2 || s[0] != b {
                return Err(Error::Shape {
                    op: "combine",
                    lhs: vec![b],
                    rhs: s,
                });
            }
            tape.reshape(y, &[b, 1, s[1]])
        })
        .collect::<Result<Vec<_>>>()?;
    let c = tape.shape(ys[0])[2];
    let stacked = tape.concat(&ys, 1)?;
    let pi = tape.reshape(pi, &[b, 1, outputs.len()])?;
    let mixed = tape.matmul(pi, stacked)?;
    tape.reshape(mixed, &[b, c])
}
