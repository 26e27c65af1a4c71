use super::config::{Decoder, ModelConfig};
use super::layers::{self, ExpertVars};
use super::params::{init_params, DecoderParams, ModelParams, ParamTree};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Handles into a recorded forward pass.
#[derive(Clone, Debug)]
pub struct Graph {
    pub logits: Var,
    /// `[layer][head]`, each `[B, T, T]`.
    pub attention: Vec<Vec<Var>>,
    pub embedded: Var,
    pub encoded: Var,
    pub moe: Option<MoeGraph>,
}

#[derive(Clone, Debug)]
pub struct MoeGraph {
    pub reduced: Var,
    pub experts: Vec<ExpertVars>,
    /// `(v, g)` when a gate exists.
    pub gate: Option<(Var, Var)>,
    /// `[B, E]`; a constant column of ones with a single expert.
    pub gate_probs: Var,
}

/// Binds every parameter as a gradient-tracked leaf.
pub fn bind_params(tape: &mut Tape, params: &ModelParams) -> ParamTree<Var> {
    params.map(|t| tape.param(t.clone()))
}

/// Binds every parameter as a constant (inference).
pub fn bind_constants(tape: &mut Tape, params: &ModelParams) -> ParamTree<Var> {
    params.map(|t| tape.constant(t.clone()))
}

/// Records the full model on `tape` for input `x[B, N, N]`.
pub fn build_graph(tape: &mut Tape, config: &ModelConfig, params: &ParamTree<Var>, x: Var) -> Result<Graph> {
    let eps = config.layer_norm_eps;
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[1] != config.n_rois || s[2] != config.n_rois {
        return Err(Error::Shape {
            op: "forward",
            lhs: s,
            rhs: vec![config.n_rois, config.n_rois],
        });
    }
    let batch = s[0];
    let embedded = layers::embed(tape, x, &params.embed, &params.embed_norm, eps)?;

    let mut h = match &params.decoder {
        DecoderParams::Cls { token, .. } => {
            let tok = tape.broadcast_leading(*token, batch);
            tape.concat(&[tok, embedded], 1)?
        }
        DecoderParams::Moe { .. } => embedded,
    };
    let mut attention = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (next, attn) = layers::encoder_layer(tape, h, layer, eps)?;
        h = next;
        attention.push(attn);
    }
    let encoded = h;

    let (logits, moe) = match &params.decoder {
        DecoderParams::Cls { classifier, .. } => {
            let cls = tape.select(encoded, 1, 0)?;
            (layers::mlp(tape, cls, classifier)?, None)
        }
        DecoderParams::Moe { reduce, experts, gate } => {
            if experts.len() != config.k_per_expert.len() {
                return Err(Error::Config(format!(
                    "{} experts but {} k values",
                    experts.len(),
                    config.k_per_expert.len()
                )));
            }
            let reduced = layers::mlp(tape, encoded, reduce)?;
            let experts = experts
                .iter()
                .zip(&config.k_per_expert)
                .map(|(p, &k)| layers::expert(tape, reduced, p, k))
                .collect::<Result<Vec<_>>>()?;
            let (gate, gate_probs) = match gate {
                Some(g) => {
                    let (v, g, pi) = layers::gate(tape, reduced, g)?;
                    (Some((v, g)), pi)
                }
                None => (None, tape.constant(Tensor::ones(&[batch, 1]))),
            };
            let outputs: Vec<Var> = experts.iter().map(|e| e.output).collect();
            let logits = layers::combine(tape, gate_probs, &outputs)?;
            (
                logits,
                Some(MoeGraph {
                    reduced,
                    experts,
                    gate,
                    gate_probs,
                }),
            )
        }
    };
    Ok(Graph {
        logits,
        attention,
        embedded,
        encoded,
        moe,
    })
}

/// Cross-entropy plus `λ·CV²` of the batch expert importance `Σ_b π[b, :]`.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub cross_entropy: Var,
    pub cv_squared: Option<Var>,
}

pub fn total_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    gate_probs: Option<Var>,
    lambda: f64,
    cv_eps: f64,
) -> Result<LossVars> {
    if labels.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let ce = tape.cross_entropy(logits, labels)?;
    let Some(pi) = gate_probs else {
        return Ok(LossVars {
            total: ce,
            cross_entropy: ce,
            cv_squared: None,
        });
    };
    let importance = tape.sum_leading(pi)?;
    let cv = tape.cv_squared(importance, cv_eps)?;
    let reg = tape.scale(cv, lambda);
    let total = tape.add(ce, reg)?;
    Ok(LossVars {
        total,
        cross_entropy: ce,
        cv_squared: Some(cv),
    })
}

/// Intermediate activations of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// Per layer, `[B, h, T, T]` with `T = N` (or `N + 1` for the CLS decoder,
    /// whose token sits at index 0).
    pub attention: Vec<Tensor>,
    pub embedded: Tensor,
    pub encoded: Tensor,
    pub logits: Tensor,
    pub moe: Option<MoeTrace>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeTrace {
    pub reduced: Tensor,
    pub experts: Vec<ExpertTrace>,
    pub gate_input: Option<Tensor>,
    pub gate_logits: Option<Tensor>,
    /// `[B, E]`.
    pub gate_probs: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertTrace {
    pub k: usize,
    /// `[B, N]`.
    pub logits: Tensor,
    /// Selected token indices per subject, ascending.
    pub selected: Vec<Vec<usize>>,
    /// `[B, N]`, zero off the selection.
    pub weights: Tensor,
    /// `[B, d_red]`.
    pub pooled: Tensor,
    /// `[B, C]`.
    pub output: Tensor,
}

impl ForwardTrace {
    pub fn capture(tape: &Tape, graph: &Graph, config: &ModelConfig) -> Self {
        let attention = graph.attention.iter().map(|heads| stack_heads(tape, heads)).collect();
        let moe = graph.moe.as_ref().map(|m| MoeTrace {
            reduced: tape.value(m.reduced).clone(),
            experts: m
                .experts
                .iter()
                .zip(&config.k_per_expert)
                .map(|(e, &k)| ExpertTrace {
                    k,
                    logits: tape.value(e.logits).clone(),
                    selected: tape.selections(e.weights).unwrap_or_default().to_vec(),
                    weights: tape.value(e.weights).clone(),
                    pooled: tape.value(e.pooled).clone(),
                    output: tape.value(e.output).clone(),
                })
                .collect(),
            gate_input: m.gate.map(|(v, _)| tape.value(v).clone()),
            gate_logits: m.gate.map(|(_, g)| tape.value(g).clone()),
            gate_probs: tape.value(m.gate_probs).clone(),
        });
        Self {
            attention,
            embedded: tape.value(graph.embedded).clone(),
            encoded: tape.value(graph.encoded).clone(),
            logits: tape.value(graph.logits).clone(),
            moe,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.logits.shape()[0]
    }
}

/// Interleaves per-head `[B, T, T]` tensors into `[B, h, T, T]`.
fn stack_heads(tape: &Tape, heads: &[Var]) -> Tensor {
    let s = tape.shape(heads[0]).to_vec();
    let (b, t) = (s[0], s[1]);
    let block = t * t;
    let mut data = Vec::with_capacity(b * heads.len() * block);
    for bi in 0..b {
        for &h in heads {
            data.extend_from_slice(&tape.value(h).data()[bi * block..(bi + 1) * block]);
        }
    }
    Tensor::new(vec![b, heads.len(), t, t], data).expect("consistent head shapes")
}

/// Configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    /// Fresh model initialized from `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        let params = init_params(&config, config.seed)?;
        Ok(Self { config, params })
    }

    /// Inference pass with full trace.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, ForwardTrace)> {
        forward(x, &self.params, &self.config)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = bind_constants(&mut tape, &self.params);
        let xv = tape.constant(x.clone());
        let graph = build_graph(&mut tape, &self.config, &params, xv)?;
        Ok(tape.value(graph.logits).clone())
    }
}

/// Inference pass for any decoder, returning `(y_final, trace)`.
pub fn forward(x: &Tensor, params: &ModelParams, config: &ModelConfig) -> Result<(Tensor, ForwardTrace)> {
    let mut tape = Tape::new();
    let bound = bind_constants(&mut tape, params);
    let xv = tape.constant(x.clone());
    let graph = build_graph(&mut tape, config, &bound, xv)?;
    let trace = ForwardTrace::capture(&tape, &graph, config);
    Ok((trace.logits.clone(), trace))
}

/// CLS-token ablation: requires a CLS decoder.
pub fn cls_decoder_forward(x: &Tensor, params: &ModelParams, config: &ModelConfig) -> Result<(Tensor, ForwardTrace)> {
    if config.decoder != Decoder::Cls || !matches!(params.decoder, DecoderParams::Cls { .. }) {
        return Err(Error::Config("cls_decoder_forward needs a CLS decoder".into()));
    }
    forward(x, params, config)
}

/// Single pooling-classifier ablation: one expert, no gate, `π ≡ 1`.
pub fn single_expert_forward(x: &Tensor, params: &ModelParams, config: &ModelConfig) -> Result<(Tensor, ForwardTrace)> {
    if config.decoder != Decoder::Moe || config.num_experts != 1 || params.gate().is_some() {
        return Err(Error::Config(
            "single_expert_forward needs one expert and no gate".into(),
        ));
    }
    forward(x, params, config)
}

/// Stacks `[N, N]` matrices into a `[B, N, N]` batch.
pub fn stack_batch(matrices: &[&Tensor]) -> Result<Tensor> {
    let first = matrices.first().ok_or_else(|| Error::Argument("empty batch".into()))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(matrices.len() * first.len());
    for m in matrices {
        if m.shape() != shape.as_slice() {
            return Err(Error::Shape {
                op: "stack_batch",
                lhs: shape,
                rhs: m.shape().to_vec(),
            });
        }
        data.extend_from_slice(m.data());
    }
    let mut full = vec![matrices.len()];
    full.extend(shape);
    Tensor::new(full, data)
}
