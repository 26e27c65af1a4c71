//! Token embedding, transformer encoder, and the mixture of top-k
//! pooling-classifier experts (plus the CLS and single-expert readouts).

mod checkpoint;
mod config;
mod forward;
pub mod layers;
mod params;

pub use checkpoint::{load_model, save_model, Checkpoint, RngState, TensorRecord, CHECKPOINT_FORMAT_VERSION};
pub use config::{Decoder, ModelConfig};
pub use forward::{
    bind_constants, bind_params, build_graph, cls_decoder_forward, forward, single_expert_forward, stack_batch,
    total_loss, ExpertTrace, ForwardTrace, Graph, LossVars, Model, MoeGraph, MoeTrace,
};
pub use params::{init_params, DecoderParams, EncoderLayer, Expert, Head, Linear, Mlp, ModelParams, Norm, ParamTree};

/// `(σ(I)/(μ(I)+ε))²` of expert importances, population σ; 0 when `E == 1`.
pub fn cv_squared(importance: &[f64], eps: f64) -> f64 {
    crate::numerics::cv_squared(importance, eps)
}

#[cfg(test)]
mod tests;
