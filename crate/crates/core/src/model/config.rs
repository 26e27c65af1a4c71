use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Readout placed on top of the encoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoder {
    /// Mixture of top-k pooling-classifier experts; with one expert this is the
    /// plain pooling-classifier and the gate is dropped.
    #[default]
    Moe,
    /// Learnable token prepended to the sequence, read out by an MLP.
    Cls,
}

/// Architecture hyperparameters. Optional widths resolve from the others.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_rois: usize,
    pub embed_dim: usize,
    pub heads: usize,
    /// Defaults to `embed_dim / heads`.
    pub head_dim: Option<usize>,
    pub encoder_layers: usize,
    pub reduced_dim: usize,
    pub num_experts: usize,
    pub k_per_expert: Vec<usize>,
    pub num_classes: usize,
    pub lambda: f64,
    pub cv_eps: f64,
    pub layer_norm_eps: f64,
    /// Defaults to `embed_dim`.
    pub embed_hidden: Option<usize>,
    /// Defaults to `embed_dim`.
    pub ffn_hidden: Option<usize>,
    pub reduce_hidden: usize,
    /// Defaults to `reduced_dim`.
    pub attn_hidden: Option<usize>,
    pub classifier_hidden: usize,
    pub gate_hidden: usize,
    pub decoder: Decoder,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_rois: 200,
            embed_dim: 200,
            heads: 8,
            head_dim: None,
            encoder_layers: 1,
            reduced_dim: 8,
            num_experts: 2,
            k_per_expert: vec![8, 4],
            num_classes: 2,
            lambda: 0.23,
            cv_eps: 1e-8,
            layer_norm_eps: 1e-5,
            embed_hidden: None,
            ffn_hidden: None,
            reduce_hidden: 64,
            attn_hidden: None,
            classifier_hidden: 32,
            gate_hidden: 64,
            decoder: Decoder::Moe,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.head_dim.unwrap_or(self.embed_dim / self.heads.max(1))
    }

    pub fn embed_hidden(&self) -> usize {
        self.embed_hidden.unwrap_or(self.embed_dim)
    }

    pub fn ffn_hidden(&self) -> usize {
        self.ffn_hidden.unwrap_or(self.embed_dim)
    }

    pub fn attn_hidden(&self) -> usize {
        self.attn_hidden.unwrap_or(self.reduced_dim)
    }

    /// Copy with every derived width written out explicitly.
    pub fn resolved(&self) -> Self {
        Self {
            head_dim: Some(self.head_dim()),
            embed_hidden: Some(self.embed_hidden()),
            ffn_hidden: Some(self.ffn_hidden()),
            attn_hidden: Some(self.attn_hidden()),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_rois", self.n_rois),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("head_dim", self.head_dim()),
            ("encoder_layers", self.encoder_layers),
            ("reduced_dim", self.reduced_dim),
            ("num_experts", self.num_experts),
            ("num_classes", self.num_classes),
            ("embed_hidden", self.embed_hidden()),
            ("ffn_hidden", self.ffn_hidden()),
            ("reduce_hidden", self.reduce_hidden),
            ("attn_hidden", self.attn_hidden()),
            ("classifier_hidden", self.classifier_hidden),
            ("gate_hidden", self.gate_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.heads * self.head_dim() != self.embed_dim {
            return Err(Error::Config(format!(
                "heads ({}) × head_dim ({}) must equal embed_dim ({})",
                self.heads,
                self.head_dim(),
                self.embed_dim
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be ≥ 0, got {}", self.lambda)));
        }
        if !(self.cv_eps >= 0.0 && self.layer_norm_eps > 0.0) {
            return Err(Error::Config(
                "epsilons must be non-negative (layer_norm_eps > 0)".into(),
            ));
        }
        if self.decoder == Decoder::Moe {
            if self.reduced_dim >= self.embed_dim {
                return Err(Error::Config(format!(
                    "reduced_dim ({}) must be smaller than embed_dim ({})",
                    self.reduced_dim, self.embed_dim
                )));
            }
            if self.k_per_expert.len() != self.num_experts {
                return Err(Error::Config(format!(
                    "k_per_expert has {} entries for {} experts",
                    self.k_per_expert.len(),
                    self.num_experts
                )));
            }
            if let Some(k) = self.k_per_expert.iter().find(|&&k| k < 1 || k > self.n_rois) {
                return Err(Error::Config(format!("k = {k} outside [1, {}]", self.n_rois)));
            }
        }
        Ok(())
    }
}
