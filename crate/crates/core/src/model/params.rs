//! Parameter tree, generic over the leaf type so the same layout carries
//! tensors, tape handles, gradients and optimizer moments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Decoder, ModelConfig};
use crate::error::Result;
use crate::numerics::Tensor;

/// `y = x·weight + bias`, weight stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

/// Two linear layers with a GELU in between.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub hidden: Linear<T>,
    pub output: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T> {
    pub gamma: T,
    pub beta: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head<T> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<T> {
    pub heads: Vec<Head<T>>,
    pub w_o: T,
    pub attn_norm: Norm<T>,
    pub ffn: Mlp<T>,
    pub ffn_norm: Norm<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Expert<T> {
    /// Token scorer, `d_red → attn_hidden → 1`.
    pub attention: Mlp<T>,
    /// Pooled-token classifier, `d_red → classifier_hidden → C`.
    pub classifier: Mlp<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DecoderParams<T> {
    Moe {
        reduce: Mlp<T>,
        experts: Vec<Expert<T>>,
        /// Absent with a single expert.
        gate: Option<Mlp<T>>,
    },
    Cls {
        token: T,
        classifier: Mlp<T>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamTree<T> {
    pub embed: Mlp<T>,
    pub embed_norm: Norm<T>,
    pub layers: Vec<EncoderLayer<T>>,
    pub decoder: DecoderParams<T>,
}

pub type ModelParams = ParamTree<Tensor>;

/// Depth-first traversal in a fixed order; `map`, `visit` and `visit_mut`
/// all use the same order.
trait Walk<T> {
    type Out<U>;
    fn visit<'a>(&'a self, path: &str, f: &mut dyn FnMut(String, &'a T));
    fn visit_mut<'a>(&'a mut self, path: &str, f: &mut dyn FnMut(String, &'a mut T));
    fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Self::Out<U>;
}

fn join(path: &str, name: &str) -> String {
    if path.is_empty() {
        name.to_string()
    } else {
        format!("{path}.{name}")
    }
}

impl<T> Walk<T> for Linear<T> {
    type Out<U> = Linear<U>;
    fn visit<'a>(&'a self, path: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(join(path, "weight"), &self.weight);
        f(join(path, "bias"), &self.bias);
    }
    fn visit_mut<'a>(&'a mut self, path: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        f(join(path, "weight"), &mut self.weight);
        f(join(path, "bias"), &mut self.bias);
    }
    fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Linear<U> {
        Linear {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }
}

impl<T> Walk<T> for Mlp<T> {
    type Out<U> = Mlp<U>;
    fn visit<'a>(&'a self, path: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.hidden.visit(&join(path, "hidden"), f);
        self.output.visit(&join(path, "output"), f);
    }
    fn visit_mut<'a>(&'a mut self, path: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        self.hidden.visit_mut(&join(path, "hidden"), f);
        self.output.visit_mut(&join(path, "output"), f);
    }
    fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Mlp<U> {
        Mlp {
            hidden: self.hidden.map(f),
            output: self.output.map(f),
        }
    }
}

impl<T> Walk<T> for Norm<T> {
    type Out<U> = Norm<U>;
    fn visit<'a>(&'a self, path: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(join(path, "gamma"), &self.gamma);
        f(join(path, "beta"), &self.beta);
    }
    fn visit_mut<'a>(&'a mut self, path: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        f(join(path, "gamma"), &mut self.gamma);
        f(join(path, "beta"), &mut self.beta);
    }
    fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Norm<U> {
        Norm {
            gamma: f(&self.gamma),
            beta: f(&self.beta),
        }
    }
}

impl<T> Walk<T> for EncoderLayer<T> {
    type Out<U> = EncoderLayer<U>;
    fn visit<'a>(&'a self, path: &str, f: &mut dyn FnMut(String, &'a T)) {
        for (i, h) in self.heads.iter().enumerate() {
            let p = join(path, &format!("head{i}"));
            f(join(&p, "w_q"), &h.w_q);
            f(join(&p, "w_k"), &h.w_k);
            f(join(&p, "w_v"), &h.w_v);
        }
        f(join(path, "w_o"), &self.w_o);
        self.attn_norm.visit(&join(path, "attn_norm"), f);
        self.ffn.visit(&join(path, "ffn"), f);
        self.ffn_norm.visit(&join(path, "ffn_norm"), f);
    }
    fn visit_mut<'a>(&'a mut self, path: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        for (i, h) in self.heads.iter_mut().enumerate() {
            let p = join(path, &format!("head{i}"));
            f(join(&p, "w_q"), &mut h.w_q);
            f(join(&p, "w_k"), &mut h.w_k);
            f(join(&p, "w_v"), &mut h.w_v);
        }
        f(join(path, "w_o"), &mut self.w_o);
        self.attn_norm.visit_mut(&join(path, "attn_norm"), f);
        self.ffn.visit_mut(&join(path, "ffn"), f);
        self.ffn_norm.visit_mut(&join(path, "ffn_norm"), f);
    }
    fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> EncoderLayer<U> {
        let heads = self
            .heads
            .iter()
            .map(|h| Head {
                w_q: f(&h.w_q),
                w_k: f(&h.w_k),
                w_v: f(&h.w_v),
            })
            .collect();
        EncoderLayer {
            heads,
            w_o: f(&self.w_o),
            attn_norm: self.attn_norm.map(f),
            ffn: self.ffn.map(f),
            ffn_norm: self.ffn_norm.map(f),
        }
    }
}

impl<T> Walk<T> for Expert<T> {
    type Out<U> = Expert<U>;
    fn visit<'a>(&'a self, path: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.attention.visit(&join(path, "attention"), f);
        self.classifier.visit(&join(path, "classifier"), f);
    }
    fn visit_mut<'a>(&'a mut self, path: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        self.attention.visit_mut(&join(path, "attention"), f);
        self.classifier.visit_mut(&join(path, "classifier"), f);
    }
    fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Expert<U> {
        Expert {
            attention: self.attention.map(f),
            classifier: self.classifier.map(f),
        }
    }
}

impl<T> Walk<T> for ParamTree<T> {
    type Out<U> = ParamTree<U>;
    fn visit<'a>(&'a self, path: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.embed.visit(&join(path, "embed"), f);
        self.embed_norm.visit(&join(path, "embed_norm"), f);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(path, &format!("encoder{i}")), f);
        }
        match &self.decoder {
            DecoderParams::Moe { reduce, experts, gate } => {
                reduce.visit(&join(path, "reduce"), f);
                for (i, e) in experts.iter().enumerate() {
                    e.visit(&join(path, &format!("expert{i}")), f);
                }
                if let Some(g) = gate {
                    g.visit(&join(path, "gate"), f);
                }
            }
            DecoderParams::Cls { token, classifier } => {
                f(join(path, "cls_token"), token);
                classifier.visit(&join(path, "cls_classifier"), f);
            }
        }
    }
    fn visit_mut<'a>(&'a mut self, path: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        self.embed.visit_mut(&join(path, "embed"), f);
        self.embed_norm.visit_mut(&join(path, "embed_norm"), f);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(path, &format!("encoder{i}")), f);
        }
        match &mut self.decoder {
            DecoderParams::Moe { reduce, experts, gate } => {
                reduce.visit_mut(&join(path, "reduce"), f);
                for (i, e) in experts.iter_mut().enumerate() {
                    e.visit_mut(&join(path, &format!("expert{i}")), f);
                }
                if let Some(g) = gate {
                    g.visit_mut(&join(path, "gate"), f);
                }
            }
            DecoderParams::Cls { token, classifier } => {
                f(join(path, "cls_token"), token);
                classifier.visit_mut(&join(path, "cls_classifier"), f);
            }
        }
    }
    fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> ParamTree<U> {
        let embed = self.embed.map(f);
        let embed_norm = self.embed_norm.map(f);
        let layers = self.layers.iter().map(|l| l.map(f)).collect();
        let decoder = match &self.decoder {
            DecoderParams::Moe { reduce, experts, gate } => DecoderParams::Moe {
                reduce: reduce.map(f),
                experts: experts.iter().map(|e| e.map(f)).collect(),
                gate: gate.as_ref().map(|g| g.map(f)),
            },
            DecoderParams::Cls { token, classifier } => DecoderParams::Cls {
                token: f(token),
                classifier: classifier.map(f),
            },
        };
        ParamTree {
            embed,
            embed_norm,
            layers,
            decoder,
        }
    }
}

impl<T> ParamTree<T> {
    /// Leaves with their dotted names, in canonical order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, v| out.push((name, v)));
        out
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut T)) {
        self.visit_mut("", &mut |name, v| f(&name, v));
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ParamTree<U> {
        Walk::map(self, &mut f)
    }

    pub fn leaves(&self) -> Vec<&T> {
        self.named().into_iter().map(|(_, v)| v).collect()
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |_, v| out.push(v));
        out
    }

    pub fn gate(&self) -> Option<&Mlp<T>> {
        match &self.decoder {
            DecoderParams::Moe { gate, .. } => gate.as_ref(),
            DecoderParams::Cls { .. } => None,
        }
    }

    pub fn gate_mut(&mut self) -> Option<&mut Mlp<T>> {
        match &mut self.decoder {
            DecoderParams::Moe { gate, .. } => gate.as_mut(),
            DecoderParams::Cls { .. } => None,
        }
    }
}

impl ModelParams {
    pub fn num_scalars(&self) -> usize {
        self.leaves().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.leaves().iter().all(|t| t.is_finite())
    }

    /// Parameter group of a dotted name: its first path component.
    pub fn group_of(name: &str) -> &str {
        name.split('.').next().unwrap_or(name)
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    /// Uniform in `[-1/√fan_in, 1/√fan_in]`.
    fn weight(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        Tensor::new(vec![fan_in, fan_out], data).expect("positive dims")
    }

    fn linear(&mut self, fan_in: usize, fan_out: usize) -> Linear<Tensor> {
        Linear {
            weight: self.weight(fan_in, fan_out),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    fn mlp(&mut self, input: usize, hidden: usize, output: usize) -> Mlp<Tensor> {
        Mlp {
            hidden: self.linear(input, hidden),
            output: self.linear(hidden, output),
        }
    }
}

fn norm(width: usize) -> Norm<Tensor> {
    Norm {
        gamma: Tensor::ones(&[width]),
        beta: Tensor::zeros(&[width]),
    }
}

/// Fresh parameters: uniform fan-in weights, zero biases, unit LayerNorm gains.
/// Deterministic in `seed`.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let n = config.n_rois;
    let d = config.embed_dim;
    let dh = config.head_dim();
    let c = config.num_classes;

    let embed = init.mlp(n, config.embed_hidden(), d);
    let layers = (0..config.encoder_layers)
        .map(|_| EncoderLayer {
            heads: (0..config.heads)
                .map(|_| Head {
                    w_q: init.weight(d, dh),
                    w_k: init.weight(d, dh),
                    w_v: init.weight(d, dh),
                })
                .collect(),
            w_o: init.weight(config.heads * dh, d),
            attn_norm: norm(d),
            ffn: init.mlp(d, config.ffn_hidden(), d),
            ffn_norm: norm(d),
        })
        .collect();

    let decoder = match config.decoder {
        Decoder::Moe => {
            let dr = config.reduced_dim;
            let reduce = init.mlp(d, config.reduce_hidden, dr);
            let experts = (0..config.num_experts)
                .map(|_| Expert {
                    attention: init.mlp(dr, config.attn_hidden(), 1),
                    classifier: init.mlp(dr, config.classifier_hidden, c),
                })
                .collect();
            let gate = (config.num_experts > 1).then(|| init.mlp(n * dr, config.gate_hidden, config.num_experts));
            DecoderParams::Moe { reduce, experts, gate }
        }
        Decoder::Cls => {
            let token = init.weight(d, 1).reshaped(&[1, d])?;
            DecoderParams::Cls {
                token,
                classifier: init.mlp(d, config.classifier_hidden, c),
            }
        }
    };

    Ok(ParamTree {
        embed,
        embed_norm: norm(d),
        layers,
        decoder,
    })
}
