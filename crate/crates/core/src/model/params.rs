use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_norm: Tensor,
    /// `[m, d]`
    pub gate: Tensor,
    /// `[m, d]`, the up-projection whose rows are the memory keys.
    pub up: Tensor,
    /// `[m, d]`, rows are the memory vectors.
    pub down: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub embed: Tensor,
    pub pos_embed: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_norm: Tensor,
    /// `[V, d]`; logits are `h · unembedᵀ`.
    pub unembed: Tensor,
}

const LAYER_FIELDS: [&str; 9] = [
    "attn_norm",
    "wq",
    "wk",
    "wv",
    "wo",
    "ffn_norm",
    "gate",
    "up",
    "down",
];

impl LayerParams {
    fn fields(&self) -> [&Tensor; 9] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ffn_norm,
            &self.gate,
            &self.up,
            &self.down,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ffn_norm,
            &mut self.gate,
            &mut self.up,
            &mut self.down,
        ]
    }
}

/// Names and shapes of every parameter tensor, in storage order.
pub fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, m, v) = (cfg.d_model, cfg.ffn_inner, cfg.vocab_size);
    let mut out = vec![
        ("embed".to_string(), vec![v, d]),
        ("pos_embed".to_string(), vec![cfg.max_seq_len, d]),
    ];
    for l in 0..cfg.n_layers {
        for field in LAYER_FIELDS {
            let shape = match field {
                "attn_norm" | "ffn_norm" => vec![d],
                "gate" | "up" | "down" => vec![m, d],
                _ => vec![d, d],
            };
            out.push((format!("layers.{l}.{field}"), shape));
        }
    }
    out.push(("final_norm".to_string(), vec![d]));
    out.push(("unembed".to_string(), vec![v, d]));
    out
}

impl Params {
    /// Scaled-normal init (std 0.02, down-projection additionally divided by
    /// `sqrt(2L)`), unit norm scales; a pure function of `cfg.seed`.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let down_std = INIT_STD / (2.0 * cfg.n_layers as f64).sqrt();
        let tensors = param_layout(cfg)
            .into_iter()
            .map(|(name, shape)| {
                if shape.len() == 1 {
                    return Tensor::full(&shape, 1.0);
                }
                let std = if name.ends_with(".down") {
                    down_std
                } else {
                    INIT_STD
                };
                let normal = Normal::new(0.0, std).expect("positive std");
                let n = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| normal.sample(&mut rng)).collect())
                    .expect("layout shape")
            })
            .collect();
        Self::from_tensors(cfg, tensors)
    }

    /// Assembles parameters from tensors given in [`param_layout`] order.
    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let layout = param_layout(cfg);
        if tensors.len() != layout.len() {
            return Err(Error::Validation(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::TensorShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        let embed = next();
        let pos_embed = next();
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                attn_norm: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                ffn_norm: next(),
                gate: next(),
                up: next(),
                down: next(),
            })
            .collect();
        let final_norm = next();
        let unembed = next();
        Ok(Self {
            embed,
            pos_embed,
            layers,
            final_norm,
            unembed,
        })
    }

    /// All tensors in [`param_layout`] order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.embed, &self.pos_embed];
        for layer in &self.layers {
            out.extend(layer.fields());
        }
        out.push(&self.final_norm);
        out.push(&self.unembed);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embed, &mut self.pos_embed];
        for layer in &mut self.layers {
            out.extend(layer.fields_mut());
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.unembed);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }
}
