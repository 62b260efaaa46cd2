use std::collections::BTreeMap;
use std::path::Path;

use super::container::{self, Header, OptimizerHeader};
use super::{param_layout, ModelConfig, Params};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::training::{AdamWConfig, OptimizerState};

pub const CHECKPOINT_KIND: &str = "checkpoint";

/// Model parameters plus everything needed to resume or audit them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub params: Params,
    /// Divides attention logits in every forward pass; 1.0 is the plain model.
    pub attn_temperature: f64,
    /// Free-form provenance (surgery settings, source files).
    pub meta: BTreeMap<String, String>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn from_params(config: ModelConfig, params: Params) -> Self {
        Self {
            config,
            step: 0,
            params,
            attn_temperature: 1.0,
            meta: BTreeMap::new(),
            optimizer: None,
        }
    }

    /// Rounds parameters and optimizer moments to storage precision in place.
    pub fn round_to_storage(&mut self) {
        self.params
            .tensors_mut()
            .into_iter()
            .for_each(Tensor::round_to_f32);
        if let Some(opt) = &mut self.optimizer {
            opt.round_to_f32();
        }
    }
}

/// Fresh model at step 0, deterministic in `config.seed`.
pub fn init_model(config: &ModelConfig) -> Result<Checkpoint> {
    let params = Params::init(config)?;
    Ok(Checkpoint::from_params(config.clone(), params))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut header = Header::new(CHECKPOINT_KIND, ckpt.config.clone(), ckpt.step);
    header.attn_temperature = ckpt.attn_temperature;
    header.meta = ckpt.meta.clone();
    let layout = param_layout(&ckpt.config);
    let mut entries: Vec<(String, Vec<usize>, &[f64])> = layout
        .iter()
        .zip(ckpt.params.tensors())
        .map(|((name, _), t)| (name.clone(), t.shape().to_vec(), t.data()))
        .collect();
    if let Some(opt) = &ckpt.optimizer {
        header.optimizer = Some(OptimizerHeader {
            step: opt.step,
            beta1: opt.config.beta1,
            beta2: opt.config.beta2,
            eps: opt.config.eps,
            weight_decay: opt.config.weight_decay,
        });
        for (prefix, moments) in [("opt.m", &opt.first), ("opt.v", &opt.second)] {
            for ((name, _), t) in layout.iter().zip(moments) {
                entries.push((format!("{prefix}.{name}"), t.shape().to_vec(), t.data()));
            }
        }
    }
    container::write(path, header, &entries)
}

fn take_tensor(c: &container::Container, name: &str, expected: &[usize]) -> Result<Tensor> {
    let (entry, blob) = c
        .blob(name)
        .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
    if entry.shape != expected {
        return Err(Error::TensorShape {
            name: name.to_string(),
            expected: expected.to_vec(),
            found: entry.shape.clone(),
        });
    }
    Tensor::new(
        entry.shape.clone(),
        blob.iter().map(|&x| x as f64).collect(),
    )
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let c = container::read(path)?;
    let h = &c.header;
    if h.kind != CHECKPOINT_KIND {
        return Err(Error::Validation(format!(
            "expected a checkpoint, found `{}`",
            h.kind
        )));
    }
    h.config.validate()?;
    let layout = param_layout(&h.config);
    let tensors = layout
        .iter()
        .map(|(name, shape)| take_tensor(&c, name, shape))
        .collect::<Result<Vec<_>>>()?;
    let params = Params::from_tensors(&h.config, tensors)?;
    let optimizer = match &h.optimizer {
        None => None,
        Some(oh) => {
            let load = |prefix: &str| {
                layout
                    .iter()
                    .map(|(name, shape)| take_tensor(&c, &format!("{prefix}.{name}"), shape))
                    .collect::<Result<Vec<_>>>()
            };
            Some(OptimizerState {
                step: oh.step,
                config: AdamWConfig {
                    beta1: oh.beta1,
                    beta2: oh.beta2,
                    eps: oh.eps,
                    weight_decay: oh.weight_decay,
                },
                first: load("opt.m")?,
                second: load("opt.v")?,
            })
        }
    };
    Ok(Checkpoint {
        config: h.config.clone(),
        step: h.step,
        params,
        attn_temperature: h.attn_temperature,
        meta: h.meta.clone(),
        optimizer,
    })
}
