use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Grammar;
use crate::entropy::CoefficientMode;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::resuscitation::ResuscitationSpec;
use crate::training::{AdamWConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub ffn_inner: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

fn default_norm_eps() -> f64 {
    1e-5
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            ffn_inner: 256,
            n_heads: 4,
            vocab_size: 2048,
            max_seq_len: 128,
            norm_eps: default_norm_eps(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub seq_len: usize,
    pub grammar: Grammar,
    pub pretrain_documents: usize,
    pub pretrain_entities: usize,
    /// Read the pretraining corpus from this file instead of generating it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrain_corpus: Option<PathBuf>,
    pub continual_documents: usize,
    pub continual_entities: usize,
    pub n_para_items: usize,
    pub n_once_items: usize,
    pub n_paraphrases: usize,
    pub retention_items: usize,
    pub retention_candidates: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            seq_len: 128,
            grammar: Grammar::Varied,
            pretrain_documents: 65_000,
            pretrain_entities: 1_200,
            pretrain_corpus: None,
            continual_documents: 7_200,
            continual_entities: 300,
            n_para_items: 14,
            n_once_items: 12,
            n_paraphrases: 10,
            retention_items: 250,
            retention_candidates: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub warmup_fraction: f64,
    pub epochs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    pub adamw: AdamWConfig,
}

impl TrainSection {
    fn with(batch_size: usize, peak_lr: f64) -> Self {
        Self {
            batch_size,
            peak_lr,
            floor_lr: 0.0,
            warmup_fraction: 0.05,
            epochs: 1,
            grad_clip: None,
            adamw: AdamWConfig::default(),
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            peak_lr: self.peak_lr,
            floor_lr: self.floor_lr,
            warmup_fraction: self.warmup_fraction,
            epochs: self.epochs,
            grad_clip: self.grad_clip,
            adamw: self.adamw,
            seed,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        Self::with(32, 4e-4)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSection {
    #[serde(flatten)]
    pub train: TrainSection,
    pub fractions: Vec<f64>,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            train: TrainSection::with(32, 1e-3),
            fractions: vec![0.1, 0.2, 0.5, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeasureSection {
    pub n_instances: usize,
    pub mode: CoefficientMode,
}

impl Default for MeasureSection {
    fn default() -> Self {
        Self {
            n_instances: 256,
            mode: CoefficientMode::AbsSwiglu,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContinualSection {
    #[serde(flatten)]
    pub train: TrainSection,
    pub rounds: usize,
    /// When false the run trains on the new-domain corpus alone.
    pub inject: bool,
}

impl Default for ContinualSection {
    fn default() -> Self {
        Self {
            train: TrainSection::with(8, 4e-4),
            rounds: 10,
            inject: true,
        }
    }
}

/// Everything a run needs, read from and written back to TOML.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub measure: MeasureSection,
    #[serde(default)]
    pub continual: ContinualSection,
    /// Surgery applied to the starting checkpoint of `continual`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resuscitation: Option<ResuscitationSpec>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `path`; a relative `pretrain_corpus` resolves against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: Self =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let (Some(corpus), Some(parent)) = (&cfg.data.pretrain_corpus, path.parent()) {
            if corpus.is_relative() {
                cfg.data.pretrain_corpus = Some(parent.join(corpus));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            n_layers: m.n_layers,
            d_model: m.d_model,
            ffn_inner: m.ffn_inner,
            n_heads: m.n_heads,
            vocab_size: m.vocab_size,
            max_seq_len: m.max_seq_len,
            norm_eps: m.norm_eps,
            seed: self.seed,
        }
    }

    /// Cheap checks that run before any generation or training.
    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        let d = &self.data;
        if d.seq_len < 2 || d.seq_len > self.model.max_seq_len {
            return Err(Error::Config(format!(
                "seq_len {} must lie in [2, max_seq_len = {}]",
                d.seq_len, self.model.max_seq_len
            )));
        }
        if let Some(path) = &d.pretrain_corpus {
            if !path.is_file() {
                return Err(Error::Config(format!(
                    "pretrain corpus {} does not exist",
                    path.display()
                )));
            }
        }
        if d.retention_candidates < 2 {
            return Err(Error::Config(
                "retention items need at least 2 candidates".into(),
            ));
        }
        if d.n_para_items > 0 && d.n_paraphrases != self.continual.rounds {
            return Err(Error::Config(format!(
                "{} paraphrases per item cannot fill {} injection rounds",
                d.n_paraphrases, self.continual.rounds
            )));
        }
        for f in &self.pretrain.fractions {
            if !(*f > 0.0 && *f <= 1.0) {
                return Err(Error::Config(format!(
                    "checkpoint fraction {f} outside (0, 1]"
                )));
            }
        }
        if self.pretrain.fractions.is_empty() {
            return Err(Error::Config(
                "at least one checkpoint fraction is required".into(),
            ));
        }
        if self.measure.n_instances == 0 {
            return Err(Error::Config("measure.n_instances must be positive".into()));
        }
        for t in [&self.pretrain.train, &self.continual.train] {
            t.train_config(self.seed).schedule(usize::MAX).map(|_| ())?;
        }
        if let Some(r) = &self.resuscitation {
            r.validate()?;
        }
        Ok(())
    }
}
