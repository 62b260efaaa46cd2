use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters plus the initialization seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    /// Inner width `m` of each gated feed-forward block (number of memory slots).
    pub ffn_inner: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub norm_eps: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn tiny(seed: u64) -> Self {
        Self {
            n_layers: 2,
            d_model: 16,
            ffn_inner: 32,
            n_heads: 2,
            vocab_size: 64,
            max_seq_len: 32,
            norm_eps: 1e-5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("ffn_inner", self.ffn_inner),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_configs() {
        assert!(ModelConfig::tiny(0).validate().is_ok());
        let mut c = ModelConfig::tiny(0);
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny(0);
        c.ffn_inner = 0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny(0);
        c.norm_eps = 0.0;
        assert!(c.validate().is_err());
    }
}
