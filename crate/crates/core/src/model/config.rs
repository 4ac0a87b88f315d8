use serde::{Deserialize, Serialize};

use super::ModelError;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

/// SwiGLU hidden width: `8/3 · d_model`, rounded, then up to a multiple of 8.
pub fn default_d_ff(d_model: usize) -> usize {
    let raw = (8.0 * d_model as f64 / 3.0).round() as usize;
    raw.div_ceil(8).max(1) * 8
}

pub const FULL_N_LAYERS: usize = 52;
pub const FULL_PARAM_TARGET: u64 = 1_800_000_000;

impl ModelConfig {
    pub fn new(n_layers: usize, d_model: usize, n_heads: usize, vocab_size: usize, max_seq_len: usize) -> Self {
        Self {
            n_layers,
            d_model,
            n_heads,
            d_ff: default_d_ff(d_model),
            vocab_size,
            max_seq_len,
        }
    }

    /// 4 layers, width 128, 4 heads.
    pub fn desk(vocab_size: usize) -> Self {
        Self::new(4, 128, 4, vocab_size, 1024)
    }

    /// 52 layers with the width solved so the parameter count lands as close
    /// as possible to 1.8B. `d_model` is kept a multiple of `128` so it
    /// divides evenly into heads of width 128.
    pub fn full_scale(vocab_size: usize, max_seq_len: usize) -> Self {
        let head_dim = 128;
        let mut best: Option<(u64, Self)> = None;
        for heads in 1..=64 {
            let cfg = Self::new(FULL_N_LAYERS, heads * head_dim, heads, vocab_size, max_seq_len);
            let diff = cfg.param_count().abs_diff(FULL_PARAM_TARGET);
            if best.as_ref().is_none_or(|(d, _)| diff < *d) {
                best = Some((diff, cfg));
            }
        }
        best.expect("non-empty search").1
    }

    /// Tiny configuration for finite-difference checks.
    pub fn tiny(vocab_size: usize) -> Self {
        Self::new(1, 4, 2, vocab_size, 32)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fields = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form parameter count. The output projection is tied to the
    /// embedding and contributes nothing extra.
    pub fn param_count(&self) -> u64 {
        let d = self.d_model as u64;
        let f = self.d_ff as u64;
        let v = self.vocab_size as u64;
        let per_layer = 4 * d * d + 3 * d * f + 2 * d;
        v * d + self.n_layers as u64 * per_layer + d
    }
}
