use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norm::DEFAULT_EPS;
use crate::tensor::DType;

/// Byte-level vocabulary: 256 byte values plus begin/end markers.
pub const BYTE_VOCAB: usize = 258;
pub const BOS: usize = 256;
pub const EOS: usize = 257;

fn default_eps() -> f64 {
    DEFAULT_EPS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub precision: DType,
    #[serde(default)]
    pub preset: Option<String>,
    /// Head width of the model this one was grown from. When set, norm
    /// statistics use this prefix of every head and the self-state encoder
    /// reads its input through a per-head projection from this width.
    #[serde(default)]
    pub origin_head_dim: Option<usize>,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
}

/// Named configurations. The desk presets are trainable on a CPU; the larger
/// ones only exist for shape and parameter-count audits.
pub const PRESETS: &[(&str, usize, usize, usize)] = &[
    // (name, layers, d_model, heads)
    ("tiny", 2, 64, 4),
    ("mini", 4, 128, 4),
    ("150m", 12, 768, 12),
    ("450m", 18, 1024, 16),
    ("900m", 24, 1280, 10),
    ("1.5b", 32, 1536, 12),
];

impl ModelConfig {
    pub fn new(vocab_size: usize, d_model: usize, n_heads: usize, n_layers: usize, precision: DType) -> Result<Self> {
        let cfg = ModelConfig {
            vocab_size,
            d_model,
            n_heads,
            n_layers,
            precision,
            preset: None,
            origin_head_dim: None,
            norm_eps: DEFAULT_EPS,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn preset(name: &str, precision: DType) -> Result<Self> {
        let &(_, layers, d, h) = PRESETS
            .iter()
            .find(|p| p.0 == name)
            .ok_or_else(|| Error::Config(format!("unknown preset {name:?}")))?;
        let mut cfg = Self::new(BYTE_VOCAB, d, h, layers, precision)?;
        cfg.preset = Some(name.to_string());
        Ok(cfg)
    }

    pub fn tiny() -> Self {
        Self::preset("tiny", DType::F64).expect("valid preset")
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers < 1 {
            return Err(Error::Config("n_layers must be at least 1".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        if self.norm_eps.is_nan() || self.norm_eps <= 0.0 {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        if let Some(o) = self.origin_head_dim {
            if o == 0 || o > self.head_dim() {
                return Err(Error::Config(format!("origin_head_dim {o} outside 1..={}", self.head_dim())));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Width of the head prefix that norm statistics range over.
    pub fn active_head_dim(&self) -> usize {
        self.origin_head_dim.unwrap_or_else(|| self.head_dim())
    }

    pub fn is_grown(&self) -> bool {
        self.origin_head_dim.is_some()
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let v = self.vocab_size;
        // 6 input projections + time-mix output + meta-state output, all D×D
        let mut per_layer = 8 * d * d
            // ln1, ln2, tm norm, ms norm (gamma+beta each), mu, decay bias, rate bias
            + 11 * d;
        if let Some(o) = self.origin_head_dim {
            per_layer += self.n_heads * o * self.head_dim();
        }
        2 * v * d + 2 * d + self.n_layers * per_layer
    }
}
