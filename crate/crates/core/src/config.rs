use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters.
///
/// Defaults: 256-dimensional embeddings, window heights 2/3/5/7/11 with 200
/// kernels each, six attention blocks. `top_p = 15` gives an attention width
/// of 16, which splits evenly over the default 4 heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub heights: Vec<usize>,
    pub kernels_per_height: usize,
    pub top_p: usize,
    pub blocks: usize,
    pub heads: usize,
    pub stride: usize,
    /// Feed-forward inner width; `None` means `4 * (top_p + 1)`.
    pub ffn_hidden: Option<usize>,
    pub threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 256,
            heights: vec![2, 3, 5, 7, 11],
            kernels_per_height: 200,
            top_p: 15,
            blocks: 6,
            heads: 4,
            stride: 1,
            ffn_hidden: None,
            threshold: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 {
            return err("embed_dim must be at least 1".into());
        }
        if self.heights.is_empty() || self.heights.contains(&0) {
            return err(format!("heights must be a non-empty list of positive values, got {:?}", self.heights));
        }
        if self.kernels_per_height == 0 {
            return err("kernels_per_height must be at least 1".into());
        }
        if self.top_p == 0 {
            return err("top_p must be at least 1".into());
        }
        if self.heads == 0 || !self.width().is_multiple_of(self.heads) {
            return err(format!(
                "top_p + 1 = {} must be divisible by heads = {}",
                self.width(),
                self.heads
            ));
        }
        if self.stride == 0 {
            return err("stride must be at least 1".into());
        }
        if self.ffn_hidden == Some(0) {
            return err("ffn_hidden must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return err(format!("threshold must lie in [0, 1], got {}", self.threshold));
        }
        Ok(())
    }

    /// Feature-matrix width: `top_p` selected points plus the average point.
    pub fn width(&self) -> usize {
        self.top_p + 1
    }

    pub fn num_heights(&self) -> usize {
        self.heights.len()
    }

    /// Feature-matrix rows, one per kernel.
    pub fn rows(&self) -> usize {
        self.kernels_per_height * self.heights.len()
    }

    pub fn head_dim(&self) -> usize {
        self.width() / self.heads
    }

    pub fn ffn_width(&self) -> usize {
        self.ffn_hidden.unwrap_or(4 * self.width())
    }

    pub fn max_height(&self) -> usize {
        self.heights.iter().copied().max().unwrap_or(1)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(json)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
