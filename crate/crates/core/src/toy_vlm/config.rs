use serde::{Deserialize, Serialize};

use super::vocab::Vocab;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub patch_size: usize,
    pub image_side: usize,
    pub vocab: Vocab,
    /// Inclusive 1-based range of layers averaged for cross-modal matching.
    pub mid_layers: (usize, usize),
    pub seed: u64,
    pub max_seq: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 6,
            n_heads: 4,
            patch_size: 8,
            image_side: 64,
            vocab: Vocab::standard(),
            mid_layers: (3, 4),
            seed: 0,
            max_seq: 512,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.patch_size == 0 || self.image_side == 0 || self.image_side % self.patch_size != 0 {
            return fail(format!(
                "image_side ({}) must be a positive multiple of patch_size ({})",
                self.image_side, self.patch_size
            ));
        }
        let (lo, hi) = self.mid_layers;
        if self.n_layers > 0 && (lo < 1 || lo > hi || hi > self.n_layers) {
            return fail(format!(
                "mid_layers {lo}..={hi} must lie within 1..={} and be nonempty",
                self.n_layers
            ));
        }
        if !self.vocab.has_control_tokens() {
            return fail("vocabulary is missing control tokens".into());
        }
        if self.max_seq < self.n_patches() {
            return fail(format!(
                "max_seq ({}) cannot hold the {} vision tokens",
                self.max_seq,
                self.n_patches()
            ));
        }
        if !(self.init_std > 0.0) {
            return fail(format!("init_std must be positive, got {}", self.init_std));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn grid_side(&self) -> usize {
        self.image_side / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.d_model
    }

    pub fn mid_layer_list(&self) -> Vec<usize> {
        (self.mid_layers.0..=self.mid_layers.1).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.n_patches(), 64);
        assert_eq!(c.grid_side(), 8);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let c = ModelConfig { n_heads: 3, ..ModelConfig::default() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_mid_layers_outside_depth() {
        let c = ModelConfig { mid_layers: (5, 7), ..ModelConfig::default() };
        assert!(c.validate().is_err());
        let c = ModelConfig { mid_layers: (0, 2), ..ModelConfig::default() };
        assert!(c.validate().is_err());
    }
}
