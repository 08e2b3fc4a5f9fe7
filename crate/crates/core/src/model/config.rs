use serde::{Deserialize, Serialize};

use super::ModelError;

/// Architecture hyper-parameters shared by both towers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub text_vocab_size: usize,
    pub text_max_len: usize,
    pub mlp_hidden: usize,
    /// Width of the joint embedding space.
    pub proj_dim: usize,
    pub logit_scale_init: f64,
    pub init_std: f64,
}

/// Upper bound on the learned logit scale, `ln(100)`.
pub fn logit_scale_max() -> f64 {
    100f64.ln()
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            channels: 3,
            embed_dim: 64,
            num_layers: 2,
            num_heads: 4,
            text_vocab_size: 64,
            text_max_len: 16,
            mlp_hidden: 128,
            proj_dim: 32,
            logit_scale_init: (1.0f64 / 0.07).ln(),
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    /// Small configuration for gradient checks.
    pub fn micro() -> Self {
        Self {
            image_size: 16,
            patch_size: 8,
            embed_dim: 8,
            num_layers: 1,
            num_heads: 2,
            text_vocab_size: 12,
            text_max_len: 6,
            mlp_hidden: 16,
            proj_dim: 8,
            ..Self::default()
        }
    }

    /// ViT-L/14 at 840 px: 60 × 60 = 3600 proposals. Never trained here.
    pub fn full_scale_reference() -> Self {
        Self {
            image_size: 840,
            patch_size: 14,
            channels: 3,
            embed_dim: 768,
            num_layers: 24,
            num_heads: 12,
            text_vocab_size: 49408,
            text_max_len: 16,
            mlp_hidden: 3072,
            proj_dim: 768,
            logit_scale_init: (1.0f64 / 0.07).ln(),
            init_std: 0.02,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_proposals(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_heads == 0 || self.embed_dim == 0 || self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed_dim {} must be divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.channels == 0 || self.mlp_hidden == 0 || self.proj_dim == 0 {
            return bad("channels, mlp_hidden and proj_dim must be positive".into());
        }
        if self.text_vocab_size < 2 || self.text_max_len == 0 {
            return bad("text vocabulary needs at least the PAD and UNK tokens and text_max_len > 0".into());
        }
        if !(self.init_std > 0.0) || !self.logit_scale_init.is_finite() {
            return bad("init_std must be positive and logit_scale_init finite".into());
        }
        Ok(())
    }
}
