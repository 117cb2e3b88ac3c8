use serde::{Deserialize, Serialize};

use crate::NetError;

/// How the time embedding joins the motion/context fusion in the EE block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Projected embedding broadcast-added after the fusion conv.
    Add,
    /// Embedding broadcast to a map and concatenated before the fusion conv.
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Silu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Channels of the matching features the correlation volume is built from.
    pub feature_dim: usize,
    pub context_dim: usize,
    pub hidden_dim: usize,
    pub pyramid_levels: usize,
    pub lookup_radius: usize,
    /// Recurrent refinements inside one denoising step.
    pub inner_iterations: usize,
    pub time_embed_dim: usize,
    /// Bilinear input magnification applied by the estimate wrapper.
    pub upsample_factor: usize,
    pub fusion: Fusion,
    pub activation: Activation,
    /// Re-initialize the hidden state at every outer denoising step instead of carrying it.
    pub reset_hidden_per_step: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 256,
            context_dim: 128,
            hidden_dim: 128,
            pyramid_levels: 4,
            lookup_radius: 4,
            inner_iterations: 4,
            time_embed_dim: 64,
            upsample_factor: 2,
            fusion: Fusion::Add,
            activation: Activation::Relu,
            reset_hidden_per_step: false,
        }
    }
}

impl ModelConfig {
    /// Small CPU-trainable network used for smoke tests and tutorials.
    /// Native resolution and smooth activations: the 2x wrapper quadruples
    /// the cost, and ReLU kinks make finite-difference checks flaky.
    pub fn toy() -> Self {
        Self {
            feature_dim: 32,
            context_dim: 32,
            hidden_dim: 32,
            pyramid_levels: 4,
            lookup_radius: 3,
            inner_iterations: 4,
            time_embed_dim: 32,
            upsample_factor: 1,
            activation: Activation::Silu,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let dims = [
            ("feature_dim", self.feature_dim),
            ("context_dim", self.context_dim),
            ("hidden_dim", self.hidden_dim),
            ("pyramid_levels", self.pyramid_levels),
            ("inner_iterations", self.inner_iterations),
            ("time_embed_dim", self.time_embed_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(NetError::Config(format!("{name} must be positive")));
        }
        if self.hidden_dim < 4 || self.feature_dim < 4 {
            return Err(NetError::Config("hidden_dim and feature_dim must be at least 4".into()));
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(NetError::Config("time_embed_dim must be even".into()));
        }
        if !matches!(self.upsample_factor, 1 | 2) {
            return Err(NetError::Config(format!("upsample_factor must be 1 or 2, got {}", self.upsample_factor)));
        }
        Ok(())
    }

    pub(crate) fn encoder_dims(&self, out: usize) -> [usize; 3] {
        let d = out.max(8);
        [d / 2, (3 * d) / 4, d]
    }

    /// Channels of one correlation lookup across all levels.
    pub fn corr_channels(&self) -> usize {
        let side = 2 * self.lookup_radius + 1;
        self.pyramid_levels * side * side
    }

    /// Channels of the motion features (encoded correlation plus current flow).
    pub fn motion_dim(&self) -> usize {
        self.hidden_dim
    }

    /// Channels of the EE output `x_o` fed to the recurrent unit.
    pub fn embed_dim(&self) -> usize {
        self.motion_dim() + self.context_dim
    }

    /// Smallest coarse-grid side that still yields every pyramid level.
    pub fn min_coarse_side(&self) -> usize {
        1 << (self.pyramid_levels - 1)
    }
}
