//! The network: compressed conv front end (strided conv, residual blocks
//! with group norm, attention soft-pooling), transformer encoder, last-frame
//! feature selection, and the bottleneck / projection / reconstruction heads.

mod backward;
mod forward;
mod layers;
mod params;

pub use backward::{backward_batch, LossSeeds};
pub use forward::{forward_batch, ForwardTrace, Mode};
pub use layers::positional_encoding;
pub use params::{
    init_params, load_checkpoint, save_checkpoint, GradStore, ParamStore, TensorDef, TensorKind,
};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

fn default_conv_layers() -> usize {
    2
}
fn default_kernel() -> [usize; 2] {
    [3, 3]
}
fn default_stride() -> [usize; 2] {
    [2, 2]
}
fn default_channels() -> usize {
    32
}
fn default_pool_group() -> usize {
    2
}
fn default_residual_blocks() -> usize {
    2
}
fn default_attn_layers() -> usize {
    2
}
fn default_d_model() -> usize {
    320
}
fn default_heads() -> usize {
    4
}
fn default_ffn_dim() -> usize {
    1280
}
fn default_selected_frames() -> usize {
    2
}
fn default_bottleneck_dim() -> usize {
    800
}
fn default_n_classes() -> usize {
    12
}
fn default_recon_dim() -> usize {
    40
}
fn default_temperature() -> f64 {
    0.1
}
fn default_lambda_sim() -> f64 {
    0.8
}
fn default_lambda_x() -> f64 {
    0.05
}
fn default_lambda_x_aug() -> f64 {
    0.05
}
fn default_lambda_dual() -> f64 {
    0.1
}
fn default_gn_groups() -> usize {
    8
}
fn default_gn_eps() -> f64 {
    1e-5
}
fn default_input_frames() -> usize {
    98
}
fn default_input_mels() -> usize {
    40
}

/// Architecture and loss-weight configuration.
///
/// The defaults describe the full model: two 3x3 stride-2 conv layers with
/// 32 channels, two residual blocks with 8-group group norm, soft-pooling
/// over pairs of frames, a 2-layer pre-norm transformer (320-dim, 4 heads,
/// 1280 FFN), last-2-frame selection, an 800-dim ReLU bottleneck, a 12-class
/// projection, and a 40-dim reconstruction head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_conv_layers")]
    pub conv_layers: usize,
    #[serde(default = "default_kernel")]
    pub kernel: [usize; 2],
    #[serde(default = "default_stride")]
    pub stride: [usize; 2],
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_pool_group")]
    pub pool_group: usize,
    #[serde(default = "default_residual_blocks")]
    pub residual_blocks: usize,
    #[serde(default = "default_attn_layers")]
    pub attn_layers: usize,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_ffn_dim")]
    pub ffn_dim: usize,
    #[serde(default = "default_selected_frames")]
    pub selected_frames: usize,
    #[serde(default = "default_bottleneck_dim")]
    pub bottleneck_dim: usize,
    #[serde(default = "default_n_classes")]
    pub n_classes: usize,
    #[serde(default = "default_recon_dim")]
    pub recon_dim: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_lambda_sim")]
    pub lambda_sim: f64,
    #[serde(default = "default_lambda_x")]
    pub lambda_x: f64,
    #[serde(default = "default_lambda_x_aug")]
    pub lambda_x_aug: f64,
    #[serde(default = "default_lambda_dual")]
    pub lambda_dual: f64,
    #[serde(default = "default_gn_groups")]
    pub gn_groups: usize,
    #[serde(default = "default_gn_eps")]
    pub gn_eps: f64,
    #[serde(default = "default_input_frames")]
    pub input_frames: usize,
    #[serde(default = "default_input_mels")]
    pub input_mels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

impl ModelConfig {
    /// Time frames after the strided conv stack ("same" padding).
    pub fn post_conv_time(&self) -> usize {
        let mut t = self.input_frames;
        for _ in 0..self.conv_layers {
            t = ceil_div(t, self.stride[0]);
        }
        t
    }

    /// Frequency bins after the strided conv stack.
    pub fn post_conv_freq(&self) -> usize {
        let mut f = self.input_mels;
        for _ in 0..self.conv_layers {
            f = ceil_div(f, self.stride[1]);
        }
        f
    }

    /// Frames after soft-pooling.
    pub fn pooled_frames(&self) -> usize {
        ceil_div(self.post_conv_time(), self.pool_group)
    }

    /// Flattened feature length after selecting the last `selected_frames`.
    pub fn feat_dim(&self) -> usize {
        self.selected_frames * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        if self.conv_layers == 0 {
            return err("conv_layers must be >= 1".into());
        }
        if self.kernel[0] % 2 == 0 || self.kernel[1] % 2 == 0 {
            return err(format!(
                "kernel dims must be odd for same-padding, got {:?}",
                self.kernel
            ));
        }
        if self.stride[0] == 0 || self.stride[1] == 0 {
            return err("stride dims must be >= 1".into());
        }
        if self.channels == 0 || self.input_frames == 0 || self.input_mels == 0 {
            return err("channels and input dims must be >= 1".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return err(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if self.d_model != self.channels * self.post_conv_freq() {
            return err(format!(
                "d_model {} must equal channels {} x post-conv freq bins {}",
                self.d_model,
                self.channels,
                self.post_conv_freq()
            ));
        }
        if self.gn_groups == 0 || self.channels % self.gn_groups != 0 {
            return err(format!(
                "channels {} must be divisible by gn_groups {}",
                self.channels, self.gn_groups
            ));
        }
        if self.pool_group == 0 {
            return err("pool_group must be >= 1".into());
        }
        if self.selected_frames == 0 || self.selected_frames > self.pooled_frames() {
            return err(format!(
                "selected_frames {} must be in 1..={} (pooled frames)",
                self.selected_frames,
                self.pooled_frames()
            ));
        }
        if self.ffn_dim == 0 || self.bottleneck_dim == 0 || self.n_classes == 0 {
            return err("ffn_dim, bottleneck_dim, n_classes must be >= 1".into());
        }
        if self.recon_dim != self.input_mels {
            return err(format!(
                "recon_dim {} must equal input_mels {} (it predicts the time-mean input)",
                self.recon_dim, self.input_mels
            ));
        }
        if !(self.temperature > 0.0) {
            return err(format!("temperature must be > 0, got {}", self.temperature));
        }
        for (name, l) in [
            ("lambda_sim", self.lambda_sim),
            ("lambda_x", self.lambda_x),
            ("lambda_x_aug", self.lambda_x_aug),
            ("lambda_dual", self.lambda_dual),
        ] {
            if !(l >= 0.0) {
                return err(format!("{name} must be >= 0, got {l}"));
            }
        }
        if !(self.gn_eps > 0.0) {
            return err(format!("gn_eps must be > 0, got {}", self.gn_eps));
        }
        Ok(())
    }

    /// Small configuration for gradient checking: 20 input frames, 8
    /// channels, 80-dim model, 2 heads, 64-dim bottleneck, 4 classes.
    pub fn reduced() -> Self {
        ModelConfig {
            input_frames: 20,
            channels: 8,
            gn_groups: 4,
            d_model: 80,
            heads: 2,
            ffn_dim: 320,
            bottleneck_dim: 64,
            n_classes: 4,
            ..ModelConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_shape_chain() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.post_conv_time(), 25);
        assert_eq!(c.post_conv_freq(), 10);
        assert_eq!(c.pooled_frames(), 13);
        assert_eq!(c.d_model, 320);
        assert_eq!(c.feat_dim(), 640);
    }

    #[test]
    fn reduced_config_is_valid() {
        let c = ModelConfig::reduced();
        c.validate().unwrap();
        assert_eq!(c.post_conv_time(), 5);
        assert_eq!(c.post_conv_freq(), 10);
        assert_eq!(c.pooled_frames(), 3);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = ModelConfig::default();
        c.heads = 7;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.d_model = 300;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.gn_groups = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.recon_dim = 39;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.temperature = 0.0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.selected_frames = 14;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_round_trips_and_rejects_unknown_keys() {
        let c = ModelConfig::default();
        let s = serde_json::to_string(&c).unwrap();
        let back: ModelConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
        let bad = serde_json::from_str::<ModelConfig>("{\"no_such_key\": 1}");
        assert!(bad.is_err());
    }
}
