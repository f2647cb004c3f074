//! Architecture and optimization hyperparameters.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Downsample {
    /// `2³` max pooling followed by a pointwise width-doubling convolution.
    Maxpool,
    /// Stride-2 `2³` convolution.
    ConvDown,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FebBlocks {
    OneBlock,
    TwoBlocks,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderVariant {
    Conv,
    Pnam,
}

/// Where text fusion blocks are inserted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    None,
    Encoder,
    Decoder,
    Both,
}

impl Fusion {
    pub fn encoder(self) -> bool {
        matches!(self, Fusion::Encoder | Fusion::Both)
    }
    pub fn decoder(self) -> bool {
        matches!(self, Fusion::Decoder | Fusion::Both)
    }
}

/// Normalization of the per-scale cross-entropy sum.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CeNorm {
    /// Divide the weighted sum over voxels by the class count.
    ClassCount,
    /// Divide by the number of supervised voxels.
    VoxelMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    /// Number of output classes, empty class included.
    pub num_classes: usize,
    /// Channel width at full resolution; doubles per encoder stage.
    pub base_width: usize,
    /// Width of the label embedding table.
    pub embed_dim: usize,
    /// Supervised output scales, a subset of {1, 2, 4, 8} containing 1.
    pub scales: Vec<usize>,
    pub feb_downsample: Downsample,
    pub feb_blocks: FebBlocks,
    pub decoder: DecoderVariant,
    pub fusion: Fusion,
    /// Attention heads in the PNAM blocks.
    pub heads: usize,
    /// Neighborhood cross-attention window edge (odd).
    pub window: usize,
    /// Take NCA queries from the skip stream instead of the upsampled stream.
    pub nca_query_from_skip: bool,
    /// Attention heads inside the text fusion blocks.
    pub dcam_heads: usize,
    pub text_global_dim: usize,
    pub text_token_dim: usize,
    pub leaky_slope: f64,
    pub norm_eps: f64,
    /// Hidden width multiplier of per-voxel feed-forward blocks.
    pub ffn_mult: usize,

    pub lr_peak: f64,
    pub warmup_frac: f64,
    pub epochs: usize,
    /// Optimizer step budget; overrides `epochs × scenes` when set.
    pub steps: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,

    pub lambda_ce: f64,
    pub lambda_scal_geo: f64,
    pub lambda_scal_sem: f64,
    pub lambda_lovasz: f64,
    pub ce_norm: CeNorm,
    pub class_weight_eps: f64,

    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            num_classes: 20,
            base_width: 16,
            embed_dim: 16,
            scales: vec![1, 2, 4, 8],
            feb_downsample: Downsample::ConvDown,
            feb_blocks: FebBlocks::TwoBlocks,
            decoder: DecoderVariant::Conv,
            fusion: Fusion::None,
            heads: 4,
            window: 3,
            nca_query_from_skip: false,
            dcam_heads: 4,
            text_global_dim: 512,
            text_token_dim: 256,
            leaky_slope: 0.01,
            norm_eps: 1e-5,
            ffn_mult: 2,
            lr_peak: 5e-5,
            warmup_frac: 0.05,
            epochs: 10,
            steps: None,
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            lambda_ce: 1.0,
            lambda_scal_geo: 1.0,
            lambda_scal_sem: 1.0,
            lambda_lovasz: 0.0,
            ce_norm: CeNorm::ClassCount,
            class_weight_eps: 1e-3,
            seed: 0,
        }
    }
}

/// Encoder stages (and decoder stages) of the U-Net.
pub const STAGES: usize = 4;
/// Spatial reduction at the bottleneck.
pub const BOTTLENECK_SCALE: usize = 1 << STAGES;

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            invalid!("num_classes {} < 2", self.num_classes);
        }
        if self.num_classes > u16::MAX as usize {
            invalid!("num_classes {} does not fit 16-bit labels", self.num_classes);
        }
        if self.base_width == 0 || self.embed_dim == 0 {
            invalid!("base_width and embed_dim must be positive");
        }
        if self.scales.is_empty() || !self.scales.contains(&1) {
            invalid!("scales {:?} must be nonempty and contain 1", self.scales);
        }
        if let Some(s) = self.scales.iter().find(|s| ![1, 2, 4, 8].contains(*s)) {
            invalid!("scale {s} not in {{1, 2, 4, 8}}");
        }
        let mut sorted = self.scales.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.scales.len() {
            invalid!("duplicate entries in scales {:?}", self.scales);
        }
        if self.window == 0 || self.window % 2 == 0 {
            invalid!("window {} must be odd and ≥ 1", self.window);
        }
        if self.heads == 0 || self.dcam_heads == 0 {
            invalid!("head counts must be positive");
        }
        if self.decoder == DecoderVariant::Pnam && (2 * self.base_width) % self.heads != 0 {
            invalid!("heads {} must divide the PNAM width {}", self.heads, 2 * self.base_width);
        }
        if self.fusion.decoder() && self.base_width % self.dcam_heads != 0 {
            invalid!("dcam_heads {} must divide the finest fusion width {}", self.dcam_heads, self.base_width);
        }
        if self.fusion.encoder() && (2 * self.base_width) % self.dcam_heads != 0 {
            invalid!("dcam_heads {} must divide the encoder fusion width {}", self.dcam_heads, 2 * self.base_width);
        }
        if self.fusion != Fusion::None && (self.text_global_dim == 0 || self.text_token_dim == 0) {
            invalid!("text dimensions must be positive when fusion is enabled");
        }
        for (name, v) in [
            ("lambda_ce", self.lambda_ce),
            ("lambda_scal_geo", self.lambda_scal_geo),
            ("lambda_scal_sem", self.lambda_scal_sem),
            ("lambda_lovasz", self.lambda_lovasz),
            ("weight_decay", self.weight_decay),
            ("lr_peak", self.lr_peak),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                invalid!("{name} = {v} must be a finite value ≥ 0");
            }
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            invalid!("leaky_slope {} outside [0, 1)", self.leaky_slope);
        }
        if !(self.norm_eps > 0.0) {
            invalid!("norm_eps must be > 0");
        }
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            invalid!("warmup_frac {} outside (0, 1)", self.warmup_frac);
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            invalid!("AdamW betas must lie in [0, 1) and eps must be > 0");
        }
        if !(self.class_weight_eps > 0.0) {
            invalid!("class_weight_eps must be > 0");
        }
        if self.ffn_mult == 0 {
            invalid!("ffn_mult must be positive");
        }
        Ok(())
    }

    /// Channel width at spatial reduction `scale` (1, 2, …, 16).
    pub fn width_at(&self, scale: usize) -> usize {
        self.base_width * scale
    }

    /// Largest configured output scale.
    pub fn max_scale(&self) -> usize {
        self.scales.iter().copied().max().unwrap_or(1)
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}
