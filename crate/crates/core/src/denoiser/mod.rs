//! Toy diffusion transformer with the two conditioning pathways.
//!
//! * **s2m**: the noisy dense latent is channel-concatenated with the
//!   repeated first-frame map latent and first-frame image latent; phase and
//!   triplet ids are embedded, convolved over time, average-pooled and joined
//!   with the timestep embedding to drive adaptive layer-norm in every block.
//! * **m2v**: the noisy compressed latent is concatenated with the repeated
//!   first-frame latent; colorized segmentation maps pass through a stack of
//!   spatially downsampling residual blocks into a token stream that shares
//!   every block's attention with the video tokens.

mod checkpoint;
mod embed;
mod layers;
mod model;
mod params;

pub use checkpoint::{
    load_checkpoint, read_checkpoint_header, save_checkpoint, Checkpoint, CheckpointHeader, TensorEntry,
    TensorRole,
};
pub use embed::{sinusoidal_embed, sinusoidal_embed_f, spatial_embed, text_table};
pub use layers::{joint_attention, AttentionOutput, AttentionWeights};
pub use model::{assemble_m2v_input, assemble_s2m_input, map_seg_frame, Dit, LabelText};
pub use params::{Adam, AdamConfig, ParamStore};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::VideoTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DitMode {
    S2m,
    M2v,
}

/// Where per-label vectors come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabelProvider {
    /// Learnable lookup tables.
    #[default]
    LabelEmbedding,
    /// Frozen vectors derived from label text.
    PretrainedTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiTConfig {
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub token_patch: usize,
    pub cond_dim: usize,
    pub mode: DitMode,
    /// Channels of the predicted latent.
    pub latent_channels: usize,
    /// Video frames covered by one latent frame (1 for dense latents).
    pub frames_per_latent: usize,
    /// Pixels per latent cell along each spatial axis.
    pub codec_patch: usize,
    pub mlp_ratio: usize,
    pub label_dim: usize,
    pub phase_vocab: usize,
    pub triplet_vocab: usize,
    pub provider: LabelProvider,
    /// Feed phase/triplet conditioning (s2m). `false` is the unconditioned
    /// ablation: the label vector is replaced by zeros.
    pub use_labels: bool,
    pub seg_channels: [usize; 2],
}

impl DiTConfig {
    pub fn s2m(latent_channels: usize) -> Self {
        Self {
            embed_dim: 64,
            num_blocks: 4,
            num_heads: 4,
            token_patch: 2,
            cond_dim: 64,
            mode: DitMode::S2m,
            latent_channels,
            frames_per_latent: 1,
            codec_patch: 4,
            mlp_ratio: 4,
            label_dim: 32,
            phase_vocab: 7,
            triplet_vocab: 20,
            provider: LabelProvider::LabelEmbedding,
            use_labels: true,
            seg_channels: [32, 64],
        }
    }

    pub fn m2v(latent_channels: usize, frames_per_latent: usize) -> Self {
        Self {
            mode: DitMode::M2v,
            frames_per_latent,
            use_labels: false,
            ..Self::s2m(latent_channels)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Channels of the assembled denoiser input.
    pub fn input_channels(&self) -> usize {
        match self.mode {
            DitMode::S2m => 3 * self.latent_channels,
            DitMode::M2v => 2 * self.latent_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.embed_dim,
            self.num_blocks,
            self.num_heads,
            self.token_patch,
            self.cond_dim,
            self.latent_channels,
            self.frames_per_latent,
            self.codec_patch,
            self.mlp_ratio,
            self.label_dim,
            self.phase_vocab,
            self.triplet_vocab,
            self.seg_channels[0],
            self.seg_channels[1],
        ];
        if positive.contains(&0) {
            return Err(Error::Parameter(format!("DiT sizes must be positive: {self:?}")));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Parameter(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.embed_dim % 4 != 0 {
            return Err(Error::Parameter("embed_dim must be divisible by 4".into()));
        }
        Ok(())
    }
}

/// Per-frame phase and triplet ids (triplet 0 = none).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditioningBundle {
    pub phases: Vec<u16>,
    pub triplets: Vec<u16>,
}

impl ConditioningBundle {
    pub fn frames(&self) -> usize {
        self.phases.len()
    }

    pub fn validate(&self, phase_vocab: usize, triplet_vocab: usize) -> Result<()> {
        if self.phases.is_empty() || self.phases.len() != self.triplets.len() {
            return Err(Error::Shape(format!(
                "{} phases vs {} triplets",
                self.phases.len(),
                self.triplets.len()
            )));
        }
        if let Some(p) = self.phases.iter().find(|&&p| p as usize >= phase_vocab) {
            return Err(Error::Lookup(format!("phase id {p} outside vocabulary of {phase_vocab}")));
        }
        if let Some(t) = self.triplets.iter().find(|&&t| t as usize >= triplet_vocab) {
            return Err(Error::Lookup(format!(
                "triplet id {t} outside vocabulary of {triplet_vocab}"
            )));
        }
        Ok(())
    }
}

/// Encoded segmentation stream: `T_seg×embed_dim` tokens in frame-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct SegTokens {
    pub tokens: ndarray::Array2<f64>,
    /// Video-timeline frame index of every token.
    pub frame_index: Vec<usize>,
}

/// Segmentation input for m2v.
#[derive(Debug, Clone, Copy)]
pub enum SegInput<'a> {
    /// Colorized maps, `F_seg×H×W×3`, aligned to a video of `video_frames`.
    Colors {
        maps: &'a VideoTensor,
        video_frames: usize,
    },
    /// The unconditioned ablation: `tokens` all-zero seg tokens.
    Zeroed { tokens: usize },
    /// Tokens from [`Dit::seg_encode`](model::Dit::seg_encode), reused across
    /// sampling steps. Gradients do not reach the seg encoder.
    Encoded(&'a SegTokens),
}

/// Everything a forward pass may read besides the latent and timestep.
/// Each mode reads only its own field.
#[derive(Debug, Clone, Copy, Default)]
pub struct Conditioning<'a> {
    pub labels: Option<&'a ConditioningBundle>,
    pub segmentation: Option<SegInput<'a>>,
}
