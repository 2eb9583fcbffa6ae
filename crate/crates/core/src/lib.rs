//! Hierarchical segmentation-conditioned video diffusion at desk scale.
//!
//! The crate is split along the generation hierarchy:
//!
//! * [`diffusion`]: DDPM forward/reverse processes, loss and ancestral sampling.
//! * [`codec`]: toy orthonormal latent codec, segmentation colorization and
//!   K-Means discretization of generated colors.
//! * [`denoiser`]: a small diffusion transformer with both conditioning paths:
//!   label/phase injection for map prediction and a segmentation-token stream
//!   fused by joint attention for map-to-video rendering.
//! * [`seg_pipeline`]: automatic panoptic labeling of videos from pluggable
//!   segmenter, feature and tracker backends.
//! * [`synthetic`]: procedural surgical-like scenes with exact ground truth.
//! * [`metrics`]: SSIM, Fréchet feature distance and detector agreement.
//! * [`pipeline`]: dataset creation, training, generation and evaluation.

pub mod autodiff;
pub mod codec;
pub mod container;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod seg_pipeline;
pub mod synthetic;

use ndarray::{Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use error::{Error, Result};

/// `F×H×W×C` frames with values in `[0, 1]`.
pub type VideoTensor = Array4<f32>;

/// `F×H×W` entity ids; 0 is background.
pub type PanopticMap = Array3<u16>;

/// The seeded generator used everywhere randomness is needed.
pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
