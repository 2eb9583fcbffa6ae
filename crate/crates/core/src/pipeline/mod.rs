//! Orchestration: run configuration, dataset creation, training, generation,
//! labeling and evaluation. Every command is a thin layer over library calls.

mod data;
mod evaluate;
mod generate;
mod train;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::CodecConfig;
use crate::denoiser::{DiTConfig, DitMode, LabelProvider};
use crate::diffusion::{NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::synthetic::SceneConfig;

pub use data::{
    cmd_make_data, list_samples, sample_id, read_dataset_manifest, read_split, DatasetEntry, DatasetManifest, Split,
    DATASET_MANIFEST, SPLIT_FILE,
};
pub use evaluate::{
    cmd_evaluate, cmd_label, EvaluateOptions, LabelOptions, LabelSummary, SampleLabelScore, LABEL_SUMMARY_FILE,
};
pub use generate::{
    cmd_generate, cmd_generate_split, generate, CheckpointRef, GenerateMode, GenerationInputs, Generated,
    Provenance, PROVENANCE_FILE,
};
pub use train::{
    cmd_train, loss_log_path, read_loss_log, stage_of, step_seed, train_on, TrainItem, TrainReport, TrainingSet,
};

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "HIERASURG_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    #[default]
    S2m,
    M2v,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::S2m => "s2m",
            Stage::M2v => "m2v",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s2m" => Ok(Stage::S2m),
            "m2v" => Ok(Stage::M2v),
            other => Err(Error::Parameter(format!("unknown stage {other:?} (expected s2m or m2v)"))),
        }
    }
}

/// Free sizes of the denoiser; mode and channel counts follow from the stage
/// and the codec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub token_patch: usize,
    pub cond_dim: usize,
    pub mlp_ratio: usize,
    pub label_dim: usize,
    pub provider: LabelProvider,
    pub use_labels: bool,
    pub seg_channels: [usize; 2],
}

impl Default for ModelSettings {
    fn default() -> Self {
        let d = DiTConfig::s2m(1);
        Self {
            embed_dim: d.embed_dim,
            num_blocks: d.num_blocks,
            num_heads: d.num_heads,
            token_patch: d.token_patch,
            cond_dim: d.cond_dim,
            mlp_ratio: d.mlp_ratio,
            label_dim: d.label_dim,
            provider: d.provider,
            use_labels: true,
            seg_channels: d.seg_channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSettings {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Sample every `sample_stride`-th timestep (1 = full ancestral chain).
    pub sample_stride: usize,
}

impl Default for ScheduleSettings {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            sample_stride: 1,
        }
    }
}

impl ScheduleSettings {
    pub fn training_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.steps, self.beta_start, self.beta_end, ScheduleKind::Linear)
    }

    pub fn sampling_schedule(&self) -> Result<NoiseSchedule> {
        self.training_schedule()?.respaced(self.sample_stride)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSettings {
    pub lr: f64,
    /// Total optimizer steps; a resumed run continues up to this count.
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub clip_norm: f64,
    /// Write an intermediate checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: u64,
}

impl Default for OptimSettings {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            steps: 2000,
            batch_size: 1,
            seed: 0,
            clip_norm: 1.0,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSettings {
    pub dataset_dir: PathBuf,
    pub count: usize,
    /// Share of samples (rounded) held out as the test split.
    pub test_fraction: f64,
    pub fps: u32,
    pub height: usize,
    pub width: usize,
    pub n_anatomy: usize,
    pub n_tools: usize,
    pub phase_count: usize,
    pub triplet_vocab: usize,
}

impl Default for DataSettings {
    fn default() -> Self {
        let s = SceneConfig::default();
        Self {
            dataset_dir: PathBuf::from("data"),
            count: 64,
            test_fraction: 0.25,
            fps: s.fps,
            height: s.height,
            width: s.width,
            n_anatomy: s.n_anatomy,
            n_tools: s.n_tools,
            phase_count: s.phase_count,
            triplet_vocab: s.triplet_vocab,
        }
    }
}

/// Everything a command needs, loaded from JSON with defaults for missing
/// fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub stage: Stage,
    pub codec: CodecConfig,
    pub dit: ModelSettings,
    pub schedule: ScheduleSettings,
    pub optim: OptimSettings,
    pub data: DataSettings,
}

/// Command-line overrides; `None` keeps the file or default value.
#[derive(Debug, Clone, Default)]
pub struct ConfigOverrides {
    pub stage: Option<Stage>,
    pub seed: Option<u64>,
    pub steps: Option<u64>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub dataset_dir: Option<PathBuf>,
    pub count: Option<usize>,
    pub fps: Option<u32>,
    pub embed_dim: Option<usize>,
    pub num_blocks: Option<usize>,
    pub sample_stride: Option<usize>,
    pub use_labels: Option<bool>,
    pub provider: Option<LabelProvider>,
}

impl RunConfig {
    /// Small model and strided sampling sized for a single CPU: both stages
    /// train in minutes on the default 64-scene dataset.
    pub fn smoke() -> Self {
        let mut cfg = Self::default();
        cfg.dit.embed_dim = 32;
        cfg.dit.cond_dim = 32;
        cfg.dit.num_blocks = 2;
        cfg.dit.mlp_ratio = 2;
        cfg.dit.label_dim = 16;
        cfg.dit.seg_channels = [16, 32];
        cfg.schedule.sample_stride = 20;
        cfg
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Parameter(format!("{}: {e}", path.display())))
    }

    /// Defaults, then `file`, then the seed from `env_seed`, then flags.
    pub fn resolve(file: Option<&Path>, env_seed: Option<&str>, overrides: &ConfigOverrides) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(s) = env_seed {
            cfg.optim.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::Parameter(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
        }
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &ConfigOverrides) {
        if let Some(v) = o.stage {
            self.stage = v;
        }
        if let Some(v) = o.seed {
            self.optim.seed = v;
        }
        if let Some(v) = o.steps {
            self.optim.steps = v;
        }
        if let Some(v) = o.lr {
            self.optim.lr = v;
        }
        if let Some(v) = o.batch_size {
            self.optim.batch_size = v;
        }
        if let Some(v) = &o.dataset_dir {
            self.data.dataset_dir = v.clone();
        }
        if let Some(v) = o.count {
            self.data.count = v;
        }
        if let Some(v) = o.fps {
            self.data.fps = v;
        }
        if let Some(v) = o.embed_dim {
            self.dit.embed_dim = v;
            self.dit.cond_dim = v;
        }
        if let Some(v) = o.num_blocks {
            self.dit.num_blocks = v;
        }
        if let Some(v) = o.sample_stride {
            self.schedule.sample_stride = v;
        }
        if let Some(v) = o.use_labels {
            self.dit.use_labels = v;
        }
        if let Some(v) = o.provider {
            self.dit.provider = v;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.dit_config(self.stage).validate()?;
        self.scene_config(0)?.validate()?;
        self.schedule.sampling_schedule()?;
        let o = &self.optim;
        if !(o.lr.is_finite() && o.lr >= 0.0) {
            return Err(Error::Parameter(format!("learning rate {} must be finite and >= 0", o.lr)));
        }
        if o.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be >= 1".into()));
        }
        if !(o.clip_norm > 0.0) {
            return Err(Error::Parameter("clip_norm must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.data.test_fraction) {
            return Err(Error::Parameter("test_fraction must lie in [0, 1]".into()));
        }
        let (h, w, p) = (self.data.height, self.data.width, self.codec.spatial_patch);
        if (h / p) % self.dit.token_patch != 0 || (w / p) % self.dit.token_patch != 0 {
            return Err(Error::Parameter(format!(
                "{h}×{w} frames do not tile into {p}-pixel latents and {}-cell tokens",
                self.dit.token_patch
            )));
        }
        Ok(())
    }

    /// Frames per sample at the configured rate.
    pub fn frames(&self) -> Result<usize> {
        Ok(self.scene_config(0)?.frames)
    }

    pub fn scene_config(&self, seed: u64) -> Result<SceneConfig> {
        let d = &self.data;
        let base = SceneConfig::at_fps(d.fps, seed)?;
        Ok(SceneConfig {
            height: d.height,
            width: d.width,
            n_anatomy: d.n_anatomy,
            n_tools: d.n_tools,
            phase_count: d.phase_count,
            triplet_vocab: d.triplet_vocab,
            ..base
        })
    }

    /// Denoiser configuration for `stage` under this codec.
    pub fn dit_config(&self, stage: Stage) -> DiTConfig {
        let m = &self.dit;
        let base = match stage {
            Stage::S2m => DiTConfig::s2m(self.codec.frame_dim()),
            Stage::M2v => DiTConfig::m2v(self.codec.latent_dim(), self.codec.temporal_factor),
        };
        DiTConfig {
            embed_dim: m.embed_dim,
            num_blocks: m.num_blocks,
            num_heads: m.num_heads,
            token_patch: m.token_patch,
            cond_dim: m.cond_dim,
            mode: if stage == Stage::S2m { DitMode::S2m } else { DitMode::M2v },
            codec_patch: self.codec.spatial_patch,
            mlp_ratio: m.mlp_ratio,
            label_dim: m.label_dim,
            phase_vocab: self.data.phase_count,
            triplet_vocab: self.data.triplet_vocab,
            provider: m.provider,
            use_labels: stage == Stage::S2m && m.use_labels,
            seg_channels: m.seg_channels,
            ..base
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex_digest(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn file_digest(path: &Path) -> Result<String> {
    Ok(hex_digest(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}
