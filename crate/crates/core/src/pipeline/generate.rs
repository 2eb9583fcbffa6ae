use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use super::train::{colorize_map, dense_frame_latent, first_frame, from_model_range, stage_of, step_seed, to_model_range};
use super::{file_digest, read_split, RunConfig, Stage};
use crate::codec::{kmeans_discretize, pad_channels, take_channels, Codec, LatentMode, LatentVideo, Palette};
use crate::container::{write_atomic, write_tensor, Tensor};
use crate::denoiser::{
    assemble_m2v_input, assemble_s2m_input, load_checkpoint, Checkpoint, Conditioning, ConditioningBundle, SegInput,
};
use crate::diffusion::{sample_loop_projected, NoiseSchedule};
use crate::error::{Error, Result};
use crate::synthetic::{read_sample, SceneSample, PANOPTIC_FILE, VIDEO_FILE};
use crate::{PanopticMap, VideoTensor};

pub const PROVENANCE_FILE: &str = "provenance.json";

/// Seg-encoder downsampling; fixes the zeroed-token count of the ablation.
const SEG_CELL: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerateMode {
    /// S2M predicts the maps, M2V renders them.
    Full,
    /// M2V renders supplied ground-truth maps.
    M2vOnly,
    /// M2V with all-zero seg tokens (ablation).
    Unconditioned,
}

impl std::str::FromStr for GenerateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "m2v_only" | "m2v-only" => Ok(Self::M2vOnly),
            "unconditioned" => Ok(Self::Unconditioned),
            other => Err(Error::Parameter(format!(
                "unknown mode {other:?} (expected full, m2v_only or unconditioned)"
            ))),
        }
    }
}

/// Conditioning for one generated clip. Which fields are needed depends on
/// the mode.
#[derive(Debug, Clone, Default)]
pub struct GenerationInputs {
    /// `1×H×W×3`.
    pub first_frame: Option<VideoTensor>,
    /// `1×H×W`.
    pub first_segmap: Option<PanopticMap>,
    pub labels: Option<ConditioningBundle>,
    /// Full ground-truth map sequence.
    pub segmaps: Option<PanopticMap>,
    /// Output video length.
    pub frames: usize,
}

impl GenerationInputs {
    pub fn from_sample(s: &SceneSample) -> Self {
        Self {
            first_frame: Some(first_frame(&s.video)),
            first_segmap: Some(s.panoptic.slice(ndarray::s![0..1, .., ..]).to_owned()),
            labels: Some(ConditioningBundle {
                phases: s.labels.phases.clone(),
                triplets: s.labels.triplets.clone(),
            }),
            segmaps: Some(s.panoptic.clone()),
            frames: s.frames(),
        }
    }
}

fn need<'a, T>(v: &'a Option<T>, field: &str) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| Error::Refusal(format!("missing conditioning input: {field}")))
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub video: VideoTensor,
    /// Maps the video was conditioned on (all background when unconditioned).
    pub panoptic: PanopticMap,
}

pub(crate) fn run_config_of(ckpt: &Checkpoint, expect: Stage, what: &str) -> Result<RunConfig> {
    let stage = stage_of(&ckpt.extra);
    if stage != Some(expect) {
        return Err(Error::Refusal(format!(
            "{what} checkpoint is stage {}, expected {}",
            stage.map_or("unknown", Stage::name),
            expect.name()
        )));
    }
    let cfg = ckpt
        .extra
        .get("run_config")
        .ok_or_else(|| Error::Refusal(format!("{what} checkpoint has no run config")))?;
    Ok(serde_json::from_value(cfg.clone())?)
}

/// Clamps a dense-latent estimate to the model pixel range.
fn clip_dense(codec: &Codec, z: Array4<f64>) -> Result<Array4<f64>> {
    let frames = z.dim().0;
    let video = codec.decode(&LatentVideo {
        data: pad_channels(&z, codec.config().latent_dim()),
        mode: LatentMode::Dense,
        frames,
    })?;
    let z = codec.encode_dense(&video.mapv(|x| x.clamp(-1.0, 1.0)))?;
    Ok(take_channels(&z.data, codec.dense_channels()))
}

/// Clamps a compressed-latent estimate of a `frames`-frame video to the
/// model pixel range.
fn clip_compressed(codec: &Codec, z: Array4<f64>, frames: usize) -> Result<Array4<f64>> {
    let video = codec.decode(&LatentVideo {
        data: z,
        mode: LatentMode::Compressed,
        frames,
    })?;
    Ok(codec.encode_compressed(&video.mapv(|x| x.clamp(-1.0, 1.0)))?.data)
}

/// S2M sampling of a map sequence, decoded and snapped to the ids of the
/// first map.
fn predict_maps(
    s2m: &Checkpoint,
    codec: &Codec,
    first: &VideoTensor,
    first_map: &PanopticMap,
    labels: &ConditioningBundle,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<PanopticMap> {
    let (first_colors, palette) = colorize_map(first_map)?;
    let z_y_seg = dense_frame_latent(codec, &first_colors)?;
    let z_y = dense_frame_latent(codec, first)?;
    let (_, h, w, c) = z_y.dim();
    let cond = Conditioning {
        labels: Some(labels),
        segmentation: None,
    };
    let model = &s2m.model;
    let denoise = |x: &ndarray::Array4<f64>, t: usize, _: &()| model.predict(&assemble_s2m_input(x, &z_y_seg, &z_y)?, t, &cond);
    let z = sample_loop_projected(&denoise, [labels.frames(), h, w, c], &(), sched, step_seed(seed, 1), |x0| {
        clip_dense(codec, x0)
    })?;
    let colors = from_model_range(&codec.decode(&LatentVideo {
        data: pad_channels(&z, codec.config().latent_dim()),
        mode: LatentMode::Dense,
        frames: labels.frames(),
    })?);
    let (clusters, centres) = kmeans_discretize(&colors, palette.len().max(2) + 1, step_seed(seed, 2))?;
    let to_id: BTreeMap<u16, u16> = centres
        .iter()
        .map(|(k, color)| (k, palette.nearest_id(color).unwrap_or(0)))
        .collect();
    Ok(clusters.mapv(|k| to_id.get(&k).copied().unwrap_or(0)))
}

/// Runs the hierarchy for one clip.
pub fn generate(
    s2m: Option<&Checkpoint>,
    m2v: &Checkpoint,
    inputs: &GenerationInputs,
    mode: GenerateMode,
    sample_stride: Option<usize>,
    seed: u64,
) -> Result<Generated> {
    let cfg = run_config_of(m2v, Stage::M2v, "m2v")?;
    let codec = Codec::new(cfg.codec)?;
    let mut sched_cfg = cfg.schedule.clone();
    if let Some(s) = sample_stride {
        sched_cfg.sample_stride = s;
    }
    let sched = sched_cfg.sampling_schedule()?;
    let first = need(&inputs.first_frame, "first_frame")?;
    let (_, height, width, _) = first.dim();
    let frames = inputs.frames;
    if frames == 0 {
        return Err(Error::Parameter("requested video has no frames".into()));
    }

    let panoptic = match mode {
        GenerateMode::Full => {
            let s2m = s2m.ok_or_else(|| Error::Refusal("missing conditioning input: s2m checkpoint".into()))?;
            let s2m_cfg = run_config_of(s2m, Stage::S2m, "s2m")?;
            if s2m_cfg.codec != cfg.codec {
                return Err(Error::Refusal("s2m and m2v checkpoints use different codecs".into()));
            }
            let first_map = need(&inputs.first_segmap, "first_segmap")?;
            let labels = need(&inputs.labels, "labels")?;
            predict_maps(s2m, &codec, first, first_map, labels, &sched, seed)?
        }
        GenerateMode::M2vOnly => need(&inputs.segmaps, "segmaps")?.clone(),
        GenerateMode::Unconditioned => PanopticMap::zeros((frames, height, width)),
    };

    let z_y = codec.encode_compressed(&to_model_range(first))?.data;
    let (_, h, w, c) = z_y.dim();
    let seg_tokens;
    let seg = if mode == GenerateMode::Unconditioned {
        SegInput::Zeroed {
            tokens: frames * (height / SEG_CELL) * (width / SEG_CELL),
        }
    } else {
        let palette = match mode {
            GenerateMode::Full => colorize_map(need(&inputs.first_segmap, "first_segmap")?)?.1,
            _ => Palette::for_ids(panoptic.iter().copied())?,
        };
        seg_tokens = m2v.model.seg_encode(&palette.colorize(&panoptic)?, frames)?;
        SegInput::Encoded(&seg_tokens)
    };
    let cond = Conditioning {
        labels: None,
        segmentation: Some(seg),
    };
    let model = &m2v.model;
    let denoise = |x: &ndarray::Array4<f64>, t: usize, _: &()| model.predict(&assemble_m2v_input(x, &z_y)?, t, &cond);
    let f_lat = frames.div_ceil(cfg.codec.temporal_factor);
    let z = sample_loop_projected(&denoise, [f_lat, h, w, c], &(), &sched, step_seed(seed, 3), |x0| {
        clip_compressed(&codec, x0, frames)
    })?;
    let video = from_model_range(&codec.decode(&LatentVideo {
        data: z,
        mode: LatentMode::Compressed,
        frames,
    })?);
    Ok(Generated { video, panoptic })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRef {
    pub path: PathBuf,
    pub sha256: String,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub mode: GenerateMode,
    pub seed: u64,
    pub sample_stride: Option<usize>,
    pub frames: usize,
    pub inputs: PathBuf,
    pub s2m_checkpoint: Option<CheckpointRef>,
    pub m2v_checkpoint: CheckpointRef,
    pub config_hash: String,
    /// SHA-256 of each written output.
    pub outputs: BTreeMap<String, String>,
}

struct Loaded {
    ckpt: Checkpoint,
    reference: CheckpointRef,
}

fn load(path: &Path) -> Result<Loaded> {
    let ckpt = load_checkpoint(path)?;
    let reference = CheckpointRef {
        path: path.to_path_buf(),
        sha256: file_digest(path)?,
        step: ckpt.step,
    };
    Ok(Loaded { ckpt, reference })
}

fn generate_to_dir(
    s2m: Option<&Loaded>,
    m2v: &Loaded,
    sample_dir: &Path,
    out_dir: &Path,
    mode: GenerateMode,
    sample_stride: Option<usize>,
    seed: u64,
) -> Result<Provenance> {
    let sample = read_sample(sample_dir)?;
    let out = generate(
        s2m.map(|l| &l.ckpt),
        &m2v.ckpt,
        &GenerationInputs::from_sample(&sample),
        mode,
        sample_stride,
        seed,
    )?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut outputs = BTreeMap::new();
    for (name, tensor) in [
        (VIDEO_FILE, Tensor::F32(out.video.into_dyn())),
        (PANOPTIC_FILE, Tensor::U16(out.panoptic.into_dyn())),
    ] {
        let path = out_dir.join(name);
        write_tensor(&path, &tensor)?;
        outputs.insert(name.to_string(), file_digest(&path)?);
    }
    let cfg = run_config_of(&m2v.ckpt, Stage::M2v, "m2v")?;
    let provenance = Provenance {
        mode,
        seed,
        sample_stride,
        frames: sample.frames(),
        inputs: sample_dir.to_path_buf(),
        s2m_checkpoint: s2m.map(|l| l.reference.clone()),
        m2v_checkpoint: m2v.reference.clone(),
        config_hash: cfg.hash(),
        outputs,
    };
    write_atomic(&out_dir.join(PROVENANCE_FILE), &serde_json::to_vec_pretty(&provenance)?)?;
    Ok(provenance)
}

/// Generates one clip conditioned on the sample in `sample_dir`.
pub fn cmd_generate(
    s2m_checkpoint: Option<&Path>,
    m2v_checkpoint: &Path,
    sample_dir: &Path,
    out_dir: &Path,
    mode: GenerateMode,
    sample_stride: Option<usize>,
    seed: u64,
) -> Result<Provenance> {
    let s2m = s2m_checkpoint.map(load).transpose()?;
    let m2v = load(m2v_checkpoint)?;
    generate_to_dir(s2m.as_ref(), &m2v, sample_dir, out_dir, mode, sample_stride, seed)
}

/// Generates every sample of a dataset split into `out_root/<id>/`. Sample
/// `i` of the split uses seed `step_seed(seed, i)`.
#[allow(clippy::too_many_arguments)]
pub fn cmd_generate_split(
    s2m_checkpoint: Option<&Path>,
    m2v_checkpoint: &Path,
    dataset_dir: &Path,
    split: &str,
    out_root: &Path,
    mode: GenerateMode,
    sample_stride: Option<usize>,
    seed: u64,
) -> Result<Vec<Provenance>> {
    let s = read_split(dataset_dir)?;
    let ids = match split {
        "train" => s.train,
        "test" => s.test,
        "all" => s.train.into_iter().chain(s.test).collect(),
        other => return Err(Error::Parameter(format!("unknown split {other:?}"))),
    };
    let s2m = s2m_checkpoint.map(load).transpose()?;
    let m2v = load(m2v_checkpoint)?;
    ids.iter()
        .enumerate()
        .map(|(i, id)| {
            generate_to_dir(
                s2m.as_ref(),
                &m2v,
                &dataset_dir.join(id),
                &out_root.join(id),
                mode,
                sample_stride,
                step_seed(seed, i as u64),
            )
        })
        .collect()
}
