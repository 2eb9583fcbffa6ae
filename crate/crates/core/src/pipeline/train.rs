use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array4};
use rand::Rng as _;
use serde_json::json;

use super::data::read_split;
use super::{RunConfig, Stage};
use crate::codec::{take_channels, Codec, Palette};
use crate::container::write_atomic;
use crate::denoiser::{
    assemble_m2v_input, assemble_s2m_input, load_checkpoint, read_checkpoint_header, save_checkpoint, Adam,
    AdamConfig, Checkpoint, Conditioning, ConditioningBundle, Dit, LabelText, SegInput,
};
use crate::diffusion::{gaussian_like, q_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::synthetic::{read_sample, SceneSample};
use crate::{seeded_rng, PanopticMap, VideoTensor};

/// Maps `[0, 1]` pixels to the `[−1, 1]` range the diffusion models see.
pub(crate) fn to_model_range(v: &VideoTensor) -> VideoTensor {
    v.mapv(|x| 2.0 * x - 1.0)
}

pub(crate) fn from_model_range(v: &VideoTensor) -> VideoTensor {
    v.mapv(|x| ((x + 1.0) * 0.5).clamp(0.0, 1.0))
}

/// Colors every id with its fixed lattice color.
pub(crate) fn colorize_map(map: &PanopticMap) -> Result<(VideoTensor, Palette)> {
    let ids: std::collections::BTreeSet<u16> = map.iter().copied().collect();
    let palette = Palette::for_ids(ids)?;
    Ok((palette.colorize(map)?, palette))
}

pub(crate) fn first_frame(v: &VideoTensor) -> VideoTensor {
    v.slice(s![0..1, .., .., ..]).to_owned()
}

/// Dense 1-frame latent restricted to the active channels.
pub(crate) fn dense_frame_latent(codec: &Codec, frame: &VideoTensor) -> Result<Array4<f64>> {
    let z = codec.encode_dense(&to_model_range(frame))?;
    Ok(take_channels(&z.data, codec.dense_channels()))
}

pub(crate) fn label_text(cfg: &RunConfig) -> Result<LabelText> {
    let scene = cfg.scene_config(0)?;
    Ok(LabelText {
        phases: scene.phase_names(),
        triplets: scene.triplet_table().names(),
    })
}

/// One precomputed training example.
#[derive(Debug, Clone)]
pub enum TrainItem {
    S2m {
        target: Array4<f64>,
        z_y_seg: Array4<f64>,
        z_y: Array4<f64>,
        labels: ConditioningBundle,
    },
    M2v {
        target: Array4<f64>,
        z_y: Array4<f64>,
        maps: VideoTensor,
        frames: usize,
    },
}

impl TrainItem {
    pub fn target(&self) -> &Array4<f64> {
        match self {
            TrainItem::S2m { target, .. } | TrainItem::M2v { target, .. } => target,
        }
    }

    /// Denoiser input for the noisy target `xt`.
    pub fn assemble(&self, xt: &Array4<f64>) -> Result<Array4<f64>> {
        match self {
            TrainItem::S2m { z_y_seg, z_y, .. } => assemble_s2m_input(xt, z_y_seg, z_y),
            TrainItem::M2v { z_y, .. } => assemble_m2v_input(xt, z_y),
        }
    }

    pub fn conditioning(&self) -> Conditioning<'_> {
        match self {
            TrainItem::S2m { labels, .. } => Conditioning {
                labels: Some(labels),
                segmentation: None,
            },
            TrainItem::M2v { maps, frames, .. } => Conditioning {
                labels: None,
                segmentation: Some(SegInput::Colors {
                    maps,
                    video_frames: *frames,
                }),
            },
        }
    }
}

/// Encoded examples for one stage.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub stage: Stage,
    pub ids: Vec<String>,
    pub items: Vec<TrainItem>,
}

impl TrainingSet {
    pub fn from_samples(cfg: &RunConfig, stage: Stage, samples: &[(String, SceneSample)]) -> Result<Self> {
        let codec = Codec::new(cfg.codec)?;
        let mut items = Vec::with_capacity(samples.len());
        for (_, s) in samples {
            let (colors, _) = colorize_map(&s.panoptic)?;
            let item = match stage {
                Stage::S2m => TrainItem::S2m {
                    target: dense_frame_latent(&codec, &colors)?,
                    z_y_seg: dense_frame_latent(&codec, &first_frame(&colors))?,
                    z_y: dense_frame_latent(&codec, &first_frame(&s.video))?,
                    labels: ConditioningBundle {
                        phases: s.labels.phases.clone(),
                        triplets: s.labels.triplets.clone(),
                    },
                },
                Stage::M2v => TrainItem::M2v {
                    target: codec.encode_compressed(&to_model_range(&s.video))?.data,
                    z_y: codec.encode_compressed(&to_model_range(&first_frame(&s.video)))?.data,
                    maps: colors,
                    frames: s.frames(),
                },
            };
            items.push(item);
        }
        Ok(Self {
            stage,
            ids: samples.iter().map(|(id, _)| id.clone()).collect(),
            items,
        })
    }

    /// The train split of `dataset_dir`.
    pub fn load(cfg: &RunConfig, stage: Stage, dataset_dir: &Path) -> Result<Self> {
        let split = read_split(dataset_dir)?;
        let samples = split
            .train
            .iter()
            .map(|id| Ok((id.clone(), read_sample(&dataset_dir.join(id))?)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_samples(cfg, stage, &samples)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Seed of the generator used at optimizer step `step`, so the data order
/// does not depend on where a run was resumed.
pub fn step_seed(seed: u64, step: u64) -> u64 {
    let mut z = seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mean loss and gradients over one seeded minibatch.
pub(crate) fn minibatch(
    model: &Dit,
    set: &TrainingSet,
    sched: &NoiseSchedule,
    batch: usize,
    seed: u64,
    step: u64,
) -> Result<(f64, BTreeMap<String, Array2<f64>>)> {
    let mut rng = seeded_rng(step_seed(seed, step));
    let mut total = 0.0;
    let mut acc: BTreeMap<String, Array2<f64>> = BTreeMap::new();
    for _ in 0..batch {
        let idx = rng.random_range(0..set.len());
        let t = rng.random_range(1..=sched.num_steps());
        let item = &set.items[idx];
        let x0 = item.target();
        let d = x0.dim();
        let eps = gaussian_like([d.0, d.1, d.2, d.3], &mut rng);
        let z_in = item.assemble(&q_sample(x0, t, &eps, sched)?)?;
        let (loss, grads) = model.loss_and_grads(&z_in, t, &item.conditioning(), &eps)?;
        if !loss.is_finite() || grads.values().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Diverged(format!(
                "loss {loss} at step {step} (sample {}, t={t})",
                set.ids[idx]
            )));
        }
        total += loss;
        for (k, g) in grads {
            match acc.get_mut(&k) {
                Some(a) => *a += &g,
                None => {
                    acc.insert(k, g);
                }
            }
        }
    }
    let scale = 1.0 / batch as f64;
    acc.values_mut().for_each(|g| g.mapv_inplace(|v| v * scale));
    Ok((total * scale, acc))
}

pub fn loss_log_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("loss.csv")
}

pub fn read_loss_log(path: &Path) -> Result<Vec<(u64, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (a, b) = l
                .split_once(',')
                .ok_or_else(|| Error::integrity(path, format!("bad row {l:?}")))?;
            let step = a.parse().map_err(|_| Error::integrity(path, format!("bad step {a:?}")))?;
            let loss = b.parse().map_err(|_| Error::integrity(path, format!("bad loss {b:?}")))?;
            Ok((step, loss))
        })
        .collect()
}

fn write_loss_log(path: &Path, rows: &[(u64, f64)]) -> Result<()> {
    let mut text = String::from("step,loss\n");
    for (s, l) in rows {
        text.push_str(&format!("{s},{l}\n"));
    }
    write_atomic(path, text.as_bytes())
}

/// Stage recorded in a checkpoint's metadata.
pub fn stage_of(extra: &serde_json::Value) -> Option<Stage> {
    extra.get("stage").and_then(|v| v.as_str()).and_then(|s| s.parse().ok())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub stage: Stage,
    pub start_step: u64,
    pub end_step: u64,
    /// Every logged `(step, loss)` including rows from earlier runs.
    pub losses: Vec<(u64, f64)>,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
}

fn fresh_checkpoint(cfg: &RunConfig, set: &TrainingSet) -> Result<Checkpoint> {
    let mut model = Dit::new(cfg.dit_config(cfg.stage), cfg.optim.seed, Some(&label_text(cfg)?))?;
    let clean = set
        .items
        .iter()
        .map(|item| item.assemble(item.target()))
        .collect::<Result<Vec<_>>>()?;
    model.fit_linear_shortcut(&clean)?;
    Ok(Checkpoint {
        model,
        adam: Adam::new(),
        seed: cfg.optim.seed,
        step: 0,
        extra: checkpoint_extra(cfg),
    })
}

fn checkpoint_extra(cfg: &RunConfig) -> serde_json::Value {
    json!({ "stage": cfg.stage.name(), "run_config": cfg })
}

/// Trains `cfg.stage` on the train split of `cfg.data.dataset_dir` up to
/// `cfg.optim.steps`, resuming from `out_checkpoint` when it exists.
pub fn cmd_train(cfg: &RunConfig, out_checkpoint: &Path) -> Result<TrainReport> {
    cfg.validate()?;
    let set = TrainingSet::load(cfg, cfg.stage, &cfg.data.dataset_dir)?;
    train_on(cfg, &set, out_checkpoint)
}

/// [`cmd_train`] over an already encoded training set.
pub fn train_on(cfg: &RunConfig, set: &TrainingSet, out_checkpoint: &Path) -> Result<TrainReport> {
    if set.stage != cfg.stage {
        return Err(Error::Refusal(format!(
            "training set is for {}, config asks for {}",
            set.stage.name(),
            cfg.stage.name()
        )));
    }
    if set.is_empty() {
        return Err(Error::Refusal("training split is empty".into()));
    }
    let log_path = loss_log_path(out_checkpoint);
    let (mut ckpt, mut rows) = if out_checkpoint.exists() {
        let header = read_checkpoint_header(out_checkpoint)?;
        let stage = stage_of(&header.extra);
        if stage != Some(cfg.stage) {
            return Err(Error::Refusal(format!(
                "{} holds a {} checkpoint, config stage is {}",
                out_checkpoint.display(),
                stage.map_or("unknown", Stage::name),
                cfg.stage.name()
            )));
        }
        if header.config != cfg.dit_config(cfg.stage) || header.seed != cfg.optim.seed {
            return Err(Error::Refusal(format!(
                "{} was trained with a different model config or seed",
                out_checkpoint.display()
            )));
        }
        let mut ckpt = load_checkpoint(out_checkpoint)?;
        ckpt.extra = checkpoint_extra(cfg);
        let rows: Vec<(u64, f64)> = if log_path.exists() {
            read_loss_log(&log_path)?.into_iter().filter(|r| r.0 <= ckpt.step).collect()
        } else {
            Vec::new()
        };
        log::info!("resuming {} from step {}", cfg.stage.name(), ckpt.step);
        (ckpt, rows)
    } else {
        (fresh_checkpoint(cfg, set)?, Vec::new())
    };

    let sched = cfg.schedule.training_schedule()?;
    let adam_cfg = AdamConfig {
        lr: cfg.optim.lr,
        clip_norm: cfg.optim.clip_norm,
        ..AdamConfig::default()
    };
    let start = ckpt.step;
    for step in start + 1..=cfg.optim.steps {
        let (loss, grads) = minibatch(&ckpt.model, set, &sched, cfg.optim.batch_size, cfg.optim.seed, step)?;
        let mut params = std::mem::take(ckpt.model.params_mut());
        ckpt.adam.update(&mut params, &grads, &adam_cfg);
        *ckpt.model.params_mut() = params;
        if ckpt.model.params().iter().any(|(_, p)| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Diverged(format!("parameters became non-finite at step {step}")));
        }
        ckpt.step = step;
        rows.push((step, loss));
        if step % 50 == 0 {
            log::info!("{} step {step}: loss {loss:.5}", cfg.stage.name());
        }
        let every = cfg.optim.checkpoint_every;
        if every > 0 && step % every == 0 && step != cfg.optim.steps {
            save_checkpoint(out_checkpoint, &ckpt)?;
            write_loss_log(&log_path, &rows)?;
        }
    }
    save_checkpoint(out_checkpoint, &ckpt)?;
    write_loss_log(&log_path, &rows)?;
    Ok(TrainReport {
        stage: cfg.stage,
        start_step: start,
        end_step: ckpt.step,
        losses: rows,
        checkpoint: out_checkpoint.to_path_buf(),
        loss_log: log_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate_scene, SceneConfig};

    fn tiny_cfg(stage: Stage) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.stage = stage;
        cfg.dit.embed_dim = 16;
        cfg.dit.cond_dim = 16;
        cfg.dit.num_blocks = 1;
        cfg.dit.num_heads = 2;
        cfg.dit.label_dim = 8;
        cfg.dit.mlp_ratio = 2;
        cfg.dit.seg_channels = [8, 8];
        cfg.optim.steps = 4;
        cfg
    }

    fn tiny_set(cfg: &RunConfig) -> TrainingSet {
        let samples: Vec<_> = (0..2)
            .map(|seed| {
                let s = generate_scene(&SceneConfig {
                    seed,
                    frames: 4,
                    ..Default::default()
                })
                .unwrap();
                (format!("s{seed}"), s)
            })
            .collect();
        TrainingSet::from_samples(cfg, cfg.stage, &samples).unwrap()
    }

    #[test]
    fn items_have_stage_shapes() {
        let cfg = tiny_cfg(Stage::S2m);
        let set = tiny_set(&cfg);
        assert_eq!(set.items[0].target().dim(), (4, 8, 12, 48));
        let z_in = set.items[0].assemble(set.items[0].target()).unwrap();
        assert_eq!(z_in.dim().3, 144);
        let cfg = tiny_cfg(Stage::M2v);
        let set = tiny_set(&cfg);
        assert_eq!(set.items[0].target().dim(), (1, 8, 12, 192));
        assert_eq!(set.items[0].assemble(set.items[0].target()).unwrap().dim().3, 384);
    }

    #[test]
    fn step_seeds_differ_and_repeat() {
        assert_eq!(step_seed(3, 9), step_seed(3, 9));
        assert_ne!(step_seed(3, 9), step_seed(3, 10));
        assert_ne!(step_seed(3, 9), step_seed(4, 9));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(Stage::S2m);
        let set = tiny_set(&cfg);
        let full = train_on(&cfg, &set, &dir.path().join("full.ckpt")).unwrap();
        cfg.optim.steps = 2;
        let part = dir.path().join("part.ckpt");
        train_on(&cfg, &set, &part).unwrap();
        cfg.optim.steps = 4;
        let resumed = train_on(&cfg, &set, &part).unwrap();
        assert_eq!(resumed.start_step, 2);
        assert_eq!(resumed.losses, full.losses);
        assert_eq!(
            std::fs::read(&full.loss_log).unwrap(),
            std::fs::read(&resumed.loss_log).unwrap()
        );
        assert_eq!(load_checkpoint(&part).unwrap(), load_checkpoint(&full.checkpoint).unwrap());
    }

    #[test]
    fn stage_mismatch_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(Stage::S2m);
        let set = tiny_set(&cfg);
        let path = dir.path().join("m.ckpt");
        train_on(&RunConfig { optim: crate::pipeline::OptimSettings { steps: 1, ..cfg.optim.clone() }, ..cfg.clone() }, &set, &path).unwrap();
        let m2v = tiny_cfg(Stage::M2v);
        let m2v_set = tiny_set(&m2v);
        assert!(matches!(train_on(&m2v, &m2v_set, &path), Err(Error::Refusal(_))));
        assert!(matches!(train_on(&m2v, &set, &dir.path().join("x.ckpt")), Err(Error::Refusal(_))));
    }

    #[test]
    fn zero_step_size_freezes_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(Stage::S2m);
        cfg.optim.lr = 0.0;
        let set = tiny_set(&cfg);
        let report = train_on(&cfg, &set, &dir.path().join("z.ckpt")).unwrap();
        let trained = load_checkpoint(&report.checkpoint).unwrap();
        assert_eq!(trained.model.params(), fresh_checkpoint(&cfg, &set).unwrap().model.params());
        // A zero-output model scores mean(ε²) on every step.
        for (_, l) in &report.losses {
            assert!((l - 1.0).abs() < 0.05, "{l}");
        }
    }

    #[test]
    fn divergence_aborts_with_a_diagnostic() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(Stage::S2m);
        cfg.optim.lr = 1e300;
        cfg.optim.steps = 6;
        let set = tiny_set(&cfg);
        let err = train_on(&cfg, &set, &dir.path().join("d.ckpt")).unwrap_err();
        assert!(matches!(err, Error::Diverged(_)), "{err}");
        assert!(!dir.path().join("d.ckpt").exists());
    }
}
