use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{s, Ix4};
use serde::{Deserialize, Serialize};

use super::data::list_samples;
use crate::container::{read_tensor, write_atomic, write_tensor, Tensor};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_pairs, EvalPair, MetricReport};
use crate::seg_pipeline::{
    label_in_clips, score_labeling, LabelConfig, OracleFeatures, OracleSegmenter, OracleTracker,
};
use crate::synthetic::{read_sample, MANIFEST_FILE, PANOPTIC_FILE, VIDEO_FILE};
use crate::VideoTensor;

#[derive(Debug, Clone, Copy, Default)]
pub struct EvaluateOptions {
    /// Evaluate only the ids present in the generated directory instead of
    /// refusing when the real directory has more.
    pub allow_subset: bool,
}

/// Scores every generated sample in `gen_dir` against the real sample with
/// the same id in `real_dir` and writes a JSON report.
pub fn cmd_evaluate(real_dir: &Path, gen_dir: &Path, report_path: &Path, opts: EvaluateOptions) -> Result<MetricReport> {
    let real = list_samples(real_dir, MANIFEST_FILE)?;
    let gen = list_samples(gen_dir, VIDEO_FILE)?;
    let real_ids: BTreeSet<&str> = real.iter().map(|(id, _)| id.as_str()).collect();
    let gen_ids: BTreeSet<&str> = gen.iter().map(|(id, _)| id.as_str()).collect();
    let missing_real: Vec<&str> = gen_ids.difference(&real_ids).copied().collect();
    let missing_gen: Vec<&str> = real_ids.difference(&gen_ids).copied().collect();
    if !missing_real.is_empty() || (!opts.allow_subset && !missing_gen.is_empty()) {
        return Err(Error::Refusal(format!(
            "unpaired samples: generated without real {missing_real:?}, real without generated {missing_gen:?}"
        )));
    }
    if gen.is_empty() {
        return Err(Error::Refusal(format!("no generated samples in {}", gen_dir.display())));
    }
    let mut reals = Vec::with_capacity(gen.len());
    let mut gens = Vec::with_capacity(gen.len());
    for (id, gpath) in &gen {
        reals.push(read_sample(&real_dir.join(id))?);
        let vpath = gpath.join(VIDEO_FILE);
        let video: VideoTensor = read_tensor(&vpath)?
            .into_f32(&vpath)?
            .into_dimensionality::<Ix4>()
            .map_err(|_| Error::integrity(&vpath, "video is not 4-D"))?;
        gens.push(video);
    }
    let pairs: Vec<EvalPair> = reals
        .iter()
        .zip(&gens)
        .map(|(r, g)| EvalPair {
            real: &r.video,
            real_map: &r.panoptic,
            generated: g,
            kinds: &r.labels.entity_kinds,
        })
        .collect();
    let report = evaluate_pairs(&pairs)?;
    write_atomic(report_path, &serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelOptions {
    pub feature_noise: f64,
    pub boundary_noise: f64,
    /// Clip length in frames; 0 means 16 seconds at the sample's rate.
    pub clip_len: usize,
    /// Shared fraction between consecutive clips.
    pub overlap: f64,
    pub seed: u64,
    pub config: LabelConfig,
}

impl Default for LabelOptions {
    fn default() -> Self {
        Self {
            feature_noise: 0.0,
            boundary_noise: 0.0,
            clip_len: 0,
            overlap: 0.5,
            seed: 0,
            config: LabelConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleLabelScore {
    pub id: String,
    pub mean_iou: f64,
    pub identity_switches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub options: LabelOptions,
    pub mean_iou: f64,
    pub identity_switches: usize,
    pub samples: Vec<SampleLabelScore>,
}

pub const LABEL_SUMMARY_FILE: &str = "labeling.json";

/// Labels every sample of `dataset_dir` with the oracle backends, writes the
/// predicted maps to `out_dir/<id>/panoptic.hstn` and a summary scored
/// against ground truth.
pub fn cmd_label(dataset_dir: &Path, out_dir: &Path, opts: &LabelOptions) -> Result<LabelSummary> {
    if !(0.0..1.0).contains(&opts.overlap) {
        return Err(Error::Parameter(format!("overlap {} must lie in [0, 1)", opts.overlap)));
    }
    let mut samples = Vec::new();
    for (id, path) in list_samples(dataset_dir, MANIFEST_FILE)? {
        let sample = read_sample(&path)?;
        let frames = sample.frames();
        let clip = if opts.clip_len == 0 {
            16 * sample.fps as usize
        } else {
            opts.clip_len
        }
        .min(frames)
        .max(1);
        let overlap = ((clip as f64 * opts.overlap).round() as usize).min(clip - 1);
        let gt = &sample.panoptic;
        let seed = opts.seed ^ sample.seed.rotate_left(17);
        let pred = label_in_clips(&sample.video, clip, overlap, &opts.config, |r| {
            let part = gt.slice(s![r.clone(), .., ..]).to_owned();
            (
                OracleSegmenter {
                    gt: part.clone(),
                    boundary_noise: opts.boundary_noise,
                    seed: seed ^ r.start as u64,
                },
                OracleFeatures {
                    noise: opts.feature_noise,
                    seed: seed ^ r.start as u64,
                },
                OracleTracker { gt: part },
            )
        })?;
        let score = score_labeling(&pred, gt)?;
        let sample_out = out_dir.join(&id);
        std::fs::create_dir_all(&sample_out).map_err(|e| Error::io(&sample_out, e))?;
        write_tensor(&sample_out.join(PANOPTIC_FILE), &Tensor::U16(pred.into_dyn()))?;
        samples.push(SampleLabelScore {
            id,
            mean_iou: score.mean_iou,
            identity_switches: score.identity_switches,
        });
    }
    let n = samples.len().max(1) as f64;
    let summary = LabelSummary {
        options: *opts,
        mean_iou: samples.iter().map(|s| s.mean_iou).sum::<f64>() / n,
        identity_switches: samples.iter().map(|s| s.identity_switches).sum(),
        samples,
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_atomic(&out_dir.join(LABEL_SUMMARY_FILE), &serde_json::to_vec_pretty(&summary)?)?;
    Ok(summary)
}
