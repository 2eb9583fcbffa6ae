//! Automatic panoptic labeling of a video.
//!
//! Per frame, a grid of point prompts is segmented, every mask gets a feature
//! vector, and features are matched against the previous frame. Observations
//! without a match are new entities; each is tracked forward from where it
//! was first seen. Tracks that cover the same pixels are merged and pixel
//! conflicts go to the entity with the larger average area.
//!
//! The backends are traits. The oracle implementations read a ground-truth
//! map so the procedure can be checked end to end on synthetic scenes.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use ndarray::{s, Array2, Array3, ArrayView3, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{seeded_rng, PanopticMap, VideoTensor};

pub type Mask = Array2<bool>;

#[derive(Debug, Clone, PartialEq)]
pub struct EntityObservation {
    pub frame: usize,
    pub mask: Mask,
    pub feature: Vec<f64>,
    pub seed_point: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntityTrack {
    pub id: u16,
    pub first_frame: usize,
    pub seed_point: (usize, usize),
    /// Masks keyed by frame; only frames where the entity is visible.
    pub masks: BTreeMap<usize, Mask>,
}

impl EntityTrack {
    pub fn meta(&self) -> TrackMeta {
        TrackMeta {
            id: self.id,
            first_frame: self.first_frame,
            seed_point: self.seed_point,
        }
    }

    fn mean_area(&self) -> f64 {
        if self.masks.is_empty() {
            return 0.0;
        }
        self.masks.values().map(area).sum::<usize>() as f64 / self.masks.len() as f64
    }
}

/// Serializable summary of a track.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackMeta {
    pub id: u16,
    pub first_frame: usize,
    pub seed_point: (usize, usize),
}

pub trait SegmenterBackend {
    /// One optional mask per prompt point.
    fn segment(&self, frame_index: usize, frame: ArrayView3<f32>, prompts: &[(usize, usize)]) -> Result<Vec<Option<Mask>>>;
}

pub trait FeatureBackend {
    fn features(&self, frame_index: usize, frame: ArrayView3<f32>, mask: &Mask) -> Result<Vec<f64>>;
}

pub trait TrackerBackend {
    /// Masks of the entity under `seed_point` for frames `first_frame..`.
    fn track(&self, video: &VideoTensor, first_frame: usize, seed_point: (usize, usize)) -> Result<BTreeMap<usize, Mask>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelConfig {
    pub grid_stride: usize,
    /// Cosine distance below which two observations are the same entity.
    pub match_threshold: f64,
    /// Overlap (intersection over smaller area) at which tracks merge.
    pub overlap_threshold: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            grid_stride: 4,
            match_threshold: 0.3,
            overlap_threshold: 0.8,
        }
    }
}

/// Row-major grid of prompts offset by half a stride. An axis shorter than
/// the offset gets a single prompt at its center.
pub fn grid_prompts(height: usize, width: usize, stride: usize) -> Vec<(usize, usize)> {
    let stride = stride.max(1);
    let axis = |len: usize| -> Vec<usize> {
        let off = stride / 2;
        if len == 0 {
            Vec::new()
        } else if off >= len {
            vec![(len - 1) / 2]
        } else {
            (off..len).step_by(stride).collect()
        }
    };
    let cols = axis(width);
    axis(height)
        .into_iter()
        .flat_map(|r| cols.iter().map(move |&c| (r, c)))
        .collect()
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot / (na * nb)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `(current index, previous index, distance)`.
    pub matches: Vec<(usize, usize, f64)>,
    /// Current indices left unmatched, in input order.
    pub new_entities: Vec<usize>,
}

/// Greedy one-to-one matching by ascending cosine distance.
pub fn match_entities(
    current: &[EntityObservation],
    previous: &[EntityObservation],
    threshold: f64,
) -> Result<MatchResult> {
    let dim = current.first().or(previous.first()).map(|o| o.feature.len());
    if let Some(d) = dim {
        if let Some(bad) = current.iter().chain(previous).find(|o| o.feature.len() != d) {
            return Err(Error::Shape(format!(
                "feature of length {} among features of length {d}",
                bad.feature.len()
            )));
        }
    }
    let mut pairs = Vec::new();
    for (i, c) in current.iter().enumerate() {
        for (j, p) in previous.iter().enumerate() {
            let d = cosine_distance(&c.feature, &p.feature);
            if d < threshold {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut used_c, mut used_p) = (vec![false; current.len()], vec![false; previous.len()]);
    let mut matches = Vec::new();
    for (d, i, j) in pairs {
        if !used_c[i] && !used_p[j] {
            used_c[i] = true;
            used_p[j] = true;
            matches.push((i, j, d));
        }
    }
    let new_entities = (0..current.len()).filter(|&i| !used_c[i]).collect();
    Ok(MatchResult { matches, new_entities })
}

/// A tracker failure that dropped one discovered entity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackWarning {
    pub first_frame: usize,
    pub seed_point: (usize, usize),
    pub reason: String,
}

/// One track per discovery; ids run from 1 in discovery order over the
/// tracks that survive.
pub fn track_entities(
    video: &VideoTensor,
    discovered: &[EntityObservation],
    tracker: &dyn TrackerBackend,
) -> (Vec<EntityTrack>, Vec<TrackWarning>) {
    let mut tracks = Vec::new();
    let mut warnings = Vec::new();
    for obs in discovered {
        match tracker.track(video, obs.frame, obs.seed_point) {
            Ok(masks) => {
                let masks: BTreeMap<_, _> = masks
                    .into_iter()
                    .filter(|(f, m)| *f >= obs.frame && m.iter().any(|&v| v))
                    .collect();
                tracks.push(EntityTrack {
                    id: (tracks.len() + 1) as u16,
                    first_frame: obs.frame,
                    seed_point: obs.seed_point,
                    masks,
                });
            }
            Err(e) => {
                log::warn!("dropping entity first seen at frame {}: {e}", obs.frame);
                warnings.push(TrackWarning {
                    first_frame: obs.frame,
                    seed_point: obs.seed_point,
                    reason: e.to_string(),
                });
            }
        }
    }
    (tracks, warnings)
}

fn area(m: &Mask) -> usize {
    m.iter().filter(|&&v| v).count()
}

/// Intersection over the smaller area, averaged over co-visible frames.
pub fn track_overlap(a: &EntityTrack, b: &EntityTrack) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (f, ma) in &a.masks {
        let Some(mb) = b.masks.get(f) else { continue };
        let (aa, ab) = (area(ma), area(mb));
        if aa == 0 || ab == 0 {
            continue;
        }
        let inter = ma.iter().zip(mb.iter()).filter(|(&x, &y)| x && y).count();
        sum += inter as f64 / aa.min(ab) as f64;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Repeatedly merges the most-overlapping pair at or above `threshold` into
/// the lower id.
pub fn merge_tracks(mut tracks: Vec<EntityTrack>, threshold: f64) -> Vec<EntityTrack> {
    tracks.sort_by_key(|t| t.id);
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..tracks.len() {
            for j in i + 1..tracks.len() {
                let o = track_overlap(&tracks[i], &tracks[j]);
                if o >= threshold && best.is_none_or(|b| o > b.0) {
                    best = Some((o, i, j));
                }
            }
        }
        let Some((_, i, j)) = best else { break };
        let absorbed = tracks.remove(j);
        let keep = &mut tracks[i];
        for (f, m) in absorbed.masks {
            keep.masks
                .entry(f)
                .and_modify(|k| k.zip_mut_with(&m, |a, &b| *a |= b))
                .or_insert(m);
        }
        if absorbed.first_frame < keep.first_frame {
            keep.first_frame = absorbed.first_frame;
            keep.seed_point = absorbed.seed_point;
        }
    }
    tracks
}

/// Paints tracks into an `F×H×W` map, giving contested pixels to the track
/// with the larger average area (ties to the lower id).
pub fn resolve_tracks(tracks: &[EntityTrack], shape: (usize, usize, usize)) -> PanopticMap {
    let mut order: Vec<&EntityTrack> = tracks.iter().collect();
    // Paint weakest first so stronger tracks overwrite.
    order.sort_by(|a, b| a.mean_area().total_cmp(&b.mean_area()).then(b.id.cmp(&a.id)));
    let mut map = Array3::<u16>::zeros(shape);
    for t in order {
        for (&f, m) in &t.masks {
            if f >= shape.0 {
                continue;
            }
            let mut frame = map.index_axis_mut(Axis(0), f);
            frame.zip_mut_with(m, |px, &on| {
                if on {
                    *px = t.id;
                }
            });
        }
    }
    map
}

pub fn merge_and_resolve(
    tracks: Vec<EntityTrack>,
    shape: (usize, usize, usize),
    overlap_threshold: f64,
) -> PanopticMap {
    resolve_tracks(&merge_tracks(tracks, overlap_threshold), shape)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelingOutput {
    pub map: PanopticMap,
    pub tracks: Vec<TrackMeta>,
    pub warnings: Vec<TrackWarning>,
}

pub fn build_panoptic(
    video: &VideoTensor,
    seg: &dyn SegmenterBackend,
    feat: &dyn FeatureBackend,
    tracker: &dyn TrackerBackend,
    cfg: &LabelConfig,
) -> Result<LabelingOutput> {
    let (f, h, w, _) = video.dim();
    let prompts = grid_prompts(h, w, cfg.grid_stride);
    let wrap = |frame: usize| move |e: Error| Error::Pipeline { frame, source: Box::new(e) };

    let mut previous: Vec<EntityObservation> = Vec::new();
    let mut discovered: Vec<EntityObservation> = Vec::new();
    for fi in 0..f {
        let frame = video.index_axis(Axis(0), fi);
        let masks = seg.segment(fi, frame, &prompts).map_err(wrap(fi))?;
        if masks.len() != prompts.len() {
            return Err(wrap(fi)(Error::Shape(format!(
                "segmenter returned {} results for {} prompts",
                masks.len(),
                prompts.len()
            ))));
        }
        let mut current: Vec<EntityObservation> = Vec::new();
        for (&pt, mask) in prompts.iter().zip(masks) {
            let Some(mask) = mask else { continue };
            if mask.dim() != (h, w) {
                return Err(wrap(fi)(Error::Shape(format!("mask {:?} for frame {h}×{w}", mask.dim()))));
            }
            // Skip prompts already explained by a kept mask, and masks that
            // do not contain their own prompt.
            if !mask[pt] || current.iter().any(|o| o.mask[pt]) {
                continue;
            }
            let feature = feat.features(fi, frame, &mask).map_err(wrap(fi))?;
            current.push(EntityObservation {
                frame: fi,
                mask,
                feature,
                seed_point: pt,
            });
        }
        let result = match_entities(&current, &previous, cfg.match_threshold).map_err(wrap(fi))?;
        for &i in &result.new_entities {
            discovered.push(current[i].clone());
        }
        previous = current;
    }

    let (tracks, warnings) = track_entities(video, &discovered, tracker);
    let merged = merge_tracks(tracks, cfg.overlap_threshold);
    let map = resolve_tracks(&merged, (f, h, w));
    Ok(LabelingOutput {
        map,
        tracks: merged.iter().map(EntityTrack::meta).collect(),
        warnings,
    })
}

fn entity_mask(gt: &PanopticMap, frame: usize, id: u16) -> Mask {
    gt.index_axis(Axis(0), frame).mapv(|v| v == id)
}

/// Segmenter returning the ground-truth entity under each prompt, with an
/// optional ragged boundary: each edge pixel is dropped with probability
/// `boundary_noise`.
#[derive(Debug, Clone)]
pub struct OracleSegmenter {
    pub gt: PanopticMap,
    pub boundary_noise: f64,
    pub seed: u64,
}

impl SegmenterBackend for OracleSegmenter {
    fn segment(&self, frame_index: usize, _frame: ArrayView3<f32>, prompts: &[(usize, usize)]) -> Result<Vec<Option<Mask>>> {
        if frame_index >= self.gt.dim().0 {
            return Err(Error::Lookup(format!("no ground truth for frame {frame_index}")));
        }
        let mut cache: BTreeMap<u16, Mask> = BTreeMap::new();
        prompts
            .iter()
            .map(|&(r, c)| {
                let id = self.gt[[frame_index, r, c]];
                if id == 0 {
                    return Ok(None);
                }
                let mask = cache
                    .entry(id)
                    .or_insert_with(|| self.noisy_mask(frame_index, id))
                    .clone();
                Ok(Some(mask))
            })
            .collect()
    }
}

impl OracleSegmenter {
    fn noisy_mask(&self, frame: usize, id: u16) -> Mask {
        let mut mask = entity_mask(&self.gt, frame, id);
        if self.boundary_noise <= 0.0 {
            return mask;
        }
        let mut rng = seeded_rng(self.seed ^ ((frame as u64) << 20) ^ id as u64);
        let (h, w) = mask.dim();
        let orig = mask.clone();
        for y in 0..h {
            for x in 0..w {
                if !orig[[y, x]] {
                    continue;
                }
                let edge = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)].iter().any(|&(dy, dx)| {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 || !orig[[ny as usize, nx as usize]]
                });
                if edge && rng.random::<f64>() < self.boundary_noise {
                    mask[[y, x]] = false;
                }
            }
        }
        mask
    }
}

/// Feature = centered mean color `(rgb − ½)·2` and centroid in `[−1, 1]²`.
/// With `noise > 0`, adds Gaussian noise of `noise·‖f‖/√D` per component.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleFeatures {
    pub noise: f64,
    pub seed: u64,
}

pub const ORACLE_FEATURE_DIM: usize = 5;

impl FeatureBackend for OracleFeatures {
    fn features(&self, frame_index: usize, frame: ArrayView3<f32>, mask: &Mask) -> Result<Vec<f64>> {
        let (h, w, c) = frame.dim();
        if c != 3 || mask.dim() != (h, w) {
            return Err(Error::Shape(format!("frame {h}×{w}×{c} vs mask {:?}", mask.dim())));
        }
        let mut sum = [0.0f64; 5];
        let mut n = 0usize;
        for ((y, x), &on) in mask.indexed_iter() {
            if on {
                for ch in 0..3 {
                    sum[ch] += frame[[y, x, ch]] as f64;
                }
                sum[3] += y as f64 + 0.5;
                sum[4] += x as f64 + 0.5;
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Parameter("empty mask has no feature".into()));
        }
        let nf = n as f64;
        let mut f: Vec<f64> = vec![
            (sum[0] / nf - 0.5) * 2.0,
            (sum[1] / nf - 0.5) * 2.0,
            (sum[2] / nf - 0.5) * 2.0,
            sum[3] / nf / h as f64 * 2.0 - 1.0,
            sum[4] / nf / w as f64 * 2.0 - 1.0,
        ];
        if self.noise > 0.0 {
            let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            let std = self.noise * norm / (f.len() as f64).sqrt();
            let key = mask.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i as u64).sum::<u64>();
            let mut rng = seeded_rng(self.seed ^ ((frame_index as u64) << 32) ^ key);
            for v in f.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += std * z;
            }
        }
        Ok(f)
    }
}

/// Tracker returning the ground-truth masks of the entity under the seed.
#[derive(Debug, Clone)]
pub struct OracleTracker {
    pub gt: PanopticMap,
}

impl TrackerBackend for OracleTracker {
    fn track(&self, _video: &VideoTensor, first_frame: usize, seed_point: (usize, usize)) -> Result<BTreeMap<usize, Mask>> {
        let (f, h, w) = self.gt.dim();
        if first_frame >= f || seed_point.0 >= h || seed_point.1 >= w {
            return Err(Error::Lookup(format!("seed {seed_point:?} at frame {first_frame} out of range")));
        }
        let id = self.gt[[first_frame, seed_point.0, seed_point.1]];
        if id == 0 {
            return Err(Error::Lookup(format!("seed {seed_point:?} at frame {first_frame} is background")));
        }
        Ok((first_frame..f)
            .map(|fi| (fi, entity_mask(&self.gt, fi, id)))
            .filter(|(_, m)| m.iter().any(|&v| v))
            .collect())
    }
}

/// Agreement between a predicted labeling and ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelingScore {
    /// Mean over ground-truth entities of the video-level IoU with their
    /// best-overlapping predicted id.
    pub mean_iou: f64,
    /// Frame-to-frame changes of the predicted id covering each entity.
    pub identity_switches: usize,
}

pub fn score_labeling(pred: &PanopticMap, gt: &PanopticMap) -> Result<LabelingScore> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", pred.dim(), gt.dim())));
    }
    // overlap[(gt, pred)] and per-frame overlap for switches
    let mut overlap: BTreeMap<(u16, u16), usize> = BTreeMap::new();
    let mut gt_area: BTreeMap<u16, usize> = BTreeMap::new();
    let mut pred_area: BTreeMap<u16, usize> = BTreeMap::new();
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        if g != 0 {
            *gt_area.entry(g).or_default() += 1;
        }
        if p != 0 {
            *pred_area.entry(p).or_default() += 1;
        }
        if g != 0 && p != 0 {
            *overlap.entry((g, p)).or_default() += 1;
        }
    }
    let mut ious = Vec::new();
    for (&g, &ga) in &gt_area {
        let best = overlap
            .iter()
            .filter(|((gg, _), _)| *gg == g)
            .map(|(&(_, p), &inter)| inter as f64 / (ga + pred_area[&p] - inter) as f64)
            .fold(0.0, f64::max);
        ious.push(best);
    }
    let mean_iou = if ious.is_empty() {
        1.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    };

    let mut switches = 0;
    for &g in gt_area.keys() {
        let mut last: Option<u16> = None;
        for fi in 0..gt.dim().0 {
            let mut counts: BTreeMap<u16, usize> = BTreeMap::new();
            let gf = gt.index_axis(Axis(0), fi);
            let pf = pred.index_axis(Axis(0), fi);
            for (&gv, &pv) in gf.iter().zip(pf.iter()) {
                if gv == g {
                    *counts.entry(pv).or_default() += 1;
                }
            }
            let Some((&dominant, _)) = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))) else {
                continue;
            };
            if let Some(prev) = last {
                if prev != dominant {
                    switches += 1;
                }
            }
            last = Some(dominant);
        }
    }
    Ok(LabelingScore {
        mean_iou,
        identity_switches: switches,
    })
}

/// Labels a long video in overlapping clips and stitches ids across clips by
/// IoU over the shared frames. `backends` builds the three backends for a
/// frame range (in absolute frame numbers).
pub fn label_in_clips<S, Fe, T, B>(
    video: &VideoTensor,
    clip_len: usize,
    overlap: usize,
    cfg: &LabelConfig,
    mut backends: B,
) -> Result<PanopticMap>
where
    S: SegmenterBackend,
    Fe: FeatureBackend,
    T: TrackerBackend,
    B: FnMut(Range<usize>) -> (S, Fe, T),
{
    let (f, h, w, _) = video.dim();
    if clip_len == 0 || overlap >= clip_len {
        return Err(Error::Parameter(format!("clip length {clip_len} with overlap {overlap}")));
    }
    let mut out = Array3::<u16>::zeros((f, h, w));
    let mut next_id: u16 = 1;
    let mut start = 0;
    let mut labeled_until: usize = 0;
    loop {
        let end = (start + clip_len).min(f);
        let clip = video.slice(s![start..end, .., .., ..]).to_owned();
        let (seg, feat, tracker) = backends(start..end);
        let local = build_panoptic(&clip, &seg, &feat, &tracker, cfg)
            .map_err(|e| match e {
                Error::Pipeline { frame, source } => Error::Pipeline { frame: frame + start, source },
                other => other,
            })?
            .map;
        // Map local ids onto global ids via the already-labeled overlap.
        let shared = labeled_until.saturating_sub(start).min(end - start);
        let local_ids: BTreeSet<u16> = local.iter().copied().filter(|&v| v != 0).collect();
        let mut remap: BTreeMap<u16, u16> = BTreeMap::new();
        let mut taken: BTreeSet<u16> = BTreeSet::new();
        for &lid in &local_ids {
            let mut best = (0.0, 0u16);
            let mut counts: BTreeMap<u16, (usize, usize)> = BTreeMap::new();
            for k in 0..shared {
                for (&l, &g) in local.index_axis(Axis(0), k).iter().zip(out.index_axis(Axis(0), start + k).iter()) {
                    if l == lid && g != 0 {
                        counts.entry(g).or_default().0 += 1;
                    }
                }
            }
            for (&g, &(inter, _)) in &counts {
                let la = (0..shared).map(|k| local.index_axis(Axis(0), k).iter().filter(|&&v| v == lid).count()).sum::<usize>();
                let ga = (0..shared).map(|k| out.index_axis(Axis(0), start + k).iter().filter(|&&v| v == g).count()).sum::<usize>();
                let iou = inter as f64 / (la + ga - inter) as f64;
                if iou > best.0 && !taken.contains(&g) {
                    best = (iou, g);
                }
            }
            let gid = if best.0 >= 0.5 {
                best.1
            } else {
                let id = next_id;
                next_id += 1;
                id
            };
            taken.insert(gid);
            remap.insert(lid, gid);
            next_id = next_id.max(gid + 1);
        }
        for k in shared..(end - start) {
            let src = local.index_axis(Axis(0), k);
            let mut dst = out.index_axis_mut(Axis(0), start + k);
            dst.zip_mut_with(&src, |d, &l| *d = if l == 0 { 0 } else { remap[&l] });
        }
        labeled_until = end;
        if end == f {
            break;
        }
        start = end - overlap;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate_scene, SceneConfig};

    fn obs(feature: Vec<f64>) -> EntityObservation {
        EntityObservation {
            frame: 0,
            mask: Array2::from_elem((2, 2), true),
            feature,
            seed_point: (0, 0),
        }
    }

    #[test]
    fn grid_examples() {
        assert_eq!(grid_prompts(4, 6, 2), vec![(1, 1), (1, 3), (1, 5), (3, 1), (3, 3), (3, 5)]);
        assert_eq!(grid_prompts(5, 5, 9).len(), 1);
        assert_eq!(grid_prompts(5, 7, 40), vec![(2, 3)]);
        for (h, w, s) in [(7usize, 9usize, 3usize), (32, 48, 4), (10, 3, 5), (1, 1, 1)] {
            let off = s / 2;
            let want = (h - off).div_ceil(s) * (w - off).div_ceil(s);
            assert_eq!(grid_prompts(h, w, s).len(), want);
        }
    }

    #[test]
    fn matching_examples() {
        let r = match_entities(&[obs(vec![1.0, 0.0])], &[obs(vec![1.0, 0.0])], 0.3).unwrap();
        assert_eq!(r.matches.len(), 1);
        assert!(r.new_entities.is_empty());

        let r = match_entities(&[obs(vec![0.0, 1.0])], &[obs(vec![1.0, 0.0])], 0.3).unwrap();
        assert!(r.matches.is_empty());
        assert_eq!(r.new_entities, vec![0]);

        // Two candidates within threshold of one previous: the closer wins.
        let cur = [obs(vec![1.0, 0.2]), obs(vec![1.0, 0.05])];
        let r = match_entities(&cur, &[obs(vec![1.0, 0.0])], 0.3).unwrap();
        assert_eq!(r.matches.len(), 1);
        assert_eq!(r.matches[0].0, 1);
        assert_eq!(r.new_entities, vec![0]);

        assert!(matches!(
            match_entities(&[obs(vec![1.0])], &[obs(vec![1.0, 0.0])], 0.3),
            Err(Error::Shape(_))
        ));
    }

    fn track(id: u16, masks: Vec<(usize, Mask)>) -> EntityTrack {
        EntityTrack {
            id,
            first_frame: masks[0].0,
            seed_point: (0, 0),
            masks: masks.into_iter().collect(),
        }
    }

    fn rect(h: usize, w: usize, r: Range<usize>, c: Range<usize>) -> Mask {
        Array2::from_shape_fn((h, w), |(y, x)| r.contains(&y) && c.contains(&x))
    }

    #[test]
    fn disjoint_tracks_keep_their_ids() {
        let a = track(1, vec![(0, rect(4, 4, 0..2, 0..2))]);
        let b = track(2, vec![(0, rect(4, 4, 2..4, 2..4))]);
        let map = merge_and_resolve(vec![a, b], (1, 4, 4), 0.8);
        assert_eq!(map[[0, 0, 0]], 1);
        assert_eq!(map[[0, 3, 3]], 2);
        assert_eq!(map[[0, 0, 3]], 0);
    }

    #[test]
    fn heavy_overlap_merges_under_lower_id() {
        // 10 vs 18 pixels sharing 9: intersection / smaller = 0.9.
        let a = track(3, vec![(0, rect(10, 10, 0..1, 0..10))]);
        let b = track(5, vec![(0, rect(10, 10, 0..2, 1..10))]);
        assert!((track_overlap(&a, &b) - 0.9).abs() < 1e-12);
        let c = track(7, vec![(0, rect(10, 10, 0..1, 0..9)), (1, rect(10, 10, 0..1, 0..10))]);
        let d = track(8, vec![(0, rect(10, 10, 0..1, 1..10)), (1, rect(10, 10, 0..1, 1..10))]);
        // frame 0: 8/9, frame 1: 9/9 → mean 0.944
        assert!(track_overlap(&c, &d) >= 0.8);
        let map = merge_and_resolve(vec![a, b], (1, 10, 10), 0.8);
        let ids: BTreeSet<u16> = map.iter().copied().filter(|&v| v != 0).collect();
        assert_eq!(ids, BTreeSet::from([3]));
    }

    #[test]
    fn contested_pixel_goes_to_larger_track() {
        let big = track(2, vec![(0, rect(20, 20, 0..10, 0..10))]);
        let small = track(1, vec![(0, rect(20, 20, 9..12, 9..12))]);
        // overlap 1 pixel / 9 → no merge
        let map = merge_and_resolve(vec![small, big], (1, 20, 20), 0.8);
        assert_eq!(map[[0, 9, 9]], 2);
        assert_eq!(map[[0, 11, 11]], 1);
    }

    #[test]
    fn merging_is_idempotent() {
        let a = track(1, vec![(0, rect(6, 6, 0..3, 0..3))]);
        let b = track(2, vec![(0, rect(6, 6, 0..3, 0..2))]);
        let c = track(3, vec![(0, rect(6, 6, 4..6, 4..6))]);
        let once = merge_tracks(vec![a, b, c], 0.8);
        let twice = merge_tracks(once.clone(), 0.8);
        assert_eq!(once, twice);
        assert_eq!(resolve_tracks(&once, (1, 6, 6)), resolve_tracks(&twice, (1, 6, 6)));
    }

    #[test]
    fn empty_discovery_gives_no_tracks() {
        let gt = Array3::zeros((2, 4, 4));
        let video = VideoTensor::zeros((2, 4, 4, 3));
        let (tracks, warnings) = track_entities(&video, &[], &OracleTracker { gt: gt.clone() });
        assert!(tracks.is_empty() && warnings.is_empty());
    }

    #[test]
    fn background_seed_is_dropped_with_warning() {
        let gt = Array3::zeros((2, 4, 4));
        let video = VideoTensor::zeros((2, 4, 4, 3));
        let (tracks, warnings) = track_entities(&video, &[obs(vec![1.0])], &OracleTracker { gt: gt.clone() });
        assert!(tracks.is_empty());
        assert_eq!(warnings.len(), 1);
    }

    fn label(scene: &crate::synthetic::SceneSample, noise: f64) -> LabelingOutput {
        build_panoptic(
            &scene.video,
            &OracleSegmenter {
                gt: scene.panoptic.clone(),
                boundary_noise: 0.0,
                seed: 1,
            },
            &OracleFeatures { noise, seed: 2 },
            &OracleTracker {
                gt: scene.panoptic.clone(),
            },
            &LabelConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn oracle_pipeline_recovers_ground_truth() {
        for seed in 0..4 {
            let scene = generate_scene(&SceneConfig {
                seed,
                ..Default::default()
            })
            .unwrap();
            let out = label(&scene, 0.0);
            let score = score_labeling(&out.map, &scene.panoptic).unwrap();
            assert!(score.mean_iou >= 0.95, "seed {seed}: {score:?}");
            assert_eq!(score.identity_switches, 0);
            // every nonzero id is a surviving track
            let ids: BTreeSet<u16> = out.map.iter().copied().filter(|&v| v != 0).collect();
            let track_ids: BTreeSet<u16> = out.tracks.iter().map(|t| t.id).collect();
            assert!(ids.is_subset(&track_ids));
        }
    }

    #[test]
    fn small_feature_noise_changes_nothing() {
        let scene = generate_scene(&SceneConfig {
            seed: 11,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(label(&scene, 0.0).map, label(&scene, 0.01).map);
    }

    #[test]
    fn static_entity_is_one_track() {
        let mut gt = Array3::<u16>::zeros((5, 8, 8));
        gt.slice_mut(s![.., 2..6, 2..6]).fill(4);
        let video = gt.mapv(|v| if v == 0 { 0.1f32 } else { 0.8 }).insert_axis(Axis(3));
        let video = ndarray::concatenate(Axis(3), &[video.view(), video.view(), video.view()]).unwrap();
        let out = build_panoptic(
            &video,
            &OracleSegmenter {
                gt: gt.clone(),
                boundary_noise: 0.0,
                seed: 0,
            },
            &OracleFeatures::default(),
            &OracleTracker { gt: gt.clone() },
            &LabelConfig::default(),
        )
        .unwrap();
        assert_eq!(out.tracks.len(), 1);
        assert_eq!(out.tracks[0].first_frame, 0);
        let score = score_labeling(&out.map, &gt).unwrap();
        assert_eq!(score.mean_iou, 1.0);
        assert_eq!(score.identity_switches, 0);
    }

    #[test]
    fn backend_errors_carry_the_frame() {
        struct Failing;
        impl SegmenterBackend for Failing {
            fn segment(&self, frame_index: usize, _: ArrayView3<f32>, _: &[(usize, usize)]) -> Result<Vec<Option<Mask>>> {
                if frame_index == 2 {
                    Err(Error::Numeric("boom".into()))
                } else {
                    Ok(vec![None; 4])
                }
            }
        }
        let gt = Array3::zeros((4, 4, 4));
        let video = VideoTensor::zeros((4, 4, 4, 3));
        let err = build_panoptic(
            &video,
            &Failing,
            &OracleFeatures::default(),
            &OracleTracker { gt: gt.clone() },
            &LabelConfig {
                grid_stride: 2,
                ..Default::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Pipeline { frame: 2, .. }));
    }

    #[test]
    fn clips_stitch_into_consistent_ids() {
        let scene = generate_scene(&SceneConfig::at_fps(8, 4).unwrap()).unwrap();
        let gt = &scene.panoptic;
        let map = label_in_clips(&scene.video, 16, 8, &LabelConfig::default(), |range: Range<usize>| {
            // The oracles see only the clip's slice of the ground truth.
            let slice = gt.slice(s![range, .., ..]).to_owned();
            (
                OracleSegmenter {
                    gt: slice.clone(),
                    boundary_noise: 0.0,
                    seed: 0,
                },
                OracleFeatures::default(),
                OracleTracker { gt: slice },
            )
        })
        .unwrap();
        let score = score_labeling(&map, gt).unwrap();
        assert!(score.mean_iou >= 0.95, "{score:?}");
        assert_eq!(score.identity_switches, 0);
    }
}
