//! Video quality and detector-agreement metrics.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array2, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthetic::EntityKind;
use crate::{seeded_rng, PanopticMap, VideoTensor};

const SSIM_WINDOW: usize = 7;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean SSIM over all valid 7×7 windows of every frame and channel.
///
/// Window statistics use the population (1/N) moments.
pub fn ssim(x: &VideoTensor, y: &VideoTensor) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", x.dim(), y.dim())));
    }
    let (f, h, w, c) = x.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("frames {h}×{w} smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window")));
    }
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for fi in 0..f {
        for ch in 0..c {
            for top in 0..=h - SSIM_WINDOW {
                for left in 0..=w - SSIM_WINDOW {
                    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for r in top..top + SSIM_WINDOW {
                        for col in left..left + SSIM_WINDOW {
                            let a = x[[fi, r, col, ch]] as f64;
                            let b = y[[fi, r, col, ch]] as f64;
                            sx += a;
                            sy += b;
                            sxx += a * a;
                            syy += b * b;
                            sxy += a * b;
                        }
                    }
                    let (mx, my) = (sx / n, sy / n);
                    let vx = sxx / n - mx * mx;
                    let vy = syy / n - my * my;
                    let cxy = sxy / n - mx * my;
                    let num = (2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2);
                    let den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2);
                    total += num / den;
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::Shape("video has no frames".into()));
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major `D×D`.
    pub cov: Vec<f64>,
    pub count: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.cov)
    }
}

/// Sample mean and covariance (denominator `max(n − 1, 1)`).
pub fn gaussian_stats(features: &[Vec<f64>]) -> Result<GaussianStats> {
    let first = features
        .first()
        .ok_or_else(|| Error::Parameter("no feature vectors".into()))?;
    let d = first.len();
    if let Some(bad) = features.iter().find(|v| v.len() != d) {
        return Err(Error::Shape(format!("feature of length {} among length {d}", bad.len())));
    }
    let n = features.len();
    let mut mean = vec![0.0; d];
    for v in features {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    for v in features {
        for i in 0..d {
            let di = v[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += di * (v[j] - mean[j]);
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let c = cov[i * d + j] / denom;
            cov[i * d + j] = c;
            cov[j * d + i] = c;
        }
    }
    Ok(GaussianStats { mean, cov, count: n })
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()));
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2(Σa Σb)^½)`, clamped at 0.
///
/// `Tr((Σa Σb)^½)` is taken as the sum of square roots of the eigenvalues of
/// the symmetric `Σa^½ Σb Σa^½`, which has the same spectrum.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{}-D vs {}-D statistics", a.dim(), b.dim())));
    }
    let finite = |s: &GaussianStats| s.mean.iter().chain(&s.cov).all(|v| v.is_finite());
    if !finite(a) || !finite(b) {
        return Err(Error::Numeric("non-finite Gaussian statistics".into()));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let (ca, cb) = (a.cov_matrix(), b.cov_matrix());
    let sa = psd_sqrt(&ca);
    let inner = &sa * &cb * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|&l| l.max(0.0).sqrt())
        .sum();
    let d = mean_term + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
    if !d.is_finite() {
        return Err(Error::Numeric("Fréchet distance is not finite".into()));
    }
    Ok(d.max(0.0))
}

pub const FEATURE_DIM: usize = 64;
const PATCH: usize = 4;
const CLIP: usize = 3;

/// Fixed random convolutional projection used for both Fréchet analogs.
///
/// The video variant convolves `3×4×4` space-time blocks (spatial stride 4,
/// temporal stride 1); the frame variant uses `4×4` blocks of single frames.
/// Each filter response passes through `tanh` and is mean-pooled.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    video_filters: Array2<f64>,
    frame_filters: Array2<f64>,
}

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let vin = CLIP * PATCH * PATCH * 3;
        let fin = PATCH * PATCH * 3;
        let nv = Normal::new(0.0, 1.0 / (vin as f64).sqrt()).expect("finite std");
        let nf = Normal::new(0.0, 1.0 / (fin as f64).sqrt()).expect("finite std");
        Self {
            video_filters: Array2::from_shape_simple_fn((FEATURE_DIM, vin), || nv.sample(&mut rng)),
            frame_filters: Array2::from_shape_simple_fn((FEATURE_DIM, fin), || nf.sample(&mut rng)),
        }
    }

    fn patches(video: &VideoTensor, frames: std::ops::Range<usize>, clip: usize) -> Array2<f64> {
        let (_, h, w, _) = video.dim();
        let (hp, wp) = (h / PATCH, w / PATCH);
        let starts: Vec<usize> = if frames.end - frames.start >= clip {
            (frames.start..=frames.end - clip).collect()
        } else {
            vec![frames.start]
        };
        let width = clip * PATCH * PATCH * 3;
        let mut out = Array2::zeros((starts.len() * hp * wp, width));
        let mut row = 0;
        for &t0 in &starts {
            for i in 0..hp {
                for j in 0..wp {
                    let mut k = 0;
                    for dt in 0..clip {
                        let t = (t0 + dt).min(frames.end - 1);
                        for dy in 0..PATCH {
                            for dx in 0..PATCH {
                                for c in 0..3 {
                                    out[[row, k]] = video[[t, i * PATCH + dy, j * PATCH + dx, c]] as f64 - 0.5;
                                    k += 1;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        out
    }

    fn pooled(filters: &Array2<f64>, patches: &Array2<f64>) -> Vec<f64> {
        let resp = patches.dot(&filters.t()).mapv(f64::tanh);
        resp.mean_axis(Axis(0)).expect("non-empty").to_vec()
    }

    fn check(video: &VideoTensor) -> Result<()> {
        let (f, h, w, c) = video.dim();
        if f == 0 || c != 3 || h < PATCH || w < PATCH {
            return Err(Error::Shape(format!("cannot featurize a {f}×{h}×{w}×{c} video")));
        }
        Ok(())
    }

    /// One 64-D vector per video.
    pub fn video_features(&self, video: &VideoTensor) -> Result<Vec<f64>> {
        Self::check(video)?;
        let p = Self::patches(video, 0..video.dim().0, CLIP);
        Ok(Self::pooled(&self.video_filters, &p))
    }

    /// One 64-D vector per frame.
    pub fn frame_features(&self, video: &VideoTensor) -> Result<Vec<Vec<f64>>> {
        Self::check(video)?;
        Ok((0..video.dim().0)
            .map(|t| Self::pooled(&self.frame_filters, &Self::patches(video, t..t + 1, 1)))
            .collect())
    }
}

/// Half-open box; `bottom > top`, `right > left`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Box2 {
    pub frame: usize,
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
    pub entity_id: u16,
    pub kind: EntityKind,
}

impl Box2 {
    pub fn area(&self) -> usize {
        (self.bottom - self.top) * (self.right - self.left)
    }
}

pub fn iou(a: &Box2, b: &Box2) -> f64 {
    let t = a.top.max(b.top);
    let l = a.left.max(b.left);
    let bo = a.bottom.min(b.bottom);
    let r = a.right.min(b.right);
    if bo <= t || r <= l {
        return 0.0;
    }
    let inter = ((bo - t) * (r - l)) as f64;
    inter / ((a.area() + b.area()) as f64 - inter)
}

/// Tight boxes of tool entities, per frame in id order. Ids missing from
/// `kinds` are skipped.
pub fn boxes_from_panoptic(map: &PanopticMap, kinds: &BTreeMap<u16, EntityKind>) -> Vec<Box2> {
    let (f, _, _) = map.dim();
    let mut out = Vec::new();
    for fi in 0..f {
        let mut extent: BTreeMap<u16, (usize, usize, usize, usize)> = BTreeMap::new();
        for ((y, x), &id) in map.index_axis(Axis(0), fi).indexed_iter() {
            if kinds.get(&id) != Some(&EntityKind::Tool) {
                continue;
            }
            let e = extent.entry(id).or_insert((y, x, y + 1, x + 1));
            e.0 = e.0.min(y);
            e.1 = e.1.min(x);
            e.2 = e.2.max(y + 1);
            e.3 = e.3.max(x + 1);
        }
        for (id, (top, left, bottom, right)) in extent {
            out.push(Box2 {
                frame: fi,
                top,
                left,
                bottom,
                right,
                entity_id: id,
                kind: EntityKind::Tool,
            });
        }
    }
    out
}

/// Counts that pool across videos before turning into rates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AgreementCounts {
    pub total_real: usize,
    pub total_gen: usize,
    pub matched: usize,
    pub iou_sum: f64,
}

impl AgreementCounts {
    pub fn add(&mut self, other: &AgreementCounts) {
        self.total_real += other.total_real;
        self.total_gen += other.total_gen;
        self.matched += other.matched;
        self.iou_sum += other.iou_sum;
    }

    pub fn rates(&self) -> Agreement {
        let rate = |m: usize, t: usize| if t == 0 { 1.0 } else { m as f64 / t as f64 };
        Agreement {
            hr_real: rate(self.matched, self.total_real),
            hr_gen: rate(self.matched, self.total_gen),
            miou: if self.matched == 0 {
                0.0
            } else {
                self.iou_sum / self.matched as f64
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub hr_real: f64,
    pub hr_gen: f64,
    pub miou: f64,
}

/// Largest frame-local problem solved exactly (bitmask over the smaller side).
const MAX_EXACT_SIDE: usize = 16;

/// One-to-one matching of `real` and `gen` boxes within a frame, accepting
/// pairs at or above `threshold`. Maximizes the number of pairs, then their
/// summed IoU. Returns `(real index, gen index, iou)`.
pub fn match_boxes(real: &[Box2], gen: &[Box2], threshold: f64) -> Vec<(usize, usize, f64)> {
    let (n, m) = (real.len(), gen.len());
    if n == 0 || m == 0 {
        return Vec::new();
    }
    let transpose = m > n;
    let (rows, cols) = if transpose { (m, n) } else { (n, m) };
    let score = |r: usize, c: usize| {
        let (i, j) = if transpose { (c, r) } else { (r, c) };
        let v = iou(&real[i], &gen[j]);
        (v >= threshold).then_some(v)
    };
    if cols > MAX_EXACT_SIDE {
        log::warn!("box matching with {cols} candidates per side falls back to greedy");
        return greedy_boxes(real, gen, threshold);
    }
    // best[r][mask]: best (pairs, iou sum) using rows r.. with columns in
    // `mask` already taken.
    let states = 1usize << cols;
    let mut best = vec![vec![(0usize, 0.0f64); states]; rows + 1];
    for r in (0..rows).rev() {
        for mask in 0..states {
            let mut b = best[r + 1][mask];
            for c in 0..cols {
                if mask & (1 << c) != 0 {
                    continue;
                }
                if let Some(v) = score(r, c) {
                    let next = best[r + 1][mask | (1 << c)];
                    let cand = (next.0 + 1, next.1 + v);
                    if cand.0 > b.0 || (cand.0 == b.0 && cand.1 > b.1) {
                        b = cand;
                    }
                }
            }
            best[r][mask] = b;
        }
    }
    // Walk the table to recover the assignment.
    let mut out = Vec::new();
    let mut mask = 0usize;
    for r in 0..rows {
        let target = best[r][mask];
        if best[r + 1][mask] == target {
            continue;
        }
        for c in 0..cols {
            if mask & (1 << c) != 0 {
                continue;
            }
            if let Some(v) = score(r, c) {
                let next = best[r + 1][mask | (1 << c)];
                if (next.0 + 1, next.1 + v) == target {
                    let (i, j) = if transpose { (c, r) } else { (r, c) };
                    out.push((i, j, v));
                    mask |= 1 << c;
                    break;
                }
            }
        }
    }
    out.sort_by_key(|&(i, j, _)| (i, j));
    out
}

fn greedy_boxes(real: &[Box2], gen: &[Box2], threshold: f64) -> Vec<(usize, usize, f64)> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, r) in real.iter().enumerate() {
        for (j, g) in gen.iter().enumerate() {
            let v = iou(r, g);
            if v >= threshold {
                pairs.push((v, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut ur, mut ug) = (vec![false; real.len()], vec![false; gen.len()]);
    let mut out = Vec::new();
    for (v, i, j) in pairs {
        if !ur[i] && !ug[j] {
            ur[i] = true;
            ug[j] = true;
            out.push((i, j, v));
        }
    }
    out
}

pub fn agreement_counts(real: &[Box2], gen: &[Box2], threshold: f64) -> AgreementCounts {
    let mut by_frame: BTreeMap<usize, (Vec<Box2>, Vec<Box2>)> = BTreeMap::new();
    for b in real {
        by_frame.entry(b.frame).or_default().0.push(*b);
    }
    for b in gen {
        by_frame.entry(b.frame).or_default().1.push(*b);
    }
    let mut counts = AgreementCounts::default();
    for (r, g) in by_frame.values() {
        let pairs = match_boxes(r, g, threshold);
        counts.total_real += r.len();
        counts.total_gen += g.len();
        counts.matched += pairs.len();
        counts.iou_sum += pairs.iter().map(|p| p.2).sum::<f64>();
    }
    counts
}

/// Hit rates and mean IoU of matched pairs; empty sides count as rate 1.
pub fn detector_agreement(real: &[Box2], gen: &[Box2], threshold: f64) -> Agreement {
    agreement_counts(real, gen, threshold).rates()
}

/// Mean color of every id in `map` (background included).
pub fn entity_mean_colors(video: &VideoTensor, map: &PanopticMap) -> Result<BTreeMap<u16, [f32; 3]>> {
    let (f, h, w, _) = video.dim();
    if map.dim() != (f, h, w) {
        return Err(Error::Shape(format!("video {:?} vs map {:?}", video.dim(), map.dim())));
    }
    let mut sums: BTreeMap<u16, ([f64; 3], usize)> = BTreeMap::new();
    for ((fi, y, x), &id) in map.indexed_iter() {
        let e = sums.entry(id).or_default();
        for c in 0..3 {
            e.0[c] += video[[fi, y, x, c]] as f64;
        }
        e.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(id, (s, n))| (id, s.map(|v| (v / n as f64) as f32)))
        .collect())
}

/// Detector stand-in for generated videos: label every pixel with the
/// reference entity whose mean color is nearest, then clear 4-connected
/// specks smaller than [`MIN_COMPONENT_AREA`]. Larger fragments are kept
/// since occluded tools legitimately split in two.
pub fn pseudo_panoptic(video: &VideoTensor, reference: &BTreeMap<u16, [f32; 3]>) -> Result<PanopticMap> {
    if reference.is_empty() {
        return Err(Error::Parameter("no reference colors".into()));
    }
    let (f, h, w, c) = video.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected RGB video, got {c} channels")));
    }
    let mut map = PanopticMap::from_shape_fn((f, h, w), |(fi, y, x)| {
        let mut best = (f32::INFINITY, 0u16);
        for (&eid, rc) in reference {
            let d: f32 = (0..3).map(|ch| (video[[fi, y, x, ch]] - rc[ch]).powi(2)).sum();
            if d < best.0 {
                best = (d, eid);
            }
        }
        best.1
    });
    for fi in 0..f {
        let mut frame = map.index_axis_mut(Axis(0), fi);
        drop_specks(&mut frame);
    }
    Ok(map)
}

pub const MIN_COMPONENT_AREA: usize = 3;
fn drop_specks(frame: &mut ndarray::ArrayViewMut2<u16>) {
    let (h, w) = frame.dim();
    let mut label = vec![usize::MAX; h * w];
    let mut comps: Vec<(u16, usize)> = Vec::new();
    for start in 0..h * w {
        let id = frame[[start / w, start % w]];
        if id == 0 || label[start] != usize::MAX {
            continue;
        }
        let cid = comps.len();
        let mut stack = vec![start];
        label[start] = cid;
        let mut size = 0;
        while let Some(p) = stack.pop() {
            size += 1;
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if label[q] == usize::MAX && frame[[q / w, q % w]] == id {
                    label[q] = cid;
                    stack.push(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
        comps.push((id, size));
    }
    for p in 0..h * w {
        if frame[[p / w, p % w]] != 0 && comps[label[p]].1 < MIN_COMPONENT_AREA {
            frame[[p / w, p % w]] = 0;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fvd_analog: f64,
    pub fid_analog: f64,
    pub ssim: f64,
    pub hr_real: f64,
    pub hr_gen: f64,
    pub miou: f64,
    pub n_samples: usize,
}

/// One real/generated pair plus the real sample's entity kinds.
pub struct EvalPair<'a> {
    pub real: &'a VideoTensor,
    pub real_map: &'a PanopticMap,
    pub generated: &'a VideoTensor,
    pub kinds: &'a BTreeMap<u16, EntityKind>,
}

pub const IOU_THRESHOLD: f64 = 0.5;
pub const FEATURE_SEED: u64 = 0x00fe_a7u64;

/// Full report over paired samples; pairs are consumed in the given order,
/// so callers sort them by sample id for order-independent output.
pub fn evaluate_pairs(pairs: &[EvalPair]) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::Parameter("nothing to evaluate".into()));
    }
    let extractor = FeatureExtractor::new(FEATURE_SEED);
    let (mut rv, mut gv, mut rf, mut gf) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut ssim_sum = 0.0;
    let mut counts = AgreementCounts::default();
    for p in pairs {
        ssim_sum += ssim(p.real, p.generated)?;
        rv.push(extractor.video_features(p.real)?);
        gv.push(extractor.video_features(p.generated)?);
        rf.extend(extractor.frame_features(p.real)?);
        gf.extend(extractor.frame_features(p.generated)?);
        let real_boxes = boxes_from_panoptic(p.real_map, p.kinds);
        let gen_map = if p.real == p.generated {
            p.real_map.clone()
        } else {
            let reference = entity_mean_colors(p.real, p.real_map)?;
            pseudo_panoptic(p.generated, &reference)?
        };
        let gen_boxes = boxes_from_panoptic(&gen_map, p.kinds);
        counts.add(&agreement_counts(&real_boxes, &gen_boxes, IOU_THRESHOLD));
    }
    let rates = counts.rates();
    Ok(MetricReport {
        fvd_analog: frechet_distance(&gaussian_stats(&rv)?, &gaussian_stats(&gv)?)?,
        fid_analog: frechet_distance(&gaussian_stats(&rf)?, &gaussian_stats(&gf)?)?,
        ssim: ssim_sum / pairs.len() as f64,
        hr_real: rates.hr_real,
        hr_gen: rates.hr_gen,
        miou: rates.miou,
        n_samples: pairs.len(),
    })
}
