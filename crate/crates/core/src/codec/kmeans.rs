//! K-Means over RGB colors and elbow-based selection of K.

use rand::seq::index::sample;
use rand::Rng as _;

use super::palette::{color_dist2, Palette};
use crate::error::{Error, Result};
use crate::{seeded_rng, PanopticMap, VideoTensor};

pub const MAX_ITERS: usize = 100;
pub const SHIFT_TOL: f32 = 1e-4;
pub const MAX_FIT_POINTS: usize = 65_536;
/// Mean squared deviation from a single centroid below which the input is
/// treated as one color.
pub const SINGLE_COLOR_FLOOR: f64 = 0.05 * 0.05;
/// k-means++ restarts per K; the lowest-inertia run is kept.
pub const RESTARTS: u64 = 8;

/// Result of one K-Means run.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centroids: Vec<[f32; 3]>,
    pub inertia: f64,
    pub iterations: usize,
}

/// Returns the K (1-based) maximizing `I[K−1] − 2·I[K] + I[K+1]` over interior
/// points, smallest K on ties.
pub fn elbow_k(inertias: &[f64]) -> Result<usize> {
    if inertias.len() < 3 {
        return Err(Error::Parameter(format!(
            "elbow needs at least 3 inertias, got {}",
            inertias.len()
        )));
    }
    let mut best = (2, f64::NEG_INFINITY);
    for k in 2..inertias.len() {
        let d2 = inertias[k - 2] - 2.0 * inertias[k - 1] + inertias[k];
        if d2 > best.1 {
            best = (k, d2);
        }
    }
    Ok(best.0)
}

fn nearest(centroids: &[[f32; 3]], p: &[f32; 3]) -> (usize, f32) {
    let mut best = (0, f32::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = color_dist2(c, p);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Lloyd iterations from a k-means++ start.
pub fn kmeans_fit(points: &[[f32; 3]], k: usize, seed: u64) -> Result<KMeansFit> {
    if points.is_empty() {
        return Err(Error::Parameter("no points to cluster".into()));
    }
    if k == 0 {
        return Err(Error::Parameter("k must be >= 1".into()));
    }
    let mut rng = seeded_rng(seed);
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..points.len())]);
    let mut d2: Vec<f32> = points.iter().map(|p| color_dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().map(|&v| v as f64).sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..points.len())
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &v) in d2.iter().enumerate() {
                target -= v as f64;
                if target < 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        let c = points[pick];
        centroids.push(c);
        for (p, d) in points.iter().zip(d2.iter_mut()) {
            *d = d.min(color_dist2(p, &c));
        }
    }

    let mut iterations = 0;
    let mut sums = vec![[0f64; 3]; k];
    let mut counts = vec![0usize; k];
    while iterations < MAX_ITERS {
        iterations += 1;
        sums.iter_mut().for_each(|s| *s = [0.0; 3]);
        counts.iter_mut().for_each(|c| *c = 0);
        for p in points {
            let (i, _) = nearest(&centroids, p);
            counts[i] += 1;
            for ch in 0..3 {
                sums[i][ch] += p[ch] as f64;
            }
        }
        let mut shift = 0f32;
        for i in 0..k {
            // An empty cluster keeps its centroid.
            if counts[i] == 0 {
                continue;
            }
            let n = counts[i] as f64;
            let next = [
                (sums[i][0] / n) as f32,
                (sums[i][1] / n) as f32,
                (sums[i][2] / n) as f32,
            ];
            shift = shift.max(color_dist2(&next, &centroids[i]).sqrt());
            centroids[i] = next;
        }
        if shift < SHIFT_TOL {
            break;
        }
    }
    let inertia = points.iter().map(|p| nearest(&centroids, p).1 as f64).sum();
    Ok(KMeansFit {
        centroids,
        inertia,
        iterations,
    })
}

/// Clusters the colors of `colors`, picks K with [`elbow_k`] and returns an
/// integer map plus a palette of cluster centres.
///
/// K is searched over `1..=k_max`; inertias are computed up to `k_max + 1` so
/// that `k_max` itself is an interior point of the elbow search. K = 1 is
/// chosen when the data sits within [`SINGLE_COLOR_FLOOR`] of one centre.
/// The cluster nearest to black becomes id 0; the rest are numbered from 1 in
/// order of their centroid's distance from black.
pub fn kmeans_discretize(colors: &VideoTensor, k_max: usize, seed: u64) -> Result<(PanopticMap, Palette)> {
    if k_max < 2 {
        return Err(Error::Parameter("k_max must be >= 2".into()));
    }
    let (f, h, w, c) = colors.dim();
    if c != 3 {
        return Err(Error::Parameter(format!("expected RGB input, got {c} channels")));
    }
    let n = f * h * w;
    if n == 0 {
        return Err(Error::Parameter("empty input".into()));
    }
    let all: Vec<[f32; 3]> = colors
        .as_standard_layout()
        .as_slice()
        .expect("standard layout")
        .chunks_exact(3)
        .map(|p| [p[0], p[1], p[2]])
        .collect();
    let fit_points: Vec<[f32; 3]> = if n > MAX_FIT_POINTS {
        let mut idx = sample(&mut seeded_rng(seed ^ 0x5eed), n, MAX_FIT_POINTS).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| all[i]).collect()
    } else {
        all.clone()
    };

    let mut fits: Vec<KMeansFit> = Vec::with_capacity(k_max + 1);
    for k in 1..=k_max + 1 {
        let mut best: Option<KMeansFit> = None;
        for r in 0..RESTARTS {
            let run_seed = seed.wrapping_mul(0x9e37_79b9).wrapping_add(k as u64 * RESTARTS + r);
            let fit = kmeans_fit(&fit_points, k, run_seed)?;
            if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
                best = Some(fit);
            }
        }
        fits.push(best.expect("at least one restart"));
    }
    let single = fits[0].inertia / fit_points.len() as f64 <= SINGLE_COLOR_FLOOR;
    let k = if single {
        1
    } else {
        // The elbow is taken on log inertia so that a drop onto the noise
        // floor outweighs larger absolute drops between coarse clusterings.
        let floor = fits[0].inertia * 1e-12 + f64::MIN_POSITIVE;
        let mut running = f64::INFINITY;
        let logs: Vec<f64> = fits
            .iter()
            .map(|f| {
                running = running.min(f.inertia);
                (running + floor).ln()
            })
            .collect();
        elbow_k(&logs)?
    };
    let centroids = &fits[k - 1].centroids;

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        color_dist2(&centroids[a], &[0.0; 3])
            .total_cmp(&color_dist2(&centroids[b], &[0.0; 3]))
            .then(a.cmp(&b))
    });
    let mut id_of = vec![0u16; k];
    let mut palette = Palette::new();
    for (rank, &cluster) in order.iter().enumerate() {
        id_of[cluster] = rank as u16;
        palette.insert(rank as u16, centroids[cluster]);
    }
    let labels: Vec<u16> = all.iter().map(|p| id_of[nearest(centroids, p).0]).collect();
    let map = PanopticMap::from_shape_vec((f, h, w), labels).expect("pixel count matches");
    Ok((map, palette))
}
