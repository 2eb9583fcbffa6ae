//! Graph builders shared by both denoiser modes.

use ndarray::Array2;

use super::params::ParamStore;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// `x · W + b` with parameters `{name}.w`, `{name}.b`.
pub(crate) fn linear(g: &mut Graph, params: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(&format!("{name}.w"), params.get(&format!("{name}.w"))?);
    let b = g.param(&format!("{name}.b"), params.get(&format!("{name}.b"))?);
    let y = g.matmul(x, w);
    Ok(g.add_row(y, b))
}

/// Projection matrices of one attention layer (no biases).
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

impl AttentionWeights {
    pub(crate) fn from_params(g: &mut Graph, params: &ParamStore, prefix: &str) -> Result<Self> {
        let mut get = |n: &str| -> Result<Var> {
            let name = format!("{prefix}.{n}");
            Ok(g.param(&name, params.get(&name)?))
        };
        Ok(Self {
            wq: get("wq")?,
            wk: get("wk")?,
            wv: get("wv")?,
            wo: get("wo")?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub main: Var,
    pub seg: Option<Var>,
    /// Per-head attention probabilities over the concatenated stream.
    pub probs: Vec<Var>,
}

/// Joint attention over `[H ; H_seg]`, split back at the main stream length.
///
/// Rows are tokens, so `Q = H_cat · W_q` is the row-major form of `W_q H_cat`.
pub fn joint_attention(
    g: &mut Graph,
    main: Var,
    seg: Option<Var>,
    w: &AttentionWeights,
    heads: usize,
) -> Result<AttentionOutput> {
    let (t_main, dim) = g.shape(main);
    if let Some(s) = seg {
        if g.shape(s).1 != dim {
            return Err(Error::Shape(format!(
                "main stream has {dim} columns, seg stream {}",
                g.shape(s).1
            )));
        }
    }
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Shape(format!("{dim} columns cannot split into {heads} heads")));
    }
    let h_cat = match seg {
        Some(s) if g.shape(s).0 > 0 => g.concat_rows(&[main, s]),
        _ => main,
    };
    let total = g.shape(h_cat).0;
    let q = g.matmul(h_cat, w.wq);
    let k = g.matmul(h_cat, w.wk);
    let v = g.matmul(h_cat, w.wv);
    let dk = dim / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dk, (h + 1) * dk);
        let qh = if heads == 1 { q } else { g.slice_cols(q, lo, hi) };
        let kh = if heads == 1 { k } else { g.slice_cols(k, lo, hi) };
        let vh = if heads == 1 { v } else { g.slice_cols(v, lo, hi) };
        let scores = g.matmul_t(qh, kh);
        let scores = g.scale(scores, scale);
        let p = g.softmax_rows(scores);
        probs.push(p);
        outs.push(g.matmul(p, vh));
    }
    let z = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
    let o = g.matmul(z, w.wo);
    let (main_out, seg_out) = if total > t_main {
        (g.slice_rows(o, 0, t_main), Some(g.slice_rows(o, t_main, total)))
    } else {
        (o, seg.map(|s| s))
    };
    Ok(AttentionOutput {
        main: main_out,
        seg: seg_out,
        probs,
    })
}

/// Gather index turning `(F·H·W)×C` rows into `(F·H/p·W/p)×(p·p·C)` patches.
pub(crate) fn patchify_index(f: usize, h: usize, w: usize, c: usize, p: usize) -> Vec<u32> {
    let (hp, wp) = (h / p, w / p);
    let mut idx = Vec::with_capacity(f * h * w * c);
    for fi in 0..f {
        for i in 0..hp {
            for j in 0..wp {
                for dy in 0..p {
                    for dx in 0..p {
                        let row = (fi * h + i * p + dy) * w + j * p + dx;
                        for ch in 0..c {
                            idx.push((row * c + ch) as u32);
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Inverse of [`patchify_index`].
pub(crate) fn unpatchify_index(f: usize, h: usize, w: usize, c: usize, p: usize) -> Vec<u32> {
    let (hp, wp) = (h / p, w / p);
    let mut idx = vec![0u32; f * h * w * c];
    let mut src = 0u32;
    for fi in 0..f {
        for i in 0..hp {
            for j in 0..wp {
                for dy in 0..p {
                    for dx in 0..p {
                        let row = (fi * h + i * p + dy) * w + j * p + dx;
                        for ch in 0..c {
                            idx[row * c + ch] = src;
                            src += 1;
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Concatenates each row with the same row one frame earlier and one frame
/// later (edge frames replicated): `(F·S)×C → (F·S)×3C`.
pub(crate) fn temporal_neighbors_index(frames: usize, per_frame: usize, c: usize) -> Vec<u32> {
    let mut idx = Vec::with_capacity(frames * per_frame * 3 * c);
    for fi in 0..frames {
        let prev = fi.saturating_sub(1);
        let next = (fi + 1).min(frames - 1);
        for s in 0..per_frame {
            for src_frame in [prev, fi, next] {
                let row = src_frame * per_frame + s;
                for ch in 0..c {
                    idx.push((row * c + ch) as u32);
                }
            }
        }
    }
    idx
}

/// Kernel-3 convolution over the leading (frame) axis with replicated edges.
pub(crate) fn temporal_conv(
    g: &mut Graph,
    params: &ParamStore,
    name: &str,
    x: Var,
    frames: usize,
) -> Result<Var> {
    let (rows, c) = g.shape(x);
    let per_frame = rows / frames;
    let stacked = g.gather(
        x,
        temporal_neighbors_index(frames, per_frame, c),
        (rows, 3 * c),
    );
    linear(g, params, name, stacked)
}

pub(crate) fn constant_row(g: &mut Graph, row: ndarray::Array1<f64>) -> Var {
    let n = row.len();
    g.constant(row.into_shape_with_order((1, n)).expect("row reshape"))
}

pub(crate) fn zeros(g: &mut Graph, rows: usize, cols: usize) -> Var {
    g.constant(Array2::zeros((rows, cols)))
}
