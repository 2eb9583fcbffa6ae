use std::collections::BTreeMap;

use ndarray::{concatenate, Array1, Array2, Array4, Axis};
use rand_distr::{Distribution, Normal};

use super::embed::{sinusoidal_embed, spatial_embed, text_table};
use super::layers::{
    constant_row, joint_attention, linear, patchify_index, temporal_conv, unpatchify_index, zeros,
    AttentionWeights,
};
use super::params::ParamStore;
use super::{Conditioning, ConditioningBundle, DiTConfig, DitMode, LabelProvider, SegInput, SegTokens};
use crate::autodiff::{Graph, Var};
use crate::codec::repeat_frames;
use crate::error::{Error, Result};
use crate::{seeded_rng, VideoTensor};

/// Seg-encoder spatial reduction (three stride-2 blocks).
const SEG_DOWNSAMPLE: usize = 8;

/// Human-readable label names, used to build the frozen text tables.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelText {
    pub phases: Vec<String>,
    pub triplets: Vec<String>,
}

impl LabelText {
    fn placeholder(cfg: &DiTConfig) -> Self {
        Self {
            phases: (0..cfg.phase_vocab).map(|i| format!("phase {i}")).collect(),
            triplets: (0..cfg.triplet_vocab).map(|i| format!("triplet {i}")).collect(),
        }
    }
}

/// The diffusion transformer: trainable parameters plus frozen label tables.
#[derive(Debug, Clone, PartialEq)]
pub struct Dit {
    config: DiTConfig,
    params: ParamStore,
    frozen: BTreeMap<String, Array2<f64>>,
}

struct Built {
    out: Var,
    probs: Vec<Var>,
    shape: [usize; 4],
}

impl Dit {
    pub fn new(config: DiTConfig, seed: u64, text: Option<&LabelText>) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let mut p = ParamStore::new();
        let (d, cd, ld) = (config.embed_dim, config.cond_dim, config.label_dim);
        let tp2 = config.token_patch * config.token_patch;

        p.init_linear("x_embed", tp2 * config.input_channels(), d, 1.0, &mut rng);
        p.init_linear("t_embed1", d, cd, 1.0, &mut rng);
        p.init_linear("t_embed2", cd, cd, 1.0, &mut rng);

        let mut frozen = BTreeMap::new();
        if config.mode == DitMode::S2m && config.use_labels {
            match config.provider {
                LabelProvider::LabelEmbedding => {
                    let normal = Normal::new(0.0, 1.0).expect("unit normal");
                    for (name, vocab) in [("phase_table", config.phase_vocab), ("triplet_table", config.triplet_vocab)] {
                        p.insert(name, Array2::from_shape_simple_fn((vocab, ld), || normal.sample(&mut rng)));
                    }
                }
                LabelProvider::PretrainedTable => {
                    let fallback = LabelText::placeholder(&config);
                    let text = text.unwrap_or(&fallback);
                    if text.phases.len() != config.phase_vocab || text.triplets.len() != config.triplet_vocab {
                        return Err(Error::Parameter(format!(
                            "label text has {} phases and {} triplets, vocabularies are {} and {}",
                            text.phases.len(),
                            text.triplets.len(),
                            config.phase_vocab,
                            config.triplet_vocab
                        )));
                    }
                    frozen.insert("phase_table".into(), text_table(&text.phases, ld, seed ^ 0x5eed));
                    frozen.insert("triplet_table".into(), text_table(&text.triplets, ld, seed ^ 0x5eed));
                }
            }
            p.init_linear("phase_conv", 3 * ld, ld, 1.0, &mut rng);
            p.init_linear("triplet_conv", 3 * ld, ld, 1.0, &mut rng);
            p.init_linear("label_proj", 2 * ld, cd, 1.0, &mut rng);
        }

        if config.mode == DitMode::M2v {
            let widths = [3, config.seg_channels[0], config.seg_channels[1], d];
            for b in 0..3 {
                p.init_linear(&format!("seg{b}.down"), 4 * widths[b], widths[b + 1], 1.0, &mut rng);
                p.init_linear(&format!("seg{b}.tconv"), 3 * widths[b + 1], widths[b + 1], 0.5, &mut rng);
            }
        }

        let hidden = config.mlp_ratio * d;
        for b in 0..config.num_blocks {
            p.init_zero_linear(&format!("block{b}.ada"), 2 * cd, 6 * d);
            for w in ["wq", "wk", "wv", "wo"] {
                let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("finite std");
                p.insert(
                    format!("block{b}.attn.{w}"),
                    Array2::from_shape_simple_fn((d, d), || normal.sample(&mut rng)),
                );
            }
            p.init_linear(&format!("block{b}.mlp1"), d, hidden, 1.0, &mut rng);
            p.init_linear(&format!("block{b}.mlp2"), hidden, d, 1.0, &mut rng);
        }
        // Final modulation: shift, scale, then per-component gains for a
        // linear shortcut that reads the noisy latent and the conditioning
        // latents directly, bypassing the embed_dim bottleneck. The shortcut
        // basis and conditioning map are frozen (identity and zero here, fit
        // from data by `fit_linear_shortcut`); zero gains keep the initial
        // output at zero.
        let n = tp2 * config.latent_channels;
        let m = tp2 * (config.input_channels() - config.latent_channels);
        p.init_zero_linear("final.ada", 2 * cd, 2 * d + 2 * n);
        frozen.insert("shortcut.basis".into(), Array2::eye(n));
        frozen.insert("shortcut.cond".into(), Array2::zeros((m, n)));
        if config.mode == DitMode::M2v {
            // Seg tokens at each latent token's position, read into the
            // shortcut's conditioning coordinates.
            p.init_zero_linear("seg_read", d, n);
        }
        p.init_zero_linear("final.out", d, tp2 * config.latent_channels);

        Ok(Self {
            config,
            params: p,
            frozen,
        })
    }

    /// Rebuilds a model from stored parts, checking every expected tensor.
    pub fn from_parts(
        config: DiTConfig,
        params: ParamStore,
        frozen: BTreeMap<String, Array2<f64>>,
    ) -> Result<Self> {
        let template = Self::new(config.clone(), 0, None)?;
        for (name, value) in template.params.iter() {
            let got = params.get(name)?;
            if got.dim() != value.dim() {
                return Err(Error::Shape(format!(
                    "parameter {name} is {:?}, expected {:?}",
                    got.dim(),
                    value.dim()
                )));
            }
        }
        if params.len() != template.params.len() {
            return Err(Error::Shape(format!(
                "{} parameters stored, model has {}",
                params.len(),
                template.params.len()
            )));
        }
        for (name, value) in &template.frozen {
            match frozen.get(name) {
                Some(f) if f.dim() == value.dim() => {}
                _ => return Err(Error::Lookup(format!("missing frozen table {name}"))),
            }
        }
        Ok(Self {
            config,
            params,
            frozen,
        })
    }

    pub fn config(&self) -> &DiTConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn frozen(&self) -> &BTreeMap<String, Array2<f64>> {
        &self.frozen
    }

    /// Adds Gaussian noise of `std` to every trainable tensor, so zero-init
    /// layers stop masking gradients (used by the derivative checks).
    pub fn jitter_params(&mut self, std: f64, seed: u64) {
        let mut rng = seeded_rng(seed);
        let normal = Normal::new(0.0, std).expect("finite std");
        for (_, v) in self.params.iter_mut() {
            v.mapv_inplace(|x| x + normal.sample(&mut rng));
        }
    }

    fn frozen_table(&self, name: &str) -> Result<&Array2<f64>> {
        self.frozen
            .get(name)
            .ok_or_else(|| Error::Lookup(format!("missing frozen table {name}")))
    }

    /// Fits the frozen shortcut from clean examples: each entry is an
    /// assembled input whose noisy slot holds the clean target. The target
    /// tokens are regressed on the conditioning tokens and the basis is the
    /// eigenbasis of the residual second moment, so per-component gains can
    /// express the best linear denoiser at every noise level.
    pub fn fit_linear_shortcut(&mut self, examples: &[Array4<f64>]) -> Result<()> {
        let cfg = &self.config;
        let (tp, c_out, c_in) = (cfg.token_patch, cfg.latent_channels, cfg.input_channels());
        let (n, m) = (tp * tp * c_out, tp * tp * (c_in - c_out));
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for z in examples {
            let (f, h, w, c) = z.dim();
            if c != c_in || h % tp != 0 || w % tp != 0 {
                return Err(Error::Shape(format!("shortcut example is {:?}", z.dim())));
            }
            let flat = z.as_standard_layout();
            let flat = flat.as_slice().expect("standard layout");
            let idx = patchify_index(f, h, w, c_in, tp);
            for tok in idx.chunks(tp * tp * c_in) {
                for chunk in tok.chunks(c_in) {
                    xs.extend(chunk[..c_out].iter().map(|&i| flat[i as usize]));
                    ys.extend(chunk[c_out..].iter().map(|&i| flat[i as usize]));
                }
            }
        }
        let rows = xs.len() / n;
        if rows == 0 {
            return Err(Error::Usage("no examples to fit the shortcut".into()));
        }
        let x = nalgebra::DMatrix::from_row_slice(rows, n, &xs);
        let y = nalgebra::DMatrix::from_row_slice(rows, m, &ys);
        let mut gram = y.transpose() * &y;
        let ridge = 1e-3 * gram.trace() / m as f64 + 1e-12;
        for i in 0..m {
            gram[(i, i)] += ridge;
        }
        let cross = y.transpose() * &x;
        let coef = gram
            .cholesky()
            .ok_or_else(|| Error::Numeric("shortcut regression is singular".into()))?
            .solve(&cross);
        let resid = &x - &y * &coef;
        let moment = resid.transpose() * &resid / rows as f64;
        let eig = nalgebra::SymmetricEigen::new(moment);
        let basis = eig.eigenvectors;
        let cond = &coef * &basis;
        let to_nd = |mat: &nalgebra::DMatrix<f64>| Array2::from_shape_fn(mat.shape(), |(i, j)| mat[(i, j)]);
        self.frozen.insert("shortcut.basis".into(), to_nd(&basis));
        self.frozen.insert("shortcut.cond".into(), to_nd(&cond));
        Ok(())
    }

    /// Noise prediction for an assembled input `z_in`.
    pub fn predict(&self, z_in: &Array4<f64>, t: usize, cond: &Conditioning) -> Result<Array4<f64>> {
        let mut g = Graph::new();
        let built = self.build(&mut g, z_in, t, cond)?;
        to_latent(g.value(built.out), built.shape)
    }

    /// Denoising loss against `eps` and its gradient for every parameter.
    pub fn loss_and_grads(
        &self,
        z_in: &Array4<f64>,
        t: usize,
        cond: &Conditioning,
        eps: &Array4<f64>,
    ) -> Result<(f64, BTreeMap<String, Array2<f64>>)> {
        let mut g = Graph::new();
        let loss = self.loss_graph(&mut g, z_in, t, cond, eps)?;
        let value = g.value(loss)[[0, 0]];
        let grads = g.backward(loss);
        Ok((value, g.param_grads(&grads)))
    }

    pub fn loss(&self, z_in: &Array4<f64>, t: usize, cond: &Conditioning, eps: &Array4<f64>) -> Result<f64> {
        let mut g = Graph::new();
        let loss = self.loss_graph(&mut g, z_in, t, cond, eps)?;
        Ok(g.value(loss)[[0, 0]])
    }

    /// Per-block, per-head attention probabilities.
    pub fn attention_maps(&self, z_in: &Array4<f64>, t: usize, cond: &Conditioning) -> Result<Vec<Array2<f64>>> {
        let mut g = Graph::new();
        let built = self.build(&mut g, z_in, t, cond)?;
        Ok(built.probs.iter().map(|&p| g.value(p).clone()).collect())
    }

    /// Pooled phase/triplet vector of length `cond_dim`.
    pub fn encode_phase_triplet(&self, bundle: &ConditioningBundle) -> Result<Array1<f64>> {
        let mut g = Graph::new();
        let v = self.label_vector(&mut g, bundle)?;
        Ok(g.value(v).row(0).to_owned())
    }

    /// Encodes colorized maps aligned to a video of `video_frames` frames.
    pub fn seg_encode(&self, maps: &VideoTensor, video_frames: usize) -> Result<SegTokens> {
        let mut g = Graph::new();
        let (v, frame_index) = self.seg_stream(&mut g, maps, video_frames)?;
        Ok(SegTokens {
            tokens: g.value(v).clone(),
            frame_index,
        })
    }

    fn loss_graph(
        &self,
        g: &mut Graph,
        z_in: &Array4<f64>,
        t: usize,
        cond: &Conditioning,
        eps: &Array4<f64>,
    ) -> Result<Var> {
        let built = self.build(g, z_in, t, cond)?;
        if eps.shape() != built.shape {
            return Err(Error::Shape(format!(
                "target noise {:?} vs prediction {:?}",
                eps.shape(),
                built.shape
            )));
        }
        let [f, h, w, c] = built.shape;
        let target = eps
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((f * h * w, c))
            .expect("contiguous target");
        let target = g.constant(target);
        let diff = g.sub(built.out, target);
        Ok(g.mean_square(diff))
    }

    fn label_vector(&self, g: &mut Graph, bundle: &ConditioningBundle) -> Result<Var> {
        let cfg = &self.config;
        if cfg.mode != DitMode::S2m || !cfg.use_labels {
            return Err(Error::Usage("this model takes no phase/triplet conditioning".into()));
        }
        bundle.validate(cfg.phase_vocab, cfg.triplet_vocab)?;
        let mut pooled = Vec::with_capacity(2);
        for (table, conv, ids) in [
            ("phase_table", "phase_conv", &bundle.phases),
            ("triplet_table", "triplet_conv", &bundle.triplets),
        ] {
            let tv = match self.frozen.get(table) {
                Some(frozen) => g.constant(frozen.clone()),
                None => g.param(table, self.params.get(table)?),
            };
            let dim = cfg.label_dim;
            let index = ids
                .iter()
                .flat_map(|&id| (0..dim).map(move |k| (id as usize * dim + k) as u32))
                .collect();
            let e = g.gather(tv, index, (ids.len(), dim));
            let c = temporal_conv(g, &self.params, conv, e, ids.len())?;
            pooled.push(g.mean_rows(c));
        }
        let joined = g.concat_cols(&pooled);
        linear(g, &self.params, "label_proj", joined)
    }

    fn seg_stream(&self, g: &mut Graph, maps: &VideoTensor, video_frames: usize) -> Result<(Var, Vec<usize>)> {
        let cfg = &self.config;
        if cfg.mode != DitMode::M2v {
            return Err(Error::Usage("only m2v models encode segmentation maps".into()));
        }
        let (f, h, w, c) = maps.dim();
        if f == 0 || c != 3 || h % SEG_DOWNSAMPLE != 0 || w % SEG_DOWNSAMPLE != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "seg maps {f}×{h}×{w}×{c} need 3 channels and sides divisible by {SEG_DOWNSAMPLE}"
            )));
        }
        let flat: Vec<f64> = maps.iter().map(|&v| v as f64).collect();
        let mut x = g.constant(Array2::from_shape_vec((f * h * w, 3), flat).expect("contiguous maps"));
        let widths = [3, cfg.seg_channels[0], cfg.seg_channels[1], cfg.embed_dim];
        let (mut hh, mut ww) = (h, w);
        for b in 0..3 {
            let rows = f * (hh / 2) * (ww / 2);
            x = g.gather(x, patchify_index(f, hh, ww, widths[b], 2), (rows, 4 * widths[b]));
            hh /= 2;
            ww /= 2;
            x = linear(g, &self.params, &format!("seg{b}.down"), x)?;
            let act = g.gelu(x);
            let res = temporal_conv(g, &self.params, &format!("seg{b}.tconv"), act, f)?;
            x = g.add(x, res);
        }
        let mut frame_index = Vec::with_capacity(f * hh * ww);
        let mut pos = Array2::zeros((f * hh * ww, cfg.embed_dim));
        let mut row = 0;
        for i in 0..f {
            let mapped = map_seg_frame(i, f, video_frames);
            let temporal = sinusoidal_embed(mapped, cfg.embed_dim)?;
            for r in 0..hh {
                for col in 0..ww {
                    let spatial = spatial_embed(r as f64, col as f64, cfg.embed_dim)?;
                    pos.row_mut(row).assign(&(&temporal + &spatial));
                    frame_index.push(mapped);
                    row += 1;
                }
            }
        }
        let pos = g.constant(pos);
        Ok((g.add(x, pos), frame_index))
    }

    fn build(&self, g: &mut Graph, z_in: &Array4<f64>, t: usize, cond: &Conditioning) -> Result<Built> {
        let cfg = &self.config;
        let (f, h, w, c_in) = z_in.dim();
        let tp = cfg.token_patch;
        if c_in != cfg.input_channels() {
            return Err(Error::Shape(format!(
                "input has {c_in} channels, model expects {}",
                cfg.input_channels()
            )));
        }
        if f == 0 || h == 0 || w == 0 || h % tp != 0 || w % tp != 0 {
            return Err(Error::Shape(format!(
                "latent {f}×{h}×{w} not tileable by token patch {tp}"
            )));
        }
        let d = cfg.embed_dim;

        // Conditioning vector [t-embedding ; label vector].
        let t_sin = constant_row(g, sinusoidal_embed(t, d)?);
        let t1 = linear(g, &self.params, "t_embed1", t_sin)?;
        let t1 = g.silu(t1);
        let t_emb = linear(g, &self.params, "t_embed2", t1)?;
        let label = match cfg.mode {
            DitMode::S2m if cfg.use_labels => {
                let bundle = cond
                    .labels
                    .ok_or_else(|| Error::Usage("s2m model needs phase/triplet labels".into()))?;
                self.label_vector(g, bundle)?
            }
            _ => zeros(g, 1, cfg.cond_dim),
        };
        let c_vec = g.concat_cols(&[t_emb, label]);
        let c_act = g.silu(c_vec);

        // Seg stream plus the video frame of every token (None when zeroed,
        // which makes the aligned readout vanish as well).
        let (mut seg, seg_frames) = match cfg.mode {
            DitMode::S2m => (None, None),
            DitMode::M2v => match cond.segmentation {
                Some(SegInput::Colors { maps, video_frames }) => {
                    let (v, frames) = self.seg_stream(g, maps, video_frames)?;
                    (Some(v), Some(frames))
                }
                Some(SegInput::Zeroed { tokens }) => (Some(zeros(g, tokens, d)), None),
                Some(SegInput::Encoded(seg)) => {
                    if seg.tokens.ncols() != d || seg.frame_index.len() != seg.tokens.nrows() {
                        return Err(Error::Shape(format!(
                            "seg tokens are {:?} with {} frame indices, model width is {d}",
                            seg.tokens.dim(),
                            seg.frame_index.len()
                        )));
                    }
                    (Some(g.constant(seg.tokens.clone())), Some(seg.frame_index.clone()))
                }
                None => return Err(Error::Usage("m2v model needs segmentation input".into())),
            },
        };
        let seg_avg = match (seg, &seg_frames) {
            (Some(s), Some(frames)) => {
                let pool = seg_pool_matrix(frames, [f, h, w], cfg)?;
                let pool = g.constant(pool);
                Some(g.matmul(pool, s))
            }
            _ => None,
        };

        // Tokenize the latent.
        let (hp, wp) = (h / tp, w / tp);
        let n_tok = f * hp * wp;
        let flat = z_in
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((f * h * w, c_in))
            .expect("contiguous latent");
        let xv = g.constant(flat);
        let patches = g.gather(xv, patchify_index(f, h, w, c_in, tp), (n_tok, tp * tp * c_in));
        let mut x = linear(g, &self.params, "x_embed", patches)?;
        let mut pos = Array2::zeros((n_tok, d));
        let cell = (tp * cfg.codec_patch) as f64 / SEG_DOWNSAMPLE as f64;
        let mut row = 0;
        for fi in 0..f {
            let temporal = sinusoidal_embed(fi * cfg.frames_per_latent, d)?;
            for i in 0..hp {
                for j in 0..wp {
                    let spatial = spatial_embed(i as f64 * cell, j as f64 * cell, d)?;
                    pos.row_mut(row).assign(&(&temporal + &spatial));
                    row += 1;
                }
            }
        }
        let pos = g.constant(pos);
        x = g.add(x, pos);

        let mut probs = Vec::new();
        for b in 0..cfg.num_blocks {
            let ada = linear(g, &self.params, &format!("block{b}.ada"), c_act)?;
            let part = |g: &mut Graph, k: usize| g.slice_cols(ada, k * d, (k + 1) * d);
            let (shift1, scale1, gate1) = (part(g, 0), part(g, 1), part(g, 2));
            let (shift2, scale2, gate2) = (part(g, 3), part(g, 4), part(g, 5));

            let xn = modulate(g, x, shift1, scale1);
            let seg_n = seg.map(|s| g.layer_norm(s));
            let weights = AttentionWeights::from_params(g, &self.params, &format!("block{b}.attn"))?;
            let att = joint_attention(g, xn, seg_n, &weights, cfg.num_heads)?;
            probs.extend(att.probs);
            let gated = g.mul_row(att.main, gate1);
            x = g.add(x, gated);
            if let (Some(s), Some(s_out)) = (seg, att.seg) {
                seg = Some(g.add(s, s_out));
            }

            let xn = modulate(g, x, shift2, scale2);
            let hdn = linear(g, &self.params, &format!("block{b}.mlp1"), xn)?;
            let hdn = g.gelu(hdn);
            let mlp = linear(g, &self.params, &format!("block{b}.mlp2"), hdn)?;
            let gated = g.mul_row(mlp, gate2);
            x = g.add(x, gated);
        }

        let ada = linear(g, &self.params, "final.ada", c_act)?;
        let shift = g.slice_cols(ada, 0, d);
        let scale = g.slice_cols(ada, d, 2 * d);
        let xn = modulate(g, x, shift, scale);
        let out_tok = linear(g, &self.params, "final.out", xn)?;
        let c_out = cfg.latent_channels;
        let out = g.gather(out_tok, unpatchify_index(f, h, w, c_out, tp), (f * h * w, c_out));
        let n = tp * tp * c_out;
        let noisy = g.slice_cols(xv, 0, c_out);
        let noisy_tok = g.gather(noisy, patchify_index(f, h, w, c_out, tp), (n_tok, n));
        let c_cond = c_in - c_out;
        let given = g.slice_cols(xv, c_out, c_in);
        let given_tok = g.gather(given, patchify_index(f, h, w, c_cond, tp), (n_tok, tp * tp * c_cond));
        let basis = g.constant(self.frozen_table("shortcut.basis")?.clone());
        let cond_map = g.constant(self.frozen_table("shortcut.cond")?.clone());
        let u = g.matmul(noisy_tok, basis);
        let gain = g.slice_cols(ada, 2 * d, 2 * d + n);
        let u = g.mul_row(u, gain);
        let mut v = g.matmul(given_tok, cond_map);
        if let Some(avg) = seg_avg {
            let read = linear(g, &self.params, "seg_read", avg)?;
            v = g.add(v, read);
        }
        let gain = g.slice_cols(ada, 2 * d + n, 2 * d + 2 * n);
        let v = g.mul_row(v, gain);
        let coords = g.add(u, v);
        let lin_tok = g.matmul_t(coords, basis);
        let lin = g.gather(lin_tok, unpatchify_index(f, h, w, c_out, tp), (f * h * w, c_out));
        let out = g.add(out, lin);
        Ok(Built {
            out,
            probs,
            shape: [f, h, w, c_out],
        })
    }
}

/// Averaging matrix from seg tokens onto latent tokens: each latent token
/// takes the mean of the seg tokens covering its spatial center in the
/// frames it compresses, or the nearest seg frame when none fall inside.
fn seg_pool_matrix(frame_index: &[usize], latent: [usize; 3], cfg: &DiTConfig) -> Result<Array2<f64>> {
    let [f, h, w] = latent;
    let (tp, cp, fpl) = (cfg.token_patch, cfg.codec_patch, cfg.frames_per_latent);
    let (hh, ww) = (h * cp / SEG_DOWNSAMPLE, w * cp / SEG_DOWNSAMPLE);
    let per_frame = hh * ww;
    if per_frame == 0 || frame_index.len() % per_frame != 0 {
        return Err(Error::Shape(format!(
            "{} seg tokens do not tile a {hh}×{ww} grid",
            frame_index.len()
        )));
    }
    let seg_frames: Vec<usize> = frame_index.iter().step_by(per_frame).copied().collect();
    let (hp, wp) = (h / tp, w / tp);
    let mut pool = Array2::zeros((f * hp * wp, frame_index.len()));
    for fl in 0..f {
        let mut chosen: Vec<usize> = (0..seg_frames.len())
            .filter(|&k| seg_frames[k] / fpl == fl)
            .collect();
        if chosen.is_empty() {
            let centre = (fl * fpl) as f64 + (fpl as f64 - 1.0) / 2.0;
            let nearest = (0..seg_frames.len())
                .min_by(|&a, &b| {
                    let da = (seg_frames[a] as f64 - centre).abs();
                    let db = (seg_frames[b] as f64 - centre).abs();
                    da.total_cmp(&db)
                })
                .expect("at least one seg frame");
            chosen.push(nearest);
        }
        let weight = 1.0 / chosen.len() as f64;
        for i in 0..hp {
            let r = (((2 * i + 1) * tp * cp) / (2 * SEG_DOWNSAMPLE)).min(hh - 1);
            for j in 0..wp {
                let c = (((2 * j + 1) * tp * cp) / (2 * SEG_DOWNSAMPLE)).min(ww - 1);
                let row = (fl * hp + i) * wp + j;
                for &k in &chosen {
                    pool[[row, k * per_frame + r * ww + c]] = weight;
                }
            }
        }
    }
    Ok(pool)
}

/// `LN(x)·(1 + scale) + shift`.
fn modulate(g: &mut Graph, x: Var, shift: Var, scale: Var) -> Var {
    let n = g.layer_norm(x);
    let s1 = g.add_scalar(scale, 1.0);
    let scaled = g.mul_row(n, s1);
    g.add_row(scaled, shift)
}

fn to_latent(rows: &Array2<f64>, shape: [usize; 4]) -> Result<Array4<f64>> {
    Array4::from_shape_vec(shape, rows.iter().copied().collect())
        .map_err(|e| Error::Shape(e.to_string()))
}

/// Video-timeline frame of seg frame `i` when `seg_frames` maps cover
/// `video_frames` frames: `round(i·(F−1)/(F_seg−1))`.
pub fn map_seg_frame(i: usize, seg_frames: usize, video_frames: usize) -> usize {
    if seg_frames <= 1 || video_frames <= 1 {
        return 0;
    }
    ((i * (video_frames - 1)) as f64 / (seg_frames - 1) as f64).round() as usize
}

fn check_spatial(name: &str, a: &Array4<f64>, z: &Array4<f64>) -> Result<()> {
    let (_, h, w, c) = a.dim();
    let (_, zh, zw, zc) = z.dim();
    if a.dim().0 != 1 || (h, w, c) != (zh, zw, zc) {
        return Err(Error::Shape(format!(
            "{name} is {:?}, expected 1×{zh}×{zw}×{zc}",
            a.shape()
        )));
    }
    Ok(())
}

/// `[z, z_y_seg, z_y]` with both one-frame latents repeated over `z`'s frames.
pub fn assemble_s2m_input(z: &Array4<f64>, z_y_seg: &Array4<f64>, z_y: &Array4<f64>) -> Result<Array4<f64>> {
    check_spatial("first-frame map latent", z_y_seg, z)?;
    check_spatial("first-frame latent", z_y, z)?;
    let f = z.dim().0;
    let seg = repeat_frames(z_y_seg, f);
    let img = repeat_frames(z_y, f);
    Ok(concatenate(Axis(3), &[z.view(), seg.view(), img.view()]).expect("matching shapes"))
}

/// `[z, z_y]` with the first-frame latent repeated over `z`'s frames.
pub fn assemble_m2v_input(z: &Array4<f64>, z_y: &Array4<f64>) -> Result<Array4<f64>> {
    check_spatial("first-frame latent", z_y, z)?;
    let img = repeat_frames(z_y, z.dim().0);
    Ok(concatenate(Axis(3), &[z.view(), img.view()]).expect("matching shapes"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::gaussian_like;

    fn tiny_s2m() -> DiTConfig {
        DiTConfig {
            embed_dim: 8,
            num_blocks: 1,
            num_heads: 2,
            cond_dim: 8,
            label_dim: 4,
            phase_vocab: 3,
            triplet_vocab: 4,
            mlp_ratio: 2,
            seg_channels: [4, 4],
            ..DiTConfig::s2m(2)
        }
    }

    fn tiny_m2v() -> DiTConfig {
        DiTConfig {
            mode: DitMode::M2v,
            use_labels: false,
            frames_per_latent: 2,
            ..tiny_s2m()
        }
    }

    fn bundle() -> ConditioningBundle {
        ConditioningBundle {
            phases: vec![0, 1, 2],
            triplets: vec![3, 0, 1],
        }
    }

    fn maps(f: usize, seed: u64) -> VideoTensor {
        let mut rng = seeded_rng(seed);
        gaussian_like([f, 16, 8, 3], &mut rng).mapv(|v| (v.abs() * 0.3).min(1.0) as f32)
    }

    fn input(cfg: &DiTConfig, f: usize, seed: u64) -> Array4<f64> {
        let mut rng = seeded_rng(seed);
        gaussian_like([f, 4, 2, cfg.input_channels()], &mut rng)
    }

    #[test]
    fn output_is_zero_at_init() {
        let cfg = DiTConfig::s2m(4);
        let dit = Dit::new(cfg.clone(), 1, None).unwrap();
        let b = bundle();
        let cond = Conditioning {
            labels: Some(&b),
            segmentation: None,
        };
        let out = dit.predict(&input(&cfg, 2, 3), 500, &cond).unwrap();
        assert_eq!(out.dim(), (2, 4, 2, 4));
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shapes_in_both_modes() {
        let m = maps(2, 5);
        let mut dit = Dit::new(tiny_m2v(), 2, None).unwrap();
        dit.jitter_params(0.1, 4);
        let cond = Conditioning {
            labels: None,
            segmentation: Some(SegInput::Colors {
                maps: &m,
                video_frames: 4,
            }),
        };
        let out = dit.predict(&input(dit.config(), 2, 1), 10, &cond).unwrap();
        assert_eq!(out.dim(), (2, 4, 2, 2));
        let tokens = dit.seg_encode(&m, 4).unwrap();
        assert_eq!(tokens.tokens.dim(), (2 * 2 * 1, 8));
        assert_eq!(tokens.frame_index, vec![0, 0, 3, 3]);
    }

    #[test]
    fn seg_token_count_matches_downsampling() {
        let cfg = DiTConfig {
            seg_channels: [4, 4],
            ..DiTConfig::m2v(8, 4)
        };
        let dit = Dit::new(cfg, 0, None).unwrap();
        let m = VideoTensor::zeros((8, 32, 48, 3));
        assert_eq!(dit.seg_encode(&m, 8).unwrap().tokens.nrows(), 192);
        let one = VideoTensor::zeros((1, 32, 48, 3));
        assert_eq!(dit.seg_encode(&one, 1).unwrap().tokens.nrows(), 24);
        let bad = VideoTensor::zeros((1, 30, 48, 3));
        assert!(matches!(dit.seg_encode(&bad, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn identical_seg_frames_differ_only_by_position() {
        let dit = Dit::new(tiny_m2v(), 3, None).unwrap();
        let one = maps(1, 9);
        let two = ndarray::concatenate(Axis(0), &[one.view(), one.view()]).unwrap();
        let tok = dit.seg_encode(&two, 2).unwrap().tokens;
        let d = dit.config().embed_dim;
        let per = tok.nrows() / 2;
        for r in 0..per {
            let delta = &tok.row(per + r) - &tok.row(r);
            let want = sinusoidal_embed(1, d).unwrap() - sinusoidal_embed(0, d).unwrap();
            for (a, b) in delta.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    fn check_gradients(mut dit: Dit, z_in: Array4<f64>, cond: Conditioning) {
        dit.jitter_params(0.3, 11);
        let mut rng = seeded_rng(12);
        let [f, h, w, _] = [z_in.dim().0, z_in.dim().1, z_in.dim().2, 0];
        let eps = gaussian_like([f, h, w, dit.config().latent_channels], &mut rng);
        let (_, grads) = dit.loss_and_grads(&z_in, 37, &cond, &eps).unwrap();
        assert_eq!(grads.len(), dit.params().len(), "every parameter receives a gradient");
        let step = 1e-5;
        for (name, analytic) in &grads {
            let n = analytic.len();
            let picks: Vec<usize> = (0..n).step_by((n / 5).max(1)).collect();
            let (mut num2, mut den2, mut fd2) = (0.0, 0.0, 0.0);
            for &k in &picks {
                let (r, c) = (k / analytic.ncols(), k % analytic.ncols());
                let orig = dit.params().get(name).unwrap()[[r, c]];
                dit.params_mut().get_mut(name).unwrap()[[r, c]] = orig + step;
                let up = dit.loss(&z_in, 37, &cond, &eps).unwrap();
                dit.params_mut().get_mut(name).unwrap()[[r, c]] = orig - step;
                let down = dit.loss(&z_in, 37, &cond, &eps).unwrap();
                dit.params_mut().get_mut(name).unwrap()[[r, c]] = orig;
                let fd = (up - down) / (2.0 * step);
                let a = analytic[[r, c]];
                num2 += (a - fd) * (a - fd);
                den2 += a * a;
                fd2 += fd * fd;
            }
            let scale = den2.sqrt() + fd2.sqrt();
            if scale < 1e-10 {
                continue;
            }
            let rel = num2.sqrt() / scale;
            assert!(rel < 1e-3, "{name}: relative error {rel:e}");
        }
    }

    #[test]
    fn gradients_match_finite_differences_s2m() {
        let cfg = tiny_s2m();
        let b = bundle();
        let cond = Conditioning {
            labels: Some(&b),
            segmentation: None,
        };
        check_gradients(Dit::new(cfg.clone(), 7, None).unwrap(), input(&cfg, 3, 8), cond);
    }

    #[test]
    fn gradients_match_finite_differences_m2v() {
        let cfg = tiny_m2v();
        let m = maps(2, 13);
        let cond = Conditioning {
            labels: None,
            segmentation: Some(SegInput::Colors {
                maps: &m,
                video_frames: 4,
            }),
        };
        check_gradients(Dit::new(cfg.clone(), 7, None).unwrap(), input(&cfg, 2, 8), cond);
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let cfg = tiny_m2v();
        let m = maps(2, 1);
        let mut dit = Dit::new(cfg.clone(), 0, None).unwrap();
        dit.jitter_params(0.5, 1);
        let cond = Conditioning {
            labels: None,
            segmentation: Some(SegInput::Colors {
                maps: &m,
                video_frames: 4,
            }),
        };
        let probs = dit.attention_maps(&input(&cfg, 2, 2), 3, &cond).unwrap();
        assert_eq!(probs.len(), cfg.num_heads * cfg.num_blocks);
        for p in probs {
            // 4 video tokens plus 4 seg tokens
            assert_eq!(p.dim(), (8, 8));
            for row in p.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn each_mode_ignores_the_other_conditioning() {
        let m_a = maps(2, 1);
        let m_b = maps(2, 2);
        let (b_a, mut b_b) = (bundle(), bundle());
        b_b.phases = vec![2, 2, 2];

        let mut s2m = Dit::new(tiny_s2m(), 0, None).unwrap();
        s2m.jitter_params(0.3, 2);
        let z = input(s2m.config(), 2, 0);
        let run = |seg: &VideoTensor| {
            s2m.predict(
                &z,
                5,
                &Conditioning {
                    labels: Some(&b_a),
                    segmentation: Some(SegInput::Colors {
                        maps: seg,
                        video_frames: 2,
                    }),
                },
            )
            .unwrap()
        };
        assert_eq!(run(&m_a), run(&m_b));

        let mut m2v = Dit::new(tiny_m2v(), 0, None).unwrap();
        m2v.jitter_params(0.3, 2);
        let z = input(m2v.config(), 2, 0);
        let run = |labels: &ConditioningBundle| {
            m2v.predict(
                &z,
                5,
                &Conditioning {
                    labels: Some(labels),
                    segmentation: Some(SegInput::Colors {
                        maps: &m_a,
                        video_frames: 2,
                    }),
                },
            )
            .unwrap()
        };
        assert_eq!(run(&b_a), run(&b_b));
    }

    #[test]
    fn missing_conditioning_is_a_usage_error() {
        let s2m = Dit::new(tiny_s2m(), 0, None).unwrap();
        let z = input(s2m.config(), 1, 0);
        assert!(matches!(
            s2m.predict(&z, 1, &Conditioning::default()),
            Err(Error::Usage(_))
        ));
        let m2v = Dit::new(tiny_m2v(), 0, None).unwrap();
        let z = input(m2v.config(), 1, 0);
        assert!(matches!(
            m2v.predict(&z, 1, &Conditioning::default()),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut a = Dit::new(tiny_s2m(), 4, None).unwrap();
        let mut b = Dit::new(tiny_s2m(), 4, None).unwrap();
        a.jitter_params(0.2, 9);
        b.jitter_params(0.2, 9);
        let bd = bundle();
        let cond = Conditioning {
            labels: Some(&bd),
            segmentation: None,
        };
        let z = input(a.config(), 2, 1);
        assert_eq!(a.predict(&z, 9, &cond).unwrap(), b.predict(&z, 9, &cond).unwrap());
    }

    #[test]
    fn constant_labels_pool_to_the_same_vector() {
        for provider in [LabelProvider::LabelEmbedding, LabelProvider::PretrainedTable] {
            let dit = Dit::new(
                DiTConfig {
                    provider,
                    ..tiny_s2m()
                },
                3,
                None,
            )
            .unwrap();
            let short = ConditioningBundle {
                phases: vec![1],
                triplets: vec![2],
            };
            let long = ConditioningBundle {
                phases: vec![1; 16],
                triplets: vec![2; 16],
            };
            let a = dit.encode_phase_triplet(&short).unwrap();
            let b = dit.encode_phase_triplet(&long).unwrap();
            assert_eq!(a.len(), 8);
            assert_eq!(b.len(), 8);
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn label_order_matters() {
        let dit = Dit::new(tiny_s2m(), 3, None).unwrap();
        let fwd = ConditioningBundle {
            phases: vec![0, 0, 1, 2],
            triplets: vec![0, 1, 2, 3],
        };
        let rev = ConditioningBundle {
            phases: vec![2, 1, 0, 0],
            triplets: vec![3, 2, 1, 0],
        };
        let a = dit.encode_phase_triplet(&fwd).unwrap();
        let b = dit.encode_phase_triplet(&rev).unwrap();
        assert!(a.iter().zip(b.iter()).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn out_of_vocabulary_label_is_rejected() {
        let dit = Dit::new(tiny_s2m(), 3, None).unwrap();
        let bad = ConditioningBundle {
            phases: vec![3],
            triplets: vec![0],
        };
        assert!(matches!(dit.encode_phase_triplet(&bad), Err(Error::Lookup(_))));
    }

    #[test]
    fn assembly_shapes_and_repetition() {
        let mut rng = seeded_rng(0);
        let z = Array4::zeros((8, 8, 12, 16));
        let zs = gaussian_like([1, 8, 12, 16], &mut rng);
        let zy = gaussian_like([1, 8, 12, 16], &mut rng);
        let a = assemble_s2m_input(&z, &zs, &zy).unwrap();
        assert_eq!(a.dim(), (8, 8, 12, 48));
        for i in 0..8 {
            assert_eq!(
                a.slice(ndarray::s![i, .., .., 16..32]),
                zs.slice(ndarray::s![0, .., .., ..])
            );
        }
        assert!(a.slice(ndarray::s![.., .., .., ..16]).iter().all(|&v| v == 0.0));
        let m = assemble_m2v_input(&z, &zy).unwrap();
        assert_eq!(m.dim(), (8, 8, 12, 32));
        let wrong = Array4::zeros((1, 4, 12, 16));
        assert!(matches!(assemble_s2m_input(&z, &wrong, &zy), Err(Error::Shape(_))));
    }

    #[test]
    fn seg_frames_map_onto_the_video_timeline() {
        assert_eq!(map_seg_frame(0, 4, 16), 0);
        assert_eq!(map_seg_frame(1, 4, 16), 5);
        assert_eq!(map_seg_frame(3, 4, 16), 15);
        assert_eq!(map_seg_frame(0, 1, 16), 0);
        assert_eq!(map_seg_frame(2, 3, 3), 2);
    }

    #[test]
    fn encoded_seg_tokens_match_color_input() {
        let cfg = tiny_m2v();
        let mut dit = Dit::new(cfg.clone(), 3, None).unwrap();
        dit.jitter_params(0.2, 4);
        let m = maps(4, 5);
        let z = input(&cfg, 2, 6);
        let tokens = dit.seg_encode(&m, 4).unwrap();
        let with = |seg| Conditioning {
            labels: None,
            segmentation: Some(seg),
        };
        let colors = dit
            .predict(&z, 20, &with(SegInput::Colors { maps: &m, video_frames: 4 }))
            .unwrap();
        let encoded = dit.predict(&z, 20, &with(SegInput::Encoded(&tokens))).unwrap();
        assert_eq!(colors, encoded);
    }

    #[test]
    fn seg_pool_averages_the_covered_frames_at_each_position() {
        let cfg = tiny_m2v();
        // Four seg frames over a 2×1 grid; two latent frames of two frames each.
        let frames = vec![0, 0, 1, 1, 2, 2, 3, 3];
        let pool = seg_pool_matrix(&frames, [2, 4, 2], &cfg).unwrap();
        assert_eq!(pool.dim(), (4, 8));
        for row in pool.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        // Latent frame 1, lower token reads seg frames 2 and 3, lower cell.
        assert_eq!(pool[[3, 5]], 0.5);
        assert_eq!(pool[[3, 7]], 0.5);
        // A single seg frame serves every latent frame.
        let single = seg_pool_matrix(&[0, 0], [2, 4, 2], &cfg).unwrap();
        assert_eq!(single.column(0).sum(), 2.0);
        assert!(seg_pool_matrix(&[0, 0, 0], [2, 4, 2], &cfg).is_err());
    }

    #[test]
    fn fitted_shortcut_reproduces_a_linear_target() {
        // Target equals the first conditioning map, so the regression is exact.
        let cfg = tiny_s2m();
        let mut dit = Dit::new(cfg.clone(), 2, None).unwrap();
        let c = cfg.latent_channels;
        let mut rng = seeded_rng(9);
        let examples: Vec<_> = (0..12)
            .map(|_| {
                let y_seg = gaussian_like([1, 4, 2, c], &mut rng);
                let y = gaussian_like([1, 4, 2, c], &mut rng);
                let z = repeat_frames(&y_seg, 3);
                assemble_s2m_input(&z, &y_seg, &y).unwrap()
            })
            .collect();
        dit.fit_linear_shortcut(&examples).unwrap();
        let basis = dit.frozen()["shortcut.basis"].clone();
        let eye = Array2::<f64>::eye(basis.nrows());
        assert!((basis.t().dot(&basis) - eye).iter().all(|v| v.abs() < 1e-9));

        // Unit conditioning gains turn the prediction into the regression.
        let (d, n) = (cfg.embed_dim, cfg.token_patch * cfg.token_patch * c);
        let bias = dit.params_mut().get_mut("final.ada.b").unwrap();
        bias.slice_mut(ndarray::s![0, 2 * d + n..2 * d + 2 * n]).fill(1.0);
        let b = bundle();
        let cond = Conditioning {
            labels: Some(&b),
            segmentation: None,
        };
        let probe = &examples[0];
        let out = dit.predict(probe, 10, &cond).unwrap();
        let target = probe.slice(ndarray::s![.., .., .., ..c]);
        let err = (&out - &target).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-2, "max error {err}");
    }
}
