//! Toy latent codec standing in for a video VAE.
//!
//! A video is cut into `p×p` spatial patches; a temporal group of `r` frames
//! of one patch forms a block vector of length `p²·C·r` which is multiplied
//! by a fixed orthonormal matrix. Encoding is therefore exactly invertible.
//!
//! The projection is block diagonal: the first frame slot of every group is
//! rotated on its own (`p²·C` channels), the remaining `r−1` slots jointly.
//! A frame encoded as a 1-frame video thus only touches the leading `p²·C`
//! latent channels, which is what the dense encoding relies on.

mod kmeans;
mod palette;

pub use kmeans::{elbow_k, kmeans_discretize, kmeans_fit, KMeansFit};
pub use palette::{Palette, PALETTE_COLORS};

use ndarray::{s, Array2, Array4, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{seeded_rng, VideoTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub spatial_patch: usize,
    pub temporal_factor: usize,
    pub channels: usize,
    pub projection_seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            spatial_patch: 4,
            temporal_factor: 4,
            channels: 3,
            projection_seed: 7,
        }
    }
}

impl CodecConfig {
    /// Values contributed by one frame of one patch.
    pub fn frame_dim(&self) -> usize {
        self.spatial_patch * self.spatial_patch * self.channels
    }

    /// Latent channel count `d`.
    pub fn latent_dim(&self) -> usize {
        self.frame_dim() * self.temporal_factor
    }

    pub fn validate(&self) -> Result<()> {
        if self.spatial_patch == 0 || self.temporal_factor == 0 || self.channels == 0 {
            return Err(Error::Parameter(format!("codec sizes must be positive: {self:?}")));
        }
        Ok(())
    }

    fn check_video(&self, video: &VideoTensor) -> Result<()> {
        self.validate()?;
        let (f, h, w, c) = video.dim();
        let p = self.spatial_patch;
        if f == 0 {
            return Err(Error::Parameter("video has no frames".into()));
        }
        if h % p != 0 || w % p != 0 {
            return Err(Error::Parameter(format!("{h}x{w} not divisible by patch {p}")));
        }
        if c != self.channels {
            return Err(Error::Parameter(format!("expected {} channels, got {c}", self.channels)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentMode {
    /// One latent frame per video frame.
    Dense,
    /// One latent frame per group of `r` video frames.
    Compressed,
}

/// `F_lat×H'×W'×d` latent plus the frame count of the video it encodes.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    pub data: Array4<f64>,
    pub mode: LatentMode,
    pub frames: usize,
}

impl LatentVideo {
    pub fn latent_frames(&self) -> usize {
        self.data.dim().0
    }
}

/// Encoder/decoder pair holding the seeded projection.
#[derive(Debug, Clone)]
pub struct Codec {
    cfg: CodecConfig,
    /// `d×d`, rows are latent channels.
    projection: Array2<f64>,
}

impl Codec {
    pub fn new(cfg: CodecConfig) -> Result<Self> {
        cfg.validate()?;
        let fd = cfg.frame_dim();
        let d = cfg.latent_dim();
        let mut rng = seeded_rng(cfg.projection_seed);
        let mut projection = Array2::zeros((d, d));
        projection
            .slice_mut(s![..fd, ..fd])
            .assign(&random_orthonormal(fd, &mut rng));
        if d > fd {
            projection
                .slice_mut(s![fd.., fd..])
                .assign(&random_orthonormal(d - fd, &mut rng));
        }
        Ok(Self { cfg, projection })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    pub fn projection(&self) -> ArrayView2<'_, f64> {
        self.projection.view()
    }

    /// Temporally compressed encoding: `F_lat = ⌈F/r⌉`, tail zero-padded.
    pub fn encode_compressed(&self, video: &VideoTensor) -> Result<LatentVideo> {
        self.cfg.check_video(video)?;
        let f = video.dim().0;
        let groups = f.div_ceil(self.cfg.temporal_factor);
        Ok(LatentVideo {
            data: self.encode_groups(video, groups, self.cfg.temporal_factor),
            mode: LatentMode::Compressed,
            frames: f,
        })
    }

    /// Temporally dense encoding: every frame encoded as its own 1-frame video.
    pub fn encode_dense(&self, video: &VideoTensor) -> Result<LatentVideo> {
        self.cfg.check_video(video)?;
        let f = video.dim().0;
        Ok(LatentVideo {
            data: self.encode_groups(video, f, 1),
            mode: LatentMode::Dense,
            frames: f,
        })
    }

    /// `stride` consecutive frames go into the leading slots of each group.
    fn encode_groups(&self, video: &VideoTensor, groups: usize, stride: usize) -> Array4<f64> {
        let (f, h, w, c) = video.dim();
        let p = self.cfg.spatial_patch;
        let (hp, wp) = (h / p, w / p);
        let d = self.cfg.latent_dim();
        let fd = self.cfg.frame_dim();
        let used = stride * fd;
        let mut blocks = Array2::<f64>::zeros((groups * hp * wp, used));
        for g in 0..groups {
            for slot in 0..stride {
                let frame = g * stride + slot;
                if frame >= f {
                    break;
                }
                for i in 0..hp {
                    for j in 0..wp {
                        let mut row = blocks.row_mut((g * hp + i) * wp + j);
                        for dy in 0..p {
                            for dx in 0..p {
                                for ch in 0..c {
                                    row[slot * fd + (dy * p + dx) * c + ch] =
                                        video[[frame, i * p + dy, j * p + dx, ch]] as f64;
                                }
                            }
                        }
                    }
                }
            }
        }
        let proj = self.projection.slice(s![.., ..used]);
        let latent = blocks.dot(&proj.t());
        latent
            .into_shape_with_order((groups, hp, wp, d))
            .expect("block count matches latent grid")
    }

    /// Exact inverse of the matching encoder (padding frames dropped).
    pub fn decode(&self, z: &LatentVideo) -> Result<VideoTensor> {
        let (fl, hp, wp, d) = z.data.dim();
        if d != self.cfg.latent_dim() {
            return Err(Error::Shape(format!(
                "latent has {d} channels, codec expects {}",
                self.cfg.latent_dim()
            )));
        }
        let stride = match z.mode {
            LatentMode::Dense => 1,
            LatentMode::Compressed => self.cfg.temporal_factor,
        };
        if z.frames > fl * stride || z.frames + stride <= fl * stride {
            return Err(Error::Shape(format!(
                "{} frames inconsistent with {fl} latent frames in {:?} mode",
                z.frames, z.mode
            )));
        }
        let p = self.cfg.spatial_patch;
        let c = self.cfg.channels;
        let fd = self.cfg.frame_dim();
        let flat = z
            .data
            .view()
            .into_shape_with_order((fl * hp * wp, d))
            .map_err(|e| Error::Shape(e.to_string()))?;
        let proj = self.projection.slice(s![.., ..stride * fd]);
        let blocks = flat.dot(&proj);
        let mut video = VideoTensor::zeros((z.frames, hp * p, wp * p, c));
        for g in 0..fl {
            for slot in 0..stride {
                let frame = g * stride + slot;
                if frame >= z.frames {
                    break;
                }
                for i in 0..hp {
                    for j in 0..wp {
                        let row = blocks.row((g * hp + i) * wp + j);
                        for dy in 0..p {
                            for dx in 0..p {
                                for ch in 0..c {
                                    video[[frame, i * p + dy, j * p + dx, ch]] =
                                        row[slot * fd + (dy * p + dx) * c + ch] as f32;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(video)
    }

    /// Channels actually populated by dense latents.
    pub fn dense_channels(&self) -> usize {
        self.cfg.frame_dim()
    }
}

/// Keeps the leading `channels` latent channels.
pub fn take_channels(z: &Array4<f64>, channels: usize) -> Array4<f64> {
    z.slice(s![.., .., .., ..channels]).to_owned()
}

/// Zero-extends the channel axis to `channels`.
pub fn pad_channels(z: &Array4<f64>, channels: usize) -> Array4<f64> {
    let (f, h, w, c) = z.dim();
    let mut out = Array4::zeros((f, h, w, channels));
    out.slice_mut(s![.., .., .., ..c]).assign(z);
    out
}

/// Repeats a 1-frame latent `frames` times.
pub fn repeat_frames(z: &Array4<f64>, frames: usize) -> Array4<f64> {
    let one = z.index_axis(Axis(0), 0);
    let (h, w, c) = one.dim();
    Array4::from_shape_fn((frames, h, w, c), |(_, i, j, k)| one[[i, j, k]])
}

/// Gram–Schmidt (two passes) on a seeded Gaussian matrix.
fn random_orthonormal(n: usize, rng: &mut crate::Rng) -> Array2<f64> {
    let mut m: Array2<f64> = Array2::from_shape_simple_fn((n, n), || StandardNormal.sample(rng));
    for i in 0..n {
        for _ in 0..2 {
            for j in 0..i {
                let dot: f64 = m.row(i).dot(&m.row(j));
                let rj = m.row(j).to_owned();
                m.row_mut(i).scaled_add(-dot, &rj);
            }
        }
        let norm: f64 = m.row(i).dot(&m.row(i)).sqrt();
        m.row_mut(i).mapv_inplace(|v| v / norm);
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn video(f: usize, h: usize, w: usize, seed: u64) -> VideoTensor {
        let mut rng = seeded_rng(seed);
        Array4::from_shape_simple_fn((f, h, w, 3), || rand::Rng::random::<f32>(&mut rng))
    }

    fn max_abs(a: &VideoTensor, b: &VideoTensor) -> f32 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn projection_is_orthonormal() {
        let codec = Codec::new(CodecConfig::default()).unwrap();
        let q = codec.projection();
        let eye = q.dot(&q.t());
        for ((i, j), v) in eye.indexed_iter() {
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-12, "({i},{j}) = {v}");
        }
    }

    #[test]
    fn shapes() {
        let codec = Codec::new(CodecConfig::default()).unwrap();
        let d = codec.config().latent_dim();
        let z = codec.encode_compressed(&video(16, 32, 48, 1)).unwrap();
        assert_eq!(z.data.dim(), (4, 8, 12, d));
        let z = codec.encode_compressed(&video(1, 32, 48, 1)).unwrap();
        assert_eq!(z.data.dim(), (1, 8, 12, d));
        let z = codec.encode_dense(&video(8, 32, 48, 1)).unwrap();
        assert_eq!(z.data.dim(), (8, 8, 12, d));
        let z = codec.encode_compressed(&video(7, 8, 8, 1)).unwrap();
        assert_eq!(z.latent_frames(), 2);
    }

    #[test]
    fn zero_video_encodes_to_zero() {
        let codec = Codec::new(CodecConfig::default()).unwrap();
        let z = codec.encode_compressed(&VideoTensor::zeros((5, 8, 8, 3))).unwrap();
        assert!(z.data.iter().all(|&v| v == 0.0));
        let back = codec
            .decode(&LatentVideo {
                data: Array4::zeros((2, 2, 2, 192)),
                mode: LatentMode::Compressed,
                frames: 5,
            })
            .unwrap();
        assert!(back.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dense_is_per_frame() {
        let codec = Codec::new(CodecConfig::default()).unwrap();
        let v = video(5, 16, 8, 3);
        let z = codec.encode_dense(&v).unwrap();
        for i in 0..5 {
            let one = v.slice(s![i..i + 1, .., .., ..]).to_owned();
            let zi = codec.encode_dense(&one).unwrap();
            assert_eq!(z.data.index_axis(Axis(0), i), zi.data.index_axis(Axis(0), 0));
        }
        // leading frame slot only
        let fd = codec.dense_channels();
        assert!(z.data.slice(s![.., .., .., fd..]).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn dense_and_compressed_agree_on_one_frame() {
        let codec = Codec::new(CodecConfig::default()).unwrap();
        let v = video(1, 8, 12, 9);
        assert_eq!(
            codec.encode_dense(&v).unwrap().data,
            codec.encode_compressed(&v).unwrap().data
        );
    }

    #[test]
    fn round_trips() {
        let codec = Codec::new(CodecConfig::default()).unwrap();
        let v = video(10, 32, 48, 4);
        let back = codec.decode(&codec.encode_dense(&v).unwrap()).unwrap();
        assert!(max_abs(&v, &back) <= 1e-6);
        let back = codec.decode(&codec.encode_compressed(&v).unwrap()).unwrap();
        assert_eq!(back.dim(), v.dim());
        assert!(max_abs(&v, &back) <= 1e-6);
    }

    #[test]
    fn rejects_bad_inputs() {
        let codec = Codec::new(CodecConfig::default()).unwrap();
        assert!(matches!(
            codec.encode_dense(&video(2, 30, 48, 0)),
            Err(Error::Parameter(_))
        ));
        let z = LatentVideo {
            data: Array4::zeros((2, 2, 2, 16)),
            mode: LatentMode::Dense,
            frames: 2,
        };
        assert!(matches!(codec.decode(&z), Err(Error::Shape(_))));
    }

    #[test]
    fn channel_helpers() {
        let z = Array4::from_shape_fn((1, 2, 2, 3), |(_, i, j, c)| (i * 10 + j + c * 100) as f64);
        let r = repeat_frames(&z, 4);
        assert_eq!(r.dim(), (4, 2, 2, 3));
        assert_eq!(r.index_axis(Axis(0), 3), z.index_axis(Axis(0), 0));
        let t = take_channels(&pad_channels(&z, 5), 3);
        assert_eq!(t, z);
    }
}
