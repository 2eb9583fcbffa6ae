//! Procedural surgical-like scenes with exact panoptic ground truth.
//!
//! Anatomy entities are slowly breathing ellipses with fixed centers. Tools
//! are rigid capsules drawn on top. Their motion follows the active phase
//! (idle, approach or sweep) unless a triplet event is running, in which case
//! the verb's scripted profile moves the tool relative to its target.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array3, Array4};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::container::{write_atomic, Tensor};
use crate::error::{Error, Result};
use crate::{seeded_rng, PanopticMap, Rng, VideoTensor};

pub const DEFAULT_PHASE_NAMES: [&str; 7] = [
    "preparation",
    "calot triangle dissection",
    "clipping and cutting",
    "gallbladder dissection",
    "gallbladder packaging",
    "cleaning and coagulation",
    "gallbladder retraction",
];

const ANATOMY_COLORS: [[f64; 3]; 5] = [
    [0.86, 0.42, 0.38],
    [0.78, 0.72, 0.30],
    [0.58, 0.24, 0.60],
    [0.95, 0.78, 0.62],
    [0.45, 0.62, 0.22],
];

const TOOL_COLORS: [[f64; 3]; 4] = [
    [0.82, 0.86, 0.92],
    [0.30, 0.74, 0.88],
    [0.98, 0.96, 0.40],
    [0.20, 0.92, 0.60],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Tool,
    Anatomy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verb {
    Grasp,
    Retract,
    Dissect,
    Idle,
}

impl Verb {
    pub const ALL: [Verb; 4] = [Verb::Grasp, Verb::Retract, Verb::Dissect, Verb::Idle];

    pub fn name(self) -> &'static str {
        match self {
            Verb::Grasp => "grasp",
            Verb::Retract => "retract",
            Verb::Dissect => "dissect",
            Verb::Idle => "idle",
        }
    }
}

/// A triplet action over an inclusive frame range. `tool` and `target`
/// count from 1 within their kind ("tool1", "anatomy2").
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletEvent {
    pub verb: Verb,
    pub tool: usize,
    pub target: usize,
    pub start: usize,
    pub end: usize,
}

/// Triplet id table: id 0 is "none", the rest enumerate
/// tool × verb × target until the vocabulary is full.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletVocab {
    entries: Vec<(Verb, usize, usize)>,
    size: usize,
}

impl TripletVocab {
    pub fn new(n_tools: usize, n_anatomy: usize, size: usize) -> Self {
        let mut entries = Vec::new();
        'fill: for tool in 1..=n_tools {
            for verb in Verb::ALL {
                for target in 1..=n_anatomy {
                    if entries.len() + 1 >= size {
                        break 'fill;
                    }
                    entries.push((verb, tool, target));
                }
            }
        }
        Self { entries, size }
    }

    /// Vocabulary size including the unused tail.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn id_of(&self, verb: Verb, tool: usize, target: usize) -> Option<u16> {
        self.entries
            .iter()
            .position(|&e| e == (verb, tool, target))
            .map(|i| (i + 1) as u16)
    }

    pub fn get(&self, id: u16) -> Option<(Verb, usize, usize)> {
        (id as usize).checked_sub(1).and_then(|i| self.entries.get(i).copied())
    }

    /// One name per id; ids past the enumerated entries are "unused N".
    pub fn names(&self) -> Vec<String> {
        (0..self.size)
            .map(|id| match id {
                0 => "none".to_string(),
                _ => match self.entries.get(id - 1) {
                    Some((v, t, a)) => format!("{} tool{} anatomy{}", v.name(), t, a),
                    None => format!("unused {id}"),
                },
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: u32,
    pub n_anatomy: usize,
    pub n_tools: usize,
    pub phase_count: usize,
    pub triplet_vocab: usize,
    pub seed: u64,
    /// Replaces the random triplet events when set.
    #[serde(default)]
    pub events: Option<Vec<TripletEvent>>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            frames: 16,
            height: 32,
            width: 48,
            fps: 1,
            n_anatomy: 2,
            n_tools: 2,
            phase_count: 7,
            triplet_vocab: 20,
            seed: 0,
            events: None,
        }
    }
}

impl SceneConfig {
    /// Default scene at `fps` (16 frames at 1 FPS, 48 at 8 FPS).
    pub fn at_fps(fps: u32, seed: u64) -> Result<Self> {
        let frames = match fps {
            1 => 16,
            8 => 48,
            other => return Err(Error::Parameter(format!("fps must be 1 or 8, got {other}"))),
        };
        Ok(Self {
            frames,
            fps,
            seed,
            ..Self::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::Parameter("scene needs at least one frame".into()));
        }
        if self.height == 0 || self.width == 0 || self.height % 8 != 0 || self.width % 8 != 0 {
            return Err(Error::Parameter(format!(
                "frame size {}×{} must be positive multiples of 8",
                self.height, self.width
            )));
        }
        if !matches!(self.fps, 1 | 8) {
            return Err(Error::Parameter(format!("fps must be 1 or 8, got {}", self.fps)));
        }
        if self.n_tools == 0 {
            return Err(Error::Parameter("a scene needs at least one tool".into()));
        }
        if self.n_anatomy == 0 {
            return Err(Error::Parameter("a scene needs at least one anatomy entity".into()));
        }
        if self.phase_count < 2 || self.triplet_vocab < 1 {
            return Err(Error::Parameter("need ≥ 2 phases and a triplet vocabulary".into()));
        }
        Ok(())
    }

    pub fn triplet_table(&self) -> TripletVocab {
        TripletVocab::new(self.n_tools, self.n_anatomy, self.triplet_vocab)
    }

    pub fn phase_names(&self) -> Vec<String> {
        (0..self.phase_count)
            .map(|i| match DEFAULT_PHASE_NAMES.get(i) {
                Some(n) => n.to_string(),
                None => format!("phase {i}"),
            })
            .collect()
    }

    /// Entity id of the `k`-th tool (1-based).
    pub fn tool_id(&self, k: usize) -> u16 {
        (self.n_anatomy + k) as u16
    }

    /// Per-frame motion scale; 8 FPS clips move a third as far per frame.
    fn motion_scale(&self) -> f64 {
        if self.fps == 8 {
            1.0 / 3.0
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneLabels {
    pub phases: Vec<u16>,
    pub triplets: Vec<u16>,
    pub entity_kinds: BTreeMap<u16, EntityKind>,
    pub phase_names: Vec<String>,
    pub triplet_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub video: VideoTensor,
    pub panoptic: PanopticMap,
    pub labels: SceneLabels,
    pub fps: u32,
    pub seed: u64,
}

impl SceneSample {
    pub fn frames(&self) -> usize {
        self.video.dim().0
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
    phase: f64,
    color: [f64; 3],
}

impl Ellipse {
    fn at(&self, frame: usize, scale: f64) -> (f64, f64, f64) {
        let t = frame as f64 * scale;
        let breathe = 1.0 + 0.08 * (0.7 * t + self.phase).sin();
        let angle = self.angle + 0.06 * (0.4 * t + self.phase).sin();
        (self.ry * breathe, self.rx / breathe.sqrt(), angle)
    }

    fn mean_radius(&self) -> f64 {
        0.5 * (self.ry + self.rx)
    }
}

struct Capsule {
    half_len: f64,
    radius: f64,
    angle: f64,
    color: [f64; 3],
}

/// Generates one scene. Deterministic in `cfg`.
pub fn generate_scene(cfg: &SceneConfig) -> Result<SceneSample> {
    cfg.validate()?;
    let mut rng = seeded_rng(cfg.seed);
    let (h, w, f) = (cfg.height as f64, cfg.width as f64, cfg.frames);
    let side = h.min(w);
    let scale = cfg.motion_scale();

    // Background gradient.
    let bg_base = [
        0.22 + 0.06 * rng.random::<f64>(),
        0.10 + 0.05 * rng.random::<f64>(),
        0.09 + 0.05 * rng.random::<f64>(),
    ];
    let bg_dir = rng.random::<f64>() * 2.0 * PI;

    // Anatomy placement by rejection sampling.
    let mut anatomy: Vec<Ellipse> = Vec::with_capacity(cfg.n_anatomy);
    for a in 0..cfg.n_anatomy {
        let mut placed = false;
        for _ in 0..500 {
            let ry = side * (0.16 + 0.08 * rng.random::<f64>());
            let rx = side * (0.20 + 0.10 * rng.random::<f64>());
            let cy = ry + (h - 2.0 * ry) * rng.random::<f64>();
            let cx = rx + (w - 2.0 * rx) * rng.random::<f64>();
            let clear = anatomy.iter().all(|o| {
                let d = ((o.cy - cy).powi(2) + (o.cx - cx).powi(2)).sqrt();
                d >= 0.75 * (o.ry.max(o.rx) + ry.max(rx))
            });
            if clear {
                let jitter = 0.04 * (rng.random::<f64>() - 0.5);
                let base = ANATOMY_COLORS[a % ANATOMY_COLORS.len()];
                anatomy.push(Ellipse {
                    cy,
                    cx,
                    ry,
                    rx,
                    angle: rng.random::<f64>() * PI,
                    phase: rng.random::<f64>() * 2.0 * PI,
                    color: base.map(|c| (c + jitter).clamp(0.0, 1.0)),
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "cannot fit {} anatomy entities into {}×{}",
                cfg.n_anatomy, cfg.height, cfg.width
            )));
        }
    }

    let tools: Vec<Capsule> = (0..cfg.n_tools)
        .map(|k| Capsule {
            half_len: side * (0.16 + 0.04 * rng.random::<f64>()),
            radius: side * 0.05 + 0.4,
            angle: rng.random::<f64>() * PI,
            color: TOOL_COLORS[k % TOOL_COLORS.len()],
        })
        .collect();
    let mut tool_pos: Vec<(f64, f64)> = (0..cfg.n_tools)
        .map(|_| (h * (0.2 + 0.6 * rng.random::<f64>()), w * (0.2 + 0.6 * rng.random::<f64>())))
        .collect();
    let mut sweep_vel: Vec<(f64, f64)> = (0..cfg.n_tools)
        .map(|_| {
            let a = rng.random::<f64>() * 2.0 * PI;
            (1.5 * a.sin(), 1.5 * a.cos())
        })
        .collect();

    let phases = phase_schedule(cfg, &mut rng);
    let vocab = cfg.triplet_table();
    let events = match &cfg.events {
        Some(ev) => {
            for e in ev {
                if e.tool == 0 || e.tool > cfg.n_tools || e.target == 0 || e.target > cfg.n_anatomy {
                    return Err(Error::Generation(format!("event {e:?} names a missing entity")));
                }
                if e.start > e.end || e.end >= f {
                    return Err(Error::Generation(format!("event {e:?} outside {f} frames")));
                }
                if vocab.id_of(e.verb, e.tool, e.target).is_none() {
                    return Err(Error::Generation(format!("event {e:?} has no triplet id")));
                }
            }
            ev.clone()
        }
        None => random_events(cfg, &vocab, &mut rng),
    };
    let mut triplets = vec![0u16; f];
    for e in &events {
        let id = vocab.id_of(e.verb, e.tool, e.target).expect("checked above");
        for t in triplets.iter_mut().take(e.end + 1).skip(e.start) {
            if *t == 0 {
                *t = id;
            }
        }
    }

    let margin = |p: (f64, f64)| (p.0.clamp(2.0, h - 3.0), p.1.clamp(2.0, w - 3.0));
    let mut video = Array4::<f32>::zeros((f, cfg.height, cfg.width, 3));
    let mut panoptic = Array3::<u16>::zeros((f, cfg.height, cfg.width));
    let mut event_start_dir: BTreeMap<usize, (f64, f64, f64)> = BTreeMap::new();

    for fi in 0..f {
        // Tool positions for this frame.
        if fi > 0 {
            for k in 0..cfg.n_tools {
                let active = events
                    .iter()
                    .enumerate()
                    .find(|(_, e)| e.tool == k + 1 && (e.start..=e.end).contains(&fi));
                let p = tool_pos[k];
                let next = match active {
                    Some((idx, e)) => {
                        let target = &anatomy[e.target - 1];
                        let (dy0, dx0, d0) = *event_start_dir.entry(idx).or_insert_with(|| {
                            let dy = p.0 - target.cy;
                            let dx = p.1 - target.cx;
                            let d = (dy * dy + dx * dx).sqrt().max(1e-6);
                            (dy / d, dx / d, d)
                        });
                        let n = (e.end - e.start + 1) as f64;
                        let k_rel = (fi - e.start) as f64;
                        let d = match e.verb {
                            Verb::Retract => d0 * (1.0 - 0.6 * (PI * k_rel / (n - 1.0).max(1.0)).sin()),
                            Verb::Grasp => {
                                let reach = target.mean_radius();
                                d0 + (reach - d0) * ((k_rel + 1.0) / n).min(1.0)
                            }
                            Verb::Dissect => {
                                (target.mean_radius() + 1.0) * (1.0 + 0.15 * (2.0 * k_rel).sin())
                            }
                            Verb::Idle => d0,
                        };
                        let swing = if e.verb == Verb::Dissect { 0.3 * (1.3 * k_rel).sin() } else { 0.0 };
                        let (sy, sx) = (dy0 * swing.cos() - dx0 * swing.sin(), dy0 * swing.sin() + dx0 * swing.cos());
                        (target.cy + sy * d, target.cx + sx * d)
                    }
                    None => {
                        let regime = phases[fi] % 3;
                        match regime {
                            0 => (p.0 + 0.2 * scale * (fi as f64).sin(), p.1 + 0.2 * scale * (fi as f64).cos()),
                            1 => {
                                let near = anatomy
                                    .iter()
                                    .min_by(|a, b| {
                                        let da = (a.cy - p.0).powi(2) + (a.cx - p.1).powi(2);
                                        let db = (b.cy - p.0).powi(2) + (b.cx - p.1).powi(2);
                                        da.total_cmp(&db)
                                    })
                                    .expect("at least one anatomy entity");
                                let (dy, dx) = (near.cy - p.0, near.cx - p.1);
                                let d = (dy * dy + dx * dx).sqrt();
                                let stop = near.mean_radius() + 1.0;
                                if d > stop {
                                    let step = (1.2 * scale).min(d - stop);
                                    (p.0 + dy / d * step, p.1 + dx / d * step)
                                } else {
                                    p
                                }
                            }
                            _ => {
                                let v = &mut sweep_vel[k];
                                let mut q = (p.0 + v.0 * scale, p.1 + v.1 * scale);
                                if q.0 < 3.0 || q.0 > h - 4.0 {
                                    v.0 = -v.0;
                                    q.0 = p.0 + v.0 * scale;
                                }
                                if q.1 < 3.0 || q.1 > w - 4.0 {
                                    v.1 = -v.1;
                                    q.1 = p.1 + v.1 * scale;
                                }
                                q
                            }
                        }
                    }
                };
                tool_pos[k] = margin(next);
            }
        } else {
            for p in tool_pos.iter_mut() {
                *p = margin(*p);
            }
        }

        let shapes: Vec<(f64, f64, f64)> = anatomy.iter().map(|a| a.at(fi, scale)).collect();
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                let g = ((py / h - 0.5) * bg_dir.sin() + (px / w - 0.5) * bg_dir.cos()) * 0.12;
                let mut color = bg_base.map(|c| c + g);
                let mut id = 0u16;
                for (a, (e, &(ry, rx, ang))) in anatomy.iter().zip(&shapes).enumerate() {
                    let (dy, dx) = (py - e.cy, px - e.cx);
                    let u = dy * ang.cos() + dx * ang.sin();
                    let v = -dy * ang.sin() + dx * ang.cos();
                    let r2 = (u / ry).powi(2) + (v / rx).powi(2);
                    if r2 <= 1.0 {
                        id = (a + 1) as u16;
                        color = e.color.map(|c| c - 0.06 * r2);
                    }
                }
                for (k, (tool, &(ty, tx))) in tools.iter().zip(&tool_pos).enumerate() {
                    let (ay, ax) = (tool.angle.sin(), tool.angle.cos());
                    let (dy, dx) = (py - ty, px - tx);
                    let along = (dy * ay + dx * ax).clamp(-tool.half_len, tool.half_len);
                    let (ny, nx) = (dy - along * ay, dx - along * ax);
                    let dist2 = ny * ny + nx * nx;
                    if dist2 <= tool.radius * tool.radius {
                        id = cfg.tool_id(k + 1);
                        let shade = 0.05 * (along / tool.half_len);
                        color = tool.color.map(|c| c + shade);
                    }
                }
                panoptic[[fi, y, x]] = id;
                for c in 0..3 {
                    video[[fi, y, x, c]] = color[c].clamp(0.0, 1.0) as f32;
                }
            }
        }
    }

    let mut entity_kinds = BTreeMap::new();
    for a in 1..=cfg.n_anatomy {
        entity_kinds.insert(a as u16, EntityKind::Anatomy);
    }
    for k in 1..=cfg.n_tools {
        entity_kinds.insert(cfg.tool_id(k), EntityKind::Tool);
    }
    Ok(SceneSample {
        video,
        panoptic,
        labels: SceneLabels {
            phases,
            triplets,
            entity_kinds,
            phase_names: cfg.phase_names(),
            triplet_names: vocab.names(),
        },
        fps: cfg.fps,
        seed: cfg.seed,
    })
}

/// Non-decreasing piecewise-constant phases, at least two per 16 frames.
fn phase_schedule(cfg: &SceneConfig, rng: &mut Rng) -> Vec<u16> {
    let f = cfg.frames;
    let segments = (2 * f.div_ceil(16)).min(cfg.phase_count).min(f).max(1);
    let first = rng.random_range(0..=cfg.phase_count - segments);
    // Cut points with every segment at least `min_len` long where possible.
    let min_len = (f / (2 * segments)).max(1);
    let mut cuts = Vec::with_capacity(segments - 1);
    let mut lo = min_len;
    for s in 1..segments {
        let hi = f - (segments - s) * min_len;
        let cut = if hi > lo { rng.random_range(lo..=hi) } else { lo.min(f - 1) };
        cuts.push(cut);
        lo = cut + min_len;
    }
    let mut phases = Vec::with_capacity(f);
    let mut seg = 0;
    for i in 0..f {
        while seg < cuts.len() && i >= cuts[seg] {
            seg += 1;
        }
        phases.push((first + seg) as u16);
    }
    phases
}

fn random_events(cfg: &SceneConfig, vocab: &TripletVocab, rng: &mut Rng) -> Vec<TripletEvent> {
    let f = cfg.frames;
    let stretch = if cfg.fps == 8 { 3 } else { 1 };
    let count = 1 + f / (16 * stretch);
    let mut events = Vec::new();
    let mut cursor = rng.random_range(0..=2 * stretch);
    for _ in 0..count {
        let len = rng.random_range(4 * stretch..=8 * stretch);
        if cursor + len > f {
            break;
        }
        let candidates: Vec<(Verb, usize, usize)> = (1..=cfg.n_tools)
            .flat_map(|t| Verb::ALL.into_iter().flat_map(move |v| (1..=cfg.n_anatomy).map(move |a| (v, t, a))))
            .filter(|&(v, t, a)| vocab.id_of(v, t, a).is_some())
            .collect();
        if candidates.is_empty() {
            break;
        }
        let (verb, tool, target) = candidates[rng.random_range(0..candidates.len())];
        events.push(TripletEvent {
            verb,
            tool,
            target,
            start: cursor,
            end: cursor + len - 1,
        });
        cursor += len + rng.random_range(1..=3 * stretch);
    }
    events
}

/// Mask centroid `(row, col)` of `id` in one frame.
pub fn centroid(map: &PanopticMap, frame: usize, id: u16) -> Option<(f64, f64)> {
    let (mut n, mut sy, mut sx) = (0usize, 0.0, 0.0);
    for ((y, x), &v) in map.index_axis(ndarray::Axis(0), frame).indexed_iter() {
        if v == id {
            n += 1;
            sy += y as f64 + 0.5;
            sx += x as f64 + 0.5;
        }
    }
    (n > 0).then(|| (sy / n as f64, sx / n as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleManifest {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: u32,
    pub seed: u64,
    /// CRC32 of every other file in the directory.
    pub files: BTreeMap<String, u32>,
}

pub const VIDEO_FILE: &str = "video.hstn";
pub const PANOPTIC_FILE: &str = "panoptic.hstn";
pub const LABELS_FILE: &str = "labels.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes a sample directory and returns its manifest.
pub fn write_sample(sample: &SceneSample, dir: &Path) -> Result<SampleManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (f, h, w, _) = sample.video.dim();
    let video = Tensor::F32(sample.video.clone().into_dyn()).to_bytes();
    let panoptic = Tensor::U16(sample.panoptic.clone().into_dyn()).to_bytes();
    let labels = serde_json::to_vec_pretty(&sample.labels)?;
    let mut files = BTreeMap::new();
    for (name, bytes) in [(VIDEO_FILE, &video), (PANOPTIC_FILE, &panoptic), (LABELS_FILE, &labels)] {
        write_atomic(&dir.join(name), bytes)?;
        files.insert(name.to_string(), crc32fast::hash(bytes));
    }
    let manifest = SampleManifest {
        frames: f,
        height: h,
        width: w,
        fps: sample.fps,
        seed: sample.seed,
        files,
    };
    write_atomic(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

fn read_checked(dir: &Path, name: &str, manifest: &SampleManifest) -> Result<Vec<u8>> {
    let path = dir.join(name);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let want = manifest
        .files
        .get(name)
        .ok_or_else(|| Error::integrity(&path, "not listed in manifest"))?;
    if crc32fast::hash(&bytes) != *want {
        return Err(Error::integrity(&path, "checksum mismatch"));
    }
    Ok(bytes)
}

pub fn read_manifest(dir: &Path) -> Result<SampleManifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::integrity(&path, e.to_string()))
}

pub fn read_sample(dir: &Path) -> Result<SceneSample> {
    let manifest = read_manifest(dir)?;
    let vpath = dir.join(VIDEO_FILE);
    let ppath = dir.join(PANOPTIC_FILE);
    let lpath = dir.join(LABELS_FILE);
    let video = Tensor::from_bytes(&read_checked(dir, VIDEO_FILE, &manifest)?, &vpath)?
        .into_f32(&vpath)?
        .into_dimensionality()
        .map_err(|_| Error::integrity(&vpath, "video is not 4-D"))?;
    let panoptic: PanopticMap = Tensor::from_bytes(&read_checked(dir, PANOPTIC_FILE, &manifest)?, &ppath)?
        .into_u16(&ppath)?
        .into_dimensionality()
        .map_err(|_| Error::integrity(&ppath, "panoptic map is not 3-D"))?;
    let labels: SceneLabels = serde_json::from_slice(&read_checked(dir, LABELS_FILE, &manifest)?)
        .map_err(|e| Error::integrity(&lpath, e.to_string()))?;
    let sample = SceneSample {
        video,
        panoptic,
        labels,
        fps: manifest.fps,
        seed: manifest.seed,
    };
    let (f, h, w, _) = sample.video.dim();
    if (f, h, w) != (manifest.frames, manifest.height, manifest.width)
        || sample.panoptic.dim() != (f, h, w)
        || sample.labels.phases.len() != f
        || sample.labels.triplets.len() != f
    {
        return Err(Error::integrity(&dir.join(MANIFEST_FILE), "shapes disagree with manifest"));
    }
    Ok(sample)
}
