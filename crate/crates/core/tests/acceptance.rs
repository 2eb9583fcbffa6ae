//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails. The smoke-training criteria share a single
//! dataset and set of checkpoints, so the whole file is one test.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::{Duration, Instant};

use hierasurg::codec::{kmeans_discretize, Codec, CodecConfig, LatentMode, Palette};
use hierasurg::denoiser::{Conditioning, ConditioningBundle, DiTConfig, Dit, DitMode, SegInput};
use hierasurg::diffusion::{gaussian_like, predict_x0, q_sample, NoiseSchedule};
use hierasurg::metrics::{
    agreement_counts, evaluate_pairs, frechet_distance, match_boxes, ssim, Box2, EvalPair,
    GaussianStats,
};
use hierasurg::pipeline::{
    cmd_evaluate, cmd_generate_split, cmd_label, cmd_make_data, cmd_train, EvaluateOptions, GenerateMode,
    LabelOptions, RunConfig, Stage,
};
use hierasurg::seg_pipeline::{
    build_panoptic, score_labeling, LabelConfig, OracleFeatures, OracleSegmenter, OracleTracker,
};
use hierasurg::synthetic::{generate_scene, EntityKind, SceneConfig};
use hierasurg::{seeded_rng, PanopticMap, VideoTensor};
use ndarray::{Array3, Array4};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn diffusion_algebra() -> Verdict {
    let start = Instant::now();
    let sched = NoiseSchedule::default_linear();
    let mut rng = seeded_rng(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let t = rng.random_range(1..=sched.num_steps());
        let x0 = gaussian_like([1, 2, 3, 4], &mut rng);
        let eps = gaussian_like([1, 2, 3, 4], &mut rng);
        let xt = q_sample(&x0, t, &eps, &sched).unwrap();
        let back = predict_x0(&xt, t, &eps, &sched).unwrap();
        for (a, b) in back.iter().zip(x0.iter()) {
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
    }
    // Marginal variance of x_t for x0 = 0 is 1 − ᾱ_t.
    let mut var_ok = true;
    for t in [1, 250, 1000] {
        let n = 10_000;
        let eps = gaussian_like([n, 1, 1, 1], &mut rng);
        let xt = q_sample(&Array4::zeros((n, 1, 1, 1)), t, &eps, &sched).unwrap();
        let var = xt.mapv(|v| v * v).mean().unwrap();
        let want = 1.0 - sched.alpha_cum(t).unwrap();
        let se = want * (2.0 / n as f64).sqrt();
        var_ok &= (var - want).abs() <= 3.0 * se;
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst < 1e-5 && var_ok && secs < 10.0,
        format!("max relative error {worst:.1e}, variance within 3 SE: {var_ok}, {secs:.1}s"),
    )
}

fn tiny_dit(m2v: bool) -> DiTConfig {
    let base = DiTConfig {
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
    };
    if m2v {
        DiTConfig {
            mode: DitMode::M2v,
            use_labels: false,
            frames_per_latent: 2,
            ..base
        }
    } else {
        base
    }
}

/// Worst relative gap between analytic and central-difference gradients over
/// sampled entries of every parameter tensor.
fn worst_gradient_error(mut dit: Dit, z_in: &Array4<f64>, cond: &Conditioning) -> f64 {
    dit.jitter_params(0.3, 11);
    let (f, h, w, _) = z_in.dim();
    let eps = gaussian_like([f, h, w, dit.config().latent_channels], &mut seeded_rng(12));
    let (_, grads) = dit.loss_and_grads(z_in, 37, cond, &eps).unwrap();
    assert_eq!(grads.len(), dit.params().len());
    let step = 1e-5;
    let mut worst = 0.0f64;
    for (name, analytic) in &grads {
        let n = analytic.len();
        let (mut diff2, mut a2, mut fd2) = (0.0, 0.0, 0.0);
        for k in (0..n).step_by((n / 6).max(1)) {
            let (r, c) = (k / analytic.ncols(), k % analytic.ncols());
            let orig = dit.params().get(name).unwrap()[[r, c]];
            dit.params_mut().get_mut(name).unwrap()[[r, c]] = orig + step;
            let up = dit.loss(z_in, 37, cond, &eps).unwrap();
            dit.params_mut().get_mut(name).unwrap()[[r, c]] = orig - step;
            let down = dit.loss(z_in, 37, cond, &eps).unwrap();
            dit.params_mut().get_mut(name).unwrap()[[r, c]] = orig;
            let fd = (up - down) / (2.0 * step);
            let a = analytic[[r, c]];
            diff2 += (a - fd) * (a - fd);
            a2 += a * a;
            fd2 += fd * fd;
        }
        let scale = a2.sqrt() + fd2.sqrt();
        if scale > 1e-10 {
            worst = worst.max(diff2.sqrt() / scale);
        }
    }
    worst
}

fn gradient_check() -> Verdict {
    let start = Instant::now();
    let s2m = tiny_dit(false);
    let bundle = ConditioningBundle {
        phases: vec![0, 1, 2],
        triplets: vec![3, 0, 1],
    };
    let z = gaussian_like([3, 4, 2, s2m.input_channels()], &mut seeded_rng(8));
    let e_s2m = worst_gradient_error(
        Dit::new(s2m, 7, None).unwrap(),
        &z,
        &Conditioning {
            labels: Some(&bundle),
            segmentation: None,
        },
    );
    let m2v = tiny_dit(true);
    let maps = gaussian_like([4, 16, 8, 3], &mut seeded_rng(13)).mapv(|v| (v.abs() * 0.3).min(1.0) as f32);
    let z = gaussian_like([2, 4, 2, m2v.input_channels()], &mut seeded_rng(8));
    let e_m2v = worst_gradient_error(
        Dit::new(m2v, 7, None).unwrap(),
        &z,
        &Conditioning {
            labels: None,
            segmentation: Some(SegInput::Colors {
                maps: &maps,
                video_frames: 4,
            }),
        },
    );
    let secs = start.elapsed().as_secs_f64();
    verdict(
        e_s2m < 1e-3 && e_m2v < 1e-3 && secs < 120.0,
        format!("worst relative error s2m {e_s2m:.1e}, m2v {e_m2v:.1e}, {secs:.1}s"),
    )
}

fn codec_round_trip() -> Verdict {
    let codec = Codec::new(CodecConfig::default()).unwrap();
    let r = codec.config().temporal_factor;
    let mut worst = 0.0f32;
    let mut frames_ok = true;
    for (mode, frames) in [(LatentMode::Dense, 16), (LatentMode::Compressed, 16), (LatentMode::Compressed, 9)] {
        let video = VideoTensor::from_shape_fn((frames, 32, 48, 3), |(f, y, x, c)| {
            ((f * 7 + y * 3 + x * 5 + c * 11) % 17) as f32 / 16.0
        });
        let (z, want) = match mode {
            LatentMode::Dense => (codec.encode_dense(&video).unwrap(), frames),
            LatentMode::Compressed => (codec.encode_compressed(&video).unwrap(), frames.div_ceil(r)),
        };
        frames_ok &= z.latent_frames() == want;
        let back = codec.decode(&z).unwrap();
        for (a, b) in back.iter().zip(video.iter()) {
            worst = worst.max((a - b).abs());
        }
    }
    verdict(
        worst < 1e-6 && frames_ok,
        format!("max round-trip error {worst:.1e}, latent frame counts correct: {frames_ok}"),
    )
}

fn permutation_equivalent(a: &PanopticMap, b: &PanopticMap) -> bool {
    let mut fwd = HashMap::new();
    let mut back = HashMap::new();
    a.iter()
        .zip(b.iter())
        .all(|(&x, &y)| *fwd.entry(x).or_insert(y) == y && *back.entry(y).or_insert(x) == x)
}

fn discretization() -> Verdict {
    let start = Instant::now();
    let noise = Normal::new(0.0, 0.02).unwrap();
    let mut failures = 0;
    for k in 2..=8u16 {
        let palette = Palette::for_ids(1..k).unwrap();
        for seed in 0..20u64 {
            let seg = Array3::from_shape_fn((2, 16, 24), |(f, i, j)| {
                ((i / 4 + j / 6 * 3 + f + seed as usize) % k as usize) as u16
            });
            let mut colors = palette.colorize(&seg).unwrap();
            let mut rng = seeded_rng(seed);
            colors.mapv_inplace(|v| v + noise.sample(&mut rng) as f32);
            let (map, found) = kmeans_discretize(&colors, 10, seed).unwrap();
            if found.len() != k as usize || !permutation_equivalent(&map, &seg) {
                failures += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        failures == 0 && secs < 60.0,
        format!("{failures} of 140 maps not recovered, {secs:.1}s"),
    )
}

fn labeling() -> Verdict {
    let mut iou = [0.0f64; 2];
    let mut switches = 0;
    let n = 32;
    for seed in 0..n as u64 {
        let scene = generate_scene(&SceneConfig {
            seed,
            ..Default::default()
        })
        .unwrap();
        for (slot, noise) in [0.0, 0.1].into_iter().enumerate() {
            let out = build_panoptic(
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
            .unwrap();
            let score = score_labeling(&out.map, &scene.panoptic).unwrap();
            iou[slot] += score.mean_iou / n as f64;
            if slot == 0 {
                switches += score.identity_switches;
            }
        }
    }
    verdict(
        iou[0] >= 0.95 && switches == 0 && iou[1] >= 0.85,
        format!("IoU {:.3} clean with {switches} switches, {:.3} at 10% feature noise", iou[0], iou[1]),
    )
}

fn scalar_frechet(m1: f64, v1: f64, m2: f64, v2: f64) -> f64 {
    (m1 - m2).powi(2) + v1 + v2 - 2.0 * (v1 * v2).sqrt()
}

fn rand_box(rng: &mut impl Rng, id: u16) -> Box2 {
    let (top, left) = (rng.random_range(0..8), rng.random_range(0..8));
    Box2 {
        frame: 0,
        top,
        left,
        bottom: top + rng.random_range(1..6),
        right: left + rng.random_range(1..6),
        entity_id: id,
        kind: EntityKind::Tool,
    }
}

/// Most pairs above threshold, over every partial assignment.
fn exhaustive_pairs(real: &[Box2], gen: &[Box2], thr: f64, used: u32, i: usize) -> usize {
    if i == real.len() {
        return 0;
    }
    let mut best = exhaustive_pairs(real, gen, thr, used, i + 1);
    for (j, g) in gen.iter().enumerate() {
        if used & (1 << j) == 0 && hierasurg::metrics::iou(&real[i], g) >= thr {
            best = best.max(1 + exhaustive_pairs(real, gen, thr, used | (1 << j), i + 1));
        }
    }
    best
}

fn metric_oracles() -> Verdict {
    let mut notes = Vec::new();
    let stats = |mean: Vec<f64>, cov: Vec<f64>| GaussianStats { mean, cov, count: 100 };
    let d1 = frechet_distance(&stats(vec![1.0], vec![4.0]), &stats(vec![-0.5], vec![0.25])).unwrap();
    let want1 = scalar_frechet(1.0, 4.0, -0.5, 0.25);
    // Diagonal 2D case is the sum of per-axis scalar forms.
    let d2 = frechet_distance(
        &stats(vec![0.0, 2.0], vec![1.0, 0.0, 0.0, 9.0]),
        &stats(vec![1.0, 0.0], vec![4.0, 0.0, 0.0, 1.0]),
    )
    .unwrap();
    let want2 = scalar_frechet(0.0, 1.0, 1.0, 4.0) + scalar_frechet(2.0, 9.0, 0.0, 1.0);
    let frechet_ok = (d1 - want1).abs() < 1e-9 && (d2 - want2).abs() < 1e-9;
    notes.push(format!("Fréchet closed form: {frechet_ok}"));

    let scene = generate_scene(&SceneConfig::default()).unwrap();
    let ssim_ok = ssim(&scene.video, &scene.video).unwrap() == 1.0;
    notes.push(format!("ssim(x, x) = 1: {ssim_ok}"));

    let mut rng = seeded_rng(4);
    let mut mismatches = 0;
    for _ in 0..2000 {
        let real: Vec<Box2> = (0..rng.random_range(0..=3)).map(|i| rand_box(&mut rng, i)).collect();
        let gen: Vec<Box2> = (0..rng.random_range(0..=3)).map(|i| rand_box(&mut rng, i)).collect();
        if match_boxes(&real, &gen, 0.5).len() != exhaustive_pairs(&real, &gen, 0.5, 0, 0) {
            mismatches += 1;
        }
    }
    notes.push(format!("matching mismatches {mismatches}/2000"));

    let report = evaluate_pairs(&[EvalPair {
        real: &scene.video,
        real_map: &scene.panoptic,
        generated: &scene.video,
        kinds: &scene.labels.entity_kinds,
    }])
    .unwrap();
    let self_ok = report.ssim == 1.0
        && report.fvd_analog <= 1e-6
        && report.fid_analog <= 1e-6
        && (report.hr_real, report.hr_gen, report.miou) == (1.0, 1.0, 1.0);
    notes.push(format!("self-evaluation exact: {self_ok}"));
    let counts = agreement_counts(&[], &[], 0.5);
    let empty_ok = counts.total_real == 0 && counts.matched == 0;
    verdict(frechet_ok && ssim_ok && mismatches == 0 && self_ok && empty_ok, notes.join(", "))
}

/// Mean of the logged losses over `steps` (1-based, inclusive).
fn mean_loss(log: &[(u64, f64)], steps: std::ops::RangeInclusive<u64>) -> f64 {
    let picked: Vec<f64> = log.iter().filter(|(s, _)| steps.contains(s)).map(|&(_, l)| l).collect();
    picked.iter().sum::<f64>() / picked.len() as f64
}

struct SmokeRun {
    halving: Verdict,
    efficacy: Verdict,
}

fn smoke(root: &Path) -> SmokeRun {
    let start = Instant::now();
    let ds = root.join("ds");
    let mut cfg = RunConfig::smoke();
    cfg.data.dataset_dir = ds.clone();
    cmd_make_data(&cfg, &ds, cfg.data.count, false).unwrap();

    let train = |stage: Stage, use_labels: bool, name: &str| {
        let mut c = cfg.clone();
        c.stage = stage;
        c.dit.use_labels = use_labels;
        let path = root.join(name);
        (cmd_train(&c, &path).unwrap().losses, path)
    };
    let (s2m_log, s2m) = train(Stage::S2m, true, "s2m.ckpt");
    let (m2v_log, m2v) = train(Stage::M2v, false, "m2v.ckpt");
    let train_time = start.elapsed();

    let steps = cfg.optim.steps;
    let early = 1..=50;
    let late = steps - 99..=steps;
    let halves = |log: &[(u64, f64)]| (mean_loss(log, early.clone()), mean_loss(log, late.clone()));
    let (s_first, s_last) = halves(&s2m_log);
    let (m_first, m_last) = halves(&m2v_log);
    let budget = Duration::from_secs(30 * 60);
    let halving = verdict(
        s_last <= 0.5 * s_first && m_last <= 0.5 * m_first && train_time <= budget,
        format!(
            "s2m {s_first:.3} -> {s_last:.3}, m2v {m_first:.3} -> {m_last:.3} over {steps} steps, {:.0}s",
            train_time.as_secs_f64()
        ),
    );

    let evaluate = |mode: GenerateMode, tag: &str| {
        let out = root.join(format!("gen_{tag}"));
        cmd_generate_split(Some(&s2m), &m2v, &ds, "test", &out, mode, None, 0).unwrap();
        cmd_evaluate(&ds, &out, &root.join(format!("{tag}.json")), EvaluateOptions { allow_subset: true }).unwrap()
    };
    let gt = evaluate(GenerateMode::M2vOnly, "m2v_only");
    let zeroed = evaluate(GenerateMode::Unconditioned, "zeroed");
    let full = evaluate(GenerateMode::Full, "full");
    let (unlabeled_log, _) = train(Stage::S2m, false, "s2m_nolabels.ckpt");
    let tail = steps - 499..=steps;
    let with_labels = mean_loss(&s2m_log, tail.clone());
    let without = mean_loss(&unlabeled_log, tail);

    let a = gt.hr_gen > zeroed.hr_gen && gt.miou > zeroed.miou;
    let b = gt.miou >= full.miou;
    let c = with_labels <= without;
    let efficacy = verdict(
        a && b && c && gt.n_samples >= 16,
        format!(
            "(a) {a}: hr_gen {:.3} vs {:.3}, MIoU {:.3} vs {:.3}; (b) {b}: MIoU {:.3} vs full {:.3}; \
             (c) {c}: late loss {with_labels:.4} with labels vs {without:.4}; {} scenes",
            gt.hr_gen, zeroed.hr_gen, gt.miou, zeroed.miou, gt.miou, full.miou, gt.n_samples
        ),
    );
    SmokeRun { halving, efficacy }
}

fn tree_hashes(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                let digest = Sha256::digest(std::fs::read(&path).unwrap());
                out.insert(rel, digest.iter().map(|b| format!("{b:02x}")).collect());
            }
        }
    }
    out
}

/// Every command the CLI exposes, on a tiny model.
fn run_commands(work: &Path) {
    let ds = work.join("ds");
    let mut cfg = RunConfig::smoke();
    cfg.dit.embed_dim = 8;
    cfg.dit.cond_dim = 8;
    cfg.dit.num_blocks = 1;
    cfg.dit.num_heads = 2;
    cfg.dit.label_dim = 4;
    cfg.dit.seg_channels = [4, 8];
    cfg.schedule.sample_stride = 250;
    cfg.optim.steps = 3;
    cfg.data.dataset_dir = ds.clone();
    cmd_make_data(&cfg, &ds, 4, false).unwrap();
    let opts = LabelOptions {
        clip_len: 8,
        feature_noise: 0.1,
        ..Default::default()
    };
    cmd_label(&ds, &work.join("labels"), &opts).unwrap();
    for stage in [Stage::S2m, Stage::M2v] {
        let c = RunConfig { stage, ..cfg.clone() };
        cmd_train(&c, &work.join(format!("{}.ckpt", stage.name()))).unwrap();
    }
    let gen = work.join("gen");
    cmd_generate_split(Some(&work.join("s2m.ckpt")), &work.join("m2v.ckpt"), &ds, "test", &gen, GenerateMode::Full, None, 11)
        .unwrap();
    cmd_evaluate(&ds, &gen, &work.join("report.json"), EvaluateOptions { allow_subset: true }).unwrap();
}

fn determinism(root: &Path) -> Verdict {
    let work = root.join("determinism");
    run_commands(&work);
    let first = tree_hashes(&work);
    std::fs::remove_dir_all(&work).unwrap();
    run_commands(&work);
    let second = tree_hashes(&work);
    verdict(
        first == second && !first.is_empty(),
        format!("{} output files, identical hashes: {}", first.len(), first == second),
    )
}

#[test]
fn acceptance() {
    let dir = tempfile::tempdir().unwrap();
    let smoke_run = smoke(dir.path());
    let results = [
        ("diffusion algebra", diffusion_algebra()),
        ("gradient correctness", gradient_check()),
        ("codec round trips", codec_round_trip()),
        ("discretization", discretization()),
        ("labeling pipeline", labeling()),
        ("metric oracles", metric_oracles()),
        ("smoke training", smoke_run.halving),
        ("conditioning efficacy", smoke_run.efficacy),
        ("determinism", determinism(dir.path())),
    ];
    for (i, (name, v)) in results.iter().enumerate() {
        println!("{} criterion {} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, i + 1, v.detail);
    }
    let failed: Vec<usize> = results
        .iter()
        .enumerate()
        .filter(|(_, (_, v))| !v.pass)
        .map(|(i, _)| i + 1)
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
