//! Python bindings. Arrays cross the boundary as numpy arrays: videos are
//! `float32` `F×H×W×3` in `[0, 1]`, latents `float64` `F×H'×W'×d`, and
//! panoptic maps `uint16` `F×H×W`.

use std::path::PathBuf;

use hierasurg::codec::{self, CodecConfig, LatentMode, LatentVideo};
use hierasurg::diffusion::{self, ScheduleKind};
use hierasurg::metrics;
use hierasurg::pipeline::{self, EvaluateOptions, GenerateMode, LabelOptions, RunConfig};
use hierasurg::synthetic::{self, SceneConfig};
use hierasurg::Error;
use numpy::{IntoPyArray, PyArray3, PyArray4, PyReadonlyArray2, PyReadonlyArray4};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(hierasurg, RefusalError, PyException, "The command refused to run on its inputs.");

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Refusal(_) => RefusalError::new_err(e.to_string()),
        Error::Parameter(_) | Error::Shape(_) | Error::Lookup(_) | Error::Usage(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Linear DDPM noise schedule, indexed by `t = 1..=T`.
#[pyclass(name = "NoiseSchedule", frozen)]
struct PySchedule(diffusion::NoiseSchedule);

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (steps = 1000, beta_start = 1e-4, beta_end = 0.02))]
    fn new(steps: usize, beta_start: f64, beta_end: f64) -> PyResult<Self> {
        diffusion::NoiseSchedule::new(steps, beta_start, beta_end, ScheduleKind::Linear)
            .map(Self)
            .map_err(py_err)
    }

    #[getter]
    fn num_steps(&self) -> usize {
        self.0.num_steps()
    }

    fn beta(&self, t: usize) -> PyResult<f64> {
        self.0.beta(t).map_err(py_err)
    }

    fn alpha_cum(&self, t: usize) -> PyResult<f64> {
        self.0.alpha_cum(t).map_err(py_err)
    }

    fn sigma2(&self, t: usize) -> PyResult<f64> {
        self.0.sigma2(t).map_err(py_err)
    }

    /// Keeps every `stride`-th step with unchanged cumulative products.
    fn respaced(&self, stride: usize) -> PyResult<Self> {
        self.0.respaced(stride).map(Self).map_err(py_err)
    }

    fn q_sample<'py>(
        &self,
        py: Python<'py>,
        x0: PyReadonlyArray4<'py, f64>,
        t: usize,
        eps: PyReadonlyArray4<'py, f64>,
    ) -> PyResult<Bound<'py, PyArray4<f64>>> {
        let out = diffusion::q_sample(&x0.as_array().to_owned(), t, &eps.as_array().to_owned(), &self.0).map_err(py_err)?;
        Ok(out.into_pyarray(py))
    }

    fn predict_x0<'py>(
        &self,
        py: Python<'py>,
        xt: PyReadonlyArray4<'py, f64>,
        t: usize,
        eps: PyReadonlyArray4<'py, f64>,
    ) -> PyResult<Bound<'py, PyArray4<f64>>> {
        let out = diffusion::predict_x0(&xt.as_array().to_owned(), t, &eps.as_array().to_owned(), &self.0).map_err(py_err)?;
        Ok(out.into_pyarray(py))
    }

    fn posterior_step<'py>(
        &self,
        py: Python<'py>,
        xt: PyReadonlyArray4<'py, f64>,
        t: usize,
        eps: PyReadonlyArray4<'py, f64>,
        noise: PyReadonlyArray4<'py, f64>,
    ) -> PyResult<Bound<'py, PyArray4<f64>>> {
        let out = diffusion::posterior_step(
            &xt.as_array().to_owned(),
            t,
            &eps.as_array().to_owned(),
            &self.0,
            &noise.as_array().to_owned(),
        )
        .map_err(py_err)?;
        Ok(out.into_pyarray(py))
    }
}

/// Orthonormal patch codec.
#[pyclass(name = "Codec", frozen)]
struct PyCodec(codec::Codec);

fn parse_mode(mode: &str) -> PyResult<LatentMode> {
    match mode {
        "dense" => Ok(LatentMode::Dense),
        "compressed" => Ok(LatentMode::Compressed),
        other => Err(PyValueError::new_err(format!("mode must be dense or compressed, got {other:?}"))),
    }
}

#[pymethods]
impl PyCodec {
    #[new]
    #[pyo3(signature = (spatial_patch = 4, temporal_factor = 4, projection_seed = 7))]
    fn new(spatial_patch: usize, temporal_factor: usize, projection_seed: u64) -> PyResult<Self> {
        let cfg = CodecConfig {
            spatial_patch,
            temporal_factor,
            projection_seed,
            ..CodecConfig::default()
        };
        codec::Codec::new(cfg).map(Self).map_err(py_err)
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.0.config().latent_dim()
    }

    #[getter]
    fn dense_channels(&self) -> usize {
        self.0.dense_channels()
    }

    fn encode_dense<'py>(&self, py: Python<'py>, video: PyReadonlyArray4<'py, f32>) -> PyResult<Bound<'py, PyArray4<f64>>> {
        let z = self.0.encode_dense(&video.as_array().to_owned()).map_err(py_err)?;
        Ok(z.data.into_pyarray(py))
    }

    fn encode_compressed<'py>(
        &self,
        py: Python<'py>,
        video: PyReadonlyArray4<'py, f32>,
    ) -> PyResult<Bound<'py, PyArray4<f64>>> {
        let z = self.0.encode_compressed(&video.as_array().to_owned()).map_err(py_err)?;
        Ok(z.data.into_pyarray(py))
    }

    /// Decodes a latent back to `frames` video frames.
    fn decode<'py>(
        &self,
        py: Python<'py>,
        z: PyReadonlyArray4<'py, f64>,
        mode: &str,
        frames: usize,
    ) -> PyResult<Bound<'py, PyArray4<f32>>> {
        let latent = LatentVideo {
            data: z.as_array().to_owned(),
            mode: parse_mode(mode)?,
            frames,
        };
        Ok(self.0.decode(&latent).map_err(py_err)?.into_pyarray(py))
    }
}

#[pyfunction]
fn elbow_k(inertias: Vec<f64>) -> PyResult<usize> {
    codec::elbow_k(&inertias).map_err(py_err)
}

/// Clusters colors into at most `k_max` groups; returns the label map and a
/// `{label: (r, g, b)}` dict of cluster centres.
#[pyfunction]
#[pyo3(signature = (colors, k_max, seed = 0))]
fn kmeans_discretize<'py>(
    py: Python<'py>,
    colors: PyReadonlyArray4<'py, f32>,
    k_max: usize,
    seed: u64,
) -> PyResult<(Bound<'py, PyArray3<u16>>, Bound<'py, PyDict>)> {
    let (labels, palette) = codec::kmeans_discretize(&colors.as_array().to_owned(), k_max, seed).map_err(py_err)?;
    let centres = PyDict::new(py);
    for (id, c) in palette.iter() {
        centres.set_item(id, (c[0], c[1], c[2]))?;
    }
    Ok((labels.into_pyarray(py), centres))
}

/// Renders one synthetic scene with its ground-truth labels.
#[pyfunction]
#[pyo3(signature = (seed = 0, fps = 1))]
fn generate_scene(py: Python<'_>, seed: u64, fps: u32) -> PyResult<Bound<'_, PyDict>> {
    let cfg = SceneConfig::at_fps(fps, seed).map_err(py_err)?;
    let s = synthetic::generate_scene(&cfg).map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("video", s.video.into_pyarray(py))?;
    out.set_item("panoptic", s.panoptic.into_pyarray(py))?;
    out.set_item("phases", s.labels.phases)?;
    out.set_item("triplets", s.labels.triplets)?;
    out.set_item("phase_names", s.labels.phase_names)?;
    out.set_item("triplet_names", s.labels.triplet_names)?;
    out.set_item("fps", s.fps)?;
    out.set_item("seed", s.seed)?;
    Ok(out)
}

#[pyfunction]
fn ssim(a: PyReadonlyArray4<'_, f32>, b: PyReadonlyArray4<'_, f32>) -> PyResult<f64> {
    metrics::ssim(&a.as_array().to_owned(), &b.as_array().to_owned()).map_err(py_err)
}

/// Fréchet distance between Gaussian fits of two `N×D` feature sets.
#[pyfunction]
fn frechet_distance(a: PyReadonlyArray2<'_, f64>, b: PyReadonlyArray2<'_, f64>) -> PyResult<f64> {
    let rows = |x: &PyReadonlyArray2<'_, f64>| -> Vec<Vec<f64>> { x.as_array().outer_iter().map(|r| r.to_vec()).collect() };
    let sa = metrics::gaussian_stats(&rows(&a)).map_err(py_err)?;
    let sb = metrics::gaussian_stats(&rows(&b)).map_err(py_err)?;
    metrics::frechet_distance(&sa, &sb).map_err(py_err)
}

/// The default run config as JSON.
#[pyfunction]
fn default_config() -> String {
    RunConfig::default().to_json()
}

fn config_from(json: Option<&str>) -> PyResult<RunConfig> {
    let cfg = match json {
        Some(text) => RunConfig::from_json(text).map_err(py_err)?,
        None => RunConfig::default(),
    };
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

/// Writes a dataset; returns the number of samples.
#[pyfunction]
#[pyo3(signature = (out, count, config = None, force = false))]
fn make_data(py: Python<'_>, out: PathBuf, count: usize, config: Option<&str>, force: bool) -> PyResult<usize> {
    let cfg = config_from(config)?;
    py.detach(|| pipeline::cmd_make_data(&cfg, &out, count, force))
        .map(|m| m.count)
        .map_err(py_err)
}

/// Trains (or resumes) the stage named in `config`; returns `(step, loss)`.
#[pyfunction]
fn train(py: Python<'_>, config: &str, out: PathBuf) -> PyResult<Vec<(u64, f64)>> {
    let cfg = config_from(Some(config))?;
    py.detach(|| pipeline::cmd_train(&cfg, &out))
        .map(|r| r.losses)
        .map_err(py_err)
}

/// Generates one sample directory into `out`.
#[pyfunction]
#[pyo3(signature = (m2v, sample, out, s2m = None, mode = "full", seed = 0, stride = None))]
fn generate(
    py: Python<'_>,
    m2v: PathBuf,
    sample: PathBuf,
    out: PathBuf,
    s2m: Option<PathBuf>,
    mode: &str,
    seed: u64,
    stride: Option<usize>,
) -> PyResult<()> {
    let mode: GenerateMode = mode.parse().map_err(py_err)?;
    py.detach(|| pipeline::cmd_generate(s2m.as_deref(), &m2v, &sample, &out, mode, stride, seed))
        .map(|_| ())
        .map_err(py_err)
}

/// Scores generated samples against real ones; returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (real, generated, report, allow_subset = false))]
fn evaluate<'py>(
    py: Python<'py>,
    real: PathBuf,
    generated: PathBuf,
    report: PathBuf,
    allow_subset: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let r = py
        .detach(|| pipeline::cmd_evaluate(&real, &generated, &report, EvaluateOptions { allow_subset }))
        .map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("fvd_analog", r.fvd_analog)?;
    out.set_item("fid_analog", r.fid_analog)?;
    out.set_item("ssim", r.ssim)?;
    out.set_item("hr_real", r.hr_real)?;
    out.set_item("hr_gen", r.hr_gen)?;
    out.set_item("miou", r.miou)?;
    out.set_item("n_samples", r.n_samples)?;
    Ok(out)
}

/// Labels a dataset with oracle backends; returns `(mean_iou, identity_switches)`.
#[pyfunction]
#[pyo3(signature = (dataset, out, feature_noise = 0.0, boundary_noise = 0.0, clip_len = 0, overlap = 0.5, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn label(
    py: Python<'_>,
    dataset: PathBuf,
    out: PathBuf,
    feature_noise: f64,
    boundary_noise: f64,
    clip_len: usize,
    overlap: f64,
    seed: u64,
) -> PyResult<(f64, usize)> {
    let opts = LabelOptions {
        feature_noise,
        boundary_noise,
        clip_len,
        overlap,
        seed,
        ..LabelOptions::default()
    };
    py.detach(|| pipeline::cmd_label(&dataset, &out, &opts))
        .map(|s| (s.mean_iou, s.identity_switches))
        .map_err(py_err)
}

#[pymodule]
#[pyo3(name = "hierasurg")]
fn hierasurg_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("RefusalError", m.py().get_type::<RefusalError>())?;
    m.add_class::<PySchedule>()?;
    m.add_class::<PyCodec>()?;
    for f in [
        wrap_pyfunction!(elbow_k, m)?,
        wrap_pyfunction!(kmeans_discretize, m)?,
        wrap_pyfunction!(generate_scene, m)?,
        wrap_pyfunction!(ssim, m)?,
        wrap_pyfunction!(frechet_distance, m)?,
        wrap_pyfunction!(default_config, m)?,
        wrap_pyfunction!(make_data, m)?,
        wrap_pyfunction!(train, m)?,
        wrap_pyfunction!(generate, m)?,
        wrap_pyfunction!(evaluate, m)?,
        wrap_pyfunction!(label, m)?,
    ] {
        m.add_function(f)?;
    }
    Ok(())
}
