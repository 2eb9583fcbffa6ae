//! DDPM forward and reverse processes.
//!
//! Timesteps are 1-indexed throughout: `t = 1` is the last (deterministic)
//! denoising step and `t = T` the first.

use ndarray::{Array4, Zip};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeded_rng;

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

/// Fixed noise schedule with cumulative products precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_cum: Vec<f64>,
    sigma2: Vec<f64>,
    /// Timestep handed to the denoiser at each step. Identity unless the
    /// schedule was respaced.
    model_steps: Vec<usize>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Parameter("schedule needs at least one step".into()));
        }
        if !(0.0..1.0).contains(&beta_start) || !(beta_start..1.0).contains(&beta_end) {
            return Err(Error::Parameter(format!(
                "need 0 <= beta_start ({beta_start}) <= beta_end ({beta_end}) < 1"
            )));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear if steps == 1 => vec![beta_start],
            ScheduleKind::Linear => (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect(),
        };
        Ok(Self::from_betas(betas))
    }

    pub fn from_betas(betas: Vec<f64>) -> Self {
        let mut alphas_cum = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for &b in &betas {
            acc *= 1.0 - b;
            alphas_cum.push(acc);
        }
        let sigma2 = betas
            .iter()
            .enumerate()
            .map(|(i, &b)| if i == 0 { 0.0 } else { b })
            .collect();
        let model_steps = (1..=betas.len()).collect();
        Self {
            betas,
            alphas_cum,
            sigma2,
            model_steps,
        }
    }

    pub fn default_linear() -> Self {
        Self::new(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END, ScheduleKind::Linear)
            .expect("default schedule is valid")
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.betas.len() {
            return Err(Error::Parameter(format!(
                "timestep {t} outside 1..={}",
                self.betas.len()
            )));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.index(t)?])
    }

    pub fn alpha_cum(&self, t: usize) -> Result<f64> {
        Ok(self.alphas_cum[self.index(t)?])
    }

    pub fn sigma2(&self, t: usize) -> Result<f64> {
        Ok(self.sigma2[self.index(t)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_cum(&self) -> &[f64] {
        &self.alphas_cum
    }

    pub fn sigma2_all(&self) -> &[f64] {
        &self.sigma2
    }

    /// Timestep of the original schedule that step `t` of this one stands for.
    pub fn model_step(&self, t: usize) -> Result<usize> {
        Ok(self.model_steps[self.index(t)?])
    }

    /// Keeps every `stride`-th timestep (always including `T`) and recomputes
    /// per-step betas so that the retained cumulative products are unchanged.
    pub fn respaced(&self, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Parameter("stride must be >= 1".into()));
        }
        if stride == 1 {
            return Ok(self.clone());
        }
        let total = self.num_steps();
        let kept = total.div_ceil(stride);
        let model_steps: Vec<usize> = (1..=kept).map(|k| total - (kept - k) * stride).collect();
        let mut betas = Vec::with_capacity(kept);
        let mut prev = 1.0;
        for &t in &model_steps {
            let a = self.alphas_cum[t - 1];
            betas.push(1.0 - a / prev);
            prev = a;
        }
        let mut out = Self::from_betas(betas);
        // Keep the exact cumulative products rather than re-multiplied ones.
        out.alphas_cum = model_steps.iter().map(|&t| self.alphas_cum[t - 1]).collect();
        out.model_steps = model_steps;
        Ok(out)
    }

    /// Forces every step deterministic.
    pub fn without_noise(mut self) -> Self {
        self.sigma2.iter_mut().for_each(|s| *s = 0.0);
        self
    }
}

fn same_shape(a: &Array4<f64>, b: &Array4<f64>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Closed-form forward noising `√ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn q_sample(x0: &Array4<f64>, t: usize, eps: &Array4<f64>, sched: &NoiseSchedule) -> Result<Array4<f64>> {
    same_shape(x0, eps, "q_sample")?;
    let a = sched.alpha_cum(t)?;
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(Zip::from(x0).and(eps).map_collect(|&x, &e| sa * x + sn * e))
}

/// Inverts [`q_sample`] given a noise estimate.
pub fn predict_x0(xt: &Array4<f64>, t: usize, eps_pred: &Array4<f64>, sched: &NoiseSchedule) -> Result<Array4<f64>> {
    same_shape(xt, eps_pred, "predict_x0")?;
    let a = sched.alpha_cum(t)?;
    if a <= 0.0 {
        return Err(Error::Singularity(format!("alpha_cum at t={t} is zero")));
    }
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(Zip::from(xt).and(eps_pred).map_collect(|&x, &e| (x - sn * e) / sa))
}

/// One ancestral step `x_t → x_{t−1}`.
pub fn posterior_step(
    xt: &Array4<f64>,
    t: usize,
    eps_pred: &Array4<f64>,
    sched: &NoiseSchedule,
    noise: &Array4<f64>,
) -> Result<Array4<f64>> {
    same_shape(xt, eps_pred, "posterior_step eps")?;
    same_shape(xt, noise, "posterior_step noise")?;
    let beta = sched.beta(t)?;
    let a = sched.alpha_cum(t)?;
    let sigma = sched.sigma2(t)?.sqrt();
    // beta == 0 is an identity step even when 1 - alpha_cum is also 0.
    let eps_coef = if beta == 0.0 {
        0.0
    } else if 1.0 - a <= 0.0 {
        return Err(Error::Singularity(format!("1 - alpha_cum at t={t} is zero")));
    } else {
        beta / (1.0 - a).sqrt()
    };
    let inv = 1.0 / (1.0 - beta).sqrt();
    Ok(Zip::from(xt)
        .and(eps_pred)
        .and(noise)
        .map_collect(|&x, &e, &n| (x - eps_coef * e) * inv + sigma * n))
}

/// A noise predictor `ε_θ(x_t, t, cond)`.
pub trait Denoiser<C: ?Sized> {
    fn predict_noise(&self, xt: &Array4<f64>, t: usize, cond: &C) -> Result<Array4<f64>>;
}

impl<C: ?Sized, F> Denoiser<C> for F
where
    F: Fn(&Array4<f64>, usize, &C) -> Result<Array4<f64>>,
{
    fn predict_noise(&self, xt: &Array4<f64>, t: usize, cond: &C) -> Result<Array4<f64>> {
        self(xt, t, cond)
    }
}

pub fn mse(a: &Array4<f64>, b: &Array4<f64>) -> Result<f64> {
    same_shape(a, b, "mse")?;
    let n = a.len().max(1) as f64;
    Ok(Zip::from(a).and(b).fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y)) / n)
}

/// Simplified objective `‖ε − ε_θ(x_t, t)‖²` averaged over elements.
pub fn training_loss<C: ?Sized>(
    denoiser: &impl Denoiser<C>,
    x0: &Array4<f64>,
    cond: &C,
    t: usize,
    eps: &Array4<f64>,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let xt = q_sample(x0, t, eps, sched)?;
    let pred = denoiser.predict_noise(&xt, t, cond)?;
    mse(eps, &pred)
}

pub fn gaussian_like(shape: [usize; 4], rng: &mut impl rand::Rng) -> Array4<f64> {
    Array4::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
}

/// Ancestral sampling from `x_T ~ N(0, I)` down to `x_0`.
///
/// Noise for every step is drawn from one generator seeded with `seed`, so
/// the result is bit-identical for a fixed seed and denoiser.
pub fn sample_loop<C: ?Sized>(
    denoiser: &impl Denoiser<C>,
    shape: [usize; 4],
    cond: &C,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Array4<f64>> {
    sample_loop_projected(denoiser, shape, cond, sched, seed, |x0| Ok(x0))
}

/// [`sample_loop`] that passes every clean-sample estimate through
/// `project` (e.g. clipping to the data range) and steps with the noise
/// implied by the projected estimate.
pub fn sample_loop_projected<C: ?Sized>(
    denoiser: &impl Denoiser<C>,
    shape: [usize; 4],
    cond: &C,
    sched: &NoiseSchedule,
    seed: u64,
    project: impl Fn(Array4<f64>) -> Result<Array4<f64>>,
) -> Result<Array4<f64>> {
    let mut rng = seeded_rng(seed);
    let mut x = gaussian_like(shape, &mut rng);
    for t in (1..=sched.num_steps()).rev() {
        let mut eps = denoiser.predict_noise(&x, sched.model_step(t)?, cond)?;
        same_shape(&x, &eps, "denoiser output")?;
        let a = sched.alpha_cum(t)?;
        if a < 1.0 {
            let x0 = project(predict_x0(&x, t, &eps, sched)?)?;
            same_shape(&x, &x0, "projected estimate")?;
            let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
            eps = Zip::from(&x).and(&x0).map_collect(|&x, &c| (x - sa * c) / sn);
        }
        let noise = gaussian_like(shape, &mut rng);
        x = posterior_step(&x, t, &eps, sched, &noise)?;
    }
    Ok(x)
}
