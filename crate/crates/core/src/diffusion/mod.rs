//! Noise schedule, forward corruption, the reverse step, and the imputation
//! sampler.

mod sampler;

use serde::{Deserialize, Serialize};

pub use sampler::{impute_dataset, reverse_step, sample_imputation, Conditioning, Imputer, SampleOptions, StepTrace};

use crate::error::{Error, Result};
use crate::numerics::Array;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Quadratic,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            beta_min: 1e-4,
            beta_max: 0.5,
            kind: ScheduleKind::Quadratic,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.steps, self.beta_min, self.beta_max, self.kind)
    }
}

/// `α_t` and `ᾱ_t` for `t = 1..=T`, stored zero-based.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Schedule from explicit `β_t` values in `[0, 1)`.
    pub fn from_betas(betas: &[f64]) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Schedule("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(0.0..1.0).contains(*b)) {
            return Err(Error::Schedule(format!("beta {b} outside [0, 1)")));
        }
        let alpha: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { alpha, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Contract(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// `α_t`, `t ∈ 1..=T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱ_t` with the convention `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Reverse-step variance `(1−α_t)(1−ᾱ_{t−1})/(1−ᾱ_t)`; zero at `t = 1`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        let denom = 1.0 - self.alpha_bar(t);
        if denom <= 0.0 {
            return 0.0;
        }
        (1.0 - self.alpha(t)) * (1.0 - self.alpha_bar(t - 1)) / denom
    }
}

pub fn build_schedule(steps: usize, beta_min: f64, beta_max: f64, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Schedule("T must be at least 1".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::Schedule(format!(
            "need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}"
        )));
    }
    let frac = |t: usize| if steps == 1 { 0.0 } else { t as f64 / (steps - 1) as f64 };
    let betas: Vec<f64> = (0..steps)
        .map(|t| match kind {
            ScheduleKind::Quadratic => {
                let (lo, hi) = (beta_min.sqrt(), beta_max.sqrt());
                (lo + frac(t) * (hi - lo)).powi(2)
            }
            ScheduleKind::Linear => beta_min + frac(t) * (beta_max - beta_min),
        })
        .collect();
    NoiseSchedule::from_betas(&betas)
}

fn same_shape(op: &'static str, a: &Array, b: &Array) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::mismatch(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// `√α_t · x_prev + √(1−α_t) · eps`.
pub fn forward_diffuse_step(x_prev: &Array, t: usize, eps: &Array, s: &NoiseSchedule) -> Result<Array> {
    s.check(t)?;
    same_shape("forward_diffuse_step", x_prev, eps)?;
    let a = s.alpha(t);
    x_prev.zip_map(eps, "forward_diffuse_step", |x, e| a.sqrt() * x + (1.0 - a).sqrt() * e)
}

/// `√ᾱ_t · x0 + √(1−ᾱ_t) · eps`.
pub fn forward_diffuse_marginal(x0: &Array, t: usize, eps: &Array, s: &NoiseSchedule) -> Result<Array> {
    s.check(t)?;
    same_shape("forward_diffuse_marginal", x0, eps)?;
    let ab = s.alpha_bar(t);
    x0.zip_map(eps, "forward_diffuse_marginal", |x, e| {
        ab.sqrt() * x + (1.0 - ab).sqrt() * e
    })
}

/// `x_t/√α_t − (1−α_t)/(√(1−ᾱ_t)·√α_t) · eps_hat`.
pub fn reverse_mean(x_t: &Array, eps_hat: &Array, t: usize, s: &NoiseSchedule) -> Result<Array> {
    s.check(t)?;
    same_shape("reverse_mean", x_t, eps_hat)?;
    let (a, ab) = (s.alpha(t), s.alpha_bar(t));
    let k = if ab < 1.0 {
        (1.0 - a) / ((1.0 - ab).sqrt() * a.sqrt())
    } else {
        0.0
    };
    x_t.zip_map(eps_hat, "reverse_mean", |x, e| x / a.sqrt() - k * e)
}

/// Reverse mean plus `σ_t · z`; `z` is ignored at `t = 1`.
pub fn reverse_update(x_t: &Array, eps_hat: &Array, t: usize, s: &NoiseSchedule, z: &Array) -> Result<Array> {
    let mean = reverse_mean(x_t, eps_hat, t, s)?;
    if t == 1 {
        return Ok(mean);
    }
    same_shape("reverse_update", &mean, z)?;
    let sd = s.posterior_variance(t).sqrt();
    mean.zip_map(z, "reverse_update", |m, z| m + sd * z)
}
