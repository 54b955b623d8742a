//! Variance schedules, forward diffusion (plain and noise-bank restricted)
//! and the ancestral reverse sampler.

use crate::bank::NoiseBank;
use crate::error::{Error, Result};
use crate::rng;
use crate::semantics::SemanticCondition;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
}

/// β/α/ᾱ tables over `T` steps. Step indices are 1-based throughout.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(
        steps: usize,
        kind: ScheduleKind,
        beta_start: f64,
        beta_end: f64,
    ) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::config(format!(
                "betas must satisfy 0 < start <= end < 1, got start={beta_start} end={beta_end}"
            )));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear if steps == 1 => vec![beta_start],
            ScheduleKind::Linear => (0..steps)
                .map(|i| {
                    let frac = i as f64 / (steps - 1) as f64;
                    beta_start + (beta_end - beta_start) * frac
                })
                .collect(),
        };
        Self::from_betas(betas)
    }

    /// Schedule from explicit variances.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::config("schedule needs at least one step"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::config(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut running = 1.0;
        for a in &alphas {
            running *= a;
            alpha_bars.push(running);
        }
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Number of steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// ᾱ at the final step `T`.
    pub fn final_alpha_bar(&self) -> f64 {
        *self.alpha_bars.last().expect("non-empty schedule")
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::OutOfRange {
                what: "diffusion step",
                value: t as u64,
                range: format!("1..={}", self.steps()),
            });
        }
        Ok(())
    }
}

pub fn build_schedule(
    steps: usize,
    kind: ScheduleKind,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule> {
    NoiseSchedule::new(steps, kind, beta_start, beta_end)
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn forward_diffuse(
    x0: &Tensor,
    t: usize,
    epsilon: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    schedule.check_step(t)?;
    let ab = schedule.alpha_bar(t);
    let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(epsilon, |x, e| signal * x + noise * e)
}

/// Forward diffusion whose noise is bank vector `index`.
pub fn nr_forward_diffuse(
    x0: &Tensor,
    t: usize,
    bank: &NoiseBank,
    index: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let epsilon = bank.tensor(index)?;
    forward_diffuse(x0, t, &epsilon, schedule)
}

/// Inverts the forward marginal given the exact noise: `(x_t − √(1−ᾱ_t)·ε)/√ᾱ_t`.
pub fn predict_x0(
    x_t: &Tensor,
    t: usize,
    epsilon: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    schedule.check_step(t)?;
    let ab = schedule.alpha_bar(t);
    let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    x_t.zip_map(epsilon, |x, e| (x - noise * e) / signal)
}

/// One ancestral step `x_t → x_{t−1}` with σ_t² = β_t. `fresh_noise` must be
/// `None` at `t = 1`.
pub fn reverse_step(
    x_t: &Tensor,
    t: usize,
    predicted_noise: &Tensor,
    schedule: &NoiseSchedule,
    fresh_noise: Option<&Tensor>,
) -> Result<Tensor> {
    schedule.check_step(t)?;
    x_t.shape().ensure_eq(&predicted_noise.shape())?;
    let beta = schedule.beta(t);
    let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
    let eps_coef = beta / (1.0 - schedule.alpha_bar(t)).sqrt();
    let mut out = x_t.zip_map(predicted_noise, |x, e| inv_sqrt_alpha * (x - eps_coef * e))?;
    match fresh_noise {
        Some(_) if t == 1 => {
            return Err(Error::config("final reverse step takes no fresh noise"));
        }
        Some(z) => {
            out.shape().ensure_eq(&z.shape())?;
            let sigma = beta.sqrt();
            for (o, n) in out.data_mut().iter_mut().zip(z.data()) {
                *o += sigma * n;
            }
        }
        None => {}
    }
    Ok(out)
}

/// Anything that predicts `ε` from `(x_t, t, m)`.
pub trait NoisePredictor {
    fn predict_noise(&self, x_t: &Tensor, t: usize, m: &SemanticCondition) -> Result<Tensor>;
}

/// Runs the reverse chain from `x_T` down to `x_0` and clamps to [−1, 1].
pub fn sample<P: NoisePredictor + ?Sized>(
    model: &P,
    m: &SemanticCondition,
    x_t: &Tensor,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Tensor> {
    let mut rng = rng::seeded(seed);
    let mut x = x_t.clone();
    for t in (1..=schedule.steps()).rev() {
        let eps = model.predict_noise(&x, t, m)?;
        x = if t > 1 {
            let z = Tensor::randn(x.shape(), &mut rng);
            reverse_step(&x, t, &eps, schedule, Some(&z))?
        } else {
            reverse_step(&x, t, &eps, schedule, None)?
        };
    }
    Ok(x.clamp(-1.0, 1.0))
}
