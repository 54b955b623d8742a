//! Analytic-versus-central-difference gradient comparison.

use rand::Rng;

use super::{prepare_batch, DenoiserModel, TrainBatch};
use crate::bank::NoiseBank;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Number of coordinates compared; every parameter tensor gets at least one.
    pub samples: usize,
    pub seed: u64,
    /// Scales the analytic gradient of this parameter tensor (index into
    /// `param_tensors()`), to confirm the check notices a broken gradient.
    pub corrupt_tensor: Option<(usize, f64)>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            samples: 128,
            seed: 0,
            corrupt_tensor: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_coordinate: usize,
    /// Analytic and finite-difference values at the worst coordinate.
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
}

/// Absolute floor in the relative-error denominator. Central differences on
/// an f64 loss carry about 1e-12 of round-off at a 1e-3 step, so coordinates
/// whose true gradient is near zero would otherwise fail on noise alone.
const ABS_FLOOR: f64 = 1e-7;

pub fn gradient_check(
    model: &DenoiserModel,
    batch: &TrainBatch,
    bank: &NoiseBank,
    schedule: &NoiseSchedule,
    epsilon_fd: f64,
    options: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if !(epsilon_fd > 0.0) {
        return Err(Error::config("finite-difference step must be positive"));
    }
    let prepared = prepare_batch(model, batch, bank, schedule)?;
    let (_, mut grads) = model.loss_and_grad(model.params(), &prepared);
    let tensors = model.param_tensors();
    if let Some((idx, scale)) = options.corrupt_tensor {
        let t = tensors
            .get(idx)
            .ok_or_else(|| Error::config(format!("no parameter tensor {idx}")))?;
        for g in &mut grads[t.offset..t.offset + t.len] {
            *g *= scale;
        }
    }

    let mut r = rng::seeded(options.seed);
    let mut coords: Vec<usize> = tensors
        .iter()
        .map(|t| t.offset + r.gen_range(0..t.len))
        .collect();
    let total = model.param_count();
    while coords.len() < options.samples {
        coords.push(r.gen_range(0..total));
    }

    let mut params = model.params().to_vec();
    let mut worst = (0.0f64, 0usize, 0.0f64, 0.0f64);
    for &j in &coords {
        let orig = params[j];
        params[j] = orig + epsilon_fd;
        let up = model.loss_at(&params, &prepared);
        params[j] = orig - epsilon_fd;
        let down = model.loss_at(&params, &prepared);
        params[j] = orig;
        let numeric = (up - down) / (2.0 * epsilon_fd);
        let analytic = grads[j];
        let rel = (analytic - numeric).abs() / (analytic.abs().max(numeric.abs()) + ABS_FLOOR);
        if rel > worst.0 {
            worst = (rel, j, analytic, numeric);
        }
    }
    Ok(GradCheckReport {
        max_relative_error: worst.0,
        worst_coordinate: worst.1,
        worst_analytic: worst.2,
        worst_numeric: worst.3,
        checked: coords.len(),
    })
}
