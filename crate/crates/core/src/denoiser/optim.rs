use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::wire::{ByteReader, ByteWriter};

pub const OPTIMIZER_MAGIC: &[u8; 4] = b"OPT1";
const OPTIMIZER_VERSION: u32 = 1;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    /// Plain gradient descent, no momentum.
    Sgd = 0,
    /// Adaptive moments (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
    Adam = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    kind: OptimizerKind,
    step: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, param_count: usize) -> Self {
        let moments = if kind == OptimizerKind::Adam { param_count } else { 0 };
        OptimizerState {
            kind,
            step: 0,
            first: vec![0.0; moments],
            second: vec![0.0; moments],
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Updates `params` in place. Parameters are kept on the f32 grid so
    /// checkpoints are exact.
    pub fn apply(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::config("gradient length differs from parameter count"));
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                if lr != 0.0 {
                    for (p, g) in params.iter_mut().zip(grads) {
                        *p = (*p - lr * g) as f32 as f64;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.first.len() != params.len() {
                    return Err(Error::config("optimizer state sized for another model"));
                }
                let bc1 = 1.0 - BETA1.powi(self.step as i32);
                let bc2 = 1.0 - BETA2.powi(self.step as i32);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.first[i] = BETA1 * self.first[i] + (1.0 - BETA1) * g;
                    self.second[i] = BETA2 * self.second[i] + (1.0 - BETA2) * g * g;
                    if lr != 0.0 {
                        let m_hat = self.first[i] / bc1;
                        let v_hat = self.second[i] / bc2;
                        params[i] = (params[i] - lr * m_hat / (v_hat.sqrt() + EPS)) as f32 as f64;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(OPTIMIZER_MAGIC)
            .u32(OPTIMIZER_VERSION)
            .u8(self.kind as u8)
            .u64(self.step)
            .u64(self.first.len() as u64);
        for v in self.first.iter().chain(&self.second) {
            w.f64(*v);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "optimizer state");
        r.expect_magic(OPTIMIZER_MAGIC)?;
        let version = r.u32("version")?;
        if version != OPTIMIZER_VERSION {
            return Err(Error::format(format!(
                "optimizer state: unsupported version {version}"
            )));
        }
        let kind = match r.u8("kind")? {
            0 => OptimizerKind::Sgd,
            1 => OptimizerKind::Adam,
            k => return Err(Error::format(format!("optimizer state: unknown kind {k}"))),
        };
        let step = r.u64("step")?;
        let n = r.u64("moment count")? as usize;
        let first = r.f64_vec(n, "first moments")?;
        let second = r.f64_vec(n, "second moments")?;
        r.finish()?;
        Ok(OptimizerState {
            kind,
            step,
            first,
            second,
        })
    }
}

pub fn save_optimizer(state: &OptimizerState, path: &Path) -> Result<()> {
    fs::write(path, state.to_bytes())?;
    Ok(())
}

pub fn load_optimizer(path: &Path) -> Result<OptimizerState> {
    OptimizerState::from_bytes(&fs::read(path)?)
}
