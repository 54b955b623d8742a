//! `DGN1` checkpoints: architecture block of u32-tagged fields followed by the
//! parameters as f32 in registration order.

use std::fs;
use std::path::Path;

use super::{Architecture, DenoiserConfig, DenoiserModel};
use crate::error::{Error, Result};
use crate::wire::{ByteReader, ByteWriter};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DGN1";
const CHECKPOINT_VERSION: u32 = 1;

mod tag {
    pub const ARCHITECTURE: u32 = 1;
    pub const IMAGE_CHANNELS: u32 = 2;
    pub const COND_CHANNELS: u32 = 3;
    pub const TIME_DIM: u32 = 4;
    pub const BASE_CHANNELS: u32 = 5;
    pub const HEIGHT: u32 = 6;
    pub const WIDTH: u32 = 7;
    pub const STEPS: u32 = 8;
    pub const BETA_START_LO: u32 = 9;
    pub const BETA_START_HI: u32 = 10;
    pub const BETA_END_LO: u32 = 11;
    pub const BETA_END_HI: u32 = 12;
}

fn config_fields(cfg: &DenoiserConfig) -> Vec<(u32, u32)> {
    let start = cfg.beta_start.to_bits();
    let end = cfg.beta_end.to_bits();
    vec![
        (tag::ARCHITECTURE, cfg.architecture as u32),
        (tag::IMAGE_CHANNELS, cfg.image_channels as u32),
        (tag::COND_CHANNELS, cfg.cond_channels as u32),
        (tag::TIME_DIM, cfg.time_dim as u32),
        (tag::BASE_CHANNELS, cfg.base_channels as u32),
        (tag::HEIGHT, cfg.height as u32),
        (tag::WIDTH, cfg.width as u32),
        (tag::STEPS, cfg.steps as u32),
        (tag::BETA_START_LO, start as u32),
        (tag::BETA_START_HI, (start >> 32) as u32),
        (tag::BETA_END_LO, end as u32),
        (tag::BETA_END_HI, (end >> 32) as u32),
    ]
}

impl DenoiserModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let fields = config_fields(&self.config);
        let mut w = ByteWriter::new();
        w.bytes(CHECKPOINT_MAGIC)
            .u32(CHECKPOINT_VERSION)
            .u32(fields.len() as u32);
        for (t, v) in fields {
            w.u32(t).u32(v);
        }
        w.u64(self.params.len() as u64);
        for p in &self.params {
            w.f32(*p as f32);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "checkpoint");
        r.expect_magic(CHECKPOINT_MAGIC)?;
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!(
                "checkpoint: unsupported version {version}"
            )));
        }
        let count = r.u32("field count")?;
        let mut values = [None::<u32>; 13];
        for _ in 0..count {
            let t = r.u32("field tag")?;
            let v = r.u32("field value")?;
            match values.get_mut(t as usize) {
                Some(slot) if t > 0 => *slot = Some(v),
                _ => return Err(Error::format(format!("checkpoint: unknown field tag {t}"))),
            }
        }
        let get = |t: u32| -> Result<u32> {
            values[t as usize]
                .ok_or_else(|| Error::format(format!("checkpoint: missing field tag {t}")))
        };
        let f64_of = |lo: u32, hi: u32| -> Result<f64> {
            Ok(f64::from_bits(((get(hi)? as u64) << 32) | get(lo)? as u64))
        };
        let architecture = match get(tag::ARCHITECTURE)? {
            0 => Architecture::UNet,
            1 => Architecture::PixelMlp,
            a => return Err(Error::format(format!("checkpoint: unknown architecture {a}"))),
        };
        let config = DenoiserConfig {
            architecture,
            image_channels: get(tag::IMAGE_CHANNELS)? as usize,
            cond_channels: get(tag::COND_CHANNELS)? as usize,
            time_dim: get(tag::TIME_DIM)? as usize,
            base_channels: get(tag::BASE_CHANNELS)? as usize,
            height: get(tag::HEIGHT)? as usize,
            width: get(tag::WIDTH)? as usize,
            steps: get(tag::STEPS)? as usize,
            beta_start: f64_of(tag::BETA_START_LO, tag::BETA_START_HI)?,
            beta_end: f64_of(tag::BETA_END_LO, tag::BETA_END_HI)?,
        };
        config
            .validate()
            .map_err(|e| Error::format(format!("checkpoint: invalid architecture block: {e}")))?;
        let n = r.u64("parameter count")? as usize;
        let params: Vec<f64> = r
            .f32_vec(n, "parameters")?
            .into_iter()
            .map(|p| p as f64)
            .collect();
        r.finish()?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::format("checkpoint: non-finite parameter"));
        }
        DenoiserModel::from_params(config, params)
    }
}

pub fn save_checkpoint(model: &DenoiserModel, path: &Path) -> Result<()> {
    fs::write(path, model.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<DenoiserModel> {
    DenoiserModel::from_bytes(&fs::read(path)?)
}
