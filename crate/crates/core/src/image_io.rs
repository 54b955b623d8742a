//! Farbfeld raster output: `"farbfeld"`, width u32 BE, height u32 BE, then
//! RGBA u16 BE per pixel. Values in [−1, 1] map linearly onto 0..=65535.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

const MAGIC: &[u8; 8] = b"farbfeld";

fn to_u16(v: f64) -> u16 {
    (((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * 65535.0).round() as u16
}

fn from_u16(v: u16) -> f64 {
    v as f64 / 65535.0 * 2.0 - 1.0
}

/// Encodes a 1- (grey) or 3-channel (RGB) image.
pub fn encode_farbfeld(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.channels != 1 && s.channels != 3 {
        return Err(Error::config(format!(
            "farbfeld output needs 1 or 3 channels, got {}",
            s.channels
        )));
    }
    let mut out = Vec::with_capacity(16 + s.plane() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(s.width as u32).to_be_bytes());
    out.extend_from_slice(&(s.height as u32).to_be_bytes());
    for p in 0..s.plane() {
        for c in 0..3 {
            let v = image.channel(c.min(s.channels - 1))[p];
            out.extend_from_slice(&to_u16(v).to_be_bytes());
        }
        out.extend_from_slice(&u16::MAX.to_be_bytes());
    }
    Ok(out)
}

/// Decodes to a 3-channel tensor; alpha is ignored.
pub fn decode_farbfeld(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::format("farbfeld: bad magic"));
    }
    let w = u32::from_be_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let h = u32::from_be_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() as u64 != w as u64 * h as u64 * 8 {
        return Err(Error::format(format!(
            "farbfeld: {} pixel bytes for {w}x{h}",
            body.len()
        )));
    }
    let shape = Shape::new(3, h, w);
    let mut t = Tensor::zeros(shape);
    for (p, px) in body.chunks_exact(8).enumerate() {
        for c in 0..3 {
            let v = u16::from_be_bytes([px[2 * c], px[2 * c + 1]]);
            t.data_mut()[c * shape.plane() + p] = from_u16(v);
        }
    }
    Ok(t)
}

pub fn write_farbfeld(path: &Path, image: &Tensor) -> Result<()> {
    fs::write(path, encode_farbfeld(image)?)?;
    Ok(())
}

pub fn read_farbfeld(path: &Path) -> Result<Tensor> {
    decode_farbfeld(&fs::read(path)?)
}
