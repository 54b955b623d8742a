//! The pre-sampled noise bank shared once between transmitter and receiver,
//! Gaussian-radius matching, and the `NBK1` file format.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Shape, Tensor};
use crate::wire::{ByteReader, ByteWriter};

pub const BANK_MAGIC: &[u8; 4] = b"NBK1";
pub const BANK_VERSION: u32 = 1;

/// How a bank file stores its vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BankFileMode {
    /// Header only; vectors are regenerated from the seed on load.
    SeedOnly = 0,
    FullVectors = 1,
}

/// `N` standard-normal tensors. Vector `i` is drawn from a generator seeded
/// with `seed ^ i`, so any single vector can be regenerated on its own.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBank {
    seed: u64,
    shape: Shape,
    size: usize,
    vectors: Vec<f32>,
}

/// Regenerates bank vector `index` without building the bank.
pub fn regenerate_vector(seed: u64, index: usize, shape: Shape) -> Vec<f32> {
    let mut rng = rng::seeded(seed ^ index as u64);
    (0..shape.numel())
        .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
        .collect()
}

pub fn build_bank(seed: u64, size: usize, shape: Shape) -> Result<NoiseBank> {
    if size == 0 {
        return Err(Error::config("noise bank size must be at least 1"));
    }
    if size > u32::MAX as usize {
        return Err(Error::config("noise bank size exceeds u32"));
    }
    if shape.numel() == 0 {
        return Err(Error::config("noise bank shape must be non-empty"));
    }
    let vectors: Vec<f32> = (0..size)
        .into_par_iter()
        .flat_map_iter(|i| regenerate_vector(seed, i, shape))
        .collect();
    Ok(NoiseBank {
        seed,
        shape,
        size,
        vectors,
    })
}

impl NoiseBank {
    /// Bank from explicit vectors; used by tests and by hand-built banks.
    pub fn from_vectors(seed: u64, shape: Shape, vectors: Vec<Vec<f32>>) -> Result<Self> {
        if vectors.is_empty() {
            return Err(Error::config("noise bank size must be at least 1"));
        }
        let d = shape.numel();
        if let Some(v) = vectors.iter().find(|v| v.len() != d) {
            return Err(Error::config(format!(
                "bank vector has {} entries, shape {shape} needs {d}",
                v.len()
            )));
        }
        Ok(NoiseBank {
            seed,
            shape,
            size: vectors.len(),
            vectors: vectors.concat(),
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    /// Bank size `N`.
    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    fn check_index(&self, index: usize) -> Result<()> {
        if index >= self.size {
            return Err(Error::OutOfRange {
                what: "bank index",
                value: index as u64,
                range: format!("0..{}", self.size),
            });
        }
        Ok(())
    }

    pub fn vector(&self, index: usize) -> Result<&[f32]> {
        self.check_index(index)?;
        let d = self.shape.numel();
        Ok(&self.vectors[index * d..(index + 1) * d])
    }

    pub fn tensor(&self, index: usize) -> Result<Tensor> {
        let v = self.vector(index)?;
        Tensor::from_vec(self.shape, v.iter().map(|&x| x as f64).collect())
    }

    pub fn all_vectors(&self) -> &[f32] {
        &self.vectors
    }

    /// Uniform training draw.
    pub fn draw_training_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, Tensor) {
        let index = rng.gen_range(0..self.size);
        let v = self.tensor(index).expect("index drawn in range");
        (index, v)
    }

    /// True when every stored vector equals its seed regeneration.
    pub fn matches_seed(&self) -> bool {
        (0..self.size).all(|i| {
            let regen = regenerate_vector(self.seed, i, self.shape);
            regen
                .iter()
                .zip(self.vector(i).unwrap())
                .all(|(a, b)| a.to_bits() == b.to_bits())
        })
    }

    pub fn to_bytes(&self, mode: BankFileMode) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(BANK_MAGIC)
            .u32(BANK_VERSION)
            .u8(mode as u8)
            .u64(self.seed)
            .u32(self.size as u32)
            .u32(3);
        for d in self.shape.dims() {
            w.u32(d as u32);
        }
        if mode == BankFileMode::FullVectors {
            for v in &self.vectors {
                w.f32(*v);
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "bank file");
        r.expect_magic(BANK_MAGIC)?;
        let version = r.u32("version")?;
        if version != BANK_VERSION {
            return Err(Error::format(format!(
                "bank file: unsupported version {version}"
            )));
        }
        let mode = match r.u8("mode")? {
            0 => BankFileMode::SeedOnly,
            1 => BankFileMode::FullVectors,
            m => return Err(Error::format(format!("bank file: unknown mode {m}"))),
        };
        let seed = r.u64("seed")?;
        let size = r.u32("bank size")? as usize;
        if size == 0 {
            return Err(Error::format("bank file: bank size is zero"));
        }
        let rank = r.u32("rank")? as usize;
        if !(1..=3).contains(&rank) {
            return Err(Error::format(format!("bank file: unsupported rank {rank}")));
        }
        let mut dims = [1usize; 3];
        for slot in dims[3 - rank..].iter_mut() {
            *slot = r.u32("dims")? as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2]);
        if shape.numel() == 0 {
            return Err(Error::format("bank file: empty tensor shape"));
        }
        let bank = match mode {
            BankFileMode::SeedOnly => build_bank(seed, size, shape)?,
            BankFileMode::FullVectors => {
                let n = size
                    .checked_mul(shape.numel())
                    .ok_or_else(|| Error::format("bank file: vector count overflows"))?;
                let vectors = r.f32_vec(n, "vectors")?;
                if vectors.iter().any(|v| !v.is_finite()) {
                    return Err(Error::format("bank file: non-finite vector entry"));
                }
                NoiseBank {
                    seed,
                    shape,
                    size,
                    vectors,
                }
            }
        };
        r.finish()?;
        Ok(bank)
    }
}

pub fn save_bank(bank: &NoiseBank, path: &Path, mode: BankFileMode) -> Result<()> {
    fs::write(path, bank.to_bytes(mode))?;
    Ok(())
}

pub fn load_bank(path: &Path) -> Result<NoiseBank> {
    let bytes = fs::read(path)?;
    NoiseBank::from_bytes(&bytes)
}

/// Euclidean norm of the flattened tensor.
pub fn gaussian_radius(x: &Tensor) -> f64 {
    x.norm()
}

/// `√d·(1 − 1/(4d))`, the large-d expansion of E‖z‖ for standard-normal z.
pub fn theoretical_radius(shape: Shape) -> Result<f64> {
    let d = shape.numel();
    if d == 0 {
        return Err(Error::config("theoretical radius of an empty shape"));
    }
    let d = d as f64;
    Ok(d.sqrt() * (1.0 - 1.0 / (4.0 * d)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RadiusReport {
    pub per_index_radius: Vec<f64>,
    pub theoretical_radius: f64,
    pub best_index: usize,
}

impl RadiusReport {
    /// Fraction of bank vectors whose radius lies within `rel` of the target.
    pub fn fraction_within(&self, rel: f64) -> f64 {
        let hits = self
            .per_index_radius
            .iter()
            .filter(|r| ((*r - self.theoretical_radius) / self.theoretical_radius).abs() <= rel)
            .count();
        hits as f64 / self.per_index_radius.len() as f64
    }
}

/// Radius of the step-T latent `√ᾱ_T·x0 + √(1−ᾱ_T)·ε_i` for one bank vector.
fn latent_radius(x0: &[f64], eps: &[f32], signal: f64, noise: f64) -> f64 {
    x0.iter()
        .zip(eps)
        .map(|(&x, &e)| {
            let v = signal * x + noise * e as f64;
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// GO noise selection: the bank index whose step-T latent radius is closest
/// to the theoretical radius, ties to the smallest index.
pub fn select_noise(bank: &NoiseBank, x0: &Tensor, schedule: &NoiseSchedule) -> Result<RadiusReport> {
    bank.shape().ensure_eq(&x0.shape())?;
    let ab = schedule.final_alpha_bar();
    let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    let target = theoretical_radius(bank.shape())?;
    let d = bank.shape().numel();
    let radii: Vec<f64> = bank
        .all_vectors()
        .par_chunks(d)
        .map(|eps| latent_radius(x0.data(), eps, signal, noise))
        .collect();
    let mut best_index = 0;
    let mut best_gap = f64::INFINITY;
    for (i, r) in radii.iter().enumerate() {
        let gap = (r - target).abs();
        if gap < best_gap {
            best_gap = gap;
            best_index = i;
        }
    }
    Ok(RadiusReport {
        per_index_radius: radii,
        theoretical_radius: target,
        best_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{build_schedule, ScheduleKind};

    #[test]
    fn build_is_deterministic_and_seed_sensitive() {
        let shape = Shape::new(3, 4, 4);
        let a = build_bank(11, 8, shape).unwrap();
        let b = build_bank(11, 8, shape).unwrap();
        assert_eq!(a, b);
        let c = build_bank(12, 8, shape).unwrap();
        assert_ne!(a.all_vectors(), c.all_vectors());
        assert!(build_bank(11, 0, shape).is_err());
        assert!(a.matches_seed());
    }

    #[test]
    fn single_vector_regenerates() {
        let shape = Shape::new(1, 3, 5);
        let bank = build_bank(99, 5, shape).unwrap();
        assert_eq!(bank.vector(3).unwrap(), regenerate_vector(99, 3, shape).as_slice());
        assert!(bank.vector(5).is_err());
    }

    #[test]
    fn radius_examples() {
        assert_eq!(gaussian_radius(&Tensor::zeros(Shape::new(1, 4, 4))), 0.0);
        assert_eq!(gaussian_radius(&Tensor::filled(Shape::new(1, 4, 4), 1.0)), 4.0);
        assert_eq!(theoretical_radius(Shape::new(1, 1, 1)).unwrap(), 0.75);
        assert!(theoretical_radius(Shape::new(0, 1, 1)).is_err());
    }

    #[test]
    fn size_one_bank_selects_zero() {
        let shape = Shape::new(1, 2, 2);
        let bank = build_bank(1, 1, shape).unwrap();
        let s = build_schedule(10, ScheduleKind::Linear, 1e-3, 0.2).unwrap();
        let x0 = Tensor::filled(shape, 0.3);
        assert_eq!(select_noise(&bank, &x0, &s).unwrap().best_index, 0);
        assert!(select_noise(&bank, &Tensor::zeros(Shape::new(1, 3, 3)), &s).is_err());
    }

    #[test]
    fn tie_goes_to_smallest_index() {
        // Swapping two entries of equal magnitude and opposite sign keeps every
        // squared term identical, so the radii tie bitwise when x0 = 0.
        let shape = Shape::new(1, 1, 4);
        let far = vec![5.0f32, 5.0, 5.0, 5.0];
        let v = vec![0.7f32, -0.7, 1.1, 0.4];
        let permuted = vec![-0.7f32, 0.7, 1.1, 0.4];
        let bank = NoiseBank::from_vectors(0, shape, vec![far, v, permuted]).unwrap();
        let s = build_schedule(10, ScheduleKind::Linear, 1e-3, 0.2).unwrap();
        let rep = select_noise(&bank, &Tensor::zeros(shape), &s).unwrap();
        assert_eq!(rep.per_index_radius[1], rep.per_index_radius[2]);
        assert_eq!(rep.best_index, 1);
    }

    #[test]
    fn file_round_trip_and_failures() {
        let shape = Shape::new(2, 3, 3);
        let bank = build_bank(5, 4, shape).unwrap();
        let full = bank.to_bytes(BankFileMode::FullVectors);
        assert_eq!(NoiseBank::from_bytes(&full).unwrap(), bank);
        let seed_only = bank.to_bytes(BankFileMode::SeedOnly);
        assert_eq!(NoiseBank::from_bytes(&seed_only).unwrap(), bank);

        let err = NoiseBank::from_bytes(&full[..full.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        let mut bad = full.clone();
        bad[0] = b'X';
        assert!(NoiseBank::from_bytes(&bad).unwrap_err().to_string().contains("magic"));
        let mut bad = full.clone();
        bad[4] = 9;
        assert!(NoiseBank::from_bytes(&bad).unwrap_err().to_string().contains("version"));
        let mut long = full;
        long.push(0);
        assert!(NoiseBank::from_bytes(&long).unwrap_err().to_string().contains("trailing"));
    }

    #[test]
    fn header_layout() {
        let bank = build_bank(0x0102_0304_0506_0708, 2, Shape::new(3, 2, 1)).unwrap();
        let bytes = bank.to_bytes(BankFileMode::SeedOnly);
        assert_eq!(&bytes[..4], b"NBK1");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(bytes[8], 0);
        assert_eq!(&bytes[9..17], &[8, 7, 6, 5, 4, 3, 2, 1]);
        assert_eq!(&bytes[17..21], &[2, 0, 0, 0]);
        assert_eq!(&bytes[21..25], &[3, 0, 0, 0]);
        assert_eq!(&bytes[25..37], &[3, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(bytes.len(), 37);
    }
}
