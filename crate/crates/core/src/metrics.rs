//! Image quality and information measures.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Returned for identical images instead of +∞.
pub const PSNR_CAP_DB: f64 = 100.0;
/// Peak-to-peak range of images in [−1, 1].
pub const DEFAULT_PEAK: f64 = 2.0;
pub const NMI_BINS: usize = 32;

const SSIM_WINDOW: usize = 8;
const SSIM_STRIDE: usize = 4;
const SSIM_C1: f64 = 0.02 * 0.02;
const SSIM_C2: f64 = 0.06 * 0.06;
const GRAD_FLOOR: f64 = 0.1;

/// A named scalar with the parameters that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub name: &'static str,
    pub value: f64,
    /// Hex prefix of a digest over both inputs.
    pub inputs_digest: String,
    pub parameters: Vec<(&'static str, f64)>,
}

fn digest(a: &Tensor, b: &Tensor) -> String {
    // FNV-1a over the f64 bit patterns; only used to tell records apart.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in a.data().iter().chain(b.data()) {
        for byte in v.to_bits().to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    hex::encode(h.to_be_bytes())
}

/// `10·log10(peak²/MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::config(format!("peak must be positive, got {peak}")));
    }
    let mse = a.mse(b)?;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

pub fn psnr_record(a: &Tensor, b: &Tensor, peak: f64) -> Result<MetricRecord> {
    Ok(MetricRecord {
        name: "psnr",
        value: psnr(a, b, peak)?,
        inputs_digest: digest(a, b),
        parameters: vec![("peak", peak), ("cap_db", PSNR_CAP_DB)],
    })
}

fn bin_of(v: f64, bins: usize) -> usize {
    let u = ((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * bins as f64) as usize;
    u.min(bins - 1)
}

fn entropy(counts: &[u64], total: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum()
}

/// Histogram mutual information normalised by `√(H(a)·H(b))`, equal-width
/// bins over [−1, 1]. Images that each fall in a single bin score 1 when it
/// is the same bin and 0 otherwise.
pub fn normalized_mutual_information(a: &Tensor, b: &Tensor, bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(Error::config(format!("need at least 2 bins, got {bins}")));
    }
    a.shape().ensure_eq(&b.shape())?;
    let mut joint = vec![0u64; bins * bins];
    let mut ca = vec![0u64; bins];
    let mut cb = vec![0u64; bins];
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (i, j) = (bin_of(x, bins), bin_of(y, bins));
        joint[i * bins + j] += 1;
        ca[i] += 1;
        cb[j] += 1;
    }
    let n = a.len() as f64;
    let (ha, hb) = (entropy(&ca, n), entropy(&cb, n));
    if ha == 0.0 || hb == 0.0 {
        let same = ha == 0.0 && hb == 0.0 && ca == cb;
        return Ok(if same { 1.0 } else { 0.0 });
    }
    let mi = ha + hb - entropy(&joint, n);
    Ok((mi / (ha * hb).sqrt()).clamp(0.0, 1.0))
}

fn window_starts(len: usize) -> Vec<usize> {
    if len <= SSIM_WINDOW {
        return vec![0];
    }
    (0..=len - SSIM_WINDOW).step_by(SSIM_STRIDE).collect()
}

/// Mean windowed SSIM over all channels, in [0, 1].
pub fn structural_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    let s = a.shape();
    s.ensure_eq(&b.shape())?;
    let (wh, ww) = (SSIM_WINDOW.min(s.height), SSIM_WINDOW.min(s.width));
    let (ys, xs) = (window_starts(s.height), window_starts(s.width));
    let count = (wh * ww) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for c in 0..s.channels {
        let (pa, pb) = (a.channel(c), b.channel(c));
        for &y0 in &ys {
            for &x0 in &xs {
                let (mut sa, mut sb) = (0.0, 0.0);
                for y in y0..y0 + wh {
                    for x in x0..x0 + ww {
                        sa += pa[y * s.width + x];
                        sb += pb[y * s.width + x];
                    }
                }
                let (ma, mb) = (sa / count, sb / count);
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for y in y0..y0 + wh {
                    for x in x0..x0 + ww {
                        let da = pa[y * s.width + x] - ma;
                        let db = pb[y * s.width + x] - mb;
                        va += da * da;
                        vb += db * db;
                        cov += da * db;
                    }
                }
                let (va, vb, cov) = (va / count, vb / count, cov / count);
                // Each factor is floored at 0 so that anti-correlated
                // structure never counts as agreement through a sign flip.
                let lum = (2.0 * ma * mb + SSIM_C1) / (ma * ma + mb * mb + SSIM_C1);
                let cs = (2.0 * cov + SSIM_C2) / (va + vb + SSIM_C2);
                total += lum.max(0.0) * cs.max(0.0);
                windows += 1;
            }
        }
    }
    Ok((total / windows as f64).clamp(0.0, 1.0))
}

/// Central differences with replicated borders, per channel.
fn gradients(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let s = t.shape();
    let (h, w) = (s.height, s.width);
    let mut gx = vec![0.0; t.len()];
    let mut gy = vec![0.0; t.len()];
    for c in 0..s.channels {
        let p = t.channel(c);
        let base = c * h * w;
        for y in 0..h {
            for x in 0..w {
                let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
                let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
                gx[base + y * w + x] = (p[y * w + xr] - p[y * w + xl]) / 2.0;
                gy[base + y * w + x] = (p[yd * w + x] - p[yu * w + x]) / 2.0;
            }
        }
    }
    (gx, gy)
}

/// Mean of `|∇a − ∇b| / (|∇a| + |∇b| + 0.1)` over pixels and channels.
pub fn gradient_difference(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.shape().ensure_eq(&b.shape())?;
    let (ax, ay) = gradients(a);
    let (bx, by) = gradients(b);
    let mut sum = 0.0;
    for i in 0..a.len() {
        let d = (ax[i] - bx[i]).hypot(ay[i] - by[i]);
        let na = ax[i].hypot(ay[i]);
        let nb = bx[i].hypot(by[i]);
        sum += d / (na + nb + GRAD_FLOOR);
    }
    Ok(sum / a.len() as f64)
}

/// `0.5·(1 − SSIM) + 0.5·G`. Lower is better; 0 for identical images.
pub fn perceptual_proxy(a: &Tensor, b: &Tensor) -> Result<f64> {
    let s = structural_similarity(a, b)?;
    let g = gradient_difference(a, b)?;
    Ok((0.5 * (1.0 - s) + 0.5 * g).clamp(0.0, 1.0))
}
