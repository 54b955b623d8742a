//! Forward and backward kernels for the fixed layer set: same-padded
//! convolutions, SiLU, 2×2 average pooling and nearest 2× upsampling.
//! Activations are channel-major planes of `h × w` values.

use std::ops::Range;

/// Square same-padded convolution, stride 1. Parameters are laid out as the
/// weight `[out][in][k][k]` followed by the bias `[out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub offset: usize,
}

impl Conv {
    pub fn weight_len(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.out_ch
    }

    pub fn weight_range(&self) -> Range<usize> {
        self.offset..self.offset + self.weight_len()
    }

    pub fn bias_range(&self) -> Range<usize> {
        let start = self.offset + self.weight_len();
        start..start + self.out_ch
    }

    pub fn fan_in(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    pub fn forward(&self, params: &[f64], input: &[f64], h: usize, w: usize) -> Vec<f64> {
        let plane = h * w;
        debug_assert_eq!(input.len(), self.in_ch * plane);
        let weights = &params[self.weight_range()];
        let bias = &params[self.bias_range()];
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let mut out = vec![0.0; self.out_ch * plane];
        for (o, out_plane) in out.chunks_mut(plane).enumerate() {
            out_plane.fill(bias[o]);
            for i in 0..self.in_ch {
                let in_plane = &input[i * plane..(i + 1) * plane];
                let wbase = (o * self.in_ch + i) * k * k;
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let wv = weights[wbase + ky * k + kx];
                        let (x0, x1) = valid_span(dx, w);
                        for y in valid_rows(dy, h) {
                            let sy = (y as isize + dy) as usize;
                            let dst = &mut out_plane[y * w + x0..y * w + x1];
                            let src_start = (sy * w + x0) as isize + dx;
                            let src = &in_plane[src_start as usize..src_start as usize + (x1 - x0)];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad_params` and, if requested,
    /// returns the gradient with respect to the input.
    pub fn backward(
        &self,
        params: &[f64],
        input: &[f64],
        grad_out: &[f64],
        h: usize,
        w: usize,
        grad_params: &mut [f64],
        need_input_grad: bool,
    ) -> Option<Vec<f64>> {
        let plane = h * w;
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let weights = &params[self.weight_range()];
        let mut grad_in = need_input_grad.then(|| vec![0.0; self.in_ch * plane]);
        let wr = self.weight_range();
        let br = self.bias_range();
        for o in 0..self.out_ch {
            let g_plane = &grad_out[o * plane..(o + 1) * plane];
            grad_params[br.start + o] += g_plane.iter().sum::<f64>();
            for i in 0..self.in_ch {
                let in_plane = &input[i * plane..(i + 1) * plane];
                let wbase = (o * self.in_ch + i) * k * k;
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let wv = weights[wbase + ky * k + kx];
                        let (x0, x1) = valid_span(dx, w);
                        let mut acc = 0.0;
                        for y in valid_rows(dy, h) {
                            let sy = (y as isize + dy) as usize;
                            let g = &g_plane[y * w + x0..y * w + x1];
                            let src_start = ((sy * w + x0) as isize + dx) as usize;
                            let src = &in_plane[src_start..src_start + (x1 - x0)];
                            acc += g.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                            if let Some(gi) = grad_in.as_mut() {
                                let dst = &mut gi[i * plane + src_start..i * plane + src_start + (x1 - x0)];
                                for (d, gv) in dst.iter_mut().zip(g) {
                                    *d += wv * gv;
                                }
                            }
                        }
                        grad_params[wr.start + wbase + ky * k + kx] += acc;
                    }
                }
            }
        }
        grad_in
    }
}

fn valid_span(dx: isize, w: usize) -> (usize, usize) {
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx.max(0)).max(x0 as isize) as usize;
    (x0.min(w), x1.min(w))
}

fn valid_rows(dy: isize, h: usize) -> Range<usize> {
    let y0 = (-dy).max(0) as usize;
    let y1 = (h as isize - dy.max(0)).max(0) as usize;
    y0.min(h)..y1.max(y0.min(h))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

/// Gradient through SiLU given its pre-activation input.
pub fn silu_backward(pre: &[f64], grad_out: &[f64]) -> Vec<f64> {
    pre.iter()
        .zip(grad_out)
        .map(|(&x, &g)| {
            let s = sigmoid(x);
            g * s * (1.0 + x * (1.0 - s))
        })
        .collect()
}

pub fn avg_pool2(input: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; channels * oh * ow];
    for c in 0..channels {
        let src = &input[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * oh * ow..(c + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let a = src[2 * y * w + 2 * x] + src[2 * y * w + 2 * x + 1];
                let b = src[(2 * y + 1) * w + 2 * x] + src[(2 * y + 1) * w + 2 * x + 1];
                dst[y * ow + x] = 0.25 * (a + b);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(grad_out: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut grad = vec![0.0; channels * h * w];
    for c in 0..channels {
        let g = &grad_out[c * oh * ow..(c + 1) * oh * ow];
        let dst = &mut grad[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = 0.25 * g[(y / 2) * ow + x / 2];
            }
        }
    }
    grad
}

/// Nearest-neighbour 2× upsampling of `channels` planes of `h × w`.
pub fn upsample2(input: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h * 2, w * 2);
    let mut out = vec![0.0; channels * oh * ow];
    for c in 0..channels {
        let src = &input[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * oh * ow..(c + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                dst[y * ow + x] = src[(y / 2) * w + x / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(grad_out: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h * 2, w * 2);
    let mut grad = vec![0.0; channels * h * w];
    for c in 0..channels {
        let g = &grad_out[c * oh * ow..(c + 1) * oh * ow];
        let dst = &mut grad[c * h * w..(c + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                dst[(y / 2) * w + x / 2] += g[y * ow + x];
            }
        }
    }
    grad
}
