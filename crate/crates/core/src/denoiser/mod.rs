//! The conditional noise-prediction network ε_θ(x_t, t | m).
//!
//! Input channels are `[x_t, m, time features]`, where `m` is the one-hot
//! segmentation plus edge plane and the time features are sinusoids of `t`.
//! Two fixed layouts are available:
//!
//! * `UNet`: three resolution levels (full, ½, ¼) with skip concatenation.
//! * `PixelMlp`: 1×1 convolutions only, for fast tests.
//!
//! Both end in a zero-initialised 1×1 head that sees the last hidden features,
//! the raw input, and the noise-level-scaled pair `x_t/√(1−ᾱ_t)` and
//! `m·√ᾱ_t/√(1−ᾱ_t)`. With those the ε target is affine in the head inputs
//! for piecewise-constant scenes, which the hidden layers only need to refine.

mod checkpoint;
mod gradcheck;
mod layers;
mod optim;

use rayon::prelude::*;

use crate::bank::NoiseBank;
use crate::diffusion::{forward_diffuse, NoisePredictor, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::rng;
use crate::semantics::SemanticCondition;
use crate::tensor::{Shape, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use gradcheck::{gradient_check, GradCheckOptions, GradCheckReport};
pub use layers::Conv;
pub use optim::{load_optimizer, save_optimizer, OptimizerKind, OptimizerState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    UNet = 0,
    PixelMlp = 1,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiserConfig {
    pub architecture: Architecture,
    pub image_channels: usize,
    pub cond_channels: usize,
    pub time_dim: usize,
    pub base_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Linear schedule the model is trained for; the head's noise-level
    /// scaling and the time-feature period come from it.
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DenoiserConfig {
    /// Toy 3×32×32 setting with five classes plus the edge plane.
    fn default() -> Self {
        DenoiserConfig {
            architecture: Architecture::UNet,
            image_channels: 3,
            cond_channels: crate::semantics::NUM_CLASSES + 1,
            time_dim: 8,
            base_channels: 8,
            height: 32,
            width: 32,
            steps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
        }
    }
}

impl DenoiserConfig {
    pub fn image_shape(&self) -> Shape {
        Shape::new(self.image_channels, self.height, self.width)
    }

    fn input_channels(&self) -> usize {
        self.image_channels + self.cond_channels + self.time_dim
    }

    fn scaled_channels(&self) -> usize {
        self.image_channels + self.cond_channels
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.steps, ScheduleKind::Linear, self.beta_start, self.beta_end)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_channels == 0 || self.cond_channels == 0 || self.base_channels == 0 {
            return Err(Error::config("denoiser channel counts must be positive"));
        }
        if !self.time_dim.is_multiple_of(2) {
            return Err(Error::config("time embedding size must be even"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::config("denoiser spatial size must be positive"));
        }
        if self.architecture == Architecture::UNet && (!self.height.is_multiple_of(4) || !self.width.is_multiple_of(4))
        {
            return Err(Error::config(format!(
                "three-level network needs height and width divisible by 4, got {}x{}",
                self.height, self.width
            )));
        }
        self.schedule()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layers {
    convs: Vec<Conv>,
}

impl Layers {
    fn build(cfg: &DenoiserConfig) -> Self {
        let c = cfg.base_channels;
        let cin = cfg.input_channels();
        let head_in = c + cin + cfg.scaled_channels();
        let shapes: Vec<(usize, usize, usize)> = match cfg.architecture {
            Architecture::UNet => vec![
                (cin, c, 3),
                (c, c, 3),
                (c, 2 * c, 3),
                (2 * c, 2 * c, 3),
                (4 * c, 2 * c, 3),
                (3 * c, c, 3),
                (head_in, cfg.image_channels, 1),
            ],
            Architecture::PixelMlp => vec![
                (cin, c, 1),
                (c, c, 1),
                (head_in, cfg.image_channels, 1),
            ],
        };
        let mut offset = 0;
        let convs = shapes
            .into_iter()
            .map(|(in_ch, out_ch, kernel)| {
                let conv = Conv {
                    in_ch,
                    out_ch,
                    kernel,
                    offset,
                };
                offset += conv.param_len();
                conv
            })
            .collect();
        Layers { convs }
    }

    fn param_count(&self) -> usize {
        self.convs.iter().map(|c| c.param_len()).sum()
    }

    fn head(&self) -> &Conv {
        self.convs.last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    config: DenoiserConfig,
    layers: Layers,
    schedule: NoiseSchedule,
    params: Vec<f64>,
}

/// Sinusoidal features `[sin(t·f_k), cos(t·f_k)]` with `f_k = P^(−2k/dim)`,
/// period `P = T`.
pub fn time_features(t: usize, dim: usize, steps: usize) -> Vec<f64> {
    let period = steps.max(2) as f64;
    (0..dim / 2)
        .flat_map(|k| {
            let freq = period.powf(-2.0 * k as f64 / dim as f64);
            let a = t as f64 * freq;
            [a.sin(), a.cos()]
        })
        .collect()
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Cached activations of one forward pass.
struct Trace {
    input: Vec<f64>,
    head_in: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl DenoiserModel {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layers = Layers::build(&config);
        let mut params = vec![0.0; layers.param_count()];
        let mut init_rng = rng::seeded(rng::derive_seed(seed, rng::stream::MODEL_INIT, 0));
        use rand::Rng;
        let head = *layers.head();
        for conv in &layers.convs {
            if *conv == head {
                continue;
            }
            let bound = 1.0 / (conv.fan_in() as f64).sqrt();
            for p in &mut params[conv.offset..conv.offset + conv.param_len()] {
                *p = round_f32(init_rng.gen_range(-bound..bound));
            }
        }
        let schedule = config.schedule()?;
        Ok(DenoiserModel {
            config,
            layers,
            schedule,
            params,
        })
    }

    pub fn from_params(config: DenoiserConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layers = Layers::build(&config);
        if params.len() != layers.param_count() {
            return Err(Error::format(format!(
                "architecture needs {} parameters, got {}",
                layers.param_count(),
                params.len()
            )));
        }
        let schedule = config.schedule()?;
        Ok(DenoiserModel {
            config,
            layers,
            schedule,
            params,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    /// Named parameter tensors in registration order.
    pub fn param_tensors(&self) -> Vec<ParamTensor> {
        let n = self.layers.convs.len();
        self.layers
            .convs
            .iter()
            .enumerate()
            .flat_map(|(i, conv)| {
                let name = if i + 1 == n { "head".to_string() } else { format!("conv{i}") };
                [
                    ParamTensor {
                        name: format!("{name}.weight"),
                        offset: conv.weight_range().start,
                        len: conv.weight_len(),
                    },
                    ParamTensor {
                        name: format!("{name}.bias"),
                        offset: conv.bias_range().start,
                        len: conv.out_ch,
                    },
                ]
            })
            .collect()
    }

    /// Replaces the zero head with small random weights. Only gradient checks
    /// need this: with a zero head every upstream gradient vanishes.
    pub fn randomize_head(&mut self, seed: u64) {
        use rand::Rng;
        let head = *self.layers.head();
        let bound = 1.0 / (head.fan_in() as f64).sqrt();
        let mut r = rng::seeded(seed);
        for p in &mut self.params[head.offset..head.offset + head.param_len()] {
            *p = round_f32(r.gen_range(-bound..bound));
        }
    }

    fn check_inputs(&self, x_t: &Tensor, t: usize, cond: &Tensor) -> Result<()> {
        self.config.image_shape().ensure_eq(&x_t.shape())?;
        self.config
            .image_shape()
            .with_channels(self.config.cond_channels)
            .ensure_eq(&cond.shape())?;
        self.schedule.check_step(t)
    }

    fn assemble_input(&self, x_t: &Tensor, t: usize, cond: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let plane = self.config.height * self.config.width;
        let mut input = Vec::with_capacity(self.config.input_channels() * plane);
        input.extend_from_slice(x_t.data());
        input.extend_from_slice(cond.data());
        for f in time_features(t, self.config.time_dim, self.config.steps) {
            input.extend(std::iter::repeat_n(f, plane));
        }
        let ab = self.schedule.alpha_bar(t);
        let noise_gain = 1.0 / (1.0 - ab).sqrt();
        let signal_gain = ab.sqrt() * noise_gain;
        let mut scaled = Vec::with_capacity(self.config.scaled_channels() * plane);
        scaled.extend(x_t.data().iter().map(|v| v * noise_gain));
        scaled.extend(cond.data().iter().map(|v| v * signal_gain));
        (input, scaled)
    }

    fn forward(&self, params: &[f64], x_t: &Tensor, t: usize, cond: &Tensor) -> Trace {
        let (h, w) = (self.config.height, self.config.width);
        let c = self.config.base_channels;
        let convs = &self.layers.convs;
        let (input, scaled) = self.assemble_input(x_t, t, cond);
        let mut pre = Vec::new();
        let mut post = Vec::new();
        let last_hidden = match self.config.architecture {
            Architecture::UNet => {
                let (h2, w2, h4, w4) = (h / 2, w / 2, h / 4, w / 4);
                let a0 = convs[0].forward(params, &input, h, w);
                let s0 = layers::silu(&a0);
                let a1 = convs[1].forward(params, &s0, h, w);
                let skip1 = layers::silu(&a1);
                let p1 = layers::avg_pool2(&skip1, c, h, w);
                let a2 = convs[2].forward(params, &p1, h2, w2);
                let skip2 = layers::silu(&a2);
                let p2 = layers::avg_pool2(&skip2, 2 * c, h2, w2);
                let a3 = convs[3].forward(params, &p2, h4, w4);
                let bottom = layers::silu(&a3);
                let mut cat2 = layers::upsample2(&bottom, 2 * c, h4, w4);
                cat2.extend_from_slice(&skip2);
                let a4 = convs[4].forward(params, &cat2, h2, w2);
                let up2 = layers::silu(&a4);
                let mut cat1 = layers::upsample2(&up2, 2 * c, h2, w2);
                cat1.extend_from_slice(&skip1);
                let a5 = convs[5].forward(params, &cat1, h, w);
                let up1 = layers::silu(&a5);
                pre.extend([a0, a1, a2, a3, a4, a5]);
                post.extend([s0, skip1, p1, skip2, p2, bottom, cat2, up2, cat1]);
                up1
            }
            Architecture::PixelMlp => {
                let a0 = convs[0].forward(params, &input, h, w);
                let s0 = layers::silu(&a0);
                let a1 = convs[1].forward(params, &s0, h, w);
                let s1 = layers::silu(&a1);
                pre.extend([a0, a1]);
                post.push(s0);
                s1
            }
        };
        let mut head_in = last_hidden;
        head_in.extend_from_slice(&input);
        head_in.extend_from_slice(&scaled);
        let output = self.layers.head().forward(params, &head_in, h, w);
        Trace {
            input,
            head_in,
            pre,
            post,
            output,
        }
    }

    /// Backpropagates `grad_out` (∂L/∂ε̂) into `grads`.
    fn backward(&self, params: &[f64], trace: &Trace, grad_out: &[f64], grads: &mut [f64]) {
        let (h, w) = (self.config.height, self.config.width);
        let c = self.config.base_channels;
        let plane = h * w;
        let convs = &self.layers.convs;
        let g_head_in = self
            .layers
            .head()
            .backward(params, &trace.head_in, grad_out, h, w, grads, true)
            .unwrap();
        // Only the hidden-feature slice of the head input depends on parameters.
        let g_hidden = &g_head_in[..c * plane];
        match self.config.architecture {
            Architecture::UNet => {
                let (h2, w2, h4, w4) = (h / 2, w / 2, h / 4, w / 4);
                let [a0, a1, a2, a3, a4, a5] = &trace.pre[..] else {
                    unreachable!()
                };
                let [s0, skip1, p1, skip2, p2, bottom, cat2, up2, cat1] = &trace.post[..] else {
                    unreachable!()
                };
                let g_a5 = layers::silu_backward(a5, g_hidden);
                let g_cat1 = convs[5].backward(params, cat1, &g_a5, h, w, grads, true).unwrap();
                let (g_up_u2, g_skip1_b) = g_cat1.split_at(2 * c * plane);
                let g_up2 = layers::upsample2_backward(g_up_u2, 2 * c, h2, w2);
                let g_a4 = layers::silu_backward(a4, &g_up2);
                let g_cat2 = convs[4].backward(params, cat2, &g_a4, h2, w2, grads, true).unwrap();
                let (g_up_bottom, g_skip2_b) = g_cat2.split_at(2 * c * h2 * w2);
                let g_bottom = layers::upsample2_backward(g_up_bottom, 2 * c, h4, w4);
                let g_a3 = layers::silu_backward(a3, &g_bottom);
                let g_p2 = convs[3].backward(params, p2, &g_a3, h4, w4, grads, true).unwrap();
                let mut g_skip2 = layers::avg_pool2_backward(&g_p2, 2 * c, h2, w2);
                for (a, b) in g_skip2.iter_mut().zip(g_skip2_b) {
                    *a += b;
                }
                let g_a2 = layers::silu_backward(a2, &g_skip2);
                let g_p1 = convs[2].backward(params, p1, &g_a2, h2, w2, grads, true).unwrap();
                let mut g_skip1 = layers::avg_pool2_backward(&g_p1, c, h, w);
                for (a, b) in g_skip1.iter_mut().zip(g_skip1_b) {
                    *a += b;
                }
                let g_a1 = layers::silu_backward(a1, &g_skip1);
                let g_s0 = convs[1].backward(params, s0, &g_a1, h, w, grads, true).unwrap();
                let g_a0 = layers::silu_backward(a0, &g_s0);
                convs[0].backward(params, &trace.input, &g_a0, h, w, grads, false);
                let _ = (skip1, skip2, bottom, up2);
            }
            Architecture::PixelMlp => {
                let [a0, a1] = &trace.pre[..] else { unreachable!() };
                let s0 = &trace.post[0];
                let g_a1 = layers::silu_backward(a1, g_hidden);
                let g_s0 = convs[1].backward(params, s0, &g_a1, h, w, grads, true).unwrap();
                let g_a0 = layers::silu_backward(a0, &g_s0);
                convs[0].backward(params, &trace.input, &g_a0, h, w, grads, false);
            }
        }
    }

    /// Prediction from a tensorised condition (`K + 1` channels).
    pub fn predict_with_channels(&self, x_t: &Tensor, t: usize, cond: &Tensor) -> Result<Tensor> {
        self.check_inputs(x_t, t, cond)?;
        let trace = self.forward(&self.params, x_t, t, cond);
        Tensor::from_vec(x_t.shape(), trace.output)
    }

    /// Loss and parameter gradient for one batch at an arbitrary parameter
    /// vector. Gradients are reduced in batch order.
    pub(crate) fn loss_and_grad(
        &self,
        params: &[f64],
        examples: &[PreparedExample],
    ) -> (f64, Vec<f64>) {
        let n = examples.len() as f64;
        let per_example: Vec<(f64, Vec<f64>)> = examples
            .par_iter()
            .map(|ex| {
                let trace = self.forward(params, &ex.x_t, ex.t, &ex.cond);
                let d = trace.output.len() as f64;
                let mut loss = 0.0;
                let grad_out: Vec<f64> = trace
                    .output
                    .iter()
                    .zip(ex.target.data())
                    .map(|(p, e)| {
                        let diff = p - e;
                        loss += diff * diff;
                        2.0 * diff / (d * n)
                    })
                    .collect();
                let mut grads = vec![0.0; params.len()];
                self.backward(params, &trace, &grad_out, &mut grads);
                (loss / d, grads)
            })
            .collect();
        let mut total = 0.0;
        let mut grads = vec![0.0; params.len()];
        for (l, g) in per_example {
            total += l;
            for (a, b) in grads.iter_mut().zip(&g) {
                *a += b;
            }
        }
        (total / n, grads)
    }

    pub(crate) fn loss_at(&self, params: &[f64], examples: &[PreparedExample]) -> f64 {
        let n = examples.len() as f64;
        examples
            .iter()
            .map(|ex| {
                let out = self.forward(params, &ex.x_t, ex.t, &ex.cond).output;
                let d = out.len() as f64;
                out.iter()
                    .zip(ex.target.data())
                    .map(|(p, e)| (p - e) * (p - e))
                    .sum::<f64>()
                    / d
            })
            .sum::<f64>()
            / n
    }

    pub(crate) fn params_mut(&mut self) -> &mut Vec<f64> {
        &mut self.params
    }
}

impl NoisePredictor for DenoiserModel {
    fn predict_noise(&self, x_t: &Tensor, t: usize, m: &SemanticCondition) -> Result<Tensor> {
        self.predict_with_channels(x_t, t, &m.to_channels())
    }
}

pub fn predict_noise(
    model: &DenoiserModel,
    x_t: &Tensor,
    t: usize,
    m: &SemanticCondition,
) -> Result<Tensor> {
    model.predict_noise(x_t, t, m)
}

/// Mean squared error over all elements.
pub fn restricted_loss(target: &Tensor, predicted: &Tensor) -> Result<f64> {
    target.mse(predicted)
}

/// One training example: clean image, tensorised condition, step, bank index.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub x0: Tensor,
    pub cond: Tensor,
    pub t: usize,
    pub index: usize,
}

#[derive(Debug, Clone, Default)]
pub struct TrainBatch {
    pub examples: Vec<TrainExample>,
}

pub(crate) struct PreparedExample {
    x_t: Tensor,
    t: usize,
    cond: Tensor,
    target: Tensor,
}

/// Noised inputs and bank targets for a batch.
pub(crate) fn prepare_batch(
    model: &DenoiserModel,
    batch: &TrainBatch,
    bank: &NoiseBank,
    schedule: &NoiseSchedule,
) -> Result<Vec<PreparedExample>> {
    if batch.examples.is_empty() {
        return Err(Error::config("empty training batch"));
    }
    batch
        .examples
        .iter()
        .map(|ex| {
            let target = bank.tensor(ex.index)?;
            let x_t = forward_diffuse(&ex.x0, ex.t, &target, schedule)?;
            model.check_inputs(&x_t, ex.t, &ex.cond)?;
            Ok(PreparedExample {
                x_t,
                t: ex.t,
                cond: ex.cond.clone(),
                target,
            })
        })
        .collect()
}

/// Batch loss without updating anything.
pub fn evaluate_loss(
    model: &DenoiserModel,
    batch: &TrainBatch,
    bank: &NoiseBank,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let prepared = prepare_batch(model, batch, bank, schedule)?;
    Ok(model.loss_at(model.params(), &prepared))
}

/// Noise-restricted forward diffusion for every example, bank-target loss,
/// and one optimizer update. Returns the pre-update loss.
pub fn train_step(
    model: &mut DenoiserModel,
    batch: &TrainBatch,
    bank: &NoiseBank,
    schedule: &NoiseSchedule,
    optimizer: &mut OptimizerState,
    learning_rate: f64,
) -> Result<f64> {
    let prepared = prepare_batch(model, batch, bank, schedule)?;
    let (loss, grads) = model.loss_and_grad(model.params(), &prepared);
    let step = optimizer.step_count() + 1;
    if !loss.is_finite() {
        return Err(Error::Diverged { step, loss });
    }
    optimizer.apply(model.params_mut(), &grads, learning_rate)?;
    if !model.params_finite() {
        return Err(Error::Diverged { step, loss });
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::build_bank;

    pub(crate) fn tiny_config(architecture: Architecture) -> DenoiserConfig {
        DenoiserConfig {
            architecture,
            image_channels: 3,
            cond_channels: 6,
            time_dim: 4,
            base_channels: 4,
            height: 8,
            width: 8,
            steps: 20,
            beta_start: 1e-3,
            beta_end: 0.2,
        }
    }

    fn cond_for(shape: Shape, seed: u64) -> SemanticCondition {
        use rand::Rng;
        let mut r = rng::seeded(seed);
        let plane = shape.plane();
        let labels = (0..plane).map(|_| r.gen_range(0..5u8)).collect();
        let edges = (0..plane).map(|_| r.gen_range(0..2u8)).collect();
        SemanticCondition::new(5, shape.height, shape.width, labels, edges).unwrap()
    }

    #[test]
    fn zero_head_predicts_zero() {
        for arch in [Architecture::UNet, Architecture::PixelMlp] {
            let model = DenoiserModel::new(tiny_config(arch), 1).unwrap();
            let shape = model.config().image_shape();
            let x = Tensor::randn(shape, &mut rng::seeded(2));
            let out = model.predict_noise(&x, 5, &cond_for(shape, 3)).unwrap();
            assert_eq!(out.shape(), shape);
            assert!(out.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn prediction_is_deterministic_and_shape_checked() {
        let mut model = DenoiserModel::new(tiny_config(Architecture::UNet), 1).unwrap();
        model.randomize_head(9);
        let shape = model.config().image_shape();
        let x = Tensor::randn(shape, &mut rng::seeded(2));
        let m = cond_for(shape, 3);
        let a = model.predict_noise(&x, 5, &m).unwrap();
        let b = model.predict_noise(&x, 5, &m).unwrap();
        assert_eq!(a, b);
        assert!(a.is_finite());
        assert!(a.data().iter().any(|&v| v != 0.0));
        let wrong = Tensor::zeros(Shape::new(3, 4, 4));
        assert!(model.predict_noise(&wrong, 5, &m).is_err());
        assert!(model.predict_noise(&x, 21, &m).is_err());
    }

    #[test]
    fn unet_rejects_odd_sizes() {
        let mut cfg = tiny_config(Architecture::UNet);
        cfg.height = 6;
        assert!(DenoiserModel::new(cfg, 0).is_err());
        cfg.architecture = Architecture::PixelMlp;
        assert!(DenoiserModel::new(cfg, 0).is_ok());
    }

    #[test]
    fn loss_examples() {
        let s = Shape::new(1, 2, 2);
        let a = Tensor::filled(s, 1.0);
        assert_eq!(restricted_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(restricted_loss(&a, &Tensor::zeros(s)).unwrap(), 1.0);
        let p = Tensor::from_vec(s, vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let q = Tensor::from_vec(s, vec![1.0, 1.0, -1.0, 0.25]).unwrap();
        // (0.25 + 4 + 9 + 0.0625) / 4
        assert!((restricted_loss(&p, &q).unwrap() - 3.328125).abs() < 1e-15);
        assert!(restricted_loss(&p, &Tensor::zeros(Shape::new(1, 1, 4))).is_err());
    }

    fn batch_for(model: &DenoiserModel, n: usize, seed: u64) -> TrainBatch {
        use rand::Rng;
        let shape = model.config().image_shape();
        let mut r = rng::seeded(seed);
        TrainBatch {
            examples: (0..n)
                .map(|i| TrainExample {
                    x0: Tensor::randn(shape, &mut r).clamp(-1.0, 1.0),
                    cond: cond_for(shape, seed + i as u64).to_channels(),
                    t: r.gen_range(1..=model.config().steps),
                    index: r.gen_range(0..4),
                })
                .collect(),
        }
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let mut model = DenoiserModel::new(tiny_config(Architecture::UNet), 1).unwrap();
        let bank = build_bank(3, 4, model.config().image_shape()).unwrap();
        let schedule = model.schedule().clone();
        let batch = batch_for(&model, 3, 7);
        let before = model.params().to_vec();
        let mut opt = OptimizerState::new(OptimizerKind::Adam, model.param_count());
        train_step(&mut model, &batch, &bank, &schedule, &mut opt, 0.0).unwrap();
        assert!(before
            .iter()
            .zip(model.params())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn small_step_decreases_loss() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut model = DenoiserModel::new(tiny_config(Architecture::UNet), 4).unwrap();
            let bank = build_bank(3, 4, model.config().image_shape()).unwrap();
            let schedule = model.schedule().clone();
            let batch = batch_for(&model, 1, 11);
            let mut opt = OptimizerState::new(kind, model.param_count());
            let before = train_step(&mut model, &batch, &bank, &schedule, &mut opt, 1e-4).unwrap();
            let after = evaluate_loss(&model, &batch, &bank, &schedule).unwrap();
            assert!(after < before, "{kind:?}: {after} !< {before}");
        }
    }

    #[test]
    fn training_is_reproducible() {
        let run = || {
            let mut model = DenoiserModel::new(tiny_config(Architecture::PixelMlp), 4).unwrap();
            let bank = build_bank(3, 4, model.config().image_shape()).unwrap();
            let schedule = model.schedule().clone();
            let mut opt = OptimizerState::new(OptimizerKind::Adam, model.param_count());
            (0..5)
                .map(|i| {
                    let batch = batch_for(&model, 2, 100 + i);
                    train_step(&mut model, &batch, &bank, &schedule, &mut opt, 1e-3).unwrap()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn overfits_one_example() {
        let mut model = DenoiserModel::new(tiny_config(Architecture::UNet), 4).unwrap();
        let shape = model.config().image_shape();
        let bank = build_bank(3, 4, shape).unwrap();
        let schedule = model.schedule().clone();
        let batch = TrainBatch {
            examples: vec![TrainExample {
                x0: Tensor::randn(shape, &mut rng::seeded(5)).clamp(-1.0, 1.0),
                cond: cond_for(shape, 5).to_channels(),
                t: 10,
                index: 2,
            }],
        };
        let mut opt = OptimizerState::new(OptimizerKind::Adam, model.param_count());
        let mut loss = f64::INFINITY;
        for _ in 0..2000 {
            loss = train_step(&mut model, &batch, &bank, &schedule, &mut opt, 1e-3).unwrap();
            if loss < 1e-2 {
                break;
            }
        }
        assert!(loss < 1e-2, "loss {loss}");
    }

    #[test]
    fn diverging_update_is_reported() {
        let mut model = DenoiserModel::new(tiny_config(Architecture::PixelMlp), 4).unwrap();
        let bank = build_bank(3, 4, model.config().image_shape()).unwrap();
        let schedule = model.schedule().clone();
        let batch = batch_for(&model, 2, 3);
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, model.param_count());
        let mut result = Ok(0.0);
        for _ in 0..50 {
            result = train_step(&mut model, &batch, &bank, &schedule, &mut opt, 1e300);
            if result.is_err() {
                break;
            }
        }
        assert!(matches!(result, Err(Error::Diverged { .. })), "{result:?}");
    }
}
