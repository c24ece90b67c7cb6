//! Generator and discriminator networks and the adversarial losses.
//!
//! Conditioning: the generator's fully-connected input is the concatenation of the
//! latent vector, the constraint value plane and the mask plane; the discriminator
//! sees the image, the value plane and the mask plane stacked as three channels.
//!
//! The discriminator maximizes `E[log D(X, C̃)] + E[log(1 − D(G(z, C), C))]`, so
//! [`discriminator_loss`] returns the negation of that for minimization. The
//! generator minimizes `E[log(1 − D(G(z, C), C))] + λ·E[‖C − M(C) ⊙ G(z, C)‖²]`
//! ([`generator_loss`]); `λ = 0` is the plain conditional GAN.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintMap;
use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::nn::{
    leaky_relu, leaky_relu_backward, relu, relu_backward, sigmoid, tanh, tanh_backward, BatchNorm,
    BatchNormCache, Conv2d, Conv2dCache, ConvTranspose2d, ConvTranspose2dCache, Linear,
    LinearCache, Mode, Param, Tensor,
};

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` inside logarithms.
pub const PROB_CLAMP: f64 = 1e-7;
pub const DEFAULT_LATENT_DIM: usize = 100;

/// Layer sizes for both networks. The defaults are the DCGAN-style pair used throughout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub side: usize,
    pub latent_dim: usize,
    /// Channels of the feature map produced by the generator's dense layer.
    pub g_dense_channels: usize,
    /// Filters of the two transposed convolutions.
    pub g_filters: [usize; 2],
    /// Filters of the two discriminator convolutions.
    pub d_filters: [usize; 2],
    pub kernel: usize,
    pub leaky_slope_milli: u32,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            side: crate::grid::MNIST_SIDE,
            latent_dim: DEFAULT_LATENT_DIM,
            g_dense_channels: 128,
            g_filters: [128, 64],
            d_filters: [64, 128],
            kernel: 4,
            leaky_slope_milli: 200,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.side == 0 || !self.side.is_multiple_of(4) {
            return Err(Error::invalid(format!(
                "image side {} must be a positive multiple of 4",
                self.side
            )));
        }
        if self.latent_dim == 0 {
            return Err(Error::invalid("latent dimension must be positive"));
        }
        if self.kernel != 4 {
            return Err(Error::invalid(
                "stride-2 up/down-sampling layers require kernel 4",
            ));
        }
        Ok(())
    }

    fn coarse(&self) -> usize {
        self.side / 4
    }

    fn pixels(&self) -> usize {
        self.side * self.side
    }

    fn leaky_slope(&self) -> f32 {
        self.leaky_slope_milli as f32 / 1000.0
    }
}

/// Standard normal latent batch `[batch, dim]`.
pub fn sample_latent<R: Rng + ?Sized>(batch: usize, dim: usize, rng: &mut R) -> Result<Tensor> {
    if batch == 0 {
        return Err(Error::invalid("latent batch size must be at least 1"));
    }
    let data = (0..batch * dim)
        .map(|_| rng.sample::<f32, _>(StandardNormal))
        .collect();
    Ok(Tensor::new(vec![batch, dim], data))
}

fn check_conditioning(arch: &Architecture, n: usize, cond: &[&ConstraintMap]) -> Result<()> {
    if cond.len() != n {
        return Err(Error::dim(format!(
            "{} constraint maps for a batch of {n}",
            cond.len()
        )));
    }
    if let Some(c) = cond.iter().find(|c| c.side() != arch.side) {
        return Err(Error::dim(format!(
            "constraint map side {} but networks use {}",
            c.side(),
            arch.side
        )));
    }
    Ok(())
}

fn dcgan_gamma<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Param {
    Param::normal(vec![channels], 1.0, 0.02, rng)
}

const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub arch: Architecture,
    dense: Linear,
    bn0: BatchNorm,
    up1: ConvTranspose2d,
    bn1: BatchNorm,
    up2: ConvTranspose2d,
    bn2: BatchNorm,
    project: Conv2d,
}

/// Everything [`Generator::backward`] needs from one forward pass.
pub struct GeneratorTape {
    dense: LinearCache,
    bn0: BatchNormCache,
    a0: Vec<f32>,
    up1: ConvTranspose2dCache,
    bn1: BatchNormCache,
    a1: Vec<f32>,
    up2: ConvTranspose2dCache,
    bn2: BatchNormCache,
    a2: Tensor,
    project: Conv2dCache,
    out: Vec<f32>,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let c0 = arch.g_dense_channels;
        let [f1, f2] = arch.g_filters;
        let k = arch.kernel;
        let s0 = arch.coarse();
        Ok(Self {
            arch,
            dense: Linear::new(
                arch.latent_dim + 2 * arch.pixels(),
                c0 * s0 * s0,
                false,
                INIT_STD,
                rng,
            ),
            bn0: BatchNorm::new(c0, dcgan_gamma(c0, rng)),
            up1: ConvTranspose2d::new(c0, f1, k, 2, 1, false, INIT_STD, rng),
            bn1: BatchNorm::new(f1, dcgan_gamma(f1, rng)),
            up2: ConvTranspose2d::new(f1, f2, k, 2, 1, false, INIT_STD, rng),
            bn2: BatchNorm::new(f2, dcgan_gamma(f2, rng)),
            project: Conv2d::new(f2, 1, 3, 1, 1, true, INIT_STD, rng),
        })
    }

    fn dense_input(&self, z: &Tensor, cond: &[&ConstraintMap]) -> Result<Tensor> {
        let n = z.batch();
        if z.shape() != [n, self.arch.latent_dim] {
            return Err(Error::dim(format!(
                "latent batch shape {:?}, expected [N, {}]",
                z.shape(),
                self.arch.latent_dim
            )));
        }
        check_conditioning(&self.arch, n, cond)?;
        let width = self.arch.latent_dim + 2 * self.arch.pixels();
        let mut input = Vec::with_capacity(n * width);
        for (zi, c) in z.data().chunks_exact(self.arch.latent_dim).zip(cond) {
            input.extend_from_slice(zi);
            input.extend_from_slice(c.values());
            input.extend(c.mask_plane());
        }
        Ok(Tensor::new(vec![n, width], input))
    }

    fn run(&mut self, input: Tensor, mode: Mode) -> (Tensor, GeneratorTape) {
        let n = input.batch();
        let s0 = self.arch.coarse();
        let (h, dense) = self.dense.forward(input);
        let h = h.reshape(vec![n, self.arch.g_dense_channels, s0, s0]);
        let (mut h, bn0) = self.bn0.forward(h, mode);
        relu(h.data_mut());
        let a0 = h.data().to_vec();
        let (h, up1) = self.up1.forward(&h);
        let (mut h, bn1) = self.bn1.forward(h, mode);
        relu(h.data_mut());
        let a1 = h.data().to_vec();
        let (h, up2) = self.up2.forward(&h);
        let (mut h, bn2) = self.bn2.forward(h, mode);
        relu(h.data_mut());
        let (mut out, project) = self.project.forward(&h);
        tanh(out.data_mut());
        let tape = GeneratorTape {
            dense,
            bn0,
            a0,
            up1,
            bn1,
            a1,
            up2,
            bn2,
            a2: h,
            project,
            out: out.data().to_vec(),
        };
        (out, tape)
    }

    /// Training-mode forward (batch statistics, running estimates updated).
    /// Output is `[N, 1, P, P]`.
    pub fn forward_train(
        &mut self,
        z: &Tensor,
        cond: &[&ConstraintMap],
    ) -> Result<(Tensor, GeneratorTape)> {
        let input = self.dense_input(z, cond)?;
        Ok(self.run(input, Mode::Train))
    }

    /// Inference-mode forward: deterministic in `(parameters, z, C)`.
    pub fn forward_eval(&self, z: &Tensor, cond: &[&ConstraintMap]) -> Result<Tensor> {
        let input = self.dense_input(z, cond)?;
        let n = input.batch();
        let s0 = self.arch.coarse();
        let (h, _) = self.dense.forward(input);
        let h = h.reshape(vec![n, self.arch.g_dense_channels, s0, s0]);
        let (mut h, _) = self.bn0.forward_eval(h);
        relu(h.data_mut());
        let (h, _) = self.up1.forward(&h);
        let (mut h, _) = self.bn1.forward_eval(h);
        relu(h.data_mut());
        let (h, _) = self.up2.forward(&h);
        let (mut h, _) = self.bn2.forward_eval(h);
        relu(h.data_mut());
        let (mut out, _) = self.project.forward(&h);
        tanh(out.data_mut());
        Ok(out)
    }

    /// Inference-mode generation, one grid per latent row.
    pub fn generate(&self, z: &Tensor, cond: &[&ConstraintMap]) -> Result<Vec<ImageGrid>> {
        let out = self.forward_eval(z, cond)?;
        Ok(split_images(&out, self.arch.side))
    }

    /// Backpropagates `d_out` (gradient w.r.t. the `[N, 1, P, P]` output), accumulating into parameter grads.
    pub fn backward(&mut self, tape: GeneratorTape, d_out: &Tensor) {
        let mut g = d_out.clone();
        tanh_backward(&tape.out, g.data_mut());
        let mut g = self
            .project
            .backward(tape.project, &g, true, true)
            .expect("input grad");
        relu_backward(tape.a2.data(), g.data_mut());
        let g = self.bn2.backward(tape.bn2, &g, true);
        let mut g = self
            .up2
            .backward(tape.up2, &g, true, true)
            .expect("input grad");
        relu_backward(&tape.a1, g.data_mut());
        let g = self.bn1.backward(tape.bn1, &g, true);
        let mut g = self
            .up1
            .backward(tape.up1, &g, true, true)
            .expect("input grad");
        relu_backward(&tape.a0, g.data_mut());
        let g = self.bn0.backward(tape.bn0, &g, true);
        let n = g.batch();
        let g = g.reshape(vec![n, self.dense.out_features]);
        self.dense.backward(tape.dense, &g, true, false);
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.dense.params_mut();
        v.extend(self.bn0.params_mut());
        v.extend(self.up1.params_mut());
        v.extend(self.bn1.params_mut());
        v.extend(self.up2.params_mut());
        v.extend(self.bn2.params_mut());
        v.extend(self.project.params_mut());
        v
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors()
            .iter()
            .filter(|(name, _)| !name.contains("running"))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Parameters and batch-norm running statistics, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Vec<f32>)> {
        let mut v = vec![("dense.weight".to_string(), &self.dense.weight.value)];
        push_bn(&mut v, "bn0", &self.bn0);
        v.push(("up1.weight".into(), &self.up1.weight.value));
        push_bn(&mut v, "bn1", &self.bn1);
        v.push(("up2.weight".into(), &self.up2.weight.value));
        push_bn(&mut v, "bn2", &self.bn2);
        v.push(("project.weight".into(), &self.project.weight.value));
        v.push((
            "project.bias".into(),
            &self.project.bias.as_ref().expect("bias").value,
        ));
        v
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Vec<f32>)> {
        let mut v = vec![("dense.weight".to_string(), &mut self.dense.weight.value)];
        push_bn_mut(&mut v, "bn0", &mut self.bn0);
        v.push(("up1.weight".into(), &mut self.up1.weight.value));
        push_bn_mut(&mut v, "bn1", &mut self.bn1);
        v.push(("up2.weight".into(), &mut self.up2.weight.value));
        push_bn_mut(&mut v, "bn2", &mut self.bn2);
        v.push(("project.weight".into(), &mut self.project.weight.value));
        v.push((
            "project.bias".into(),
            &mut self.project.bias.as_mut().expect("bias").value,
        ));
        v
    }
}

fn push_bn<'a>(v: &mut Vec<(String, &'a Vec<f32>)>, name: &str, bn: &'a BatchNorm) {
    v.push((format!("{name}.gamma"), &bn.gamma.value));
    v.push((format!("{name}.beta"), &bn.beta.value));
    v.push((format!("{name}.running_mean"), &bn.running_mean));
    v.push((format!("{name}.running_var"), &bn.running_var));
}

fn push_bn_mut<'a>(v: &mut Vec<(String, &'a mut Vec<f32>)>, name: &str, bn: &'a mut BatchNorm) {
    v.push((format!("{name}.gamma"), &mut bn.gamma.value));
    v.push((format!("{name}.beta"), &mut bn.beta.value));
    v.push((format!("{name}.running_mean"), &mut bn.running_mean));
    v.push((format!("{name}.running_var"), &mut bn.running_var));
}

/// Splits a `[N, 1, P, P]` tensor into grids.
pub fn split_images(t: &Tensor, side: usize) -> Vec<ImageGrid> {
    t.data()
        .chunks_exact(side * side)
        .map(|c| ImageGrid::from_raw(side, c.to_vec()))
        .collect()
}

/// Stacks grids into `[N, 1, P, P]`.
pub fn stack_images(images: &[&ImageGrid]) -> Result<Tensor> {
    let side = images
        .first()
        .map(|g| g.side())
        .ok_or_else(|| Error::invalid("cannot stack an empty image batch"))?;
    let mut data = Vec::with_capacity(images.len() * side * side);
    for g in images {
        g.check_side(side)?;
        data.extend_from_slice(g.pixels());
    }
    Ok(Tensor::new(vec![images.len(), 1, side, side], data))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub arch: Architecture,
    conv1: Conv2d,
    conv2: Conv2d,
    bn2: BatchNorm,
    head: Linear,
}

pub struct DiscriminatorTape {
    conv1: Conv2dCache,
    a1: Vec<f32>,
    conv2: Conv2dCache,
    bn2: BatchNormCache,
    a2: Vec<f32>,
    head: LinearCache,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let [f1, f2] = arch.d_filters;
        let k = arch.kernel;
        let s0 = arch.coarse();
        Ok(Self {
            arch,
            conv1: Conv2d::new(3, f1, k, 2, 1, true, INIT_STD, rng),
            conv2: Conv2d::new(f1, f2, k, 2, 1, false, INIT_STD, rng),
            bn2: BatchNorm::new(f2, dcgan_gamma(f2, rng)),
            head: Linear::new(f2 * s0 * s0, 1, true, INIT_STD, rng),
        })
    }

    fn input(&self, images: &Tensor, cond: &[&ConstraintMap]) -> Result<Tensor> {
        let p = self.arch.pixels();
        let n = images.batch();
        if images.shape() != [n, 1, self.arch.side, self.arch.side] {
            return Err(Error::dim(format!(
                "discriminator images {:?}, expected [N, 1, {s}, {s}]",
                images.shape(),
                s = self.arch.side
            )));
        }
        check_conditioning(&self.arch, n, cond)?;
        let mut data = Vec::with_capacity(n * 3 * p);
        for (img, c) in images.data().chunks_exact(p).zip(cond) {
            data.extend_from_slice(img);
            data.extend_from_slice(c.values());
            data.extend(c.mask_plane());
        }
        Ok(Tensor::new(
            vec![n, 3, self.arch.side, self.arch.side],
            data,
        ))
    }

    fn run(&mut self, x: Tensor, mode: Mode) -> (Vec<f32>, DiscriminatorTape) {
        let slope = self.arch.leaky_slope();
        let n = x.batch();
        let (mut h, conv1) = self.conv1.forward(&x);
        leaky_relu(h.data_mut(), slope);
        let a1 = h.data().to_vec();
        let (h, conv2) = self.conv2.forward(&h);
        let (mut h, bn2) = match mode {
            Mode::Train => self.bn2.forward(h, mode),
            Mode::Eval => self.bn2.forward_eval(h),
        };
        leaky_relu(h.data_mut(), slope);
        let a2 = h.data().to_vec();
        let width = h.len() / n;
        let (logits, head) = self.head.forward(h.reshape(vec![n, width]));
        (
            logits.into_data(),
            DiscriminatorTape {
                conv1,
                a1,
                conv2,
                bn2,
                a2,
                head,
            },
        )
    }

    /// Training-mode forward returning one logit per pair.
    pub fn forward_train(
        &mut self,
        images: &Tensor,
        cond: &[&ConstraintMap],
    ) -> Result<(Vec<f32>, DiscriminatorTape)> {
        let x = self.input(images, cond)?;
        Ok(self.run(x, Mode::Train))
    }

    /// Inference-mode logits.
    pub fn logits_eval(&self, images: &Tensor, cond: &[&ConstraintMap]) -> Result<Vec<f32>> {
        let x = self.input(images, cond)?;
        let slope = self.arch.leaky_slope();
        let n = x.batch();
        let (mut h, _) = self.conv1.forward(&x);
        leaky_relu(h.data_mut(), slope);
        let (h, _) = self.conv2.forward(&h);
        let (mut h, _) = self.bn2.forward_eval(h);
        leaky_relu(h.data_mut(), slope);
        let width = h.len() / n;
        let (logits, _) = self.head.forward(h.reshape(vec![n, width]));
        Ok(logits.into_data())
    }

    /// `D(x, c)`: probability that each pair is real, in inference mode.
    pub fn probabilities(&self, images: &Tensor, cond: &[&ConstraintMap]) -> Result<Vec<f64>> {
        Ok(self
            .logits_eval(images, cond)?
            .into_iter()
            .map(|l| sigmoid(l) as f64)
            .collect())
    }

    /// Backpropagates logit gradients; returns the gradient w.r.t. the image channel `[N, 1, P, P]`.
    pub fn backward(
        &mut self,
        tape: DiscriminatorTape,
        d_logits: &[f32],
        param_grads: bool,
    ) -> Tensor {
        let slope = self.arch.leaky_slope();
        let n = d_logits.len();
        let dl = Tensor::new(vec![n, 1], d_logits.to_vec());
        let mut g = self
            .head
            .backward(tape.head, &dl, param_grads, true)
            .expect("input grad");
        leaky_relu_backward(&tape.a2, g.data_mut(), slope);
        let s0 = self.arch.coarse();
        let g = g.reshape(vec![n, self.arch.d_filters[1], s0, s0]);
        let g = self.bn2.backward(tape.bn2, &g, param_grads);
        let mut g = self
            .conv2
            .backward(tape.conv2, &g, param_grads, true)
            .expect("input grad");
        leaky_relu_backward(&tape.a1, g.data_mut(), slope);
        let dx = self
            .conv1
            .backward(tape.conv1, &g, param_grads, true)
            .expect("input grad");
        let p = self.arch.pixels();
        let mut d_img = Vec::with_capacity(n * p);
        for sample in dx.data().chunks_exact(3 * p) {
            d_img.extend_from_slice(&sample[..p]);
        }
        Tensor::new(vec![n, 1, self.arch.side, self.arch.side], d_img)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.conv1.params_mut();
        v.extend(self.conv2.params_mut());
        v.extend(self.bn2.params_mut());
        v.extend(self.head.params_mut());
        v
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Vec<f32>)> {
        let mut v = vec![
            ("conv1.weight".to_string(), &self.conv1.weight.value),
            (
                "conv1.bias".to_string(),
                &self.conv1.bias.as_ref().expect("bias").value,
            ),
            ("conv2.weight".to_string(), &self.conv2.weight.value),
        ];
        push_bn(&mut v, "bn2", &self.bn2);
        v.push(("head.weight".into(), &self.head.weight.value));
        v.push((
            "head.bias".into(),
            &self.head.bias.as_ref().expect("bias").value,
        ));
        v
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Vec<f32>)> {
        let mut v = vec![
            ("conv1.weight".to_string(), &mut self.conv1.weight.value),
            (
                "conv1.bias".to_string(),
                &mut self.conv1.bias.as_mut().expect("bias").value,
            ),
            ("conv2.weight".to_string(), &mut self.conv2.weight.value),
        ];
        push_bn_mut(&mut v, "bn2", &mut self.bn2);
        v.push(("head.weight".into(), &mut self.head.weight.value));
        v.push((
            "head.bias".into(),
            &mut self.head.bias.as_mut().expect("bias").value,
        ));
        v
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len() as f64;
    xs.sum::<f64>() / n
}

fn check_probs(name: &str, ps: &[f64]) -> Result<()> {
    if ps.is_empty() {
        return Err(Error::invalid(format!("{name} probabilities are empty")));
    }
    if let Some(p) = ps.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::invalid(format!(
            "{name} probability {p} outside [0, 1]"
        )));
    }
    Ok(())
}

/// `−mean(log D(real)) − mean(log(1 − D(fake)))` with clamped probabilities.
pub fn discriminator_loss(d_real: &[f64], d_fake: &[f64]) -> Result<f64> {
    check_probs("real", d_real)?;
    check_probs("fake", d_fake)?;
    Ok(-mean(d_real.iter().map(|&p| clamp_prob(p).ln()))
        - mean(d_fake.iter().map(|&p| (1.0 - clamp_prob(p)).ln())))
}

/// `mean(log(1 − D(fake))) + λ·mean(penalties)`.
pub fn generator_loss(d_fake: &[f64], penalties: &[f64], lambda: f64) -> Result<f64> {
    Ok(adversarial_generator_term(d_fake, false)? + penalty_term(penalties, lambda)?)
}

/// `−mean(log D(fake)) + λ·mean(penalties)`.
pub fn non_saturating_generator_loss(
    d_fake: &[f64],
    penalties: &[f64],
    lambda: f64,
) -> Result<f64> {
    Ok(adversarial_generator_term(d_fake, true)? + penalty_term(penalties, lambda)?)
}

fn adversarial_generator_term(d_fake: &[f64], non_saturating: bool) -> Result<f64> {
    check_probs("fake", d_fake)?;
    Ok(if non_saturating {
        -mean(d_fake.iter().map(|&p| clamp_prob(p).ln()))
    } else {
        mean(d_fake.iter().map(|&p| (1.0 - clamp_prob(p)).ln()))
    })
}

fn penalty_term(penalties: &[f64], lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!(
            "lambda must be nonnegative, got {lambda}"
        )));
    }
    if penalties.is_empty() {
        return Ok(0.0);
    }
    Ok(lambda * mean(penalties.iter().copied()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GanLosses {
    pub discriminator: f64,
    pub generator: f64,
}

/// Losses of the unconditional game: no conditioning inputs and no penalty.
pub fn unconditional_gan_losses(d_real: &[f64], d_fake: &[f64]) -> Result<GanLosses> {
    Ok(GanLosses {
        discriminator: discriminator_loss(d_real, d_fake)?,
        generator: adversarial_generator_term(d_fake, false)?,
    })
}

/// Gradients of [`discriminator_loss`] w.r.t. the real and fake logits.
pub fn discriminator_logit_grads(real_logits: &[f32], fake_logits: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let nr = real_logits.len() as f32;
    let nf = fake_logits.len() as f32;
    (
        real_logits
            .iter()
            .map(|&l| -(1.0 - sigmoid(l)) / nr)
            .collect(),
        fake_logits.iter().map(|&l| sigmoid(l) / nf).collect(),
    )
}

/// Gradient of the generator's adversarial term w.r.t. the fake logits.
pub fn generator_logit_grads(fake_logits: &[f32], non_saturating: bool) -> Vec<f32> {
    let n = fake_logits.len() as f32;
    fake_logits
        .iter()
        .map(|&l| {
            let p = sigmoid(l);
            if non_saturating {
                -(1.0 - p) / n
            } else {
                -p / n
            }
        })
        .collect()
}

/// `λ·mean_i ‖C_i − M(C_i) ⊙ G_i‖²` over a batch of generated pixels and its gradient.
///
/// `generated` is the flattened `[N, P·P]` batch. Generic over the pixel type so the
/// same code serves `f32` training and `f64` gradient checks.
pub fn penalty_objective<T>(
    maps: &[&ConstraintMap],
    generated: &[T],
    lambda: f64,
) -> Result<(f64, Vec<f64>)>
where
    T: Copy + Into<f64>,
{
    let n = maps.len();
    if n == 0 {
        return Err(Error::invalid("penalty over an empty batch"));
    }
    let p = maps[0].side() * maps[0].side();
    if generated.len() != n * p {
        return Err(Error::dim(format!(
            "{} generated pixels for {n} maps of {p}",
            generated.len()
        )));
    }
    let scale = lambda / n as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; n * p];
    for ((c, g), dg) in maps
        .iter()
        .zip(generated.chunks_exact(p))
        .zip(grad.chunks_exact_mut(p))
    {
        if c.side() * c.side() != p {
            return Err(Error::dim(
                "constraint maps of differing sides in one batch",
            ));
        }
        for (((&v, &m), &x), d) in c.values().iter().zip(c.mask()).zip(g).zip(dg.iter_mut()) {
            let x: f64 = x.into();
            let masked = if m { x } else { 0.0 };
            let r = v as f64 - masked;
            total += r * r;
            if m {
                *d = -2.0 * scale * r;
            }
        }
    }
    Ok((scale * total, grad))
}
