use rand::Rng;

use super::{cm_to_nchw, gemm, nchw_to_cm, Param, Tensor};

/// A strided convolution window mapping a `big` spatial grid onto a `small` one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Window {
    channels: usize,
    big_h: usize,
    big_w: usize,
    small_h: usize,
    small_w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl Window {
    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Output positions `o` along one axis whose input `o·stride + k − pad` lies in `[0, big)`.
    fn valid(&self, k: usize, small: usize, big: usize) -> std::ops::Range<usize> {
        let (s, p) = (self.stride, self.pad);
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        let hi = if big + p > k {
            ((big + p - k - 1) / s + 1).min(small)
        } else {
            0
        };
        lo..hi.max(lo)
    }

    /// `[N, C, big]` → columns `[C·k·k, N·small]`.
    fn im2col(&self, x: &[f32], n: usize) -> Vec<f32> {
        let small = self.small_h * self.small_w;
        let cols_w = n * small;
        let mut cols = vec![0.0; self.rows() * cols_w];
        let big = self.big_h * self.big_w;
        let s = self.stride;
        for c in 0..self.channels {
            for ky in 0..self.kernel {
                let ys = self.valid(ky, self.small_h, self.big_h);
                for kx in 0..self.kernel {
                    let xs = self.valid(kx, self.small_w, self.big_w);
                    let x0 = xs.start * s + kx - self.pad;
                    let row = (c * self.kernel + ky) * self.kernel + kx;
                    let dst_row = &mut cols[row * cols_w..(row + 1) * cols_w];
                    for b in 0..n {
                        let plane =
                            &x[(b * self.channels + c) * big..(b * self.channels + c + 1) * big];
                        for oy in ys.clone() {
                            let iy = oy * s + ky - self.pad;
                            let src = &plane[iy * self.big_w + x0..];
                            let base = b * small + oy * self.small_w;
                            let dst = &mut dst_row[base + xs.start..base + xs.end];
                            if s == 1 {
                                dst.copy_from_slice(&src[..dst.len()]);
                            } else {
                                for (i, d) in dst.iter_mut().enumerate() {
                                    *d = src[i * s];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`Window::im2col`]: scatters columns back onto `[N, C, big]`.
    fn col2im(&self, cols: &[f32], n: usize) -> Vec<f32> {
        let small = self.small_h * self.small_w;
        let cols_w = n * small;
        let big = self.big_h * self.big_w;
        let s = self.stride;
        let mut x = vec![0.0; n * self.channels * big];
        for c in 0..self.channels {
            for ky in 0..self.kernel {
                let ys = self.valid(ky, self.small_h, self.big_h);
                for kx in 0..self.kernel {
                    let xs = self.valid(kx, self.small_w, self.big_w);
                    let x0 = xs.start * s + kx - self.pad;
                    let row = (c * self.kernel + ky) * self.kernel + kx;
                    let src_row = &cols[row * cols_w..(row + 1) * cols_w];
                    for b in 0..n {
                        let plane = &mut x
                            [(b * self.channels + c) * big..(b * self.channels + c + 1) * big];
                        for oy in ys.clone() {
                            let iy = oy * s + ky - self.pad;
                            let dst = &mut plane[iy * self.big_w + x0..];
                            let base = b * small + oy * self.small_w;
                            let src = &src_row[base + xs.start..base + xs.end];
                            if s == 1 {
                                for (d, v) in dst.iter_mut().zip(src) {
                                    *d += v;
                                }
                            } else {
                                for (i, v) in src.iter().enumerate() {
                                    dst[i * s] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

fn add_channel_bias(y: &mut [f32], bias: &[f32], hw: usize) {
    for (i, plane) in y.chunks_exact_mut(hw).enumerate() {
        let b = bias[i % bias.len()];
        for v in plane {
            *v += b;
        }
    }
}

fn accumulate_channel_sums(dy: &[f32], grad: &mut [f32], hw: usize) {
    let c = grad.len();
    for (i, plane) in dy.chunks_exact(hw).enumerate() {
        grad[i % c] += plane.iter().sum::<f32>();
    }
}

/// Square-kernel 2-D convolution; weight stored `[C_out, C_in·k·k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param,
    pub bias: Option<Param>,
}

pub struct Conv2dCache {
    cols: Vec<f32>,
    window: Window,
    n: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        std: f32,
        rng: &mut R,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            weight: Param::normal(
                vec![out_channels, in_channels * kernel * kernel],
                0.0,
                std,
                rng,
            ),
            bias: bias.then(|| Param::zeros(vec![out_channels])),
        }
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, Conv2dCache) {
        let &[n, c, h, w] = x.shape() else {
            panic!("conv2d expects NCHW input, got {:?}", x.shape())
        };
        assert_eq!(c, self.in_channels, "conv2d input channels");
        let window = Window {
            channels: c,
            big_h: h,
            big_w: w,
            small_h: conv_out(h, self.kernel, self.stride, self.pad),
            small_w: conv_out(w, self.kernel, self.stride, self.pad),
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        };
        let hw = window.small_h * window.small_w;
        let cols = window.im2col(x.data(), n);
        let mut y_cm = vec![0.0; self.out_channels * n * hw];
        gemm(
            self.out_channels,
            window.rows(),
            n * hw,
            &self.weight.value,
            false,
            &cols,
            false,
            0.0,
            &mut y_cm,
        );
        let mut y = cm_to_nchw(&y_cm, n, self.out_channels, hw);
        if let Some(b) = &self.bias {
            add_channel_bias(&mut y, &b.value, hw);
        }
        (
            Tensor::new(
                vec![n, self.out_channels, window.small_h, window.small_w],
                y,
            ),
            Conv2dCache { cols, window, n },
        )
    }

    /// Accumulates parameter gradients (when `param_grads`); returns `dx` when `input_grad`.
    pub fn backward(
        &mut self,
        cache: Conv2dCache,
        dy: &Tensor,
        param_grads: bool,
        input_grad: bool,
    ) -> Option<Tensor> {
        let Conv2dCache { cols, window, n } = cache;
        let hw = window.small_h * window.small_w;
        let dy_cm = nchw_to_cm(dy.data(), n, self.out_channels, hw);
        if param_grads {
            gemm(
                self.out_channels,
                n * hw,
                window.rows(),
                &dy_cm,
                false,
                &cols,
                true,
                1.0,
                &mut self.weight.grad,
            );
            if let Some(b) = &mut self.bias {
                accumulate_channel_sums(dy.data(), &mut b.grad, hw);
            }
        }
        if !input_grad {
            return None;
        }
        let mut dcols = vec![0.0; window.rows() * n * hw];
        gemm(
            window.rows(),
            self.out_channels,
            n * hw,
            &self.weight.value,
            true,
            &dy_cm,
            false,
            0.0,
            &mut dcols,
        );
        Some(Tensor::new(
            vec![n, self.in_channels, window.big_h, window.big_w],
            window.col2im(&dcols, n),
        ))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            v.push(b);
        }
        v
    }
}

/// Transposed convolution (the adjoint of [`Conv2d`] in its spatial action);
/// weight stored `[C_in, C_out·k·k]`. Output side is `(H − 1)·stride − 2·pad + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param,
    pub bias: Option<Param>,
}

pub struct ConvTranspose2dCache {
    x_cm: Vec<f32>,
    window: Window,
    n: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        std: f32,
        rng: &mut R,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            weight: Param::normal(
                vec![in_channels, out_channels * kernel * kernel],
                0.0,
                std,
                rng,
            ),
            bias: bias.then(|| Param::zeros(vec![out_channels])),
        }
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, ConvTranspose2dCache) {
        let &[n, c, h, w] = x.shape() else {
            panic!("conv_transpose2d expects NCHW input, got {:?}", x.shape())
        };
        assert_eq!(c, self.in_channels, "conv_transpose2d input channels");
        let window = Window {
            channels: self.out_channels,
            big_h: (h - 1) * self.stride + self.kernel - 2 * self.pad,
            big_w: (w - 1) * self.stride + self.kernel - 2 * self.pad,
            small_h: h,
            small_w: w,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        };
        let hw = h * w;
        let x_cm = nchw_to_cm(x.data(), n, c, hw);
        let mut cols = vec![0.0; window.rows() * n * hw];
        gemm(
            window.rows(),
            c,
            n * hw,
            &self.weight.value,
            true,
            &x_cm,
            false,
            0.0,
            &mut cols,
        );
        let mut y = window.col2im(&cols, n);
        if let Some(b) = &self.bias {
            add_channel_bias(&mut y, &b.value, window.big_h * window.big_w);
        }
        (
            Tensor::new(vec![n, self.out_channels, window.big_h, window.big_w], y),
            ConvTranspose2dCache { x_cm, window, n },
        )
    }

    pub fn backward(
        &mut self,
        cache: ConvTranspose2dCache,
        dy: &Tensor,
        param_grads: bool,
        input_grad: bool,
    ) -> Option<Tensor> {
        let ConvTranspose2dCache { x_cm, window, n } = cache;
        let hw = window.small_h * window.small_w;
        let dcols = window.im2col(dy.data(), n);
        if param_grads {
            gemm(
                self.in_channels,
                n * hw,
                window.rows(),
                &x_cm,
                false,
                &dcols,
                true,
                1.0,
                &mut self.weight.grad,
            );
            if let Some(b) = &mut self.bias {
                accumulate_channel_sums(dy.data(), &mut b.grad, window.big_h * window.big_w);
            }
        }
        if !input_grad {
            return None;
        }
        let mut dx_cm = vec![0.0; self.in_channels * n * hw];
        gemm(
            self.in_channels,
            window.rows(),
            n * hw,
            &self.weight.value,
            false,
            &dcols,
            false,
            0.0,
            &mut dx_cm,
        );
        Some(Tensor::new(
            vec![n, self.in_channels, window.small_h, window.small_w],
            cm_to_nchw(&dx_cm, n, self.in_channels, hw),
        ))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            v.push(b);
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::max_rel_err;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Direct 7-loop convolution.
    fn direct_conv(conv: &Conv2d, x: &Tensor) -> Vec<f32> {
        let &[n, c, h, w] = x.shape() else {
            unreachable!()
        };
        let (k, s, p) = (conv.kernel, conv.stride, conv.pad);
        let (ho, wo) = (conv_out(h, k, s, p), conv_out(w, k, s, p));
        let mut y = vec![0.0f32; n * conv.out_channels * ho * wo];
        for b in 0..n {
            for o in 0..conv.out_channels {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |b| b.value[o]);
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w
                                    {
                                        acc += conv.weight.value
                                            [o * c * k * k + (ci * k + ky) * k + kx]
                                            * x.data()[((b * c + ci) * h + iy as usize) * w
                                                + ix as usize];
                                    }
                                }
                            }
                        }
                        y[((b * conv.out_channels + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = Conv2d::new(3, 5, 4, 2, 1, true, 0.3, &mut rng);
        let x = rand_tensor(vec![2, 3, 8, 8], &mut rng);
        let (y, _) = conv.forward(&x);
        assert_eq!(y.shape(), &[2, 5, 4, 4]);
        for (a, b) in y.data().iter().zip(direct_conv(&conv, &x)) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    /// `<conv(x), y> = <x, convT(y)>` when the transposed layer shares the weights.
    #[test]
    fn transposed_conv_is_the_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let conv = Conv2d::new(3, 4, 4, 2, 1, false, 0.3, &mut rng);
        let mut tconv = ConvTranspose2d::new(4, 3, 4, 2, 1, false, 0.3, &mut rng);
        tconv.weight.value = conv.weight.value.clone();
        let x = rand_tensor(vec![2, 3, 14, 14], &mut rng);
        let y = rand_tensor(vec![2, 4, 7, 7], &mut rng);
        let (cx, _) = conv.forward(&x);
        let (ty, _) = tconv.forward(&y);
        assert_eq!(ty.shape(), &[2, 3, 14, 14]);
        let lhs: f64 = cx
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| (*a as f64) * (*b as f64))
            .sum();
        let rhs: f64 = x
            .data()
            .iter()
            .zip(ty.data())
            .map(|(a, b)| (*a as f64) * (*b as f64))
            .sum();
        assert!(
            (lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0),
            "{lhs} vs {rhs}"
        );
    }

    /// Loss `L = Σ r ⊙ layer(x)` with fixed random `r`, checked by central differences.
    fn check_grads<F, B>(x: &Tensor, n_params: usize, mut loss_at: F, mut analytic: B)
    where
        F: FnMut(&Tensor, Option<(usize, f32)>) -> f64,
        B: FnMut() -> (Vec<f32>, Vec<f32>),
    {
        let (dx, dw) = analytic();
        let h = 1e-2f32;
        let mut num_dx = Vec::new();
        let mut ana_dx = Vec::new();
        for i in (0..x.len()).step_by(7) {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            num_dx.push((loss_at(&xp, None) - loss_at(&xm, None)) / (2.0 * h as f64));
            ana_dx.push(dx[i] as f64);
        }
        assert!(
            max_rel_err(&num_dx, &ana_dx) < 1e-2,
            "input gradient mismatch"
        );
        let mut num_dw = Vec::new();
        let mut ana_dw = Vec::new();
        for j in (0..n_params).step_by(5) {
            num_dw.push((loss_at(x, Some((j, h))) - loss_at(x, Some((j, -h)))) / (2.0 * h as f64));
            ana_dw.push(dw[j] as f64);
        }
        assert!(
            max_rel_err(&num_dw, &ana_dw) < 1e-2,
            "weight gradient mismatch"
        );
    }

    fn weighted_sum(y: &Tensor, r: &Tensor) -> f64 {
        y.data()
            .iter()
            .zip(r.data())
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum()
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let conv = Conv2d::new(2, 3, 4, 2, 1, true, 0.3, &mut rng);
        let x = rand_tensor(vec![2, 2, 6, 6], &mut rng);
        let r = rand_tensor(vec![2, 3, 3, 3], &mut rng);
        let n_params = conv.weight.value.len();
        let loss_at = |x: &Tensor, dw: Option<(usize, f32)>| {
            let mut c = conv.clone();
            if let Some((j, h)) = dw {
                c.weight.value[j] += h;
            }
            weighted_sum(&c.forward(x).0, &r)
        };
        let analytic = || {
            let mut c = conv.clone();
            let (_, cache) = c.forward(&x);
            let dx = c.backward(cache, &r, true, true).unwrap();
            (dx.into_data(), c.weight.grad.clone())
        };
        check_grads(&x, n_params, loss_at, analytic);
    }

    #[test]
    fn transposed_conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let conv = ConvTranspose2d::new(3, 2, 4, 2, 1, true, 0.3, &mut rng);
        let x = rand_tensor(vec![2, 3, 3, 3], &mut rng);
        let r = rand_tensor(vec![2, 2, 6, 6], &mut rng);
        let n_params = conv.weight.value.len();
        let loss_at = |x: &Tensor, dw: Option<(usize, f32)>| {
            let mut c = conv.clone();
            if let Some((j, h)) = dw {
                c.weight.value[j] += h;
            }
            weighted_sum(&c.forward(x).0, &r)
        };
        let analytic = || {
            let mut c = conv.clone();
            let (_, cache) = c.forward(&x);
            let dx = c.backward(cache, &r, true, true).unwrap();
            (dx.into_data(), c.weight.grad.clone())
        };
        check_grads(&x, n_params, loss_at, analytic);
    }
}
