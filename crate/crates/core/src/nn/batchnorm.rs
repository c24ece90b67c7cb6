use super::{Mode, Param, Tensor};

/// Per-channel batch normalization over `[N, C, ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
    pub eps: f32,
}

pub struct BatchNormCache {
    x_hat: Vec<f32>,
    inv_std: Vec<f32>,
    batch_stats: bool,
    shape: Vec<usize>,
}

impl BatchNorm {
    pub fn new(channels: usize, gamma: Param) -> Self {
        Self {
            channels,
            gamma,
            beta: Param::zeros(vec![channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    fn spatial(&self, x: &Tensor) -> usize {
        assert_eq!(x.shape()[1], self.channels, "batch norm channels");
        x.shape()[2..].iter().product()
    }

    /// In [`Mode::Train`] normalizes with batch statistics and updates the running
    /// estimates (unbiased variance); in [`Mode::Eval`] uses the running estimates.
    pub fn forward(&mut self, x: Tensor, mode: Mode) -> (Tensor, BatchNormCache) {
        match mode {
            Mode::Eval => self.forward_eval(x),
            Mode::Train => {
                let hw = self.spatial(&x);
                let n = x.batch();
                let c = self.channels;
                let m = n * hw;
                let mut mean = vec![0.0; c];
                let mut inv_std = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0f64;
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        s += x.data()[base..base + hw]
                            .iter()
                            .map(|&v| v as f64)
                            .sum::<f64>();
                    }
                    let mu = s / m as f64;
                    let mut ss = 0.0f64;
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        ss += x.data()[base..base + hw]
                            .iter()
                            .map(|&v| (v as f64 - mu).powi(2))
                            .sum::<f64>();
                    }
                    let var = ss / m as f64;
                    mean[ch] = mu as f32;
                    inv_std[ch] = (1.0 / (var + self.eps as f64).sqrt()) as f32;
                    let unbiased = if m > 1 { ss / (m - 1) as f64 } else { var };
                    self.running_mean[ch] =
                        (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mu as f32;
                    self.running_var[ch] = (1.0 - self.momentum) * self.running_var[ch]
                        + self.momentum * unbiased as f32;
                }
                self.normalize(x, &mean, inv_std, true)
            }
        }
    }

    /// Normalizes with the running estimates; no state is modified.
    pub fn forward_eval(&self, x: Tensor) -> (Tensor, BatchNormCache) {
        self.spatial(&x);
        let inv_std = self
            .running_var
            .iter()
            .map(|&v| 1.0 / (v + self.eps).sqrt())
            .collect();
        self.normalize(x, &self.running_mean, inv_std, false)
    }

    fn normalize(
        &self,
        x: Tensor,
        mean: &[f32],
        inv_std: Vec<f32>,
        batch_stats: bool,
    ) -> (Tensor, BatchNormCache) {
        let hw = self.spatial(&x);
        let c = self.channels;
        let shape = x.shape().to_vec();
        let mut x_hat = x.into_data();
        let mut y = vec![0.0; x_hat.len()];
        for (i, (plane, out)) in x_hat
            .chunks_exact_mut(hw)
            .zip(y.chunks_exact_mut(hw))
            .enumerate()
        {
            let ch = i % c;
            let (mu, is, g, bt) = (
                mean[ch],
                inv_std[ch],
                self.gamma.value[ch],
                self.beta.value[ch],
            );
            for (v, o) in plane.iter_mut().zip(out) {
                *v = (*v - mu) * is;
                *o = g * *v + bt;
            }
        }
        (
            Tensor::new(shape.clone(), y),
            BatchNormCache {
                x_hat,
                inv_std,
                batch_stats,
                shape,
            },
        )
    }

    pub fn backward(&mut self, cache: BatchNormCache, dy: &Tensor, param_grads: bool) -> Tensor {
        let c = self.channels;
        let hw: usize = cache.shape[2..].iter().product();
        let n = cache.shape[0];
        let m = (n * hw) as f64;
        let mut sum_dy = vec![0.0f64; c];
        let mut sum_dy_xhat = vec![0.0f64; c];
        for (i, (g, xh)) in dy
            .data()
            .chunks_exact(hw)
            .zip(cache.x_hat.chunks_exact(hw))
            .enumerate()
        {
            let ch = i % c;
            for (&d, &x) in g.iter().zip(xh) {
                sum_dy[ch] += d as f64;
                sum_dy_xhat[ch] += d as f64 * x as f64;
            }
        }
        if param_grads {
            for ch in 0..c {
                self.gamma.grad[ch] += sum_dy_xhat[ch] as f32;
                self.beta.grad[ch] += sum_dy[ch] as f32;
            }
        }
        let mut dx = vec![0.0; dy.len()];
        for (i, ((out, g), xh)) in dx
            .chunks_exact_mut(hw)
            .zip(dy.data().chunks_exact(hw))
            .zip(cache.x_hat.chunks_exact(hw))
            .enumerate()
        {
            let ch = i % c;
            let scale = self.gamma.value[ch] * cache.inv_std[ch];
            if cache.batch_stats {
                let mean_dy = (sum_dy[ch] / m) as f32;
                let mean_dy_xhat = (sum_dy_xhat[ch] / m) as f32;
                for ((o, &d), &x) in out.iter_mut().zip(g).zip(xh) {
                    *o = scale * (d - mean_dy - x * mean_dy_xhat);
                }
            } else {
                for (o, &d) in out.iter_mut().zip(g) {
                    *o = scale * d;
                }
            }
        }
        Tensor::new(cache.shape, dx)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

#[cfg(test)]
impl Param {
    fn new_for_test(v: Vec<f32>) -> Self {
        let mut p = Param::zeros(vec![v.len()]);
        p.value = v;
        p
    }
}
