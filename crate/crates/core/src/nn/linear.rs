use rand::Rng;

use super::{gemm, Param, Tensor};

/// `y = x·W + b` with `W` stored `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param,
    pub bias: Option<Param>,
}

pub struct LinearCache {
    input: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        in_features: usize,
        out_features: usize,
        bias: bool,
        std: f32,
        rng: &mut R,
    ) -> Self {
        Self {
            in_features,
            out_features,
            weight: Param::normal(vec![in_features, out_features], 0.0, std, rng),
            bias: bias.then(|| Param::zeros(vec![out_features])),
        }
    }

    /// `x` is `[N, in]` (any trailing shape is flattened).
    pub fn forward(&self, x: Tensor) -> (Tensor, LinearCache) {
        let n = x.batch();
        assert_eq!(x.len(), n * self.in_features, "linear input width");
        let mut y = vec![0.0; n * self.out_features];
        gemm(
            n,
            self.in_features,
            self.out_features,
            x.data(),
            false,
            &self.weight.value,
            false,
            0.0,
            &mut y,
        );
        if let Some(b) = &self.bias {
            for row in y.chunks_exact_mut(self.out_features) {
                for (v, bv) in row.iter_mut().zip(&b.value) {
                    *v += bv;
                }
            }
        }
        (
            Tensor::new(vec![n, self.out_features], y),
            LinearCache { input: x },
        )
    }

    /// Accumulates parameter gradients (when `param_grads`); returns `dx` when `input_grad`.
    pub fn backward(
        &mut self,
        cache: LinearCache,
        dy: &Tensor,
        param_grads: bool,
        input_grad: bool,
    ) -> Option<Tensor> {
        let n = dy.batch();
        if param_grads {
            gemm(
                self.in_features,
                n,
                self.out_features,
                cache.input.data(),
                true,
                dy.data(),
                false,
                1.0,
                &mut self.weight.grad,
            );
            if let Some(b) = &mut self.bias {
                for row in dy.data().chunks_exact(self.out_features) {
                    for (g, d) in b.grad.iter_mut().zip(row) {
                        *g += d;
                    }
                }
            }
        }
        if !input_grad {
            return None;
        }
        let mut dx = vec![0.0; n * self.in_features];
        gemm(
            n,
            self.out_features,
            self.in_features,
            dy.data(),
            false,
            &self.weight.value,
            true,
            0.0,
            &mut dx,
        );
        Some(Tensor::new(cache.input.shape().to_vec(), dx))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            v.push(b);
        }
        v
    }
}
