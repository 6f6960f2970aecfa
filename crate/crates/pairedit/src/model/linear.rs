//! Dense layers with optional low-rank adaptation.

use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Low-rank residual on a frozen weight: `y += scale * (x @ down) @ up`.
/// `down` starts Gaussian with variance 1/rank and `up` starts at zero, so
/// a freshly attached adapter leaves the layer's function unchanged.
#[derive(Clone)]
pub struct Lora<F: Scalar> {
    pub down: Tensor<F>, // [in, rank]
    pub up: Tensor<F>,   // [rank, out]
    pub scale: f64,
}

impl<F: Scalar> Lora<F> {
    pub fn new(rng: &mut Rng, d_in: usize, d_out: usize, rank: usize, scale: f64) -> Self {
        assert!(rank > 0, "lora rank must be positive");
        let std = (1.0 / rank as f64).sqrt();
        let down: Vec<F> = (0..d_in * rank).map(|_| F::of(rng.normal() * std)).collect();
        Lora {
            down: Tensor::param(down, &[d_in, rank]),
            up: Tensor::param(vec![F::zero(); rank * d_out], &[rank, d_out]),
            scale,
        }
    }

    pub fn rank(&self) -> usize {
        self.down.shape()[1]
    }
}

/// `y = x @ weight + bias`, weight stored `[in, out]`.
#[derive(Clone)]
pub struct Linear<F: Scalar> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
    pub lora: Option<Lora<F>>,
}

impl<F: Scalar> Linear<F> {
    pub fn gaussian(rng: &mut Rng, d_in: usize, d_out: usize, std: f64) -> Self {
        let weight: Vec<F> = (0..d_in * d_out).map(|_| F::of(rng.normal() * std)).collect();
        Linear {
            weight: Tensor::param(weight, &[d_in, d_out]),
            bias: Tensor::param(vec![F::zero(); d_out], &[d_out]),
            lora: None,
        }
    }

    /// Weight and bias both zero; used where the architecture needs an
    /// exact no-op at initialization (modulation producers, final head).
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: Tensor::param(vec![F::zero(); d_in * d_out], &[d_in, d_out]),
            bias: Tensor::param(vec![F::zero(); d_out], &[d_out]),
            lora: None,
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        let base = x.matmul(&self.weight).add_row(&self.bias);
        match &self.lora {
            None => base,
            Some(l) => {
                let delta = x.matmul(&l.down).matmul(&l.up).scale(F::of(l.scale));
                base.add(&delta)
            }
        }
    }

    /// Fold the low-rank residual into the base weight and drop it:
    /// `W <- W + scale * down @ up`. The layer's function is preserved.
    pub fn merge_lora(&mut self) {
        let Some(l) = self.lora.take() else { return };
        let (d_in, rank, d_out) = (self.d_in(), l.rank(), self.d_out());
        let mut delta = vec![F::zero(); d_in * d_out];
        crate::kernels::matmul_nn(&l.down.data(), &l.up.data(), &mut delta, d_in, rank, d_out);
        let s = F::of(l.scale);
        let mut w = self.weight.data_mut();
        for i in 0..w.len() {
            w[i] = w[i] + s * delta[i];
        }
    }
}
