//! Transformer block with timestep modulation.
//!
//! Each block applies pre-norm attention and MLP halves whose shift, scale,
//! and residual gate come from a per-block linear head over the timestep
//! embedding. That head is zero-initialized, so a fresh block is the
//! identity map and training opens the residual branches gradually.
//!
//! When prompt conditioning runs in decoupled mode, the block reuses its
//! own query activations to attend over projected prompt tokens and fuses
//! the two attention results before the output projection:
//! `z = z_self + alpha * z_prompt`.

use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::attention::{adapter_attention, attention_core};
use super::linear::Linear;

/// Default init scale for projection weights.
pub const WEIGHT_STD: f64 = 0.02;

/// Prompt-attention inputs for one block, borrowed from the model.
pub struct AdapterCtx<'a, F: Scalar> {
    /// Prompt tokens, `[n_prompt, d]`, used raw (no modulation).
    pub c_v: &'a Tensor<F>,
    /// Extra key projection `[d, d]`.
    pub k_prime: &'a Tensor<F>,
    /// Extra value projection `[d, d]`.
    pub v_prime: &'a Tensor<F>,
    /// Fusion weight. Callers skip the whole path when it is zero, so the
    /// block never materializes a `+ 0 * z_prompt` term.
    pub alpha: f64,
}

pub struct Block<F: Scalar> {
    pub q: Linear<F>,
    pub k: Linear<F>,
    pub v: Linear<F>,
    pub o: Linear<F>,
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
    /// `d -> 6d` modulation head: shift1, scale1, gate1, shift2, scale2,
    /// gate2 in column order. Zero-initialized.
    pub adaln: Linear<F>,
    pub heads: usize,
}

impl<F: Scalar> Block<F> {
    pub fn new(rng: &mut Rng, d: usize, heads: usize) -> Self {
        assert!(d % heads == 0, "heads {heads} must divide width {d}");
        Block {
            q: Linear::gaussian(rng, d, d, WEIGHT_STD),
            k: Linear::gaussian(rng, d, d, WEIGHT_STD),
            v: Linear::gaussian(rng, d, d, WEIGHT_STD),
            o: Linear::gaussian(rng, d, d, WEIGHT_STD),
            fc1: Linear::gaussian(rng, d, 4 * d, WEIGHT_STD),
            fc2: Linear::gaussian(rng, 4 * d, d, WEIGHT_STD),
            adaln: Linear::zeros(d, 6 * d),
            heads,
        }
    }

    /// `x` is `[s, d]`, `t_emb` is `[1, d]` (already through the timestep
    /// MLP, not yet through GELU).
    pub fn forward(&self, x: &Tensor<F>, t_emb: &Tensor<F>, adapter: Option<AdapterCtx<'_, F>>) -> Tensor<F> {
        let d = self.q.d_in();
        let m = self.adaln.forward(&t_emb.gelu());
        let chunk = |j: usize| m.slice(1, j * d, d);

        let h = x
            .layer_norm()
            .mul_row(&chunk(1).add_scalar(F::one()))
            .add_row(&chunk(0));
        let q = self.q.forward(&h);
        let k = self.k.forward(&h);
        let v = self.v.forward(&h);
        let z = attention_core(&q, &k, &v, self.heads);
        let z = match adapter {
            Some(ctx) if ctx.alpha != 0.0 => {
                let z_prompt = adapter_attention(&q, ctx.c_v, ctx.k_prime, ctx.v_prime, self.heads);
                z.add(&z_prompt.scale(F::of(ctx.alpha)))
            }
            _ => z,
        };
        let x = x.add(&self.o.forward(&z).mul_row(&chunk(2)));

        let h2 = x
            .layer_norm()
            .mul_row(&chunk(4).add_scalar(F::one()))
            .add_row(&chunk(3));
        let mlp = self.fc2.forward(&self.fc1.forward(&h2).gelu());
        x.add(&mlp.mul_row(&chunk(5)))
    }
}
