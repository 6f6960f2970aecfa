//! Multi-head attention cores.
//!
//! [`attention_core`] is the single scaled-dot-product implementation every
//! attention path in the crate goes through: backbone self-attention,
//! decoupled prompt attention (which reuses the backbone's query
//! activations and projects prompt tokens with its own key/value weights),
//! and the concatenation baseline (joint self-attention over the sequence
//! with prompt tokens appended). Scale is 1/sqrt(d_head) everywhere.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::block::Block;

/// softmax(q kᵀ / sqrt(d_head)) v per head, heads concatenated. `q` may
/// have a different row count than `k`/`v` (cross-attention); all must
/// share the model width, which `heads` must divide.
pub fn attention_core<F: Scalar>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    heads: usize,
) -> Tensor<F> {
    let d = q.cols();
    assert_eq!(k.cols(), d, "key width");
    assert_eq!(v.cols(), d, "value width");
    assert_eq!(k.rows(), v.rows(), "key/value rows");
    assert!(heads > 0 && d % heads == 0, "heads {heads} must divide width {d}");
    let dh = d / heads;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice(1, h * dh, dh);
        let kh = k.slice(1, h * dh, dh);
        let vh = v.slice(1, h * dh, dh);
        let scores = qh.matmul(&kh.transpose()).scale(scale);
        outs.push(scores.softmax().matmul(&vh));
    }
    Tensor::concat(&outs, 1)
}

/// Decoupled prompt-token attention: project the prompt tokens with this
/// block's extra key/value weights and attend from the given (reused)
/// query activations. Returns the pre-output-projection result, shaped
/// like the backbone attention output.
pub fn adapter_attention<F: Scalar>(
    q: &Tensor<F>,
    c_v: &Tensor<F>,
    k_prime: &Tensor<F>,
    v_prime: &Tensor<F>,
    heads: usize,
) -> Tensor<F> {
    attention_core(q, &c_v.matmul(k_prime), &c_v.matmul(v_prime), heads)
}

/// Joint self-attention over `[c_b; c_v]` using the block's own
/// projections; the concatenation-baseline reading of prompt conditioning.
/// With no prompt tokens this is exactly the block's ordinary
/// self-attention.
pub fn redux_concat_attention<F: Scalar>(
    c_b: &Tensor<F>,
    c_v: Option<&Tensor<F>>,
    block: &Block<F>,
) -> Tensor<F> {
    let joint = match c_v {
        Some(cv) => Tensor::concat(&[c_b.clone(), cv.clone()], 0),
        None => c_b.clone(),
    };
    let q = block.q.forward(&joint);
    let k = block.k.forward(&joint);
    let v = block.v.forward(&joint);
    attention_core(&q, &k, &v, block.heads)
}
