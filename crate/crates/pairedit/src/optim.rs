//! AdamW with bias correction and decoupled weight decay.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub struct AdamW<F: Scalar> {
    params: Vec<(String, Tensor<F>)>,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<F: Scalar> AdamW<F> {
    /// `params` is the trainable subset; anything not listed is frozen by
    /// construction (its gradients may accumulate but are never applied).
    pub fn new(params: Vec<(String, Tensor<F>)>, lr: f64) -> Self {
        let m = params.iter().map(|(_, p)| vec![F::zero(); p.len()]).collect();
        let v = params.iter().map(|(_, p)| vec![F::zero(); p.len()]).collect();
        AdamW {
            params,
            m,
            v,
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn param_names(&self) -> Vec<&str> {
        self.params.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update. Parameters whose gradient buffer is unset this step are
    /// skipped entirely (no moment decay, no weight decay), mirroring the
    /// usual convention for sparsely used parameters.
    pub fn step(&mut self) {
        self.t += 1;
        let b1 = F::of(self.beta1);
        let b2 = F::of(self.beta2);
        let one = F::one();
        let lr = F::of(self.lr);
        let eps = F::of(self.eps);
        let wd = F::of(self.weight_decay);
        let bc1 = F::of(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = F::of(1.0 - self.beta2.powi(self.t as i32));
        for (i, (_, p)) in self.params.iter().enumerate() {
            let grad = match p.grad() {
                Some(g) => g,
                None => continue,
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let mut data = p.data_mut();
            for j in 0..data.len() {
                let g = grad[j];
                m[j] = b1 * m[j] + (one - b1) * g;
                v[j] = b2 * v[j] + (one - b2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] = data[j] - lr * (m_hat / (v_hat.sqrt() + eps) + wd * data[j]);
            }
        }
    }

    pub fn zero_grad(&self) {
        for (_, p) in &self.params {
            p.zero_grad();
        }
    }

    /// Moment buffers for checkpointing, keyed by parameter name.
    pub fn moments(&self) -> impl Iterator<Item = (&str, &[F], &[F])> {
        self.params
            .iter()
            .zip(self.m.iter().zip(&self.v))
            .map(|((n, _), (m, v))| (n.as_str(), m.as_slice(), v.as_slice()))
    }

    pub fn restore(&mut self, name: &str, m: &[F], v: &[F]) -> bool {
        for (i, (n, p)) in self.params.iter().enumerate() {
            if n == name {
                assert_eq!(m.len(), p.len(), "moment length for {name}");
                assert_eq!(v.len(), p.len(), "moment length for {name}");
                self.m[i].copy_from_slice(m);
                self.v[i].copy_from_slice(v);
                return true;
            }
        }
        false
    }

    pub fn set_step_count(&mut self, t: u64) {
        self.t = t;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_roughly_lr_against_gradient_sign() {
        // After one step from zero moments: m_hat = g, v_hat = g^2, so the
        // update is -lr * g / (|g| + eps) = -lr * sign(g) * |g|/(|g|+eps).
        let p = Tensor::param(vec![1.0f64, -2.0, 0.5], &[3]);
        let target = Tensor::new(vec![0.0f64, 0.0, 0.0], &[3]);
        let mut opt = AdamW::new(vec![("p".into(), p.clone())], 1e-3);
        p.mse(&target).backward();
        let grad = p.grad().unwrap();
        let before = p.to_vec();
        opt.step();
        let after = p.to_vec();
        for i in 0..3 {
            let delta = after[i] - before[i];
            let want = -1e-3 * grad[i] / (grad[i].abs() + 1e-8);
            assert!((delta - want).abs() < 1e-12, "delta {delta} want {want}");
            assert!((delta.abs() - 1e-3).abs() < 1e-6);
            assert!(delta.signum() == -grad[i].signum());
        }
    }

    #[test]
    fn weight_decay_is_decoupled() {
        // With zero gradient the grad buffer is unset and nothing moves;
        // with a tiny gradient the decay term acts independently of it.
        let p = Tensor::param(vec![10.0f64], &[1]);
        let mut opt = AdamW::new(vec![("p".into(), p.clone())], 1e-2);
        opt.weight_decay = 0.1;
        opt.step();
        assert_eq!(p.to_vec(), vec![10.0]);

        let loss = p.scale(1e-9).mse(&Tensor::zeros(&[1]));
        loss.backward();
        opt.step();
        let v = p.to_vec()[0];
        // decay contribution: -lr * wd * p = -0.01 * 0.1 * 10 = -0.01
        assert!(v < 10.0 - 0.009, "{v}");
    }

    #[test]
    fn params_without_grads_are_skipped() {
        let a = Tensor::param(vec![1.0f64], &[1]);
        let b = Tensor::param(vec![1.0f64], &[1]);
        let mut opt = AdamW::new(
            vec![("a".into(), a.clone()), ("b".into(), b.clone())],
            1e-2,
        );
        a.mse(&Tensor::zeros(&[1])).backward();
        opt.step();
        assert_ne!(a.to_vec(), vec![1.0]);
        assert_eq!(b.to_vec(), vec![1.0]);
    }

    #[test]
    fn moments_roundtrip_through_restore() {
        let p = Tensor::param(vec![1.0f64, 2.0], &[2]);
        let mut opt = AdamW::new(vec![("p".into(), p.clone())], 1e-3);
        p.mse(&Tensor::zeros(&[2])).backward();
        opt.step();
        let (m, v): (Vec<f64>, Vec<f64>) = {
            let (_, m, v) = opt.moments().next().unwrap();
            (m.to_vec(), v.to_vec())
        };
        let mut opt2 = AdamW::new(vec![("p".into(), p.clone())], 1e-3);
        assert!(opt2.restore("p", &m, &v));
        assert!(!opt2.restore("missing", &m, &v));
        let (_, m2, v2) = opt2.moments().next().unwrap();
        assert_eq!(m, m2);
        assert_eq!(v, v2);
    }
}
