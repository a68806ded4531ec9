//! Adam with decoupled weight decay, over indexed parameter tensors.

use alloc::vec::Vec;

use crate::tensor::{Scalar, Tensor};

/// AdamW over a fixed-size set of parameter tensors addressed by index.
///
/// `theta <- (1 - lr * wd) * theta - lr_t * m_hat / (sqrt(v_hat) + eps)`.
/// Weight decay defaults to zero, which leaves plain Adam; the mask-decay
/// update is applied separately by the training loop, before this step.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl AdamW {
    pub fn new(lr: f64, slots: usize) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            t: 0,
            m: (0..slots).map(|_| None).collect(),
            v: (0..slots).map(|_| None).collect(),
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    /// Advance the shared timestep once per iteration, before `update` calls.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn timestep(&self) -> u64 {
        self.t
    }

    /// Apply one update to parameter tensor `slot` given its gradient.
    pub fn update<T: Scalar>(&mut self, slot: usize, param: &mut Tensor<T>, grad: &Tensor<T>) {
        debug_assert_eq!(param.len(), grad.len());
        let n = param.len();
        let m = self.m[slot].get_or_insert_with(|| alloc::vec![0.0; n]);
        let v = self.v[slot].get_or_insert_with(|| alloc::vec![0.0; n]);
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        let decay = 1.0 - self.lr * self.weight_decay;
        for i in 0..n {
            let g = grad.data()[i].to_f64();
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            let p = param.data()[i].to_f64() * decay - self.lr * m_hat / (libm::sqrt(v_hat) + self.epsilon);
            param.data_mut()[i] = T::from_f64(p);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn converges_on_a_quadratic() {
        // minimize 0.5 * ||x||^2; gradient is x
        let mut theta: Tensor<f64> =
            Tensor::from_vec(Shape::new(1, 3, 1, 1), alloc::vec![5.0, -3.0, 2.0]).unwrap();
        let mut opt = AdamW::new(0.1, 1);
        for _ in 0..300 {
            opt.begin_step();
            let grad = theta.clone();
            opt.update(0, &mut theta, &grad);
        }
        for &v in theta.data() {
            assert!(v.abs() < 1e-2, "did not converge: {v}");
        }
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let mut theta: Tensor<f64> =
            Tensor::from_vec(Shape::new(1, 1, 1, 1), alloc::vec![1.0]).unwrap();
        let grad = Tensor::zeros(Shape::new(1, 1, 1, 1));
        let mut opt = AdamW::new(0.1, 1).with_weight_decay(0.1);
        opt.begin_step();
        opt.update(0, &mut theta, &grad);
        assert!((theta.data()[0] - 0.99).abs() < 1e-12);
    }

    #[test]
    fn updates_are_deterministic() {
        let run = || {
            let mut theta: Tensor<f32> =
                Tensor::from_vec(Shape::new(1, 2, 1, 1), alloc::vec![1.0, -2.0]).unwrap();
            let mut opt = AdamW::new(0.01, 1);
            for i in 0..50 {
                opt.begin_step();
                let grad = theta.map(|x| x * 0.5 + i as f32 * 0.001);
                opt.update(0, &mut theta, &grad);
            }
            theta.data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
