//! AdamW with decoupled weight decay and bias correction.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments<T> {
    first: Vec<T>,
    second: Vec<T>,
}

/// Per-parameter moment estimates, matched to parameters by position.
#[derive(Debug, Clone)]
pub struct AdamW<T: Element = f32> {
    pub config: AdamWConfig,
    step: u64,
    moments: Vec<Moments<T>>,
}

impl<T: Element> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every parameter from its stored gradient, then clears the
    /// gradients. Nothing is modified if any parameter lacks a gradient.
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor<T>)>,
    {
        let mut params: Vec<_> = params.into_iter().collect();
        if let Some((name, _)) = params.iter().find(|(_, p)| p.grad().is_none()) {
            return Err(TensorError::MissingGrad(name.to_string()));
        }
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|(_, p)| Moments {
                    first: vec![T::zero(); p.numel()],
                    second: vec![T::zero(); p.numel()],
                })
                .collect();
        }
        if self.moments.len() != params.len()
            || self.moments.iter().zip(&params).any(|(m, (_, p))| m.first.len() != p.numel())
        {
            return Err(TensorError::Config("optimizer state does not match parameters".into()));
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let lr = T::from_f64_lossy(c.lr);
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let eps = T::from_f64_lossy(c.eps);
        let decay = T::from_f64_lossy(1.0 - c.lr * c.weight_decay);
        let bc1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
        let bc2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));

        for ((_, param), m) in params.iter_mut().zip(&mut self.moments) {
            let grad = param.take_grad().expect("checked above");
            for (i, (w, &g)) in param.data_mut().iter_mut().zip(&grad).enumerate() {
                let m1 = b1 * m.first[i] + (T::one() - b1) * g;
                let m2 = b2 * m.second[i] + (T::one() - b2) * g * g;
                m.first[i] = m1;
                m.second[i] = m2;
                let update = (m1 / bc1) / ((m2 / bc2).sqrt() + eps);
                *w = *w * decay - lr * update;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: &[f64], grad: &[f64]) -> Tensor<f64> {
        let mut p = Tensor::new([values.len()], values.to_vec()).unwrap().with_requires_grad(true);
        p.accumulate_grad(grad).unwrap();
        p
    }

    #[test]
    fn zero_grad_without_decay_is_a_no_op() {
        let mut p = param(&[0.3, -1.2], &[0.0, 0.0]);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step([("p", &mut p)]).unwrap();
        assert_eq!(p.data(), &[0.3, -1.2]);
        assert!(p.grad().is_none(), "grads cleared after the step");
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = param(&[1.0, 1.0, 1.0], &[3.0, -0.002, 1e3]);
        let cfg = AdamWConfig { lr: 0.01, eps: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg);
        opt.step([("p", &mut p)]).unwrap();
        let expected = [0.99, 1.01, 0.99];
        for (a, b) in p.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn decay_scales_parameter() {
        let mut p = param(&[2.0, -4.0], &[0.0, 0.0]);
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        let mut opt = AdamW::new(cfg);
        opt.step([("p", &mut p)]).unwrap();
        assert_eq!(p.data(), &[2.0 * 0.95, -4.0 * 0.95]);
    }

    #[test]
    fn missing_grad_is_an_error_and_nothing_moves() {
        let mut a = param(&[1.0], &[1.0]);
        let mut b = Tensor::new([1], vec![5.0]).unwrap().with_requires_grad(true);
        let mut opt = AdamW::new(AdamWConfig::default());
        let err = opt.step([("a", &mut a), ("b", &mut b)]).unwrap_err();
        assert_eq!(err, TensorError::MissingGrad("b".into()));
        assert_eq!(a.data(), &[1.0]);
        assert_eq!(opt.steps_taken(), 0);
    }
}
