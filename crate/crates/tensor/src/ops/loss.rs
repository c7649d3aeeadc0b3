use std::rc::Rc;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::ops::{InputGrads, Op};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before the log.
pub const PROB_CLAMP: f64 = 1e-7;

fn clamp_bounds<T: Element>() -> (T, T) {
    let lo = T::from_f64_lossy(PROB_CLAMP);
    (lo, T::one() - lo)
}

impl<T: Element> Tape<T> {
    /// Elementwise binary cross-entropy of probabilities `p` against soft
    /// targets in `[0, 1]`.
    pub fn bce(&self, p: &Var<T>, targets: &[T]) -> Result<Var<T>> {
        if targets.len() != p.value().numel() {
            return Err(TensorError::DimMismatch {
                op: "bce",
                dim: "targets",
                expected: p.value().numel(),
                actual: targets.len(),
            });
        }
        if let Some(bad) = targets.iter().find(|h| !(**h >= T::zero() && **h <= T::one())) {
            return Err(TensorError::Config(format!("target {bad:?} outside [0, 1]")));
        }
        let (lo, hi) = clamp_bounds::<T>();
        let data = p
            .data()
            .iter()
            .zip(targets)
            .map(|(&p, &h)| {
                let p = p.max(lo).min(hi);
                -(h * p.ln() + (T::one() - h) * (T::one() - p).ln())
            })
            .collect();
        let v = Tensor::from_parts(p.shape().to_vec(), data);
        Ok(self.record(v, vec![p.clone()], Op::Bce { targets: Rc::from(targets) }))
    }
}

pub(super) fn bce_backward<T: Element>(inputs: &[Var<T>], grad: &[T], targets: &[T]) -> InputGrads<T> {
    let (lo, hi) = clamp_bounds::<T>();
    let g = inputs[0]
        .data()
        .iter()
        .zip(targets)
        .zip(grad)
        .map(|((&p, &h), &g)| {
            if p < lo || p > hi {
                T::zero()
            } else {
                g * (-(h / p) + (T::one() - h) / (T::one() - p))
            }
        })
        .collect();
    vec![Some(g)]
}
