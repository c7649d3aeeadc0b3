use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::ops::{InputGrads, Op};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn mean_of<T: Element>(values: &[T]) -> T {
    // accumulate in f64 so f32 means over large maps stay accurate
    let total: f64 = values.iter().map(|v| v.as_f64()).sum();
    T::from_f64_lossy(total / values.len() as f64)
}

impl<T: Element> Tape<T> {
    /// Sum of all elements, as a rank-0 var.
    pub fn sum(&self, x: &Var<T>) -> Var<T> {
        let total: f64 = x.data().iter().map(|v| v.as_f64()).sum();
        self.record(Tensor::scalar(T::from_f64_lossy(total)), vec![x.clone()], Op::Sum)
    }

    /// Mean of all elements, as a rank-0 var.
    pub fn mean(&self, x: &Var<T>) -> Result<Var<T>> {
        if x.value().numel() == 0 {
            return Err(TensorError::Config("mean of an empty tensor".into()));
        }
        Ok(self.record(Tensor::scalar(mean_of(x.data())), vec![x.clone()], Op::Mean))
    }

    /// Mean over every axis but the first: `[B, ...] -> [B]`.
    pub fn mean_per_sample(&self, x: &Var<T>) -> Result<Var<T>> {
        let shape = x.shape();
        if shape.is_empty() || x.value().numel() == 0 {
            return Err(TensorError::Rank { op: "mean_per_sample", expected: 1, shape: shape.to_vec() });
        }
        let batch = shape[0];
        let per = x.value().numel() / batch;
        let data = x.data().chunks_exact(per).map(mean_of).collect();
        Ok(self.record(Tensor::from_parts(vec![batch], data), vec![x.clone()], Op::MeanPerSample))
    }
}

pub(super) fn sum_backward<T: Element>(inputs: &[Var<T>], grad: &[T]) -> InputGrads<T> {
    vec![Some(vec![grad[0]; inputs[0].value().numel()])]
}

pub(super) fn mean_backward<T: Element>(inputs: &[Var<T>], grad: &[T]) -> InputGrads<T> {
    let n = inputs[0].value().numel();
    let g = grad[0] / T::from_usize(n).unwrap();
    vec![Some(vec![g; n])]
}

pub(super) fn mean_per_sample_backward<T: Element>(inputs: &[Var<T>], grad: &[T]) -> InputGrads<T> {
    let n = inputs[0].value().numel();
    let per = n / grad.len();
    let scale = T::one() / T::from_usize(per).unwrap();
    let mut out = Vec::with_capacity(n);
    for &g in grad {
        out.extend(std::iter::repeat_n(g * scale, per));
    }
    vec![Some(out)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_is_ones() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_fn([2, 3], |i| i as f32).with_requires_grad(true));
        let loss = tape.sum(&x);
        assert_eq!(loss.item(), 15.0);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[1.0; 6]);
        assert!(tape.is_empty(), "tape cleared after backward");
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros([2]).with_requires_grad(true));
        assert!(matches!(tape.backward(&x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn mean_per_sample_splits_batch() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new([2, 2], vec![1.0, 3.0, 10.0, 20.0]).unwrap());
        let m = tape.mean_per_sample(&x).unwrap();
        assert_eq!(m.data(), &[2.0, 15.0]);
    }
}
