use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::ops::{InputGrads, Op};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const GELU_K: f64 = 0.044_715;

fn same_shape<T: Element>(op: &'static str, a: &Var<T>, b: &Var<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn unary<T: Element>(x: &Var<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

fn binary<T: Element>(a: &Var<T>, b: &Var<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn sqrt_2_over_pi<T: Element>() -> T {
    T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt())
}

pub(crate) fn gelu<T: Element>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let k = T::from_f64_lossy(GELU_K);
    half * x * (T::one() + (sqrt_2_over_pi::<T>() * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Element>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let k = T::from_f64_lossy(GELU_K);
    let c = sqrt_2_over_pi::<T>();
    let t = (c * (x + k * x * x * x)).tanh();
    let three = T::from_f64_lossy(3.0);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}

pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Element> Tape<T> {
    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("add", a, b)?;
        let v = binary(a, b, |x, y| x + y);
        Ok(self.record(v, vec![a.clone(), b.clone()], Op::Add))
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("sub", a, b)?;
        let v = binary(a, b, |x, y| x - y);
        Ok(self.record(v, vec![a.clone(), b.clone()], Op::Sub))
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("mul", a, b)?;
        let v = binary(a, b, |x, y| x * y);
        Ok(self.record(v, vec![a.clone(), b.clone()], Op::Mul))
    }

    pub fn scale(&self, x: &Var<T>, factor: T) -> Var<T> {
        self.record(unary(x, |v| v * factor), vec![x.clone()], Op::Scale(factor))
    }

    pub fn abs(&self, x: &Var<T>) -> Var<T> {
        self.record(unary(x, T::abs), vec![x.clone()], Op::Abs)
    }

    pub fn leaky_relu(&self, x: &Var<T>, slope: T) -> Var<T> {
        let v = unary(x, |v| if v > T::zero() { v } else { v * slope });
        self.record(v, vec![x.clone()], Op::LeakyRelu(slope))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self, x: &Var<T>) -> Var<T> {
        self.record(unary(x, gelu), vec![x.clone()], Op::Gelu)
    }

    pub fn sigmoid(&self, x: &Var<T>) -> Var<T> {
        self.record(unary(x, sigmoid), vec![x.clone()], Op::Sigmoid)
    }
}

fn grad_if<T: Element>(x: &Var<T>, f: impl FnOnce() -> Vec<T>) -> Option<Vec<T>> {
    x.requires_grad().then(f)
}

pub(super) fn add_backward<T: Element>(inputs: &[Var<T>], grad: &[T]) -> InputGrads<T> {
    vec![
        grad_if(&inputs[0], || grad.to_vec()),
        grad_if(&inputs[1], || grad.to_vec()),
    ]
}

pub(super) fn sub_backward<T: Element>(inputs: &[Var<T>], grad: &[T]) -> InputGrads<T> {
    vec![
        grad_if(&inputs[0], || grad.to_vec()),
        grad_if(&inputs[1], || grad.iter().map(|&g| -g).collect()),
    ]
}

pub(super) fn mul_backward<T: Element>(inputs: &[Var<T>], grad: &[T]) -> InputGrads<T> {
    let (a, b) = (&inputs[0], &inputs[1]);
    vec![
        grad_if(a, || grad.iter().zip(b.data()).map(|(&g, &y)| g * y).collect()),
        grad_if(b, || grad.iter().zip(a.data()).map(|(&g, &x)| g * x).collect()),
    ]
}

pub(super) fn abs_backward<T: Element>(inputs: &[Var<T>], grad: &[T]) -> InputGrads<T> {
    let x = inputs[0].data();
    vec![Some(
        grad.iter()
            .zip(x)
            .map(|(&g, &v)| if v > T::zero() { g } else if v < T::zero() { -g } else { T::zero() })
            .collect(),
    )]
}

pub(super) fn leaky_relu_backward<T: Element>(inputs: &[Var<T>], grad: &[T], slope: T) -> InputGrads<T> {
    let x = inputs[0].data();
    vec![Some(
        grad.iter()
            .zip(x)
            .map(|(&g, &v)| if v > T::zero() { g } else { g * slope })
            .collect(),
    )]
}

pub(super) fn gelu_backward<T: Element>(inputs: &[Var<T>], grad: &[T]) -> InputGrads<T> {
    let x = inputs[0].data();
    vec![Some(grad.iter().zip(x).map(|(&g, &v)| g * gelu_grad(v)).collect())]
}

pub(super) fn sigmoid_backward<T: Element>(out: &Tensor<T>, grad: &[T]) -> InputGrads<T> {
    vec![Some(
        grad.iter()
            .zip(out.data())
            .map(|(&g, &s)| g * s * (T::one() - s))
            .collect(),
    )]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_derivative_at_zero_is_quarter() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(0.0).with_requires_grad(true));
        let y = tape.sigmoid(&x);
        assert_eq!(y.item(), 0.5);
        let grads = tape.backward(&y).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[0.25]);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(-1000.0f32), 0.0);
        assert_eq!(sigmoid(1000.0f32), 1.0);
        assert!((sigmoid(1.0f64) - 0.731_058_578_630_004_9).abs() < 1e-15);
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(1.0f64) - 0.841_192).abs() < 1e-5);
        assert!(gelu(-10.0f64).abs() < 1e-10);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([2]));
        let b = tape.constant(Tensor::zeros([3]));
        assert!(matches!(tape.add(&a, &b), Err(TensorError::ShapeMismatch { op: "add", .. })));
    }
}
