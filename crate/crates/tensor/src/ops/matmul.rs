use std::rc::Rc;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::ops::{InputGrads, Op};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which key tokens each query token of a window may attend to.
///
/// Applied to score tensors laid out `[batch, windows, heads, T, T]`
/// (flattened into the leading axis); every row must allow at least one
/// entry.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    windows: usize,
    heads: usize,
    tokens: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(windows: usize, heads: usize, tokens: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != windows * tokens * tokens {
            return Err(TensorError::DataLength {
                shape: vec![windows, tokens, tokens],
                expected: windows * tokens * tokens,
                actual: allowed.len(),
            });
        }
        let mask = Self { windows, heads, tokens, allowed };
        if (0..windows * tokens).any(|row| !mask.allowed[row * tokens..(row + 1) * tokens].contains(&true)) {
            return Err(TensorError::Config("attention mask has a fully masked row".into()));
        }
        Ok(mask)
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    /// Mask row for row `i` of flattened score matrix `matrix`.
    pub fn row(&self, matrix: usize, i: usize) -> &[bool] {
        let window = (matrix / self.heads) % self.windows;
        let start = (window * self.tokens + i) * self.tokens;
        &self.allowed[start..start + self.tokens]
    }
}

struct BmmDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}

fn bmm_dims(a: &[usize], b: &[usize], trans_a: bool, trans_b: bool) -> Result<BmmDims> {
    for s in [a, b] {
        if s.len() != 3 {
            return Err(TensorError::Rank { op: "bmm", expected: 3, shape: s.to_vec() });
        }
    }
    if a[0] != b[0] {
        return Err(TensorError::DimMismatch { op: "bmm", dim: "batch", expected: a[0], actual: b[0] });
    }
    let (m, k) = if trans_a { (a[2], a[1]) } else { (a[1], a[2]) };
    let (kb, n) = if trans_b { (b[2], b[1]) } else { (b[1], b[2]) };
    if k != kb {
        return Err(TensorError::DimMismatch { op: "bmm", dim: "inner", expected: k, actual: kb });
    }
    Ok(BmmDims { batch: a[0], m, k, n })
}

/// Row/column strides of a logical `rows x cols` matrix stored either
/// row-major or transposed.
fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

impl<T: Element> Tape<T> {
    /// Batched matrix product `op(a) · op(b)` over `[batch, rows, cols]`
    /// operands, where `op` optionally transposes the last two axes.
    pub fn bmm(&self, a: &Var<T>, b: &Var<T>, trans_a: bool, trans_b: bool) -> Result<Var<T>> {
        let d = bmm_dims(a.shape(), b.shape(), trans_a, trans_b)?;
        let mut out = vec![T::zero(); d.batch * d.m * d.n];
        let (sa, sb) = (d.m * d.k, d.k * d.n);
        for i in 0..d.batch {
            T::gemm(
                d.m,
                d.k,
                d.n,
                T::one(),
                &a.data()[i * sa..(i + 1) * sa],
                strides(d.m, d.k, trans_a),
                &b.data()[i * sb..(i + 1) * sb],
                strides(d.k, d.n, trans_b),
                T::zero(),
                &mut out[i * d.m * d.n..(i + 1) * d.m * d.n],
                (d.n as isize, 1),
            );
        }
        let v = Tensor::from_parts(vec![d.batch, d.m, d.n], out);
        Ok(self.record(v, vec![a.clone(), b.clone()], Op::Bmm { trans_a, trans_b }))
    }

    /// Softmax over the last axis. Masked entries get probability exactly 0.
    pub fn softmax(&self, x: &Var<T>, mask: Option<Rc<AttentionMask>>) -> Result<Var<T>> {
        let shape = x.shape();
        let width = *shape
            .last()
            .ok_or(TensorError::Rank { op: "softmax", expected: 1, shape: shape.to_vec() })?;
        if let Some(mask) = &mask {
            if shape.len() != 3 || shape[1] != mask.tokens || shape[2] != mask.tokens {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax",
                    lhs: shape.to_vec(),
                    rhs: vec![mask.windows * mask.heads, mask.tokens, mask.tokens],
                });
            }
        }
        let rows_per_matrix = if shape.len() >= 2 { shape[shape.len() - 2] } else { 1 };
        let mut out = vec![T::zero(); x.value().numel()];
        for (r, (src, dst)) in x.data().chunks_exact(width).zip(out.chunks_exact_mut(width)).enumerate() {
            let allowed = mask.as_ref().map(|m| m.row(r / rows_per_matrix, r % rows_per_matrix));
            let ok = |j: usize| allowed.is_none_or(|a| a[j]);
            let max = (0..width).filter(|&j| ok(j)).map(|j| src[j]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for j in 0..width {
                if ok(j) {
                    dst[j] = (src[j] - max).exp();
                    total = total + dst[j];
                }
            }
            dst.iter_mut().for_each(|v| *v = *v / total);
        }
        let v = Tensor::from_parts(shape.to_vec(), out);
        Ok(self.record(v, vec![x.clone()], Op::Softmax { mask }))
    }
}

pub(super) fn bmm_backward<T: Element>(inputs: &[Var<T>], grad: &[T], trans_a: bool, trans_b: bool) -> InputGrads<T> {
    let (a, b) = (&inputs[0], &inputs[1]);
    let d = bmm_dims(a.shape(), b.shape(), trans_a, trans_b).unwrap();
    let (sa, sb, sg) = (d.m * d.k, d.k * d.n, d.m * d.n);
    let g_strides = (d.n as isize, 1);

    let ga = a.requires_grad().then(|| {
        let mut ga = vec![T::zero(); a.value().numel()];
        for i in 0..d.batch {
            // dA (m x k) = G (m x n) · op(B)^T, written back in A's storage layout
            let (rsb, csb) = strides(d.k, d.n, trans_b);
            T::gemm(
                d.m,
                d.n,
                d.k,
                T::one(),
                &grad[i * sg..(i + 1) * sg],
                g_strides,
                &b.data()[i * sb..(i + 1) * sb],
                (csb, rsb),
                T::zero(),
                &mut ga[i * sa..(i + 1) * sa],
                strides(d.m, d.k, trans_a),
            );
        }
        ga
    });
    let gb = b.requires_grad().then(|| {
        let mut gb = vec![T::zero(); b.value().numel()];
        for i in 0..d.batch {
            // dB (k x n) = op(A)^T · G
            let (rsa, csa) = strides(d.m, d.k, trans_a);
            T::gemm(
                d.k,
                d.m,
                d.n,
                T::one(),
                &a.data()[i * sa..(i + 1) * sa],
                (csa, rsa),
                &grad[i * sg..(i + 1) * sg],
                g_strides,
                T::zero(),
                &mut gb[i * sb..(i + 1) * sb],
                strides(d.k, d.n, trans_b),
            );
        }
        gb
    });
    vec![ga, gb]
}

pub(super) fn softmax_backward<T: Element>(out: &Tensor<T>, grad: &[T], _mask: Option<&AttentionMask>) -> InputGrads<T> {
    // masked probabilities are exactly zero, so they drop out on their own
    let width = *out.shape().last().unwrap();
    let mut gx = vec![T::zero(); out.numel()];
    for ((y, g), dst) in out
        .data()
        .chunks_exact(width)
        .zip(grad.chunks_exact(width))
        .zip(gx.chunks_exact_mut(width))
    {
        let dot = y.iter().zip(g).map(|(&a, &b)| a * b).fold(T::zero(), |a, b| a + b);
        for j in 0..width {
            dst[j] = y[j] * (g[j] - dot);
        }
    }
    vec![Some(gx)]
}
