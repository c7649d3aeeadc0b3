use std::rc::Rc;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::ops::{InputGrads, Op};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

impl<T: Element> Tape<T> {
    pub fn reshape(&self, x: &Var<T>, shape: impl Into<Vec<usize>>) -> Result<Var<T>> {
        let v = x.value().clone().with_requires_grad(false).reshape(shape)?;
        Ok(self.record(v, vec![x.clone()], Op::Reshape))
    }

    /// Concatenates `[B, C_i, ...]` inputs along axis 1.
    pub fn concat_channels(&self, parts: &[&Var<T>]) -> Result<Var<T>> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Config("concat of zero tensors".into()))?;
        let shape = first.shape();
        if shape.len() < 2 {
            return Err(TensorError::Rank { op: "concat_channels", expected: 2, shape: shape.to_vec() });
        }
        for p in &parts[1..] {
            let s = p.shape();
            if s.len() != shape.len() || s[0] != shape[0] || s[2..] != shape[2..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    lhs: shape.to_vec(),
                    rhs: s.to_vec(),
                });
            }
        }
        let batch = shape[0];
        let inner: usize = shape[2..].iter().product();
        let channels: usize = parts.iter().map(|p| p.shape()[1]).sum();
        let mut data = Vec::with_capacity(batch * channels * inner);
        for b in 0..batch {
            for p in parts {
                let block = p.shape()[1] * inner;
                data.extend_from_slice(&p.data()[b * block..(b + 1) * block]);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[1] = channels;
        let inputs = parts.iter().map(|&p| p.clone()).collect();
        Ok(self.record(Tensor::from_parts(out_shape, data), inputs, Op::ConcatChannels))
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`. Indices may repeat or
    /// skip elements; the backward pass scatter-adds.
    pub fn gather(&self, x: &Var<T>, index: Rc<[u32]>, shape: impl Into<Vec<usize>>) -> Result<Var<T>> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(TensorError::DataLength { shape, expected: n, actual: index.len() });
        }
        let src = x.data();
        if let Some(&bad) = index.iter().find(|&&i| i as usize >= src.len()) {
            return Err(TensorError::DimMismatch {
                op: "gather",
                dim: "index",
                expected: src.len(),
                actual: bad as usize,
            });
        }
        let data = index.iter().map(|&i| src[i as usize]).collect();
        Ok(self.record(Tensor::from_parts(shape, data), vec![x.clone()], Op::Gather { index }))
    }
}

pub(super) fn concat_backward<T: Element>(inputs: &[Var<T>], grad: &[T]) -> InputGrads<T> {
    let shape = inputs[0].shape();
    let batch = shape[0];
    let inner: usize = shape[2..].iter().product();
    let total: usize = inputs.iter().map(|p| p.shape()[1]).sum::<usize>() * inner;
    let mut offset = 0;
    inputs
        .iter()
        .map(|p| {
            let block = p.shape()[1] * inner;
            let g = p.requires_grad().then(|| {
                let mut g = Vec::with_capacity(batch * block);
                for b in 0..batch {
                    let start = b * total + offset;
                    g.extend_from_slice(&grad[start..start + block]);
                }
                g
            });
            offset += block;
            g
        })
        .collect()
}

pub(super) fn gather_backward<T: Element>(inputs: &[Var<T>], grad: &[T], index: &[u32]) -> InputGrads<T> {
    let mut g = vec![T::zero(); inputs[0].value().numel()];
    for (&i, &v) in index.iter().zip(grad) {
        g[i as usize] = g[i as usize] + v;
    }
    vec![Some(g)]
}
