use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::ops::{InputGrads, Op};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// (batch, channels, positions per channel)
fn channel_layout(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(TensorError::Rank { op, expected: 2, shape: shape.to_vec() });
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// Calls `f(base, stride)` for every channel vector; element `c` of the
/// vector lives at `base + c * stride`.
fn for_each_position(batch: usize, channels: usize, inner: usize, mut f: impl FnMut(usize, usize)) {
    for b in 0..batch {
        for p in 0..inner {
            f(b * channels * inner + p, inner);
        }
    }
}

impl<T: Element> Tape<T> {
    /// Scales each channel vector to unit L2 norm: `x / (|x| + eps)`.
    pub fn channel_unit_norm(&self, x: &Var<T>, eps: T) -> Result<Var<T>> {
        let (batch, channels, inner) = channel_layout("channel_unit_norm", x.shape())?;
        let src = x.data();
        let mut out = vec![T::zero(); src.len()];
        for_each_position(batch, channels, inner, |base, stride| {
            let norm = (0..channels)
                .map(|c| src[base + c * stride].powi(2))
                .fold(T::zero(), |a, b| a + b)
                .sqrt();
            let inv = T::one() / (norm + eps);
            for c in 0..channels {
                out[base + c * stride] = src[base + c * stride] * inv;
            }
        });
        let v = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.record(v, vec![x.clone()], Op::ChannelUnitNorm { eps }))
    }

    /// Layer normalisation across the channel axis at every position, with
    /// per-channel affine `gamma`, `beta`.
    pub fn layer_norm_channels(&self, x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, eps: T) -> Result<Var<T>> {
        let (batch, channels, inner) = channel_layout("layer_norm_channels", x.shape())?;
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if p.shape() != [channels] {
                return Err(TensorError::DimMismatch {
                    op: "layer_norm_channels",
                    dim: name,
                    expected: channels,
                    actual: p.value().numel(),
                });
            }
        }
        let src = x.data();
        let (g, bt) = (gamma.data(), beta.data());
        let mut out = vec![T::zero(); src.len()];
        for_each_position(batch, channels, inner, |base, stride| {
            let (mean, rstd) = moments(src, base, stride, channels, eps);
            for c in 0..channels {
                let i = base + c * stride;
                out[i] = (src[i] - mean) * rstd * g[c] + bt[c];
            }
        });
        let v = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.record(
            v,
            vec![x.clone(), gamma.clone(), beta.clone()],
            Op::LayerNormChannels { eps },
        ))
    }
}

fn moments<T: Element>(src: &[T], base: usize, stride: usize, channels: usize, eps: T) -> (T, T) {
    let n = T::from_usize(channels).unwrap();
    let mean = (0..channels).map(|c| src[base + c * stride]).fold(T::zero(), |a, b| a + b) / n;
    let var = (0..channels)
        .map(|c| (src[base + c * stride] - mean).powi(2))
        .fold(T::zero(), |a, b| a + b)
        / n;
    (mean, T::one() / (var + eps).sqrt())
}

pub(super) fn unit_norm_backward<T: Element>(inputs: &[Var<T>], grad: &[T], eps: T) -> InputGrads<T> {
    let x = &inputs[0];
    let (batch, channels, inner) = channel_layout("channel_unit_norm", x.shape()).unwrap();
    let src = x.data();
    let mut gx = vec![T::zero(); src.len()];
    for_each_position(batch, channels, inner, |base, stride| {
        let idx = |c: usize| base + c * stride;
        let norm = (0..channels).map(|c| src[idx(c)].powi(2)).fold(T::zero(), |a, b| a + b).sqrt();
        let denom = norm + eps;
        let dot = (0..channels).map(|c| grad[idx(c)] * src[idx(c)]).fold(T::zero(), |a, b| a + b);
        let radial = if norm > T::zero() {
            dot / (norm * denom * denom)
        } else {
            T::zero()
        };
        for c in 0..channels {
            gx[idx(c)] = grad[idx(c)] / denom - src[idx(c)] * radial;
        }
    });
    vec![Some(gx)]
}

pub(super) fn layer_norm_backward<T: Element>(inputs: &[Var<T>], grad: &[T], eps: T) -> InputGrads<T> {
    let (x, gamma) = (&inputs[0], &inputs[1]);
    let (batch, channels, inner) = channel_layout("layer_norm_channels", x.shape()).unwrap();
    let src = x.data();
    let g = gamma.data();
    let n = T::from_usize(channels).unwrap();
    let mut gx = vec![T::zero(); src.len()];
    let mut ggamma = vec![T::zero(); channels];
    let mut gbeta = vec![T::zero(); channels];
    let mut xhat = vec![T::zero(); channels];
    let mut gxhat = vec![T::zero(); channels];
    for_each_position(batch, channels, inner, |base, stride| {
        let (mean, rstd) = moments(src, base, stride, channels, eps);
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for c in 0..channels {
            let i = base + c * stride;
            xhat[c] = (src[i] - mean) * rstd;
            gxhat[c] = grad[i] * g[c];
            ggamma[c] = ggamma[c] + grad[i] * xhat[c];
            gbeta[c] = gbeta[c] + grad[i];
            sum_g = sum_g + gxhat[c];
            sum_gx = sum_gx + gxhat[c] * xhat[c];
        }
        for c in 0..channels {
            gx[base + c * stride] = rstd * (gxhat[c] - sum_g / n - xhat[c] * sum_gx / n);
        }
    });
    vec![
        x.requires_grad().then_some(gx),
        gamma.requires_grad().then_some(ggamma),
        inputs[2].requires_grad().then_some(gbeta),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_norm_gives_unit_vectors() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new([1, 2, 1, 2], vec![3.0, 1.0, 4.0, -1.0]).unwrap());
        let y = tape.channel_unit_norm(&x, 1e-10).unwrap();
        let d = y.data();
        assert!(((d[0] * d[0] + d[2] * d[2]).sqrt() - 1.0).abs() < 1e-6);
        assert!((d[0] - 0.6).abs() < 1e-6 && (d[2] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn unit_norm_of_zero_is_zero() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([1, 3, 2, 2]));
        let y = tape.channel_unit_norm(&x, 1e-10).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_standardises() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new([1, 4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let gamma = tape.constant(Tensor::full([4], 1.0));
        let beta = tape.constant(Tensor::zeros([4]));
        let y = tape.layer_norm_channels(&x, &gamma, &beta, 0.0).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y.data().iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }
}
