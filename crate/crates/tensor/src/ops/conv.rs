use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::ops::{InputGrads, Op};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Output extent of a convolution along one axis, `None` when the kernel
/// does not fit.
pub fn conv2d_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

struct Geometry {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    out_channels: usize,
    kernel: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    padding: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn out_area(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

fn geometry(
    x: &[usize],
    w: &[usize],
    b: Option<&[usize]>,
    stride: usize,
    padding: usize,
) -> Result<Geometry> {
    if x.len() != 4 {
        return Err(TensorError::Rank { op: "conv2d", expected: 4, shape: x.to_vec() });
    }
    if w.len() != 4 {
        return Err(TensorError::Rank { op: "conv2d weight", expected: 4, shape: w.to_vec() });
    }
    if w[1] != x[1] {
        return Err(TensorError::DimMismatch {
            op: "conv2d",
            dim: "in_channels",
            expected: w[1],
            actual: x[1],
        });
    }
    if w[2] != w[3] {
        return Err(TensorError::DimMismatch {
            op: "conv2d",
            dim: "kernel_width",
            expected: w[2],
            actual: w[3],
        });
    }
    if let Some(b) = b {
        if b != [w[0]] {
            return Err(TensorError::DimMismatch {
                op: "conv2d",
                dim: "bias",
                expected: w[0],
                actual: b.iter().product(),
            });
        }
    }
    if stride == 0 {
        return Err(TensorError::Config("conv2d stride must be positive".into()));
    }
    let kernel = w[2];
    let out_h = conv2d_output_extent(x[2], kernel, stride, padding).ok_or(TensorError::DimMismatch {
        op: "conv2d",
        dim: "height",
        expected: kernel,
        actual: x[2] + 2 * padding,
    })?;
    let out_w = conv2d_output_extent(x[3], kernel, stride, padding).ok_or(TensorError::DimMismatch {
        op: "conv2d",
        dim: "width",
        expected: kernel,
        actual: x[3] + 2 * padding,
    })?;
    Ok(Geometry {
        batch: x[0],
        channels: x[1],
        height: x[2],
        width: x[3],
        out_channels: w[0],
        kernel,
        out_h,
        out_w,
        stride,
        padding,
    })
}

fn im2col<T: Element>(g: &Geometry, image: &[T], col: &mut [T]) {
    let k = g.kernel;
    let area = g.out_area();
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * area..(row + 1) * area];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(g: &Geometry, col: &[T], image: &mut [T]) {
    let k = g.kernel;
    let area = g.out_area();
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * area..(row + 1) * area];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Element> Tape<T> {
    /// 2-D cross-correlation over NCHW input with square kernels and zero
    /// padding.
    pub fn conv2d(
        &self,
        x: &Var<T>,
        weight: &Var<T>,
        bias: Option<&Var<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<T>> {
        let g = geometry(x.shape(), weight.shape(), bias.map(|b| b.shape()), stride, padding)?;
        let rows = g.col_rows();
        let area = g.out_area();
        let in_size = g.channels * g.height * g.width;
        let out_size = g.out_channels * area;
        let mut out = vec![T::zero(); g.batch * out_size];
        let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * area] };
        let w = weight.data();

        for b in 0..g.batch {
            let image = &x.data()[b * in_size..(b + 1) * in_size];
            let dst = &mut out[b * out_size..(b + 1) * out_size];
            if let Some(bias) = bias {
                for (o, chunk) in dst.chunks_exact_mut(area).enumerate() {
                    chunk.fill(bias.data()[o]);
                }
            }
            let cols: &[T] = if g.is_pointwise() {
                image
            } else {
                im2col(&g, image, &mut col);
                &col
            };
            T::gemm(
                g.out_channels,
                rows,
                area,
                T::one(),
                w,
                (rows as isize, 1),
                cols,
                (area as isize, 1),
                T::one(),
                dst,
                (area as isize, 1),
            );
        }

        let value = Tensor::from_parts(vec![g.batch, g.out_channels, g.out_h, g.out_w], out);
        let mut inputs = vec![x.clone(), weight.clone()];
        inputs.extend(bias.cloned());
        Ok(self.record(value, inputs, Op::Conv2d { stride, padding }))
    }
}

pub(super) fn backward<T: Element>(
    inputs: &[Var<T>],
    grad: &[T],
    stride: usize,
    padding: usize,
) -> InputGrads<T> {
    let (x, w) = (&inputs[0], &inputs[1]);
    let bias = inputs.get(2);
    let g = geometry(x.shape(), w.shape(), bias.map(|b| b.shape()), stride, padding)
        .expect("geometry was validated in forward");
    let rows = g.col_rows();
    let area = g.out_area();
    let in_size = g.channels * g.height * g.width;
    let out_size = g.out_channels * area;

    let mut gx = x.requires_grad().then(|| vec![T::zero(); x.value().numel()]);
    let mut gw = w.requires_grad().then(|| vec![T::zero(); w.value().numel()]);
    let gb = bias.filter(|b| b.requires_grad()).map(|_| {
        let mut gb = vec![T::zero(); g.out_channels];
        for b in 0..g.batch {
            for (o, chunk) in grad[b * out_size..(b + 1) * out_size].chunks_exact(area).enumerate() {
                gb[o] = gb[o] + chunk.iter().copied().sum();
            }
        }
        gb
    });

    let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * area }];
    let mut gcol = vec![T::zero(); if gx.is_some() && !g.is_pointwise() { rows * area } else { 0 }];
    for b in 0..g.batch {
        let gout = &grad[b * out_size..(b + 1) * out_size];
        let image = &x.data()[b * in_size..(b + 1) * in_size];
        if let Some(gw) = gw.as_mut() {
            let cols: &[T] = if g.is_pointwise() {
                image
            } else {
                im2col(&g, image, &mut col);
                &col
            };
            // gW[O, R] += gout[O, A] · cols[R, A]^T
            T::gemm(
                g.out_channels,
                area,
                rows,
                T::one(),
                gout,
                (area as isize, 1),
                cols,
                (1, area as isize),
                T::one(),
                gw,
                (rows as isize, 1),
            );
        }
        if let Some(gx) = gx.as_mut() {
            let gx_b = &mut gx[b * in_size..(b + 1) * in_size];
            // gcol[R, A] = W[O, R]^T · gout[O, A]
            let transpose_into = |target: &mut [T]| {
                T::gemm(
                    rows,
                    g.out_channels,
                    area,
                    T::one(),
                    w.data(),
                    (1, rows as isize),
                    gout,
                    (area as isize, 1),
                    T::zero(),
                    target,
                    (area as isize, 1),
                )
            };
            if g.is_pointwise() {
                transpose_into(gx_b);
            } else {
                transpose_into(&mut gcol);
                col2im(&g, &gcol, gx_b);
            }
        }
    }

    let mut out = vec![gx, gw];
    if bias.is_some() {
        out.push(gb);
    }
    out
}
