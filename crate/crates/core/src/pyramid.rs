//! Per-frame feature pyramid and cross-frame channel concatenation.

use rand::Rng;
use vfiqa_tensor::{Element, Tape, Tensor, Var};

use crate::config::PyramidConfig;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};

pub(crate) fn conv_name(level: usize, conv: usize) -> String {
    format!("pyramid.l{level}.conv{conv}")
}

/// Uniform fan-in scaled weights in `±sqrt(6 / fan_in)`.
pub(crate) fn he_uniform<T: Element>(rng: &mut impl Rng, shape: [usize; 4]) -> Tensor<T> {
    let fan_in = shape[1] * shape[2] * shape[3];
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-bound..bound)))
}

pub fn init_params<T: Element>(store: &mut ParamStore<T>, cfg: &PyramidConfig, rng: &mut impl Rng) -> Result<()> {
    let mut in_ch = 3;
    for (level, &ch) in cfg.channels.iter().enumerate() {
        for conv in 0..2 {
            let cin = if conv == 0 { in_ch } else { ch };
            let name = conv_name(level, conv);
            store.insert(format!("{name}.weight"), he_uniform(rng, [ch, cin, 3, 3]))?;
            store.insert(format!("{name}.bias"), Tensor::zeros([ch]))?;
        }
        in_ch = ch;
    }
    Ok(())
}

/// Runs a batch of frames `[M, 3, H, W]` through the pyramid. Level `l`
/// comes back as `[M, channels[l], H / 2^(l+1), W / 2^(l+1)]`.
pub fn extract<T: Element>(tape: &Tape<T>, bound: &Bound<T>, cfg: &PyramidConfig, frames: &Var<T>) -> Result<Vec<Var<T>>> {
    let shape = frames.shape();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::Shape(format!("pyramid expects [M, 3, H, W] frames, got {shape:?}")));
    }
    let min = cfg.min_extent();
    if shape[2] < min || shape[3] < min {
        return Err(Error::Shape(format!(
            "frames of {}x{} are too small for {} levels (need at least {min}x{min})",
            shape[2],
            shape[3],
            cfg.levels()
        )));
    }
    let slope = T::from_f64_lossy(cfg.leaky_slope);
    let mut x = frames.clone();
    let mut out = Vec::with_capacity(cfg.levels());
    for level in 0..cfg.levels() {
        for (conv, stride) in [(0, 1), (1, 2)] {
            let name = conv_name(level, conv);
            let w = bound.var(&format!("{name}.weight"))?;
            let b = bound.var(&format!("{name}.bias"))?;
            x = tape.leaky_relu(&tape.conv2d(&x, w, Some(b), stride, 1)?, slope);
        }
        out.push(x.clone());
    }
    Ok(out)
}

/// Concatenates per-frame features `[B, C, h, w]` along channels in the
/// given (temporal) order.
pub fn concat_frames<T: Element>(tape: &Tape<T>, per_frame: &[Var<T>]) -> Result<Var<T>> {
    let first = per_frame
        .first()
        .ok_or_else(|| Error::Shape("concat_frames needs at least one frame".into()))?;
    if let Some(odd) = per_frame.iter().find(|f| f.shape() != first.shape()) {
        return Err(Error::Shape(format!(
            "frame features differ in shape: {:?} vs {:?}",
            first.shape(),
            odd.shape()
        )));
    }
    let refs: Vec<&Var<T>> = per_frame.iter().collect();
    Ok(tape.concat_channels(&refs)?)
}

/// Regroups a level computed on `B * frames` consecutive frames into
/// `[B, frames * C, h, w]`. With frames stored sample-major this is the
/// same memory layout as [`concat_frames`], so only the shape changes.
pub fn group_frames<T: Element>(tape: &Tape<T>, level: &Var<T>, frames: usize) -> Result<Var<T>> {
    let s = level.shape();
    if s.len() != 4 || frames == 0 || s[0] % frames != 0 {
        return Err(Error::Shape(format!("cannot group {s:?} into clips of {frames} frames")));
    }
    Ok(tape.reshape(level, [s[0] / frames, frames * s[1], s[2], s[3]])?)
}
