//! Central finite-difference verification of backward rules.
//!
//! The checked function is projected onto a fixed pseudo-random direction
//! `r` so that every output element contributes: the analytic side
//! back-propagates `sum(r * y)` through the tape, the numeric side
//! evaluates the same projection in f64 from perturbed forward passes.

use crate::element::Element;
use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Perturbation size.
    pub step: f64,
    /// Upper bound on checked coordinates per input; larger inputs are
    /// subsampled with a fixed stride pattern.
    pub max_coords: usize,
    /// Norms below this are treated as zero when forming the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl GradCheckOptions {
    /// Defaults tuned for the element type's precision.
    pub fn for_dtype<T: Element>() -> Self {
        match T::DTYPE {
            crate::DType::F32 => Self { step: 3e-3, max_coords: 48, floor: 1e-6, seed: 7 },
            crate::DType::F64 => Self { step: 1e-5, max_coords: 48, floor: 1e-12, seed: 7 },
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Per input: `|analytic - numeric| / max(|analytic|, |numeric|)` over
    /// the checked coordinates.
    pub relative_errors: Vec<f64>,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// SplitMix64, enough for reproducible projection weights.
fn splitmix(state: &mut u64) -> f64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn coords(numel: usize, max: usize, seed: u64) -> Vec<usize> {
    if numel <= max {
        return (0..numel).collect();
    }
    let mut state = seed;
    let mut picked: Vec<usize> = (0..max).map(|_| (splitmix(&mut state) * numel as f64) as usize).collect();
    picked.sort_unstable();
    picked.dedup();
    picked
}

/// Checks the gradient of `f` with respect to every tensor in `inputs`.
pub fn check_gradients<T, F>(f: F, inputs: &[Tensor<T>], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    T: Element,
    F: Fn(&Tape<T>, &[Var<T>]) -> Result<Var<T>>,
{
    let projection = |n: usize| -> Vec<f64> {
        let mut state = opts.seed ^ 0x5EED;
        (0..n).map(|_| splitmix(&mut state) * 2.0 - 1.0).collect()
    };
    let evaluate = |values: &[Tensor<T>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let y = f(&tape, &vars)?;
        let r = projection(y.value().numel());
        Ok(y.data().iter().zip(&r).map(|(v, w)| v.as_f64() * w).sum())
    };

    // analytic
    let tape = Tape::new();
    let vars: Vec<_> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let y = f(&tape, &vars)?;
    let r: Vec<T> = projection(y.value().numel()).into_iter().map(T::from_f64_lossy).collect();
    let r = tape.constant(Tensor::new(y.shape().to_vec(), r)?);
    let loss = tape.sum(&tape.mul(&y, &r)?);
    let grads = tape.backward(&loss)?;

    let mut relative_errors = Vec::with_capacity(inputs.len());
    let mut coords_checked = 0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(&vars[i]) {
            Some(g) => g.iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; input.numel()],
        };
        let mut diff_sq = 0.0;
        let mut a_sq = 0.0;
        let mut n_sq = 0.0;
        for c in coords(input.numel(), opts.max_coords, opts.seed.wrapping_add(i as u64)) {
            let mut values = inputs.to_vec();
            let base = input.data()[c].as_f64();
            values[i].data_mut()[c] = T::from_f64_lossy(base + opts.step);
            let plus = evaluate(&values)?;
            values[i].data_mut()[c] = T::from_f64_lossy(base - opts.step);
            let minus = evaluate(&values)?;
            // divide by the step actually representable in T
            let h = T::from_f64_lossy(base + opts.step).as_f64() - T::from_f64_lossy(base - opts.step).as_f64();
            let numeric = (plus - minus) / h;
            diff_sq += (numeric - analytic[c]).powi(2);
            a_sq += analytic[c].powi(2);
            n_sq += numeric.powi(2);
            coords_checked += 1;
        }
        let scale = a_sq.sqrt().max(n_sq.sqrt());
        relative_errors.push(if scale < opts.floor { diff_sq.sqrt() } else { diff_sq.sqrt() / scale });
    }
    Ok(GradCheckReport { relative_errors, coords_checked })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accepts_correct_and_flags_wrong_gradients() {
        let x = Tensor::new([3], vec![0.3, -0.7, 1.1]).unwrap();
        let ok = check_gradients(|t, v| Ok(t.gelu(&v[0])), &[x.clone()], GradCheckOptions::for_dtype::<f64>()).unwrap();
        assert!(ok.worst() < 1e-8, "{ok:?}");
        // detaching one factor of x*x halves the analytic gradient
        let detached = |t: &Tape<f64>, v: &[Var<f64>]| {
            let copy = t.constant(v[0].value().clone());
            t.mul(&v[0], &copy)
        };
        let bad = check_gradients(detached, &[x], GradCheckOptions::for_dtype::<f64>()).unwrap();
        assert!(bad.worst() > 0.3, "{bad:?}");
    }
}
