//! The end-to-end metric: pyramid features of a clip and its reference,
//! compared level by level and pooled to a distance `d`.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vfiqa_tensor::{Element, Tape, Tensor, Var, PROB_CLAMP};

use crate::clip::VideoClip;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::pyramid;
use crate::st::{self, PooledDistance};

#[derive(Debug, Clone, PartialEq)]
pub struct Distance {
    pub d: f64,
    pub per_level: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MetricModel<T: Element = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Element> MetricModel<T> {
    /// Randomly initialised model, reproducible from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::init(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        pyramid::init_params(&mut params, &config.pyramid, rng)?;
        st::init_params(&mut params, &config, rng)?;
        Ok(Self { config, params })
    }

    /// Every weight and bias zero.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        for (_, t) in model.params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        Ok(model)
    }

    /// Assembles a model from loaded tensors, checking names and shapes
    /// against what `config` calls for.
    pub fn from_parts(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let template = Self::zeroed(config.clone())?;
        if template.params.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for (name, t) in template.params.iter() {
            let got = params
                .get(name)
                .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> Bound<T> {
        self.params.bind(tape, trainable)
    }

    /// Distances for `pairs` of (candidate, reference) sample indices into
    /// `frames`, which holds whole clips stacked sample-major as
    /// `[samples * N, 3, H, W]`. Every sample goes through the pyramid once.
    pub fn forward(&self, tape: &Tape<T>, bound: &Bound<T>, frames: &Var<T>, pairs: &[(usize, usize)]) -> Result<PooledDistance<T>> {
        let n = self.config.frames;
        let total = frames.shape().first().copied().unwrap_or(0);
        if total == 0 || total % n != 0 {
            return Err(Error::Shape(format!(
                "model expects whole clips of {n} frames, got a stack of {total}"
            )));
        }
        let samples = total / n;
        if pairs.is_empty() || pairs.iter().any(|&(a, b)| a >= samples || b >= samples) {
            return Err(Error::Invalid(format!("pairs {pairs:?} do not index {samples} samples")));
        }
        let candidates: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let references: Vec<usize> = pairs.iter().map(|p| p.1).collect();

        let levels = pyramid::extract(tape, bound, &self.config.pyramid, frames)?;
        let mut heads = Vec::with_capacity(levels.len());
        for (level, features) in levels.iter().enumerate() {
            let grouped = pyramid::group_frames(tape, features, n)?;
            let f = select_samples(tape, &grouped, &candidates)?;
            let f_ref = select_samples(tape, &grouped, &references)?;
            heads.push(st::level_head(tape, bound, level, &f, &f_ref, &self.config.st)?);
        }
        st::pool_distance(tape, &heads)
    }

    fn check_clip(&self, clip: &VideoClip) -> Result<()> {
        if clip.frame_count() != self.config.frames {
            return Err(Error::Shape(format!(
                "clip `{}` has {} frames but the model compares {}-frame clips",
                clip.id,
                clip.frame_count(),
                self.config.frames
            )));
        }
        Ok(())
    }

    pub fn score_detailed(&self, v: &VideoClip, v_ref: &VideoClip) -> Result<Distance> {
        v.check_same_shape(v_ref)?;
        self.check_clip(v)?;
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let frames = tape.constant(VideoClip::stack(&[v, v_ref])?);
        let out = self.forward(&tape, &bound, &frames, &[(0, 1)])?;
        Ok(Distance {
            d: out.d.item().as_f64(),
            per_level: out.per_level.iter().map(|l| l.item().as_f64()).collect(),
        })
    }

    /// Perceptual distance of `v` from `v_ref`; lower is more similar.
    pub fn score(&self, v: &VideoClip, v_ref: &VideoClip) -> Result<f64> {
        Ok(self.score_detailed(v, v_ref)?.d)
    }

    /// `(d_A, d_B)` against a shared reference in one pass.
    pub fn score_triplet(&self, a: &VideoClip, b: &VideoClip, r: &VideoClip) -> Result<(f64, f64)> {
        a.check_same_shape(r)?;
        b.check_same_shape(r)?;
        self.check_clip(r)?;
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let frames = tape.constant(VideoClip::stack(&[a, b, r])?);
        let d = self.forward(&tape, &bound, &frames, &[(0, 2), (1, 2)])?.d;
        Ok((d.data()[0].as_f64(), d.data()[1].as_f64()))
    }
}

/// Picks whole samples out of `[S, ...]` in the given order.
pub(crate) fn select_samples<T: Element>(tape: &Tape<T>, x: &Var<T>, samples: &[usize]) -> Result<Var<T>> {
    let shape = x.shape();
    let plane: usize = shape[1..].iter().product();
    if shape[0] * plane > u32::MAX as usize {
        return Err(Error::Shape(format!("tensor {shape:?} too large to index")));
    }
    let index: Vec<u32> = samples
        .iter()
        .flat_map(|&s| (s * plane..(s + 1) * plane).map(|i| i as u32))
        .collect();
    let mut out_shape = shape.to_vec();
    out_shape[0] = samples.len();
    Ok(tape.gather(x, Rc::from(index), out_shape)?)
}

/// Probability that B is judged better than A: `sigmoid(d_A - d_B)`.
pub fn preference_prob(d_a: f64, d_b: f64) -> f64 {
    let z = d_a - d_b;
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of `p` against the human preference `h` for B.
pub fn bce_loss(p: f64, h: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&h) {
        return Err(Error::Invalid(format!("judgment h = {h} outside [0, 1]")));
    }
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    Ok(-(h * p.ln() + (1.0 - h) * (1.0 - p).ln()))
}

/// Mean BCE over a batch whose first half of `d` holds `d_A` and second
/// half `d_B`, as a tape scalar.
pub fn siamese_loss<T: Element>(tape: &Tape<T>, d: &Var<T>, h: &[T]) -> Result<Var<T>> {
    let batch = h.len();
    if d.shape() != [2 * batch] {
        return Err(Error::Shape(format!("expected {} distances, got {:?}", 2 * batch, d.shape())));
    }
    let idx = |range: std::ops::Range<usize>| -> Rc<[u32]> { range.map(|i| i as u32).collect() };
    let d_a = tape.gather(d, idx(0..batch), [batch])?;
    let d_b = tape.gather(d, idx(batch..2 * batch), [batch])?;
    let p = tape.sigmoid(&tape.sub(&d_a, &d_b)?);
    Ok(tape.mean(&tape.bce(&p, h)?)?)
}

impl MetricModel<f32> {
    pub fn to_f64(&self) -> MetricModel<f64> {
        let mut params = ParamStore::new();
        for (name, t) in self.params.iter() {
            params.insert(name, t.cast()).expect("names are unique");
        }
        MetricModel { config: self.config.clone(), params }
    }
}

#[allow(dead_code)]
fn _assert_send_sync() {
    fn check<X: Send + Sync>() {}
    check::<MetricModel<f32>>();
    check::<Tensor<f32>>();
}
