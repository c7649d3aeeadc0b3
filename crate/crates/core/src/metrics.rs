//! Video metrics behind one trait, created by name from a registry.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::clip::VideoClip;
use crate::error::{Error, Result};
use crate::eval::{luma, psnr, sliding_window_score, ssim_plane};
use crate::model::MetricModel;
use crate::weights;

/// A full-reference video metric reporting a distance: lower means closer
/// to the reference.
pub trait VideoMetric: Send + Sync {
    fn name(&self) -> &str;
    fn distance(&self, v: &VideoClip, v_ref: &VideoClip) -> Result<f64>;
}

/// A full-reference image metric on `[3, H, W]` frames; deterministic and
/// non-negative.
pub trait RefMetric: Send + Sync {
    fn name(&self) -> &str;
    fn frame_distance(&self, frame: &[f32], reference: &[f32], height: usize, width: usize) -> Result<f64>;
}

/// Lifts a frame metric to clips by averaging over frames.
pub struct PerFrame<M>(pub M);

impl<M: RefMetric> VideoMetric for PerFrame<M> {
    fn name(&self) -> &str {
        self.0.name()
    }

    fn distance(&self, v: &VideoClip, v_ref: &VideoClip) -> Result<f64> {
        v.check_same_shape(v_ref)?;
        let mut total = 0.0;
        for t in 0..v.frame_count() {
            total += self.0.frame_distance(v.frame(t), v_ref.frame(t), v.height(), v.width())?;
        }
        Ok(total / v.frame_count() as f64)
    }
}

/// Mean absolute difference over a blurred image pyramid; needs no
/// learned weights.
#[derive(Debug, Clone, Copy)]
pub struct PixelProxy {
    pub scales: usize,
}

impl Default for PixelProxy {
    fn default() -> Self {
        Self { scales: 3 }
    }
}

fn blur(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = [0.25, 0.5, 0.25];
    let tap = |i: usize, d: isize, n: usize| (i as isize + d).clamp(0, n as isize - 1) as usize;
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = (0..3).map(|j| k[j] * plane[y * w + tap(x, j as isize - 1, w)]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (0..3).map(|j| k[j] * rows[tap(y, j as isize - 1, h) * w + x]).sum();
        }
    }
    out
}

fn halve(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            let at = |yy: usize, xx: usize| plane[yy * w + xx];
            out.push((at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1)) / 4.0);
        }
    }
    (out, oh, ow)
}

impl RefMetric for PixelProxy {
    fn name(&self) -> &str {
        "pixel"
    }

    fn frame_distance(&self, frame: &[f32], reference: &[f32], h: usize, w: usize) -> Result<f64> {
        if frame.len() != 3 * h * w || reference.len() != frame.len() {
            return Err(Error::Shape("pixel proxy: frame sizes disagree".into()));
        }
        let mut per_scale = Vec::new();
        let hw = h * w;
        for c in 0..3 {
            let to_f64 = |s: &[f32]| s[c * hw..(c + 1) * hw].iter().map(|&v| v as f64).collect::<Vec<_>>();
            let (mut a, mut b, mut ch, mut cw) = (to_f64(frame), to_f64(reference), h, w);
            for scale in 0..self.scales.max(1) {
                let (ba, bb) = (blur(&a, ch, cw), blur(&b, ch, cw));
                let mad = ba.iter().zip(&bb).map(|(x, y)| (x - y).abs()).sum::<f64>() / ba.len() as f64;
                if per_scale.len() <= scale {
                    per_scale.push(0.0);
                }
                per_scale[scale] += mad / 3.0;
                if ch < 2 || cw < 2 {
                    break;
                }
                (a, _, _) = halve(&ba, ch, cw);
                (b, ch, cw) = halve(&bb, ch, cw);
            }
        }
        Ok(per_scale.iter().sum::<f64>() / per_scale.len() as f64)
    }
}

/// Structural dissimilarity `(1 - SSIM) / 2` on luma.
#[derive(Debug, Clone, Copy, Default)]
pub struct Dssim;

impl RefMetric for Dssim {
    fn name(&self) -> &str {
        "dssim"
    }

    fn frame_distance(&self, frame: &[f32], reference: &[f32], h: usize, w: usize) -> Result<f64> {
        let s = ssim_plane(&luma(frame, h * w), &luma(reference, h * w), h, w)?;
        Ok(((1.0 - s) / 2.0).max(0.0))
    }
}

/// Negated PSNR, so that lower is better like every other metric here.
#[derive(Debug, Clone, Copy, Default)]
pub struct NegPsnr;

impl VideoMetric for NegPsnr {
    fn name(&self) -> &str {
        "psnr"
    }

    fn distance(&self, v: &VideoClip, v_ref: &VideoClip) -> Result<f64> {
        Ok(-psnr(v, v_ref)?)
    }
}

/// The trained model; clips longer than its frame count are scored with
/// sliding windows.
pub struct Learned {
    pub model: MetricModel<f32>,
    pub stride: usize,
}

impl VideoMetric for Learned {
    fn name(&self) -> &str {
        "learned"
    }

    fn distance(&self, v: &VideoClip, v_ref: &VideoClip) -> Result<f64> {
        let n = self.model.config.frames;
        if v.frame_count() == n {
            return self.model.score(v, v_ref);
        }
        sliding_window_score(v, v_ref, n, self.stride, |a, b| self.model.score(a, b))
    }
}

#[derive(Debug, Clone)]
pub struct MetricOptions {
    /// Weights file for the learned metric.
    pub model: Option<PathBuf>,
    pub stride: usize,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self { model: None, stride: 1 }
    }
}

type Factory = Box<dyn Fn(&MetricOptions) -> Result<Box<dyn VideoMetric>> + Send + Sync>;

#[derive(Default)]
pub struct MetricRegistry {
    factories: BTreeMap<String, Factory>,
}

impl MetricRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::new();
        r.register("learned", |opts| {
            let path = opts
                .model
                .as_ref()
                .ok_or_else(|| Error::Invalid("the learned metric needs a weights file (--model)".into()))?;
            Ok(Box::new(Learned { model: weights::load(path)?, stride: opts.stride }))
        });
        r.register("psnr", |_| Ok(Box::new(NegPsnr)));
        r.register("dssim", |_| Ok(Box::new(PerFrame(Dssim))));
        r.register("pixel", |_| Ok(Box::new(PerFrame(PixelProxy::default()))));
        r
    }

    /// Adds or replaces the factory for `name`.
    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&MetricOptions) -> Result<Box<dyn VideoMetric>> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn create(&self, name: &str, opts: &MetricOptions) -> Result<Box<dyn VideoMetric>> {
        let factory = self.factories.get(name).ok_or_else(|| Error::UnknownMetric(name.to_string()))?;
        factory(opts)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(offset: f32) -> VideoClip {
        VideoClip::from_fn("c", [2, 16, 16], |t, c, y, x| {
            ((x * 5 + y * 3 + c + t) % 9) as f32 / 9.0 - 0.5 + offset
        })
        .unwrap()
    }

    #[test]
    fn builtins_are_registered() {
        let r = MetricRegistry::with_builtins();
        assert_eq!(r.names().collect::<Vec<_>>(), ["dssim", "learned", "pixel", "psnr"]);
        assert!(matches!(r.create("lpips", &MetricOptions::default()), Err(Error::UnknownMetric(_))));
        assert!(r.create("learned", &MetricOptions::default()).is_err());
    }

    #[test]
    fn identical_clips_are_at_distance_zero() {
        let r = MetricRegistry::with_builtins();
        let c = clip(0.0);
        for name in ["pixel", "dssim"] {
            assert_eq!(r.create(name, &MetricOptions::default()).unwrap().distance(&c, &c).unwrap(), 0.0);
        }
        assert_eq!(NegPsnr.distance(&c, &c).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn distances_grow_with_the_perturbation() {
        let c = clip(0.0);
        for metric in [&PerFrame(PixelProxy::default()) as &dyn VideoMetric, &PerFrame(Dssim), &NegPsnr] {
            let near = metric.distance(&clip(0.05), &c).unwrap();
            let far = metric.distance(&clip(0.2), &c).unwrap();
            assert!(near < far, "{}: {near} vs {far}", metric.name());
        }
    }

    #[test]
    fn custom_metrics_can_be_registered() {
        struct Zero;
        impl VideoMetric for Zero {
            fn name(&self) -> &str {
                "zero"
            }
            fn distance(&self, _: &VideoClip, _: &VideoClip) -> Result<f64> {
                Ok(0.0)
            }
        }
        let mut r = MetricRegistry::new();
        r.register("zero", |_| Ok(Box::new(Zero)));
        assert_eq!(r.create("zero", &MetricOptions::default()).unwrap().name(), "zero");
    }
}
