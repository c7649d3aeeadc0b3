#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use vfiqa_core::eval::{two_afc, PairedResult};
use vfiqa_core::train::Sample;
use vfiqa_core::{MetricModel, VideoClip};

pub const SIDE: usize = 32;
pub const FRAMES: usize = 4;
pub const LIGHT: (f64, f64) = (0.02, 0.08);
pub const HEAVY: (f64, f64) = (0.15, 0.30);

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A smooth pattern drifting across the frame over time.
pub fn reference_clip(rng: &mut impl Rng, id: &str) -> VideoClip {
    let fx: f32 = rng.random_range(0.5..3.0);
    let fy: f32 = rng.random_range(0.5..3.0);
    let speed: f32 = rng.random_range(0.2..0.8);
    let phase: [f32; 3] = [rng.random_range(0.0..6.3), rng.random_range(0.0..6.3), rng.random_range(0.0..6.3)];
    let amp: f32 = rng.random_range(0.4..0.8);
    let tau = std::f32::consts::TAU;
    VideoClip::from_fn(id, [FRAMES, SIDE, SIDE], |t, c, y, x| {
        let u = fx * x as f32 / SIDE as f32 + fy * y as f32 / SIDE as f32;
        amp * (tau * u + phase[c] + speed * t as f32).sin()
    })
    .unwrap()
}

pub fn noisy(clip: &VideoClip, sigma: f64, rng: &mut impl Rng) -> VideoClip {
    let normal = Normal::new(0.0, sigma).unwrap();
    let data: Vec<f32> = clip.frames().data().iter().map(|&v| (v + normal.sample(rng) as f32).clamp(-1.0, 1.0)).collect();
    let frames = vfiqa_tensor::Tensor::new(clip.frames().shape().to_vec(), data).unwrap();
    VideoClip::new(format!("{}+{sigma:.3}", clip.id), frames).unwrap()
}

/// Reference plus a lightly and a heavily corrupted copy, in random A/B
/// order, labeled with the preference for the lighter one.
pub fn noise_triplet(rng: &mut impl Rng, id: usize) -> Sample {
    let reference = reference_clip(rng, &format!("r{id}"));
    let light = noisy(&reference, rng.random_range(LIGHT.0..LIGHT.1), rng);
    let heavy = noisy(&reference, rng.random_range(HEAVY.0..HEAVY.1), rng);
    let (a, b, h) = if rng.random_bool(0.5) { (light, heavy, 0.0) } else { (heavy, light, 1.0) };
    Sample { id: format!("t{id}"), a, b, reference, h }
}

pub fn noise_triplets(seed: u64, count: usize) -> Vec<Sample> {
    let mut r = rng(seed);
    (0..count).map(|i| noise_triplet(&mut r, i)).collect()
}

pub fn model_two_afc(model: &MetricModel<f32>, samples: &[Sample]) -> f64 {
    let results: Vec<PairedResult> = samples
        .iter()
        .map(|s| {
            let (d_a, d_b) = model.score_triplet(&s.a, &s.b, &s.reference).unwrap();
            PairedResult { triplet_id: s.id.clone(), d_a, d_b, h: s.h }
        })
        .collect();
    two_afc(&results).unwrap()
}
