//! Test-only oracles shared by this crate's integration tests and the
//! workspace acceptance suite.
#![allow(dead_code)]

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vfiqa_tensor::gradcheck::{check_gradients, GradCheckOptions};
use vfiqa_tensor::{AttentionMask, AttentionWeights, Element, Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(lo..hi)))
}

/// Values bounded away from zero, for ops with a kink at the origin.
pub fn away_from_zero<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let mag = rng.random_range(0.1..1.0);
        T::from_f64_lossy(if rng.random_bool(0.5) { mag } else { -mag })
    })
}

/// Plain f64 attention weights, row-major.
pub struct DenseAttention {
    pub channels: usize,
    pub heads: usize,
    pub window: usize,
    pub qkv_weight: Vec<f64>,
    pub qkv_bias: Vec<f64>,
    pub proj_weight: Vec<f64>,
    pub proj_bias: Vec<f64>,
}

impl DenseAttention {
    pub fn random(rng: &mut ChaCha8Rng, channels: usize, heads: usize, window: usize) -> Self {
        let mut draw = |n: usize, s: f64| (0..n).map(|_| rng.random_range(-s..s)).collect::<Vec<_>>();
        let s = 1.0 / (channels as f64).sqrt();
        Self {
            channels,
            heads,
            window,
            qkv_weight: draw(3 * channels * channels, s),
            qkv_bias: draw(3 * channels, 0.1),
            proj_weight: draw(channels * channels, s),
            proj_bias: draw(channels, 0.1),
        }
    }

    pub fn vars<T: Element>(&self, tape: &Tape<T>) -> [Var<T>; 4] {
        let c = self.channels;
        let t = |shape: &[usize], v: &[f64]| {
            tape.constant(Tensor::new(shape, v.iter().map(|&x| T::from_f64_lossy(x)).collect()).unwrap())
        };
        [
            t(&[3 * c, c, 1, 1], &self.qkv_weight),
            t(&[3 * c], &self.qkv_bias),
            t(&[c, c, 1, 1], &self.proj_weight),
            t(&[c], &self.proj_bias),
        ]
    }

    /// Brute-force shifted-window attention on one `[C, H, W]` map whose
    /// sides are multiples of the window.
    ///
    /// Works straight from the definition: roll the map by `-s`, attend
    /// inside each window with the seam mask, roll the result back.
    pub fn forward(&self, x: &[f64], height: usize, width: usize, shifted: bool) -> Vec<f64> {
        let (c, ws) = (self.channels, self.window);
        assert!(height % ws == 0 && width % ws == 0);
        let d = c / self.heads;
        let s = if shifted && height.min(width) > ws { ws / 2 } else { 0 };
        let at = |ch: usize, y: usize, xx: usize| x[(ch * height + y) * width + xx];

        // per-pixel linear projection on the rolled grid
        let mut qkv = vec![0.0; 3 * c * height * width];
        for y in 0..height {
            for xx in 0..width {
                let (sy, sx) = ((y + s) % height, (xx + s) % width);
                for o in 0..3 * c {
                    let mut acc = self.qkv_bias[o];
                    for i in 0..c {
                        acc += self.qkv_weight[o * c + i] * at(i, sy, sx);
                    }
                    qkv[(o * height + y) * width + xx] = acc;
                }
            }
        }
        let region = |p: usize, size: usize| {
            if s == 0 || p < size - ws {
                0
            } else if p < size - s {
                1
            } else {
                2
            }
        };

        let mut mixed = vec![0.0; c * height * width];
        for y in 0..height {
            for xx in 0..width {
                let (wy, wx) = (y / ws, xx / ws);
                let label = region(y, height) * 3 + region(xx, width);
                let keys: Vec<(usize, usize)> = (0..ws * ws)
                    .map(|t| (wy * ws + t / ws, wx * ws + t % ws))
                    .filter(|&(ky, kx)| region(ky, height) * 3 + region(kx, width) == label)
                    .collect();
                for h in 0..self.heads {
                    let q = |j: usize| qkv[((h * d + j) * height + y) * width + xx];
                    let scores: Vec<f64> = keys
                        .iter()
                        .map(|&(ky, kx)| {
                            (0..d)
                                .map(|j| q(j) * qkv[((c + h * d + j) * height + ky) * width + kx])
                                .sum::<f64>()
                                / (d as f64).sqrt()
                        })
                        .collect();
                    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = scores.iter().map(|v| (v - max).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    for j in 0..d {
                        mixed[((h * d + j) * height + y) * width + xx] = keys
                            .iter()
                            .zip(&exps)
                            .map(|(&(ky, kx), e)| e / z * qkv[((2 * c + h * d + j) * height + ky) * width + kx])
                            .sum();
                    }
                }
            }
        }

        let mut out = vec![0.0; c * height * width];
        for y in 0..height {
            for xx in 0..width {
                let (ry, rx) = ((y + height - s) % height, (xx + width - s) % width);
                for o in 0..c {
                    let mut acc = self.proj_bias[o];
                    for i in 0..c {
                        acc += self.proj_weight[o * c + i] * mixed[(i * height + ry) * width + rx];
                    }
                    out[(o * height + y) * width + xx] = acc;
                }
            }
        }
        out
    }
}

pub fn attention_weights<'a, T: Element>(w: &'a [Var<T>; 4]) -> AttentionWeights<'a, T> {
    AttentionWeights {
        qkv_weight: &w[0],
        qkv_bias: Some(&w[1]),
        proj_weight: &w[2],
        proj_bias: Some(&w[3]),
    }
}

/// Largest relative gradient error seen for one op over all instances.
#[derive(Debug, Clone)]
pub struct GradCase {
    pub name: &'static str,
    pub instances: usize,
    pub worst: f64,
}

type Builder<T> = Box<dyn Fn(&Tape<T>, &[Var<T>]) -> vfiqa_tensor::Result<Var<T>>>;
type Sampler<T> = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<T>>>;

fn cases<T: Element>() -> Vec<(&'static str, Sampler<T>, Builder<T>)> {
    let mut out: Vec<(&'static str, Sampler<T>, Builder<T>)> = Vec::new();
    macro_rules! case {
        ($name:expr, |$r:ident| $sample:expr, |$t:ident, $v:ident| $build:expr) => {
            out.push((
                $name,
                Box::new(move |$r: &mut ChaCha8Rng| $sample),
                Box::new(move |$t: &Tape<T>, $v: &[Var<T>]| $build),
            ));
        };
    }

    case!("conv2d 3x3 stride 1", |r| vec![
        uniform(r, &[2, 3, 5, 6], -1.0, 1.0),
        uniform(r, &[4, 3, 3, 3], -0.5, 0.5),
        uniform(r, &[4], -0.5, 0.5),
    ], |t, v| t.conv2d(&v[0], &v[1], Some(&v[2]), 1, 1));
    case!("conv2d 3x3 stride 2", |r| vec![
        uniform(r, &[1, 2, 7, 6], -1.0, 1.0),
        uniform(r, &[3, 2, 3, 3], -0.5, 0.5),
        uniform(r, &[3], -0.5, 0.5),
    ], |t, v| t.conv2d(&v[0], &v[1], Some(&v[2]), 2, 1));
    case!("conv2d 1x1", |r| vec![
        uniform(r, &[2, 5, 3, 3], -1.0, 1.0),
        uniform(r, &[4, 5, 1, 1], -0.5, 0.5),
    ], |t, v| t.conv2d(&v[0], &v[1], None, 1, 0));
    case!("add", |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)],
        |t, v| t.add(&v[0], &v[1]));
    case!("sub", |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)],
        |t, v| t.sub(&v[0], &v[1]));
    case!("mul", |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)],
        |t, v| t.mul(&v[0], &v[1]));
    case!("scale", |r| vec![uniform(r, &[7], -1.0, 1.0)], |t, v| Ok(t.scale(&v[0], T::from_f64_lossy(-1.7))));
    case!("abs", |r| vec![away_from_zero(r, &[12])], |t, v| Ok(t.abs(&v[0])));
    case!("leaky_relu", |r| vec![away_from_zero(r, &[12])],
        |t, v| Ok(t.leaky_relu(&v[0], T::from_f64_lossy(0.1))));
    case!("gelu", |r| vec![uniform(r, &[12], -3.0, 3.0)], |t, v| Ok(t.gelu(&v[0])));
    case!("sigmoid", |r| vec![uniform(r, &[12], -4.0, 4.0)], |t, v| Ok(t.sigmoid(&v[0])));
    case!("sum", |r| vec![uniform(r, &[2, 3, 4], -1.0, 1.0)], |t, v| Ok(t.sum(&v[0])));
    case!("mean", |r| vec![uniform(r, &[2, 3, 4], -1.0, 1.0)], |t, v| t.mean(&v[0]));
    case!("mean_per_sample", |r| vec![uniform(r, &[3, 2, 4], -1.0, 1.0)], |t, v| t.mean_per_sample(&v[0]));
    case!("channel_unit_norm", |r| vec![away_from_zero(r, &[2, 4, 3, 2])],
        |t, v| t.channel_unit_norm(&v[0], T::from_f64_lossy(1e-10)));
    case!("layer_norm_channels", |r| vec![
        uniform(r, &[2, 5, 2, 3], -1.0, 1.0),
        uniform(r, &[5], 0.5, 1.5),
        uniform(r, &[5], -0.5, 0.5),
    ], |t, v| t.layer_norm_channels(&v[0], &v[1], &v[2], T::from_f64_lossy(1e-5)));
    case!("concat_channels", |r| vec![
        uniform(r, &[2, 2, 3], -1.0, 1.0),
        uniform(r, &[2, 3, 3], -1.0, 1.0),
    ], |t, v| t.concat_channels(&[&v[0], &v[1]]));
    case!("reshape", |r| vec![uniform(r, &[2, 6], -1.0, 1.0)], |t, v| t.reshape(&v[0], [3, 4]));
    case!("gather", |r| vec![uniform(r, &[10], -1.0, 1.0)], |t, v| {
        t.gather(&v[0], Rc::from(vec![3u32, 3, 9, 0, 1, 1, 1, 5]), [2, 4])
    });
    for (name, ta, tb) in [
        ("bmm", false, false),
        ("bmm a^T", true, false),
        ("bmm b^T", false, true),
        ("bmm a^T b^T", true, true),
    ] {
        out.push((
            name,
            Box::new(move |r: &mut ChaCha8Rng| {
                let a = if ta { [2, 4, 3] } else { [2, 3, 4] };
                let b = if tb { [2, 5, 4] } else { [2, 4, 5] };
                vec![uniform(r, &a, -1.0, 1.0), uniform(r, &b, -1.0, 1.0)]
            }),
            Box::new(move |t: &Tape<T>, v: &[Var<T>]| t.bmm(&v[0], &v[1], ta, tb)),
        ));
    }
    case!("softmax", |r| vec![uniform(r, &[3, 5], -2.0, 2.0)], |t, v| t.softmax(&v[0], None));
    case!("softmax masked", |r| vec![uniform(r, &[4, 3, 3], -2.0, 2.0)], |t, v| {
        let allowed = vec![
            true, false, true, false, true, false, true, false, true, //
            true, true, true, true, true, true, true, true, true,
        ];
        let mask = AttentionMask::new(2, 2, 3, allowed)?;
        t.softmax(&v[0], Some(Rc::new(mask)))
    });
    case!("bce", |r| vec![uniform(r, &[6], 0.1, 0.9)], |t, v| {
        let h: Vec<T> = [0.0, 1.0, 0.33, 0.66, 0.5, 1.0].iter().map(|&x| T::from_f64_lossy(x)).collect();
        t.bce(&v[0], &h)
    });
    for (name, shifted, h, w) in [
        ("window_attention", false, 8, 8),
        ("window_attention shifted", true, 8, 8),
        ("window_attention padded+shifted", true, 6, 7),
    ] {
        out.push((
            name,
            Box::new(move |r: &mut ChaCha8Rng| {
                vec![
                    uniform(r, &[1, 4, h, w], -1.0, 1.0),
                    uniform(r, &[12, 4, 1, 1], -0.6, 0.6),
                    uniform(r, &[12], -0.1, 0.1),
                    uniform(r, &[4, 4, 1, 1], -0.6, 0.6),
                    uniform(r, &[4], -0.1, 0.1),
                ]
            }),
            Box::new(move |t: &Tape<T>, v: &[Var<T>]| {
                let weights = AttentionWeights {
                    qkv_weight: &v[1],
                    qkv_bias: Some(&v[2]),
                    proj_weight: &v[3],
                    proj_bias: Some(&v[4]),
                };
                t.window_attention(&v[0], 4, 2, weights, shifted)
            }),
        ));
    }
    case!("conv -> attention -> mean", |r| vec![
        uniform(r, &[1, 3, 8, 8], -1.0, 1.0),
        uniform(r, &[4, 3, 3, 3], -0.4, 0.4),
        uniform(r, &[12, 4, 1, 1], -0.6, 0.6),
        uniform(r, &[4, 4, 1, 1], -0.6, 0.6),
    ], |t, v| {
        let h = t.conv2d(&v[0], &v[1], None, 1, 1)?;
        let weights = AttentionWeights { qkv_weight: &v[2], qkv_bias: None, proj_weight: &v[3], proj_bias: None };
        let a = t.window_attention(&h, 4, 2, weights, true)?;
        t.mean(&a)
    });
    out
}

/// Runs every op through `instances` randomized finite-difference checks.
pub fn run_grad_suite<T: Element>(instances: usize, seed: u64) -> Vec<GradCase> {
    let opts = GradCheckOptions::for_dtype::<T>();
    cases::<T>()
        .into_iter()
        .enumerate()
        .map(|(k, (name, sample, build))| {
            let mut r = rng(seed.wrapping_add(k as u64 * 1000));
            let worst = (0..instances)
                .map(|i| {
                    let inputs = sample(&mut r);
                    let opts = GradCheckOptions { seed: opts.seed + i as u64, ..opts };
                    check_gradients(&build, &inputs, opts)
                        .unwrap_or_else(|e| panic!("{name}: {e}"))
                        .worst()
                })
                .fold(0.0, f64::max);
            GradCase { name, instances, worst }
        })
        .collect()
}
