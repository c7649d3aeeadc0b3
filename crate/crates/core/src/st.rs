//! Per-level spatio-temporal comparison head.

use rand::Rng;
use vfiqa_tensor::{AttentionWeights, Element, Tape, Tensor, Var};

use crate::config::{ModelConfig, StConfig};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::pyramid::he_uniform;

pub const UNIT_NORM_EPS: f64 = 1e-10;
const LAYER_NORM_EPS: f64 = 1e-5;
const LINEAR_INIT_STD: f64 = 0.02;

pub(crate) fn level_prefix(level: usize) -> String {
    format!("st.l{level}")
}

fn linear_init<T: Element>(rng: &mut impl Rng, out: usize, inp: usize) -> Tensor<T> {
    let bound = LINEAR_INIT_STD * 3f64.sqrt();
    Tensor::from_fn([out, inp, 1, 1], |_| T::from_f64_lossy(rng.random_range(-bound..bound)))
}

pub fn init_params<T: Element>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<()> {
    let st = &cfg.st;
    let e = st.embed_dim;
    let hidden = e * st.mlp_ratio;
    for (level, &ch) in cfg.pyramid.channels.iter().enumerate() {
        let p = level_prefix(level);
        store.insert(format!("{p}.embed.weight"), he_uniform(rng, [e, 3 * cfg.frames * ch, 1, 1]))?;
        store.insert(format!("{p}.embed.bias"), Tensor::zeros([e]))?;
        for block in 0..st.blocks_per_level {
            let b = format!("{p}.block{block}");
            if st.use_layer_norm {
                for norm in ["norm1", "norm2"] {
                    store.insert(format!("{b}.{norm}.gamma"), Tensor::full([e], T::one()))?;
                    store.insert(format!("{b}.{norm}.beta"), Tensor::zeros([e]))?;
                }
            }
            store.insert(format!("{b}.attn.qkv.weight"), linear_init(rng, 3 * e, e))?;
            store.insert(format!("{b}.attn.qkv.bias"), Tensor::zeros([3 * e]))?;
            store.insert(format!("{b}.attn.proj.weight"), linear_init(rng, e, e))?;
            store.insert(format!("{b}.attn.proj.bias"), Tensor::zeros([e]))?;
            store.insert(format!("{b}.mlp.fc1.weight"), linear_init(rng, hidden, e))?;
            store.insert(format!("{b}.mlp.fc1.bias"), Tensor::zeros([hidden]))?;
            store.insert(format!("{b}.mlp.fc2.weight"), linear_init(rng, e, hidden))?;
            store.insert(format!("{b}.mlp.fc2.bias"), Tensor::zeros([e]))?;
        }
    }
    Ok(())
}

/// Channel-normalised features of a candidate and its reference, and the
/// absolute difference between them.
pub struct NormalizedDiff<T: Element> {
    pub diff: Var<T>,
    pub input: Var<T>,
    pub reference: Var<T>,
}

pub fn normalized_diff<T: Element>(tape: &Tape<T>, f: &Var<T>, f_ref: &Var<T>) -> Result<NormalizedDiff<T>> {
    if f.shape() != f_ref.shape() {
        return Err(Error::Shape(format!(
            "normalized_diff: {:?} vs {:?}",
            f.shape(),
            f_ref.shape()
        )));
    }
    let eps = T::from_f64_lossy(UNIT_NORM_EPS);
    let input = tape.channel_unit_norm(f, eps)?;
    let reference = tape.channel_unit_norm(f_ref, eps)?;
    let diff = tape.abs(&tape.sub(&input, &reference)?);
    Ok(NormalizedDiff { diff, input, reference })
}

/// Concatenates (diff, input, reference) along channels and projects to the
/// embedding width with a 1x1 convolution.
pub fn assemble_and_embed<T: Element>(
    tape: &Tape<T>,
    parts: &NormalizedDiff<T>,
    weight: &Var<T>,
    bias: &Var<T>,
) -> Result<Var<T>> {
    let s = parts.diff.shape();
    if parts.input.shape() != s || parts.reference.shape() != s {
        return Err(Error::Shape("assemble_and_embed: inputs differ in shape".into()));
    }
    let cat = tape.concat_channels(&[&parts.diff, &parts.input, &parts.reference])?;
    Ok(tape.conv2d(&cat, weight, Some(bias), 1, 0)?)
}

fn maybe_norm<T: Element>(tape: &Tape<T>, bound: &Bound<T>, prefix: &str, x: &Var<T>, on: bool) -> Result<Var<T>> {
    if !on {
        return Ok(x.clone());
    }
    let gamma = bound.var(&format!("{prefix}.gamma"))?;
    let beta = bound.var(&format!("{prefix}.beta"))?;
    Ok(tape.layer_norm_channels(x, gamma, beta, T::from_f64_lossy(LAYER_NORM_EPS))?)
}

/// The level's transformer blocks: windowed attention then a position-wise
/// MLP, each with a residual. Even-numbered blocks use regular windows and
/// odd-numbered ones shifted windows. LayerNorm appears only when
/// `cfg.use_layer_norm` is set.
pub fn swin_no_ln<T: Element>(tape: &Tape<T>, bound: &Bound<T>, prefix: &str, x: &Var<T>, cfg: &StConfig) -> Result<Var<T>> {
    if x.shape().get(1) != Some(&cfg.embed_dim) {
        return Err(Error::Shape(format!(
            "swin blocks expect {} channels, got {:?}",
            cfg.embed_dim,
            x.shape()
        )));
    }
    let mut x = x.clone();
    for block in 0..cfg.blocks_per_level {
        let b = format!("{prefix}.block{block}");
        let var = |name: &str| bound.var(&format!("{b}.{name}"));
        let weights = AttentionWeights {
            qkv_weight: var("attn.qkv.weight")?,
            qkv_bias: Some(var("attn.qkv.bias")?),
            proj_weight: var("attn.proj.weight")?,
            proj_bias: Some(var("attn.proj.bias")?),
        };
        let h = maybe_norm(tape, bound, &format!("{b}.norm1"), &x, cfg.use_layer_norm)?;
        let attn = tape.window_attention(&h, cfg.window, cfg.heads, weights, block % 2 == 1)?;
        x = tape.add(&x, &attn)?;

        let h = maybe_norm(tape, bound, &format!("{b}.norm2"), &x, cfg.use_layer_norm)?;
        let h = tape.conv2d(&h, var("mlp.fc1.weight")?, Some(var("mlp.fc1.bias")?), 1, 0)?;
        let h = tape.gelu(&h);
        let h = tape.conv2d(&h, var("mlp.fc2.weight")?, Some(var("mlp.fc2.bias")?), 1, 0)?;
        x = tape.add(&x, &h)?;
    }
    Ok(x)
}

/// Full comparison head for one level: features `[B, N*C, h, w]` of the
/// candidates and references to Swin output `[B, E, h, w]`.
pub fn level_head<T: Element>(
    tape: &Tape<T>,
    bound: &Bound<T>,
    level: usize,
    f: &Var<T>,
    f_ref: &Var<T>,
    cfg: &StConfig,
) -> Result<Var<T>> {
    let p = level_prefix(level);
    let parts = normalized_diff(tape, f, f_ref)?;
    let emb = assemble_and_embed(
        tape,
        &parts,
        bound.var(&format!("{p}.embed.weight"))?,
        bound.var(&format!("{p}.embed.bias"))?,
    )?;
    swin_no_ln(tape, bound, &p, &emb, cfg)
}

/// Per-sample distances `[B]` and the per-level means they average.
pub struct PooledDistance<T: Element> {
    pub d: Var<T>,
    pub per_level: Vec<Var<T>>,
}

/// Mean of every element at each level, then the plain mean across levels.
pub fn pool_distance<T: Element>(tape: &Tape<T>, per_level: &[Var<T>]) -> Result<PooledDistance<T>> {
    if per_level.is_empty() {
        return Err(Error::Shape("pool_distance needs at least one level".into()));
    }
    let means = per_level
        .iter()
        .map(|l| tape.mean_per_sample(l))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut total = means[0].clone();
    for m in &means[1..] {
        total = tape.add(&total, m)?;
    }
    let d = tape.scale(&total, T::one() / T::from_usize(means.len()).unwrap());
    Ok(PooledDistance { d, per_level: means })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_features_have_zero_difference() {
        let tape = Tape::<f32>::new();
        let f = tape.constant(Tensor::from_fn([1, 3, 2, 2], |i| i as f32 - 5.0));
        let nd = normalized_diff(&tape, &f, &f).unwrap();
        assert!(nd.diff.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalized_vectors_have_unit_length() {
        let tape = Tape::<f64>::new();
        let f = tape.constant(Tensor::from_fn([2, 4, 3, 3], |i| ((i * 7919) % 23) as f64 - 11.0));
        let g = tape.constant(Tensor::full([2, 4, 3, 3], 0.5));
        let nd = normalized_diff(&tape, &f, &g).unwrap();
        let x = nd.input.data();
        for b in 0..2 {
            for p in 0..9 {
                let n: f64 = (0..4).map(|c| x[b * 36 + c * 9 + p].powi(2)).sum();
                if (0..4).any(|c| f.data()[b * 36 + c * 9 + p] != 0.0) {
                    assert!((n.sqrt() - 1.0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn opposite_features_differ_by_twice_the_normalized_magnitude() {
        // two channels at one position: (3, 4) normalises to (0.6, 0.8)
        let tape = Tape::<f64>::new();
        let f = tape.constant(Tensor::new([1, 2, 1, 1], vec![3.0, 4.0]).unwrap());
        let r = tape.constant(Tensor::new([1, 2, 1, 1], vec![-3.0, -4.0]).unwrap());
        let nd = normalized_diff(&tape, &f, &r).unwrap();
        let l1: f64 = nd.diff.data().iter().sum();
        let expected = 2.0 * (3.0 / (5.0 + 1e-10) + 4.0 / (5.0 + 1e-10));
        assert!((l1 - expected).abs() < 1e-12);
        assert!((nd.diff.data()[0] - 1.2).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([1, 2, 2, 2]));
        let b = tape.constant(Tensor::zeros([1, 3, 2, 2]));
        assert!(normalized_diff(&tape, &a, &b).is_err());
    }

    #[test]
    fn pooling_averages_levels_equally() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::full([1, 2, 4, 4], 0.2));
        let b = tape.constant(Tensor::full([1, 5, 1, 1], 0.4));
        let pooled = pool_distance(&tape, &[a, b]).unwrap();
        assert!((pooled.d.item() - 0.3).abs() < 1e-15);
        let single = pool_distance(&tape, &[tape.constant(Tensor::full([1, 3, 2, 2], -1.5))]).unwrap();
        assert_eq!(single.d.item(), -1.5);
        assert!(pool_distance::<f64>(&tape, &[]).is_err());
    }
}
