mod support;

use proptest::prelude::*;
use support::{attention_weights, rng, uniform, DenseAttention};
use vfiqa_tensor::{Tape, Tensor};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn conv2d_is_linear(seed in 0u64..10_000, a in -2.0f64..2.0, b in -2.0f64..2.0, stride in 1usize..3) {
        let mut r = rng(seed);
        let x: Tensor<f32> = uniform(&mut r, &[2, 3, 7, 5], -1.0, 1.0);
        let y: Tensor<f32> = uniform(&mut r, &[2, 3, 7, 5], -1.0, 1.0);
        let w: Tensor<f32> = uniform(&mut r, &[4, 3, 3, 3], -0.5, 0.5);
        let tape = Tape::<f32>::new();
        let wv = tape.constant(w);
        let conv = |t: Tensor<f32>| tape.conv2d(&tape.constant(t), &wv, None, stride, 1).unwrap();
        let combo = Tensor::from_fn(x.shape().to_vec(), |i| a as f32 * x.data()[i] + b as f32 * y.data()[i]);
        let lhs = conv(combo);
        let (cx, cy) = (conv(x), conv(y));
        for i in 0..lhs.data().len() {
            let rhs = a as f32 * cx.data()[i] + b as f32 * cy.data()[i];
            prop_assert!((lhs.data()[i] - rhs).abs() < 1e-5, "{} vs {}", lhs.data()[i], rhs);
        }
    }

    #[test]
    fn window_attention_is_deterministic(seed in 0u64..10_000, shifted: bool) {
        let mut r = rng(seed);
        let dense = DenseAttention::random(&mut r, 8, 2, 4);
        let x: Tensor<f32> = uniform(&mut r, &[1, 8, 9, 8], -1.0, 1.0);
        let run = || {
            let tape = Tape::<f32>::new();
            let w = dense.vars(&tape);
            let y = tape.window_attention(&tape.constant(x.clone()), 4, 2, attention_weights(&w), shifted).unwrap();
            y.value().clone()
        };
        let (a, b) = (run(), run());
        prop_assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        prop_assert!(a.is_finite());
    }

    #[test]
    fn shifted_equals_unshifted_on_constant_maps(seed in 0u64..10_000, h in 5usize..13, w in 5usize..13) {
        let mut r = rng(seed);
        let dense = DenseAttention::random(&mut r, 4, 2, 4);
        let levels: Vec<f64> = (0..4).map(|_| rand::Rng::random_range(&mut r, -1.0..1.0)).collect();
        let x = Tensor::from_fn([1, 4, h, w], |i| levels[i / (h * w)]);
        let tape = Tape::<f64>::new();
        let wv = dense.vars(&tape);
        let xv = tape.constant(x);
        let plain = tape.window_attention(&xv, 4, 2, attention_weights(&wv), false).unwrap();
        let shifted = tape.window_attention(&xv, 4, 2, attention_weights(&wv), true).unwrap();
        prop_assert!(plain.value().max_abs_diff(shifted.value()) < 1e-12);
    }
}

#[test]
fn backward_visits_shared_nodes_once() {
    // y = x*x + x: the leaf feeds three paths and must accumulate all of them
    let tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::new([2], vec![1.5, -2.0]).unwrap().with_requires_grad(true));
    let sq = tape.mul(&x, &x).unwrap();
    let y = tape.add(&sq, &x).unwrap();
    let loss = tape.sum(&y);
    let grads = tape.backward(&loss).unwrap();
    assert_eq!(grads.get(&x).unwrap(), &[4.0, -3.0]);
}

#[test]
fn detached_graph_records_nothing() {
    let tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::full([4], 1.0));
    let _ = tape.gelu(&tape.scale(&x, 2.0));
    assert!(tape.is_empty());
}
