mod common;

use mlrn::autodiff::{grad_check, stable_sigmoid, NormMode, RunningStats, Tape, Var};
use mlrn::model::{ForwardOptions, Model, ModelConfig};
use mlrn::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn conv_on_tape(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let mut tape = Tape::new();
    let (x, k, b) = (tape.leaf(x.clone(), false), tape.leaf(k.clone(), false), tape.leaf(b.clone(), false));
    let y = tape.conv2d(x, k, b, stride, pad).unwrap();
    tape.value(y).clone()
}

/// Geometry with an integral output size: pick the output, derive the input.
fn geometry() -> impl Strategy<Value = ([usize; 4], [usize; 4], usize, usize)> {
    (1usize..3, 1usize..4, 1usize..4, 1usize..4, 1usize..3, 0usize..2, 1usize..4, 1usize..4).prop_filter_map(
        "input must be positive",
        |(n, ci, co, k, stride, pad, oh, ow)| {
            let h = ((oh - 1) * stride + k).checked_sub(2 * pad)?;
            let w = ((ow - 1) * stride + k).checked_sub(2 * pad)?;
            (h >= 1 && w >= 1 && pad < k).then_some(([n, ci, h, w], [co, ci, k, k], stride, pad))
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_nested_loops((xs, ks, stride, pad) in geometry(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, k, b) = (random(&mut rng, &xs), random(&mut rng, &ks), random(&mut rng, &[ks[0]]));
        let got = conv_on_tape(&x, &k, &b, stride, pad);
        let (want, shape) = common::conv2d(x.data(), xs, k.data(), ks, b.data(), stride, pad);
        prop_assert_eq!(got.shape(), &shape[..]);
        for (g, w) in got.data().iter().zip(&want) {
            prop_assert!((g - w).abs() <= 1e-12, "{} vs {}", g, w);
        }
    }

    #[test]
    fn conv_is_linear_in_input((xs, ks, stride, pad) in geometry(), a in -2.0f64..2.0, c in -2.0f64..2.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y, k) = (random(&mut rng, &xs), random(&mut rng, &xs), random(&mut rng, &ks));
        let zero = Tensor::zeros(&[ks[0]]);
        let mix = Tensor::new(xs.to_vec(), x.data().iter().zip(y.data()).map(|(p, q)| a * p + c * q).collect()).unwrap();
        let lhs = conv_on_tape(&mix, &k, &zero, stride, pad);
        let (fx, fy) = (conv_on_tape(&x, &k, &zero, stride, pad), conv_on_tape(&y, &k, &zero, stride, pad));
        for ((l, p), q) in lhs.data().iter().zip(fx.data()).zip(fy.data()) {
            prop_assert!((l - (a * p + c * q)).abs() <= 1e-10);
        }
    }

    #[test]
    fn sigmoid_is_point_symmetric(z in -40.0f64..40.0) {
        prop_assert!((stable_sigmoid(-z) - (1.0 - stable_sigmoid(z))).abs() <= 1e-15);
        let s = stable_sigmoid(z);
        prop_assert!(s > 0.0 && s < 1.0);
    }

    #[test]
    fn dense_matches_loops(n in 1usize..4, d in 1usize..6, o in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, w, b) = (random(&mut rng, &[n, d]), random(&mut rng, &[o, d]), random(&mut rng, &[o]));
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.leaf(x.clone(), false), tape.leaf(w.clone(), false), tape.leaf(b.clone(), false));
        let y = tape.dense(xv, wv, bv).unwrap();
        let want = common::dense(x.data(), n, d, w.data(), o, b.data());
        for (g, w) in tape.value(y).data().iter().zip(&want) {
            prop_assert!((g - w).abs() <= 1e-12);
        }
    }

    #[test]
    fn bce_matches_textbook_formula(rows in 1usize..4, cols in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-8.0..8.0)).collect();
        let y: Vec<f64> = (0..rows * cols).map(|_| f64::from(rng.random_range(0..2u8))).collect();
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::new(vec![rows, cols], z.clone()).unwrap(), false);
        let loss = tape.bce_loss(logits, &Tensor::new(vec![rows, cols], y.clone()).unwrap()).unwrap();
        let got = tape.value(loss).item().unwrap();
        prop_assert!((got - common::bce(&z, &y, rows)).abs() <= 1e-9);
    }
}

fn bce_of(logits: &[f64], targets: &[f64], shape: [usize; 2]) -> f64 {
    let mut tape = Tape::new();
    let z = tape.leaf(Tensor::new(shape.to_vec(), logits.to_vec()).unwrap(), false);
    let loss = tape.bce_loss(z, &Tensor::new(shape.to_vec(), targets.to_vec()).unwrap()).unwrap();
    tape.value(loss).item().unwrap()
}

#[test]
fn bce_zero_logits_is_ln2_per_class() {
    for targets in [[0.0], [1.0]] {
        assert!((bce_of(&[0.0], &targets, [1, 1]) - std::f64::consts::LN_2).abs() <= 1e-12);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t: Vec<f64> = (0..12).map(|_| f64::from(rng.random_range(0..2u8))).collect();
    // summed over 3 classes, averaged over 4 rows
    assert!((bce_of(&[0.0; 12], &t, [4, 3]) - 3.0 * std::f64::consts::LN_2).abs() <= 1e-12);
}

#[test]
fn bce_saturated_matches_are_near_zero() {
    let loss = bce_of(&[40.0, -40.0, 60.0, -60.0], &[1.0, 0.0, 1.0, 0.0], [2, 2]);
    assert!(loss < 1e-10 && loss >= 0.0, "{loss}");
}

#[test]
fn bce_extreme_logits_stay_finite() {
    let loss = bce_of(&[1e4, -1e4], &[0.0, 1.0], [1, 2]);
    assert!((loss - 2e4).abs() <= 1e-6, "{loss}");
}

#[test]
fn gradient_of_sum_of_products_is_linear() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
    let b = tape.leaf(Tensor::new(vec![3], vec![-1.0, 0.5, 4.0]).unwrap(), true);
    let p = tape.mul(a, b).unwrap();
    let s = tape.sum(p);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(a).unwrap(), &[-1.0, 0.5, 4.0]);
    assert_eq!(tape.grad(b).unwrap(), &[1.0, 2.0, 3.0]);
}

pub fn micro_config() -> ModelConfig {
    ModelConfig {
        input_size: (8, 8),
        stage_channels: vec![4, 8, 8],
        blocks_per_stage: 1,
        num_classes: 3,
        seed: 11,
        ..Default::default()
    }
}

/// Moves batch norm off its initial values: zero gains sit every residual sum exactly
/// on a relu kink, and identity statistics make frozen norm a no-op.
fn perturb_norms(model: &mut Model, rng: &mut ChaCha8Rng) {
    for layer in model.norm_layers_mut() {
        let c = layer.running.mean.len();
        layer.scale.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
        layer.shift.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
        layer.running = RunningStats {
            mean: (0..c).map(|_| rng.random_range(-0.2..0.2)).collect(),
            var: (0..c).map(|_| rng.random_range(0.5..2.0)).collect(),
        };
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut model = Model::build(micro_config()).unwrap();
    perturb_norms(&mut model, &mut rng);
    let image = random(&mut rng, &[2, 3, 8, 8]);
    let targets = Tensor::new(vec![2, 3], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();

    let mut inputs = vec![image];
    inputs.extend(model.parameters().into_iter().map(|(_, t)| t.clone()));
    let report = grad_check(
        |tape: &mut Tape, vars: &[Var]| {
            let (logits, _) = model.record_with(tape, &vars[1..], vars[0], ForwardOptions::frozen())?;
            tape.bce_loss(logits, &targets)
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-4, "{report:?}");
    assert_eq!(report.coordinates, inputs.iter().map(Tensor::numel).sum::<usize>());
}

#[test]
fn train_mode_norm_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let config = ModelConfig {
        stage_channels: vec![3, 4],
        ..micro_config()
    };
    let mut model = Model::build(config).unwrap();
    perturb_norms(&mut model, &mut rng);
    let image = random(&mut rng, &[3, 3, 8, 8]);
    let targets = Tensor::new(vec![3, 3], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0]).unwrap();
    let mut inputs = vec![image];
    inputs.extend(model.parameters().into_iter().map(|(_, t)| t.clone()));
    let options = ForwardOptions {
        norm_mode: NormMode::Train,
        drop_skip: None,
    };
    let report = grad_check(
        |tape: &mut Tape, vars: &[Var]| {
            let (logits, _) = model.record_with(tape, &vars[1..], vars[0], options)?;
            tape.bce_loss(logits, &targets)
        },
        &inputs,
        // batch statistics amplify curvature near relu kinks; a smaller step avoids straddling them
        1e-6,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}
