mod common;

use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rotorlab::neural::{deserialize, serialize, Activation, AdamHyper, AdamState, MlpModel, Squash};

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

/// `L = Σ c ⊙ f(x)`, so `dL/df = c`.
fn weighted_loss(model: &MlpModel, x: &Array2<f64>, c: &Array2<f64>) -> f64 {
    (&model.forward(x.view()).unwrap() * c).sum()
}

fn max_relative_gradient_error(activation: Activation, squash: Squash, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let acts = [activation, activation, Activation::Linear];
    let mut model = MlpModel::new(&[5, 7, 6, 3], &acts, squash, seed).unwrap();
    let x = random_matrix(&mut rng, 4, 5, 1.0);
    let c = random_matrix(&mut rng, 4, 3, 1.0);
    let cache = model.forward_cached(x.view()).unwrap();
    let analytic = model.backward(&cache, c.view()).unwrap();

    let h = 1e-6;
    let mut worst = 0.0f64;
    for k in 0..model.num_params() {
        let orig = model.params()[k];
        model.params_mut()[k] = orig + h;
        let up = weighted_loss(&model, &x, &c);
        model.params_mut()[k] = orig - h;
        let down = weighted_loss(&model, &x, &c);
        model.params_mut()[k] = orig;
        let numeric = (up - down) / (2.0 * h);
        let scale = analytic[k].abs().max(numeric.abs()).max(1e-3);
        worst = worst.max((analytic[k] - numeric).abs() / scale);
    }
    worst
}

#[test]
fn finite_difference_gradients_for_every_activation_and_squash() {
    for activation in [Activation::Tanh, Activation::LeakyRelu, Activation::Linear] {
        for squash in [Squash::None, Squash::Tanh] {
            for seed in 0..3 {
                let err = max_relative_gradient_error(activation, squash, seed);
                assert!(err <= 1e-5, "{activation:?}/{squash:?} seed {seed}: relative error {err:e}");
            }
        }
    }
}

#[test]
fn system_architectures_pass_gradient_check() {
    // Actor, critic, and both allocation nets.
    let cases: [(&[usize], &[Activation], Squash); 4] = [
        (&[15, 32, 24, 6], &[Activation::Tanh, Activation::Tanh, Activation::Linear], Squash::Tanh),
        (&[15, 32, 24, 1], &[Activation::Tanh, Activation::Tanh, Activation::Linear], Squash::None),
        (&[6, 32, 4], &[Activation::Linear, Activation::Linear], Squash::None),
        (
            &[6, 100, 100, 100, 6],
            &[Activation::LeakyRelu, Activation::LeakyRelu, Activation::LeakyRelu, Activation::Linear],
            Squash::None,
        ),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (sizes, acts, squash) in cases {
        let mut model = MlpModel::new(sizes, acts, squash, 3).unwrap();
        let x = random_matrix(&mut rng, 3, sizes[0], 1.0);
        let c = random_matrix(&mut rng, 3, *sizes.last().unwrap(), 1.0);
        let analytic = model.backward(&model.forward_cached(x.view()).unwrap(), c.view()).unwrap();
        let h = 1e-6;
        // Every parameter of the small nets, a strided subset of the large one.
        let stride = (model.num_params() / 400).max(1);
        for k in (0..model.num_params()).step_by(stride) {
            let orig = model.params()[k];
            model.params_mut()[k] = orig + h;
            let up = weighted_loss(&model, &x, &c);
            model.params_mut()[k] = orig - h;
            let down = weighted_loss(&model, &x, &c);
            model.params_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let scale = analytic[k].abs().max(numeric.abs()).max(1e-3);
            assert!((analytic[k] - numeric).abs() / scale <= 1e-5, "{sizes:?} param {k}: {} vs {numeric}", analytic[k]);
        }
    }
}

#[test]
fn initialization_is_seeded() {
    let acts = [Activation::Tanh, Activation::Linear];
    let a = MlpModel::new(&[4, 8, 2], &acts, Squash::None, 5).unwrap();
    let b = MlpModel::new(&[4, 8, 2], &acts, Squash::None, 5).unwrap();
    let c = MlpModel::new(&[4, 8, 2], &acts, Squash::None, 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.params(), c.params());
    let (w, _) = a.layer(0);
    let bound = (1.0f64 / 4.0).sqrt();
    assert!(w.iter().all(|x| x.abs() <= bound));
}

#[test]
fn adam_round_trip_mid_training_is_bit_exact() {
    let acts = [Activation::Tanh, Activation::Tanh, Activation::Linear];
    let mut model = MlpModel::new(&[3, 6, 6, 2], &acts, Squash::Tanh, 1).unwrap();
    let mut adam = AdamState::new(model.num_params(), AdamHyper::with_lr(1e-2));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batches: Vec<(Array2<f64>, Array2<f64>)> =
        (0..6).map(|_| (random_matrix(&mut rng, 8, 3, 1.0), random_matrix(&mut rng, 8, 2, 1.0))).collect();
    let train = |model: &mut MlpModel, adam: &mut AdamState, range: std::ops::Range<usize>| {
        for (x, c) in &batches[range] {
            let g = model.backward(&model.forward_cached(x.view()).unwrap(), c.view()).unwrap();
            adam.step(model.params_mut(), &g).unwrap();
        }
    };
    let mut straight = (model.clone(), adam.clone());
    train(&mut straight.0, &mut straight.1, 0..6);

    train(&mut model, &mut adam, 0..3);
    let (mut resumed, resumed_adam) = deserialize(&serialize(&model, Some(&adam))).unwrap();
    let mut resumed_adam = resumed_adam.unwrap();
    assert_eq!(resumed, model);
    assert_eq!(resumed_adam, adam);
    train(&mut resumed, &mut resumed_adam, 3..6);
    assert_eq!(resumed.params(), straight.0.params());
    assert_eq!(resumed_adam, straight.1);
}

proptest! {
    #![proptest_config(common::proptest_config(64))]

    #[test]
    fn forward_is_batch_invariant(seed in 0u64..10_000, rows in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let acts = [Activation::LeakyRelu, Activation::Tanh, Activation::Linear];
        let model = MlpModel::new(&[4, 9, 5, 3], &acts, Squash::Tanh, seed).unwrap();
        let x = random_matrix(&mut rng, rows, 4, 2.0);
        let batch = model.forward(x.view()).unwrap();
        for i in 0..rows {
            let single = model.forward(x.slice(ndarray::s![i..i + 1, ..])).unwrap();
            for j in 0..3 {
                prop_assert!((batch[(i, j)] - single[(0, j)]).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn serialization_round_trip_is_bit_exact(seed in 0u64..10_000, steps in 0usize..4) {
        let acts = [Activation::Tanh, Activation::Linear];
        let mut model = MlpModel::new(&[3, 5, 2], &acts, Squash::None, seed).unwrap();
        let mut adam = AdamState::new(model.num_params(), AdamHyper::with_lr(1e-3));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..steps {
            let g: Vec<f64> = (0..model.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
            adam.step(model.params_mut(), &g).unwrap();
        }
        let bytes = serialize(&model, Some(&adam));
        let (m2, a2) = deserialize(&bytes).unwrap();
        prop_assert_eq!(&m2, &model);
        prop_assert_eq!(a2.as_ref(), Some(&adam));
        prop_assert_eq!(serialize(&m2, a2.as_ref()), bytes);
    }
}
