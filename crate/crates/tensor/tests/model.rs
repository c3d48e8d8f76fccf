use myoseg_tensor::activation::softmax_channels;
use myoseg_tensor::batchnorm::{batchnorm, BnParams, RunningStats};
use myoseg_tensor::checkpoint::Checkpoint;
use myoseg_tensor::model::{ArchConfig, Model};
use myoseg_tensor::{Mode, Tensor, TensorError};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_arch() -> ArchConfig {
    ArchConfig { base_channels: 2, num_res_blocks: 1, num_classes: 3, ..ArchConfig::default() }
}

fn uniform_input(seed: u64, n: usize, side: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = n * side * side * side;
    Tensor::from_vec(&[n, 1, side, side, side], (0..len).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn channel_sums_ok(p: &Tensor<f32>, tol: f32) -> bool {
    let [n, c, d, h, w] = p.dims5().unwrap();
    let s = d * h * w;
    (0..n).all(|b| (0..s).all(|i| ((0..c).map(|ch| p.data()[(b * c + ch) * s + i]).sum::<f32>() - 1.0).abs() <= tol))
}

#[test]
fn default_arch_shape_contract() {
    let mut m = Model::<f32>::build(&ArchConfig::default(), 1).unwrap();
    let p = m.forward(&uniform_input(0, 1, 32), Mode::Training).unwrap();
    assert_eq!(p.shape(), &[1, 8, 32, 32, 32]);
    assert!(channel_sums_ok(&p, 1e-5));
    assert!(p.all_finite());
}

#[test]
fn parameter_count_matches_layer_formula() {
    let (b, blocks, c, k3) = (16usize, 6usize, 8usize, 27usize);
    let conv = |i: usize, o: usize, k: usize| o * i * k + o;
    let bn = |ch: usize| 2 * ch;
    let expected = conv(1, b, k3)
        + bn(b)
        + conv(b, 2 * b, k3)
        + bn(2 * b)
        + conv(2 * b, 4 * b, k3)
        + bn(4 * b)
        + blocks * 2 * (conv(4 * b, 4 * b, k3) + bn(4 * b))
        + conv(4 * b, 2 * b, k3)
        + bn(2 * b)
        + conv(2 * b, b, k3)
        + bn(b)
        + conv(b, c, 1);
    let m = Model::<f32>::build(&ArchConfig::default(), 0).unwrap();
    assert_eq!(m.num_parameters(), expected);
    assert_eq!(m.params().iter().map(|(_, p)| p.value.len()).sum::<usize>(), expected);
}

#[test]
fn build_is_deterministic() {
    let a = Model::<f32>::build(&small_arch(), 42).unwrap();
    assert_eq!(a, Model::<f32>::build(&small_arch(), 42).unwrap());
    assert_ne!(a, Model::<f32>::build(&small_arch(), 43).unwrap());
    assert!(a.head.bias.value.data().iter().all(|&v| v == 0.0));
    assert!(a.stem.bn.scale.value.data().iter().all(|&v| v == 1.0));
}

#[test]
fn inference_before_training_is_an_error() {
    let m = Model::<f32>::build(&small_arch(), 0).unwrap();
    assert!(matches!(m.predict(&uniform_input(0, 1, 8)), Err(TensorError::UntrainedBatchNorm(_))));
}

#[test]
fn inference_is_repeatable_and_normalized() {
    let mut m = Model::<f32>::build(&small_arch(), 3).unwrap();
    m.forward(&uniform_input(1, 2, 8), Mode::Training).unwrap();
    let x = uniform_input(2, 1, 12);
    let a = m.forward(&x, Mode::Inference).unwrap();
    let b = m.forward(&x, Mode::Inference).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.shape(), &[1, 3, 12, 12, 12]);
    assert!(channel_sums_ok(&a, 1e-5));
}

#[test]
fn non_divisible_inputs_are_rejected() {
    let mut m = Model::<f32>::build(&small_arch(), 0).unwrap();
    let x = Tensor::zeros(&[1, 1, 8, 8, 6]);
    assert!(m.forward(&x, Mode::Training).is_err());
    assert!(m.forward(&Tensor::zeros(&[1, 2, 8, 8, 8]), Mode::Training).is_err());
}

#[test]
fn constant_input_gives_near_uniform_finite_maps() {
    // zero matches the zero padding, so every batch norm sees zero variance
    let mut m = Model::<f32>::build(&ArchConfig::default(), 5).unwrap();
    let p = m.forward(&Tensor::zeros(&[2, 1, 16, 16, 16]), Mode::Training).unwrap();
    assert!(p.all_finite());
    let s = 16 * 16 * 16;
    for plane in p.data().chunks(s) {
        let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / s as f64;
        let var = plane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / s as f64;
        assert!(var < 1e-12, "spatial variance {}", var);
        assert!((mean - 0.125).abs() < 1e-6, "mean {}", mean);
    }
    // other constants only differ near the padded faces; outputs stay finite
    let p = m.forward(&Tensor::full(&[1, 1, 16, 16, 16], 0.3), Mode::Training).unwrap();
    assert!(p.all_finite());
    assert!(channel_sums_ok(&p, 1e-5));
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let mut m = Model::<f32>::build(&small_arch(), 8).unwrap();
    m.forward(&uniform_input(3, 2, 8), Mode::Training).unwrap();
    let ck = Checkpoint::from_model(&m, Default::default());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ck.write(&path).unwrap();
    let back = Checkpoint::read(&path).unwrap().to_model().unwrap();
    let x = uniform_input(4, 1, 8);
    assert_eq!(m.predict(&x).unwrap(), back.predict(&x).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_outputs_are_distributions(vals in prop::collection::vec(-30.0f64..30.0, 5 * 8)) {
        let x = Tensor::from_vec(&[1, 5, 2, 2, 2], vals).unwrap();
        let p = softmax_channels(&x).unwrap();
        for i in 0..8 {
            let s: f64 = (0..5).map(|c| p.data()[c * 8 + i]).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
        prop_assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn batchnorm_standardizes_each_channel(
        vals in prop::collection::vec(-5.0f64..5.0, 2 * 3 * 27),
        spread in 0.5f64..20.0,
    ) {
        let x = Tensor::from_vec(&[2, 3, 3, 3, 3], vals.iter().map(|v| v * spread).collect()).unwrap();
        let mut rs = RunningStats::new(3);
        let (y, _) = batchnorm(&x, &Tensor::full(&[3], 1.0), &Tensor::zeros(&[3]), &mut rs, Mode::Training,
            BnParams { eps: 1e-5, momentum: 0.9 }).unwrap();
        for c in 0..3 {
            let v: Vec<f64> = (0..2).flat_map(|b| y.data()[(b * 3 + c) * 27..(b * 3 + c + 1) * 27].to_vec()).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
            prop_assert!(mean.abs() < 1e-6);
            prop_assert!((var - 1.0).abs() < 1e-4, "variance {}", var);
        }
        prop_assert!(rs.var.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn forward_keeps_shape_and_finiteness(side in prop::sample::select(vec![4usize, 8, 12]), seed in 0u64..1000) {
        let mut m = Model::<f32>::build(&small_arch(), seed).unwrap();
        let p = m.forward(&uniform_input(seed, 1, side), Mode::Training).unwrap();
        prop_assert_eq!(p.shape(), &[1, 3, side, side, side]);
        prop_assert!(p.all_finite());
        prop_assert!(channel_sums_ok(&p, 1e-5));
    }
}
