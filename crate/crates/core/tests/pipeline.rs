use myoseg_core::infer::{argmax_labels, predict};
use myoseg_core::phantom::{generate, PhantomSpec};
use myoseg_core::train::{build_training_set, sample_batch, soft_dice_loss, train, AugmentationStrategy, TrainConfig, TrainingCase};
use myoseg_core::volume::{normalize_window, Geometry, Volume, NUM_CLASSES, WINDOW_HI, WINDOW_LO};
use myoseg_tensor::activation::{softmax_channels, softmax_channels_backward};
use myoseg_tensor::gradcheck::gradcheck;
use myoseg_tensor::model::{ArchConfig, Model};
use myoseg_tensor::{Mode, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_arch() -> ArchConfig {
    ArchConfig { base_channels: 2, num_res_blocks: 1, ..ArchConfig::default() }
}

fn phantom(seed: u64) -> myoseg_core::phantom::PhantomCase {
    generate(&PhantomSpec { dims: [32; 3], ..PhantomSpec::new(seed, 300.0) }, seed).unwrap()
}

#[test]
fn dice_gradient_through_softmax() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [2, 5, 2, 2, 3];
        let logits = Tensor::from_vec(&shape, (0..120).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let labels: Vec<u8> = (0..24).map(|_| rng.random_range(0..5)).collect();
        let p = softmax_channels(&logits).unwrap();
        let (_, gp) = soft_dice_loss(&p, &labels).unwrap();
        let g = softmax_channels_backward(&p, &gp).unwrap();
        let err = gradcheck(&[logits], &[g], |t| soft_dice_loss(&softmax_channels(&t[0]).unwrap(), &labels).unwrap().0, None);
        assert!(err < 1e-4, "seed {}: {}", seed, err);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dice_loss_is_bounded(logits in prop::collection::vec(-8.0f64..8.0, 4 * 8), labels in prop::collection::vec(0u8..4, 8)) {
        let p = softmax_channels(&Tensor::from_vec(&[1, 4, 2, 2, 2], logits).unwrap()).unwrap();
        let (loss, grad) = soft_dice_loss(&p, &labels).unwrap();
        prop_assert!((0.0..=4.0).contains(&loss));
        prop_assert!(grad.all_finite());
    }
}

#[test]
fn patch_sampling_is_uniform_over_cases_and_corners() {
    let g = Geometry::isotropic([6, 5, 4], 1.0).unwrap();
    let cases: Vec<TrainingCase> = (0..3)
        .map(|i| TrainingCase { image: Volume::filled(g, i as f32), labels: Volume::filled(g, 0) })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 12_000usize;
    let batch = sample_batch(&cases, 3, n, &mut rng).unwrap();
    // 3 cases, (4 * 3 * 2) corners each
    let cells = 3 * 4 * 3 * 2;
    let mut hist = vec![0usize; cells];
    for (i, &(c, k)) in batch.origins.iter().enumerate() {
        assert_eq!(batch.images.data()[i * 27], c as f32);
        hist[((c * 4 + k[0]) * 3 + k[1]) * 2 + k[2]] += 1;
    }
    let p = 1.0 / cells as f64;
    let (mean, sd) = (n as f64 * p, (n as f64 * p * (1.0 - p)).sqrt());
    for (cell, &h) in hist.iter().enumerate() {
        assert!((h as f64 - mean).abs() <= 3.0 * sd + 1.0, "cell {}: {} vs {:.1}", cell, h, mean);
    }
}

#[test]
fn augmented_copies_share_labels() {
    let base = vec![phantom(1), phantom(2)];
    for strategy in [AugmentationStrategy::global_default(), AugmentationStrategy::compartment_default()] {
        let set = build_training_set(&base, &strategy, 1.0).unwrap();
        assert_eq!(set.len(), 6);
        for c in 0..2 {
            for k in 1..3 {
                assert_eq!(set[c * 3].labels.voxels(), set[c * 3 + k].labels.voxels());
                assert_ne!(set[c * 3].image.voxels(), set[c * 3 + k].image.voxels());
            }
        }
    }
}

#[test]
fn training_is_deterministic_and_logs_every_step() {
    let set = build_training_set(&[phantom(3)], &AugmentationStrategy::None, 1.0).unwrap();
    let cfg = TrainConfig { iterations: 4, batch_size: 2, patch_size: 16, seed: 5, ..TrainConfig::default() };
    let mut log_a = Vec::new();
    let a = train(&set, &tiny_arch(), &cfg, "none", Some(&mut log_a)).unwrap();
    let mut log_b = Vec::new();
    let b = train(&set, &tiny_arch(), &cfg, "none", Some(&mut log_b)).unwrap();
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    assert_eq!(log_a, log_b);
    let text = String::from_utf8(log_a).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "iteration,lr,loss");
    assert_eq!(lines.len(), 5);
    assert!(a.losses.iter().all(|&l| l.is_finite() && l <= NUM_CLASSES as f64));
    assert_eq!(a.checkpoint.metadata["strategy"], "none");
}

#[test]
fn identity_geometry_prediction_equals_plain_forward() {
    let case = phantom(4);
    let set = build_training_set(std::slice::from_ref(&case), &AugmentationStrategy::None, 1.0).unwrap();
    let cfg = TrainConfig { iterations: 2, batch_size: 2, patch_size: 16, seed: 1, ..TrainConfig::default() };
    let model = train(&set, &tiny_arch(), &cfg, "none", None).unwrap().checkpoint.to_model().unwrap();
    let map = predict(&model, &case.image, 1.0).unwrap();
    let x = normalize_window(&case.image, WINDOW_LO, WINDOW_HI).unwrap();
    let direct = model.predict(&Tensor::from_vec(&[1, 1, 32, 32, 32], x.voxels().to_vec()).unwrap()).unwrap();
    let worst = map.data().iter().zip(direct.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(worst < 1e-6, "{}", worst);
    for i in (0..32 * 32 * 32).step_by(97) {
        assert!((map.voxel(i).iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }
    assert!(argmax_labels(&map).voxels().iter().all(|&l| (l as usize) < NUM_CLASSES));
}

#[test]
fn anisotropic_input_maps_back_to_its_own_grid() {
    let g = Geometry::new([10, 9, 7], [0.8, 1.1, 1.7], [0.0; 3]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = Volume::new(g, (0..g.len()).map(|_| rng.random_range(-200.0..600.0)).collect()).unwrap();
    let mut model = Model::<f32>::build(&tiny_arch(), 2).unwrap();
    model.forward(&Tensor::from_vec(&[1, 1, 8, 8, 8], (0..512).map(|_| rng.random_range(0.1..0.4)).collect()).unwrap(), Mode::Training).unwrap();
    let map = predict(&model, &img, 1.0).unwrap();
    assert_eq!(map.geometry(), &g);
    for i in 0..g.len() {
        assert!((map.voxel(i).iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }
}
