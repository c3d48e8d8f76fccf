//! Dataset expansion, patch sampling, soft Dice loss, Adam and the training
//! loop.

use std::collections::BTreeMap;
use std::io::Write;

use myoseg_tensor::checkpoint::Checkpoint;
use myoseg_tensor::model::{ArchConfig, Model, Param};
use myoseg_tensor::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{invalid, CoreError, Result};
use crate::phantom::{contrast_variant, generate, PhantomCase};
use crate::volume::{
    normalize_window, resample_nearest, resample_trilinear, scale_hu, LabelVolume, NormalizedVolume, Volume3D,
    NUM_CLASSES, WINDOW_HI, WINDOW_LO,
};

/// Smoothing term in the soft Dice numerator and denominator.
pub const DICE_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub initial_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Isotropic spacing (mm) the network operates at.
    pub target_spacing: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            batch_size: 4,
            patch_size: 32,
            initial_lr: 0.001,
            lr_decay_factor: 0.3,
            lr_decay_every: 1000,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            target_spacing: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 || self.patch_size == 0 || self.lr_decay_every == 0 {
            return invalid("iterations, batch_size, patch_size and lr_decay_every must be > 0");
        }
        if !self.patch_size.is_multiple_of(4) {
            return invalid(format!("patch_size must be divisible by 4, got {}", self.patch_size));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return invalid(format!("lr_decay_factor must lie in (0, 1), got {}", self.lr_decay_factor));
        }
        if !(self.initial_lr > 0.0) || !(self.target_spacing > 0.0) {
            return invalid("initial_lr and target_spacing must be > 0");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return invalid("Adam betas must lie in [0, 1) and eps must be > 0");
        }
        Ok(())
    }

    /// Canonical text form, used for the checkpoint digest.
    pub fn canonical(&self) -> String {
        format!(
            "iterations={}\nbatch_size={}\npatch_size={}\ninitial_lr={}\nlr_decay_factor={}\nlr_decay_every={}\nadam_beta1={}\nadam_beta2={}\nadam_eps={}\nseed={}\ntarget_spacing={}\n",
            self.iterations,
            self.batch_size,
            self.patch_size,
            self.initial_lr,
            self.lr_decay_factor,
            self.lr_decay_every,
            self.adam_beta1,
            self.adam_beta2,
            self.adam_eps,
            self.seed,
            self.target_spacing
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AugmentationStrategy {
    None,
    /// Scale raw HU by each factor before windowing.
    GlobalScale(Vec<f64>),
    /// Regenerate the phantom with each compartment factor.
    CompartmentVariants(Vec<f64>),
}

impl AugmentationStrategy {
    pub fn global_default() -> Self {
        Self::GlobalScale(vec![0.5, 2.0])
    }

    pub fn compartment_default() -> Self {
        Self::CompartmentVariants(vec![1.5, 0.8])
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::GlobalScale(_) => "global",
            Self::CompartmentVariants(_) => "compartment",
        }
    }

    pub fn factors(&self) -> &[f64] {
        match self {
            Self::None => &[],
            Self::GlobalScale(f) | Self::CompartmentVariants(f) => f,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.factors().iter().find(|f| !(**f > 0.0) || !f.is_finite()) {
            Some(f) => invalid(format!("augmentation factors must be > 0, got {}", f)),
            None => Ok(()),
        }
    }
}

/// A preprocessed (resampled and windowed) image with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingCase {
    pub image: NormalizedVolume,
    pub labels: LabelVolume,
}

fn window(image: &Volume3D, spacing: f64) -> Result<NormalizedVolume> {
    normalize_window(&resample_trilinear(image, [spacing; 3])?, WINDOW_LO, WINDOW_HI)
}

/// Resamples both volumes to `spacing` and windows the image.
pub fn preprocess(image: &Volume3D, labels: &LabelVolume, spacing: f64) -> Result<TrainingCase> {
    image.geometry().ensure_same(labels.geometry(), "image vs labels")?;
    Ok(TrainingCase { image: window(image, spacing)?, labels: resample_nearest(labels, [spacing; 3])? })
}

/// Base cases plus one augmented copy per case and factor, in case-major
/// order. Augmented copies share the base case's label buffer.
pub fn build_training_set(
    base: &[PhantomCase],
    strategy: &AugmentationStrategy,
    target_spacing: f64,
) -> Result<Vec<TrainingCase>> {
    strategy.validate()?;
    let mut out = Vec::with_capacity(base.len() * (1 + strategy.factors().len()));
    for case in base {
        let first = preprocess(&case.image, &case.labels, target_spacing)?;
        let labels = first.labels.clone();
        out.push(first);
        for &f in strategy.factors() {
            let image = match strategy {
                AugmentationStrategy::None => unreachable!("no factors"),
                AugmentationStrategy::GlobalScale(_) => scale_hu(&case.image, f)?,
                AugmentationStrategy::CompartmentVariants(_) => {
                    let spec = contrast_variant(&case.spec, case.spec.compartment_factor * f)?;
                    generate(&spec, case.noise_seed)?.image
                }
            };
            out.push(TrainingCase { image: window(&image, target_spacing)?, labels: labels.clone() });
        }
    }
    Ok(out)
}

/// Image patches `(n, 1, p, p, p)` and matching labels (same voxel order).
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<u8>,
    /// `(case index, corner)` per sample.
    pub origins: Vec<(usize, [usize; 3])>,
}

/// Uniform case, then uniform corner such that the cube fits.
pub fn sample_patch(cases: &[TrainingCase], patch_size: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
    sample_batch(cases, patch_size, 1, rng)
}

pub fn sample_batch(cases: &[TrainingCase], patch_size: usize, batch: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
    if cases.is_empty() {
        return invalid("no training cases");
    }
    let p = patch_size;
    let per = p * p * p;
    let mut images = Vec::with_capacity(batch * per);
    let mut labels = Vec::with_capacity(batch * per);
    let mut origins = Vec::with_capacity(batch);
    for _ in 0..batch {
        let ci = rng.random_range(0..cases.len());
        let case = &cases[ci];
        let dims = case.image.dims();
        if dims.iter().any(|&d| d < p) {
            return invalid(format!("case {} with dims {:?} is smaller than patch {}", ci, dims, p));
        }
        let corner: [usize; 3] = std::array::from_fn(|a| rng.random_range(0..=dims[a] - p));
        images.extend(case.image.crop(corner, [p; 3])?.into_voxels());
        labels.extend(case.labels.crop(corner, [p; 3])?.into_voxels());
        origins.push((ci, corner));
    }
    Ok(Batch { images: Tensor::from_vec(&[batch, 1, p, p, p], images)?, labels, origins })
}

/// Multi-class soft Dice loss `C - Σ_c D_c` with sums over the whole batch,
/// and its gradient with respect to `probs`.
pub fn soft_dice_loss<T: Real>(probs: &Tensor<T>, labels: &[u8]) -> Result<(f64, Tensor<T>)> {
    let [n, c, d, h, w] = probs.dims5()?;
    let s = d * h * w;
    if labels.len() != n * s {
        return invalid(format!("{} labels for {} voxels", labels.len(), n * s));
    }
    if let Some(l) = labels.iter().find(|&&l| l as usize >= c) {
        return invalid(format!("label {} outside 0..{}", l, c));
    }
    let p = probs.data();
    let (mut inter, mut psum, mut gsum) = (vec![0.0f64; c], vec![0.0f64; c], vec![0.0f64; c]);
    for b in 0..n {
        for (ch, (i_c, p_c)) in inter.iter_mut().zip(psum.iter_mut()).enumerate() {
            let plane = &p[(b * c + ch) * s..(b * c + ch + 1) * s];
            let lab = &labels[b * s..(b + 1) * s];
            for (&v, &l) in plane.iter().zip(lab) {
                let v = v.as_f64();
                *p_c += v;
                if l as usize == ch {
                    *i_c += v;
                }
            }
        }
        for &l in &labels[b * s..(b + 1) * s] {
            gsum[l as usize] += 1.0;
        }
    }
    let mut loss = c as f64;
    // dL/dp = -(2 g den - num) / den²
    let mut on = vec![T::zero(); c];
    let mut off = vec![T::zero(); c];
    for ch in 0..c {
        let num = 2.0 * inter[ch] + DICE_EPS;
        let den = psum[ch] + gsum[ch] + DICE_EPS;
        loss -= num / den;
        on[ch] = T::from_f64(-(2.0 * den - num) / (den * den));
        off[ch] = T::from_f64(num / (den * den));
    }
    let mut grad = Tensor::zeros(probs.shape());
    let g = grad.data_mut();
    for b in 0..n {
        let lab = &labels[b * s..(b + 1) * s];
        for ch in 0..c {
            let plane = &mut g[(b * c + ch) * s..(b * c + ch + 1) * s];
            for (o, &l) in plane.iter_mut().zip(lab) {
                *o = if l as usize == ch { on[ch] } else { off[ch] };
            }
        }
    }
    Ok((loss, grad))
}

/// Step schedule `initial_lr * factor^floor(iteration / decay_every)`.
pub fn lr_at(iteration: usize, config: &TrainConfig) -> f64 {
    config.initial_lr * config.lr_decay_factor.powi((iteration / config.lr_decay_every) as i32)
}

/// Bias-corrected Adam over a fixed, ordered parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, params: &mut [(String, &mut Param<T>)], lr: f64) {
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, p)| vec![T::zero(); p.value.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (c1, c2) = (T::one() - b1, T::one() - b2);
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        // Folded bias correction: lr_t * m / (sqrt(v) + eps * sqrt(bc2)).
        let step_size = T::from_f64(lr * bc2.sqrt() / bc1);
        let eps = T::from_f64(self.eps * bc2.sqrt());
        for (((_, p), m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.data().to_vec();
            for (((x, g), m), v) in p.value.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + c1 * g;
                *v = b2 * *v + c2 * g * g;
                *x -= step_size * *m / (v.sqrt() + eps);
            }
        }
    }
}

/// Result of a training run.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Loss per iteration.
    pub losses: Vec<f64>,
}

/// SHA-256 of the architecture and training configuration.
pub fn config_digest(arch: &ArchConfig, config: &TrainConfig, strategy: &str) -> String {
    let mut h = Sha256::new();
    h.update(format!("{:?}\n", arch));
    h.update(config.canonical());
    h.update(format!("strategy={}\n", strategy));
    h.finalize().iter().map(|b| format!("{:02x}", b)).collect()
}

/// Runs `config.iterations` Adam steps on random patch batches. One
/// `iteration,lr,loss` row per step is written to `log` when given.
pub fn train(
    cases: &[TrainingCase],
    arch: &ArchConfig,
    config: &TrainConfig,
    strategy: &str,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if cases.is_empty() {
        return invalid("training needs at least one case");
    }
    if arch.num_classes != NUM_CLASSES {
        return invalid(format!("label maps have {} classes, arch has {}", NUM_CLASSES, arch.num_classes));
    }
    let mut model = Model::<f32>::build(arch, config.seed)?;
    let mut sampler = ChaCha8Rng::seed_from_u64(config.seed);
    sampler.set_stream(1);
    let mut adam = Adam::new(config.adam_beta1, config.adam_beta2, config.adam_eps);
    let io = |e| CoreError::io(std::path::Path::new("<loss log>"), e);
    if let Some(w) = log.as_mut() {
        writeln!(w, "iteration,lr,loss").map_err(io)?;
    }
    let mut losses = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let batch = sample_batch(cases, config.patch_size, config.batch_size, &mut sampler)?;
        let trace = model.forward_train(&batch.images)?;
        let (loss, grad) = soft_dice_loss(trace.probabilities(), &batch.labels)?;
        if !loss.is_finite() || !grad.all_finite() {
            return Err(CoreError::NonFiniteLoss { iteration: it });
        }
        model.zero_grad();
        model.backward(&trace, &grad, false)?;
        let lr = lr_at(it, config);
        adam.step(&mut model.params_mut(), lr);
        if let Some(w) = log.as_mut() {
            writeln!(w, "{},{},{}", it, lr, loss).map_err(io)?;
        }
        losses.push(loss);
    }
    let mut meta = BTreeMap::new();
    meta.insert("config_digest".into(), config_digest(arch, config, strategy));
    meta.insert("iterations".into(), config.iterations.to_string());
    meta.insert("seed".into(), config.seed.to_string());
    meta.insert("strategy".into(), strategy.to_string());
    meta.insert("target_spacing".into(), config.target_spacing.to_string());
    meta.insert("final_loss".into(), losses.last().map_or(String::new(), |l| l.to_string()));
    Ok(TrainOutcome { checkpoint: Checkpoint::from_model(&model, meta), losses })
}
