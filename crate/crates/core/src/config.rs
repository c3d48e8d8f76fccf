//! Flat `key = value` experiment configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Missing keys keep their defaults; unknown or repeated keys are errors.
//! Lists and ranges are whitespace-separated numbers.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use myoseg_tensor::model::ArchConfig;

use crate::error::{CoreError, Result};
use crate::phantom::PhantomSpec;
use crate::train::TrainConfig;
use crate::volume::class;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub n_train: usize,
    pub n_test: usize,
    /// Blood-pool HU range of training phantoms.
    pub train_contrast_range: [f64; 2],
    /// Blood-pool HU range of test phantoms.
    pub test_contrast_range: [f64; 2],
    pub phantom_dims: [usize; 3],
    pub phantom_spacing: [f64; 3],
    pub phantom_noise_sigma: f64,
    pub phantom_smooth: bool,
    pub train: TrainConfig,
    pub arch: ArchConfig,
    pub global_factors: Vec<f64>,
    pub compartment_factors: Vec<f64>,
    pub master_seed: u64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_train: 10,
            n_test: 40,
            train_contrast_range: [270.0, 345.0],
            test_contrast_range: [200.0, 700.0],
            phantom_dims: [96; 3],
            phantom_spacing: [1.0; 3],
            phantom_noise_sigma: 20.0,
            phantom_smooth: true,
            train: TrainConfig::default(),
            arch: ArchConfig::default(),
            global_factors: vec![0.5, 2.0],
            compartment_factors: vec![1.5, 0.8],
            master_seed: 0,
            output_dir: PathBuf::from("results"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::InvalidArgument(m));
        if self.n_train == 0 || self.n_test == 0 {
            return bad("n_train and n_test must be >= 1".into());
        }
        for (name, r) in [("train_contrast_range", self.train_contrast_range), ("test_contrast_range", self.test_contrast_range)] {
            let floor = PhantomSpec::DEFAULT_TISSUE_HU[class::LV_BLOOD as usize];
            if !(r[0] > 0.0 && r[0] <= r[1] && r[0] > floor && r[1].is_finite()) {
                return bad(format!("{} must be a non-empty interval above {} HU, got {:?}", name, floor, r));
            }
        }
        if self.global_factors.iter().chain(&self.compartment_factors).any(|f| !(*f > 0.0)) {
            return bad("augmentation factors must be > 0".into());
        }
        self.train.validate()?;
        self.arch.validate()?;
        self.phantom_template(0, 1.0).validate()
    }

    /// Phantom spec with this config's geometry and noise settings.
    pub fn phantom_template(&self, geometry_seed: u64, contrast_level: f64) -> PhantomSpec {
        PhantomSpec {
            dims: self.phantom_dims,
            spacing: self.phantom_spacing,
            noise_sigma: self.phantom_noise_sigma,
            smooth: self.phantom_smooth,
            ..PhantomSpec::new(geometry_seed, contrast_level)
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| CoreError::Config { line: line_no, message };
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got `{}`", line)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key `{}`", key)));
            }
            cfg.set(key, value).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let t = &mut self.train;
        match key {
            "n_train" => self.n_train = one(key, v)?,
            "n_test" => self.n_test = one(key, v)?,
            "train_contrast_range" => self.train_contrast_range = fixed(key, v)?,
            "test_contrast_range" => self.test_contrast_range = fixed(key, v)?,
            "phantom_dims" => self.phantom_dims = fixed(key, v)?,
            "phantom_spacing" => self.phantom_spacing = fixed(key, v)?,
            "phantom_noise_sigma" => self.phantom_noise_sigma = one(key, v)?,
            "phantom_smooth" => self.phantom_smooth = one(key, v)?,
            "iterations" => t.iterations = one(key, v)?,
            "batch_size" => t.batch_size = one(key, v)?,
            "patch_size" => t.patch_size = one(key, v)?,
            "initial_lr" => t.initial_lr = one(key, v)?,
            "lr_decay_factor" => t.lr_decay_factor = one(key, v)?,
            "lr_decay_every" => t.lr_decay_every = one(key, v)?,
            "adam_beta1" => t.adam_beta1 = one(key, v)?,
            "adam_beta2" => t.adam_beta2 = one(key, v)?,
            "adam_eps" => t.adam_eps = one(key, v)?,
            "target_spacing" => t.target_spacing = one(key, v)?,
            "base_channels" => self.arch.base_channels = one(key, v)?,
            "num_res_blocks" => self.arch.num_res_blocks = one(key, v)?,
            "global_factors" => self.global_factors = list(key, v)?,
            "compartment_factors" => self.compartment_factors = list(key, v)?,
            "master_seed" => self.master_seed = one(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            _ => return Err(format!("unknown key `{}`", key)),
        }
        Ok(())
    }

    /// Renders every key; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{} = {}", k, v).expect("string write");
        kv("n_train", self.n_train.to_string());
        kv("n_test", self.n_test.to_string());
        kv("train_contrast_range", join(&self.train_contrast_range));
        kv("test_contrast_range", join(&self.test_contrast_range));
        kv("phantom_dims", self.phantom_dims.map(|d| d.to_string()).join(" "));
        kv("phantom_spacing", join(&self.phantom_spacing));
        kv("phantom_noise_sigma", self.phantom_noise_sigma.to_string());
        kv("phantom_smooth", self.phantom_smooth.to_string());
        kv("iterations", t.iterations.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("patch_size", t.patch_size.to_string());
        kv("initial_lr", t.initial_lr.to_string());
        kv("lr_decay_factor", t.lr_decay_factor.to_string());
        kv("lr_decay_every", t.lr_decay_every.to_string());
        kv("adam_beta1", t.adam_beta1.to_string());
        kv("adam_beta2", t.adam_beta2.to_string());
        kv("adam_eps", t.adam_eps.to_string());
        kv("target_spacing", t.target_spacing.to_string());
        kv("base_channels", self.arch.base_channels.to_string());
        kv("num_res_blocks", self.arch.num_res_blocks.to_string());
        kv("global_factors", join(&self.global_factors));
        kv("compartment_factors", join(&self.compartment_factors));
        kv("master_seed", self.master_seed.to_string());
        kv("output_dir", self.output_dir.display().to_string());
        s
    }
}

fn one<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("invalid value `{}` for `{}`", v, key))
}

fn list<T: FromStr>(key: &str, v: &str) -> std::result::Result<Vec<T>, String> {
    v.split_whitespace().map(|p| one(key, p)).collect()
}

fn fixed<T: FromStr + Copy, const N: usize>(key: &str, v: &str) -> std::result::Result<[T; N], String> {
    let items: Vec<T> = list(key, v)?;
    items.try_into().map_err(|_| format!("`{}` needs exactly {} values, got `{}`", key, N, v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_defaults() {
        let d = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&d.to_text()).unwrap(), d);
        assert_eq!(ExperimentConfig::parse("# nothing\n\n").unwrap(), d);
        let c = ExperimentConfig::parse("n_test = 3 # short\ntest_contrast_range = 300 900\nphantom_smooth = false\n").unwrap();
        assert_eq!((c.n_test, c.test_contrast_range, c.phantom_smooth), (3, [300.0, 900.0], false));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = ExperimentConfig::parse("n_train = 2\nbogus = 1\n").unwrap_err();
        assert!(matches!(e, CoreError::Config { line: 2, .. }), "{}", e);
        assert!(ExperimentConfig::parse("n_train = 2\nn_train = 3\n").is_err());
        assert!(ExperimentConfig::parse("phantom_dims = 4 4\n").is_err());
        assert!(ExperimentConfig::parse("n_train\n").is_err());
        assert!(ExperimentConfig::parse("patch_size = 30\n").is_err());
        assert!(ExperimentConfig::parse("test_contrast_range = 700 200\n").is_err());
    }
}
