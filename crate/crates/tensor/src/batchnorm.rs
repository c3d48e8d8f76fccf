//! Per-channel batch normalization over the batch and spatial axes.

use crate::activation::channel_layout;
use crate::error::{shape_err, Result, TensorError};
use crate::{Mode, Real, Tensor};

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T: Real> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// False until the first training-mode update.
    pub tracked: bool,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![T::zero(); channels], var: vec![T::one(); channels], tracked: false }
    }
}

/// Hyperparameters shared by all batch-norm layers of a model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BnParams {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BnParams {
    fn default() -> Self {
        Self { eps: 1e-5, momentum: 0.9 }
    }
}

/// Values saved by the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T: Real> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mode: Mode,
}

/// Forward pass. In training mode the batch statistics normalize the input
/// and update `running` as `r = momentum * r + (1 - momentum) * batch_stat`
/// (biased batch variance). Inference mode normalizes with `running`.
pub fn batchnorm<T: Real>(
    input: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    running: &mut RunningStats<T>,
    mode: Mode,
    params: BnParams,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let (n, c, s) = channel_layout(input)?;
    if scale.shape() != [c] || shift.shape() != [c] || running.mean.len() != c {
        return shape_err(format!("batchnorm over {} channels: scale/shift/running length mismatch", c));
    }
    let eps = T::from_f64(params.eps);
    let x = input.data();
    let (mean, inv_std) = match mode {
        Mode::Training => {
            let m = T::from_f64((n * s) as f64);
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut acc = 0.0f64;
                for b in 0..n {
                    let off = (b * c + ch) * s;
                    acc += lane_sum(&x[off..off + s], |v| v.as_f64());
                }
                let mu = acc / (n * s) as f64;
                let mut sq = 0.0f64;
                for b in 0..n {
                    let off = (b * c + ch) * s;
                    sq += lane_sum(&x[off..off + s], |v| {
                        let d = v.as_f64() - mu;
                        d * d
                    });
                }
                mean[ch] = T::from_f64(mu);
                var[ch] = T::from_f64(sq) / m;
            }
            let mom = T::from_f64(params.momentum);
            for ch in 0..c {
                running.mean[ch] = mom * running.mean[ch] + (T::one() - mom) * mean[ch];
                running.var[ch] = mom * running.var[ch] + (T::one() - mom) * var[ch];
            }
            running.tracked = true;
            let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            (mean, inv_std)
        }
        Mode::Inference => {
            if !running.tracked {
                return Err(TensorError::UntrainedBatchNorm(String::new()));
            }
            let inv_std: Vec<T> = running.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            (running.mean.clone(), inv_std)
        }
    };
    let mut normalized = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * s;
            let (mu, is, g, beta) = (mean[ch], inv_std[ch], scale.data()[ch], shift.data()[ch]);
            let rows = x[off..off + s].iter().zip(&mut normalized[off..off + s]).zip(&mut out[off..off + s]);
            for ((&xi, nv), ov) in rows {
                let xh = (xi - mu) * is;
                *nv = xh;
                *ov = g * xh + beta;
            }
        }
    }
    let normalized = Tensor::from_vec(input.shape(), normalized)?;
    Ok((Tensor::from_vec(input.shape(), out)?, BnCache { normalized, inv_std, mode }))
}

const LANES: usize = 8;

/// Sum of `f` over `xs` with independent partial sums per lane.
fn lane_sum<T: Real>(xs: &[T], f: impl Fn(T) -> f64) -> f64 {
    let mut acc = [0.0f64; LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail: f64 = chunks.remainder().iter().map(|&v| f(v)).sum();
    for ch in chunks {
        for k in 0..LANES {
            acc[k] += f(ch[k]);
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Two-slice variant of [`lane_sum`].
fn lane_sum2<T: Real>(xs: &[T], ys: &[T], f: impl Fn(T, T) -> f64) -> f64 {
    let mut acc = [0.0f64; LANES];
    let (a, b) = (xs.chunks_exact(LANES), ys.chunks_exact(LANES));
    let tail: f64 = a.remainder().iter().zip(b.remainder()).map(|(&u, &v)| f(u, v)).sum();
    for (ca, cb) in a.zip(b) {
        for k in 0..LANES {
            acc[k] += f(ca[k], cb[k]);
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Backward pass: returns `(d input, d scale, d shift)`.
pub fn batchnorm_backward<T: Real>(
    cache: &BnCache<T>,
    scale: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    if grad_out.shape() != cache.normalized.shape() {
        return shape_err("batchnorm backward: gradient shape differs from forward output");
    }
    let (n, c, s) = channel_layout(grad_out)?;
    let gy = grad_out.data();
    let xh = cache.normalized.data();
    let mut gscale = vec![T::zero(); c];
    let mut gshift = vec![T::zero(); c];
    for ch in 0..c {
        let (mut sg, mut sgx) = (0.0f64, 0.0f64);
        for b in 0..n {
            let off = (b * c + ch) * s;
            let (g, h) = (&gy[off..off + s], &xh[off..off + s]);
            sg += lane_sum(g, |v| v.as_f64());
            sgx += lane_sum2(g, h, |a, b| (a * b).as_f64());
        }
        gshift[ch] = T::from_f64(sg);
        gscale[ch] = T::from_f64(sgx);
    }
    let mut gin = vec![T::zero(); gy.len()];
    let m = T::from_f64((n * s) as f64);
    for ch in 0..c {
        let k = scale.data()[ch] * cache.inv_std[ch];
        let (mean_g, mean_gx) = match cache.mode {
            Mode::Training => (gshift[ch] / m, gscale[ch] / m),
            Mode::Inference => (T::zero(), T::zero()),
        };
        for b in 0..n {
            let off = (b * c + ch) * s;
            for i in off..off + s {
                gin[i] = k * (gy[i] - mean_g - xh[i] * mean_gx);
            }
        }
    }
    Ok((
        Tensor::from_vec(grad_out.shape(), gin)?,
        Tensor::from_vec(&[c], gscale)?,
        Tensor::from_vec(&[c], gshift)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_evaluated_channel() {
        let x = Tensor::from_vec(&[1, 1, 4], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let scale = Tensor::from_vec(&[1], vec![2.0]).unwrap();
        let shift = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let mut run = RunningStats::new(1);
        let (y, _) = batchnorm(&x, &scale, &shift, &mut run, Mode::Training, BnParams::default()).unwrap();
        for (i, &v) in y.data().iter().enumerate() {
            let want = ((i as f64 + 1.0) - 2.5) / (1.25f64 + 1e-5).sqrt() * 2.0 + 1.0;
            assert!((v - want).abs() < 1e-14);
        }
        // r = 0.9 * r0 + 0.1 * batch
        assert!((run.mean[0] - 0.25).abs() < 1e-15);
        assert!((run.var[0] - (0.9 + 0.125)).abs() < 1e-15);
        assert!(run.tracked);
    }

    #[test]
    fn constant_channel_maps_to_shift() {
        let x = Tensor::<f64>::full(&[2, 1, 3], 7.0);
        let scale = Tensor::from_vec(&[1], vec![3.0]).unwrap();
        let shift = Tensor::from_vec(&[1], vec![-0.5]).unwrap();
        let mut run = RunningStats::new(1);
        let (y, _) = batchnorm(&x, &scale, &shift, &mut run, Mode::Training, BnParams::default()).unwrap();
        assert!(y.all_finite());
        assert!(y.data().iter().all(|&v| v == -0.5));
    }

    #[test]
    fn inference_requires_running_stats() {
        let x = Tensor::<f32>::zeros(&[1, 2, 2]);
        let ones = Tensor::full(&[2], 1.0);
        let zeros = Tensor::zeros(&[2]);
        let mut run = RunningStats::new(2);
        let err = batchnorm(&x, &ones, &zeros, &mut run, Mode::Inference, BnParams::default());
        assert!(matches!(err, Err(TensorError::UntrainedBatchNorm(_))));
    }

    #[test]
    fn inference_uses_running_stats() {
        let x = Tensor::from_vec(&[1, 1, 2], vec![3.0f64, 5.0]).unwrap();
        let mut run = RunningStats { mean: vec![1.0], var: vec![4.0 - 1e-5], tracked: true };
        let (y, _) = batchnorm(
            &x,
            &Tensor::full(&[1], 1.0),
            &Tensor::zeros(&[1]),
            &mut run,
            Mode::Inference,
            BnParams::default(),
        )
        .unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        assert!((y.data()[1] - 2.0).abs() < 1e-12);
        assert_eq!(run.mean, vec![1.0]);
    }
}
