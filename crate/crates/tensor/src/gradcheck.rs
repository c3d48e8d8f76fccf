//! Central finite-difference verification of analytic gradients.

use crate::Tensor;

/// Relative error with the denominator floored at `1e-8`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Finite-difference settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    /// Step relative to `max(1, |x|)`.
    pub step: f64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { step: 1e-4, floor: 1e-8 }
    }
}

/// Compares `analytic` (one gradient tensor per input) against central
/// differences of `loss` with step `1e-4 * max(1, |x|)`, and returns the
/// largest relative error over all checked elements.
///
/// `select` limits which flat indices of each input are perturbed; pass
/// `None` to check every element.
pub fn gradcheck<F>(
    inputs: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    loss: F,
    select: Option<&dyn Fn(usize, usize) -> bool>,
) -> f64
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    gradcheck_with(inputs, analytic, loss, select, GradcheckOptions::default())
}

/// [`gradcheck`] with an explicit step and denominator floor.
pub fn gradcheck_with<F>(
    inputs: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    mut loss: F,
    select: Option<&dyn Fn(usize, usize) -> bool>,
    options: GradcheckOptions,
) -> f64
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    assert_eq!(inputs.len(), analytic.len(), "one analytic gradient per input");
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut worst = 0.0f64;
    for (t, grad) in analytic.iter().enumerate() {
        assert_eq!(grad.shape(), inputs[t].shape(), "gradient shape of input {}", t);
        for j in 0..inputs[t].len() {
            if let Some(sel) = select {
                if !sel(t, j) {
                    continue;
                }
            }
            let x0 = inputs[t].data()[j];
            let h = options.step * x0.abs().max(1.0);
            work[t].data_mut()[j] = x0 + h;
            let up = loss(&work);
            work[t].data_mut()[j] = x0 - h;
            let down = loss(&work);
            work[t].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(options.floor));
        }
    }
    worst
}
