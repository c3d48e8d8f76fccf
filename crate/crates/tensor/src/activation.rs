//! Elementwise and per-voxel layers: ReLU, channel softmax, residual add.

use crate::error::{shape_err, Result};
use crate::{Real, Tensor};

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| if x > T::zero() { x } else { T::zero() })
}

/// Passes `grad_out` where the forward input was strictly positive.
pub fn relu_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad_out.shape() {
        return shape_err("relu backward: gradient shape differs from input");
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return shape_err(format!("add of {:?} and {:?}", a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::from_vec(a.shape(), data)
}

/// Softmax over axis 1 of an `(n, c, ...)` tensor, with max subtraction.
pub fn softmax_channels<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, s) = channel_layout(input)?;
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    let mut max = vec![T::zero(); s];
    let mut sum = vec![T::zero(); s];
    for b in 0..n {
        let base = b * c * s;
        max.copy_from_slice(&x[base..base + s]);
        for ch in 1..c {
            let row = &x[base + ch * s..base + (ch + 1) * s];
            for (m, &v) in max.iter_mut().zip(row) {
                if v > *m {
                    *m = v;
                }
            }
        }
        sum.iter_mut().for_each(|v| *v = T::zero());
        for ch in 0..c {
            let off = base + ch * s;
            for i in 0..s {
                let e = (x[off + i] - max[i]).exp();
                out[off + i] = e;
                sum[i] += e;
            }
        }
        for ch in 0..c {
            let off = base + ch * s;
            for i in 0..s {
                out[off + i] /= sum[i];
            }
        }
    }
    Tensor::from_vec(input.shape(), out)
}

/// Given softmax output `probs` and dL/dprobs, returns dL/dlogits:
/// `p_c * (g_c - sum_k p_k g_k)` per voxel.
pub fn softmax_channels_backward<T: Real>(
    probs: &Tensor<T>,
    grad_probs: &Tensor<T>,
) -> Result<Tensor<T>> {
    if probs.shape() != grad_probs.shape() {
        return shape_err("softmax backward: gradient shape differs from output");
    }
    let (n, c, s) = channel_layout(probs)?;
    let p = probs.data();
    let g = grad_probs.data();
    let mut out = vec![T::zero(); p.len()];
    let mut dot = vec![T::zero(); s];
    for b in 0..n {
        let base = b * c * s;
        dot.iter_mut().for_each(|v| *v = T::zero());
        for ch in 0..c {
            let off = base + ch * s;
            for i in 0..s {
                dot[i] += p[off + i] * g[off + i];
            }
        }
        for ch in 0..c {
            let off = base + ch * s;
            for i in 0..s {
                out[off + i] = p[off + i] * (g[off + i] - dot[i]);
            }
        }
    }
    Tensor::from_vec(probs.shape(), out)
}

/// `(batch, channels, voxels per channel)` of an `(n, c, ...)` tensor.
pub(crate) fn channel_layout<T: Real>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let shape = t.shape();
    if shape.len() < 2 {
        return shape_err(format!("expected (n, c, ...) layout, got {:?}", shape));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}
