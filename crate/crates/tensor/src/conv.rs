//! 3D convolution (cross-correlation, no kernel flip) and its adjoint, the
//! transposed convolution.
//!
//! The fast path lowers each sample to an im2col matrix and calls GEMM. The
//! direct loops in [`reference`] define the expected results and are used by
//! the tests to pin the fast path down.

use crate::error::{shape_err, Result};
use crate::linalg::gemm;
use crate::{Real, Tensor};

/// Index geometry of one strided, zero-padded convolution: a `channels`-deep
/// volume of extent `input` is mapped to an output grid of extent `output`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(
        channels: usize,
        input: [usize; 3],
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 || kernel == 0 {
            return shape_err("stride and kernel size must be positive");
        }
        let mut output = [0; 3];
        for a in 0..3 {
            let span = input[a] + 2 * pad;
            if span < kernel {
                return shape_err(format!(
                    "kernel {} does not fit padded extent {} on axis {}",
                    kernel, span, a
                ));
            }
            output[a] = (span - kernel) / stride + 1;
        }
        Ok(Self { channels, input, output, kernel, stride, pad })
    }

    fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    fn output_len(&self) -> usize {
        self.output.iter().product()
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel.pow(3)
    }
}

/// Output spatial extent of a transposed convolution on one axis.
pub fn transposed_extent(n: usize, kernel: usize, stride: usize, pad: usize, output_pad: usize) -> Result<usize> {
    let full = (n.max(1) - 1) * stride + kernel + output_pad;
    if n == 0 || full <= 2 * pad {
        return shape_err(format!(
            "transposed convolution of extent {} gives empty output (k={}, stride={}, pad={})",
            n, kernel, stride, pad
        ));
    }
    Ok(full - 2 * pad)
}

/// Output columns `[lo, hi)` along x whose tap `kx` lands inside `[0, iw)`.
#[inline]
fn valid_range(ow: usize, iw: usize, s: usize, kx: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > kx { (pad - kx).div_ceil(s) } else { 0 };
    let hi = if iw + pad > kx { ((iw - 1 + pad - kx) / s + 1).min(ow) } else { 0 };
    (lo.min(ow), hi.max(lo.min(ow)))
}

/// Unfolds `x` (`channels x input voxels`) into `col`
/// (`channels*k^3 x output voxels`), zero outside the input. Row `r` of the
/// matrix starts at `col[r * ld]`.
pub fn im2col<T: Real>(g: &ConvGeometry, x: &[T], col: &mut [T], ld: usize) {
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let (k, s, pad) = (g.kernel, g.stride, g.pad as isize);
    let plane = oh * ow;
    let pout = g.output_len();
    let mut row = 0;
    for c in 0..g.channels {
        let xc = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let dst = &mut col[row * ld..row * ld + pout];
                    for oz in 0..od {
                        let iz = (oz * s + kz) as isize - pad;
                        let zdst = &mut dst[oz * plane..(oz + 1) * plane];
                        if iz < 0 || iz >= id as isize {
                            zdst.fill(T::zero());
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * s + ky) as isize - pad;
                            let ydst = &mut zdst[oy * ow..(oy + 1) * ow];
                            if iy < 0 || iy >= ih as isize {
                                ydst.fill(T::zero());
                                continue;
                            }
                            let src = &xc[(iz as usize * ih + iy as usize) * iw..][..iw];
                            let (lo, hi) = valid_range(ow, iw, s, kx, g.pad);
                            ydst[..lo].fill(T::zero());
                            ydst[hi..].fill(T::zero());
                            if lo < hi {
                                let first = lo * s + kx - g.pad;
                                if s == 1 {
                                    ydst[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                                } else {
                                    for (d, &v) in ydst[lo..hi].iter_mut().zip(src[first..].iter().step_by(s)) {
                                        *d = v;
                                    }
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` back into `x`.
pub fn col2im<T: Real>(g: &ConvGeometry, col: &[T], ld: usize, x: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let (k, s, pad) = (g.kernel, g.stride, g.pad as isize);
    let plane = oh * ow;
    let pout = g.output_len();
    let mut row = 0;
    for c in 0..g.channels {
        let xc = &mut x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let src = &col[row * ld..row * ld + pout];
                    for oz in 0..od {
                        let iz = (oz * s + kz) as isize - pad;
                        if iz < 0 || iz >= id as isize {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * s + ky) as isize - pad;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            let dst = &mut xc[(iz as usize * ih + iy as usize) * iw..][..iw];
                            let srow = &src[oz * plane + oy * ow..][..ow];
                            let (lo, hi) = valid_range(ow, iw, s, kx, g.pad);
                            if lo < hi {
                                let first = lo * s + kx - g.pad;
                                if s == 1 {
                                    for (d, &v) in dst[first..first + hi - lo].iter_mut().zip(&srow[lo..hi]) {
                                        *d += v;
                                    }
                                } else {
                                    for (d, &v) in dst[first..].iter_mut().step_by(s).zip(&srow[lo..hi]) {
                                        *d += v;
                                    }
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Gradients returned by the convolution backward passes.
#[derive(Debug, Clone)]
pub struct ConvGrads<T: Real> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

fn check_kernel<T: Real>(weights: &Tensor<T>, bias: &Tensor<T>, bias_len: usize) -> Result<[usize; 5]> {
    let w = weights.dims5()?;
    if w[2] != w[3] || w[3] != w[4] {
        return shape_err(format!("kernel must be cubic, got {:?}", weights.shape()));
    }
    if bias.shape() != [bias_len] {
        return shape_err(format!("bias shape {:?}, expected [{}]", bias.shape(), bias_len));
    }
    Ok(w)
}

fn conv_geometry<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(usize, ConvGeometry, usize)> {
    let [n, c, d, h, w] = input.dims5()?;
    let wd = weights.dims5()?;
    let [out_ch, in_ch, k, _, _] = check_kernel(weights, bias, wd[0])?;
    if in_ch != c {
        return shape_err(format!("conv3d: input has {} channels, weights expect {}", c, in_ch));
    }
    Ok((n, ConvGeometry::new(c, [d, h, w], k, stride, pad)?, out_ch))
}

/// Strided, zero-padded 3D cross-correlation. `weights` is
/// `(out_ch, in_ch, k, k, k)`, `bias` is `(out_ch)`.
pub fn conv3d<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (n, g, out_ch) = conv_geometry(input, weights, bias, stride, pad)?;
    let (pin, pout, rows) = (g.input_len(), g.output_len(), g.rows());
    let [od, oh, ow] = g.output;
    let mut out = Tensor::zeros(&[n, out_ch, od, oh, ow]);
    let mut col = vec![T::zero(); rows * pout];
    for b in 0..n {
        im2col(&g, &input.data()[b * g.channels * pin..(b + 1) * g.channels * pin], &mut col, pout);
        let y = &mut out.data_mut()[b * out_ch * pout..(b + 1) * out_ch * pout];
        for (o, yo) in y.chunks_mut(pout).enumerate() {
            yo.fill(bias.data()[o]);
        }
        gemm(false, false, out_ch, pout, rows, T::one(), weights.data(), &col, T::one(), y);
    }
    Ok(out)
}

/// Backward of [`conv3d`] given dL/doutput.
pub fn conv3d_backward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGrads<T>> {
    conv3d_backward_impl(input, weights, grad_out, stride, pad, true)
}

pub(crate) fn conv3d_backward_impl<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    want_input: bool,
) -> Result<ConvGrads<T>> {
    let zero_bias = Tensor::zeros(&[weights.shape().first().copied().unwrap_or(0)]);
    let (n, g, out_ch) = conv_geometry(input, weights, &zero_bias, stride, pad)?;
    let (pin, pout, rows) = (g.input_len(), g.output_len(), g.rows());
    let [od, oh, ow] = g.output;
    if grad_out.shape() != [n, out_ch, od, oh, ow] {
        return shape_err(format!("conv3d backward: gradient shape {:?}", grad_out.shape()));
    }
    let mut gw = Tensor::zeros(weights.shape());
    let mut gb = Tensor::zeros(&[out_ch]);
    let mut gin = want_input.then(|| Tensor::zeros(input.shape()));
    let mut col = vec![T::zero(); rows * pout];
    for b in 0..n {
        let gy = &grad_out.data()[b * out_ch * pout..(b + 1) * out_ch * pout];
        for (o, go) in gy.chunks(pout).enumerate() {
            gb.data_mut()[o] += go.iter().copied().sum::<T>();
        }
        im2col(&g, &input.data()[b * g.channels * pin..(b + 1) * g.channels * pin], &mut col, pout);
        // dW += dY * col^T
        gemm(false, true, out_ch, rows, pout, T::one(), gy, &col, T::one(), gw.data_mut());
        if let Some(gin) = gin.as_mut() {
            // dcol = W^T * dY
            gemm(true, false, rows, pout, out_ch, T::one(), weights.data(), gy, T::zero(), &mut col);
            col2im(&g, &col, pout, &mut gin.data_mut()[b * g.channels * pin..(b + 1) * g.channels * pin]);
        }
    }
    Ok(ConvGrads { input: gin, weight: gw, bias: gb })
}

fn transposed_geometry<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
    output_pad: usize,
) -> Result<(usize, ConvGeometry, usize)> {
    let [n, c, d, h, w] = input.dims5()?;
    let wd = weights.dims5()?;
    let [in_ch, out_ch, k, _, _] = check_kernel(weights, bias, wd[1])?;
    if in_ch != c {
        return shape_err(format!(
            "conv3d_transposed: input has {} channels, weights expect {}",
            c, in_ch
        ));
    }
    if stride == 0 || output_pad >= stride {
        return shape_err("output_pad must be smaller than stride");
    }
    let mut big = [0; 3];
    for (a, &len) in [d, h, w].iter().enumerate() {
        big[a] = transposed_extent(len, k, stride, pad, output_pad)?;
    }
    // The forward convolution whose adjoint this is maps `big` back to the input grid.
    let g = ConvGeometry::new(out_ch, big, k, stride, pad)?;
    debug_assert_eq!(g.output, [d, h, w]);
    Ok((n, g, in_ch))
}

/// Transposed 3D convolution (scatter form). `weights` is
/// `(in_ch, out_ch, k, k, k)`, `bias` is `(out_ch)`. Output extent per axis is
/// `(n - 1) * stride - 2 * pad + k + output_pad`.
pub fn conv3d_transposed<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
    output_pad: usize,
) -> Result<Tensor<T>> {
    let (n, g, in_ch) = transposed_geometry(input, weights, bias, stride, pad, output_pad)?;
    let out_ch = g.channels;
    let (pbig, psmall, rows) = (g.input_len(), g.output_len(), g.rows());
    let [d, h, w] = g.input;
    let mut out = Tensor::zeros(&[n, out_ch, d, h, w]);
    let mut col = vec![T::zero(); rows * psmall];
    for b in 0..n {
        let x = &input.data()[b * in_ch * psmall..(b + 1) * in_ch * psmall];
        // col = W^T * x, W viewed as in_ch x (out_ch * k^3)
        gemm(true, false, rows, psmall, in_ch, T::one(), weights.data(), x, T::zero(), &mut col);
        let y = &mut out.data_mut()[b * out_ch * pbig..(b + 1) * out_ch * pbig];
        for (o, yo) in y.chunks_mut(pbig).enumerate() {
            yo.fill(bias.data()[o]);
        }
        col2im(&g, &col, psmall, y);
    }
    Ok(out)
}

/// Backward of [`conv3d_transposed`] given dL/doutput.
pub fn conv3d_transposed_backward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    output_pad: usize,
) -> Result<ConvGrads<T>> {
    let zero_bias = Tensor::zeros(&[weights.shape().get(1).copied().unwrap_or(0)]);
    let (n, g, in_ch) = transposed_geometry(input, weights, &zero_bias, stride, pad, output_pad)?;
    let out_ch = g.channels;
    let (pbig, psmall, rows) = (g.input_len(), g.output_len(), g.rows());
    let [d, h, w] = g.input;
    if grad_out.shape() != [n, out_ch, d, h, w] {
        return shape_err(format!(
            "conv3d_transposed backward: gradient shape {:?}",
            grad_out.shape()
        ));
    }
    let mut gw = Tensor::zeros(weights.shape());
    let mut gb = Tensor::zeros(&[out_ch]);
    let mut gin = Tensor::zeros(input.shape());
    let mut col = vec![T::zero(); rows * psmall];
    for b in 0..n {
        let gy = &grad_out.data()[b * out_ch * pbig..(b + 1) * out_ch * pbig];
        for (o, go) in gy.chunks(pbig).enumerate() {
            gb.data_mut()[o] += go.iter().copied().sum::<T>();
        }
        im2col(&g, gy, &mut col, psmall);
        let x = &input.data()[b * in_ch * psmall..(b + 1) * in_ch * psmall];
        // dx = W * col
        let gx = &mut gin.data_mut()[b * in_ch * psmall..(b + 1) * in_ch * psmall];
        gemm(false, false, in_ch, psmall, rows, T::one(), weights.data(), &col, T::zero(), gx);
        // dW += x * col^T
        gemm(false, true, in_ch, rows, psmall, T::one(), x, &col, T::one(), gw.data_mut());
    }
    Ok(ConvGrads { input: Some(gin), weight: gw, bias: gb })
}

/// Direct-loop definitions of both convolutions. Slow; used as the
/// correctness reference for the GEMM path.
pub mod reference {
    use super::*;

    pub fn conv3d_direct<T: Real>(
        input: &Tensor<T>,
        weights: &Tensor<T>,
        bias: &Tensor<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<T>> {
        let (n, g, out_ch) = conv_geometry(input, weights, bias, stride, pad)?;
        let [id, ih, iw] = g.input;
        let [od, oh, ow] = g.output;
        let k = g.kernel;
        let x = input.data();
        let wt = weights.data();
        let mut out = Tensor::zeros(&[n, out_ch, od, oh, ow]);
        let y = out.data_mut();
        for b in 0..n {
            for o in 0..out_ch {
                for oz in 0..od {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = bias.data()[o];
                            for c in 0..g.channels {
                                for kz in 0..k {
                                    for ky in 0..k {
                                        for kx in 0..k {
                                            let iz = (oz * stride + kz) as isize - pad as isize;
                                            let iy = (oy * stride + ky) as isize - pad as isize;
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if iz < 0
                                                || iy < 0
                                                || ix < 0
                                                || iz >= id as isize
                                                || iy >= ih as isize
                                                || ix >= iw as isize
                                            {
                                                continue;
                                            }
                                            let xi = (((b * g.channels + c) * id + iz as usize) * ih
                                                + iy as usize)
                                                * iw
                                                + ix as usize;
                                            let wi = (((o * g.channels + c) * k + kz) * k + ky) * k + kx;
                                            acc += x[xi] * wt[wi];
                                        }
                                    }
                                }
                            }
                            y[(((b * out_ch + o) * od + oz) * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn conv3d_transposed_direct<T: Real>(
        input: &Tensor<T>,
        weights: &Tensor<T>,
        bias: &Tensor<T>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Tensor<T>> {
        let (n, g, in_ch) = transposed_geometry(input, weights, bias, stride, pad, output_pad)?;
        let out_ch = g.channels;
        let [d, h, w] = g.input;
        let [sd, sh, sw] = g.output;
        let k = g.kernel;
        let x = input.data();
        let wt = weights.data();
        let mut out = Tensor::zeros(&[n, out_ch, d, h, w]);
        let y = out.data_mut();
        for b in 0..n {
            for o in 0..out_ch {
                let base = (b * out_ch + o) * d * h * w;
                y[base..base + d * h * w].fill(bias.data()[o]);
            }
            for c in 0..in_ch {
                for z in 0..sd {
                    for yy in 0..sh {
                        for xx in 0..sw {
                            let v = x[(((b * in_ch + c) * sd + z) * sh + yy) * sw + xx];
                            for o in 0..out_ch {
                                for kz in 0..k {
                                    for ky in 0..k {
                                        for kx in 0..k {
                                            let pz = (z * stride + kz) as isize - pad as isize;
                                            let py = (yy * stride + ky) as isize - pad as isize;
                                            let px = (xx * stride + kx) as isize - pad as isize;
                                            if pz < 0
                                                || py < 0
                                                || px < 0
                                                || pz >= d as isize
                                                || py >= h as isize
                                                || px >= w as isize
                                            {
                                                continue;
                                            }
                                            let wi = (((c * out_ch + o) * k + kz) * k + ky) * k + kx;
                                            let yi = (((b * out_ch + o) * d + pz as usize) * h
                                                + py as usize)
                                                * w
                                                + px as usize;
                                            y[yi] += v * wt[wi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::reference::*;
    use super::*;

    fn seq(shape: &[usize], scale: f64) -> Tensor<f64> {
        let len: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|i| ((i * 37 % 17) as f64 - 8.0) * scale).collect()).unwrap()
    }

    #[test]
    fn zero_input_gives_bias() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4, 4]);
        let w = seq(&[3, 2, 3, 3, 3], 0.1);
        let b = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = conv3d(&x, &w, &b, 1, 1).unwrap();
        for (o, chunk) in y.data().chunks(64).enumerate() {
            assert!(chunk.iter().all(|&v| v == b.data()[o]));
        }
    }

    #[test]
    fn unit_kernel_is_identity() {
        let x = seq(&[1, 1, 3, 4, 5], 0.3);
        let w = Tensor::full(&[1, 1, 1, 1, 1], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = conv3d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ones_kernel_sums_ramp() {
        let x = Tensor::from_vec(&[1, 1, 3, 3, 3], (0..27).map(|i| i as f64).collect()).unwrap();
        let w = Tensor::full(&[1, 1, 3, 3, 3], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = conv3d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1, 1]);
        let direct = conv3d_direct(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.data()[0], 351.0);
        assert_eq!(direct.data()[0], 351.0);
    }

    #[test]
    fn gemm_path_matches_direct_loops() {
        for &(stride, pad, k, dims) in &[(1, 1, 3, [4, 5, 3]), (2, 1, 3, [5, 4, 6]), (2, 0, 2, [4, 4, 4]), (1, 0, 1, [2, 3, 2])] {
            let x = seq(&[2, 3, dims[0], dims[1], dims[2]], 0.11);
            let w = seq(&[4, 3, k, k, k], 0.07);
            let b = Tensor::from_vec(&[4], vec![0.1, 0.2, -0.3, 0.0]).unwrap();
            let fast = conv3d(&x, &w, &b, stride, pad).unwrap();
            let slow = conv3d_direct(&x, &w, &b, stride, pad).unwrap();
            assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() <= 1e-12 * e.abs().max(1.0), "{} vs {}", a, e);
            }
        }
    }

    #[test]
    fn transposed_gemm_path_matches_scatter() {
        for &(stride, pad, k, op) in &[(2, 1, 3, 1), (2, 0, 2, 0), (1, 1, 3, 0), (2, 1, 3, 0)] {
            let x = seq(&[2, 3, 3, 2, 4], 0.13);
            let w = seq(&[3, 2, k, k, k], 0.05);
            let b = Tensor::from_vec(&[2], vec![0.25, -0.5]).unwrap();
            let fast = conv3d_transposed(&x, &w, &b, stride, pad, op).unwrap();
            let slow = conv3d_transposed_direct(&x, &w, &b, stride, pad, op).unwrap();
            assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() <= 1e-12 * e.abs().max(1.0));
            }
        }
    }

    #[test]
    fn transposed_single_site_scatter() {
        let x = Tensor::from_vec(&[1, 1, 1, 1, 1], vec![3.0f64]).unwrap();
        let w = Tensor::from_vec(&[1, 1, 2, 2, 2], (1..=8).map(|v| v as f64).collect()).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = conv3d_transposed(&x, &w, &b, 2, 0, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2, 2]);
        let expected: Vec<f64> = w.data().iter().map(|v| 3.0 * v).collect();
        assert_eq!(y.data(), &expected[..]);
    }

    #[test]
    fn transposed_two_voxel_upsample() {
        // Two voxels along x, stride 2, k=2, ones kernel: each voxel fills its own 2x2x2 block.
        let x = Tensor::from_vec(&[1, 1, 1, 1, 2], vec![1.5f64, -2.0]).unwrap();
        let w = Tensor::full(&[1, 1, 2, 2, 2], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = conv3d_transposed(&x, &w, &b, 2, 0, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2, 4]);
        let row = [1.5, 1.5, -2.0, -2.0];
        for r in y.data().chunks(4) {
            assert_eq!(r, row);
        }
    }

    #[test]
    fn transposed_backward_input_equals_forward_conv() {
        let x = seq(&[1, 2, 3, 3, 3], 0.2);
        let w = seq(&[2, 3, 3, 3, 3], 0.03);
        let zero = Tensor::zeros(&[3]);
        let up = conv3d_transposed(&x, &w, &zero, 2, 1, 1).unwrap();
        let gy = seq(up.shape(), 0.17);
        let grads = conv3d_transposed_backward(&x, &w, &gy, 2, 1, 1).unwrap();
        let fwd = conv3d(&gy, &w, &Tensor::zeros(&[2]), 2, 1).unwrap();
        for (a, e) in grads.input.unwrap().data().iter().zip(fwd.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_errors() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4, 4]);
        let w = Tensor::<f64>::zeros(&[1, 3, 3, 3, 3]);
        assert!(conv3d(&x, &w, &Tensor::zeros(&[1]), 1, 1).is_err());
        let w = Tensor::<f64>::zeros(&[1, 2, 3, 3, 3]);
        assert!(conv3d(&x, &w, &Tensor::zeros(&[2]), 1, 1).is_err());
        let tiny = Tensor::<f64>::zeros(&[1, 2, 1, 1, 1]);
        assert!(conv3d(&tiny, &w, &Tensor::zeros(&[1]), 1, 0).is_err());
        let wt = Tensor::<f64>::zeros(&[2, 1, 3, 3, 3]);
        assert!(conv3d_transposed(&x, &wt, &Tensor::zeros(&[1]), 2, 1, 2).is_err());
    }
}
