//! The 3D encoder-decoder FCN: a stride-1 stem, two strided downsampling
//! convolutions, a stack of residual blocks at the bottleneck, two transposed
//! upsampling convolutions and a 1x1x1 classification head with channel
//! softmax. Every convolution except the head is followed by batch norm and
//! ReLU.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::activation::{add, relu, relu_backward, softmax_channels, softmax_channels_backward};
use crate::batchnorm::{batchnorm, batchnorm_backward, BnCache, BnParams, RunningStats};
use crate::conv::{conv3d, conv3d_backward_impl, conv3d_transposed, conv3d_transposed_backward};
use crate::error::{shape_err, Result, TensorError};
use crate::{Mode, Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub base_channels: usize,
    pub num_res_blocks: usize,
    pub num_classes: usize,
    pub conv_kernel: usize,
    /// Stride of the two downsampling stages; fixed at 2.
    pub down_stride: usize,
    /// Fixed at 1 (single-channel CT input).
    pub input_channels: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            num_res_blocks: 6,
            num_classes: 8,
            conv_kernel: 3,
            down_stride: 2,
            input_channels: 1,
            bn_eps: 1e-5,
            bn_momentum: 0.9,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(TensorError::Arch(m.to_string()));
        if self.base_channels < 1 {
            return fail("base_channels must be >= 1");
        }
        if self.num_classes < 2 {
            return fail("num_classes must be >= 2");
        }
        if self.conv_kernel.is_multiple_of(2) {
            return fail("conv_kernel must be odd");
        }
        if self.down_stride != 2 {
            return fail("down_stride is fixed at 2");
        }
        if self.input_channels != 1 {
            return fail("input_channels is fixed at 1");
        }
        if !(self.bn_eps > 0.0) || !(0.0..1.0).contains(&self.bn_momentum) {
            return fail("bn_eps must be > 0 and bn_momentum in [0, 1)");
        }
        Ok(())
    }

    fn bn(&self) -> BnParams {
        BnParams { eps: self.bn_eps, momentum: self.bn_momentum }
    }

    /// Spatial divisor required of network inputs.
    pub fn size_multiple(&self) -> usize {
        self.down_stride * self.down_stride
    }
}

/// A trainable tensor and its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Real> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Real> Param<T> {
    fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    fn accumulate(&mut self, g: &Tensor<T>) {
        for (a, &b) in self.grad.data_mut().iter_mut().zip(g.data()) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T: Real> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
    pub pad: usize,
    /// `Some(output_pad)` for a transposed convolution.
    pub output_pad: Option<usize>,
}

impl<T: Real> Conv<T> {
    fn new(in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize, output_pad: Option<usize>) -> Self {
        let shape = match output_pad {
            None => [out_ch, in_ch, k, k, k],
            Some(_) => [in_ch, out_ch, k, k, k],
        };
        Self {
            weight: Param::new(Tensor::zeros(&shape)),
            bias: Param::new(Tensor::zeros(&[out_ch])),
            stride,
            pad,
            output_pad,
        }
    }

    fn fan_in(&self) -> usize {
        let s = self.weight.value.shape();
        match self.output_pad {
            None => s[1] * s[2] * s[3] * s[4],
            Some(_) => s[0] * s[2] * s[3] * s[4],
        }
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self.output_pad {
            None => conv3d(x, &self.weight.value, &self.bias.value, self.stride, self.pad),
            Some(op) => conv3d_transposed(x, &self.weight.value, &self.bias.value, self.stride, self.pad, op),
        }
    }

    fn backward(&mut self, x: &Tensor<T>, gy: &Tensor<T>, want_input: bool) -> Result<Option<Tensor<T>>> {
        let g = match self.output_pad {
            None => conv3d_backward_impl(x, &self.weight.value, gy, self.stride, self.pad, want_input)?,
            Some(op) => conv3d_transposed_backward(x, &self.weight.value, gy, self.stride, self.pad, op)?,
        };
        self.weight.accumulate(&g.weight);
        self.bias.accumulate(&g.bias);
        Ok(g.input)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T: Real> {
    pub scale: Param<T>,
    pub shift: Param<T>,
    pub running: RunningStats<T>,
}

impl<T: Real> BatchNorm<T> {
    fn new(ch: usize) -> Self {
        Self {
            scale: Param::new(Tensor::full(&[ch], T::one())),
            shift: Param::new(Tensor::zeros(&[ch])),
            running: RunningStats::new(ch),
        }
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode, p: BnParams, name: &str) -> Result<(Tensor<T>, BnCache<T>)> {
        batchnorm(x, &self.scale.value, &self.shift.value, &mut self.running, mode, p).map_err(|e| match e {
            TensorError::UntrainedBatchNorm(_) => TensorError::UntrainedBatchNorm(name.to_string()),
            e => e,
        })
    }

    fn infer(&self, x: &Tensor<T>, p: BnParams, name: &str) -> Result<Tensor<T>> {
        let mut running = self.running.clone();
        batchnorm(x, &self.scale.value, &self.shift.value, &mut running, Mode::Inference, p)
            .map(|(y, _)| y)
            .map_err(|e| match e {
                TensorError::UntrainedBatchNorm(_) => TensorError::UntrainedBatchNorm(name.to_string()),
                e => e,
            })
    }

    fn backward(&mut self, cache: &BnCache<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let (gx, gs, gb) = batchnorm_backward(cache, &self.scale.value, gy)?;
        self.scale.accumulate(&gs);
        self.shift.accumulate(&gb);
        Ok(gx)
    }
}

/// Convolution followed by batch norm and ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvUnit<T: Real> {
    pub conv: Conv<T>,
    pub bn: BatchNorm<T>,
}

struct UnitCache<T: Real> {
    input: Tensor<T>,
    bn: BnCache<T>,
    output: Tensor<T>,
}

impl<T: Real> ConvUnit<T> {
    fn forward(&mut self, x: Tensor<T>, mode: Mode, p: BnParams, name: &str) -> Result<(Tensor<T>, UnitCache<T>)> {
        let z = self.conv.forward(&x)?;
        let (y, bn) = self.bn.forward(&z, mode, p, name)?;
        let out = relu(&y);
        Ok((out.clone(), UnitCache { input: x, bn, output: out }))
    }

    fn infer(&self, x: &Tensor<T>, p: BnParams, name: &str) -> Result<Tensor<T>> {
        let z = self.conv.forward(x)?;
        Ok(relu(&self.bn.infer(&z, p, name)?))
    }

    fn backward(&mut self, cache: &UnitCache<T>, gy: &Tensor<T>, want_input: bool) -> Result<Option<Tensor<T>>> {
        let g = relu_backward(&cache.output, gy)?;
        let g = self.bn.backward(&cache.bn, &g)?;
        self.conv.backward(&cache.input, &g, want_input)
    }
}

/// `relu(x + bn2(conv2(relu(bn1(conv1(x))))))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock<T: Real> {
    pub conv1: Conv<T>,
    pub bn1: BatchNorm<T>,
    pub conv2: Conv<T>,
    pub bn2: BatchNorm<T>,
}

struct ResCache<T: Real> {
    input: Tensor<T>,
    bn1: BnCache<T>,
    hidden: Tensor<T>,
    bn2: BnCache<T>,
    output: Tensor<T>,
}

impl<T: Real> ResBlock<T> {
    fn forward(&mut self, x: Tensor<T>, mode: Mode, p: BnParams, name: &str) -> Result<(Tensor<T>, ResCache<T>)> {
        let z1 = self.conv1.forward(&x)?;
        let (y1, bn1) = self.bn1.forward(&z1, mode, p, name)?;
        let hidden = relu(&y1);
        let z2 = self.conv2.forward(&hidden)?;
        let (y2, bn2) = self.bn2.forward(&z2, mode, p, name)?;
        let out = relu(&add(&x, &y2)?);
        Ok((out.clone(), ResCache { input: x, bn1, hidden, bn2, output: out }))
    }

    fn infer(&self, x: &Tensor<T>, p: BnParams, name: &str) -> Result<Tensor<T>> {
        let h = relu(&self.bn1.infer(&self.conv1.forward(x)?, p, name)?);
        let y = self.bn2.infer(&self.conv2.forward(&h)?, p, name)?;
        Ok(relu(&add(x, &y)?))
    }

    fn backward(&mut self, cache: &ResCache<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let g = relu_backward(&cache.output, gy)?;
        let g2 = self.bn2.backward(&cache.bn2, &g)?;
        let gh = self.conv2.backward(&cache.hidden, &g2, true)?.expect("input gradient requested");
        let gh = relu_backward(&cache.hidden, &gh)?;
        let g1 = self.bn1.backward(&cache.bn1, &gh)?;
        let gx = self.conv1.backward(&cache.input, &g1, true)?.expect("input gradient requested");
        add(&g, &gx)
    }
}

/// Activations saved by a training-mode forward pass.
pub struct Trace<T: Real> {
    units: Vec<UnitCache<T>>,
    blocks: Vec<ResCache<T>>,
    head_input: Tensor<T>,
    probs: Tensor<T>,
}

impl<T: Real> Trace<T> {
    pub fn probabilities(&self) -> &Tensor<T> {
        &self.probs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Real = f32> {
    pub arch: ArchConfig,
    pub stem: ConvUnit<T>,
    pub down: [ConvUnit<T>; 2],
    pub blocks: Vec<ResBlock<T>>,
    pub up: [ConvUnit<T>; 2],
    pub head: Conv<T>,
}

const UNIT_NAMES: [&str; 5] = ["stem", "down1", "down2", "up1", "up2"];

impl<T: Real> Model<T> {
    /// Builds the network with He-normal weights drawn from `init_seed`,
    /// zero biases, unit BN scale and zero BN shift.
    pub fn build(arch: &ArchConfig, init_seed: u64) -> Result<Self> {
        let mut model = Self::zeroed(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        model.visit_convs_mut(&mut |conv| {
            let std = (2.0 / conv.fan_in() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            for w in conv.weight.value.data_mut() {
                *w = T::from_f64(normal.sample(&mut rng));
            }
        });
        Ok(model)
    }

    /// Builds the layer structure with all weights zero; used when loading.
    pub fn zeroed(arch: &ArchConfig) -> Result<Self> {
        arch.validate()?;
        let (b, k, pad, s) = (arch.base_channels, arch.conv_kernel, arch.conv_kernel / 2, arch.down_stride);
        let unit = |i, o, stride, op| ConvUnit { conv: Conv::new(i, o, k, stride, pad, op), bn: BatchNorm::new(o) };
        Ok(Self {
            arch: arch.clone(),
            stem: unit(arch.input_channels, b, 1, None),
            down: [unit(b, 2 * b, s, None), unit(2 * b, 4 * b, s, None)],
            blocks: (0..arch.num_res_blocks)
                .map(|_| ResBlock {
                    conv1: Conv::new(4 * b, 4 * b, k, 1, pad, None),
                    bn1: BatchNorm::new(4 * b),
                    conv2: Conv::new(4 * b, 4 * b, k, 1, pad, None),
                    bn2: BatchNorm::new(4 * b),
                })
                .collect(),
            up: [unit(4 * b, 2 * b, s, Some(s - 1)), unit(2 * b, b, s, Some(s - 1))],
            head: Conv::new(b, arch.num_classes, 1, 1, 0, None),
        })
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [_, c, d, h, w] = x.dims5()?;
        if c != self.arch.input_channels {
            return shape_err(format!("model expects {} input channel(s), got {}", self.arch.input_channels, c));
        }
        let m = self.arch.size_multiple();
        if d % m != 0 || h % m != 0 || w % m != 0 || d == 0 || h == 0 || w == 0 {
            return shape_err(format!("spatial dims ({}, {}, {}) must be positive multiples of {}", d, h, w, m));
        }
        Ok(())
    }

    /// Per-voxel class probabilities. Training mode uses batch statistics and
    /// updates the running statistics; inference mode uses running statistics.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match mode {
            Mode::Training => Ok(self.forward_train(x)?.probs),
            Mode::Inference => self.predict(x),
        }
    }

    /// Inference-mode forward pass; leaves the model untouched.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let p = self.arch.bn();
        let mut h = self.stem.infer(x, p, "stem")?;
        for (i, u) in self.down.iter().enumerate() {
            h = u.infer(&h, p, UNIT_NAMES[1 + i])?;
        }
        for (i, blk) in self.blocks.iter().enumerate() {
            h = blk.infer(&h, p, &format!("res{}", i + 1))?;
        }
        for (i, u) in self.up.iter().enumerate() {
            h = u.infer(&h, p, UNIT_NAMES[3 + i])?;
        }
        softmax_channels(&self.head.forward(&h)?)
    }

    /// Training-mode forward pass that keeps activations for [`Model::backward`].
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Trace<T>> {
        self.check_input(x)?;
        let p = self.arch.bn();
        let mode = Mode::Training;
        let mut units = Vec::with_capacity(5);
        let (mut h, c) = self.stem.forward(x.clone(), mode, p, "stem")?;
        units.push(c);
        for (i, u) in self.down.iter_mut().enumerate() {
            let (o, c) = u.forward(h, mode, p, UNIT_NAMES[1 + i])?;
            units.push(c);
            h = o;
        }
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            let (o, c) = blk.forward(h, mode, p, &format!("res{}", i + 1))?;
            blocks.push(c);
            h = o;
        }
        for (i, u) in self.up.iter_mut().enumerate() {
            let (o, c) = u.forward(h, mode, p, UNIT_NAMES[3 + i])?;
            units.push(c);
            h = o;
        }
        let probs = softmax_channels(&self.head.forward(&h)?)?;
        Ok(Trace { units, blocks, head_input: h, probs })
    }

    /// Accumulates parameter gradients for dL/dprobs. Returns dL/dinput when
    /// `want_input` is set.
    pub fn backward(&mut self, trace: &Trace<T>, grad_probs: &Tensor<T>, want_input: bool) -> Result<Option<Tensor<T>>> {
        let g = softmax_channels_backward(&trace.probs, grad_probs)?;
        let mut g = self.head.backward(&trace.head_input, &g, true)?.expect("input gradient requested");
        for i in (0..2).rev() {
            g = self.up[i].backward(&trace.units[3 + i], &g, true)?.expect("input gradient requested");
        }
        for (blk, cache) in self.blocks.iter_mut().zip(&trace.blocks).rev() {
            g = blk.backward(cache, &g)?;
        }
        for i in (0..2).rev() {
            g = self.down[i].backward(&trace.units[1 + i], &g, true)?.expect("input gradient requested");
        }
        self.stem.backward(&trace.units[0], &g, want_input)
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.grad.fill(T::zero());
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|(_, p)| p.value.len()).sum()
    }

    fn visit_convs_mut(&mut self, f: &mut dyn FnMut(&mut Conv<T>)) {
        f(&mut self.stem.conv);
        self.down.iter_mut().for_each(|u| f(&mut u.conv));
        for b in self.blocks.iter_mut() {
            f(&mut b.conv1);
            f(&mut b.conv2);
        }
        self.up.iter_mut().for_each(|u| f(&mut u.conv));
        f(&mut self.head);
    }

    /// Every trainable parameter in a fixed order: forward layer order,
    /// convolution weight then bias, BN scale then shift.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        fn conv<'a, T: Real>(out: &mut Vec<(String, &'a mut Param<T>)>, name: String, c: &'a mut Conv<T>) {
            out.push((format!("{}.weight", name), &mut c.weight));
            out.push((format!("{}.bias", name), &mut c.bias));
        }
        fn bn<'a, T: Real>(out: &mut Vec<(String, &'a mut Param<T>)>, name: String, b: &'a mut BatchNorm<T>) {
            out.push((format!("{}.scale", name), &mut b.scale));
            out.push((format!("{}.shift", name), &mut b.shift));
        }
        let Model { stem, down, blocks, up, head, .. } = self;
        let [down1, down2] = down;
        let [up1, up2] = up;
        let mut out = Vec::new();
        for (n, u) in [("stem", stem), ("down1", down1), ("down2", down2)] {
            conv(&mut out, format!("{}.conv", n), &mut u.conv);
            bn(&mut out, format!("{}.bn", n), &mut u.bn);
        }
        for (i, b) in blocks.iter_mut().enumerate() {
            conv(&mut out, format!("res{}.conv1", i + 1), &mut b.conv1);
            bn(&mut out, format!("res{}.bn1", i + 1), &mut b.bn1);
            conv(&mut out, format!("res{}.conv2", i + 1), &mut b.conv2);
            bn(&mut out, format!("res{}.bn2", i + 1), &mut b.bn2);
        }
        for (n, u) in [("up1", up1), ("up2", up2)] {
            conv(&mut out, format!("{}.conv", n), &mut u.conv);
            bn(&mut out, format!("{}.bn", n), &mut u.bn);
        }
        conv(&mut out, "head".into(), head);
        out
    }

    /// Read-only counterpart of [`Model::params_mut`], same order.
    pub fn params(&self) -> Vec<(String, &Param<T>)> {
        fn conv<'a, T: Real>(name: &str, c: &'a Conv<T>) -> [(String, &'a Param<T>); 2] {
            [(format!("{}.weight", name), &c.weight), (format!("{}.bias", name), &c.bias)]
        }
        fn bn<'a, T: Real>(name: &str, b: &'a BatchNorm<T>) -> [(String, &'a Param<T>); 2] {
            [(format!("{}.scale", name), &b.scale), (format!("{}.shift", name), &b.shift)]
        }
        let mut out = Vec::new();
        for (n, u) in [("stem", &self.stem), ("down1", &self.down[0]), ("down2", &self.down[1])] {
            out.extend(conv(&format!("{}.conv", n), &u.conv));
            out.extend(bn(&format!("{}.bn", n), &u.bn));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(conv(&format!("res{}.conv1", i + 1), &b.conv1));
            out.extend(bn(&format!("res{}.bn1", i + 1), &b.bn1));
            out.extend(conv(&format!("res{}.conv2", i + 1), &b.conv2));
            out.extend(bn(&format!("res{}.bn2", i + 1), &b.bn2));
        }
        for (n, u) in [("up1", &self.up[0]), ("up2", &self.up[1])] {
            out.extend(conv(&format!("{}.conv", n), &u.conv));
            out.extend(bn(&format!("{}.bn", n), &u.bn));
        }
        out.extend(conv("head", &self.head));
        out
    }

    /// Running statistics of every BN layer, in forward order.
    pub fn running_stats(&self) -> Vec<(String, &RunningStats<T>)> {
        let mut out = Vec::new();
        for (n, u) in [("stem", &self.stem), ("down1", &self.down[0]), ("down2", &self.down[1])] {
            out.push((format!("{}.bn", n), &u.bn.running));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("res{}.bn1", i + 1), &b.bn1.running));
            out.push((format!("res{}.bn2", i + 1), &b.bn2.running));
        }
        for (n, u) in [("up1", &self.up[0]), ("up2", &self.up[1])] {
            out.push((format!("{}.bn", n), &u.bn.running));
        }
        out
    }

    pub fn running_stats_mut(&mut self) -> Vec<&mut RunningStats<T>> {
        let Model { stem, down, blocks, up, .. } = self;
        let mut out: Vec<&mut RunningStats<T>> = vec![&mut stem.bn.running];
        out.extend(down.iter_mut().map(|u| &mut u.bn.running));
        for b in blocks.iter_mut() {
            out.push(&mut b.bn1.running);
            out.push(&mut b.bn2.running);
        }
        out.extend(up.iter_mut().map(|u| &mut u.bn.running));
        out
    }

    /// Converts every parameter and statistic to another element type.
    pub fn cast<U: Real>(&self) -> Model<U> {
        let mut out = Model::<U>::zeroed(&self.arch).expect("validated architecture");
        for ((_, dst), (_, src)) in out.params_mut().into_iter().zip(self.params()) {
            dst.value = src.value.cast();
        }
        for (dst, (_, src)) in out.running_stats_mut().into_iter().zip(self.running_stats()) {
            *dst = RunningStats {
                mean: src.mean.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                var: src.var.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                tracked: src.tracked,
            };
        }
        out
    }
}
