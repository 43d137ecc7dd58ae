use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{cast, Classifier, Scalar, ScoreKind};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::seed::rng_from_seed;
use crate::tensor::Dims;

/// One block: `kernel x kernel` same-padded convolution, ReLU, 2x2 max-pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: usize,
    pub out_channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: Dims,
    pub convs: Vec<ConvSpec>,
    pub num_classes: usize,
}

impl Architecture {
    pub fn default_blocks() -> Vec<ConvSpec> {
        vec![
            ConvSpec {
                kernel: 3,
                out_channels: 8,
            },
            ConvSpec {
                kernel: 3,
                out_channels: 16,
            },
        ]
    }

    pub fn new(input: Dims, convs: Vec<ConvSpec>, num_classes: usize) -> Result<Self> {
        let arch = Self {
            input,
            convs,
            num_classes,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input.is_empty() || self.num_classes == 0 {
            return arg_err("architecture needs positive input dims and class count");
        }
        let scale = 1usize << self.convs.len();
        if self.input.height % scale != 0 || self.input.width % scale != 0 {
            return arg_err(format!(
                "input {} is not divisible by 2^{} for pooling",
                self.input,
                self.convs.len()
            ));
        }
        for c in &self.convs {
            if c.kernel % 2 == 0 || c.out_channels == 0 {
                return arg_err("conv kernels must be odd and channel counts positive");
            }
        }
        Ok(())
    }

    fn layout(&self) -> Layout {
        let mut offset = 0;
        let (mut h, mut w, mut c) = (self.input.height, self.input.width, self.input.channels);
        let mut convs = Vec::with_capacity(self.convs.len());
        for spec in &self.convs {
            let weights = spec.kernel * spec.kernel * c * spec.out_channels;
            convs.push(ConvLayer {
                height: h,
                width: w,
                in_channels: c,
                out_channels: spec.out_channels,
                kernel: spec.kernel,
                weight_offset: offset,
                bias_offset: offset + weights,
            });
            offset += weights + spec.out_channels;
            h /= 2;
            w /= 2;
            c = spec.out_channels;
        }
        let features = h * w * c;
        let dense_weights = offset;
        let dense_bias = offset + features * self.num_classes;
        Layout {
            convs,
            features,
            dense_weights,
            dense_bias,
            total: dense_bias + self.num_classes,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ConvLayer {
    height: usize,
    width: usize,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    weight_offset: usize,
    bias_offset: usize,
}

impl ConvLayer {
    fn weight_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels * self.out_channels
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    convs: Vec<ConvLayer>,
    features: usize,
    dense_weights: usize,
    dense_bias: usize,
    total: usize,
}

/// Cached activations of one forward pass.
struct Trace<T> {
    /// Input of each conv block.
    inputs: Vec<Vec<T>>,
    /// Conv output before ReLU, per block.
    pre: Vec<Vec<T>>,
    /// Index into `pre` of each pooled output's window winner.
    winners: Vec<Vec<u32>>,
    features: Vec<T>,
    logits: Vec<T>,
}

/// Convolutional classifier. Parameters are stored flat, block by block
/// (conv weights `[ky][kx][in][out]`, conv bias), then dense weights
/// `[class][feature]` and dense bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet<T = f32> {
    arch: Architecture,
    layout: Layout,
    params: Vec<T>,
}

impl<T: Scalar> ConvNet<T> {
    pub fn new(arch: Architecture, params: Vec<T>) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        if params.len() != layout.total {
            return shape_err(format!(
                "architecture needs {} parameters, got {}",
                layout.total,
                params.len()
            ));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return arg_err("parameters must be finite");
        }
        Ok(Self {
            arch,
            layout,
            params,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    /// The same network evaluated in another float type.
    pub fn cast<U: Scalar>(&self) -> ConvNet<U> {
        ConvNet {
            arch: self.arch.clone(),
            layout: self.layout.clone(),
            params: self
                .params
                .iter()
                .map(|p| U::from(*p).expect("finite parameter"))
                .collect(),
        }
    }

    fn check_input(&self, input: &[T]) -> Result<()> {
        if input.len() != self.arch.input.len() {
            return shape_err(format!(
                "model expects {} input values, got {}",
                self.arch.input.len(),
                input.len()
            ));
        }
        Ok(())
    }

    pub fn logits(&self, input: &[T]) -> Result<Vec<T>> {
        self.check_input(input)?;
        Ok(self.trace(input).logits)
    }

    /// Vector-Jacobian product: `sum_k upstream[k] * dlogit_k / dinput`.
    pub fn input_vjp(&self, input: &[T], upstream: &[T]) -> Result<Vec<T>> {
        self.check_input(input)?;
        if upstream.len() != self.arch.num_classes {
            return shape_err("upstream length must equal the class count");
        }
        let trace = self.trace(input);
        Ok(self.backward(&trace, upstream, None))
    }

    pub fn score_gradient(&self, input: &[T], class: usize, kind: ScoreKind) -> Result<Vec<T>> {
        self.check_input(input)?;
        if class >= self.arch.num_classes {
            return Err(Error::InvalidClass {
                class,
                num_classes: self.arch.num_classes,
            });
        }
        let trace = self.trace(input);
        let upstream = kind.upstream(&trace.logits, class);
        Ok(self.backward(&trace, &upstream, None))
    }

    /// Pool winners and ReLU states; the network is linear in its input
    /// wherever this pattern is constant.
    pub fn activation_pattern(&self, input: &[T]) -> Result<Vec<u32>> {
        self.check_input(input)?;
        let trace = self.trace(input);
        let mut pattern = Vec::new();
        for (pre, winners) in trace.pre.iter().zip(&trace.winners) {
            for &w in winners {
                pattern.push(w);
                pattern.push((pre[w as usize] > T::zero()) as u32);
            }
        }
        Ok(pattern)
    }

    /// Cross-entropy loss and its gradient with respect to every parameter.
    pub(crate) fn loss_and_param_grad(&self, input: &[T], label: usize) -> (T, Vec<T>) {
        let trace = self.trace(input);
        let probs = super::softmax(&trace.logits);
        let loss = -(probs[label].max(cast(1e-30))).ln();
        let mut upstream = probs;
        upstream[label] = upstream[label] - T::one();
        let mut grad = vec![T::zero(); self.params.len()];
        self.backward(&trace, &upstream, Some(&mut grad));
        (loss, grad)
    }

    fn trace(&self, input: &[T]) -> Trace<T> {
        let mut inputs = Vec::with_capacity(self.layout.convs.len());
        let mut pre_all = Vec::with_capacity(self.layout.convs.len());
        let mut winners_all = Vec::with_capacity(self.layout.convs.len());
        let mut current = input.to_vec();
        for layer in &self.layout.convs {
            let pre = self.conv_forward(layer, &current);
            let (pooled, winners) =
                max_pool_relu(&pre, layer.height, layer.width, layer.out_channels);
            inputs.push(current);
            pre_all.push(pre);
            winners_all.push(winners);
            current = pooled;
        }
        let features = current;
        let logits = self.dense_forward(&features);
        Trace {
            inputs,
            pre: pre_all,
            winners: winners_all,
            features,
            logits,
        }
    }

    fn conv_forward(&self, layer: &ConvLayer, input: &[T]) -> Vec<T> {
        let (h, w, ci, co, k) = (
            layer.height,
            layer.width,
            layer.in_channels,
            layer.out_channels,
            layer.kernel,
        );
        let pad = (k / 2) as isize;
        let weights = &self.params[layer.weight_offset..layer.weight_offset + layer.weight_len()];
        let bias = &self.params[layer.bias_offset..layer.bias_offset + co];
        let mut out = vec![T::zero(); h * w * co];
        for y in 0..h {
            for x in 0..w {
                let dst = &mut out[(y * w + x) * co..(y * w + x + 1) * co];
                dst.copy_from_slice(bias);
                for ky in 0..k {
                    let yy = y as isize + ky as isize - pad;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let xx = x as isize + kx as isize - pad;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let src = (yy as usize * w + xx as usize) * ci;
                        let wbase = (ky * k + kx) * ci * co;
                        for i in 0..ci {
                            let v = input[src + i];
                            if v == T::zero() {
                                continue;
                            }
                            let row = &weights[wbase + i * co..wbase + (i + 1) * co];
                            for (d, &wt) in dst.iter_mut().zip(row) {
                                *d = *d + v * wt;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn dense_forward(&self, features: &[T]) -> Vec<T> {
        let f = self.layout.features;
        (0..self.arch.num_classes)
            .map(|k| {
                let row = &self.params
                    [self.layout.dense_weights + k * f..self.layout.dense_weights + (k + 1) * f];
                row.iter()
                    .zip(features)
                    .fold(self.params[self.layout.dense_bias + k], |acc, (&wt, &v)| {
                        acc + wt * v
                    })
            })
            .collect()
    }

    /// Backpropagates `upstream = dL/dlogits`; returns `dL/dinput` and, when
    /// `param_grad` is given, accumulates parameter gradients into it.
    fn backward(
        &self,
        trace: &Trace<T>,
        upstream: &[T],
        mut param_grad: Option<&mut [T]>,
    ) -> Vec<T> {
        let f = self.layout.features;
        let mut grad = vec![T::zero(); f];
        for (k, &u) in upstream.iter().enumerate() {
            if u == T::zero() {
                continue;
            }
            let woff = self.layout.dense_weights + k * f;
            let row = &self.params[woff..woff + f];
            for (g, &wt) in grad.iter_mut().zip(row) {
                *g = *g + u * wt;
            }
            if let Some(pg) = param_grad.as_deref_mut() {
                for (g, &v) in pg[woff..woff + f].iter_mut().zip(&trace.features) {
                    *g = *g + u * v;
                }
                pg[self.layout.dense_bias + k] = pg[self.layout.dense_bias + k] + u;
            }
        }

        for (l, layer) in self.layout.convs.iter().enumerate().rev() {
            let pre = &trace.pre[l];
            let mut d_pre = vec![T::zero(); pre.len()];
            for (&win, &g) in trace.winners[l].iter().zip(&grad) {
                if pre[win as usize] > T::zero() {
                    d_pre[win as usize] = d_pre[win as usize] + g;
                }
            }
            grad = self.conv_backward(layer, &trace.inputs[l], &d_pre, param_grad.as_deref_mut());
        }
        grad
    }

    fn conv_backward(
        &self,
        layer: &ConvLayer,
        input: &[T],
        d_out: &[T],
        mut param_grad: Option<&mut [T]>,
    ) -> Vec<T> {
        let (h, w, ci, co, k) = (
            layer.height,
            layer.width,
            layer.in_channels,
            layer.out_channels,
            layer.kernel,
        );
        let pad = (k / 2) as isize;
        let weights = &self.params[layer.weight_offset..layer.weight_offset + layer.weight_len()];
        let mut d_in = vec![T::zero(); h * w * ci];
        for y in 0..h {
            for x in 0..w {
                let g = &d_out[(y * w + x) * co..(y * w + x + 1) * co];
                if g.iter().all(|v| *v == T::zero()) {
                    continue;
                }
                if let Some(pg) = param_grad.as_deref_mut() {
                    for (b, &gv) in pg[layer.bias_offset..layer.bias_offset + co]
                        .iter_mut()
                        .zip(g)
                    {
                        *b = *b + gv;
                    }
                }
                for ky in 0..k {
                    let yy = y as isize + ky as isize - pad;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let xx = x as isize + kx as isize - pad;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let src = (yy as usize * w + xx as usize) * ci;
                        let wbase = (ky * k + kx) * ci * co;
                        for i in 0..ci {
                            let row = &weights[wbase + i * co..wbase + (i + 1) * co];
                            let dot = row
                                .iter()
                                .zip(g)
                                .fold(T::zero(), |acc, (&wt, &gv)| acc + wt * gv);
                            d_in[src + i] = d_in[src + i] + dot;
                            if let Some(pg) = param_grad.as_deref_mut() {
                                let v = input[src + i];
                                if v != T::zero() {
                                    let off = layer.weight_offset + wbase + i * co;
                                    for (p, &gv) in pg[off..off + co].iter_mut().zip(g) {
                                        *p = *p + v * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        d_in
    }
}

impl ConvNet<f32> {
    /// He-normal weights, zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        let mut rng = rng_from_seed(seed);
        let mut params = vec![0.0f32; layout.total];
        for layer in &layout.convs {
            let fan_in = (layer.kernel * layer.kernel * layer.in_channels) as f64;
            let std = (2.0 / fan_in).sqrt();
            for p in &mut params[layer.weight_offset..layer.weight_offset + layer.weight_len()] {
                *p = (std * rng.sample::<f64, _>(StandardNormal)) as f32;
            }
        }
        let std = (2.0 / layout.features as f64).sqrt();
        for p in &mut params[layout.dense_weights..layout.dense_bias] {
            *p = (std * rng.sample::<f64, _>(StandardNormal)) as f32;
        }
        Self::new(arch, params)
    }
}

/// 2x2 stride-2 max-pool of `relu(pre)`. Winners are the first maximal
/// entry of each window in scan order.
fn max_pool_relu<T: Scalar>(pre: &[T], h: usize, w: usize, c: usize) -> (Vec<T>, Vec<u32>) {
    let (ph, pw) = (h / 2, w / 2);
    let mut pooled = vec![T::zero(); ph * pw * c];
    let mut winners = vec![0u32; ph * pw * c];
    for py in 0..ph {
        for px in 0..pw {
            for ch in 0..c {
                let mut best = ((2 * py) * w + 2 * px) * c + ch;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = ((2 * py + dy) * w + 2 * px + dx) * c + ch;
                    if pre[idx] > pre[best] {
                        best = idx;
                    }
                }
                let o = (py * pw + px) * c + ch;
                pooled[o] = pre[best].max(T::zero());
                winners[o] = best as u32;
            }
        }
    }
    (pooled, winners)
}

impl Classifier for ConvNet<f32> {
    fn input_dims(&self) -> Dims {
        self.arch.input
    }

    fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    fn logits_unchecked(&self, input: &[f32]) -> Vec<f32> {
        self.trace(input).logits
    }

    fn score_gradient_unchecked(&self, input: &[f32], class: usize, kind: ScoreKind) -> Vec<f32> {
        let trace = self.trace(input);
        let upstream = kind.upstream(&trace.logits, class);
        self.backward(&trace, &upstream, None)
    }
}
