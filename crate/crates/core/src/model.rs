//! Network topology, weights, and plaintext execution.
//!
//! A [`NetworkSpec`] is a flat list of [`LayerSpec`]s applied to `(M, C, H, W)`
//! batches; [`ModelWeights`] holds one [`LayerWeights`] per layer. The
//! optimized SqueezeNet built by [`build_squeezenet_opt`] groups these into
//! Conv modules (convolution, activation, batch norm), Fire modules, and
//! average-pool modules ending in global average pooling.

use ndarray::{Array1, Array2, Array4, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::activation::{relu, relu_grad, Granularity, PolyActivation};
use crate::error::{shape_err, Error, Result};
use crate::ops;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ActivationKind {
    Relu,
    Poly { granularity: Granularity },
}

impl ActivationKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(ActivationKind::Relu),
            other => {
                let g = other.strip_prefix("poly-").unwrap_or(other);
                Ok(ActivationKind::Poly {
                    granularity: g.parse()?,
                })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        channels: usize,
        eps: f64,
    },
    /// Per-channel `scale * x + shift`; what a frozen batch norm folds into.
    Affine {
        channels: usize,
    },
    Activation {
        activation: ActivationKind,
    },
    AvgPool {
        window: usize,
        stride: usize,
    },
    GlobalAvgPool,
    /// Squeeze 1x1 conv feeding a 1x1 and a padded 3x3 expand conv whose
    /// outputs are concatenated along channels. The module is linear; its
    /// activation is the layer that follows it.
    Fire {
        in_ch: usize,
        squeeze: usize,
        expand1x1: usize,
        expand3x3: usize,
    },
}

impl LayerSpec {
    pub fn conv(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        LayerSpec::Conv {
            in_ch,
            out_ch,
            kernel,
            stride: 1,
            padding: kernel / 2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::BatchNorm { .. } => "batch_norm",
            LayerSpec::Affine { .. } => "affine",
            LayerSpec::Activation { .. } => "activation",
            LayerSpec::AvgPool { .. } => "avg_pool",
            LayerSpec::GlobalAvgPool => "global_avg_pool",
            LayerSpec::Fire { .. } => "fire",
        }
    }

    pub fn output_shape(&self, (c, h, w): (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        let need = |ch: usize| -> Result<()> {
            if ch != c {
                return shape_err(format!("{} expects {ch} channels, got {c}", self.name()));
            }
            Ok(())
        };
        match *self {
            LayerSpec::Conv {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            } => {
                need(in_ch)?;
                match (
                    ops::conv_out_dim(h, kernel, stride, padding),
                    ops::conv_out_dim(w, kernel, stride, padding),
                ) {
                    (Some(ho), Some(wo)) if kernel > 0 => Ok((out_ch, ho, wo)),
                    _ => shape_err(format!("conv kernel {kernel} does not fit {h}x{w}")),
                }
            }
            LayerSpec::BatchNorm { channels, .. } | LayerSpec::Affine { channels } => {
                need(channels)?;
                Ok((c, h, w))
            }
            LayerSpec::Activation { .. } => Ok((c, h, w)),
            LayerSpec::AvgPool { window, stride } => {
                match (
                    ops::conv_out_dim(h, window, stride, 0),
                    ops::conv_out_dim(w, window, stride, 0),
                ) {
                    (Some(ho), Some(wo)) if window > 0 => Ok((c, ho, wo)),
                    _ => shape_err(format!("pool window {window} does not fit {h}x{w}")),
                }
            }
            LayerSpec::GlobalAvgPool => Ok((c, 1, 1)),
            LayerSpec::Fire {
                in_ch,
                expand1x1,
                expand3x3,
                ..
            } => {
                need(in_ch)?;
                Ok((expand1x1 + expand3x3, h, w))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// `(channels, height, width)` of one input image.
    pub input: (usize, usize, usize),
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ModuleCounts {
    pub conv: usize,
    pub fire: usize,
    pub pool: usize,
}

impl NetworkSpec {
    /// Input shape of every layer followed by the output shape.
    pub fn shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let mut shapes = vec![self.input];
        for layer in &self.layers {
            let next = layer.output_shape(*shapes.last().unwrap())?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        let out = *self.shapes()?.last().unwrap();
        if out != (self.num_classes, 1, 1) {
            return shape_err(format!(
                "network produces {out:?}, expected ({}, 1, 1)",
                self.num_classes
            ));
        }
        Ok(())
    }

    pub fn module_counts(&self) -> ModuleCounts {
        let mut m = ModuleCounts::default();
        for l in &self.layers {
            match l {
                LayerSpec::Conv { .. } => m.conv += 1,
                LayerSpec::Fire { .. } => m.fire += 1,
                LayerSpec::AvgPool { .. } | LayerSpec::GlobalAvgPool => m.pool += 1,
                _ => {}
            }
        }
        m
    }

    /// Replaces the kind of every activation layer.
    pub fn with_activation(&self, activation: ActivationKind) -> Self {
        let mut spec = self.clone();
        for l in &mut spec.layers {
            if let LayerSpec::Activation { activation: a } = l {
                *a = activation;
            }
        }
        spec
    }

    pub fn activations(&self) -> impl Iterator<Item = ActivationKind> + '_ {
        self.layers.iter().filter_map(|l| match l {
            LayerSpec::Activation { activation } => Some(*activation),
            _ => None,
        })
    }

    pub fn is_polynomial(&self) -> bool {
        self.activations().all(|a| a != ActivationKind::Relu)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Channel widths of the optimized SqueezeNet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SqueezeNetWidths {
    pub conv1: usize,
    pub fire1_squeeze: usize,
    pub fire1_expand: usize,
    pub conv2: usize,
    pub fire2_squeeze: usize,
    pub fire2_expand: usize,
    pub conv3: usize,
}

impl Default for SqueezeNetWidths {
    fn default() -> Self {
        Self {
            conv1: 32,
            fire1_squeeze: 16,
            fire1_expand: 32,
            conv2: 64,
            fire2_squeeze: 16,
            fire2_expand: 32,
            conv3: 64,
        }
    }
}

pub fn build_squeezenet_opt(
    num_classes: usize,
    input: (usize, usize, usize),
    activation: ActivationKind,
) -> Result<NetworkSpec> {
    build_squeezenet_opt_with(num_classes, input, activation, &SqueezeNetWidths::default())
}

/// Conv1, Pool1, Fire1, Pool2, Conv2, Fire2, Conv3, Conv4, global pool; every
/// Conv and Fire module is followed by an activation and a batch norm.
pub fn build_squeezenet_opt_with(
    num_classes: usize,
    input: (usize, usize, usize),
    activation: ActivationKind,
    w: &SqueezeNetWidths,
) -> Result<NetworkSpec> {
    let act = || LayerSpec::Activation { activation };
    let bn = |channels| LayerSpec::BatchNorm { channels, eps: BN_EPS };
    let pool = || LayerSpec::AvgPool { window: 2, stride: 2 };
    let f1 = 2 * w.fire1_expand;
    let f2 = 2 * w.fire2_expand;
    let layers = vec![
        LayerSpec::conv(input.0, w.conv1, 3),
        act(),
        bn(w.conv1),
        pool(),
        LayerSpec::Fire {
            in_ch: w.conv1,
            squeeze: w.fire1_squeeze,
            expand1x1: w.fire1_expand,
            expand3x3: w.fire1_expand,
        },
        act(),
        bn(f1),
        pool(),
        LayerSpec::conv(f1, w.conv2, 3),
        act(),
        bn(w.conv2),
        LayerSpec::Fire {
            in_ch: w.conv2,
            squeeze: w.fire2_squeeze,
            expand1x1: w.fire2_expand,
            expand3x3: w.fire2_expand,
        },
        act(),
        bn(f2),
        LayerSpec::conv(f2, w.conv3, 1),
        act(),
        bn(w.conv3),
        LayerSpec::conv(w.conv3, num_classes, 1),
        act(),
        bn(num_classes),
        LayerSpec::GlobalAvgPool,
    ];
    let spec = NetworkSpec {
        input,
        num_classes,
        layers,
    };
    spec.validate()?;
    Ok(spec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvWeights {
    /// `(out, in, k, k)`.
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

impl ConvWeights {
    pub fn zeros(out_ch: usize, in_ch: usize, k: usize) -> Self {
        Self {
            weight: Array4::zeros((out_ch, in_ch, k, k)),
            bias: Array1::zeros(out_ch),
        }
    }

    /// He-normal weights, zero bias.
    pub fn init<R: Rng + ?Sized>(out_ch: usize, in_ch: usize, k: usize, rng: &mut R) -> Self {
        let std = (2.0 / (in_ch * k * k) as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        Self {
            weight: Array4::from_shape_simple_fn((out_ch, in_ch, k, k), || normal.sample(rng)),
            bias: Array1::zeros(out_ch),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormWeights {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNormWeights {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineWeights {
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerWeights {
    Conv(ConvWeights),
    BatchNorm(BatchNormWeights),
    Affine(AffineWeights),
    Poly(PolyActivation),
    Fire {
        squeeze: ConvWeights,
        expand1x1: ConvWeights,
        expand3x3: ConvWeights,
    },
    None,
}

/// Which family a trainable tensor belongs to; regularization and tests
/// select on it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    NormScale,
    NormShift,
    Coefficient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub layers: Vec<LayerWeights>,
}

fn conv_slices(c: &ConvWeights) -> [(ParamKind, &[f64]); 2] {
    [
        (ParamKind::ConvWeight, c.weight.as_slice().expect("standard layout")),
        (ParamKind::ConvBias, c.bias.as_slice().expect("standard layout")),
    ]
}

fn conv_slices_mut(c: &mut ConvWeights) -> [(ParamKind, &mut [f64]); 2] {
    [
        (ParamKind::ConvWeight, c.weight.as_slice_mut().expect("standard layout")),
        (ParamKind::ConvBias, c.bias.as_slice_mut().expect("standard layout")),
    ]
}

impl ModelWeights {
    /// Fresh weights: He-normal convolutions, identity batch norms, and
    /// polynomial activations at identity plus `coeff_noise` uniform noise.
    pub fn init<R: Rng + ?Sized>(spec: &NetworkSpec, coeff_noise: f64, rng: &mut R) -> Result<Self> {
        let shapes = spec.shapes()?;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (layer, &shape) in spec.layers.iter().zip(&shapes) {
            layers.push(match *layer {
                LayerSpec::Conv {
                    in_ch, out_ch, kernel, ..
                } => LayerWeights::Conv(ConvWeights::init(out_ch, in_ch, kernel, rng)),
                LayerSpec::BatchNorm { channels, .. } => LayerWeights::BatchNorm(BatchNormWeights::new(channels)),
                LayerSpec::Affine { channels } => LayerWeights::Affine(AffineWeights {
                    scale: Array1::ones(channels),
                    shift: Array1::zeros(channels),
                }),
                LayerSpec::Activation {
                    activation: ActivationKind::Poly { granularity },
                } => LayerWeights::Poly(PolyActivation::identity_with_noise(
                    granularity,
                    shape,
                    coeff_noise,
                    rng,
                )),
                LayerSpec::Fire {
                    in_ch,
                    squeeze,
                    expand1x1,
                    expand3x3,
                } => LayerWeights::Fire {
                    squeeze: ConvWeights::init(squeeze, in_ch, 1, rng),
                    expand1x1: ConvWeights::init(expand1x1, squeeze, 1, rng),
                    expand3x3: ConvWeights::init(expand3x3, squeeze, 3, rng),
                },
                _ => LayerWeights::None,
            });
        }
        Ok(Self { layers })
    }

    /// Checks that every layer carries weights of the right kind and shape.
    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        if self.layers.len() != spec.layers.len() {
            return shape_err(format!(
                "{} weight entries for {} layers",
                self.layers.len(),
                spec.layers.len()
            ));
        }
        let shapes = spec.shapes()?;
        let conv_ok =
            |c: &ConvWeights, o: usize, i: usize, k: usize| c.weight.dim() == (o, i, k, k) && c.bias.len() == o;
        for (idx, ((layer, weights), &shape)) in spec.layers.iter().zip(&self.layers).zip(&shapes).enumerate() {
            let ok = match (layer, weights) {
                (
                    LayerSpec::Conv {
                        in_ch, out_ch, kernel, ..
                    },
                    LayerWeights::Conv(c),
                ) => conv_ok(c, *out_ch, *in_ch, *kernel),
                (LayerSpec::BatchNorm { channels, .. }, LayerWeights::BatchNorm(b)) => {
                    [&b.gamma, &b.beta, &b.running_mean, &b.running_var]
                        .iter()
                        .all(|a| a.len() == *channels)
                }
                (LayerSpec::Affine { channels }, LayerWeights::Affine(a)) => {
                    a.scale.len() == *channels && a.shift.len() == *channels
                }
                (
                    LayerSpec::Activation {
                        activation: ActivationKind::Poly { granularity },
                    },
                    LayerWeights::Poly(p),
                ) => {
                    p.granularity == *granularity
                        && p.shape == shape
                        && p.coeffs.dim() == (PolyActivation::group_count(*granularity, shape), 3)
                }
                (
                    LayerSpec::Activation {
                        activation: ActivationKind::Relu,
                    },
                    LayerWeights::None,
                ) => true,
                (
                    LayerSpec::Fire {
                        in_ch,
                        squeeze,
                        expand1x1,
                        expand3x3,
                    },
                    LayerWeights::Fire {
                        squeeze: s,
                        expand1x1: e1,
                        expand3x3: e3,
                    },
                ) => {
                    conv_ok(s, *squeeze, *in_ch, 1)
                        && conv_ok(e1, *expand1x1, *squeeze, 1)
                        && conv_ok(e3, *expand3x3, *squeeze, 3)
                }
                (LayerSpec::AvgPool { .. } | LayerSpec::GlobalAvgPool, LayerWeights::None) => true,
                _ => false,
            };
            if !ok {
                return shape_err(format!("weights for layer {idx} ({}) do not match", layer.name()));
            }
        }
        Ok(())
    }

    /// Zeros with the same structure; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.visit_mut(|_, s| s.fill(0.0));
        for l in &mut out.layers {
            if let LayerWeights::BatchNorm(b) = l {
                b.running_mean.fill(0.0);
                b.running_var.fill(0.0);
            }
        }
        out
    }

    /// Trainable tensors in a fixed order. Batch-norm running statistics
    /// are state, not parameters, and are not listed.
    pub fn params(&self) -> Vec<(ParamKind, &[f64])> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                LayerWeights::Conv(c) => out.extend(conv_slices(c)),
                LayerWeights::BatchNorm(b) => {
                    out.push((ParamKind::NormScale, b.gamma.as_slice().unwrap()));
                    out.push((ParamKind::NormShift, b.beta.as_slice().unwrap()));
                }
                LayerWeights::Affine(a) => {
                    out.push((ParamKind::NormScale, a.scale.as_slice().unwrap()));
                    out.push((ParamKind::NormShift, a.shift.as_slice().unwrap()));
                }
                LayerWeights::Poly(p) => out.push((ParamKind::Coefficient, p.coeffs.as_slice().unwrap())),
                LayerWeights::Fire {
                    squeeze,
                    expand1x1,
                    expand3x3,
                } => {
                    out.extend(conv_slices(squeeze));
                    out.extend(conv_slices(expand1x1));
                    out.extend(conv_slices(expand3x3));
                }
                LayerWeights::None => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(ParamKind, &mut [f64])> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                LayerWeights::Conv(c) => out.extend(conv_slices_mut(c)),
                LayerWeights::BatchNorm(b) => {
                    out.push((ParamKind::NormScale, b.gamma.as_slice_mut().unwrap()));
                    out.push((ParamKind::NormShift, b.beta.as_slice_mut().unwrap()));
                }
                LayerWeights::Affine(a) => {
                    out.push((ParamKind::NormScale, a.scale.as_slice_mut().unwrap()));
                    out.push((ParamKind::NormShift, a.shift.as_slice_mut().unwrap()));
                }
                LayerWeights::Poly(p) => out.push((ParamKind::Coefficient, p.coeffs.as_slice_mut().unwrap())),
                LayerWeights::Fire {
                    squeeze,
                    expand1x1,
                    expand3x3,
                } => {
                    out.extend(conv_slices_mut(squeeze));
                    out.extend(conv_slices_mut(expand1x1));
                    out.extend(conv_slices_mut(expand3x3));
                }
                LayerWeights::None => {}
            }
        }
        out
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(ParamKind, &mut [f64])) {
        for (k, s) in self.params_mut() {
            f(k, s);
        }
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, s)| s.len()).sum()
    }

    /// Makes every array standard-layout so parameter slices are available.
    pub fn normalize_layout(&mut self) {
        let fix4 = |a: &mut Array4<f64>| *a = a.as_standard_layout().into_owned();
        let fix_conv = |c: &mut ConvWeights| fix4(&mut c.weight);
        for l in &mut self.layers {
            match l {
                LayerWeights::Conv(c) => fix_conv(c),
                LayerWeights::Poly(p) => p.coeffs = p.coeffs.as_standard_layout().into_owned(),
                LayerWeights::Fire {
                    squeeze,
                    expand1x1,
                    expand3x3,
                } => {
                    fix_conv(squeeze);
                    fix_conv(expand1x1);
                    fix_conv(expand3x3);
                }
                _ => {}
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

#[derive(Clone, Debug)]
pub struct BatchNormCache {
    pub xhat: Array4<f64>,
    pub inv_std: Array1<f64>,
    pub mean: Array1<f64>,
    /// Unbiased batch variance, for the running estimate.
    pub var: Array1<f64>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub mode: Mode,
    /// Input of every layer.
    pub inputs: Vec<Array4<f64>>,
    pub batch_norm: Vec<Option<BatchNormCache>>,
    /// Squeeze output of Fire layers.
    pub squeezed: Vec<Option<Array4<f64>>>,
}

fn per_channel(x: &Array4<f64>, f: impl Fn(usize, f64) -> f64) -> Array4<f64> {
    let mut out = x.clone();
    for (c, mut plane) in out.axis_iter_mut(Axis(1)).enumerate() {
        plane.mapv_inplace(|v| f(c, v));
    }
    out
}

fn channel_sums(x: &Array4<f64>) -> Array1<f64> {
    x.sum_axis(Axis(0)).sum_axis(Axis(1)).sum_axis(Axis(1))
}

fn fire_forward(
    x: &Array4<f64>,
    s: &ConvWeights,
    e1: &ConvWeights,
    e3: &ConvWeights,
) -> Result<(Array4<f64>, Array4<f64>)> {
    let sq = ops::conv2d(x, &s.weight, &s.bias, 1, 0)?;
    let a = ops::conv2d(&sq, &e1.weight, &e1.bias, 1, 0)?;
    let b = ops::conv2d(&sq, &e3.weight, &e3.bias, 1, 1)?;
    let out = ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("same spatial dims");
    Ok((out, sq))
}

fn batch_norm_train(x: &Array4<f64>, bn: &BatchNormWeights, eps: f64) -> (Array4<f64>, BatchNormCache) {
    let (m, _, h, w) = x.dim();
    let count = (m * h * w) as f64;
    let mean = channel_sums(x) / count;
    let centered = per_channel(x, |c, v| v - mean[c]);
    let var_b = channel_sums(&centered.mapv(|v| v * v)) / count;
    let inv_std = var_b.mapv(|v| 1.0 / (v + eps).sqrt());
    let xhat = per_channel(&centered, |c, v| v * inv_std[c]);
    let y = per_channel(&xhat, |c, v| bn.gamma[c] * v + bn.beta[c]);
    let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
    let cache = BatchNormCache {
        xhat,
        inv_std,
        mean,
        var: var_b * unbias,
    };
    (y, cache)
}

/// Plaintext forward pass; returns the final `(M, classes, 1, 1)` tensor.
pub fn forward(
    spec: &NetworkSpec,
    weights: &ModelWeights,
    x: &Array4<f64>,
    mode: Mode,
) -> Result<(Array4<f64>, ForwardCache)> {
    let (_, c, h, w) = x.dim();
    if (c, h, w) != spec.input {
        return shape_err(format!(
            "input {:?} does not match network input {:?}",
            (c, h, w),
            spec.input
        ));
    }
    let n = spec.layers.len();
    if weights.layers.len() != n {
        return shape_err("weights do not match the network");
    }
    let mut cache = ForwardCache {
        mode,
        inputs: Vec::with_capacity(n),
        batch_norm: vec![None; n],
        squeezed: vec![None; n],
    };
    let mut cur = x.clone();
    for (i, (layer, lw)) in spec.layers.iter().zip(&weights.layers).enumerate() {
        let next = match (layer, lw) {
            (LayerSpec::Conv { stride, padding, .. }, LayerWeights::Conv(cw)) => {
                ops::conv2d(&cur, &cw.weight, &cw.bias, *stride, *padding)?
            }
            (LayerSpec::BatchNorm { eps, .. }, LayerWeights::BatchNorm(bn)) => match mode {
                Mode::Train => {
                    let (y, c) = batch_norm_train(&cur, bn, *eps);
                    cache.batch_norm[i] = Some(c);
                    y
                }
                Mode::Eval => per_channel(&cur, |c, v| {
                    bn.gamma[c] * (v - bn.running_mean[c]) / (bn.running_var[c] + eps).sqrt() + bn.beta[c]
                }),
            },
            (LayerSpec::Affine { .. }, LayerWeights::Affine(a)) => {
                per_channel(&cur, |c, v| a.scale[c] * v + a.shift[c])
            }
            (
                LayerSpec::Activation {
                    activation: ActivationKind::Relu,
                },
                _,
            ) => relu(&cur),
            (LayerSpec::Activation { .. }, LayerWeights::Poly(p)) => p.eval(&cur)?,
            (LayerSpec::AvgPool { window, stride }, _) => ops::avg_pool(&cur, *window, *stride)?,
            (LayerSpec::GlobalAvgPool, _) => ops::global_avg_pool(&cur),
            (
                LayerSpec::Fire { .. },
                LayerWeights::Fire {
                    squeeze,
                    expand1x1,
                    expand3x3,
                },
            ) => {
                let (out, sq) = fire_forward(&cur, squeeze, expand1x1, expand3x3)?;
                cache.squeezed[i] = Some(sq);
                out
            }
            _ => return shape_err(format!("weights for layer {i} ({}) do not match", layer.name())),
        };
        cache.inputs.push(std::mem::replace(&mut cur, next));
    }
    Ok((cur, cache))
}

/// Forward in eval mode, flattened to `(M, classes)` logits.
pub fn logits(spec: &NetworkSpec, weights: &ModelWeights, x: &Array4<f64>) -> Result<Array2<f64>> {
    let (out, _) = forward(spec, weights, x, Mode::Eval)?;
    Ok(flatten_logits(out))
}

pub fn flatten_logits(out: Array4<f64>) -> Array2<f64> {
    let (m, c, h, w) = out.dim();
    out.into_shape_with_order((m, c * h * w)).expect("contiguous output")
}

/// Gradients of `sum(upstream * output)` for every parameter, plus the
/// gradient with respect to the input batch.
pub fn backward(
    spec: &NetworkSpec,
    weights: &ModelWeights,
    cache: &ForwardCache,
    upstream: &Array4<f64>,
) -> Result<(ModelWeights, Array4<f64>)> {
    let mut grads = weights.zeros_like();
    let mut g = upstream.clone();
    for i in (0..spec.layers.len()).rev() {
        let x = &cache.inputs[i];
        let layer = &spec.layers[i];
        g = match (layer, &weights.layers[i], &mut grads.layers[i]) {
            (LayerSpec::Conv { stride, padding, .. }, LayerWeights::Conv(cw), LayerWeights::Conv(gw)) => {
                let r = ops::conv2d_backward(x, &cw.weight, *stride, *padding, &g)?;
                gw.weight = r.weight;
                gw.bias = r.bias;
                r.input
            }
            (LayerSpec::BatchNorm { eps, .. }, LayerWeights::BatchNorm(bn), LayerWeights::BatchNorm(gb)) => {
                match (&cache.batch_norm[i], cache.mode) {
                    (Some(c), Mode::Train) => {
                        let (m, _, h, w) = x.dim();
                        let count = (m * h * w) as f64;
                        gb.gamma = channel_sums(&(&g * &c.xhat));
                        gb.beta = channel_sums(&g);
                        let dxhat = per_channel(&g, |ch, v| v * bn.gamma[ch]);
                        let sum_d = channel_sums(&dxhat);
                        let sum_dx = channel_sums(&(&dxhat * &c.xhat));
                        let mut dx = dxhat;
                        for (ch, (mut plane, xh)) in
                            dx.axis_iter_mut(Axis(1)).zip(c.xhat.axis_iter(Axis(1))).enumerate()
                        {
                            let k = c.inv_std[ch] / count;
                            Zip::from(&mut plane).and(&xh).for_each(|d, &xv| {
                                *d = k * (count * *d - sum_d[ch] - xv * sum_dx[ch]);
                            });
                        }
                        dx
                    }
                    _ => {
                        let inv = bn.running_var.mapv(|v| 1.0 / (v + eps).sqrt());
                        let xhat = per_channel(x, |ch, v| (v - bn.running_mean[ch]) * inv[ch]);
                        gb.gamma = channel_sums(&(&g * &xhat));
                        gb.beta = channel_sums(&g);
                        per_channel(&g, |ch, v| v * bn.gamma[ch] * inv[ch])
                    }
                }
            }
            (LayerSpec::Affine { .. }, LayerWeights::Affine(a), LayerWeights::Affine(ga)) => {
                ga.scale = channel_sums(&(&g * x));
                ga.shift = channel_sums(&g);
                per_channel(&g, |ch, v| v * a.scale[ch])
            }
            (
                LayerSpec::Activation {
                    activation: ActivationKind::Relu,
                },
                _,
                _,
            ) => relu_grad(x, &g),
            (LayerSpec::Activation { .. }, LayerWeights::Poly(p), LayerWeights::Poly(gp)) => {
                gp.coeffs = p.grad_coeffs(x, &g)?;
                p.grad_input(x, &g)?
            }
            (LayerSpec::AvgPool { window, stride }, _, _) => ops::avg_pool_backward(x.dim(), *window, *stride, &g),
            (LayerSpec::GlobalAvgPool, _, _) => ops::global_avg_pool_backward(x.dim(), &g),
            (
                LayerSpec::Fire { expand1x1: e1ch, .. },
                LayerWeights::Fire {
                    squeeze,
                    expand1x1,
                    expand3x3,
                },
                LayerWeights::Fire {
                    squeeze: gs,
                    expand1x1: g1,
                    expand3x3: g3,
                },
            ) => {
                let sq = cache.squeezed[i].as_ref().expect("fire cache");
                let ga = g.slice_axis(Axis(1), (0..*e1ch).into()).to_owned();
                let gb = g.slice_axis(Axis(1), (*e1ch..).into()).to_owned();
                let r1 = ops::conv2d_backward(sq, &expand1x1.weight, 1, 0, &ga)?;
                let r3 = ops::conv2d_backward(sq, &expand3x3.weight, 1, 1, &gb)?;
                let dsq = r1.input + r3.input;
                let rs = ops::conv2d_backward(x, &squeeze.weight, 1, 0, &dsq)?;
                (g1.weight, g1.bias) = (r1.weight, r1.bias);
                (g3.weight, g3.bias) = (r3.weight, r3.bias);
                (gs.weight, gs.bias) = (rs.weight, rs.bias);
                rs.input
            }
            _ => return shape_err(format!("weights for layer {i} ({}) do not match", layer.name())),
        };
    }
    Ok((grads, g))
}

/// Moves batch-norm running statistics towards the batch statistics of a
/// training-mode forward pass.
pub fn update_running_stats(weights: &mut ModelWeights, cache: &ForwardCache, momentum: f64) {
    for (lw, c) in weights.layers.iter_mut().zip(&cache.batch_norm) {
        if let (LayerWeights::BatchNorm(bn), Some(c)) = (lw, c) {
            bn.running_mean = &bn.running_mean * (1.0 - momentum) + &c.mean * momentum;
            bn.running_var = &bn.running_var * (1.0 - momentum) + &c.var * momentum;
        }
    }
}

/// Replaces every batch norm by the per-channel affine map it computes with
/// its running statistics. Already-folded networks come back unchanged.
pub fn fold_batchnorm(spec: &NetworkSpec, weights: &ModelWeights) -> Result<(NetworkSpec, ModelWeights)> {
    let mut s = spec.clone();
    let mut w = weights.clone();
    for (layer, lw) in s.layers.iter_mut().zip(w.layers.iter_mut()) {
        if let (LayerSpec::BatchNorm { channels, eps }, LayerWeights::BatchNorm(bn)) = (&*layer, &*lw) {
            if bn.running_var.iter().any(|&v| !(v >= 0.0) || !v.is_finite())
                || bn.running_mean.iter().any(|v| !v.is_finite())
            {
                return Err(Error::UnfrozenBatchNorm);
            }
            let scale = Zip::from(&bn.gamma)
                .and(&bn.running_var)
                .map_collect(|&g, &v| g / (v + eps).sqrt());
            let shift = &bn.beta - &(&bn.running_mean * &scale);
            let channels = *channels;
            *lw = LayerWeights::Affine(AffineWeights { scale, shift });
            *layer = LayerSpec::Affine { channels };
        }
    }
    Ok((s, w))
}

/// The reduced topology used for encrypted runs on the desk parameter set:
/// the same module types as the full network but depth 7, so it fits a
/// 10-level chain.
pub fn build_desk_net(
    num_classes: usize,
    input: (usize, usize, usize),
    activation: ActivationKind,
) -> Result<NetworkSpec> {
    let act = || LayerSpec::Activation { activation };
    let bn = |channels| LayerSpec::BatchNorm { channels, eps: BN_EPS };
    let pool = || LayerSpec::AvgPool { window: 2, stride: 2 };
    let layers = vec![
        LayerSpec::conv(input.0, 8, 3),
        act(),
        bn(8),
        pool(),
        LayerSpec::Fire {
            in_ch: 8,
            squeeze: 4,
            expand1x1: 8,
            expand3x3: 8,
        },
        act(),
        bn(16),
        pool(),
        LayerSpec::conv(16, num_classes, 1),
        bn(num_classes),
        LayerSpec::GlobalAvgPool,
    ];
    let spec = NetworkSpec {
        input,
        num_classes,
        layers,
    };
    spec.validate()?;
    Ok(spec)
}

/// A small random polynomial network with batch norms carrying random
/// running statistics, shallow enough for a 10-level chain. Used for
/// fidelity sweeps and demos.
pub fn random_toy_network<R: Rng + ?Sized>(
    rng: &mut R,
    input: (usize, usize, usize),
    num_classes: usize,
) -> Result<(NetworkSpec, ModelWeights)> {
    let gran = |rng: &mut R| crate::activation::Granularity::ALL[rng.gen_range(0..3)];
    let poly = |g| LayerSpec::Activation {
        activation: ActivationKind::Poly { granularity: g },
    };
    let bn = |channels| LayerSpec::BatchNorm { channels, eps: BN_EPS };
    let c1 = rng.gen_range(2..=4);
    let k = if rng.gen_bool(0.5) { 3 } else { 1 };
    let mut layers = vec![
        LayerSpec::Conv {
            in_ch: input.0,
            out_ch: c1,
            kernel: k,
            stride: 1,
            padding: k / 2,
        },
        poly(gran(rng)),
        bn(c1),
    ];
    let mut ch = c1;
    if input.1 % 2 == 0 && input.2 % 2 == 0 && rng.gen_bool(0.5) {
        layers.push(LayerSpec::AvgPool { window: 2, stride: 2 });
    }
    if rng.gen_bool(0.5) {
        let e = rng.gen_range(1..=2);
        layers.push(LayerSpec::Fire {
            in_ch: ch,
            squeeze: rng.gen_range(1..=2),
            expand1x1: e,
            expand3x3: e,
        });
        ch = 2 * e;
        layers.push(poly(gran(rng)));
        layers.push(bn(ch));
    }
    layers.push(LayerSpec::conv(ch, num_classes, 1));
    if rng.gen_bool(0.5) {
        layers.push(bn(num_classes));
    }
    layers.push(LayerSpec::GlobalAvgPool);
    let spec = NetworkSpec {
        input,
        num_classes,
        layers,
    };
    spec.validate()?;
    let mut weights = ModelWeights::init(&spec, 0.2, rng)?;
    for lw in &mut weights.layers {
        if let LayerWeights::BatchNorm(b) = lw {
            b.gamma.mapv_inplace(|_| rng.gen_range(0.5..1.5));
            b.beta.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
            b.running_mean.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
            b.running_var.mapv_inplace(|_| rng.gen_range(0.5..2.0));
        }
    }
    Ok((spec, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(9)
    }

    fn random(rng: &mut ChaCha8Rng, dims: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_fn(dims, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn squeezenet_module_counts() {
        let relu = ActivationKind::Relu;
        let spec = build_squeezenet_opt(10, (3, 32, 32), relu).unwrap();
        assert_eq!(
            spec.module_counts(),
            ModuleCounts {
                conv: 4,
                fire: 2,
                pool: 3
            }
        );
        assert_eq!(*spec.layers.last().unwrap(), LayerSpec::GlobalAvgPool);
        assert_eq!(*spec.shapes().unwrap().last().unwrap(), (10, 1, 1));
        let five = build_squeezenet_opt(5, (3, 112, 112), relu).unwrap();
        assert_eq!(*five.shapes().unwrap().last().unwrap(), (5, 1, 1));
        assert!(build_squeezenet_opt(1, (3, 32, 32), relu).is_err());
        assert!(build_squeezenet_opt(10, (3, 2, 2), relu).is_err());
    }

    #[test]
    fn fire_output_channels() {
        let f = LayerSpec::Fire {
            in_ch: 8,
            squeeze: 4,
            expand1x1: 5,
            expand3x3: 7,
        };
        assert_eq!(f.output_shape((8, 6, 6)).unwrap(), (12, 6, 6));
        assert!(f.output_shape((7, 6, 6)).is_err());
    }

    fn small_spec(act: ActivationKind) -> NetworkSpec {
        NetworkSpec {
            input: (2, 6, 6),
            num_classes: 3,
            layers: vec![
                LayerSpec::conv(2, 4, 3),
                LayerSpec::Activation { activation: act },
                LayerSpec::BatchNorm {
                    channels: 4,
                    eps: BN_EPS,
                },
                LayerSpec::AvgPool { window: 2, stride: 2 },
                LayerSpec::Fire {
                    in_ch: 4,
                    squeeze: 2,
                    expand1x1: 2,
                    expand3x3: 2,
                },
                LayerSpec::Activation { activation: act },
                LayerSpec::conv(4, 3, 1),
                LayerSpec::GlobalAvgPool,
            ],
        }
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let spec = small_spec(ActivationKind::Poly {
            granularity: Granularity::Channel,
        });
        let mut w = ModelWeights::init(&spec, 0.0, &mut rng()).unwrap();
        w.visit_mut(|k, s| {
            if matches!(k, ParamKind::ConvWeight | ParamKind::ConvBias) {
                s.fill(0.0)
            }
        });
        let x = random(&mut rng(), (3, 2, 6, 6));
        let out = logits(&spec, &w, &x).unwrap();
        assert_eq!(out.dim(), (3, 3));
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_pointwise_conv_reproduces_input() {
        let spec = NetworkSpec {
            input: (3, 4, 4),
            num_classes: 3,
            layers: vec![LayerSpec::conv(3, 3, 1)],
        };
        let mut cw = ConvWeights::zeros(3, 3, 1);
        for c in 0..3 {
            cw.weight[[c, c, 0, 0]] = 1.0;
        }
        let w = ModelWeights {
            layers: vec![LayerWeights::Conv(cw)],
        };
        let x = random(&mut rng(), (2, 3, 4, 4));
        assert_eq!(forward(&spec, &w, &x, Mode::Eval).unwrap().0, x);
    }

    #[test]
    fn folding_preserves_eval_outputs() {
        let mut r = rng();
        let spec = small_spec(ActivationKind::Poly {
            granularity: Granularity::Element,
        });
        let mut w = ModelWeights::init(&spec, 0.1, &mut r).unwrap();
        let x = random(&mut r, (4, 2, 6, 6));
        // identity statistics fold to an identity affine
        let (fs, fw) = fold_batchnorm(&spec, &w).unwrap();
        let LayerWeights::Affine(a) = &fw.layers[2] else {
            panic!()
        };
        assert!(a.scale.iter().all(|&s| (s - 1.0 / (1.0 + BN_EPS).sqrt()).abs() < 1e-15));
        assert!(a.shift.iter().all(|&s| s == 0.0));
        assert_eq!(fs.layers[2], LayerSpec::Affine { channels: 4 });

        if let LayerWeights::BatchNorm(bn) = &mut w.layers[2] {
            bn.gamma = Array1::from_shape_fn(4, |_| r.gen_range(0.5..2.0));
            bn.beta = Array1::from_shape_fn(4, |_| r.gen_range(-1.0..1.0));
            bn.running_mean = Array1::from_shape_fn(4, |_| r.gen_range(-1.0..1.0));
            bn.running_var = Array1::from_shape_fn(4, |_| r.gen_range(0.2..3.0));
        }
        let before = logits(&spec, &w, &x).unwrap();
        let (fs, fw) = fold_batchnorm(&spec, &w).unwrap();
        let after = logits(&fs, &fw, &x).unwrap();
        assert!((&before - &after).mapv(f64::abs).iter().all(|&d| d < 1e-9));
        let (fs2, fw2) = fold_batchnorm(&fs, &fw).unwrap();
        assert_eq!((fs2, fw2), (fs, fw));

        if let LayerWeights::BatchNorm(bn) = &mut w.layers[2] {
            bn.running_var[0] = f64::NAN;
        }
        assert!(matches!(fold_batchnorm(&spec, &w), Err(Error::UnfrozenBatchNorm)));
    }

    #[test]
    fn non_activation_layers_are_linear() {
        let mut r = rng();
        let spec = small_spec(ActivationKind::Relu);
        let w = ModelWeights::init(&spec, 0.0, &mut r).unwrap();
        let (fs, mut fw) = fold_batchnorm(&spec, &w).unwrap();
        // strip biases and shifts so each layer is linear rather than affine
        fw.visit_mut(|k, s| {
            if matches!(k, ParamKind::ConvBias | ParamKind::NormShift) {
                s.fill(0.0)
            }
        });
        for (i, layer) in fs.layers.iter().enumerate() {
            if matches!(layer, LayerSpec::Activation { .. }) {
                continue;
            }
            let one = NetworkSpec {
                input: fs.shapes().unwrap()[i],
                num_classes: 0,
                layers: vec![layer.clone()],
            };
            let ow = ModelWeights {
                layers: vec![fw.layers[i].clone()],
            };
            let (c, h, wd) = one.input;
            let (x, y) = (random(&mut r, (2, c, h, wd)), random(&mut r, (2, c, h, wd)));
            let (a, b) = (1.7, -0.4);
            let f = |t: &Array4<f64>| forward(&one, &ow, t, Mode::Eval).unwrap().0;
            let lhs = f(&(&x * a + &y * b));
            let rhs = f(&x) * a + f(&y) * b;
            assert!(
                (&lhs - &rhs).mapv(f64::abs).iter().all(|&d| d < 1e-9),
                "{}",
                layer.name()
            );
        }
    }

    #[test]
    fn spec_json_roundtrip() {
        let spec = build_squeezenet_opt(
            10,
            (3, 32, 32),
            ActivationKind::Poly {
                granularity: Granularity::Element,
            },
        )
        .unwrap();
        assert_eq!(NetworkSpec::from_json(&spec.to_json()).unwrap(), spec);
        assert_eq!(
            ActivationKind::parse("poly-channel").unwrap(),
            ActivationKind::Poly {
                granularity: Granularity::Channel
            }
        );
        assert_eq!(ActivationKind::parse("relu").unwrap(), ActivationKind::Relu);
        assert!(ActivationKind::parse("tanh").is_err());
    }

    #[test]
    fn weights_check_catches_mismatch() {
        let spec = small_spec(ActivationKind::Relu);
        let mut w = ModelWeights::init(&spec, 0.0, &mut rng()).unwrap();
        w.check(&spec).unwrap();
        w.layers[0] = LayerWeights::Conv(ConvWeights::zeros(4, 2, 1));
        assert!(w.check(&spec).is_err());
    }
}
