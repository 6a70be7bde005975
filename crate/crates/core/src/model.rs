//! Layered network descriptions, parameter keys and initialization.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;
pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const NUM_CLASSES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        InputShape {
            channels,
            height,
            width,
        }
    }

    pub fn volume(&self) -> usize {
        self.channels * self.height * self.width
    }
}

impl fmt::Display for InputShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// One layer of a feed-forward chain.
///
/// `Conv3x3` is always stride 1 with a zero border of width 1, so it keeps
/// the spatial extent of its input.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv3x3 {
        in_channels: usize,
        out_channels: usize,
        bias: bool,
    },
    Dense {
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
    Relu,
    MaxPool2,
    GlobalAvgPool,
    BatchNorm {
        channels: usize,
        momentum: f64,
        eps: f64,
    },
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv3x3 { .. } => "conv3x3",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2 => "maxpool2",
            LayerSpec::GlobalAvgPool => "global_avg_pool",
            LayerSpec::BatchNorm { .. } => "batch_norm",
        }
    }

    pub fn is_batch_norm(&self) -> bool {
        matches!(self, LayerSpec::BatchNorm { .. })
    }
}

/// Activation shape flowing between layers (batch dimension omitted).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActShape {
    Spatial { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl ActShape {
    pub fn volume(&self) -> usize {
        match *self {
            ActShape::Spatial { c, h, w } => c * h * w,
            ActShape::Flat(f) => f,
        }
    }

    /// (channels, positions per channel) as seen by a batch-norm layer.
    pub fn channels_and_extent(&self) -> (usize, usize) {
        match *self {
            ActShape::Spatial { c, h, w } => (c, h * w),
            ActShape::Flat(f) => (f, 1),
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            ActShape::Spatial { c, h, w } => vec![c, h, w],
            ActShape::Flat(f) => vec![f],
        }
    }
}

impl fmt::Display for ActShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActShape::Spatial { c, h, w } => write!(f, "{c}x{h}x{w}"),
            ActShape::Flat(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input: InputShape,
    pub layers: Vec<LayerSpec>,
    pub with_bn: bool,
}

impl ModelSpec {
    /// Stack of `Conv3x3 -> [BatchNorm] -> ReLU -> MaxPool2` blocks, one per
    /// entry of `channels`, then global average pooling and a dense layer to
    /// two logits.
    pub fn conv_blocks(input: InputShape, channels: &[usize], with_bn: bool) -> Self {
        Self::conv_blocks_with_bn(input, channels, with_bn, DEFAULT_BN_MOMENTUM, DEFAULT_BN_EPS)
    }

    pub fn conv_blocks_with_bn(input: InputShape, channels: &[usize], with_bn: bool, momentum: f64, eps: f64) -> Self {
        let mut layers = Vec::new();
        let mut prev = input.channels;
        for &out in channels {
            layers.push(LayerSpec::Conv3x3 {
                in_channels: prev,
                out_channels: out,
                bias: true,
            });
            if with_bn {
                layers.push(LayerSpec::BatchNorm {
                    channels: out,
                    momentum,
                    eps,
                });
            }
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::MaxPool2);
            prev = out;
        }
        layers.push(LayerSpec::GlobalAvgPool);
        layers.push(LayerSpec::Dense {
            in_features: prev,
            out_features: NUM_CLASSES,
            bias: true,
        });
        ModelSpec { input, layers, with_bn }
    }

    /// Default architecture: three blocks of 16/32/64 channels on 3x32x32 input.
    pub fn dcnn(with_bn: bool) -> Self {
        Self::conv_blocks(InputShape::new(3, 32, 32), &[16, 32, 64], with_bn)
    }

    pub fn bn_layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_batch_norm())
            .map(|(i, _)| i)
    }

    /// Checks shape chaining and BN placement, returning every layer's output shape.
    pub fn validate(&self) -> Result<Vec<ActShape>> {
        let InputShape {
            channels,
            height,
            width,
        } = self.input;
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Spec {
                layer: 0,
                next: 0,
                reason: format!("input shape {} has a zero dimension", self.input),
            });
        }
        if self.layers.is_empty() {
            return Err(Error::Spec {
                layer: 0,
                next: 0,
                reason: "model has no layers".into(),
            });
        }

        let mut shape = ActShape::Spatial {
            c: channels,
            h: height,
            w: width,
        };
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let fail = |reason: String| Error::Spec {
                layer: i.saturating_sub(1),
                next: i,
                reason,
            };
            shape = match (*layer, shape) {
                (
                    LayerSpec::Conv3x3 {
                        in_channels,
                        out_channels,
                        ..
                    },
                    ActShape::Spatial { c, h, w },
                ) => {
                    if in_channels != c || in_channels == 0 || out_channels == 0 {
                        return Err(fail(format!(
                            "conv3x3 expects {in_channels} input channels, receives {c}"
                        )));
                    }
                    ActShape::Spatial { c: out_channels, h, w }
                }
                (LayerSpec::Conv3x3 { .. }, ActShape::Flat(f)) => {
                    return Err(fail(format!("conv3x3 needs a spatial input, receives {f} features")))
                }
                (
                    LayerSpec::Dense {
                        in_features,
                        out_features,
                        ..
                    },
                    s,
                ) => {
                    if in_features != s.volume() || out_features == 0 {
                        return Err(fail(format!(
                            "dense expects {in_features} input features, receives {s}"
                        )));
                    }
                    ActShape::Flat(out_features)
                }
                (LayerSpec::Relu, s) => s,
                (LayerSpec::MaxPool2, ActShape::Spatial { c, h, w }) => {
                    if h < 2 || w < 2 {
                        return Err(fail(format!("maxpool2 needs at least 2x2 input, receives {h}x{w}")));
                    }
                    ActShape::Spatial { c, h: h / 2, w: w / 2 }
                }
                (LayerSpec::GlobalAvgPool, ActShape::Spatial { c, .. }) => ActShape::Flat(c),
                (LayerSpec::MaxPool2 | LayerSpec::GlobalAvgPool, s) => {
                    return Err(fail(format!("{} needs a spatial input, receives {s}", layer.name())))
                }
                (
                    LayerSpec::BatchNorm {
                        channels,
                        momentum,
                        eps,
                    },
                    s,
                ) => {
                    let (c, _) = s.channels_and_extent();
                    if channels != c {
                        return Err(fail(format!("batch_norm expects {channels} channels, receives {s}")));
                    }
                    if !(momentum > 0.0 && momentum <= 1.0) || !(eps >= 0.0) {
                        return Err(fail(format!(
                            "batch_norm needs momentum in (0, 1] and eps >= 0, got {momentum} / {eps}"
                        )));
                    }
                    s
                }
            };
            shapes.push(shape);
        }

        for (i, layer) in self.layers.iter().enumerate() {
            let next_is_bn = self.layers.get(i + 1).is_some_and(LayerSpec::is_batch_norm);
            if self.with_bn && matches!(layer, LayerSpec::Conv3x3 { .. }) && !next_is_bn {
                return Err(Error::Spec {
                    layer: i,
                    next: i + 1,
                    reason: "with_bn requires a batch_norm after every conv3x3".into(),
                });
            }
            if !self.with_bn && layer.is_batch_norm() {
                return Err(Error::Spec {
                    layer: i.saturating_sub(1),
                    next: i,
                    reason: "batch_norm present in a model declared without BN".into(),
                });
            }
        }

        if shape != ActShape::Flat(NUM_CLASSES) {
            let last = self.layers.len() - 1;
            return Err(Error::Spec {
                layer: last,
                next: last,
                reason: format!("final layer must produce {NUM_CLASSES} logits, produces {shape}"),
            });
        }
        Ok(shapes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamName {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamName {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamName::Weight => "weight",
            ParamName::Bias => "bias",
            ParamName::Gamma => "gamma",
            ParamName::Beta => "beta",
            ParamName::RunningMean => "running_mean",
            ParamName::RunningVar => "running_var",
        }
    }

    pub fn tag(self) -> ParamTag {
        match self {
            ParamName::RunningMean | ParamName::RunningVar => ParamTag::LocalStatistic,
            _ => ParamTag::Shared,
        }
    }

    /// Whether the optimizer's L2 penalty applies (weights and biases only).
    pub fn is_decayed(self) -> bool {
        matches!(self, ParamName::Weight | ParamName::Bias)
    }
}

impl FromStr for ParamName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "weight" => ParamName::Weight,
            "bias" => ParamName::Bias,
            "gamma" => ParamName::Gamma,
            "beta" => ParamName::Beta,
            "running_mean" => ParamName::RunningMean,
            "running_var" => ParamName::RunningVar,
            other => return Err(Error::Format(format!("unknown parameter name `{other}`"))),
        })
    }
}

/// Whether an entry may leave its silo.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamTag {
    Shared,
    LocalStatistic,
}

/// `(layer index, parameter name)`; displayed as `"<layer>.<name>"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub layer: usize,
    pub name: ParamName,
}

impl ParamKey {
    pub fn new(layer: usize, name: ParamName) -> Self {
        ParamKey { layer, name }
    }

    pub fn tag(&self) -> ParamTag {
        self.name.tag()
    }

    pub fn is_statistic(&self) -> bool {
        self.tag() == ParamTag::LocalStatistic
    }
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.layer, self.name.as_str())
    }
}

impl FromStr for ParamKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (layer, name) = s
            .split_once('.')
            .ok_or_else(|| Error::Format(format!("malformed parameter key `{s}`")))?;
        let layer = layer
            .parse()
            .map_err(|_| Error::Format(format!("malformed layer index in `{s}`")))?;
        Ok(ParamKey::new(layer, name.parse()?))
    }
}

/// Every tensor a model owns, including batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<R = f64> {
    entries: BTreeMap<ParamKey, Tensor<R>>,
}

impl<R: Real> Default for ParamSet<R> {
    fn default() -> Self {
        ParamSet {
            entries: BTreeMap::new(),
        }
    }
}

impl<R: Real> ParamSet<R> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: ParamKey, value: Tensor<R>) -> Option<Tensor<R>> {
        self.entries.insert(key, value)
    }

    pub fn get(&self, key: &ParamKey) -> Option<&Tensor<R>> {
        self.entries.get(key)
    }

    pub fn get_mut(&mut self, key: &ParamKey) -> Option<&mut Tensor<R>> {
        self.entries.get_mut(key)
    }

    pub fn require(&self, key: ParamKey) -> Result<&Tensor<R>> {
        self.entries.get(&key).ok_or(Error::MissingParam(key))
    }

    pub fn require_mut(&mut self, key: ParamKey) -> Result<&mut Tensor<R>> {
        self.entries.get_mut(&key).ok_or(Error::MissingParam(key))
    }

    pub fn contains(&self, key: &ParamKey) -> bool {
        self.entries.contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &ParamKey> {
        self.entries.keys()
    }

    pub fn key_set(&self) -> BTreeSet<ParamKey> {
        self.entries.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &Tensor<R>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&ParamKey, &mut Tensor<R>)> {
        self.entries.iter_mut()
    }

    /// Keys the optimizer updates: everything except running statistics.
    pub fn trainable_keys(&self) -> impl Iterator<Item = &ParamKey> {
        self.entries.keys().filter(|k| !k.is_statistic())
    }

    /// Copy of the entries whose keys are in `keys`.
    pub fn restrict(&self, keys: &BTreeSet<ParamKey>) -> Result<BTreeMap<ParamKey, Tensor<R>>> {
        keys.iter().map(|k| Ok((*k, self.require(*k)?.clone()))).collect()
    }

    /// Replaces existing entries with the given ones; shapes must agree.
    pub fn overwrite(&mut self, entries: &BTreeMap<ParamKey, Tensor<R>>) -> Result<()> {
        for (key, value) in entries {
            let slot = self.require_mut(*key)?;
            if slot.shape() != value.shape() {
                return Err(Error::Shape(format!(
                    "{key}: have {:?}, incoming {:?}",
                    slot.shape(),
                    value.shape()
                )));
            }
            slot.clone_from(value);
        }
        Ok(())
    }

    /// Running mean and variance of the batch-norm layer at `layer`.
    pub fn bn_stats(&self, layer: usize) -> Result<(&[R], &[R])> {
        Ok((
            self.require(ParamKey::new(layer, ParamName::RunningMean))?.data(),
            self.require(ParamKey::new(layer, ParamName::RunningVar))?.data(),
        ))
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }

    pub fn cast<S: Real>(&self) -> ParamSet<S> {
        ParamSet {
            entries: self.entries.iter().map(|(k, v)| (*k, v.cast())).collect(),
        }
    }
}

impl<R: Real> FromIterator<(ParamKey, Tensor<R>)> for ParamSet<R> {
    fn from_iter<I: IntoIterator<Item = (ParamKey, Tensor<R>)>>(iter: I) -> Self {
        ParamSet {
            entries: iter.into_iter().collect(),
        }
    }
}

/// Every key a model with this spec owns, with its shape.
pub fn param_shapes(spec: &ModelSpec) -> Vec<(ParamKey, Vec<usize>)> {
    let mut out = Vec::new();
    for (i, layer) in spec.layers.iter().enumerate() {
        match *layer {
            LayerSpec::Conv3x3 {
                in_channels,
                out_channels,
                bias,
            } => {
                out.push((
                    ParamKey::new(i, ParamName::Weight),
                    vec![out_channels, in_channels, 3, 3],
                ));
                if bias {
                    out.push((ParamKey::new(i, ParamName::Bias), vec![out_channels]));
                }
            }
            LayerSpec::Dense {
                in_features,
                out_features,
                bias,
            } => {
                out.push((ParamKey::new(i, ParamName::Weight), vec![out_features, in_features]));
                if bias {
                    out.push((ParamKey::new(i, ParamName::Bias), vec![out_features]));
                }
            }
            LayerSpec::BatchNorm { channels, .. } => {
                for name in [
                    ParamName::Gamma,
                    ParamName::Beta,
                    ParamName::RunningMean,
                    ParamName::RunningVar,
                ] {
                    out.push((ParamKey::new(i, name), vec![channels]));
                }
            }
            LayerSpec::Relu | LayerSpec::MaxPool2 | LayerSpec::GlobalAvgPool => {}
        }
    }
    out
}

/// Fresh parameters: weights ~ N(0, 2/fan_in), zero biases, identity batch norm.
pub fn build_model<R: Real>(spec: &ModelSpec, seed: u64) -> Result<ParamSet<R>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for (key, shape) in param_shapes(spec) {
        let tensor = match key.name {
            ParamName::Weight => {
                let fan_in: usize = shape[1..].iter().product();
                let std = (2.0 / fan_in as f64).sqrt();
                let len = shape.iter().product();
                let data = (0..len)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        R::of_f64(std * z)
                    })
                    .collect();
                Tensor::new(shape, data)?
            }
            ParamName::Bias | ParamName::Beta | ParamName::RunningMean => Tensor::zeros(shape),
            ParamName::Gamma | ParamName::RunningVar => Tensor::filled(shape, R::one()),
        };
        params.insert(key, tensor);
    }
    Ok(params)
}
