//! Forward and backward passes over a [`ModelSpec`].
//!
//! [`forward`] is pure: in training mode it returns the batch moments of every
//! batch-norm layer instead of mutating running statistics. Callers fold them
//! in with [`apply_batch_moments`], which keeps evaluation reentrant and lets
//! finite-difference checks reuse one parameter set.

use crate::batchnorm::{self, BatchMoments, BnLearned, BnStats, TrainCache};
use crate::error::{Error, Result};
use crate::layers::{self, ConvCache};
use crate::model::{LayerSpec, ModelSpec, ParamKey, ParamName, ParamSet, NUM_CLASSES};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub(crate) enum LayerCache<R> {
    Conv(ConvCache<R>),
    Dense {
        input: Tensor<R>,
    },
    Relu {
        mask: Vec<bool>,
    },
    MaxPool {
        in_shape: Vec<usize>,
        argmax: Vec<u32>,
    },
    GlobalAvgPool {
        in_shape: Vec<usize>,
    },
    BatchNorm(TrainCache<R>),
    /// Evaluation-mode batch norm; not differentiable here.
    Frozen,
}

/// Per-layer state saved by [`forward`] for [`backward`].
#[derive(Clone, Debug)]
pub struct Cache<R> {
    mode: Mode,
    layers: Vec<LayerCache<R>>,
    logits: Tensor<R>,
}

impl<R: Real> Cache<R> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn logits(&self) -> &Tensor<R> {
        &self.logits
    }

    /// Which branch every piecewise-linear unit took (ReLU sign, max-pool
    /// winner). Two passes with equal patterns are on the same smooth piece.
    pub fn activation_pattern(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                LayerCache::Relu { mask } => out.extend(mask.iter().map(|&m| m as u32)),
                LayerCache::MaxPool { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }
}

/// Batch moments observed by one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnObservation<R> {
    pub layer: usize,
    pub momentum: f64,
    pub moments: BatchMoments<R>,
}

#[derive(Clone, Debug)]
pub struct ForwardPass<R> {
    pub logits: Tensor<R>,
    pub cache: Cache<R>,
    /// Empty in evaluation mode.
    pub observations: Vec<BnObservation<R>>,
}

fn bias_of<R: Real>(params: &ParamSet<R>, layer: usize, has_bias: bool) -> Result<Option<&Tensor<R>>> {
    if has_bias {
        params.require(ParamKey::new(layer, ParamName::Bias)).map(Some)
    } else {
        Ok(None)
    }
}

fn learned<R: Real>(params: &ParamSet<R>, layer: usize) -> Result<BnLearned<'_, R>> {
    Ok(BnLearned {
        gamma: params.require(ParamKey::new(layer, ParamName::Gamma))?.data(),
        beta: params.require(ParamKey::new(layer, ParamName::Beta))?.data(),
    })
}

/// Runs `layers[range]` on `x`. Used by [`forward`] and by batch-norm
/// recalibration, which needs the activations entering a given layer.
pub(crate) fn run_layers<R: Real>(
    spec: &ModelSpec,
    params: &ParamSet<R>,
    mut x: Tensor<R>,
    range: std::ops::Range<usize>,
    mode: Mode,
    mut caches: Option<&mut Vec<LayerCache<R>>>,
    mut observations: Option<&mut Vec<BnObservation<R>>>,
) -> Result<Tensor<R>> {
    for i in range {
        let layer = spec.layers[i];
        let (y, cache) = match layer {
            LayerSpec::Conv3x3 { bias, .. } => {
                let weight = params.require(ParamKey::new(i, ParamName::Weight))?;
                let (y, c) = layers::conv3x3_forward(&x, weight, bias_of(params, i, bias)?)?;
                (y, LayerCache::Conv(c))
            }
            LayerSpec::Dense { bias, .. } => {
                let weight = params.require(ParamKey::new(i, ParamName::Weight))?;
                let y = layers::dense_forward(&x, weight, bias_of(params, i, bias)?)?;
                (y, LayerCache::Dense { input: x })
            }
            LayerSpec::Relu => {
                let (y, mask) = layers::relu_forward(&x);
                (y, LayerCache::Relu { mask })
            }
            LayerSpec::MaxPool2 => {
                let (y, argmax) = layers::maxpool2_forward(&x)?;
                (
                    y,
                    LayerCache::MaxPool {
                        in_shape: x.shape().to_vec(),
                        argmax,
                    },
                )
            }
            LayerSpec::GlobalAvgPool => {
                let y = layers::global_avg_pool_forward(&x)?;
                (
                    y,
                    LayerCache::GlobalAvgPool {
                        in_shape: x.shape().to_vec(),
                    },
                )
            }
            LayerSpec::BatchNorm { momentum, eps, .. } => match mode {
                Mode::Train => {
                    let (y, c) = batchnorm::forward_train_pure(&x, learned(params, i)?, eps)?;
                    if let Some(obs) = observations.as_deref_mut() {
                        obs.push(BnObservation {
                            layer: i,
                            momentum,
                            moments: c.moments.clone(),
                        });
                    }
                    (y, LayerCache::BatchNorm(c))
                }
                Mode::Eval => {
                    let (mean, var) = params.bn_stats(i)?;
                    let y = batchnorm::forward_eval(&x, learned(params, i)?, mean, var, eps)?;
                    (y, LayerCache::Frozen)
                }
            },
        };
        y.ensure_finite(|| format!("output of layer {i} ({})", layer.name()))?;
        if let Some(c) = caches.as_deref_mut() {
            c.push(cache);
        }
        x = y;
    }
    Ok(x)
}

fn check_input<R: Real>(spec: &ModelSpec, batch: &Tensor<R>, mode: Mode) -> Result<()> {
    let inp = spec.input;
    let n = batch.batch();
    if batch.shape() != [n, inp.channels, inp.height, inp.width] || n == 0 {
        return Err(Error::Shape(format!(
            "model expects [batch, {}, {}, {}], got {:?}",
            inp.channels,
            inp.height,
            inp.width,
            batch.shape()
        )));
    }
    if mode == Mode::Train && n < 2 {
        return Err(Error::DegenerateBatch(
            "training-mode forward needs at least 2 samples".into(),
        ));
    }
    batch.ensure_finite(|| "input batch".into())
}

/// Logits `[batch, 2]` plus everything backward needs.
pub fn forward<R: Real>(
    spec: &ModelSpec,
    params: &ParamSet<R>,
    batch: &Tensor<R>,
    mode: Mode,
) -> Result<ForwardPass<R>> {
    check_input(spec, batch, mode)?;
    let mut caches = Vec::with_capacity(spec.layers.len());
    let mut observations = Vec::new();
    let logits = run_layers(
        spec,
        params,
        batch.clone(),
        0..spec.layers.len(),
        mode,
        Some(&mut caches),
        Some(&mut observations),
    )?;
    if logits.shape() != [batch.batch(), NUM_CLASSES] {
        return Err(Error::Shape(format!("logits have shape {:?}", logits.shape())));
    }
    Ok(ForwardPass {
        cache: Cache {
            mode,
            layers: caches,
            logits: logits.clone(),
        },
        logits,
        observations,
    })
}

/// Evaluation-mode logits without keeping a cache.
pub fn predict<R: Real>(spec: &ModelSpec, params: &ParamSet<R>, batch: &Tensor<R>) -> Result<Tensor<R>> {
    check_input(spec, batch, Mode::Eval)?;
    run_layers(
        spec,
        params,
        batch.clone(),
        0..spec.layers.len(),
        Mode::Eval,
        None,
        None,
    )
}

/// Probability of class 1 for every sample.
pub fn positive_probability<R: Real>(logits: &Tensor<R>) -> Vec<f64> {
    logits
        .data()
        .chunks(NUM_CLASSES)
        .map(|z| {
            let (a, b) = (z[0].as_f64(), z[1].as_f64());
            // sigmoid(b - a), written to avoid overflow on either side
            let d = b - a;
            if d >= 0.0 {
                1.0 / (1.0 + (-d).exp())
            } else {
                let e = d.exp();
                e / (1.0 + e)
            }
        })
        .collect()
}

/// Folds training-mode batch moments into the running statistics.
pub fn apply_batch_moments<R: Real>(params: &mut ParamSet<R>, observations: &[BnObservation<R>]) -> Result<()> {
    for obs in observations {
        let mean_key = ParamKey::new(obs.layer, ParamName::RunningMean);
        let var_key = ParamKey::new(obs.layer, ParamName::RunningVar);
        let mut stats = BnStats {
            mean: params.require(mean_key)?.data().to_vec(),
            var: params.require(var_key)?.data().to_vec(),
        };
        batchnorm::update_running(&mut stats, &obs.moments, obs.momentum);
        params.require_mut(mean_key)?.data_mut().copy_from_slice(&stats.mean);
        params.require_mut(var_key)?.data_mut().copy_from_slice(&stats.var);
    }
    Ok(())
}

fn check_labels(labels: &[usize], n: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for a batch of {n}", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
        return Err(Error::Shape(format!("label {bad} out of range")));
    }
    Ok(())
}

fn log_sum_exp<R: Real>(z: &[R]) -> R {
    let m = z.iter().copied().fold(R::neg_infinity(), R::max);
    m + z.iter().map(|&v| (v - m).exp()).sum::<R>().ln()
}

/// Mean softmax cross-entropy.
pub fn cross_entropy<R: Real>(logits: &Tensor<R>, labels: &[usize]) -> Result<R> {
    let n = logits.batch();
    check_labels(labels, n)?;
    let total: R = logits
        .data()
        .chunks(NUM_CLASSES)
        .zip(labels)
        .map(|(z, &y)| log_sum_exp(z) - z[y])
        .sum();
    Ok(total / R::of_f64(n as f64))
}

/// Gradient of [`cross_entropy`] with respect to the logits.
fn cross_entropy_grad<R: Real>(logits: &Tensor<R>, labels: &[usize]) -> Result<Tensor<R>> {
    let n = logits.batch();
    let inv_n = R::of_f64(n as f64).recip();
    let mut g = Vec::with_capacity(logits.len());
    for (z, &y) in logits.data().chunks(NUM_CLASSES).zip(labels) {
        let lse = log_sum_exp(z);
        for (k, &zk) in z.iter().enumerate() {
            let p = (zk - lse).exp();
            let target = if k == y { R::one() } else { R::zero() };
            g.push((p - target) * inv_n);
        }
    }
    Tensor::new(logits.shape().to_vec(), g)
}

/// Gradients of the mean cross-entropy for every trainable entry, plus the loss.
///
/// The cache must come from a training-mode [`forward`] with the same
/// parameters. Running statistics get no gradient entries.
pub fn backward<R: Real>(
    spec: &ModelSpec,
    params: &ParamSet<R>,
    cache: &Cache<R>,
    labels: &[usize],
) -> Result<(ParamSet<R>, R)> {
    if cache.mode != Mode::Train {
        return Err(Error::CacheMismatch("backward needs a training-mode cache".into()));
    }
    if cache.layers.len() != spec.layers.len() {
        return Err(Error::CacheMismatch(format!(
            "cache has {} layers, model has {}",
            cache.layers.len(),
            spec.layers.len()
        )));
    }
    let loss = cross_entropy(&cache.logits, labels)?;
    let mut grad = cross_entropy_grad(&cache.logits, labels)?;
    let mut grads = ParamSet::new();

    for (i, (layer, lc)) in spec.layers.iter().zip(&cache.layers).enumerate().rev() {
        let mismatch = || Error::CacheMismatch(format!("layer {i} ({}) cache kind differs", layer.name()));
        grad = match (layer, lc) {
            (LayerSpec::Conv3x3 { bias, .. }, LayerCache::Conv(c)) => {
                let weight = params.require(ParamKey::new(i, ParamName::Weight))?;
                let (dx, dw, db) = layers::conv3x3_backward(c, weight, *bias, &grad)?;
                grads.insert(ParamKey::new(i, ParamName::Weight), dw);
                if let Some(db) = db {
                    grads.insert(ParamKey::new(i, ParamName::Bias), db);
                }
                dx
            }
            (LayerSpec::Dense { bias, .. }, LayerCache::Dense { input }) => {
                let weight = params.require(ParamKey::new(i, ParamName::Weight))?;
                if weight.shape()[1] * input.batch() != input.len() {
                    return Err(Error::CacheMismatch(format!("dense layer {i} input/weight disagree")));
                }
                let (dx, dw, db) = layers::dense_backward(input, weight, *bias, &grad)?;
                grads.insert(ParamKey::new(i, ParamName::Weight), dw);
                if let Some(db) = db {
                    grads.insert(ParamKey::new(i, ParamName::Bias), db);
                }
                dx
            }
            (LayerSpec::Relu, LayerCache::Relu { mask }) => layers::relu_backward(mask, &grad)?,
            (LayerSpec::MaxPool2, LayerCache::MaxPool { in_shape, argmax }) => {
                layers::maxpool2_backward(in_shape, argmax, &grad)?
            }
            (LayerSpec::GlobalAvgPool, LayerCache::GlobalAvgPool { in_shape }) => {
                layers::global_avg_pool_backward(in_shape, &grad)?
            }
            (LayerSpec::BatchNorm { .. }, LayerCache::BatchNorm(c)) => {
                let gamma = params.require(ParamKey::new(i, ParamName::Gamma))?;
                let (dx, dg, db) = batchnorm::backward(c, gamma.data(), &grad)
                    .map_err(|e| Error::CacheMismatch(format!("layer {i}: {e}")))?;
                grads.insert(ParamKey::new(i, ParamName::Gamma), Tensor::from_vec(dg));
                grads.insert(ParamKey::new(i, ParamName::Beta), Tensor::from_vec(db));
                dx
            }
            _ => return Err(mismatch()),
        };
    }
    for (key, g) in grads.iter() {
        g.ensure_finite(|| format!("gradient of {key}"))?;
    }
    Ok((grads, loss))
}

/// A model description together with its parameters.
#[derive(Clone, Debug)]
pub struct Network<R = f64> {
    pub spec: ModelSpec,
    pub params: ParamSet<R>,
}

impl<R: Real> Network<R> {
    pub fn new(spec: ModelSpec, params: ParamSet<R>) -> Result<Self> {
        spec.validate()?;
        let expected = crate::model::param_shapes(&spec);
        if expected.len() != params.len() {
            return Err(Error::KeyMismatch(format!(
                "model needs {} parameter entries, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (key, shape) in expected {
            let have = params.require(key)?;
            if have.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "{key}: expected {shape:?}, got {:?}",
                    have.shape()
                )));
            }
        }
        Ok(Network { spec, params })
    }

    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        let params = crate::model::build_model(&spec, seed)?;
        Ok(Network { spec, params })
    }

    /// Training-mode forward + backward; running statistics are updated in place.
    pub fn gradients(&mut self, batch: &Tensor<R>, labels: &[usize]) -> Result<(ParamSet<R>, R)> {
        let pass = forward(&self.spec, &self.params, batch, Mode::Train)?;
        let out = backward(&self.spec, &self.params, &pass.cache, labels)?;
        apply_batch_moments(&mut self.params, &pass.observations)?;
        Ok(out)
    }

    pub fn predict(&self, batch: &Tensor<R>) -> Result<Tensor<R>> {
        predict(&self.spec, &self.params, batch)
    }
}
