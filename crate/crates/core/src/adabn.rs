//! Recalibration of batch-norm statistics on data from a new domain.
//!
//! Layers are processed in order. The statistics of batch-norm layer `k` are
//! final before any activation feeding a later layer is computed, so every
//! layer sees its input normalized the way evaluation will normalize it.
//! Moments are exact over all adaptation samples, merged batch by batch.

use crate::batchnorm::channel_moments;
use crate::error::{Error, Result};
use crate::model::{ModelSpec, ParamKey, ParamName, ParamSet};
use crate::nn::{run_layers, Mode};
use crate::real::Real;
use crate::tensor::Tensor;

/// Running per-channel mean and sum of squared deviations.
#[derive(Clone, Debug)]
struct Accumulator {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Accumulator {
    fn new(channels: usize) -> Self {
        Accumulator {
            count: 0.0,
            mean: vec![0.0; channels],
            m2: vec![0.0; channels],
        }
    }

    /// Pairwise merge of a batch with `count` values per channel.
    fn merge(&mut self, count: f64, mean: &[f64], var: &[f64]) {
        let total = self.count + count;
        for c in 0..self.mean.len() {
            let delta = mean[c] - self.mean[c];
            self.mean[c] += delta * count / total;
            self.m2[c] += var[c] * count + delta * delta * self.count * count / total;
        }
        self.count = total;
    }

    fn variance(&self) -> Vec<f64> {
        self.m2.iter().map(|&m| (m / self.count).max(0.0)).collect()
    }
}

/// Returns `params` with every batch-norm running mean and variance replaced
/// by the exact statistics of that layer's input over `batches`. Nothing
/// else changes.
pub fn adabn_recompute<R: Real>(spec: &ModelSpec, params: &ParamSet<R>, batches: &[Tensor<R>]) -> Result<ParamSet<R>> {
    if batches.is_empty() || batches.iter().all(|b| b.batch() == 0) {
        return Err(Error::EmptyDataset(
            "batch-norm recalibration needs at least one sample".into(),
        ));
    }
    let inp = spec.input;
    for b in batches {
        if b.shape() != [b.batch(), inp.channels, inp.height, inp.width] {
            return Err(Error::Shape(format!(
                "adaptation batch {:?} does not match model input {}",
                b.shape(),
                inp
            )));
        }
    }
    let mut out = params.clone();
    for layer in spec.bn_layers().collect::<Vec<_>>() {
        let mut acc: Option<Accumulator> = None;
        for b in batches.iter().filter(|b| b.batch() > 0) {
            let x = run_layers(spec, &out, b.clone(), 0..layer, Mode::Eval, None, None)?;
            let m = channel_moments(&x)?;
            let per_channel = (x.len() / m.mean.len()) as f64;
            let mean: Vec<f64> = m.mean.iter().map(|v| v.as_f64()).collect();
            let var: Vec<f64> = m.var.iter().map(|v| v.as_f64()).collect();
            acc.get_or_insert_with(|| Accumulator::new(mean.len()))
                .merge(per_channel, &mean, &var);
        }
        let acc = acc.expect("at least one nonempty batch");
        let mean_key = ParamKey::new(layer, ParamName::RunningMean);
        let var_key = ParamKey::new(layer, ParamName::RunningVar);
        for (key, values) in [(mean_key, acc.mean.clone()), (var_key, acc.variance())] {
            let t = out.require_mut(key)?;
            if t.len() != values.len() {
                return Err(Error::Shape(format!(
                    "{key} has {} entries, layer has {} channels",
                    t.len(),
                    values.len()
                )));
            }
            t.data_mut().iter_mut().zip(values).for_each(|(d, v)| *d = R::of_f64(v));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, InputShape, LayerSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn batch(seed: u64, n: usize, shape: InputShape, shift: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.5, 0.3).unwrap();
        let data = (0..n * shape.volume()).map(|_| d.sample(&mut rng) + shift).collect();
        Tensor::new(vec![n, shape.channels, shape.height, shape.width], data).unwrap()
    }

    fn front_bn_spec() -> ModelSpec {
        ModelSpec {
            input: InputShape::new(2, 4, 4),
            layers: vec![
                LayerSpec::BatchNorm {
                    channels: 2,
                    momentum: 0.1,
                    eps: 1e-5,
                },
                LayerSpec::Conv3x3 {
                    in_channels: 2,
                    out_channels: 3,
                    bias: true,
                },
                LayerSpec::BatchNorm {
                    channels: 3,
                    momentum: 0.1,
                    eps: 1e-5,
                },
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense {
                    in_features: 3,
                    out_features: 2,
                    bias: true,
                },
            ],
            with_bn: true,
        }
    }

    #[test]
    fn streaming_equals_single_pass() {
        let spec = ModelSpec::conv_blocks(InputShape::new(3, 8, 8), &[4, 6], true);
        let params = build_model::<f64>(&spec, 3).unwrap();
        let all = batch(1, 12, spec.input, 0.0);
        let vol = spec.input.volume();
        let parts: Vec<Tensor<f64>> = [0..5, 5..7, 7..12]
            .into_iter()
            .map(|r| Tensor::new(vec![r.len(), 3, 8, 8], all.data()[r.start * vol..r.end * vol].to_vec()).unwrap())
            .collect();
        let one = adabn_recompute(&spec, &params, &[all]).unwrap();
        let many = adabn_recompute(&spec, &params, &parts).unwrap();
        for (k, v) in one.iter() {
            let w = many.require(*k).unwrap();
            for (a, b) in v.data().iter().zip(w.data()) {
                assert!((a - b).abs() < 1e-12, "{k}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn only_statistics_change_and_recompute_is_idempotent() {
        let spec = ModelSpec::conv_blocks(InputShape::new(3, 8, 8), &[4, 6], true);
        let params = build_model::<f64>(&spec, 5).unwrap();
        let batches = [batch(2, 6, spec.input, 0.0), batch(3, 4, spec.input, 0.0)];
        let once = adabn_recompute(&spec, &params, &batches).unwrap();
        for (k, v) in params.iter() {
            if !k.is_statistic() {
                assert!(v.bit_eq(once.require(*k).unwrap()), "{k} changed");
            }
        }
        let twice = adabn_recompute(&spec, &once, &batches).unwrap();
        for (k, v) in once.iter() {
            for (a, b) in v.data().iter().zip(twice.require(*k).unwrap().data()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn front_layer_mean_follows_input_shift() {
        let spec = front_bn_spec();
        let params = build_model::<f64>(&spec, 1).unwrap();
        let base = adabn_recompute(&spec, &params, &[batch(9, 8, spec.input, 0.0)]).unwrap();
        let shifted = adabn_recompute(&spec, &params, &[batch(9, 8, spec.input, 0.75)]).unwrap();
        let key = ParamKey::new(0, ParamName::RunningMean);
        let var_key = ParamKey::new(0, ParamName::RunningVar);
        for c in 0..2 {
            let d = shifted.require(key).unwrap().data()[c] - base.require(key).unwrap().data()[c];
            assert!((d - 0.75).abs() < 1e-12);
            let dv = shifted.require(var_key).unwrap().data()[c] - base.require(var_key).unwrap().data()[c];
            assert!(dv.abs() < 1e-12);
        }
    }

    #[test]
    fn constant_input_gives_zero_variance_and_finite_output() {
        let spec = front_bn_spec();
        let params = build_model::<f64>(&spec, 1).unwrap();
        let constant = Tensor::filled(vec![4, 2, 4, 4], 0.25);
        let adapted = adabn_recompute(&spec, &params, std::slice::from_ref(&constant)).unwrap();
        let (_, var) = adapted.bn_stats(0).unwrap();
        assert!(var.iter().all(|&v| v == 0.0));
        let logits = crate::nn::predict(&spec, &adapted, &constant).unwrap();
        assert!(logits.is_finite());
    }

    #[test]
    fn empty_batch_list_is_an_error() {
        let spec = front_bn_spec();
        let params = build_model::<f64>(&spec, 1).unwrap();
        assert!(matches!(
            adabn_recompute(&spec, &params, &[]),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn no_bn_layers_means_no_change() {
        let spec = ModelSpec::conv_blocks(InputShape::new(3, 8, 8), &[4], false);
        let params = build_model::<f64>(&spec, 1).unwrap();
        let out = adabn_recompute(&spec, &params, &[batch(1, 3, spec.input, 0.0)]).unwrap();
        assert!(out.bit_eq(&params));
    }
}
