//! Central finite-difference check of [`nn::backward`](crate::nn::backward).
//!
//! Every trainable scalar is perturbed by `±h` and the loss difference is
//! compared with the analytic gradient. ReLU and max pooling are only
//! piecewise smooth; when a perturbation moves any unit across a kink, the
//! difference quotient no longer estimates the derivative, so such entries
//! are counted in [`GradCheckReport::kink_crossings`] and left out of the
//! maximum.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{build_model, ModelSpec, ParamKey, ParamName, ParamSet};
use crate::nn::{self, Mode};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Multiplies the analytic gradient of one entry before comparison.
    /// Only for exercising the failure path.
    pub corrupt: Option<(ParamKey, f64)>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { h: 1e-5, corrupt: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_key: Option<ParamKey>,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub kink_crossings: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Random parameters, batch and labels for `spec`, derived from `seed`.
///
/// Batch-norm scales and shifts are perturbed away from the identity so the
/// check exercises their gradients in a generic position.
pub fn random_problem(
    spec: &ModelSpec,
    seed: u64,
    batch_size: usize,
) -> Result<(ParamSet<f64>, Tensor<f64>, Vec<usize>)> {
    let mut params = build_model::<f64>(spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_9c4e_c4ec_0001);
    for (key, value) in params.iter_mut() {
        match key.name {
            ParamName::Gamma => value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 1.0 + 0.2 * normal(&mut rng)),
            ParamName::Beta | ParamName::Bias => value.data_mut().iter_mut().for_each(|v| *v = 0.1 * normal(&mut rng)),
            _ => {}
        }
    }
    let inp = spec.input;
    let len = batch_size * inp.volume();
    let data = (0..len).map(|_| normal(&mut rng)).collect();
    let batch = Tensor::new(vec![batch_size, inp.channels, inp.height, inp.width], data)?;
    let mut labels: Vec<usize> = (0..batch_size).map(|_| rng.gen_range(0..2)).collect();
    if batch_size >= 2 {
        labels[0] = 0;
        labels[1] = 1;
    }
    Ok((params, batch, labels))
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Compares analytic and numerical gradients of a fixed problem.
pub fn check_gradients(
    spec: &ModelSpec,
    params: &ParamSet<f64>,
    batch: &Tensor<f64>,
    labels: &[usize],
    options: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if !(options.h > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step must be positive, got {}",
            options.h
        )));
    }
    let base = nn::forward(spec, params, batch, Mode::Train)?;
    let (mut grads, _) = nn::backward(spec, params, &base.cache, labels)?;
    if let Some((key, factor)) = options.corrupt {
        let g = grads.require_mut(key)?;
        g.data_mut().iter_mut().for_each(|v| *v = *v * factor + 1e-3);
    }
    let base_pattern = base.cache.activation_pattern();

    let loss_at = |p: &ParamSet<f64>| -> Result<(f64, Vec<u32>)> {
        let pass = nn::forward(spec, p, batch, Mode::Train)?;
        Ok((
            nn::cross_entropy(&pass.logits, labels)?,
            pass.cache.activation_pattern(),
        ))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_key: None,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        kink_crossings: 0,
    };
    let mut probe = params.clone();
    let keys: Vec<ParamKey> = params.trainable_keys().copied().collect();
    for key in keys {
        let analytic_all = grads.require(key)?.data().to_vec();
        for (idx, &analytic) in analytic_all.iter().enumerate() {
            let original = params.require(key)?.data()[idx];
            probe.require_mut(key)?.data_mut()[idx] = original + options.h;
            let (plus, plus_pattern) = loss_at(&probe)?;
            probe.require_mut(key)?.data_mut()[idx] = original - options.h;
            let (minus, minus_pattern) = loss_at(&probe)?;
            probe.require_mut(key)?.data_mut()[idx] = original;

            if plus_pattern != base_pattern || minus_pattern != base_pattern {
                report.kink_crossings += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * options.h);
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_key.is_none() {
                report.max_rel_error = err;
                report.worst_key = Some(key);
                report.worst_index = idx;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Builds a random problem for `spec` from `seed` and checks it.
pub fn grad_check(spec: &ModelSpec, seed: u64, batch_size: usize, h: f64) -> Result<GradCheckReport> {
    let (params, batch, labels) = random_problem(spec, seed, batch_size)?;
    check_gradients(spec, &params, &batch, &labels, &GradCheckOptions { h, corrupt: None })
}
