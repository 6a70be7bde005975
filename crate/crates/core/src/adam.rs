//! Adam with bias correction and an additive L2 penalty.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamKey, ParamSet};
use crate::real::Real;

/// Optimizer hyperparameters. The default is the setting used for BN models
/// under every strategy except naive FedAvg.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Coefficient of `l2 * theta`, added to weight and bias gradients.
    pub l2: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-4,
            beta1: 0.0,
            beta2: 0.99,
            eps: 1e-8,
            l2: 0.001,
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.l2 >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid Adam hyperparameters {self:?}")))
        }
    }
}

/// Moment estimates for every trainable entry. Never leaves its silo.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<R = f64> {
    pub hyper: AdamHyper,
    step: u64,
    first: BTreeMap<ParamKey, Vec<R>>,
    second: BTreeMap<ParamKey, Vec<R>>,
}

impl<R: Real> AdamState<R> {
    /// Zero moments shaped like the trainable entries of `params`.
    pub fn new(params: &ParamSet<R>, hyper: AdamHyper) -> Self {
        let zeros: BTreeMap<ParamKey, Vec<R>> = params
            .iter()
            .filter(|(k, _)| !k.is_statistic())
            .map(|(k, v)| (*k, vec![R::zero(); v.len()]))
            .collect();
        AdamState {
            hyper,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, key: &ParamKey) -> Option<&[R]> {
        self.first.get(key).map(Vec::as_slice)
    }

    pub fn second_moment(&self, key: &ParamKey) -> Option<&[R]> {
        self.second.get(key).map(Vec::as_slice)
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        let same = |a: &BTreeMap<ParamKey, Vec<R>>, b: &BTreeMap<ParamKey, Vec<R>>| {
            a.len() == b.len()
                && a.iter().zip(b).all(|((ka, va), (kb, vb))| {
                    ka == kb
                        && va
                            .iter()
                            .zip(vb)
                            .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
                })
        };
        self.step == other.step && same(&self.first, &other.first) && same(&self.second, &other.second)
    }
}

/// One Adam update of every entry that has a gradient.
pub fn adam_step<R: Real>(params: &mut ParamSet<R>, grads: &ParamSet<R>, state: &mut AdamState<R>) -> Result<()> {
    let h = state.hyper;
    // validate before mutating anything
    for (key, g) in grads.iter() {
        let p = params.require(*key)?;
        let m = state
            .first
            .get(key)
            .ok_or_else(|| Error::KeyMismatch(format!("optimizer has no state for {key}")))?;
        if p.shape() != g.shape() || m.len() != p.len() {
            return Err(Error::Shape(format!(
                "{key}: parameter {:?}, gradient {:?}, moments {}",
                p.shape(),
                g.shape(),
                m.len()
            )));
        }
    }

    state.step += 1;
    let t = state.step as f64;
    let bias1 = 1.0 - h.beta1.powf(t);
    let bias2 = 1.0 - h.beta2.powf(t);
    let (b1, b2) = (R::of_f64(h.beta1), R::of_f64(h.beta2));
    let (one_b1, one_b2) = (R::of_f64(1.0 - h.beta1), R::of_f64(1.0 - h.beta2));
    let (bias1, bias2) = (R::of_f64(bias1), R::of_f64(bias2));
    let (lr, eps, l2) = (R::of_f64(h.lr), R::of_f64(h.eps), R::of_f64(h.l2));

    for (key, g) in grads.iter() {
        let decay = key.name.is_decayed() && h.l2 != 0.0;
        let theta = params.require_mut(*key)?.data_mut();
        let m = state.first.get_mut(key).expect("checked above");
        let v = state.second.get_mut(key).expect("checked above");
        for i in 0..theta.len() {
            let mut gi = g.data()[i];
            if decay {
                gi += l2 * theta[i];
            }
            m[i] = b1 * m[i] + one_b1 * gi;
            v[i] = b2 * v[i] + one_b2 * gi * gi;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamName;
    use crate::tensor::Tensor;

    fn scalar_set(key: ParamKey, v: f64) -> ParamSet<f64> {
        [(key, Tensor::scalar(v))].into_iter().collect()
    }

    /// Textbook scalar Adam, written independently of `adam_step`.
    fn scalar_adam(theta: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) -> f64 {
        let (mut th, mut m, mut v) = (theta, 0.0, 0.0);
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            th -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        th
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let key = ParamKey::new(0, ParamName::Weight);
        let mut params = scalar_set(key, 0.37);
        let hyper = AdamHyper {
            l2: 0.0,
            ..AdamHyper::default()
        };
        let mut state = AdamState::new(&params, hyper);
        adam_step(&mut params, &scalar_set(key, 0.0), &mut state).unwrap();
        assert_eq!(params.get(&key).unwrap().data(), [0.37]);
        assert_eq!(state.step(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let key = ParamKey::new(0, ParamName::Weight);
        let mut params = scalar_set(key, 0.0);
        let hyper = AdamHyper {
            lr: 1e-3,
            beta1: 0.0,
            beta2: 0.99,
            eps: 1e-8,
            l2: 0.0,
        };
        let mut state = AdamState::new(&params, hyper);
        adam_step(&mut params, &scalar_set(key, 1.0), &mut state).unwrap();
        let got = params.get(&key).unwrap().data()[0];
        assert!((got + 1e-3).abs() < 1e-10, "{got}");
        assert_eq!(got, scalar_adam(0.0, &[1.0], 1e-3, 0.0, 0.99, 1e-8));
    }

    #[test]
    fn matches_scalar_reference_over_many_steps() {
        let key = ParamKey::new(2, ParamName::Gamma);
        let mut params = scalar_set(key, 0.5);
        let hyper = AdamHyper {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l2: 0.0,
        };
        let mut state = AdamState::new(&params, hyper);
        let grads = [0.3, -0.1, 0.7, 0.05, -0.4];
        for g in grads {
            adam_step(&mut params, &scalar_set(key, g), &mut state).unwrap();
        }
        let expect = scalar_adam(0.5, &grads, 0.01, 0.9, 0.999, 1e-8);
        assert!((params.get(&key).unwrap().data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn l2_applies_to_weights_not_gamma() {
        let w = ParamKey::new(0, ParamName::Weight);
        let g = ParamKey::new(1, ParamName::Gamma);
        let mut params: ParamSet<f64> = [(w, Tensor::scalar(1.0)), (g, Tensor::scalar(1.0))]
            .into_iter()
            .collect();
        let hyper = AdamHyper {
            lr: 0.1,
            beta1: 0.0,
            beta2: 0.99,
            eps: 1e-8,
            l2: 0.5,
        };
        let mut state = AdamState::new(&params, hyper);
        let zero: ParamSet<f64> = [(w, Tensor::scalar(0.0)), (g, Tensor::scalar(0.0))]
            .into_iter()
            .collect();
        adam_step(&mut params, &zero, &mut state).unwrap();
        assert!(params.get(&w).unwrap().data()[0] < 1.0);
        assert_eq!(params.get(&g).unwrap().data()[0], 1.0);
    }

    #[test]
    fn shape_mismatch_is_rejected_without_side_effects() {
        let key = ParamKey::new(0, ParamName::Weight);
        let mut params = scalar_set(key, 1.0);
        let mut state = AdamState::new(&params, AdamHyper::default());
        let bad: ParamSet<f64> = [(key, Tensor::from_vec(vec![0.0, 0.0]))].into_iter().collect();
        assert!(matches!(adam_step(&mut params, &bad, &mut state), Err(Error::Shape(_))));
        assert_eq!(state.step(), 0);
    }

    #[test]
    fn defaults_follow_bn_setting() {
        let h = AdamHyper::default();
        assert_eq!((h.beta1, h.beta2, h.l2, h.lr), (0.0, 0.99, 0.001, 1e-4));
    }
}
