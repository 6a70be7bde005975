//! ROC-AUC, per-center reports and out-of-domain evaluation.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adabn::adabn_recompute;
use crate::datagen::{Batch, DataOrigin, LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::model::{ModelSpec, ParamSet};
use crate::nn::{positive_probability, predict};
use crate::real::Real;

/// Scores (probability of class 1) paired with binary labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredLabels {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoredLabels {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::Format("labels must be 0 or 1".into()));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::NonFinite("scores".into()));
        }
        Ok(ScoredLabels { scores, labels })
    }

    /// (negatives, positives)
    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l == 1).count();
        (self.labels.len() - pos, pos)
    }

    fn check_both_classes(&self) -> Result<(usize, usize)> {
        let (neg, pos) = self.class_counts();
        if neg == 0 || pos == 0 {
            return Err(Error::UndefinedAuc(format!(
                "{pos} positive and {neg} negative samples"
            )));
        }
        Ok((neg, pos))
    }

    fn order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[a].total_cmp(&self.scores[b]));
        idx
    }
}

/// Mann-Whitney U over `n_pos * n_neg`, tied pairs counting one half.
///
/// Ranks are averaged within ties, so the statistic is a sum of halves and
/// exact in floating point; the result equals a direct pairwise count.
pub fn roc_auc(sl: &ScoredLabels) -> Result<f64> {
    let (neg, pos) = sl.check_both_classes()?;
    let order = sl.order();
    // twice the rank sum of positives, ranks starting at 1
    let mut twice_rank_sum: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && sl.scores[order[end]].total_cmp(&sl.scores[order[start]]) == Ordering::Equal {
            end += 1;
        }
        let positives = order[start..end].iter().filter(|&&i| sl.labels[i] == 1).count() as u128;
        // average rank of the group is (start + 1 + end) / 2
        twice_rank_sum += positives * (start as u128 + 1 + end as u128);
        start = end;
    }
    let p = pos as u128;
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 * 0.5 / (pos as f64 * neg as f64))
}

/// `(false positive rate, true positive rate)` at every distinct threshold,
/// from `(0, 0)` to `(1, 1)`.
pub fn roc_curve(sl: &ScoredLabels) -> Result<Vec<(f64, f64)>> {
    let (neg, pos) = sl.check_both_classes()?;
    let mut order = sl.order();
    order.reverse();
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = sl.scores[order[i]];
        while i < order.len() && sl.scores[order[i]].total_cmp(&s) == Ordering::Equal {
            if sl.labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(points)
}

/// Evaluation-mode class-1 probabilities for every sample, in order.
pub fn predict_scores<R: Real>(
    spec: &ModelSpec,
    params: &ParamSet<R>,
    ds: &LabeledDataset,
    batch_size: usize,
) -> Result<Vec<f64>> {
    if ds.sample_shape() != spec.input {
        return Err(Error::Shape(format!(
            "model expects {} inputs, data has {}",
            spec.input,
            ds.sample_shape()
        )));
    }
    let mut scores = Vec::with_capacity(ds.len());
    for batch in ds.batches::<R>(batch_size) {
        let logits = predict(spec, params, &batch?.images)?;
        scores.extend(positive_probability(&logits));
    }
    Ok(scores)
}

pub fn dataset_auc<R: Real>(
    spec: &ModelSpec,
    params: &ParamSet<R>,
    ds: &LabeledDataset,
    batch_size: usize,
) -> Result<f64> {
    let scores = predict_scores(spec, params, ds, batch_size)?;
    roc_auc(&ScoredLabels::new(scores, ds.labels.clone())?)
}

/// One model for every center, or one model per center.
#[derive(Clone, Copy, Debug)]
pub enum Models<'a, R> {
    Single(&'a ParamSet<R>),
    PerCenter(&'a BTreeMap<u32, ParamSet<R>>),
}

impl<'a, R: Real> Models<'a, R> {
    pub fn for_center(&self, center: u32) -> Result<&'a ParamSet<R>> {
        match *self {
            Models::Single(p) => Ok(p),
            Models::PerCenter(m) => m.get(&center).ok_or(Error::MissingModel(center)),
        }
    }
}

/// Per-center AUC and their unweighted mean, possibly over several seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_center_auc: BTreeMap<u32, f64>,
    pub mauc: f64,
    pub n_seeds: usize,
    /// Sample standard deviation over seeds; zero for a single seed.
    pub auc_std: BTreeMap<u32, f64>,
    pub mauc_std: f64,
    /// mAUC of each seed, in seed order.
    pub per_seed_mauc: Vec<f64>,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n - 1 denominator); zero below two values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

impl EvalReport {
    pub fn from_aucs(per_center_auc: BTreeMap<u32, f64>) -> Result<Self> {
        if per_center_auc.is_empty() {
            return Err(Error::EmptyDataset("no centers to report".into()));
        }
        let mauc = mean(&per_center_auc.values().copied().collect::<Vec<_>>());
        Ok(EvalReport {
            auc_std: per_center_auc.keys().map(|&c| (c, 0.0)).collect(),
            per_center_auc,
            mauc,
            n_seeds: 1,
            mauc_std: 0.0,
            per_seed_mauc: vec![mauc],
        })
    }

    /// Averages single-seed reports over seeds.
    pub fn combine_seeds(reports: &[EvalReport]) -> Result<Self> {
        let first = reports
            .first()
            .ok_or_else(|| Error::EmptyDataset("no seed reports to combine".into()))?;
        let centers: Vec<u32> = first.per_center_auc.keys().copied().collect();
        let mut per_center_auc = BTreeMap::new();
        let mut auc_std = BTreeMap::new();
        for &c in &centers {
            let values = reports
                .iter()
                .map(|r| r.per_center_auc.get(&c).copied().ok_or(Error::MissingModel(c)))
                .collect::<Result<Vec<_>>>()?;
            per_center_auc.insert(c, mean(&values));
            auc_std.insert(c, sample_std(&values));
        }
        let per_seed_mauc: Vec<f64> = reports.iter().flat_map(|r| r.per_seed_mauc.iter().copied()).collect();
        Ok(EvalReport {
            mauc: mean(&per_center_auc.values().copied().collect::<Vec<_>>()),
            per_center_auc,
            n_seeds: per_seed_mauc.len(),
            auc_std,
            mauc_std: sample_std(&per_seed_mauc),
            per_seed_mauc,
        })
    }
}

/// Evaluates on every center's test set: the single model on all of them,
/// or each center's own model on its own data.
pub fn evaluate_intra<R: Real>(
    spec: &ModelSpec,
    models: Models<'_, R>,
    test_sets: &[LabeledDataset],
    batch_size: usize,
) -> Result<EvalReport> {
    let mut aucs = BTreeMap::new();
    for ds in test_sets {
        let params = models.for_center(ds.center_id)?;
        aucs.insert(ds.center_id, dataset_auc(spec, params, ds, batch_size)?);
    }
    EvalReport::from_aucs(aucs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutOfDomain {
    pub auc: f64,
    /// Whether batch-norm statistics were recomputed.
    pub adapted: bool,
    /// Origin of every batch read for adaptation, in order.
    pub accessed: Vec<DataOrigin>,
}

/// AUC of `params` on a center it was not trained on, optionally after
/// recomputing batch-norm statistics on `adaptation` batches.
///
/// Adaptation batches must come from a training split; anything else is
/// refused before a single batch is read. Models without batch norm are
/// scored unchanged either way.
pub fn evaluate_out_of_domain<R: Real>(
    spec: &ModelSpec,
    params: &ParamSet<R>,
    target_test: &LabeledDataset,
    adapt: bool,
    adaptation: &[Batch<R>],
    batch_size: usize,
) -> Result<OutOfDomain> {
    if target_test.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "test split of center {}",
            target_test.center_id
        )));
    }
    let mut accessed = Vec::new();
    let has_bn = spec.bn_layers().next().is_some();
    let adapted_params;
    let used = if adapt && has_bn {
        if let Some(bad) = adaptation.iter().find(|b| b.origin.split != Split::Train) {
            return Err(Error::AdaptationLeak(format!(
                "batch from center {} split {}",
                bad.origin.center_id, bad.origin.split
            )));
        }
        let images: Vec<_> = adaptation
            .iter()
            .map(|b| {
                accessed.push(b.origin);
                b.images.clone()
            })
            .collect();
        adapted_params = adabn_recompute(spec, params, &images)?;
        &adapted_params
    } else {
        params
    };
    Ok(OutOfDomain {
        auc: dataset_auc(spec, used, target_test, batch_size)?,
        adapted: adapt && has_bn,
        accessed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sl(scores: &[f64], labels: &[u8]) -> ScoredLabels {
        ScoredLabels::new(scores.to_vec(), labels.to_vec()).unwrap()
    }

    #[test]
    fn perfect_separation() {
        assert_eq!(roc_auc(&sl(&[0.1, 0.9], &[0, 1])).unwrap(), 1.0);
        assert_eq!(roc_auc(&sl(&[0.9, 0.1], &[0, 1])).unwrap(), 0.0);
    }

    #[test]
    fn all_ties_give_one_half() {
        assert_eq!(roc_auc(&sl(&[0.3; 7], &[0, 1, 1, 0, 1, 0, 0])).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(
            roc_auc(&sl(&[0.1, 0.2], &[1, 1])),
            Err(Error::UndefinedAuc(_))
        ));
    }

    #[test]
    fn nan_scores_are_rejected() {
        assert!(ScoredLabels::new(vec![f64::NAN, 0.1], vec![0, 1]).is_err());
    }

    #[test]
    fn curve_ends_at_corners() {
        let c = roc_curve(&sl(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1])).unwrap();
        assert_eq!(c.first(), Some(&(0.0, 0.0)));
        assert_eq!(c.last(), Some(&(1.0, 1.0)));
        assert_eq!(c.len(), 5);
    }

    #[test]
    fn mauc_of_two() {
        let r = EvalReport::from_aucs([(0, 0.8), (1, 1.0)].into_iter().collect()).unwrap();
        assert!((r.mauc - 0.9).abs() < 1e-15);
    }

    #[test]
    fn seed_std_uses_n_minus_one() {
        let a = EvalReport::from_aucs([(0, 0.8)].into_iter().collect()).unwrap();
        let b = EvalReport::from_aucs([(0, 0.9)].into_iter().collect()).unwrap();
        let c = EvalReport::combine_seeds(&[a, b]).unwrap();
        assert_eq!(c.n_seeds, 2);
        assert!((c.per_center_auc[&0] - 0.85).abs() < 1e-15);
        assert!((c.auc_std[&0] - 0.005f64.sqrt()).abs() < 1e-12);
    }
}
