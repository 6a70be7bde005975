//! Data preparation and one training run per seed.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use fedsilo::datagen::{dataset_path, generate_partitioned, load_dataset, save_dataset, Batch, LabeledDataset, Split};
use fedsilo::federation::{init_silos, run_federation_observed, RoundLog, Strategy};
use fedsilo::metrics::{evaluate_intra, evaluate_out_of_domain, sample_std, EvalReport, Models};
use fedsilo::wire::inspect_update;
use fedsilo::{FederationConfig, ModelSpec, ParamSet, Real};

use crate::config::ExperimentConfig;
use crate::{CliError, CliResult};

#[derive(Clone, Debug)]
pub struct CenterSplits {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
}

pub fn generate_splits(cfg: &ExperimentConfig) -> CliResult<Vec<CenterSplits>> {
    Ok(generate_partitioned(&cfg.data.synthetic, cfg.data.ratios)?
        .into_iter()
        .map(|(train, val, test)| CenterSplits { train, val, test })
        .collect())
}

pub fn write_splits(root: &Path, splits: &[CenterSplits]) -> CliResult<()> {
    for s in splits {
        for ds in [&s.train, &s.val, &s.test] {
            save_dataset(ds, dataset_path(root, ds.center_id, ds.split))?;
        }
    }
    Ok(())
}

pub fn load_split(root: &Path, center: u32, split: Split) -> CliResult<LabeledDataset> {
    let path = dataset_path(root, center, split);
    if !path.is_file() {
        return Err(CliError::MissingData(path));
    }
    Ok(load_dataset(&path)?)
}

pub fn load_splits(root: &Path, n_centers: usize) -> CliResult<Vec<CenterSplits>> {
    (0..n_centers as u32)
        .map(|c| {
            Ok(CenterSplits {
                train: load_split(root, c, Split::Train)?,
                val: load_split(root, c, Split::Val)?,
                test: load_split(root, c, Split::Test)?,
            })
        })
        .collect()
}

/// AUC on a center left out of training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodRecord {
    pub target: u32,
    /// Center whose model was scored; `None` for a single global model.
    pub source: Option<u32>,
    pub auc: f64,
    /// After recomputing batch-norm statistics on the target's train split.
    pub auc_adabn: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SeedRun<R> {
    pub seed: u64,
    pub rounds: Vec<RoundLog>,
    pub eval: EvalReport,
    pub out_of_domain: Vec<OodRecord>,
    /// `(file name, parameters)` of every final model.
    pub models: Vec<(String, ParamSet<R>)>,
    /// Every key seen in an encoded message.
    pub transmitted: BTreeSet<String>,
}

pub fn model_file_name(center: Option<u32>) -> String {
    match center {
        Some(c) => format!("center_{c}.fsm"),
        None => "global.fsm".into(),
    }
}

/// Adaptation batches drawn from a center's train split.
pub fn adaptation_batches<R: Real>(train: &LabeledDataset, batch_size: usize) -> CliResult<Vec<Batch<R>>> {
    Ok(train.batches::<R>(batch_size).collect::<fedsilo::Result<Vec<_>>>()?)
}

pub fn run_seed<R: Real>(cfg: &ExperimentConfig, splits: &[CenterSplits], seed: u64) -> CliResult<SeedRun<R>> {
    let spec = cfg.model_spec();
    let fed = FederationConfig {
        seed,
        ..cfg.federation.clone()
    };
    let holdout: BTreeSet<u32> = cfg.eval.holdout.iter().copied().collect();
    let (training, held): (Vec<&CenterSplits>, Vec<&CenterSplits>) =
        splits.iter().partition(|s| !holdout.contains(&s.train.center_id));
    let train_sets: Vec<Arc<LabeledDataset>> = training.iter().map(|s| Arc::new(s.train.clone())).collect();
    let test_sets: Vec<LabeledDataset> = training.iter().map(|s| s.test.clone()).collect();

    let silos = init_silos::<R>(&spec, &train_sets, &fed)?;
    let mut transmitted = BTreeSet::new();
    let mut inspect_error = None;
    let outcome = run_federation_observed(&spec, silos, &fed, |msg| match inspect_update(msg.bytes) {
        Ok(entries) => transmitted.extend(entries.into_iter().map(|e| e.key)),
        Err(e) => {
            inspect_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = inspect_error {
        return Err(e.into());
    }

    let models: Vec<(Option<u32>, ParamSet<R>)> = if fed.strategy.is_personalized() {
        outcome
            .center_models()?
            .into_iter()
            .map(|(c, p)| (Some(c), p))
            .collect()
    } else {
        let global = outcome
            .global_model()
            .ok_or_else(|| CliError::Usage("training produced no global model".into()))?;
        vec![(None, global)]
    };

    let eval = if fed.strategy.is_personalized() {
        let per_center: BTreeMap<u32, ParamSet<R>> = models
            .iter()
            .map(|(c, p)| (c.expect("personalized"), p.clone()))
            .collect();
        evaluate_intra(&spec, Models::PerCenter(&per_center), &test_sets, cfg.eval.batch_size)?
    } else {
        evaluate_intra(&spec, Models::Single(&models[0].1), &test_sets, cfg.eval.batch_size)?
    };

    let mut out_of_domain = Vec::new();
    for target in held {
        let batches = if cfg.eval.adabn {
            adaptation_batches::<R>(&target.train, cfg.eval.batch_size)?
        } else {
            Vec::new()
        };
        for (source, params) in &models {
            let plain = evaluate_out_of_domain(&spec, params, &target.test, false, &[], cfg.eval.batch_size)?;
            let adapted = if cfg.eval.adabn {
                Some(evaluate_out_of_domain(&spec, params, &target.test, true, &batches, cfg.eval.batch_size)?.auc)
            } else {
                None
            };
            out_of_domain.push(OodRecord {
                target: target.test.center_id,
                source: *source,
                auc: plain.auc,
                auc_adabn: adapted,
            });
        }
    }

    Ok(SeedRun {
        seed,
        rounds: outcome.rounds,
        eval,
        out_of_domain,
        models: models.into_iter().map(|(c, p)| (model_file_name(c), p)).collect(),
        transmitted,
    })
}

/// Mean and sample standard deviation over seeds of the per-seed mean
/// out-of-domain AUC.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodSummary {
    pub mean_auc: f64,
    pub std_auc: f64,
    pub mean_auc_adabn: Option<f64>,
    pub std_auc_adabn: Option<f64>,
}

pub fn summarize_ood(per_seed: &[Vec<OodRecord>]) -> Option<OodSummary> {
    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }
    if per_seed.iter().any(Vec::is_empty) || per_seed.is_empty() {
        return None;
    }
    let plain: Vec<f64> = per_seed
        .iter()
        .map(|r| mean(&r.iter().map(|o| o.auc).collect::<Vec<_>>()))
        .collect();
    let adapted: Option<Vec<f64>> = per_seed
        .iter()
        .map(|r| {
            r.iter()
                .map(|o| o.auc_adabn)
                .collect::<Option<Vec<_>>>()
                .map(|v| mean(&v))
        })
        .collect();
    Some(OodSummary {
        mean_auc: mean(&plain),
        std_auc: sample_std(&plain),
        mean_auc_adabn: adapted.as_deref().map(mean),
        std_auc_adabn: adapted.as_deref().map(sample_std),
    })
}

/// Keys a strategy keeps inside each silo for `spec`.
pub fn local_keys(spec: &ModelSpec, strategy: Strategy) -> Vec<String> {
    let partition = fedsilo::federation::partition_keys(spec, strategy);
    if strategy.communicates() {
        partition.local.iter().map(ToString::to_string).collect()
    } else {
        partition
            .shared
            .iter()
            .chain(&partition.local)
            .map(ToString::to_string)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}
