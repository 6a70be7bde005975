//! The four subcommands. Each returns its result and prints a short
//! human-readable summary on stdout.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use fedsilo::datagen::{load_dataset, LabeledDataset, Split};
use fedsilo::gradcheck::{check_gradients, random_problem, GradCheckOptions, GradCheckReport};
use fedsilo::metrics::{dataset_auc, evaluate_out_of_domain, EvalReport};
use fedsilo::wire::{decode_model, model_dtype, save_model};
use fedsilo::{Dtype, Error, InputShape, ModelSpec, ParamSet, Real};

use crate::config::ExperimentConfig;
use crate::experiment::{
    adaptation_batches, generate_splits, load_splits, local_keys, run_seed, summarize_ood, write_splits, SeedRun,
};
use crate::report::{to_json, ExperimentReport, SeedRecord, TOOL};
use crate::{CliError, CliResult};

pub fn read_config(path: &Path) -> CliResult<ExperimentConfig> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    Ok(ExperimentConfig::parse(&text)?)
}

/// Writes every center's splits under `out` (default: the config's
/// `data_dir`) and returns the directory.
pub fn generate(config: &Path, out: Option<&Path>) -> CliResult<PathBuf> {
    let cfg = read_config(config)?;
    let root = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.data_dir.clone());
    let splits = generate_splits(&cfg)?;
    write_splits(&root, &splits)?;
    for s in &splits {
        let count = |ds: &LabeledDataset| {
            let (neg, pos) = ds.class_counts();
            format!("{} ({pos}+/{neg}-)", ds.len())
        };
        println!(
            "center {}: train {}, val {}, test {}",
            s.train.center_id,
            count(&s.train),
            count(&s.val),
            count(&s.test)
        );
    }
    println!("wrote {} centers to {}", splits.len(), root.display());
    Ok(root)
}

#[derive(Clone, Debug, Default)]
pub struct TrainArgs {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seeds: Option<u64>,
    pub f32: bool,
    pub adabn: bool,
}

/// Runs every seed, writes `report.json` and `models/seed_<s>/*.fsm` under
/// the output directory, and returns the report.
pub fn train(args: &TrainArgs) -> CliResult<ExperimentReport> {
    let mut cfg = read_config(&args.config)?;
    if let Some(n) = args.seeds {
        cfg.n_seeds = n;
    }
    if args.f32 {
        cfg.dtype = Dtype::F32;
    }
    if args.adabn {
        cfg.eval.adabn = true;
    }
    cfg.validate()?;
    let out = args.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    match cfg.dtype {
        Dtype::F64 => train_as::<f64>(&cfg, &out),
        Dtype::F32 => train_as::<f32>(&cfg, &out),
    }
}

fn train_as<R: Real>(cfg: &ExperimentConfig, out: &Path) -> CliResult<ExperimentReport> {
    let start = Instant::now();
    let splits = load_splits(&cfg.data_dir, cfg.data.synthetic.n_centers)?;
    let spec = cfg.model_spec();
    log::info!(
        "training {} on {} centers, {} seeds",
        cfg.federation.strategy,
        splits.len(),
        cfg.n_seeds
    );
    let runs: Vec<SeedRun<R>> = cfg
        .seeds()
        .into_par_iter()
        .map(|seed| run_seed::<R>(cfg, &splits, seed))
        .collect::<CliResult<_>>()?;

    let mut records = Vec::with_capacity(runs.len());
    let mut transmitted = std::collections::BTreeSet::new();
    for run in &runs {
        let dir = out.join("models").join(format!("seed_{}", run.seed));
        for (file, params) in &run.models {
            save_model(&spec, params, dir.join(file))?;
        }
        transmitted.extend(run.transmitted.iter().cloned());
        records.push(SeedRecord {
            seed: run.seed,
            rounds: run.rounds.clone(),
            eval: run.eval.clone(),
            out_of_domain: run.out_of_domain.clone(),
            models: run.models.iter().map(|(f, _)| f.clone()).collect(),
        });
    }
    let summary = EvalReport::combine_seeds(&records.iter().map(|r| r.eval.clone()).collect::<Vec<_>>())?;
    let ood = summarize_ood(&records.iter().map(|r| r.out_of_domain.clone()).collect::<Vec<_>>());
    let report = ExperimentReport {
        tool: TOOL.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        name: cfg.name.clone(),
        config: cfg.to_text(),
        strategy: cfg.federation.strategy,
        dtype: cfg.dtype,
        communicated_keys: transmitted.into_iter().collect(),
        local_keys: local_keys(&spec, cfg.federation.strategy),
        seeds: records,
        summary,
        out_of_domain: ood,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    fs::create_dir_all(out)?;
    let json = to_json(&report).map_err(|e| CliError::Usage(format!("cannot serialize report: {e}")))?;
    fs::write(out.join("report.json"), json)?;

    let s = &report.summary;
    println!(
        "{} ({}): mAUC {:.4} +/- {:.4} over {} seeds",
        report.strategy, report.name, s.mauc, s.mauc_std, s.n_seeds
    );
    for (c, auc) in &s.per_center_auc {
        println!("  center {c}: AUC {auc:.4} +/- {:.4}", s.auc_std[c]);
    }
    if let Some(o) = &report.out_of_domain {
        match o.mean_auc_adabn {
            Some(a) => println!("  held-out: AUC {:.4}, with AdaBN {a:.4}", o.mean_auc),
            None => println!("  held-out: AUC {:.4}", o.mean_auc),
        }
    }
    println!("report written to {}", out.join("report.json").display());
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct EvalArgs {
    pub models: Vec<PathBuf>,
    /// Root holding `center_<k>/test.fsd`; each model is scored on its own
    /// center, a global model on all of them.
    pub data: Option<PathBuf>,
    /// One center directory never seen in training.
    pub foreign: Option<PathBuf>,
    pub adabn: bool,
    pub out: Option<PathBuf>,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForeignEval {
    pub center: u32,
    pub auc: f64,
    pub auc_adabn: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEval {
    /// File name of the model.
    pub model: String,
    /// Center the model belongs to; `None` for a global model.
    pub center: Option<u32>,
    pub intra: BTreeMap<u32, f64>,
    pub foreign: Option<ForeignEval>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub models: Vec<ModelEval>,
    /// Intra-center AUC over all models, when any center was scored.
    pub intra: Option<EvalReport>,
}

/// `center_<k>.fsm` belongs to center `k`; any other name is global.
fn model_center(path: &Path) -> Option<u32> {
    path.file_stem()?.to_str()?.strip_prefix("center_")?.parse().ok()
}

fn centers_in(root: &Path) -> CliResult<Vec<u32>> {
    let mut centers: Vec<u32> = fs::read_dir(root)
        .map_err(|e| CliError::Usage(format!("cannot read data directory {}: {e}", root.display())))?
        .filter_map(|entry| {
            let entry = entry.ok()?;
            let c = entry.file_name().to_str()?.strip_prefix("center_")?.parse().ok()?;
            entry.path().join("test.fsd").is_file().then_some(c)
        })
        .collect();
    centers.sort_unstable();
    if centers.is_empty() {
        return Err(CliError::MissingData(root.join("center_0").join("test.fsd")));
    }
    Ok(centers)
}

fn check_input(file: &str, spec: &ModelSpec, ds: &LabeledDataset) -> CliResult<()> {
    let data: InputShape = ds.sample_shape();
    if data != spec.input {
        return Err(Error::Shape(format!(
            "model {file} expects {} inputs, center {} data is {data}",
            spec.input, ds.center_id
        ))
        .into());
    }
    Ok(())
}

fn load_center_split(dir: &Path, split: Split) -> CliResult<LabeledDataset> {
    let path = dir.join(format!("{}.fsd", split.as_str()));
    if !path.is_file() {
        return Err(CliError::MissingData(path));
    }
    Ok(load_dataset(path)?)
}

pub fn eval(args: &EvalArgs) -> CliResult<EvalOutput> {
    if args.models.is_empty() {
        return Err(CliError::Usage("give at least one --model".into()));
    }
    if args.data.is_none() && args.foreign.is_none() {
        return Err(CliError::Usage("give --data, --foreign or both".into()));
    }
    let tests: BTreeMap<u32, LabeledDataset> = match &args.data {
        Some(root) => centers_in(root)?
            .into_iter()
            .map(|c| Ok((c, load_center_split(&root.join(format!("center_{c}")), Split::Test)?)))
            .collect::<CliResult<_>>()?,
        None => BTreeMap::new(),
    };
    let foreign = match &args.foreign {
        Some(dir) => {
            let test = load_center_split(dir, Split::Test)?;
            let train = if args.adabn {
                Some(load_center_split(dir, Split::Train)?)
            } else {
                None
            };
            Some((test, train))
        }
        None => None,
    };

    let mut models = Vec::new();
    for path in &args.models {
        let bytes =
            fs::read(path).map_err(|e| CliError::Usage(format!("cannot read model {}: {e}", path.display())))?;
        let result = match model_dtype(&bytes)? {
            Dtype::F64 => eval_model::<f64>(path, &bytes, &tests, foreign.as_ref(), args),
            Dtype::F32 => eval_model::<f32>(path, &bytes, &tests, foreign.as_ref(), args),
        }?;
        models.push(result);
    }

    let mut per_center = BTreeMap::new();
    for m in &models {
        per_center.extend(m.intra.iter().map(|(&c, &a)| (c, a)));
    }
    let intra = if per_center.is_empty() {
        None
    } else {
        Some(EvalReport::from_aucs(per_center)?)
    };
    let output = EvalOutput { models, intra };

    for m in &output.models {
        for (c, auc) in &m.intra {
            println!("{}: center {c} AUC {auc:.6}", m.model);
        }
        if let Some(f) = &m.foreign {
            match f.auc_adabn {
                Some(a) => println!(
                    "{}: foreign center {} AUC {:.6}, with AdaBN {a:.6}",
                    m.model, f.center, f.auc
                ),
                None => println!("{}: foreign center {} AUC {:.6}", m.model, f.center, f.auc),
            }
        }
    }
    if let Some(r) = &output.intra {
        println!("mAUC {:.6}", r.mauc);
    }
    if let Some(out) = &args.out {
        if let Some(parent) = out.parent() {
            fs::create_dir_all(parent)?;
        }
        let json = to_json(&output).map_err(|e| CliError::Usage(format!("cannot serialize metrics: {e}")))?;
        fs::write(out, json)?;
    }
    Ok(output)
}

fn eval_model<R: Real>(
    path: &Path,
    bytes: &[u8],
    tests: &BTreeMap<u32, LabeledDataset>,
    foreign: Option<&(LabeledDataset, Option<LabeledDataset>)>,
    args: &EvalArgs,
) -> CliResult<ModelEval> {
    let file = path
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default();
    let (spec, params): (ModelSpec, ParamSet<R>) = decode_model(bytes)?;
    let center = model_center(path);
    let mut intra = BTreeMap::new();
    for (&c, ds) in tests {
        if center.is_some_and(|own| own != c) {
            continue;
        }
        check_input(&file, &spec, ds)?;
        intra.insert(c, dataset_auc(&spec, &params, ds, args.batch_size)?);
    }
    if let (Some(own), false) = (center, tests.is_empty()) {
        if intra.is_empty() {
            log::warn!("{file}: no test data for center {own}");
        }
    }
    let foreign = match foreign {
        Some((test, train)) => {
            check_input(&file, &spec, test)?;
            let plain = evaluate_out_of_domain(&spec, &params, test, false, &[], args.batch_size)?;
            let adapted = match train {
                Some(train) => {
                    if spec.bn_layers().next().is_none() {
                        eprintln!("warning: --adabn is a no-op for {file}: the model has no batch-norm layers");
                    }
                    check_input(&file, &spec, train)?;
                    let batches = adaptation_batches::<R>(train, args.batch_size)?;
                    Some(evaluate_out_of_domain(&spec, &params, test, true, &batches, args.batch_size)?.auc)
                }
                None => None,
            };
            Some(ForeignEval {
                center: test.center_id,
                auc: plain.auc,
                auc_adabn: adapted,
            })
        }
        None => None,
    };
    Ok(ModelEval {
        model: file,
        center,
        intra,
        foreign,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOutcome {
    pub arch: &'static str,
    pub tolerance: f64,
    pub seeds: u64,
    /// Worst entry over all seeds.
    pub worst: GradCheckReport,
    pub passed: bool,
}

/// Checks the plain and the batch-norm variant of the configured network.
/// Fails with the worst key when either exceeds its tolerance.
pub fn gradcheck(config: Option<&Path>) -> CliResult<Vec<GradcheckOutcome>> {
    let cfg = match config {
        Some(p) => read_config(p)?,
        None => ExperimentConfig::default(),
    };
    let g = &cfg.gradcheck;
    let input = InputShape::new(cfg.data.synthetic.image.channels, g.size, g.size);
    let archs = [
        (
            "dcnn",
            ModelSpec::conv_blocks(input, &g.channels, false),
            g.tolerance_plain,
        ),
        (
            "dcnn+bn",
            ModelSpec::conv_blocks(input, &g.channels, true),
            g.tolerance_bn,
        ),
    ];
    if let Some((key, _)) = g.corrupt {
        let known = archs
            .iter()
            .any(|(_, spec, _)| fedsilo::model::param_shapes(spec).iter().any(|(k, _)| *k == key));
        if !known {
            return Err(crate::ConfigError {
                line: None,
                message: format!("corrupt_key {key} is not a parameter of the checked networks"),
            }
            .into());
        }
    }

    let mut outcomes = Vec::new();
    for (arch, spec, tolerance) in archs {
        let has_key = |key| fedsilo::model::param_shapes(&spec).iter().any(|(k, _)| *k == key);
        let options = GradCheckOptions {
            h: g.step,
            corrupt: g.corrupt.filter(|(k, _)| has_key(*k)),
        };
        let reports: Vec<GradCheckReport> = (0..g.seeds)
            .into_par_iter()
            .map(|i| {
                let (params, batch, labels) = random_problem(&spec, cfg.seed + i, g.batch_size)?;
                check_gradients(&spec, &params, &batch, &labels, &options)
            })
            .collect::<fedsilo::Result<_>>()?;
        let worst = reports
            .into_iter()
            .reduce(|a, b| if b.max_rel_error > a.max_rel_error { b } else { a })
            .expect("at least one seed");
        let passed = worst.max_rel_error < tolerance;
        println!(
            "{arch}: max relative error {:.3e} at {}[{}] over {} seeds, tolerance {tolerance:e}, {} kink crossings excluded: {}",
            worst.max_rel_error,
            worst.worst_key.map(|k| k.to_string()).unwrap_or_else(|| "-".into()),
            worst.worst_index,
            g.seeds,
            worst.kink_crossings,
            if passed { "PASS" } else { "FAIL" }
        );
        outcomes.push(GradcheckOutcome {
            arch,
            tolerance,
            seeds: g.seeds,
            worst,
            passed,
        });
    }
    if let Some(bad) = outcomes.iter().find(|o| !o.passed) {
        return Err(CliError::CheckFailed(format!(
            "{}: gradient of {} entry {} is off by {:.3e} (tolerance {:e})",
            bad.arch,
            bad.worst.worst_key.map(|k| k.to_string()).unwrap_or_else(|| "-".into()),
            bad.worst.worst_index,
            bad.worst.max_rel_error,
            bad.tolerance
        )));
    }
    Ok(outcomes)
}
