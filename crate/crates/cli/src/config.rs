//! Experiment configuration files.
//!
//! ```text
//! # comment
//! [section]
//! key = value        # trailing comment
//! name = "quoted string"
//! channels = 16, 32, 64
//! ```
//!
//! Keys are fixed per section (see [`KEYS`]); anything else is rejected with
//! the nearest valid key. Every value has a default, and
//! [`ExperimentConfig::to_text`] writes the fully resolved configuration back
//! in the same syntax, so a report's echo can be fed to `train` again.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::PathBuf;

use fedsilo::datagen::{LabelSignal, SplitRatios, SyntheticSpec};
use fedsilo::federation::{FederationConfig, Strategy};
use fedsilo::model::{ParamKey, DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM};
use fedsilo::{AdamHyper, Dtype, InputShape, ModelSpec};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

fn err<T>(line: Option<usize>, message: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError {
        line,
        message: message.into(),
    })
}

/// Every accepted `(section, key)`.
pub const KEYS: &[(&str, &str)] = &[
    ("experiment", "name"),
    ("experiment", "seed"),
    ("experiment", "seeds"),
    ("experiment", "dtype"),
    ("experiment", "data_dir"),
    ("experiment", "output_dir"),
    ("data", "centers"),
    ("data", "samples_per_center"),
    ("data", "channels"),
    ("data", "height"),
    ("data", "width"),
    ("data", "class_balance"),
    ("data", "shift_magnitude"),
    ("data", "contrast"),
    ("data", "blob_radius"),
    ("data", "noise_std"),
    ("data", "distractor_rate"),
    ("data", "train_ratio"),
    ("data", "val_ratio"),
    ("data", "test_ratio"),
    ("data", "seed"),
    ("model", "channels"),
    ("model", "batch_norm"),
    ("model", "bn_momentum"),
    ("model", "bn_eps"),
    ("federation", "strategy"),
    ("federation", "local_steps"),
    ("federation", "rounds"),
    ("federation", "batch_size"),
    ("federation", "fedprox_lambda"),
    ("optimizer", "lr"),
    ("optimizer", "beta1"),
    ("optimizer", "beta2"),
    ("optimizer", "eps"),
    ("optimizer", "l2"),
    ("eval", "batch_size"),
    ("eval", "adabn"),
    ("eval", "holdout"),
    ("gradcheck", "seeds"),
    ("gradcheck", "batch_size"),
    ("gradcheck", "step"),
    ("gradcheck", "channels"),
    ("gradcheck", "size"),
    ("gradcheck", "tolerance_plain"),
    ("gradcheck", "tolerance_bn"),
    ("gradcheck", "corrupt_key"),
    ("gradcheck", "corrupt_factor"),
];

#[derive(Clone, Debug)]
struct Entry {
    value: String,
    line: usize,
}

/// `section -> key -> value` with line numbers, syntax-checked only.
#[derive(Clone, Debug, Default)]
struct Raw {
    entries: BTreeMap<(String, String), Entry>,
}

fn strip_comment(line: &str) -> &str {
    let mut in_quotes = false;
    for (i, ch) in line.char_indices() {
        match ch {
            '"' => in_quotes = !in_quotes,
            '#' if !in_quotes => return &line[..i],
            _ => {}
        }
    }
    line
}

fn nearest_key(section: &str, key: &str) -> String {
    KEYS.iter()
        .map(|&(s, k)| {
            // prefer keys of the same section on ties
            let d = strsim::levenshtein(key, k) * 2 + usize::from(s != section);
            (d, s, k)
        })
        .min()
        .map(|(_, s, k)| {
            if s == section {
                format!("`{k}`")
            } else {
                format!("`{k}` in [{s}]")
            }
        })
        .unwrap_or_default()
}

fn nearest_section(section: &str) -> &'static str {
    let mut sections: Vec<&str> = KEYS.iter().map(|&(s, _)| s).collect();
    sections.dedup();
    sections
        .into_iter()
        .min_by_key(|s| strsim::levenshtein(section, s))
        .unwrap_or("experiment")
}

impl Raw {
    fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut raw = Raw::default();
        let mut section: Option<String> = None;
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            let line = strip_comment(line).trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| ConfigError {
                        line: Some(n),
                        message: format!("unterminated section header `{line}`"),
                    })?
                    .trim();
                if !KEYS.iter().any(|&(s, _)| s == name) {
                    return err(
                        Some(n),
                        format!("unknown section [{name}]; did you mean [{}]?", nearest_section(name)),
                    );
                }
                section = Some(name.to_string());
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return err(Some(n), format!("expected `key = value`, found `{line}`"));
            };
            let (key, value) = (key.trim(), value.trim());
            let Some(sec) = section.as_deref() else {
                return err(Some(n), format!("key `{key}` appears before any [section] header"));
            };
            if !KEYS.contains(&(sec, key)) {
                return err(
                    Some(n),
                    format!(
                        "unknown key `{key}` in [{sec}]; did you mean {}?",
                        nearest_key(sec, key)
                    ),
                );
            }
            let value = match value.strip_prefix('"') {
                Some(q) => q
                    .strip_suffix('"')
                    .ok_or_else(|| ConfigError {
                        line: Some(n),
                        message: format!("unterminated string for `{key}`"),
                    })?
                    .to_string(),
                None => value.to_string(),
            };
            let slot = (sec.to_string(), key.to_string());
            if let Some(prev) = raw.entries.get(&slot) {
                return err(Some(n), format!("`{key}` in [{sec}] already set on line {}", prev.line));
            }
            raw.entries.insert(slot, Entry { value, line: n });
        }
        Ok(raw)
    }

    fn get<T: std::str::FromStr>(&self, section: &str, key: &str) -> Result<Option<T>, ConfigError> {
        match self.entries.get(&(section.to_string(), key.to_string())) {
            None => Ok(None),
            Some(e) => e.value.parse::<T>().map(Some).or_else(|_| {
                err(
                    Some(e.line),
                    format!("cannot parse `{}` as the value of `{key}` in [{section}]", e.value),
                )
            }),
        }
    }

    fn or<T: std::str::FromStr>(&self, section: &str, key: &str, default: T) -> Result<T, ConfigError> {
        Ok(self.get(section, key)?.unwrap_or(default))
    }

    fn list<T: std::str::FromStr>(&self, section: &str, key: &str) -> Result<Option<Vec<T>>, ConfigError> {
        match self.entries.get(&(section.to_string(), key.to_string())) {
            None => Ok(None),
            Some(e) if e.value.trim().is_empty() => Ok(Some(Vec::new())),
            Some(e) => e
                .value
                .split(',')
                .map(|part| {
                    part.trim().parse::<T>().or_else(|_| {
                        err(
                            Some(e.line),
                            format!("cannot parse `{}` in the list `{key}` of [{section}]", part.trim()),
                        )
                    })
                })
                .collect::<Result<Vec<T>, _>>()
                .map(Some),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub synthetic: SyntheticSpec,
    pub ratios: SplitRatios,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels: Vec<usize>,
    pub batch_norm: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub batch_size: usize,
    pub adabn: bool,
    /// Centers kept out of training and scored out of domain.
    pub holdout: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub seeds: u64,
    pub batch_size: usize,
    pub step: f64,
    pub channels: Vec<usize>,
    pub size: usize,
    pub tolerance_plain: f64,
    pub tolerance_bn: f64,
    /// Scales one analytic gradient before comparison; a harness self-test.
    pub corrupt: Option<(ParamKey, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub n_seeds: u64,
    pub dtype: Dtype,
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub federation: FederationConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradcheckConfig,
}

/// Optimizer defaults for a strategy and architecture.
pub fn default_optimizer(strategy: Strategy, batch_norm: bool) -> AdamHyper {
    let base = AdamHyper::default();
    match (batch_norm, strategy) {
        (true, Strategy::FedAvg) => AdamHyper {
            lr: 1e-3,
            beta2: 0.999,
            l2: 0.1,
            ..base
        },
        (true, _) => base,
        (false, _) => AdamHyper {
            lr: 1e-3,
            l2: 0.0,
            ..base
        },
    }
}

/// Proximal coefficient default: only FedProx uses one.
pub fn default_lambda(strategy: Strategy) -> f64 {
    if strategy == Strategy::FedProx {
        0.1
    } else {
        0.0
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::parse("").expect("defaults are valid")
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let raw = Raw::parse(text)?;
        let seed: u64 = raw.or("experiment", "seed", 0)?;
        let dtype = match raw.or("experiment", "dtype", "f64".to_string())?.as_str() {
            "f64" => Dtype::F64,
            "f32" => Dtype::F32,
            other => return err(None, format!("dtype must be f32 or f64, got `{other}`")),
        };

        let image = InputShape::new(
            raw.or("data", "channels", 3)?,
            raw.or("data", "height", 32)?,
            raw.or("data", "width", 32)?,
        );
        let signal_default = LabelSignal::default();
        let synthetic = SyntheticSpec {
            n_centers: raw.or("data", "centers", 3)?,
            samples_per_center: raw.or("data", "samples_per_center", 2000)?,
            image,
            class_balance: raw.or("data", "class_balance", 0.5)?,
            shift_magnitude: raw.or("data", "shift_magnitude", 0.5)?,
            signal: LabelSignal {
                contrast: raw.or("data", "contrast", signal_default.contrast)?,
                radius: raw.or("data", "blob_radius", signal_default.radius)?,
                noise_std: raw.or("data", "noise_std", signal_default.noise_std)?,
                distractor_rate: raw.or("data", "distractor_rate", signal_default.distractor_rate)?,
            },
            seed: raw.or("data", "seed", seed)?,
        };
        let ratios_default = SplitRatios::default();
        let ratios = SplitRatios {
            train: raw.or("data", "train_ratio", ratios_default.train)?,
            val: raw.or("data", "val_ratio", ratios_default.val)?,
            test: raw.or("data", "test_ratio", ratios_default.test)?,
        };

        let model = ModelConfig {
            channels: raw.list("model", "channels")?.unwrap_or_else(|| vec![16, 32, 64]),
            batch_norm: raw.or("model", "batch_norm", true)?,
            bn_momentum: raw.or("model", "bn_momentum", DEFAULT_BN_MOMENTUM)?,
            bn_eps: raw.or("model", "bn_eps", DEFAULT_BN_EPS)?,
        };

        let strategy: Strategy = match raw.get::<String>("federation", "strategy")? {
            Some(s) => s.parse().map_err(|e: fedsilo::Error| ConfigError {
                line: raw
                    .entries
                    .get(&("federation".into(), "strategy".into()))
                    .map(|e| e.line),
                message: e.to_string(),
            })?,
            None => Strategy::SiloBn,
        };
        let opt = default_optimizer(strategy, model.batch_norm);
        let federation = FederationConfig {
            strategy,
            local_steps: raw.or("federation", "local_steps", 10)?,
            rounds: raw.or("federation", "rounds", 50)?,
            batch_size: raw.or("federation", "batch_size", 32)?,
            fedprox_lambda: raw.or("federation", "fedprox_lambda", default_lambda(strategy))?,
            adam: AdamHyper {
                lr: raw.or("optimizer", "lr", opt.lr)?,
                beta1: raw.or("optimizer", "beta1", opt.beta1)?,
                beta2: raw.or("optimizer", "beta2", opt.beta2)?,
                eps: raw.or("optimizer", "eps", opt.eps)?,
                l2: raw.or("optimizer", "l2", opt.l2)?,
            },
            seed,
        };

        let eval = EvalConfig {
            batch_size: raw.or("eval", "batch_size", 256)?,
            adabn: raw.or("eval", "adabn", false)?,
            holdout: raw.list("eval", "holdout")?.unwrap_or_default(),
        };

        let corrupt_key: String = raw.or("gradcheck", "corrupt_key", String::new())?;
        let corrupt = if corrupt_key.is_empty() {
            None
        } else {
            let key: ParamKey = corrupt_key.parse().map_err(|e: fedsilo::Error| ConfigError {
                line: None,
                message: format!("corrupt_key: {e}"),
            })?;
            Some((key, raw.or("gradcheck", "corrupt_factor", 1.5)?))
        };
        let gradcheck = GradcheckConfig {
            seeds: raw.or("gradcheck", "seeds", 20)?,
            batch_size: raw.or("gradcheck", "batch_size", 4)?,
            step: raw.or("gradcheck", "step", 1e-5)?,
            channels: raw.list("gradcheck", "channels")?.unwrap_or_else(|| vec![4, 8, 8]),
            size: raw.or("gradcheck", "size", 8)?,
            tolerance_plain: raw.or("gradcheck", "tolerance_plain", 1e-5)?,
            tolerance_bn: raw.or("gradcheck", "tolerance_bn", 1e-4)?,
            corrupt,
        };

        let cfg = ExperimentConfig {
            name: raw.or("experiment", "name", "experiment".to_string())?,
            seed,
            n_seeds: raw.or("experiment", "seeds", 1)?,
            dtype,
            data_dir: raw.or("experiment", "data_dir", "data".to_string())?.into(),
            output_dir: raw.or("experiment", "output_dir", "runs".to_string())?.into(),
            data: DataConfig { synthetic, ratios },
            model,
            federation,
            eval,
            gradcheck,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let wrap = |e: fedsilo::Error| ConfigError {
            line: None,
            message: e.to_string(),
        };
        if self.n_seeds == 0 {
            return err(None, "seeds must be at least 1");
        }
        self.data.synthetic.validate().map_err(wrap)?;
        self.data.ratios.validate().map_err(wrap)?;
        self.federation.validate().map_err(wrap)?;
        self.model_spec().validate().map_err(wrap)?;
        if self.model.channels.is_empty() {
            return err(None, "model channels must list at least one block");
        }
        if self.eval.batch_size == 0 {
            return err(None, "eval batch_size must be positive");
        }
        if let Some(&c) = self
            .eval
            .holdout
            .iter()
            .find(|&&c| c as usize >= self.data.synthetic.n_centers)
        {
            return err(None, format!("holdout center {c} does not exist"));
        }
        if self.eval.holdout.len() >= self.data.synthetic.n_centers {
            return err(None, "at least one center must remain for training");
        }
        if self.gradcheck.step.is_nan()
            || self.gradcheck.step <= 0.0
            || self.gradcheck.batch_size < 2
            || self.gradcheck.seeds == 0
        {
            return err(None, "gradcheck needs step > 0, batch_size >= 2 and seeds >= 1");
        }
        Ok(())
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec::conv_blocks_with_bn(
            self.data.synthetic.image,
            &self.model.channels,
            self.model.batch_norm,
            self.model.bn_momentum,
            self.model.bn_eps,
        )
    }

    /// Seeds of the repetitions, in order.
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_seeds).map(|i| self.seed + i).collect()
    }

    /// The resolved configuration in file syntax; parses back to `self`.
    pub fn to_text(&self) -> String {
        fn list<T: ToString>(v: &[T]) -> String {
            v.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
        }
        let s = &self.data.synthetic;
        let f = &self.federation;
        let g = &self.gradcheck;
        let mut out = String::new();
        let w = &mut out;
        let _ = writeln!(w, "[experiment]");
        let _ = writeln!(w, "name = {:?}", self.name);
        let _ = writeln!(w, "seed = {}", self.seed);
        let _ = writeln!(w, "seeds = {}", self.n_seeds);
        let _ = writeln!(
            w,
            "dtype = \"{}\"",
            if self.dtype == Dtype::F32 { "f32" } else { "f64" }
        );
        let _ = writeln!(w, "data_dir = {:?}", self.data_dir.display().to_string());
        let _ = writeln!(w, "output_dir = {:?}", self.output_dir.display().to_string());
        let _ = writeln!(w, "\n[data]");
        let _ = writeln!(w, "centers = {}", s.n_centers);
        let _ = writeln!(w, "samples_per_center = {}", s.samples_per_center);
        let _ = writeln!(w, "channels = {}", s.image.channels);
        let _ = writeln!(w, "height = {}", s.image.height);
        let _ = writeln!(w, "width = {}", s.image.width);
        let _ = writeln!(w, "class_balance = {:?}", s.class_balance);
        let _ = writeln!(w, "shift_magnitude = {:?}", s.shift_magnitude);
        let _ = writeln!(w, "contrast = {:?}", s.signal.contrast);
        let _ = writeln!(w, "blob_radius = {:?}", s.signal.radius);
        let _ = writeln!(w, "noise_std = {:?}", s.signal.noise_std);
        let _ = writeln!(w, "distractor_rate = {:?}", s.signal.distractor_rate);
        let _ = writeln!(w, "train_ratio = {:?}", self.data.ratios.train);
        let _ = writeln!(w, "val_ratio = {:?}", self.data.ratios.val);
        let _ = writeln!(w, "test_ratio = {:?}", self.data.ratios.test);
        let _ = writeln!(w, "seed = {}", s.seed);
        let _ = writeln!(w, "\n[model]");
        let _ = writeln!(w, "channels = {}", list(&self.model.channels));
        let _ = writeln!(w, "batch_norm = {}", self.model.batch_norm);
        let _ = writeln!(w, "bn_momentum = {:?}", self.model.bn_momentum);
        let _ = writeln!(w, "bn_eps = {:?}", self.model.bn_eps);
        let _ = writeln!(w, "\n[federation]");
        let _ = writeln!(w, "strategy = \"{}\"", f.strategy);
        let _ = writeln!(w, "local_steps = {}", f.local_steps);
        let _ = writeln!(w, "rounds = {}", f.rounds);
        let _ = writeln!(w, "batch_size = {}", f.batch_size);
        let _ = writeln!(w, "fedprox_lambda = {:?}", f.fedprox_lambda);
        let _ = writeln!(w, "\n[optimizer]");
        let _ = writeln!(w, "lr = {:?}", f.adam.lr);
        let _ = writeln!(w, "beta1 = {:?}", f.adam.beta1);
        let _ = writeln!(w, "beta2 = {:?}", f.adam.beta2);
        let _ = writeln!(w, "eps = {:?}", f.adam.eps);
        let _ = writeln!(w, "l2 = {:?}", f.adam.l2);
        let _ = writeln!(w, "\n[eval]");
        let _ = writeln!(w, "batch_size = {}", self.eval.batch_size);
        let _ = writeln!(w, "adabn = {}", self.eval.adabn);
        let _ = writeln!(w, "holdout = {}", list(&self.eval.holdout));
        let _ = writeln!(w, "\n[gradcheck]");
        let _ = writeln!(w, "seeds = {}", g.seeds);
        let _ = writeln!(w, "batch_size = {}", g.batch_size);
        let _ = writeln!(w, "step = {:?}", g.step);
        let _ = writeln!(w, "channels = {}", list(&g.channels));
        let _ = writeln!(w, "size = {}", g.size);
        let _ = writeln!(w, "tolerance_plain = {:?}", g.tolerance_plain);
        let _ = writeln!(w, "tolerance_bn = {:?}", g.tolerance_bn);
        match g.corrupt {
            Some((key, factor)) => {
                let _ = writeln!(w, "corrupt_key = \"{key}\"");
                let _ = writeln!(w, "corrupt_factor = {factor:?}");
            }
            None => {
                let _ = writeln!(w, "corrupt_key = \"\"");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_bn_setting() {
        let c = ExperimentConfig::default();
        assert_eq!(c.federation.strategy, Strategy::SiloBn);
        assert_eq!(c.federation.adam, AdamHyper::default());
        assert_eq!(c.model.bn_momentum, 0.1);
        assert_eq!(c.model.bn_eps, 1e-5);
        assert_eq!(c.federation.batch_size, 32);
    }

    #[test]
    fn naive_fedavg_with_bn_has_its_own_optimizer_defaults() {
        let c = ExperimentConfig::parse("[federation]\nstrategy = fedavg\n").unwrap();
        assert_eq!(
            (c.federation.adam.lr, c.federation.adam.beta2, c.federation.adam.l2),
            (1e-3, 0.999, 0.1)
        );
        let c = ExperimentConfig::parse("[model]\nbatch_norm = false\n[federation]\nstrategy = \"fedprox\"\n").unwrap();
        assert_eq!(
            (c.federation.adam.lr, c.federation.adam.l2, c.federation.fedprox_lambda),
            (1e-3, 0.0, 0.1)
        );
    }

    #[test]
    fn unknown_key_names_the_nearest() {
        let e = ExperimentConfig::parse("[optimizer]\n\nlr_rate = 0.1\n").unwrap_err();
        assert_eq!(e.line, Some(3));
        assert!(e.message.contains("`lr_rate`") && e.message.contains("`lr`"), "{e}");
        let e = ExperimentConfig::parse("[federation]\nlocal_step = 3\n").unwrap_err();
        assert!(e.message.contains("`local_steps`"), "{e}");
    }

    #[test]
    fn unknown_section_is_rejected() {
        let e = ExperimentConfig::parse("[optimiser]\nlr = 1\n").unwrap_err();
        assert!(e.message.contains("[optimizer]"), "{e}");
    }

    #[test]
    fn bad_values_point_at_the_line() {
        let e = ExperimentConfig::parse("[federation]\nrounds = many\n").unwrap_err();
        assert_eq!(e.line, Some(2));
        let e = ExperimentConfig::parse("[federation]\nstrategy = fedsgd\n").unwrap_err();
        assert_eq!(e.line, Some(2));
    }

    #[test]
    fn duplicate_keys_are_rejected() {
        assert!(ExperimentConfig::parse("[eval]\nadabn = true\nadabn = false\n").is_err());
    }

    #[test]
    fn comments_and_quotes() {
        let c = ExperimentConfig::parse("# top\n[experiment]\nname = \"a # b\" # trailing\nseed = 4 # x\n").unwrap();
        assert_eq!(c.name, "a # b");
        assert_eq!(c.seed, 4);
        assert_eq!(c.data.synthetic.seed, 4);
    }

    #[test]
    fn echo_parses_back_to_the_same_config() {
        let text = "[experiment]\nseeds = 3\ndtype = f32\n[model]\nchannels = 8, 16\n[optimizer]\nlr = 0.000123\n\
                    [eval]\nholdout = 2\n[gradcheck]\ncorrupt_key = \"0.weight\"\n";
        let c = ExperimentConfig::parse(text).unwrap();
        let again = ExperimentConfig::parse(&c.to_text()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.to_text(), again.to_text());
    }

    #[test]
    fn invalid_combinations_are_caught() {
        assert!(ExperimentConfig::parse("[eval]\nholdout = 0, 1, 2\n").is_err());
        assert!(ExperimentConfig::parse("[federation]\nlocal_steps = 0\n").is_err());
        assert!(ExperimentConfig::parse("[data]\ntrain_ratio = 0.9\n").is_err());
        assert!(ExperimentConfig::parse("[model]\nchannels = 4, 4, 4, 4, 4, 4\n").is_err());
    }
}
