//! Flat `key = value` run configuration with dotted keys and flag overrides.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use promptforge::{AugmentRecipe, ClassifierConfig, SelectionConfig, TrainConfig, TtpConfig};

use crate::error::{CliError, CliResult};

/// Every recognized key with its default value. Empty strings mean "unset".
pub const DEFAULTS: &[(&str, &str)] = &[
    ("run.dir", "run"),
    ("bank.path", ""),
    ("llm.command", ""),
    ("llm.timeout_seconds", "30"),
    ("encoder.kind", "toy"),
    ("encoder.seed", "0"),
    ("encoder.dim", "32"),
    ("encoder.vocab", "4096"),
    ("context.n", "1"),
    ("context.init_std", "0.02"),
    ("context.seed", "0"),
    ("classifier.tau", "0.01"),
    ("data.train_root", ""),
    ("data.test_root", ""),
    ("data.augment", "standard"),
    ("data.seed", "0"),
    ("train.learning_rate", "1e-4"),
    ("train.batch_size", "256"),
    ("train.epochs", "25"),
    ("train.seed", "0"),
    ("ttp.learning_rate", "5e-5"),
    ("ttp.batch_size", "128"),
    ("ttp.steps", "10"),
    ("ttp.rounds", "1"),
    ("ttp.seed", "0"),
    ("ttp.t_real", "0.999"),
    ("ttp.t_fake", "0.5"),
    ("ttp.top_k", "128"),
    ("eval.stage", "ttp"),
    (
        "sweep.params",
        "ttp.t_real,ttp.t_fake,ttp.top_k,ttp.learning_rate",
    ),
    ("sweep.t_real", "0.99,0.999,0.9999"),
    ("sweep.t_fake", "0.5,0.7,0.9,0.99"),
    ("sweep.top_k", "32,64,128,256"),
    ("sweep.learning_rate", "1e-5,5e-5,1e-4,5e-4"),
];

/// Which context checkpoint `eval` scores with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalStage {
    Kgp,
    Ttp,
}

impl EvalStage {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalStage::Kgp => "kgp",
            EvalStage::Ttp => "ttp",
        }
    }
}

/// A single swept hyper-parameter and its grid.
#[derive(Debug, Clone, PartialEq)]
pub enum SweepAxis {
    TReal(Vec<f64>),
    TFake(Vec<f64>),
    TopK(Vec<usize>),
    LearningRate(Vec<f64>),
}

impl SweepAxis {
    pub fn key(&self) -> &'static str {
        match self {
            SweepAxis::TReal(_) => "ttp.t_real",
            SweepAxis::TFake(_) => "ttp.t_fake",
            SweepAxis::TopK(_) => "ttp.top_k",
            SweepAxis::LearningRate(_) => "ttp.learning_rate",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            SweepAxis::TReal(g) | SweepAxis::TFake(g) | SweepAxis::LearningRate(g) => g.len(),
            SweepAxis::TopK(g) => g.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The `i`-th grid point applied to `base`, and its printed value.
    pub fn apply(&self, base: &TtpConfig, i: usize) -> (TtpConfig, String) {
        let mut cfg = *base;
        let shown = match self {
            SweepAxis::TReal(g) => {
                cfg.selection.t_real = g[i];
                g[i].to_string()
            }
            SweepAxis::TFake(g) => {
                cfg.selection.t_fake = g[i];
                g[i].to_string()
            }
            SweepAxis::TopK(g) => {
                cfg.selection.top_k = g[i];
                g[i].to_string()
            }
            SweepAxis::LearningRate(g) => {
                cfg.learning_rate = g[i];
                g[i].to_string()
            }
        };
        (cfg, shown)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSettings {
    pub seed: u64,
    pub dim: usize,
    pub vocab: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextSettings {
    pub n: usize,
    pub init_std: f64,
    pub seed: u64,
}

/// Fully resolved and validated run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    pub run_dir: PathBuf,
    pub bank_path: Option<PathBuf>,
    pub llm_command: Option<String>,
    pub llm_timeout: Duration,
    pub encoder: EncoderSettings,
    pub context: ContextSettings,
    pub classifier: ClassifierConfig,
    pub train_root: Option<PathBuf>,
    pub test_root: Option<PathBuf>,
    pub augment: AugmentRecipe,
    pub data_seed: u64,
    pub train: TrainConfig,
    pub ttp: TtpConfig,
    pub eval_stage: EvalStage,
    pub sweep: Vec<SweepAxis>,
}

/// Parses `key = value` lines; `#` starts a comment line.
pub fn parse_config_text(content: &str) -> CliResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in content.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::Config(format!(
                "line {}: expected `key = value`, got `{line}`",
                lineno + 1
            ))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_value<T>(values: &BTreeMap<String, String>, key: &str) -> CliResult<T>
where
    T: FromStr,
    T::Err: Display,
{
    let raw = &values[key];
    raw.parse()
        .map_err(|e| CliError::Config(format!("`{key}`: cannot parse `{raw}`: {e}")))
}

fn parse_list<T>(values: &BTreeMap<String, String>, key: &str) -> CliResult<Vec<T>>
where
    T: FromStr,
    T::Err: Display,
{
    values[key]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|e| CliError::Config(format!("`{key}`: cannot parse `{s}`: {e}")))
        })
        .collect()
}

fn optional_path(values: &BTreeMap<String, String>, key: &str) -> Option<PathBuf> {
    let v = &values[key];
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn invalid(e: promptforge::Error) -> CliError {
    CliError::Config(e.to_string())
}

impl RunConfig {
    /// Defaults, then the config file (if any), then `overrides` in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> CliResult<Self> {
        let mut values: BTreeMap<String, String> = DEFAULTS
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let mut assignments = Vec::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => CliError::MissingInput {
                    path: path.to_path_buf(),
                    hint: "config file not found".into(),
                },
                _ => CliError::Config(format!("cannot read {}: {e}", path.display())),
            })?;
            assignments.extend(parse_config_text(&text)?);
        }
        assignments.extend(overrides.iter().cloned());
        for (k, v) in assignments {
            match values.get_mut(&k) {
                Some(slot) => *slot = v,
                None => return Err(CliError::Config(format!("unknown key `{k}`"))),
            }
        }
        Self::from_values(values)
    }

    fn from_values(values: BTreeMap<String, String>) -> CliResult<Self> {
        let kind = &values["encoder.kind"];
        if kind != "toy" {
            return Err(CliError::Config(format!(
                "`encoder.kind`: unsupported encoder `{kind}` (available: toy)"
            )));
        }
        let encoder = EncoderSettings {
            seed: parse_value(&values, "encoder.seed")?,
            dim: parse_value(&values, "encoder.dim")?,
            vocab: parse_value(&values, "encoder.vocab")?,
        };
        if encoder.dim == 0 || encoder.vocab == 0 {
            return Err(CliError::Config(
                "`encoder.dim` and `encoder.vocab` must be >= 1".into(),
            ));
        }
        let context = ContextSettings {
            n: parse_value(&values, "context.n")?,
            init_std: parse_value(&values, "context.init_std")?,
            seed: parse_value(&values, "context.seed")?,
        };
        if context.n == 0 {
            return Err(CliError::Config("`context.n` must be >= 1".into()));
        }
        if !(context.init_std.is_finite() && context.init_std > 0.0) {
            return Err(CliError::Config(
                "`context.init_std` must be positive".into(),
            ));
        }
        let classifier =
            ClassifierConfig::new(parse_value(&values, "classifier.tau")?).map_err(invalid)?;
        let train = TrainConfig {
            learning_rate: parse_value(&values, "train.learning_rate")?,
            batch_size: parse_value(&values, "train.batch_size")?,
            epochs: parse_value(&values, "train.epochs")?,
            seed: parse_value(&values, "train.seed")?,
        };
        train.validate().map_err(invalid)?;
        let ttp = TtpConfig {
            learning_rate: parse_value(&values, "ttp.learning_rate")?,
            batch_size: parse_value(&values, "ttp.batch_size")?,
            steps: parse_value(&values, "ttp.steps")?,
            rounds: parse_value(&values, "ttp.rounds")?,
            seed: parse_value(&values, "ttp.seed")?,
            selection: SelectionConfig {
                t_real: parse_value(&values, "ttp.t_real")?,
                t_fake: parse_value(&values, "ttp.t_fake")?,
                top_k: parse_value(&values, "ttp.top_k")?,
            },
        };
        ttp.validate().map_err(invalid)?;
        let eval_stage = match values["eval.stage"].as_str() {
            "kgp" => EvalStage::Kgp,
            "ttp" => EvalStage::Ttp,
            other => {
                return Err(CliError::Config(format!(
                    "`eval.stage`: expected kgp or ttp, got `{other}`"
                )))
            }
        };
        let llm_timeout = Duration::from_secs(parse_value(&values, "llm.timeout_seconds")?);
        let llm_command = Some(values["llm.command"].clone()).filter(|c| !c.trim().is_empty());
        let sweep = Self::sweep_axes(&values, &ttp)?;
        Ok(Self {
            run_dir: PathBuf::from(&values["run.dir"]),
            bank_path: optional_path(&values, "bank.path"),
            llm_command,
            llm_timeout,
            encoder,
            context,
            classifier,
            train_root: optional_path(&values, "data.train_root"),
            test_root: optional_path(&values, "data.test_root"),
            augment: AugmentRecipe::parse(&values["data.augment"]).map_err(invalid)?,
            data_seed: parse_value(&values, "data.seed")?,
            train,
            ttp,
            eval_stage,
            sweep,
            values,
        })
    }

    /// Grids are checked point by point against the rest of the config, so a
    /// sweep cannot fail validation halfway through.
    fn sweep_axes(values: &BTreeMap<String, String>, ttp: &TtpConfig) -> CliResult<Vec<SweepAxis>> {
        let mut axes = Vec::new();
        for name in values["sweep.params"]
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
        {
            let axis = match name {
                "ttp.t_real" => SweepAxis::TReal(parse_list(values, "sweep.t_real")?),
                "ttp.t_fake" => SweepAxis::TFake(parse_list(values, "sweep.t_fake")?),
                "ttp.top_k" => SweepAxis::TopK(parse_list(values, "sweep.top_k")?),
                "ttp.learning_rate" => SweepAxis::LearningRate(parse_list(values, "sweep.learning_rate")?),
                other => {
                    return Err(CliError::Config(format!(
                        "`sweep.params`: `{other}` is not sweepable (ttp.t_real, ttp.t_fake, ttp.top_k, ttp.learning_rate)"
                    )))
                }
            };
            if axis.is_empty() {
                return Err(CliError::Config(format!(
                    "sweep grid for `{name}` is empty"
                )));
            }
            for i in 0..axis.len() {
                let (cfg, shown) = axis.apply(ttp, i);
                cfg.validate()
                    .map_err(|e| CliError::Config(format!("sweep `{name}` = {shown}: {e}")))?;
            }
            axes.push(axis);
        }
        Ok(axes)
    }

    /// Every key with its resolved value, in key order.
    pub fn resolved(&self) -> Vec<(String, String)> {
        self.values
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// `# key = value` lines echoing the resolved config.
    pub fn echo_comment(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| format!("# config.{k} = {v}\n"))
            .collect()
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.run_dir.join(name)
    }
}
