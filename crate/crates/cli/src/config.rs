//! The pipeline configuration file and its command-line overlay.
//!
//! Configuration is one TOML document. Every command-line option is turned
//! into a `dotted.key = value` override and merged into the parsed document
//! before it is deserialized, so a run with overrides is indistinguishable
//! from a run with an edited file.

use std::path::{Path, PathBuf};

use rrtf_core::evaluator::DecodingConfig;
use rrtf_core::evolver::{EvolutionConfig, DEFAULT_LEAKAGE_THRESHOLD};
use rrtf_core::executor::{Executor, RunnerSpec, SandboxLimits};
use rrtf_core::ranker::RankPolicy;
use rrtf_core::sampler::{GeneratorKind, GeneratorSpec, SamplingPlan};
use rrtf_core::trainer::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("override {0:?} is not of the form key=value")]
    Override(String),
    #[error("override {key}: {message}")]
    OverrideConflict { key: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("missing required path `paths.{0}` (set it in the config or pass the matching flag)")]
    MissingPath(&'static str),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub benchmark: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub candidates: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outcomes: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub triples: Option<PathBuf>,
    /// Parameters to start training from; a fresh model when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_model: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub leakage: Option<PathBuf>,
}

/// A generator that is not part of a teacher/student pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedGenerator {
    pub generator_id: String,
    #[serde(flatten)]
    pub kind: GeneratorKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecutorSection {
    pub limits: SandboxLimits,
    pub runner: RunnerSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scratch_root: Option<PathBuf>,
    pub keep_failures: bool,
    pub isolate_network: bool,
}

impl Default for ExecutorSection {
    fn default() -> Self {
        Self {
            limits: SandboxLimits::default(),
            runner: RunnerSpec::python3(),
            scratch_root: None,
            keep_failures: false,
            isolate_network: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// The generator under evaluation; the trained toy model at
    /// `paths.model` when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generator: Option<NamedGenerator>,
    pub decoding: DecodingConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Overrides every stage's own seed when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Overrides every stage's own worker count when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    pub leakage_threshold: f64,
    pub paths: Paths,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub evolver: Option<NamedGenerator>,
    pub evolution: EvolutionConfig,
    pub generators: Vec<GeneratorSpec>,
    pub sampling: SamplingPlan,
    pub executor: ExecutorSection,
    pub policy: RankPolicy,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: None,
            workers: None,
            leakage_threshold: DEFAULT_LEAKAGE_THRESHOLD,
            paths: Paths::default(),
            evolver: None,
            evolution: EvolutionConfig::default(),
            generators: Vec::new(),
            sampling: SamplingPlan::default(),
            executor: ExecutorSection::default(),
            policy: RankPolicy::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

const DEFAULT_WORKERS: usize = 8;

impl PipelineConfig {
    /// The configuration each stage actually runs with: the global seed and
    /// worker count pushed down into every section.
    pub fn effective(&self) -> PipelineConfig {
        let mut c = self.clone();
        if let Some(seed) = c.seed {
            c.evolution.seed = seed;
            c.sampling.seed = seed;
            c.model.seed = seed;
            c.train.seed = seed;
            c.eval.decoding.seed = seed;
        }
        if let Some(w) = c.workers {
            c.evolution.workers = w;
            c.sampling.workers = w;
        }
        c
    }

    pub fn stage_workers(&self) -> usize {
        self.workers.unwrap_or(DEFAULT_WORKERS)
    }

    pub fn executor(&self) -> Executor {
        let mut e = Executor::new(self.executor.runner.clone(), self.executor.limits.clone());
        e.scratch_root = self.executor.scratch_root.clone();
        e.keep_failures = self.executor.keep_failures;
        e.isolate_network = self.executor.isolate_network;
        e
    }

    pub fn require(&self, name: &'static str) -> Result<&Path, ConfigError> {
        let p = &self.paths;
        let value = match name {
            "seeds" => &p.seeds,
            "corpus" => &p.corpus,
            "benchmark" => &p.benchmark,
            "candidates" => &p.candidates,
            "outcomes" => &p.outcomes,
            "triples" => &p.triples,
            "model" => &p.model,
            "report" => &p.report,
            "leakage" => &p.leakage,
            other => unreachable!("unknown path key {other}"),
        };
        value.as_deref().ok_or(ConfigError::MissingPath(name))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |section: &str, e: String| ConfigError::Invalid(format!("{section}: {e}"));
        if !(0.0..=1.0).contains(&self.leakage_threshold) {
            return Err(invalid("leakage_threshold", format!("{} outside [0, 1]", self.leakage_threshold)));
        }
        if self.workers == Some(0) {
            return Err(invalid("workers", "must be positive".into()));
        }
        self.evolution.validate().map_err(|e| invalid("evolution", e.to_string()))?;
        self.sampling.validate().map_err(|e| invalid("sampling", e.to_string()))?;
        self.executor.limits.validate().map_err(|e| invalid("executor.limits", e.to_string()))?;
        self.policy.validate().map_err(|e| invalid("policy", e.to_string()))?;
        self.model.validate().map_err(|e| invalid("model", e.to_string()))?;
        self.train.validate().map_err(|e| invalid("train", e.to_string()))?;
        self.eval.decoding.validate().map_err(|e| invalid("eval.decoding", e))?;
        Ok(())
    }
}

/// Parses `key=value`. The value is read as a TOML value when it parses as
/// one and as a bare string otherwise.
pub fn parse_override(raw: &str) -> Result<(String, Value), ConfigError> {
    let (key, value) = raw.split_once('=').ok_or_else(|| ConfigError::Override(raw.to_string()))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError::Override(raw.to_string()));
    }
    let value = value.trim();
    let parsed = toml::from_str::<Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(value.to_string()));
    Ok((key.to_string(), parsed))
}

/// Sets `dotted.key` in `doc`, creating intermediate tables as needed.
pub fn apply_override(doc: &mut Table, key: &str, value: Value) -> Result<(), ConfigError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields at least one part");
    let mut table = doc;
    for (i, part) in parts.iter().enumerate() {
        let entry = table.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
        table = match entry {
            Value::Table(t) => t,
            _ => {
                return Err(ConfigError::OverrideConflict {
                    key: key.to_string(),
                    message: format!("`{}` is not a table", parts[..=i].join(".")),
                })
            }
        };
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// A loaded configuration document plus the directory its relative paths
/// are resolved against.
#[derive(Debug, Clone)]
pub struct ConfigDoc {
    pub table: Table,
    pub base_dir: PathBuf,
}

impl ConfigDoc {
    pub fn empty(base_dir: PathBuf) -> Self {
        Self {
            table: Table::new(),
            base_dir,
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let table = text.parse::<Table>().map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let base_dir = path
            .parent()
            .map(|p| if p.as_os_str().is_empty() { Path::new(".") } else { p })
            .unwrap_or(Path::new("."));
        Ok(Self {
            table,
            base_dir: absolute(base_dir),
        })
    }

    pub fn overlay(&mut self, overrides: &[(String, Value)]) -> Result<(), ConfigError> {
        for (key, value) in overrides {
            apply_override(&mut self.table, key, value.clone())?;
        }
        Ok(())
    }

    /// Deserializes and validates the document. Relative paths under
    /// `paths` and `executor.scratch_root` are taken relative to `base_dir`.
    pub fn resolve(&self) -> Result<PipelineConfig, ConfigError> {
        let mut config: PipelineConfig =
            Value::Table(self.table.clone())
                .try_into()
                .map_err(|e: toml::de::Error| ConfigError::Parse {
                    path: "configuration".into(),
                    message: e.message().to_string(),
                })?;
        let base = &self.base_dir;
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        let paths = &mut config.paths;
        for p in [
            &mut paths.seeds,
            &mut paths.corpus,
            &mut paths.benchmark,
            &mut paths.candidates,
            &mut paths.outcomes,
            &mut paths.triples,
            &mut paths.init_model,
            &mut paths.model,
            &mut paths.report,
            &mut paths.leakage,
            &mut config.executor.scratch_root,
        ] {
            fix(p);
        }
        for g in config.generators.iter_mut() {
            if let GeneratorKind::ToyLm { model_path } = &mut g.kind {
                if model_path.is_relative() {
                    *model_path = base.join(&*model_path);
                }
            }
        }
        for g in [config.evolver.as_mut(), config.eval.generator.as_mut()].into_iter().flatten() {
            if let GeneratorKind::ToyLm { model_path } = &mut g.kind {
                if model_path.is_relative() {
                    *model_path = base.join(&*model_path);
                }
            }
        }
        config.validate()?;
        Ok(config)
    }
}

/// Reads a side file (TOML) into a value to be placed under `key`. When the
/// file's top level holds a single entry named after the key's last
/// segment, that entry is used; otherwise the whole table is.
pub fn side_file(path: &Path, key: &str) -> Result<Value, ConfigError> {
    let doc = ConfigDoc::load(path)?;
    let leaf = key.rsplit('.').next().unwrap_or(key);
    let mut table = doc.table;
    if table.len() == 1 {
        if let Some(v) = table.remove(leaf) {
            return Ok(v);
        }
    }
    Ok(Value::Table(table))
}

/// A methods file: one method per non-empty line.
pub fn methods_file(path: &Path) -> Result<Value, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(Value::Array(
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|l| Value::String(l.to_string()))
            .collect(),
    ))
}

/// Absolute form of a path given on the command line, so it means the same
/// thing wherever the configuration file lives.
pub fn absolute(path: &Path) -> PathBuf {
    std::path::absolute(path).unwrap_or_else(|_| path.to_path_buf())
}
