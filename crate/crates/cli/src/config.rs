//! Experiment configuration files (TOML, unknown keys rejected).

use std::path::{Path, PathBuf};

use memlab::architectures::{Architecture, ModelConfig};
use memlab::corpus::synthetic::SyntheticSpec;
use memlab::objectives::TaskOptions;
use memlab::training::{ProbeConfig, TrainConfig};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

/// Overrides the root that relative output directories resolve against.
pub const OUTPUT_ROOT_ENV: &str = "MEMLAB_OUTPUT_ROOT";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("`{key}`: {message}")]
    Invalid { key: String, message: String },
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.into(), message: message.into() }
}

/// Where documents come from: a file or directory, or generated text.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

/// An existing tokenizer file, or a vocabulary size to train one.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
}

fn default_task() -> String {
    "causal".into()
}

fn default_weights() -> [f64; 2] {
    TaskOptions::default().combined_weights
}

fn default_temperature() -> f64 {
    TaskOptions::default().temperature
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    #[serde(default = "default_task")]
    pub name: String,
    /// Causal and copy weights of `combined`.
    #[serde(default = "default_weights")]
    pub combined_weights: [f64; 2],
    /// InfoNCE temperature.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

impl TaskConfig {
    pub fn options(&self) -> TaskOptions {
        TaskOptions { combined_weights: self.combined_weights, temperature: self.temperature }
    }
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self { name: default_task(), combined_weights: default_weights(), temperature: default_temperature() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub task: String,
    pub train: TrainConfig,
}

/// Starting weights other than a fresh initialization.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    /// Every parameter from this checkpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Only the encoder of this checkpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder_checkpoint: Option<PathBuf>,
}

/// A `train` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    /// Omit wall-clock fields so reruns are byte-identical.
    #[serde(default)]
    pub deterministic: bool,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub tokenizer: TokenizerConfig,
    pub model: Architecture,
    #[serde(default)]
    pub task: TaskConfig,
    /// Single-stage training; mutually exclusive with `stages`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stages: Vec<StageConfig>,
    /// Extra held-out evaluations, by task name.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub evals: Vec<String>,
    #[serde(default)]
    pub init: InitConfig,
}

/// Where a probe's embeddings come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum ProbeSourceConfig {
    /// An encoder (or decoder-only model) checkpoint.
    Checkpoint(PathBuf),
    /// An embedding file.
    Embeddings(PathBuf),
    /// A freshly initialized encoder, the untrained control.
    Untrained { model: ModelConfig, seed: u64 },
}

/// A `probe` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeFileConfig {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub deterministic: bool,
    pub source: ProbeSourceConfig,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub tokenizer: TokenizerConfig,
    pub probe: ProbeConfig,
}

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    toml::from_str(&text).map_err(|e| ConfigError::Parse { path: path.to_path_buf(), message: e.to_string() })
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<(), ConfigError> {
    let text = toml::to_string_pretty(value).map_err(|e| invalid("<snapshot>", e.to_string()))?;
    std::fs::write(path, text).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })
}

/// Resolves a relative output directory against `$MEMLAB_OUTPUT_ROOT`, or
/// the working directory when unset.
pub fn resolve_output(dir: &Path) -> PathBuf {
    if dir.is_absolute() {
        return dir.to_path_buf();
    }
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(dir),
        _ => absolute(dir),
    }
}

fn absolute(path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        std::env::current_dir().map(|d| d.join(path)).unwrap_or_else(|_| path.to_path_buf())
    }
}

/// Makes a referenced path absolute relative to the config file and checks
/// that it exists.
fn existing(key: &str, path: &Path, base: &Path) -> Result<PathBuf, ConfigError> {
    let p = if path.is_absolute() { path.to_path_buf() } else { base.join(path) };
    if !p.exists() {
        return Err(invalid(key, format!("{} does not exist", p.display())));
    }
    Ok(p)
}

fn config_dir(path: &Path) -> PathBuf {
    absolute(path.parent().unwrap_or(Path::new(".")))
}

impl CorpusConfig {
    fn resolve(&mut self, base: &Path) -> Result<(), ConfigError> {
        match (&self.path, &self.synthetic) {
            (Some(_), Some(_)) => Err(invalid("corpus", "set either `path` or `synthetic`, not both")),
            (Some(p), None) => {
                self.path = Some(existing("corpus.path", p, base)?);
                Ok(())
            }
            (None, _) => {
                self.synthetic.get_or_insert_with(SyntheticSpec::default);
                Ok(())
            }
        }
    }
}

impl TokenizerConfig {
    fn resolve(&mut self, base: &Path, vocab: usize) -> Result<(), ConfigError> {
        if let Some(p) = &self.path {
            self.path = Some(existing("tokenizer.path", p, base)?);
        } else {
            match self.vocab_size {
                Some(v) if v != vocab => {
                    return Err(invalid("tokenizer.vocab_size", format!("{v} differs from the model's vocab_size {vocab}")))
                }
                _ => self.vocab_size = Some(vocab),
            }
        }
        Ok(())
    }
}

impl ExperimentConfig {
    /// Parses and validates `path`; relative paths in the file are taken
    /// relative to its directory and made absolute.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let mut cfg: Self = read_toml(path)?;
        cfg.resolve(&config_dir(path))?;
        Ok(cfg)
    }

    pub fn resolve(&mut self, base: &Path) -> Result<(), ConfigError> {
        self.corpus.resolve(base)?;
        self.tokenizer.resolve(base, self.model.vocab_size())?;
        self.output_dir = resolve_output(&self.output_dir);
        match (&self.train, self.stages.is_empty()) {
            (Some(_), false) => return Err(invalid("stages", "set either `train` or `stages`, not both")),
            (None, true) => return Err(invalid("train", "missing; set `train` or `stages`")),
            _ => {}
        }
        for (key, p) in [("init.checkpoint", &mut self.init.checkpoint), ("init.encoder_checkpoint", &mut self.init.encoder_checkpoint)] {
            if let Some(path) = p {
                *path = existing(key, path, base)?;
            }
        }
        let known = memlab::objectives::task_names();
        let tasks = std::iter::once(("task.name", &self.task.name))
            .chain(self.stages.iter().map(|s| ("stages.task", &s.task)))
            .chain(self.evals.iter().map(|e| ("evals", e)));
        for (key, name) in tasks {
            if !known.iter().any(|k| k == name) {
                return Err(invalid(key, format!("unknown task `{name}`; known: {}", known.join(", "))));
            }
        }
        if let Some(t) = &self.train {
            t.validate().map_err(|e| invalid("train", e.to_string()))?;
        }
        for s in &self.stages {
            s.train.validate().map_err(|e| invalid("stages.train", e.to_string()))?;
        }
        self.model.build().map_err(|e| invalid("model", e.to_string()))?;
        Ok(())
    }
}

impl ProbeFileConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let mut cfg: Self = read_toml(path)?;
        let base = config_dir(path);
        cfg.output_dir = resolve_output(&cfg.output_dir);
        match &mut cfg.source {
            ProbeSourceConfig::Checkpoint(p) => *p = existing("source.checkpoint", p, &base)?,
            ProbeSourceConfig::Embeddings(p) => *p = existing("source.embeddings", p, &base)?,
            ProbeSourceConfig::Untrained { model, .. } => model.validate().map_err(|e| invalid("source.untrained.model", e.to_string()))?,
        }
        if !matches!(cfg.source, ProbeSourceConfig::Embeddings(_)) {
            cfg.corpus.resolve(&base)?;
            cfg.tokenizer.resolve(&base, cfg.probe.decoder.vocab_size)?;
        }
        cfg.probe.train.validate().map_err(|e| invalid("probe.train", e.to_string()))?;
        cfg.probe.decoder.validate().map_err(|e| invalid("probe.decoder", e.to_string()))?;
        Ok(cfg)
    }
}
