//! JSON run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use enclab_core::lora::LoraConfig;
use enclab_core::objectives::{ContrastiveConfig, MaskingConfig, TrainConfig};
use enclab_core::probe::ProbeConfig;
use enclab_core::transformer::ModelConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config is missing required keys: {}", .0.join(", "))]
    MissingKeys(Vec<String>),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("config key {key} points to {}, which is not a readable file", path.display())]
    MissingPath { key: String, path: PathBuf },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerConfig {
    /// A trained vocab file; when absent `tokenizer-train` builds one.
    #[serde(default)]
    pub vocab: Option<PathBuf>,
    /// Training corpus; defaults to `paths.mntp_corpus`.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MntpStageConfig {
    #[serde(default)]
    pub masking: MaskingConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimcseStageConfig {
    #[serde(default = "default_simcse_dropout")]
    pub dropout_p: f64,
    #[serde(default)]
    pub contrastive: ContrastiveConfig,
    #[serde(default = "default_simcse_train")]
    pub train: TrainConfig,
}

fn default_simcse_dropout() -> f64 {
    0.3
}

fn default_simcse_train() -> TrainConfig {
    TrainConfig { batch_size: 128, ..TrainConfig::default() }
}

impl Default for SimcseStageConfig {
    fn default() -> Self {
        Self { dropout_p: default_simcse_dropout(), contrastive: ContrastiveConfig::default(), train: default_simcse_train() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupervisedStageConfig {
    #[serde(default)]
    pub dropout_p: f64,
    #[serde(default)]
    pub contrastive: ContrastiveConfig,
    #[serde(default = "default_supervised_train")]
    pub train: TrainConfig,
}

fn default_supervised_train() -> TrainConfig {
    TrainConfig { steps: 1000, batch_size: 512, lr: 2e-4, warmup_steps: Some(300), seed: 0 }
}

impl Default for SupervisedStageConfig {
    fn default() -> Self {
        Self { dropout_p: 0.0, contrastive: ContrastiveConfig::default(), train: default_supervised_train() }
    }
}

/// Corpus locations. Relative paths resolve against the config file's
/// directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(default)]
    pub mntp_corpus: Option<PathBuf>,
    #[serde(default)]
    pub simcse_corpus: Option<PathBuf>,
    #[serde(default)]
    pub supervised_data: Option<PathBuf>,
    #[serde(default)]
    pub probe_corpus: Option<PathBuf>,
    #[serde(default)]
    pub triples: Option<PathBuf>,
    #[serde(default)]
    pub sts: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    #[serde(default)]
    pub tokenizer: TokenizerConfig,
    #[serde(default)]
    pub lora: LoraConfig,
    #[serde(default)]
    pub mntp: MntpStageConfig,
    #[serde(default)]
    pub simcse: SimcseStageConfig,
    #[serde(default)]
    pub supervised: SupervisedStageConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    pub paths: PathsConfig,
}

const REQUIRED: &[&str] = &["seed", "model", "paths"];
const REQUIRED_MODEL: &[&str] = &["vocab_size", "d_model", "n_heads", "n_layers", "d_ff", "max_seq_len"];

impl RunConfig {
    /// Parses a config document, reporting every missing required key at
    /// once. Paths are kept as written.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let obj = value.as_object().ok_or_else(|| ConfigError::Invalid("top level must be an object".into()))?;
        let mut missing: Vec<String> = REQUIRED.iter().filter(|k| !obj.contains_key(**k)).map(|k| k.to_string()).collect();
        if let Some(model) = obj.get("model").and_then(|m| m.as_object()) {
            missing.extend(REQUIRED_MODEL.iter().filter(|k| !model.contains_key(**k)).map(|k| format!("model.{k}")));
        }
        if !missing.is_empty() {
            return Err(ConfigError::MissingKeys(missing));
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, resolves relative paths against the file's directory and
    /// checks that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.for_each_path(|_, p| {
            let joined = base.join(&*p);
            *p = std::path::absolute(&joined).unwrap_or(joined);
        });
        cfg.check_paths()?;
        Ok(cfg)
    }

    fn for_each_path(&mut self, mut f: impl FnMut(&str, &mut PathBuf)) {
        let p = &mut self.paths;
        let slots: [(&str, &mut Option<PathBuf>); 8] = [
            ("tokenizer.vocab", &mut self.tokenizer.vocab),
            ("tokenizer.corpus", &mut self.tokenizer.corpus),
            ("paths.mntp_corpus", &mut p.mntp_corpus),
            ("paths.simcse_corpus", &mut p.simcse_corpus),
            ("paths.supervised_data", &mut p.supervised_data),
            ("paths.probe_corpus", &mut p.probe_corpus),
            ("paths.triples", &mut p.triples),
            ("paths.sts", &mut p.sts),
        ];
        for (key, slot) in slots {
            if let Some(path) = slot {
                f(key, path);
            }
        }
    }

    pub fn check_paths(&mut self) -> Result<(), ConfigError> {
        let mut bad = None;
        self.for_each_path(|key, p| {
            if bad.is_none() && !p.is_file() {
                bad = Some(ConfigError::MissingPath { key: key.to_string(), path: p.clone() });
            }
        });
        bad.map_or(Ok(()), Err)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let core = |e: enclab_core::Error| ConfigError::Invalid(e.to_string());
        self.model.validate().map_err(core)?;
        self.lora.validate().map_err(core)?;
        self.mntp.masking.validate().map_err(core)?;
        for t in [&self.mntp.train, &self.simcse.train, &self.supervised.train] {
            t.validate().map_err(core)?;
        }
        self.simcse.contrastive.validate().map_err(core)?;
        self.supervised.contrastive.validate().map_err(core)?;
        self.probe.validate().map_err(core)?;
        for p in [self.simcse.dropout_p, self.supervised.dropout_p] {
            if !(0.0..1.0).contains(&p) {
                return Err(ConfigError::Invalid(format!("dropout {p} outside [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn tokenizer_corpus(&self) -> Option<&Path> {
        self.tokenizer.corpus.as_deref().or(self.paths.mntp_corpus.as_deref())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}
