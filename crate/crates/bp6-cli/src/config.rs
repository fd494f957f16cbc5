//! Run configuration: a sectioned key/value text file whose defaults are the
//! reference protocol constants. The canonical serialization is hashed and
//! embedded in every output so runs can be traced to their settings.

use bp6_core::data::{PreprocessConfig, DECIMATE_FACTOR, WINDOW_LEN};
use bp6_core::nn::ModelConfig;
use bp6_core::train::{LossConfig, TrainConfig};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config line {line}: expected `key = value`, got {text:?}")]
    BadLine { line: usize, text: String },
    #[error("config line {line}: unknown section [{section}]")]
    UnknownSection { line: usize, section: String },
    #[error("config line {line}: unknown key {key:?} in section [{section}]")]
    UnknownKey { line: usize, section: String, key: String },
    #[error("config line {line}: key {key}: cannot parse {value:?}: {detail}")]
    BadValue { line: usize, key: String, value: String, detail: String },
    #[error("config key outside any section at line {0}")]
    NoSection(usize),
    #[error("unsupported value: {0}")]
    Unsupported(String),
}

/// Everything a run needs, with the reference protocol as defaults.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub input_dir: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub window_len: usize,
    pub decimate: usize,
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            input_dir: None,
            annotations: None,
            window_len: WINDOW_LEN,
            decimate: DECIMATE_FACTOR,
            preprocess: PreprocessConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            seed: 0,
            output_dir: PathBuf::from("out"),
        }
    }
}

fn list_of(value: &str) -> Result<Vec<usize>, String> {
    value
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| e.to_string()))
        .collect()
}

fn fmt_list(values: &[usize]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Parses the documented key/value format. Unknown sections or keys are
    /// errors so typos cannot silently fall back to defaults.
    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut section: Option<String> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            if let Some(name) = trimmed.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
                let name = name.trim();
                if !["data", "preprocess", "denoise", "model", "train", "run"].contains(&name) {
                    return Err(ConfigError::UnknownSection { line, section: name.to_string() });
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = trimmed
                .split_once('=')
                .ok_or_else(|| ConfigError::BadLine { line, text: trimmed.to_string() })?;
            let key = key.trim();
            let value = value.trim();
            let section = section.as_deref().ok_or(ConfigError::NoSection(line))?;
            cfg.apply(section, key, value)
                .map_err(|detail| match detail {
                    ApplyError::UnknownKey => ConfigError::UnknownKey {
                        line,
                        section: section.to_string(),
                        key: key.to_string(),
                    },
                    ApplyError::BadValue(detail) => ConfigError::BadValue {
                        line,
                        key: key.to_string(),
                        value: value.to_string(),
                        detail,
                    },
                })?;
        }
        Ok(cfg)
    }

    /// Reads `path` if given, otherwise returns the defaults.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.display().to_string(),
                    source,
                })?;
                Self::parse_str(&text)
            }
        }
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<(), ApplyError> {
        fn num<T: std::str::FromStr>(value: &str) -> Result<T, ApplyError>
        where
            T::Err: std::fmt::Display,
        {
            value.parse().map_err(|e: T::Err| ApplyError::BadValue(e.to_string()))
        }
        let list = |v: &str| list_of(v).map_err(ApplyError::BadValue);

        match (section, key) {
            ("data", "input_dir") => {
                self.input_dir = (!value.is_empty()).then(|| PathBuf::from(value))
            }
            ("data", "annotations") => {
                self.annotations = (!value.is_empty()).then(|| PathBuf::from(value))
            }
            ("preprocess", "window_len") => self.window_len = num(value)?,
            ("preprocess", "decimate") => self.decimate = num(value)?,
            ("preprocess", "antialias_cutoff_hz") => {
                self.preprocess.antialias_cutoff_hz = num(value)?
            }
            ("preprocess", "antialias_order") => self.preprocess.antialias_order = num(value)?,
            ("preprocess", "ppg_cutoff_hz") => self.preprocess.ppg_cutoff_hz = num(value)?,
            ("preprocess", "ppg_order") => self.preprocess.ppg_order = num(value)?,
            ("denoise", "ecg_prefilter_cutoff_hz") => {
                self.preprocess.ecg.prefilter_cutoff_hz = num(value)?
            }
            ("denoise", "ecg_prefilter_order") => {
                self.preprocess.ecg.prefilter_order = num(value)?
            }
            ("denoise", "vmd_modes") => self.preprocess.ecg.vmd.k_modes = num(value)?,
            ("denoise", "vmd_alpha") => self.preprocess.ecg.vmd.alpha = num(value)?,
            ("denoise", "vmd_tau_dual") => self.preprocess.ecg.vmd.tau_dual = num(value)?,
            ("denoise", "vmd_tol") => self.preprocess.ecg.vmd.tol = num(value)?,
            ("denoise", "vmd_max_iter") => self.preprocess.ecg.vmd.max_iter = num(value)?,
            ("denoise", "wavelet_levels") => self.preprocess.ecg.wavelet.levels = num(value)?,
            ("model", "input_len") => self.model.input_len = num(value)?,
            ("model", "embedding_dim") => self.model.embedding_dim = num(value)?,
            ("model", "num_experts") => self.model.num_experts = num(value)?,
            ("model", "tcn_channels") => self.model.tcn_channels = list(value)?,
            ("model", "tcn_fc_hidden") => self.model.tcn_fc_hidden = list(value)?,
            ("model", "tcn_dropout") => self.model.tcn_dropout = num(value)?,
            ("model", "cacnn_channels") => self.model.cacnn_channels = num(value)?,
            ("model", "cacnn_fc_hidden") => self.model.cacnn_fc_hidden = list(value)?,
            ("model", "cacnn_dropout") => self.model.cacnn_dropout = num(value)?,
            ("model", "se_reduction") => self.model.se_reduction = num(value)?,
            ("model", "expert_hidden") => self.model.expert_hidden = list(value)?,
            ("train", "batch_size") => self.train.batch_size = num(value)?,
            ("train", "learning_rate") => self.train.learning_rate = num(value)?,
            ("train", "epochs") => self.train.epochs = num(value)?,
            ("train", "adam_beta1") => self.train.adam_beta1 = num(value)?,
            ("train", "adam_beta2") => self.train.adam_beta2 = num(value)?,
            ("train", "adam_eps") => self.train.adam_eps = num(value)?,
            ("train", "lambda_contrastive") => self.loss.lambda_contrastive = num(value)?,
            ("train", "tau") => self.loss.tau = num(value)?,
            ("train", "k_negatives") => self.loss.k_negatives = num(value)?,
            ("run", "seed") => self.seed = num(value)?,
            ("run", "output_dir") => self.output_dir = PathBuf::from(value),
            _ => return Err(ApplyError::UnknownKey),
        }
        Ok(())
    }

    /// Canonical full serialization: every key in a fixed order. Parsing the
    /// result reproduces the config; hashing it identifies the run settings.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let p = |v: &Option<PathBuf>| {
            v.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
        };
        let _ = write!(
            s,
            "[data]\n\
             input_dir = {}\n\
             annotations = {}\n\
             \n[preprocess]\n\
             window_len = {}\n\
             decimate = {}\n\
             antialias_cutoff_hz = {}\n\
             antialias_order = {}\n\
             ppg_cutoff_hz = {}\n\
             ppg_order = {}\n\
             \n[denoise]\n\
             ecg_prefilter_cutoff_hz = {}\n\
             ecg_prefilter_order = {}\n\
             vmd_modes = {}\n\
             vmd_alpha = {}\n\
             vmd_tau_dual = {}\n\
             vmd_tol = {}\n\
             vmd_max_iter = {}\n\
             wavelet_levels = {}\n",
            p(&self.input_dir),
            p(&self.annotations),
            self.window_len,
            self.decimate,
            self.preprocess.antialias_cutoff_hz,
            self.preprocess.antialias_order,
            self.preprocess.ppg_cutoff_hz,
            self.preprocess.ppg_order,
            self.preprocess.ecg.prefilter_cutoff_hz,
            self.preprocess.ecg.prefilter_order,
            self.preprocess.ecg.vmd.k_modes,
            self.preprocess.ecg.vmd.alpha,
            self.preprocess.ecg.vmd.tau_dual,
            self.preprocess.ecg.vmd.tol,
            self.preprocess.ecg.vmd.max_iter,
            self.preprocess.ecg.wavelet.levels,
        );
        let _ = write!(
            s,
            "\n[model]\n\
             input_len = {}\n\
             embedding_dim = {}\n\
             num_experts = {}\n\
             tcn_channels = {}\n\
             tcn_fc_hidden = {}\n\
             tcn_dropout = {}\n\
             cacnn_channels = {}\n\
             cacnn_fc_hidden = {}\n\
             cacnn_dropout = {}\n\
             se_reduction = {}\n\
             expert_hidden = {}\n\
             \n[train]\n\
             batch_size = {}\n\
             learning_rate = {}\n\
             epochs = {}\n\
             adam_beta1 = {}\n\
             adam_beta2 = {}\n\
             adam_eps = {}\n\
             lambda_contrastive = {}\n\
             tau = {}\n\
             k_negatives = {}\n\
             \n[run]\n\
             seed = {}\n\
             output_dir = {}\n",
            self.model.input_len,
            self.model.embedding_dim,
            self.model.num_experts,
            fmt_list(&self.model.tcn_channels),
            fmt_list(&self.model.tcn_fc_hidden),
            self.model.tcn_dropout,
            self.model.cacnn_channels,
            fmt_list(&self.model.cacnn_fc_hidden),
            self.model.cacnn_dropout,
            self.model.se_reduction,
            fmt_list(&self.model.expert_hidden),
            self.train.batch_size,
            self.train.learning_rate,
            self.train.epochs,
            self.train.adam_beta1,
            self.train.adam_beta2,
            self.train.adam_eps,
            self.loss.lambda_contrastive,
            self.loss.tau,
            self.loss.k_negatives,
            self.seed,
            self.output_dir.display(),
        );
        s
    }

    /// SHA-256 of the canonical serialization, hex-encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// The windowing geometry is structural; this artifact supports only the
    /// standard 5000-sample windows decimated by 5.
    pub fn ensure_supported_geometry(&self) -> Result<(), ConfigError> {
        if self.window_len != WINDOW_LEN || self.decimate != DECIMATE_FACTOR {
            return Err(ConfigError::Unsupported(format!(
                "window_len {} / decimate {} (supported: {WINDOW_LEN} / {DECIMATE_FACTOR})",
                self.window_len, self.decimate
            )));
        }
        Ok(())
    }
}


enum ApplyError {
    UnknownKey,
    BadValue(String),
}
