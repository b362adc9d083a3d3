//! TOML experiment configuration.
//!
//! Parsing is fail-closed: unknown keys are rejected, every range violation
//! names its key, and the fully resolved config (all defaults applied) is
//! echoed next to the metrics so a run is reproducible from its output
//! directory alone. `FEDSSL_SEED` overrides the `seed` key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use fedssl_core::fed::{Method, MethodConfig, RunOptions};
use fedssl_core::nn::Architecture;
use fedssl_core::ssl::{ConfidenceMetric, SelectionMode, SslConfig};

pub const ENV_SEED: &str = "FEDSSL_SEED";

/// Default FedProx proximal coefficient when a prox method is chosen and
/// `method.prox_mu` is absent.
pub const DEFAULT_PROX_MU: f64 = 0.01;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse {}: {source}", path.display())]
    Parse {
        path: PathBuf,
        #[source]
        source: Box<toml::de::Error>,
    },
    #[error("config error: key \"{key}\": {message}")]
    Range { key: &'static str, message: String },
    #[error("invalid {ENV_SEED} value {value:?}: must be a u64")]
    BadSeedOverride { value: String },
    #[error("referenced path does not exist: {}", .0.display())]
    MissingPath(PathBuf),
    #[error("sweep grid error: {0}")]
    Grid(String),
}

fn range(key: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Range { key, message: message.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub rounds: u64,
    pub eval_every: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    pub model: ModelConfig,
    pub method: MethodSection,
    pub ssl: SslSection,
    pub output: OutputSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            rounds: 150,
            eval_every: 1,
            output_dir: PathBuf::from("fedssl-out"),
            dataset: DatasetConfig::default(),
            partition: PartitionConfig::default(),
            model: ModelConfig::default(),
            method: MethodSection::default(),
            ssl: SslSection::default(),
            output: OutputSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub classes: u32,
    /// Feature dimension (synthetic only; IDX files carry their own shape).
    pub dim: usize,
    /// Class centers are confined to the first `signal_dims` coordinates;
    /// the rest are distractor noise.
    pub signal_dims: usize,
    pub per_class: usize,
    /// Per-coordinate noise stddev of the synthetic blobs.
    pub spread: f64,
    /// IDX image/label files (required for kind = "idx").
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            classes: 10,
            dim: 32,
            signal_dims: 10,
            per_class: 600,
            spread: 2.4,
            images: None,
            labels: None,
            train_fraction: 0.8,
            val_fraction: 0.05,
            test_fraction: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionConfig {
    pub clients: usize,
    pub dirichlet_alpha: f64,
    pub label_ratio: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self { clients: 20, dirichlet_alpha: 0.1, label_ratio: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Hidden layer widths; empty means a linear softmax model.
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: vec![128] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodName {
    FedavgSup,
    FedproxSup,
    FedavgFixmatch,
    FedavgUda,
    FedproxFixmatch,
    FedproxUda,
    Fedlabel,
}

impl MethodName {
    pub fn to_core(self) -> Method {
        match self {
            MethodName::FedavgSup => Method::FedAvgSup,
            MethodName::FedproxSup => Method::FedProxSup,
            MethodName::FedavgFixmatch => Method::FedAvgFixMatch,
            MethodName::FedavgUda => Method::FedAvgUda,
            MethodName::FedproxFixmatch => Method::FedProxFixMatch,
            MethodName::FedproxUda => Method::FedProxUda,
            MethodName::Fedlabel => Method::FedLabel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodSection {
    pub name: MethodName,
    pub participation: f64,
    pub tau: u32,
    pub tau_prime: u32,
    pub lr: f64,
    pub batch_size: usize,
    /// Proximal coefficient; defaults to [`DEFAULT_PROX_MU`] for FedProx
    /// variants and must stay absent or 0 otherwise.
    pub prox_mu: Option<f64>,
}

impl Default for MethodSection {
    fn default() -> Self {
        Self {
            name: MethodName::Fedlabel,
            participation: 0.3,
            tau: 20,
            tau_prime: 20,
            lr: 0.05,
            batch_size: 16,
            prox_mu: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConfidenceName {
    Variance,
    NegEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionName {
    Confidence,
    LocalOnly,
    GlobalOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SslSection {
    pub beta: f64,
    pub lambda0: f64,
    pub confidence: ConfidenceName,
    pub selection: SelectionName,
    pub strong_augment: bool,
    pub aug_ops: u32,
    pub aug_magnitude: f64,
    pub uda_temperature: f64,
}

impl Default for SslSection {
    fn default() -> Self {
        Self {
            beta: 0.4,
            lambda0: 1.0,
            confidence: ConfidenceName::Variance,
            selection: SelectionName::Confidence,
            strong_augment: true,
            aug_ops: 1,
            aug_magnitude: 10.0,
            uda_temperature: 0.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Write the per-sample decision audit log (decisions.csv).
    pub audit_decisions: bool,
    /// Save the final global model as global_model.fssl.
    pub save_checkpoint: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { audit_decisions: false, save_checkpoint: true }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.eval_every == 0 {
            return Err(range("eval_every", "must be >= 1"));
        }
        let d = &self.dataset;
        if d.classes < 2 {
            return Err(range("dataset.classes", "must be >= 2"));
        }
        match d.kind {
            DatasetKind::Synthetic => {
                if d.dim < 2 {
                    return Err(range("dataset.dim", "must be >= 2"));
                }
                if d.signal_dims < 2 || d.signal_dims > d.dim {
                    return Err(range("dataset.signal_dims", "must be in [2, dataset.dim]"));
                }
                if d.per_class == 0 {
                    return Err(range("dataset.per_class", "must be >= 1"));
                }
                if !d.spread.is_finite() || d.spread < 0.0 {
                    return Err(range("dataset.spread", "must be finite and >= 0"));
                }
                if d.images.is_some() || d.labels.is_some() {
                    return Err(range(
                        "dataset.images",
                        "images/labels are only valid for kind = \"idx\"",
                    ));
                }
            }
            DatasetKind::Idx => {
                let images =
                    d.images.as_ref().ok_or_else(|| range("dataset.images", "required for kind = \"idx\""))?;
                let labels =
                    d.labels.as_ref().ok_or_else(|| range("dataset.labels", "required for kind = \"idx\""))?;
                for p in [images, labels] {
                    if !p.exists() {
                        return Err(ConfigError::MissingPath(p.clone()));
                    }
                }
            }
        }
        for (key, v) in [
            ("dataset.train_fraction", d.train_fraction),
            ("dataset.val_fraction", d.val_fraction),
            ("dataset.test_fraction", d.test_fraction),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(range(key, "must be finite and >= 0"));
            }
        }
        if d.test_fraction <= 0.0 {
            return Err(range("dataset.test_fraction", "must be > 0 (evaluation needs a test set)"));
        }
        let fsum = d.train_fraction + d.val_fraction + d.test_fraction;
        if (fsum - 1.0).abs() > 1e-9 {
            return Err(range("dataset.train_fraction", format!("fractions must sum to 1, got {fsum}")));
        }

        let p = &self.partition;
        if p.clients == 0 {
            return Err(range("partition.clients", "must be >= 1"));
        }
        if !p.dirichlet_alpha.is_finite() || p.dirichlet_alpha <= 0.0 {
            return Err(range("partition.dirichlet_alpha", "must be finite and > 0"));
        }
        if !(p.label_ratio > 0.0 && p.label_ratio <= 1.0) {
            return Err(range("partition.label_ratio", format!("must be in (0, 1], got {}", p.label_ratio)));
        }

        if self.model.hidden.iter().any(|&h| h == 0) {
            return Err(range("model.hidden", "layer widths must be >= 1"));
        }

        let m = &self.method;
        if !(m.participation > 0.0 && m.participation <= 1.0) {
            return Err(range("method.participation", format!("must be in (0, 1], got {}", m.participation)));
        }
        if m.tau == 0 {
            return Err(range("method.tau", "must be >= 1"));
        }
        if m.tau_prime == 0 {
            return Err(range("method.tau_prime", "must be >= 1"));
        }
        if !m.lr.is_finite() || m.lr <= 0.0 {
            return Err(range("method.lr", format!("must be finite and > 0, got {}", m.lr)));
        }
        if m.batch_size == 0 {
            return Err(range("method.batch_size", "must be >= 1"));
        }
        self.resolved_prox_mu()?;

        let s = &self.ssl;
        if !(0.0..=1.0).contains(&s.beta) {
            return Err(range("ssl.beta", format!("must be in [0, 1], got {}", s.beta)));
        }
        if !s.lambda0.is_finite() || s.lambda0 < 0.0 {
            return Err(range("ssl.lambda0", format!("must be finite and >= 0, got {}", s.lambda0)));
        }
        if !(0.0..=30.0).contains(&s.aug_magnitude) {
            return Err(range("ssl.aug_magnitude", format!("must be in [0, 30], got {}", s.aug_magnitude)));
        }
        if !s.uda_temperature.is_finite() || s.uda_temperature <= 0.0 {
            return Err(range("ssl.uda_temperature", "must be finite and > 0"));
        }
        Ok(())
    }

    /// Proximal coefficient after defaulting: FedProx variants default to
    /// [`DEFAULT_PROX_MU`], everything else to 0.
    pub fn resolved_prox_mu(&self) -> Result<f64, ConfigError> {
        let is_prox = self.method.name.to_core().is_prox();
        match (is_prox, self.method.prox_mu) {
            (true, None) => Ok(DEFAULT_PROX_MU),
            (true, Some(v)) if v > 0.0 && v.is_finite() => Ok(v),
            (true, Some(v)) => Err(range("method.prox_mu", format!("must be > 0 for FedProx variants, got {v}"))),
            (false, None) => Ok(0.0),
            (false, Some(v)) if v == 0.0 => Ok(0.0),
            (false, Some(v)) => {
                Err(range("method.prox_mu", format!("must be 0 for non-FedProx methods, got {v}")))
            }
        }
    }

    pub fn method_config(&self) -> Result<MethodConfig, ConfigError> {
        let cfg = MethodConfig {
            method: self.method.name.to_core(),
            ssl: SslConfig {
                beta: self.ssl.beta,
                lambda0: self.ssl.lambda0,
                confidence_metric: match self.ssl.confidence {
                    ConfidenceName::Variance => ConfidenceMetric::Variance,
                    ConfidenceName::NegEntropy => ConfidenceMetric::NegEntropy,
                },
                selection_mode: match self.ssl.selection {
                    SelectionName::Confidence => SelectionMode::ConfidenceSelect,
                    SelectionName::LocalOnly => SelectionMode::LocalOnly,
                    SelectionName::GlobalOnly => SelectionMode::GlobalOnly,
                },
            },
            tau: self.method.tau,
            tau_prime: self.method.tau_prime,
            lr: self.method.lr,
            batch_size: self.method.batch_size,
            prox_mu: self.resolved_prox_mu()?,
            strong_augment: self.ssl.strong_augment,
            aug_ops: self.ssl.aug_ops,
            aug_magnitude: self.ssl.aug_magnitude,
            uda_temperature: self.ssl.uda_temperature,
        };
        Ok(cfg)
    }

    pub fn run_options(&self, shape: fedssl_core::data::FeatureShape) -> RunOptions {
        RunOptions {
            rounds: self.rounds,
            participation: self.method.participation,
            seed: self.seed,
            eval_every: self.eval_every,
            collect_decisions: self.output.audit_decisions,
            shape,
        }
    }

    pub fn architecture(&self, input_dim: usize) -> Result<Architecture, ConfigError> {
        let mut sizes = Vec::with_capacity(self.model.hidden.len() + 2);
        sizes.push(input_dim);
        sizes.extend_from_slice(&self.model.hidden);
        sizes.push(self.dataset.classes as usize);
        Architecture::new(sizes).map_err(|e| range("model.hidden", e.to_string()))
    }
}

/// Parses, applies the `FEDSSL_SEED` override, and validates.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let seed_override = match std::env::var(ENV_SEED) {
        Ok(v) => Some(v.parse::<u64>().map_err(|_| ConfigError::BadSeedOverride { value: v })?),
        Err(_) => None,
    };
    parse_config_with_override(path, seed_override)
}

/// [`parse_config`] with an explicit seed override (testable without
/// touching the process environment).
pub fn parse_config_with_override(
    path: &Path,
    seed_override: Option<u64>,
) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    let mut cfg: ExperimentConfig = toml::from_str(&text)
        .map_err(|source| ConfigError::Parse { path: path.to_path_buf(), source: Box::new(source) })?;
    if let Some(seed) = seed_override {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}
