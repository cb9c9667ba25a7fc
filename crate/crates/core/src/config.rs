//! Run configuration: defaults, `key = value` config-file parsing,
//! command-line overrides, and the canonical hash that stamps reports.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::models::BackboneKind;
use crate::splits::SplitMode;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{line}: expected 'key = value', got: {text}")]
    BadLine { line: usize, text: String },
    #[error("unknown config key: {0}")]
    UnknownKey(String),
    #[error("key {key}: cannot parse {value:?} as {expected}")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("key {key}: {reason}")]
    OutOfRange { key: String, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Fixed decision threshold on the anomaly probability.
    Fixed,
    /// Pick the threshold maximizing validation F1-macro.
    TuneF1,
}

/// Synthetic-generator settings used by the `generate` command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSettings {
    pub n_nodes: usize,
    pub anomaly_ratio: f64,
    pub n_relations: usize,
    pub h_anomaly: f64,
    pub h_normal: f64,
    pub mean_degree: usize,
    pub feature_dim: usize,
    pub informative_dims: Vec<usize>,
    pub signal: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        SynthSettings {
            n_nodes: 2000,
            anomaly_ratio: 0.1,
            n_relations: 2,
            h_anomaly: 0.2,
            h_normal: 0.95,
            mean_degree: 10,
            feature_dim: 16,
            informative_dims: vec![1, 5, 9, 13],
            signal: 1.0,
            noise: 1.0,
            seed: 0,
        }
    }
}

/// Settings for the feature-quality probes run by `analyze`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisSettings {
    pub lr: f64,
    pub epochs: usize,
    pub knn_k: usize,
    pub lp_iters: usize,
    pub lp_alpha: f64,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        AnalysisSettings {
            lr: 0.1,
            epochs: 200,
            knn_k: 10,
            lp_iters: 50,
            lp_alpha: 0.85,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset_dir: PathBuf,
    pub backbone: BackboneKind,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub patience: usize,
    pub lambda: f64,
    /// Class-dim count; `None` resolves to half the feature dim.
    pub k: Option<usize>,
    pub tau: f64,
    pub warmup: usize,
    pub refresh_every: usize,
    /// Non-neighbor samples per node in the connectivity constraint.
    pub negatives: usize,
    /// Neighbor cap per node in the connectivity constraint.
    pub neighbor_cap: usize,
    pub constrain_both_classes: bool,
    pub split_mode: SplitMode,
    pub ratios: (f64, f64, f64),
    /// Pin one split across all runs; `None` re-splits per run seed.
    pub split_seed: Option<u64>,
    pub threshold_mode: ThresholdMode,
    pub threshold: f64,
    pub seeds: Vec<u64>,
    pub synth: SynthSettings,
    pub analysis: AnalysisSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset_dir: PathBuf::from("data"),
            backbone: BackboneKind::Rgcn,
            hidden_dim: 64,
            n_layers: 2,
            lr: 0.01,
            momentum: 0.9,
            epochs: 200,
            patience: 30,
            lambda: 0.1,
            k: None,
            tau: 1.0,
            warmup: 5,
            refresh_every: 1,
            negatives: 5,
            neighbor_cap: 5,
            constrain_both_classes: false,
            split_mode: SplitMode::Normal,
            ratios: (0.4, 0.2, 0.4),
            split_seed: None,
            threshold_mode: ThresholdMode::Fixed,
            threshold: 0.5,
            seeds: vec![0, 1, 2, 3, 4],
            synth: SynthSettings::default(),
            analysis: AnalysisSettings::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(
    key: &str,
    value: &str,
    expected: &'static str,
) -> Result<T, ConfigError> {
    value.trim().parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        expected,
    })
}

fn parse_list(key: &str, value: &str) -> Result<Vec<u64>, ConfigError> {
    value
        .split(',')
        .map(|part| parse(key, part, "comma-separated integers"))
        .collect()
}

impl RunConfig {
    /// Parse a UTF-8 `key = value` config file. Blank lines and lines
    /// starting with `#` are ignored; unknown keys are rejected.
    pub fn from_text(text: &str) -> Result<RunConfig, ConfigError> {
        let mut config = RunConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::BadLine {
                line: idx + 1,
                text: raw.to_string(),
            })?;
            config.set(key.trim(), value.trim())?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), ConfigError> {
        for entry in overrides {
            let (key, value) = entry.split_once('=').ok_or_else(|| ConfigError::BadLine {
                line: 0,
                text: entry.clone(),
            })?;
            self.set(key.trim(), value.trim())?;
        }
        self.validate()
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "dataset_dir" => self.dataset_dir = PathBuf::from(value),
            "backbone" => {
                self.backbone = match value {
                    "rgcn" => BackboneKind::Rgcn,
                    "gcn" => BackboneKind::Gcn,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: value.into(),
                            expected: "rgcn | gcn",
                        })
                    }
                }
            }
            "hidden_dim" => self.hidden_dim = parse(key, value, "positive integer")?,
            "n_layers" => self.n_layers = parse(key, value, "positive integer")?,
            "lr" => self.lr = parse(key, value, "float")?,
            "momentum" => self.momentum = parse(key, value, "float")?,
            "epochs" => self.epochs = parse(key, value, "integer")?,
            "patience" => self.patience = parse(key, value, "integer")?,
            "lambda" => self.lambda = parse(key, value, "float")?,
            "k" => {
                self.k = if value == "auto" {
                    None
                } else {
                    Some(parse(key, value, "integer or 'auto'")?)
                }
            }
            "tau" => self.tau = parse(key, value, "float")?,
            "warmup" => self.warmup = parse(key, value, "integer")?,
            "refresh_every" => self.refresh_every = parse(key, value, "integer")?,
            "negatives" => self.negatives = parse(key, value, "integer")?,
            "neighbor_cap" => self.neighbor_cap = parse(key, value, "integer")?,
            "constrain_both_classes" => {
                self.constrain_both_classes = parse(key, value, "true | false")?
            }
            "split_mode" => {
                self.split_mode = match value {
                    "normal" => SplitMode::Normal,
                    "biased" => SplitMode::Biased,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: value.into(),
                            expected: "normal | biased",
                        })
                    }
                }
            }
            "train_ratio" => self.ratios.0 = parse(key, value, "float")?,
            "valid_ratio" => self.ratios.1 = parse(key, value, "float")?,
            "test_ratio" => self.ratios.2 = parse(key, value, "float")?,
            "split_seed" => {
                self.split_seed = if value == "none" {
                    None
                } else {
                    Some(parse(key, value, "integer or 'none'")?)
                }
            }
            "threshold_mode" => {
                self.threshold_mode = match value {
                    "fixed" => ThresholdMode::Fixed,
                    "tune_f1" => ThresholdMode::TuneF1,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: value.into(),
                            expected: "fixed | tune_f1",
                        })
                    }
                }
            }
            "threshold" => self.threshold = parse(key, value, "float")?,
            "seeds" => self.seeds = parse_list(key, value)?,
            "synth_n_nodes" => self.synth.n_nodes = parse(key, value, "integer")?,
            "synth_anomaly_ratio" => self.synth.anomaly_ratio = parse(key, value, "float")?,
            "synth_relations" => self.synth.n_relations = parse(key, value, "integer")?,
            "synth_h_anomaly" => self.synth.h_anomaly = parse(key, value, "float")?,
            "synth_h_normal" => self.synth.h_normal = parse(key, value, "float")?,
            "synth_mean_degree" => self.synth.mean_degree = parse(key, value, "integer")?,
            "synth_dim" => self.synth.feature_dim = parse(key, value, "integer")?,
            "synth_informative_dims" => {
                self.synth.informative_dims = parse_list(key, value)?
                    .into_iter()
                    .map(|v| v as usize)
                    .collect()
            }
            "synth_signal" => self.synth.signal = parse(key, value, "float")?,
            "synth_noise" => self.synth.noise = parse(key, value, "float")?,
            "synth_seed" => self.synth.seed = parse(key, value, "integer")?,
            "analysis_lr" => self.analysis.lr = parse(key, value, "float")?,
            "analysis_epochs" => self.analysis.epochs = parse(key, value, "integer")?,
            "analysis_knn_k" => self.analysis.knn_k = parse(key, value, "integer")?,
            "analysis_lp_iters" => self.analysis.lp_iters = parse(key, value, "integer")?,
            "analysis_lp_alpha" => self.analysis.lp_alpha = parse(key, value, "float")?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let check = |ok: bool, key: &str, reason: &str| -> Result<(), ConfigError> {
            if ok {
                Ok(())
            } else {
                Err(ConfigError::OutOfRange {
                    key: key.to_string(),
                    reason: reason.to_string(),
                })
            }
        };
        check(self.hidden_dim >= 1, "hidden_dim", "must be >= 1")?;
        check(self.n_layers >= 1, "n_layers", "must be >= 1")?;
        check(self.lr > 0.0, "lr", "must be positive")?;
        check(
            (0.0..1.0).contains(&self.momentum),
            "momentum",
            "must be in [0, 1)",
        )?;
        check(self.lambda >= 0.0, "lambda", "must be nonnegative")?;
        check(self.tau > 0.0, "tau", "must be positive")?;
        check(self.refresh_every >= 1, "refresh_every", "must be >= 1")?;
        check(self.negatives >= 1, "negatives", "must be >= 1")?;
        check(self.neighbor_cap >= 1, "neighbor_cap", "must be >= 1")?;
        check(
            self.threshold > 0.0 && self.threshold < 1.0,
            "threshold",
            "must be in (0, 1)",
        )?;
        check(!self.seeds.is_empty(), "seeds", "must not be empty")?;
        let ratio_sum = self.ratios.0 + self.ratios.1 + self.ratios.2;
        check(
            (ratio_sum - 1.0).abs() <= 1e-9
                && self.ratios.0 >= 0.0
                && self.ratios.1 >= 0.0
                && self.ratios.2 >= 0.0,
            "ratios",
            "must be nonnegative and sum to 1",
        )?;
        if let Some(k) = self.k {
            check(k >= 1, "k", "must be >= 1")?;
        }
        Ok(())
    }

    /// Class-dim count for a dataset of dimension `d`.
    pub fn resolve_k(&self, d: usize) -> usize {
        self.k.unwrap_or((d / 2).max(1)).min(d)
    }

    /// Canonical flat rendering: every key in fixed order, one per line.
    pub fn canonical_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dataset_dir = {}", self.dataset_dir.display());
        let _ = writeln!(
            s,
            "backbone = {}",
            match self.backbone {
                BackboneKind::Rgcn => "rgcn",
                BackboneKind::Gcn => "gcn",
            }
        );
        let _ = writeln!(s, "hidden_dim = {}", self.hidden_dim);
        let _ = writeln!(s, "n_layers = {}", self.n_layers);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "momentum = {}", self.momentum);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "patience = {}", self.patience);
        let _ = writeln!(s, "lambda = {}", self.lambda);
        let _ = writeln!(
            s,
            "k = {}",
            self.k.map_or("auto".to_string(), |k| k.to_string())
        );
        let _ = writeln!(s, "tau = {}", self.tau);
        let _ = writeln!(s, "warmup = {}", self.warmup);
        let _ = writeln!(s, "refresh_every = {}", self.refresh_every);
        let _ = writeln!(s, "negatives = {}", self.negatives);
        let _ = writeln!(s, "neighbor_cap = {}", self.neighbor_cap);
        let _ = writeln!(s, "constrain_both_classes = {}", self.constrain_both_classes);
        let _ = writeln!(
            s,
            "split_mode = {}",
            match self.split_mode {
                SplitMode::Normal => "normal",
                SplitMode::Biased => "biased",
            }
        );
        let _ = writeln!(s, "train_ratio = {}", self.ratios.0);
        let _ = writeln!(s, "valid_ratio = {}", self.ratios.1);
        let _ = writeln!(s, "test_ratio = {}", self.ratios.2);
        let _ = writeln!(
            s,
            "split_seed = {}",
            self.split_seed.map_or("none".to_string(), |v| v.to_string())
        );
        let _ = writeln!(
            s,
            "threshold_mode = {}",
            match self.threshold_mode {
                ThresholdMode::Fixed => "fixed",
                ThresholdMode::TuneF1 => "tune_f1",
            }
        );
        let _ = writeln!(s, "threshold = {}", self.threshold);
        let seeds: Vec<String> = self.seeds.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "seeds = {}", seeds.join(","));
        let _ = writeln!(s, "synth_n_nodes = {}", self.synth.n_nodes);
        let _ = writeln!(s, "synth_anomaly_ratio = {}", self.synth.anomaly_ratio);
        let _ = writeln!(s, "synth_relations = {}", self.synth.n_relations);
        let _ = writeln!(s, "synth_h_anomaly = {}", self.synth.h_anomaly);
        let _ = writeln!(s, "synth_h_normal = {}", self.synth.h_normal);
        let _ = writeln!(s, "synth_mean_degree = {}", self.synth.mean_degree);
        let _ = writeln!(s, "synth_dim = {}", self.synth.feature_dim);
        let dims: Vec<String> = self
            .synth
            .informative_dims
            .iter()
            .map(|v| v.to_string())
            .collect();
        let _ = writeln!(s, "synth_informative_dims = {}", dims.join(","));
        let _ = writeln!(s, "synth_signal = {}", self.synth.signal);
        let _ = writeln!(s, "synth_noise = {}", self.synth.noise);
        let _ = writeln!(s, "synth_seed = {}", self.synth.seed);
        let _ = writeln!(s, "analysis_lr = {}", self.analysis.lr);
        let _ = writeln!(s, "analysis_epochs = {}", self.analysis.epochs);
        let _ = writeln!(s, "analysis_knn_k = {}", self.analysis.knn_k);
        let _ = writeln!(s, "analysis_lp_iters = {}", self.analysis.lp_iters);
        let _ = writeln!(s, "analysis_lp_alpha = {}", self.analysis.lp_alpha);
        s
    }

    /// First 16 hex chars of the SHA-256 of the canonical rendering.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_string().as_bytes());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        hex[..16].to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_hash_stably() {
        let config = RunConfig::default();
        config.validate().unwrap();
        assert_eq!(config.hash(), config.hash());
        assert_eq!(config.hash().len(), 16);
    }

    #[test]
    fn file_text_roundtrip() {
        let text = "\
# training setup
dataset_dir = data/synth
backbone = gcn
lambda = 0.5
k = 4
seeds = 1,2,3
split_mode = biased
";
        let config = RunConfig::from_text(text).unwrap();
        assert_eq!(config.backbone, BackboneKind::Gcn);
        assert_eq!(config.lambda, 0.5);
        assert_eq!(config.k, Some(4));
        assert_eq!(config.seeds, vec![1, 2, 3]);
        assert_eq!(config.split_mode, SplitMode::Biased);
        // untouched keys keep defaults
        assert_eq!(config.hidden_dim, 64);
    }

    #[test]
    fn overrides_after_file() {
        let mut config = RunConfig::from_text("lambda = 0.5\n").unwrap();
        config
            .apply_overrides(&["lambda=0.01".to_string(), "epochs=50".to_string()])
            .unwrap();
        assert_eq!(config.lambda, 0.01);
        assert_eq!(config.epochs, 50);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        assert!(matches!(
            RunConfig::from_text("nonsense_key = 1\n"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            RunConfig::from_text("lambda\n"),
            Err(ConfigError::BadLine { .. })
        ));
        assert!(matches!(
            RunConfig::from_text("epochs = soon\n"),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(
            RunConfig::from_text("train_ratio = 0.9\n"),
            Err(ConfigError::OutOfRange { .. })
        ));
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.lambda = 0.5;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn k_resolution() {
        let mut config = RunConfig::default();
        assert_eq!(config.resolve_k(16), 8);
        assert_eq!(config.resolve_k(1), 1);
        config.k = Some(4);
        assert_eq!(config.resolve_k(16), 4);
        assert_eq!(config.resolve_k(3), 3); // clamped to d
    }
}
