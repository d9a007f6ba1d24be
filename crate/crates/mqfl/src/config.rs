//! Experiment configuration: a versioned JSON schema, field-level
//! validation, and a canonical content hash so identical configs are
//! recognizable across runs regardless of key order in the source file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::OptimizerSpec;
use crate::circuits::{NoiseMode, NoiseSpec};
use crate::data::GarbageMode;
use crate::error::{Error, Result};
use crate::federation::PartitionScheme;
use crate::model::ModalitySpec;

/// The config schema this build reads and writes.
pub const SCHEMA_VERSION: u32 = 1;

/// Largest fused register accepted unless the config raises the cap.
pub const DEFAULT_QUBIT_CAP: usize = 14;

/// Where the samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Generated classification task with controllable class separation and
    /// cross-modal signal share.
    Synthetic {
        num_samples: usize,
        class_separation: f64,
        cross_modal_weight: f64,
    },
    /// A feature container on disk.
    File { path: PathBuf },
}

/// Depolarizing-noise settings; the stream seed is derived from the master
/// seed at run time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub mode: NoiseMode,
    pub p: f64,
    /// Accept probabilities outside the modeled range [0.001, 0.05].
    #[serde(default)]
    pub allow_extreme_p: bool,
}

/// Missing-modality injection settings; the draw seed is derived from the
/// master seed at run time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MissingConfig {
    /// Fraction of samples to mark missing, per modality (spec order).
    pub fractions: Vec<f64>,
    pub garbage: GarbageMode,
}

/// Everything a run needs: architecture, federation schedule, data source,
/// perturbations, and the master seed every sub-seed derives from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub modalities: Vec<ModalitySpec>,
    pub fusion_layers: usize,
    pub num_classes: usize,
    pub num_clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub optimizer: OptimizerSpec,
    pub partition: PartitionScheme,
    #[serde(default)]
    pub noise: Option<NoiseConfig>,
    #[serde(default)]
    pub missing: Option<MissingConfig>,
    pub dataset: DatasetSource,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    /// Refuse models whose fused register exceeds this many qubits.
    #[serde(default = "default_qubit_cap")]
    pub qubit_cap: usize,
    /// Fraction of the training split actually used, stratified by label.
    #[serde(default = "default_data_fraction")]
    pub data_fraction: f64,
    /// Fraction of samples held out for testing, stratified by label.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Missing-modality-agnostic handling: honor context vectors so absent
    /// modalities are isolated. Off means contexts are forced to all-present
    /// and garbage features flow into the circuits.
    #[serde(default = "default_true")]
    pub mma: bool,
}

fn default_qubit_cap() -> usize {
    DEFAULT_QUBIT_CAP
}

fn default_data_fraction() -> f64 {
    1.0
}

fn default_test_fraction() -> f64 {
    0.25
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    /// Reads and validates a config file. Malformed JSON and schema
    /// violations are reported as configuration errors.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config("config", format!("cannot read {}: {e}", path.display()))
        })?;
        let config: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    /// Checks every field and the cross-field constraints, naming the
    /// offending field in the error.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("this build reads version {SCHEMA_VERSION}, got {}", self.schema_version),
            ));
        }
        if self.modalities.is_empty() {
            return Err(Error::config("modalities", "need at least one modality"));
        }
        for spec in &self.modalities {
            spec.validate()
                .map_err(|e| Error::config("modalities", e.to_string()))?;
        }
        let mut names: Vec<&str> = self.modalities.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.modalities.len() {
            return Err(Error::config("modalities", "modality names must be unique"));
        }
        let total_qubits: usize = self.modalities.iter().map(|s| s.num_qubits).sum();
        if total_qubits > self.qubit_cap {
            return Err(Error::config(
                "qubit_cap",
                format!("fused register needs {total_qubits} qubits, above the cap {}", self.qubit_cap),
            ));
        }
        for (field, value) in [
            ("fusion_layers", self.fusion_layers),
            ("num_classes", self.num_classes),
            ("num_clients", self.num_clients),
            ("rounds", self.rounds),
            ("local_epochs", self.local_epochs),
        ] {
            if value == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !self.optimizer.learning_rate.is_finite() || self.optimizer.learning_rate < 0.0 {
            return Err(Error::config(
                "optimizer.learning_rate",
                format!("must be finite and non-negative, got {}", self.optimizer.learning_rate),
            ));
        }
        if let PartitionScheme::Dirichlet { alpha } = self.partition {
            if !alpha.is_finite() || alpha <= 0.0 {
                return Err(Error::config(
                    "partition.alpha",
                    format!("concentration must be positive and finite, got {alpha}"),
                ));
            }
        }
        if let Some(noise) = &self.noise {
            NoiseSpec::new(noise.mode, noise.p, 0, noise.allow_extreme_p)?;
        }
        if let Some(missing) = &self.missing {
            if missing.fractions.len() != self.modalities.len() {
                return Err(Error::config(
                    "missing.fractions",
                    format!(
                        "{} fractions for {} modalities",
                        missing.fractions.len(),
                        self.modalities.len()
                    ),
                ));
            }
            for &f in &missing.fractions {
                if !f.is_finite() || !(0.0..=1.0).contains(&f) {
                    return Err(Error::config(
                        "missing.fractions",
                        format!("fractions must lie in [0, 1], got {f}"),
                    ));
                }
            }
        }
        match &self.dataset {
            DatasetSource::Synthetic {
                num_samples,
                class_separation,
                cross_modal_weight,
            } => {
                if *num_samples < self.num_classes {
                    return Err(Error::config(
                        "dataset.num_samples",
                        format!("{num_samples} samples cannot cover {} classes", self.num_classes),
                    ));
                }
                if !class_separation.is_finite() || *class_separation <= 0.0 {
                    return Err(Error::config(
                        "dataset.class_separation",
                        format!("must be positive and finite, got {class_separation}"),
                    ));
                }
                if !cross_modal_weight.is_finite() || !(0.0..=1.0).contains(cross_modal_weight) {
                    return Err(Error::config(
                        "dataset.cross_modal_weight",
                        format!("must lie in [0, 1], got {cross_modal_weight}"),
                    ));
                }
            }
            DatasetSource::File { path } => {
                if path.as_os_str().is_empty() {
                    return Err(Error::config("dataset.path", "must not be empty"));
                }
            }
        }
        if !self.data_fraction.is_finite()
            || !(self.data_fraction > 0.0 && self.data_fraction <= 1.0)
        {
            return Err(Error::config(
                "data_fraction",
                format!("must lie in (0, 1], got {}", self.data_fraction),
            ));
        }
        if !self.test_fraction.is_finite()
            || !(self.test_fraction > 0.0 && self.test_fraction < 1.0)
        {
            return Err(Error::config(
                "test_fraction",
                format!("must lie in (0, 1), got {}", self.test_fraction),
            ));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::config("output_dir", "must not be empty"));
        }
        Ok(())
    }

    /// SHA-256 over the canonical (key-sorted) JSON serialization, as a hex
    /// string. Two configs that parse to the same values hash identically
    /// no matter how their source files were formatted.
    pub fn canonical_hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes to JSON");
        let canonical = serde_json::to_string(&value).expect("canonical value serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        let mut hex = String::with_capacity(digest.len() * 2);
        for byte in digest {
            use std::fmt::Write;
            write!(&mut hex, "{byte:02x}").expect("writing to a String cannot fail");
        }
        hex
    }

    /// Total width of the fused register implied by the modality specs.
    pub fn total_qubits(&self) -> usize {
        self.modalities.iter().map(|s| s.num_qubits).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::OptimizerKind;

    fn base_config() -> ExperimentConfig {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            modalities: vec![
                ModalitySpec {
                    name: "audio".into(),
                    input_dim: 4,
                    num_qubits: 2,
                    num_layers: 1,
                },
                ModalitySpec {
                    name: "video".into(),
                    input_dim: 4,
                    num_qubits: 2,
                    num_layers: 1,
                },
            ],
            fusion_layers: 1,
            num_classes: 3,
            num_clients: 2,
            rounds: 2,
            local_epochs: 1,
            optimizer: OptimizerSpec {
                kind: OptimizerKind::Adam,
                learning_rate: 0.05,
            },
            partition: PartitionScheme::Iid,
            noise: None,
            missing: None,
            dataset: DatasetSource::Synthetic {
                num_samples: 60,
                class_separation: 4.0,
                cross_modal_weight: 0.5,
            },
            master_seed: 7,
            output_dir: PathBuf::from("runs/test"),
            qubit_cap: DEFAULT_QUBIT_CAP,
            data_fraction: 1.0,
            test_fraction: 0.25,
            mma: true,
        }
    }

    #[test]
    fn valid_config_passes() {
        base_config().validate().unwrap();
    }

    #[test]
    fn qubit_cap_violation_names_the_field() {
        let mut config = base_config();
        config.qubit_cap = 3;
        let err = config.validate().unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "qubit_cap"));
    }

    #[test]
    fn zero_counts_are_rejected() {
        for field in ["fusion_layers", "num_classes", "num_clients", "rounds", "local_epochs"] {
            let mut config = base_config();
            match field {
                "fusion_layers" => config.fusion_layers = 0,
                "num_classes" => config.num_classes = 0,
                "num_clients" => config.num_clients = 0,
                "rounds" => config.rounds = 0,
                _ => config.local_epochs = 0,
            }
            let err = config.validate().unwrap_err();
            assert!(matches!(&err, Error::Config { field: f, .. } if f == field));
        }
    }

    #[test]
    fn missing_fractions_must_match_modalities() {
        let mut config = base_config();
        config.missing = Some(MissingConfig {
            fractions: vec![0.5],
            garbage: GarbageMode::Zeros,
        });
        assert!(config.validate().is_err());
        config.missing = Some(MissingConfig {
            fractions: vec![0.5, 1.5],
            garbage: GarbageMode::Zeros,
        });
        assert!(config.validate().is_err());
        config.missing = Some(MissingConfig {
            fractions: vec![0.5, 0.0],
            garbage: GarbageMode::Zeros,
        });
        config.validate().unwrap();
    }

    #[test]
    fn duplicate_modality_names_rejected() {
        let mut config = base_config();
        config.modalities[1].name = "audio".into();
        assert!(config.validate().is_err());
    }

    #[test]
    fn hash_ignores_key_order_in_source_text() {
        let config = base_config();
        // Struct serialization emits keys in declaration order; Value
        // serialization sorts them. Same content, two different texts.
        let declaration_order = serde_json::to_string(&config).unwrap();
        let sorted_order =
            serde_json::to_string(&serde_json::to_value(&config).unwrap()).unwrap();
        assert_ne!(declaration_order, sorted_order);
        let a: ExperimentConfig = serde_json::from_str(&declaration_order).unwrap();
        let b: ExperimentConfig = serde_json::from_str(&sorted_order).unwrap();
        assert_eq!(a.canonical_hash(), b.canonical_hash());
        assert_eq!(a.canonical_hash(), config.canonical_hash());
    }

    #[test]
    fn hash_changes_with_content() {
        let config = base_config();
        let mut other = base_config();
        other.master_seed += 1;
        assert_ne!(config.canonical_hash(), other.canonical_hash());
    }

    #[test]
    fn defaults_fill_in_optional_fields() {
        let json = r#"{
            "schema_version": 1,
            "modalities": [
                {"name": "audio", "input_dim": 4, "num_qubits": 2, "num_layers": 1}
            ],
            "fusion_layers": 1,
            "num_classes": 2,
            "num_clients": 1,
            "rounds": 1,
            "local_epochs": 1,
            "optimizer": {"kind": "sgd", "learning_rate": 0.1},
            "partition": {"scheme": "iid"},
            "dataset": {"source": "synthetic", "num_samples": 20,
                        "class_separation": 4.0, "cross_modal_weight": 0.0},
            "master_seed": 3,
            "output_dir": "runs/defaults"
        }"#;
        let config: ExperimentConfig = serde_json::from_str(json).unwrap();
        config.validate().unwrap();
        assert_eq!(config.qubit_cap, DEFAULT_QUBIT_CAP);
        assert_eq!(config.data_fraction, 1.0);
        assert_eq!(config.test_fraction, 0.25);
        assert!(config.mma);
        assert!(config.noise.is_none());
        assert!(config.missing.is_none());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut value = serde_json::to_value(base_config()).unwrap();
        value
            .as_object_mut()
            .unwrap()
            .insert("surprise".into(), serde_json::json!(1));
        assert!(serde_json::from_value::<ExperimentConfig>(value).is_err());
    }

    #[test]
    fn noise_outside_modeled_range_needs_override() {
        let mut config = base_config();
        config.noise = Some(NoiseConfig {
            mode: NoiseMode::GlobalDamp,
            p: 0.5,
            allow_extreme_p: false,
        });
        assert!(config.validate().is_err());
        config.noise = Some(NoiseConfig {
            mode: NoiseMode::GlobalDamp,
            p: 0.5,
            allow_extreme_p: true,
        });
        config.validate().unwrap();
    }

    #[test]
    fn from_path_reports_malformed_json_as_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, "{ not json").unwrap();
        let err = ExperimentConfig::from_path(&path).unwrap_err();
        assert!(err.is_usage());
        let missing = ExperimentConfig::from_path(&dir.path().join("absent.json")).unwrap_err();
        assert!(missing.is_usage());
    }
}
