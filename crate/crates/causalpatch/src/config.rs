//! Experiment configuration.
//!
//! One TOML file with nested sections; every field has a default, CLI flags
//! override individual keys, and the fully resolved config is echoed into
//! every output artifact so runs stay auditable.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::blackbox::CnnTrainConfig;
use crate::error::{Error, Result};
use crate::selector::SelectorTrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DatasetConfig {
    /// Tag used in output paths and reports.
    pub name: String,
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    /// Official test split; used as the validation set when present.
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    /// Classes to keep (relabeled 0.. in this order).
    pub keep_classes: Vec<usize>,
    /// Random carve-out fraction, used only when the test files are absent.
    pub val_fraction: f64,
    pub split_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            name: "mnist_3v8".into(),
            train_images: "data/mnist/train-images-idx3-ubyte".into(),
            train_labels: "data/mnist/train-labels-idx1-ubyte".into(),
            test_images: "data/mnist/t10k-images-idx3-ubyte".into(),
            test_labels: "data/mnist/t10k-labels-idx1-ubyte".into(),
            keep_classes: vec![3, 8],
            val_fraction: 0.1,
            split_seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PatchConfig {
    pub height: usize,
    pub width: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            height: 4,
            width: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunSection {
    /// Explanation sizes to sweep.
    pub k: Vec<usize>,
    /// Seeds to sweep; selector training and evaluation re-run per seed.
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            k: vec![4, 6, 8],
            seeds: vec![0, 1, 2, 3, 4],
            out_dir: "runs".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EvaluationConfig {
    /// Random draws per instance for the ICE baseline term.
    pub ice_repeats: usize,
    /// Methods to evaluate: any of "causal", "random", "saliency".
    pub methods: Vec<String>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            ice_repeats: 4,
            methods: vec!["causal".into(), "random".into(), "saliency".into()],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ToyConfig {
    /// Random joints for the enumeration identity checks.
    pub joints: usize,
    /// Variables per joint.
    pub d: usize,
    /// Subset size searched and selected.
    pub k: usize,
    /// Planted joints on which a tiny selector is trained and compared
    /// against brute force.
    pub selector_trials: usize,
    pub train_samples: usize,
    pub probe_samples: usize,
    pub seed: u64,
    pub selector: ToySelectorConfig,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            joints: 20,
            d: 5,
            k: 2,
            selector_trials: 1,
            train_samples: 2048,
            probe_samples: 256,
            seed: 20,
            selector: ToySelectorConfig::default(),
        }
    }
}

/// Selector hyperparameters scaled down for the toy problems.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ToySelectorConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    pub temperature_final: Option<f64>,
}

impl Default for ToySelectorConfig {
    fn default() -> Self {
        ToySelectorConfig {
            epochs: 30,
            learning_rate: 1e-3,
            temperature: 5.0,
            temperature_final: Some(0.5),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub patch: PatchConfig,
    pub blackbox: CnnTrainConfig,
    pub selector: SelectorTrainConfig,
    pub run: RunSection,
    pub evaluation: EvaluationConfig,
    pub toy: ToyConfig,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    /// Apply CLI overrides: each `Some` replaces the config value.
    pub fn apply_overrides(
        &mut self,
        out: Option<PathBuf>,
        seed: Option<u64>,
        k: Option<Vec<usize>>,
    ) {
        if let Some(out) = out {
            self.run.out_dir = out;
        }
        if let Some(seed) = seed {
            self.run.seeds = vec![seed];
        }
        if let Some(k) = k {
            if !k.is_empty() {
                self.run.k = k;
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.k.is_empty() || self.run.seeds.is_empty() {
            return Err(Error::config("k list and seed list must be nonempty"));
        }
        if self.dataset.keep_classes.len() < 2 {
            return Err(Error::config("keep_classes needs at least two classes"));
        }
        if self.evaluation.ice_repeats == 0 {
            return Err(Error::config("ice_repeats must be >= 1"));
        }
        for m in &self.evaluation.methods {
            if !matches!(m.as_str(), "causal" | "random" | "saliency") {
                return Err(Error::config(format!(
                    "unknown method {m:?} (expected causal, random, or saliency)"
                )));
            }
        }
        Ok(())
    }

    /// The resolved config as a JSON value, for echoing into artifacts.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn empty_toml_gives_defaults() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn partial_toml_overrides_one_section() {
        let cfg: RunConfig = toml::from_str(
            r#"
            [run]
            k = [4]
            seeds = [9]
            [selector]
            epochs = 2
            "#,
        )
        .unwrap();
        assert_eq!(cfg.run.k, vec![4]);
        assert_eq!(cfg.run.seeds, vec![9]);
        assert_eq!(cfg.selector.epochs, 2);
        assert_eq!(cfg.dataset, DatasetConfig::default());
    }

    #[test]
    fn cli_overrides_replace_values() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(Some("elsewhere".into()), Some(42), Some(vec![6]));
        assert_eq!(cfg.run.out_dir, PathBuf::from("elsewhere"));
        assert_eq!(cfg.run.seeds, vec![42]);
        assert_eq!(cfg.run.k, vec![6]);
    }

    #[test]
    fn bad_method_is_rejected() {
        let mut cfg = RunConfig::default();
        cfg.evaluation.methods = vec!["gradcam".into()];
        assert!(cfg.validate().is_err());
    }
}
