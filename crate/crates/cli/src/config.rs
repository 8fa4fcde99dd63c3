//! Experiment configuration: one strict JSON document shared by every
//! subcommand. Sections a command does not use may be omitted.

use std::path::{Path, PathBuf};

use fairspec::attack::AttackConfig;
use fairspec::fairness::{RegConfig, TrainConfig};
use fairspec::pacbayes::{NuGenerator, SharpnessConfig};
use fairspec::rng::derive_seed;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    pub data: Option<DataConfig>,
    pub model: Option<ModelConfig>,
    pub attack: Option<AttackConfig>,
    /// Attack used for reporting; defaults to `attack` without random start.
    pub eval_attack: Option<AttackConfig>,
    pub reg: Option<RegConfig>,
    pub train: Option<TrainConfig>,
    pub bound: Option<BoundConfig>,
    pub sharpness: Option<SharpnessConfig>,
    pub nu_study: Option<NuStudyConfig>,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    /// Gaussian blobs with separate train and test counts per class.
    Blobs {
        d: usize,
        train_counts: Vec<usize>,
        test_counts: Vec<usize>,
        centers_scale: f64,
        noise_std: f64,
    },
    /// CSV files as written by `synth`.
    Csv {
        train: PathBuf,
        test: Option<PathBuf>,
    },
    /// IDX image/label pairs; `limit` keeps the first samples only.
    Mnist {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: Option<PathBuf>,
        test_labels: Option<PathBuf>,
        limit: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden layer widths; input and output sizes come from the data.
    #[serde(default)]
    pub hidden: Vec<usize>,
    /// Start from this checkpoint instead of a fresh initialization.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundConfig {
    pub gamma: f64,
    pub delta: f64,
    /// ν; `√d_y` when absent.
    pub nu: Option<f64>,
    /// ℓ₂ radius for Φ′. When absent the attack's ε is used, converted
    /// from ℓ∞ by `ε·√d` if needed.
    pub epsilon_l2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NuStudyConfig {
    pub d_y: usize,
    pub trials: usize,
    #[serde(default = "default_generator")]
    pub generator: NuGenerator,
}

fn default_generator() -> NuGenerator {
    NuGenerator::SimplexColumns
}

/// Seed streams derived from the global seed.
pub mod streams {
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const ATTACK: u64 = 4;
    pub const EVAL_ATTACK: u64 = 5;
    pub const SHARPNESS: u64 = 6;
    pub const NU: u64 = 7;
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Fills every per-section seed from the global seed, fills the
    /// evaluation attack default, and validates all present sections.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        let s = self.seed;
        if let Some(a) = &mut self.attack {
            a.seed = derive_seed(s, streams::ATTACK);
        }
        if self.eval_attack.is_none() {
            self.eval_attack = self.attack.clone().map(|a| AttackConfig {
                random_start: false,
                ..a
            });
        }
        if let Some(a) = &mut self.eval_attack {
            a.seed = derive_seed(s, streams::EVAL_ATTACK);
        }
        if let Some(t) = &mut self.train {
            t.seed = derive_seed(s, streams::TRAIN);
        }
        if let Some(sh) = &mut self.sharpness {
            sh.seed = derive_seed(s, streams::SHARPNESS);
        }
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |what: &str, e: fairspec::Error| CliError::Config(format!("{what}: {e}"));
        if let Some(a) = &self.attack {
            a.validate().map_err(|e| bad("attack", e))?;
        }
        if let Some(a) = &self.eval_attack {
            a.validate().map_err(|e| bad("eval_attack", e))?;
        }
        if let Some(r) = &self.reg {
            r.validate().map_err(|e| bad("reg", e))?;
        }
        if let Some(t) = &self.train {
            t.validate().map_err(|e| bad("train", e))?;
        }
        if let Some(sh) = &self.sharpness {
            sh.validate().map_err(|e| bad("sharpness", e))?;
        }
        if let Some(b) = &self.bound {
            if !(b.gamma > 0.0) || !(b.delta > 0.0 && b.delta < 1.0) {
                return Err(CliError::Config(
                    "bound: need gamma > 0 and delta in (0, 1)".into(),
                ));
            }
        }
        if let Some(n) = &self.nu_study {
            if n.trials == 0 || n.d_y < 2 {
                return Err(CliError::Config(
                    "nu_study: need trials >= 1 and d_y >= 2".into(),
                ));
            }
        }
        if let Some(DataConfig::Blobs {
            d,
            train_counts,
            test_counts,
            ..
        }) = &self.data
        {
            if *d == 0 || train_counts.len() < 2 || train_counts.len() != test_counts.len() {
                return Err(CliError::Config(
                    "data: need d >= 1 and matching train_counts/test_counts for >= 2 classes"
                        .into(),
                ));
            }
        }
        Ok(())
    }

    /// The named section, or a configuration error naming the missing key.
    pub fn require<'a, T>(&self, section: &'a Option<T>, key: &str) -> Result<&'a T, CliError> {
        section.as_ref().ok_or_else(|| {
            CliError::Config(format!("missing key `{key}` required by this command"))
        })
    }
}
