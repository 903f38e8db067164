//! Experiment configuration read from a TOML file.
//!
//! ```toml
//! seeds = [0, 1, 2]
//! strategy = "rmc"
//!
//! [data]
//! train_size = 20000
//!
//! [model]
//! num_layers = 4
//!
//! [train]
//! learning_rate = 1e-3
//!
//! [compression]
//! family = "magnitude"
//! sparsity = 0.4
//!
//! [distill]
//! lambda = 0.9
//! ```
//!
//! Every section and key is optional; missing ones take their defaults.
//! Data and model seeds are derived from the run seed, never configured.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DatasetSpec;
use crate::distill::{DistillConfig, Strategy};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pruning::SNAPSHOT_SPARSITIES;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Magnitude pruning during fine-tuning.
    Magnitude,
    /// Attention-head pruning by sensitivity score.
    Heads,
    /// A shallower copy of the teacher architecture.
    Truncate,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Magnitude => "magnitude",
            Family::Heads => "heads",
            Family::Truncate => "truncate",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressionConfig {
    pub family: Family,
    /// Target sparsity for the magnitude family.
    pub sparsity: f64,
    /// Heads zeroed by the heads family.
    pub heads_to_prune: usize,
    /// Encoder depth kept by the truncate family.
    pub student_layers: usize,
    /// Sparsities of the difficulty-estimation snapshots.
    pub snapshot_sparsities: Vec<f64>,
    /// Sparsities visited by `sweep`.
    pub sweep_sparsities: Vec<f64>,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self {
            family: Family::Magnitude,
            sparsity: 0.4,
            heads_to_prune: 3,
            student_layers: 2,
            snapshot_sparsities: SNAPSHOT_SPARSITIES.to_vec(),
            sweep_sparsities: SNAPSHOT_SPARSITIES.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub strategy: Strategy,
    pub data: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub compression: CompressionConfig,
    pub distill: DistillConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            strategy: Strategy::Rmc,
            data: DatasetSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            compression: CompressionConfig::default(),
            distill: DistillConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.distill.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.data.num_classes != self.model.num_classes {
            return Err(Error::Config("data and model disagree on num_classes".into()));
        }
        if self.data.vocab_size != self.model.vocab_size {
            return Err(Error::Config("data and model disagree on vocab_size".into()));
        }
        if self.data.max_sequence_len() > self.model.max_seq_len {
            return Err(Error::Config(format!(
                "sequences of up to {} tokens exceed max_seq_len {}",
                self.data.max_sequence_len(),
                self.model.max_seq_len
            )));
        }
        let c = &self.compression;
        let unit = |s: f64| (0.0..1.0).contains(&s);
        if !unit(c.sparsity)
            || !c
                .snapshot_sparsities
                .iter()
                .chain(&c.sweep_sparsities)
                .all(|&s| unit(s))
        {
            return Err(Error::Config("sparsities must lie in [0, 1)".into()));
        }
        if c.snapshot_sparsities.len() < 2 {
            return Err(Error::Config("difficulty estimation needs at least 2 snapshots".into()));
        }
        if c.heads_to_prune >= self.model.num_layers * self.model.num_heads {
            return Err(Error::Config(format!(
                "cannot prune {} of {} heads",
                c.heads_to_prune,
                self.model.num_layers * self.model.num_heads
            )));
        }
        if c.student_layers == 0 || c.student_layers > self.model.num_layers {
            return Err(Error::Config(format!(
                "student_layers must lie in 1..={}",
                self.model.num_layers
            )));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form, ignoring the seed list and the
    /// strategy, which are per-invocation choices.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.seeds.clear();
        canon.strategy = Strategy::Vanilla;
        let json = serde_json::to_string(&canon).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Independent seed for one purpose within a run.
pub fn derive_seed(run_seed: u64, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(run_seed.to_le_bytes());
    h.update(purpose.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}
