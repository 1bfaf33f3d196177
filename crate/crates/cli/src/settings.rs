//! JSON settings accepted by `--config`. Missing top-level fields take
//! their defaults; nested model configs must be complete when given.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use synthpair::lm::{LmConfig, LmPretrainConfig};
use synthpair::pipeline::ExperimentConfig;
use synthpair::t2igen::{DecodeConfig, T2iConfig};
use synthpair::vlm::VlmConfig;
use synthpair::vq::{PretrainConfig, VqConfig};

pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

/// Settings types that carry seeds.
pub trait Seeded {
    fn set_seed(&mut self, seed: u64);
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct VqSettings {
    pub vq: VqConfig,
    pub pretrain: PretrainConfig,
    pub data: Option<PathBuf>,
}

impl Seeded for VqSettings {
    fn set_seed(&mut self, seed: u64) {
        self.vq.seed = seed;
        self.pretrain.seed = seed;
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct LmSettings {
    pub lm: LmConfig,
    pub pretrain: LmPretrainConfig,
}

impl Seeded for LmSettings {
    fn set_seed(&mut self, seed: u64) {
        self.lm.seed = seed;
        self.pretrain.seed = seed;
    }
}

/// Optimizer and loop settings shared by the generator and VLM trainers.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainLoop {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub seed: u64,
}

impl Default for TrainLoop {
    fn default() -> Self {
        TrainLoop {
            steps: 1000,
            batch: 8,
            lr: 1e-3,
            warmup_steps: 50,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Inputs {
    pub data: Option<PathBuf>,
    pub lm: Option<PathBuf>,
    pub vq: Option<PathBuf>,
    /// Output directory.
    pub ckpt: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct T2iSettings {
    /// `k`, `side`, `text_dim` and `ctx_len` are taken from the loaded VQ and LM.
    pub model: T2iConfig,
    pub train: TrainLoop,
    #[serde(flatten)]
    pub inputs: Inputs,
}

impl Seeded for T2iSettings {
    fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct VlmSettings {
    pub model: VlmConfig,
    pub train: TrainLoop,
    #[serde(flatten)]
    pub inputs: Inputs,
}

impl Seeded for VlmSettings {
    fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
    }
}

impl Seeded for DecodeConfig {
    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }
}

impl Seeded for VlmConfig {
    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSettings {
    pub experiment: ExperimentConfig,
    /// Decoding used to build the synthetic pool.
    pub decode: DecodeConfig,
}

impl Seeded for ExperimentSettings {
    fn set_seed(&mut self, seed: u64) {
        self.experiment.seed = seed;
        self.experiment.vlm.seed = seed;
        self.decode.seed = seed;
    }
}
