//! Run configuration shared by every subcommand.
//!
//! A config file is JSON with any subset of the fields below; missing
//! fields take their defaults and command-line flags override both.

use std::path::{Path, PathBuf};

use anyhow::Context;
use pokerlab::belief::{CoinConfig, FinitePomdp};
use pokerlab::datagen::GenConfig;
use pokerlab::engine::TableConfig;
use pokerlab::model::{ModelConfig, TrainConfig};
use pokerlab::probes::ProbeConfig;
use pokerlab::tokenizer::Vocab;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationSpec {
    pub hands: usize,
    pub small_blind: u64,
    pub big_blind: u64,
    pub stack: u64,
    pub rollouts: u64,
    pub split_ratio: f64,
}

impl Default for GenerationSpec {
    fn default() -> Self {
        let g = GenConfig::default();
        GenerationSpec {
            hands: g.hands,
            small_blind: g.table.small_blind,
            big_blind: g.table.big_blind,
            stack: g.table.starting_stack,
            rollouts: g.rollouts,
            split_ratio: g.split_ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeliefSpec {
    /// Defaults to the built-in 3-state, 2-observation instance.
    pub pomdp: Option<FinitePomdp>,
    pub max_history: usize,
    pub horizon: usize,
    pub tolerance: f64,
    pub normalization_tolerance: f64,
    pub coin: bool,
    pub coin_config: CoinConfig,
}

impl Default for BeliefSpec {
    fn default() -> Self {
        BeliefSpec {
            pomdp: None,
            max_history: 6,
            horizon: 3,
            tolerance: 1e-9,
            normalization_tolerance: 1e-12,
            coin: false,
            coin_config: CoinConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub generation: GenerationSpec,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub probe: ProbeConfig,
    pub belief: BeliefSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            paths: Paths::default(),
            generation: GenerationSpec::default(),
            model: ModelConfig::toy(Vocab::new().len()),
            training: TrainConfig::default(),
            probe: ProbeConfig::default(),
            belief: BeliefSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<RunConfig> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn gen_config(&self) -> GenConfig {
        let g = &self.generation;
        GenConfig {
            hands: g.hands,
            seed: self.seed,
            rollouts: g.rollouts,
            table: TableConfig { small_blind: g.small_blind, big_blind: g.big_blind, starting_stack: g.stack },
            split_ratio: g.split_ratio,
        }
    }
}
