//! Synthetic hand generation: six styled agents play one hand per seed stream.
//!
//! Every hand starts from fresh stacks with the button on the last seat and
//! fresh agent styles, both derived from `(seed, hand_id)`, so hands can be
//! generated in any order or in parallel with identical results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{decide, init_style, StyleVector};
use crate::engine::{EngineError, GameState, TableConfig, NUM_PLAYERS};
use crate::par::{mix_seed, Exec};
use crate::phh::{PhhMetadata, PhhRecord};

/// Stream tag separating style seeds from dealing seeds.
const STYLE_STREAM: u64 = 0x53_54_59_4c_45;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub hands: usize,
    pub seed: u64,
    /// Monte-Carlo rollouts per agent decision.
    pub rollouts: u64,
    pub table: TableConfig,
    pub split_ratio: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig { hands: 1000, seed: 0, rollouts: 1000, table: TableConfig::default(), split_ratio: 0.95 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedHand {
    pub record: PhhRecord,
    pub styles: Vec<StyleVector>,
}

pub fn hand_styles(seed: u64, hand_id: u64) -> Vec<StyleVector> {
    let s = mix_seed(seed ^ STYLE_STREAM, hand_id);
    (0..NUM_PLAYERS).map(|p| init_style(s, p)).collect()
}

/// Plays hand `hand_id` to completion.
pub fn generate_hand(cfg: &GenConfig, hand_id: u64) -> Result<GeneratedHand, EngineError> {
    let styles = hand_styles(cfg.seed, hand_id);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, hand_id));
    let stacks = [cfg.table.starting_stack; NUM_PLAYERS];
    let mut state = GameState::new_hand(cfg.table, stacks, NUM_PLAYERS - 1, &mut rng)?;
    while let Some(seat) = state.to_act() {
        let d = decide(&state, &styles[seat], cfg.rollouts, &mut rng).expect("player to act");
        state = state.apply(&d.action)?;
    }
    let record = PhhRecord {
        metadata: PhhMetadata {
            hand_id,
            players: NUM_PLAYERS,
            small_blind: cfg.table.small_blind,
            big_blind: cfg.table.big_blind,
            stacks: stacks.to_vec(),
        },
        events: state.events().to_vec(),
    };
    Ok(GeneratedHand { record, styles })
}

/// Hands `0..cfg.hands` in id order.
pub fn generate(cfg: &GenConfig, exec: Exec) -> Result<Vec<GeneratedHand>, EngineError> {
    exec.map(cfg.hands, |i| generate_hand(cfg, i as u64)).into_iter().collect()
}
