//! Heuristic equity-driven agents with randomly drawn playing styles.
//!
//! Each agent estimates its equity against the players still in the hand and
//! compares it with two thresholds:
//!
//! * continue: `min(0.95, pot_odds * (0.5 + tightness) * (1.25 - 0.5 * call_willingness))`
//!   where `pot_odds = to_call / (pot + to_call)`. Facing a bet below this
//!   equity the agent folds, unless it bluff-raises with probability
//!   `0.3 * bluff_frequency`.
//! * raise: `min(0.95, fair * (2.2 - 1.2 * raise_propensity))` with
//!   `fair = 1 / (opponents + 1)`. Above it the agent raises for value with
//!   probability `0.5 + 0.5 * raise_propensity`.
//!
//! Unopened pots are bet with `initial_bet_scale * pot`, raises add
//! `raise_scale * (pot + to_call)` on top of the call. The aggressor of the
//! previous street fires again with probability `bet_continuation`.
//! Agents keep no memory between hands.

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{ActionKind, ActionTemplate, GameState, PlayerAction, Street};
use crate::equity::{mc_equity, EquityEstimate};
use crate::par::mix_seed;

/// Playing style. Probability-like fields lie in `[0, 1]`, bet scales in
/// `[0.3, 1.5]` (fractions of the pot).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StyleVector {
    pub raise_propensity: f64,
    pub tightness: f64,
    pub bluff_frequency: f64,
    pub call_willingness: f64,
    pub initial_bet_scale: f64,
    pub raise_scale: f64,
    pub bet_continuation: f64,
}

impl StyleVector {
    pub const PROB_RANGE: (f64, f64) = (0.0, 1.0);
    pub const SCALE_RANGE: (f64, f64) = (0.3, 1.5);

    /// Field names with their declared ranges, in draw order.
    pub fn ranges() -> [(&'static str, (f64, f64)); 7] {
        let (p, s) = (Self::PROB_RANGE, Self::SCALE_RANGE);
        [
            ("raise_propensity", p),
            ("tightness", p),
            ("bluff_frequency", p),
            ("call_willingness", p),
            ("initial_bet_scale", s),
            ("raise_scale", s),
            ("bet_continuation", p),
        ]
    }

    pub fn values(&self) -> [f64; 7] {
        [
            self.raise_propensity,
            self.tightness,
            self.bluff_frequency,
            self.call_willingness,
            self.initial_bet_scale,
            self.raise_scale,
            self.bet_continuation,
        ]
    }

    pub fn in_range(&self) -> bool {
        self.values().iter().zip(Self::ranges()).all(|(v, (_, (lo, hi)))| (lo..=hi).contains(v))
    }
}

/// Style for `player`, a pure function of `(seed, player)`.
pub fn init_style(seed: u64, player: usize) -> StyleVector {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, player as u64));
    let mut draw = |(lo, hi): (f64, f64)| lo + (hi - lo) * rng.random::<f64>();
    let (p, s) = (StyleVector::PROB_RANGE, StyleVector::SCALE_RANGE);
    StyleVector {
        raise_propensity: draw(p),
        tightness: draw(p),
        bluff_frequency: draw(p),
        call_willingness: draw(p),
        initial_bet_scale: draw(s),
        raise_scale: draw(s),
        bet_continuation: draw(p),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rationale {
    Value,
    Bluff,
    PotOddsCall,
    GiveUp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentDecision {
    pub action: PlayerAction,
    pub equity_used: EquityEstimate,
    pub rationale: Rationale,
}

/// Equity needed to continue facing a bet with the given pot odds.
pub fn continue_threshold(pot_odds: f64, style: &StyleVector) -> f64 {
    (pot_odds * (0.5 + style.tightness) * (1.25 - 0.5 * style.call_willingness)).min(0.95)
}

/// Whether an agent would continue (call or raise) without bluffing.
pub fn continues(equity: f64, pot_odds: f64, style: &StyleVector) -> bool {
    equity >= continue_threshold(pot_odds, style)
}

pub fn raise_threshold(opponents: usize, style: &StyleVector) -> f64 {
    let fair = 1.0 / (opponents as f64 + 1.0);
    (fair * (2.2 - 1.2 * style.raise_propensity)).min(0.95)
}

fn raise_to(state: &GameState, seat: usize, style: &StyleVector, min_to: u64, max_to: u64) -> u64 {
    let cfg = state.config();
    let cost = state.to_call(seat);
    let unopened = match state.street() {
        Street::Preflop => state.current_bet() <= cfg.big_blind,
        _ => state.current_bet() == 0,
    };
    let scale = if unopened { style.initial_bet_scale } else { style.raise_scale };
    let size = (scale * (state.pot() + cost) as f64).round() as u64;
    let size = (size / cfg.small_blind) * cfg.small_blind;
    (state.current_bet() + size.max(state.min_raise())).clamp(min_to, max_to)
}

/// Picks an action for the player to act. Returns `None` when the hand is
/// over.
pub fn decide<R: Rng + ?Sized>(
    state: &GameState,
    style: &StyleVector,
    rollouts: u64,
    rng: &mut R,
) -> Option<AgentDecision> {
    let seat = state.to_act()?;
    let player = &state.players()[seat];
    let hole = player.hole.expect("hole cards dealt");
    let opponents = state.in_hand().filter(|&i| i != seat).count().max(1);

    if state.street() == Street::Showdown {
        return Some(AgentDecision {
            action: PlayerAction::new(seat, ActionKind::Show(hole.to_vec())),
            equity_used: EquityEstimate { equity: 0.0, samples: 0, stderr: 0.0 },
            rationale: Rationale::Value,
        });
    }

    let equity_used = mc_equity(hole, state.board(), opponents, rollouts, rng).expect("valid game state");
    let equity = equity_used.equity;
    let legal = state.legal_actions();
    let raise_range = legal.iter().find_map(|t| match t {
        ActionTemplate::BetRaise { min_to, max_to } => Some((*min_to, *max_to)),
        _ => None,
    });
    let cost = state.to_call(seat);
    let pot_odds = if cost == 0 { 0.0 } else { cost as f64 / (state.pot() + cost) as f64 };

    let fair = 1.0 / (opponents as f64 + 1.0);
    let raise = |rationale| {
        let (lo, hi) = raise_range.expect("raise checked");
        (ActionKind::BetRaise(raise_to(state, seat, style, lo, hi)), rationale)
    };
    let bluff_roll = rng.random::<f64>() < 0.3 * style.bluff_frequency;
    let value_roll = rng.random::<f64>() < 0.5 + 0.5 * style.raise_propensity;
    let barrel_roll = rng.random::<f64>() < style.bet_continuation;

    let (kind, rationale) = if cost > 0 && !continues(equity, pot_odds, style) {
        if bluff_roll && raise_range.is_some() {
            raise(Rationale::Bluff)
        } else {
            (ActionKind::Fold, Rationale::GiveUp)
        }
    } else if raise_range.is_some() && equity >= raise_threshold(opponents, style) && value_roll {
        raise(Rationale::Value)
    } else if cost == 0 && raise_range.is_some() && state.previous_aggressor() == Some(seat) && barrel_roll {
        raise(if equity >= fair { Rationale::Value } else { Rationale::Bluff })
    } else if cost == 0 && raise_range.is_some() && bluff_roll {
        raise(Rationale::Bluff)
    } else if cost == 0 && equity < fair {
        (ActionKind::CheckCall, Rationale::GiveUp)
    } else {
        (ActionKind::CheckCall, Rationale::PotOddsCall)
    };

    Some(AgentDecision { action: PlayerAction::new(seat, kind), equity_used, rationale })
}
