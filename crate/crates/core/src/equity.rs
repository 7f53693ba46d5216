//! Win probability of a hand: Monte-Carlo rollouts and exact enumeration.
//!
//! Equity counts a k-way tie for the best hand as `1/k` of a win.

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cards::{card_mask, check_distinct, evaluate_mask, Card, CardError, Deck};
use crate::par::{mix_seed, Exec};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EquityError {
    #[error(transparent)]
    Cards(#[from] CardError),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("exact enumeration needs {outcomes} outcomes (limit {limit}); use Monte-Carlo rollouts instead")]
    TooLarge { outcomes: u64, limit: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquityEstimate {
    pub equity: f64,
    pub samples: u64,
    pub stderr: f64,
}

impl EquityEstimate {
    fn from_sum(sum: f64, samples: u64) -> EquityEstimate {
        let p = sum / samples as f64;
        EquityEstimate { equity: p, samples, stderr: (p * (1.0 - p) / samples as f64).sqrt() }
    }
}

/// Rollouts per independently seeded chunk.
const CHUNK: u64 = 256;

/// Default cap on the number of outcomes [`exact_equity`] will enumerate.
pub const DEFAULT_EXACT_LIMIT: u64 = 5_000_000;

fn validate(hole: &[Card; 2], board: &[Card], opponents: usize) -> Result<Vec<Card>, EquityError> {
    if board.len() > 5 {
        return Err(EquityError::InvalidInput(format!("board has {} cards", board.len())));
    }
    if !(1..=5).contains(&opponents) {
        return Err(EquityError::InvalidInput(format!("{opponents} opponents (need 1..=5)")));
    }
    let mut known = hole.to_vec();
    known.extend_from_slice(board);
    check_distinct(&known)?;
    Ok(known)
}

/// Share of the pot won by the hero in one completed deal.
#[inline]
fn showdown_share(hero: u32, villains: &[u32]) -> f64 {
    let mut ties = 0u32;
    for &v in villains {
        if v > hero {
            return 0.0;
        }
        if v == hero {
            ties += 1;
        }
    }
    1.0 / f64::from(ties + 1)
}

/// Monte-Carlo equity against `opponents` random hands.
///
/// One seed is drawn from `rng`; rollouts are split into fixed-size chunks
/// seeded from it, so the result does not depend on `exec`.
pub fn mc_equity<R: Rng + ?Sized>(
    hole: [Card; 2],
    board: &[Card],
    opponents: usize,
    rollouts: u64,
    rng: &mut R,
) -> Result<EquityEstimate, EquityError> {
    mc_equity_with(Exec::Sequential, hole, board, opponents, rollouts, rng)
}

pub fn mc_equity_with<R: Rng + ?Sized>(
    exec: Exec,
    hole: [Card; 2],
    board: &[Card],
    opponents: usize,
    rollouts: u64,
    rng: &mut R,
) -> Result<EquityEstimate, EquityError> {
    if rollouts == 0 {
        return Err(EquityError::InvalidInput("rollouts must be at least 1".into()));
    }
    let known = validate(&hole, board, opponents)?;
    let base = rng.next_u64();
    let remaining = Deck::without(&known);
    let hero_mask = card_mask(&hole);
    let board_mask = card_mask(board);
    let missing = 5 - board.len();

    let chunks = rollouts.div_ceil(CHUNK);
    let sums = exec.map(chunks as usize, |c| {
        let n = CHUNK.min(rollouts - c as u64 * CHUNK);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(base, c as u64));
        let mut pool: Vec<Card> = remaining.cards().to_vec();
        let need = missing + 2 * opponents;
        let mut villains = [0u32; 5];
        let mut sum = 0.0;
        for _ in 0..n {
            for j in 0..need {
                let k = rng.random_range(j..pool.len());
                pool.swap(j, k);
            }
            let full_board = board_mask | card_mask(&pool[..missing]);
            let hero = evaluate_mask(full_board | hero_mask);
            for (o, v) in villains.iter_mut().enumerate().take(opponents) {
                let at = missing + 2 * o;
                *v = evaluate_mask(full_board | card_mask(&pool[at..at + 2]));
            }
            sum += showdown_share(hero, &villains[..opponents]);
        }
        sum
    });
    Ok(EquityEstimate::from_sum(sums.iter().sum(), rollouts))
}

fn binomial(n: u64, k: u64) -> u64 {
    if k > n {
        return 0;
    }
    (0..k).fold(1u64, |acc, i| acc * (n - i) / (i + 1))
}

/// Calls `f` with every k-subset of `items` (lexicographic order).
fn for_each_combination(items: &[Card], k: usize, f: &mut impl FnMut(&[Card])) {
    fn rec(items: &[Card], k: usize, start: usize, buf: &mut Vec<Card>, f: &mut impl FnMut(&[Card])) {
        if buf.len() == k {
            f(buf);
            return;
        }
        let need = k - buf.len();
        for i in start..=items.len() - need {
            buf.push(items[i]);
            rec(items, k, i + 1, buf, f);
            buf.pop();
        }
    }
    let mut buf = Vec::with_capacity(k);
    rec(items, k, 0, &mut buf, f);
}

/// Exact heads-up equity by enumerating every opponent hand and board runout.
pub fn exact_equity(hole: [Card; 2], board: &[Card]) -> Result<f64, EquityError> {
    exact_equity_limited(hole, board, DEFAULT_EXACT_LIMIT)
}

pub fn exact_equity_limited(hole: [Card; 2], board: &[Card], limit: u64) -> Result<f64, EquityError> {
    if board.len() < 3 {
        return Err(EquityError::InvalidInput(
            "exact enumeration needs a flop; use Monte-Carlo rollouts preflop".into(),
        ));
    }
    let known = validate(&hole, board, 1)?;
    let remaining = Deck::without(&known);
    let n = remaining.len() as u64;
    let missing = 5 - board.len();
    let outcomes = binomial(n, 2) * binomial(n - 2, missing as u64);
    if outcomes > limit {
        return Err(EquityError::TooLarge { outcomes, limit });
    }
    let hero_mask = card_mask(&hole);
    let board_mask = card_mask(board);
    let cards = remaining.cards();
    let mut total = 0.0;
    let mut count = 0u64;
    for_each_combination(cards, 2, &mut |villain| {
        let vmask = card_mask(villain);
        let rest: Vec<Card> = cards.iter().copied().filter(|c| !villain.contains(c)).collect();
        for_each_combination(&rest, missing, &mut |runout| {
            let full = board_mask | card_mask(runout);
            let hero = evaluate_mask(full | hero_mask);
            total += showdown_share(hero, &[evaluate_mask(full | vmask)]);
            count += 1;
        });
    });
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cards::parse_cards;

    fn hole(s: &str) -> [Card; 2] {
        let c = parse_cards(s).unwrap();
        [c[0], c[1]]
    }

    #[test]
    fn board_royal_flush_is_unbeatable() {
        let board = parse_cards("AhKhQhJhTh").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // The board plays for everyone: always a split.
        let e = mc_equity(hole("2c3d"), &board, 1, 500, &mut rng).unwrap();
        assert_eq!(e.equity, 0.5);
        let e = exact_equity(hole("2c3d"), &board).unwrap();
        assert_eq!(e, 0.5);
    }

    #[test]
    fn hero_royal_flush_wins_everything() {
        let board = parse_cards("QhJhTh2c3d").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = mc_equity(hole("AhKh"), &board, 3, 1000, &mut rng).unwrap();
        assert_eq!(e.equity, 1.0);
        assert_eq!(e.stderr, 0.0);
        assert_eq!(exact_equity(hole("AhKh"), &board).unwrap(), 1.0);
    }

    #[test]
    fn deterministic_for_seed_and_policy() {
        let board = parse_cards("7c8d2s").unwrap();
        let a =
            mc_equity_with(Exec::Sequential, hole("AsKs"), &board, 2, 3000, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b =
            mc_equity_with(Exec::Parallel, hole("AsKs"), &board, 2, 3000, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_collisions_and_bad_counts() {
        let board = parse_cards("AsKd2c").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(mc_equity(hole("AsQh"), &board, 1, 10, &mut rng), Err(EquityError::Cards(_))));
        assert!(mc_equity(hole("3s4h"), &board, 0, 10, &mut rng).is_err());
        assert!(mc_equity(hole("3s4h"), &board, 1, 0, &mut rng).is_err());
    }

    #[test]
    fn exact_refuses_large_enumerations() {
        assert!(exact_equity(hole("AsAd"), &[]).is_err());
        let flop = parse_cards("2c7d9h").unwrap();
        let err = exact_equity_limited(hole("AsAd"), &flop, 1000).unwrap_err();
        assert!(matches!(err, EquityError::TooLarge { outcomes: 1_070_190, .. }), "{err}");
    }

    #[test]
    fn river_count_fixture() {
        // Direct count over the 990 opponent holdings.
        let h = hole("AsKd");
        let board = parse_cards("Ac7h7d2s9c").unwrap();
        let rest = Deck::without(&[h[0], h[1], board[0], board[1], board[2], board[3], board[4]]);
        let hero = evaluate_mask(card_mask(&board) | card_mask(&h));
        let (mut losses, mut ties) = (0u32, 0u32);
        let c = rest.cards();
        for i in 0..c.len() {
            for j in i + 1..c.len() {
                let v = evaluate_mask(card_mask(&board) | card_mask(&[c[i], c[j]]));
                if v > hero {
                    losses += 1;
                } else if v == hero {
                    ties += 1;
                }
            }
        }
        let expect = (990.0 - losses as f64 - ties as f64 / 2.0) / 990.0;
        assert_eq!(exact_equity(h, &board).unwrap(), expect);
    }
}
