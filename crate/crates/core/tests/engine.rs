mod common;

use pokerlab::cards::Card;
use pokerlab::engine::{ActionKind, ActionTemplate, GameState, PlayerAction, TableConfig, NUM_PLAYERS};
use proptest::prelude::*;
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_action<R: Rng>(state: &GameState, rng: &mut R) -> PlayerAction {
    let seat = state.to_act().expect("someone to act");
    let legal = state.legal_actions();
    let t = &legal[rng.random_range(0..legal.len())];
    let kind = match t {
        ActionTemplate::Fold => ActionKind::Fold,
        ActionTemplate::CheckCall { .. } => ActionKind::CheckCall,
        ActionTemplate::BetRaise { min_to, max_to } => ActionKind::BetRaise(rng.random_range(*min_to..=*max_to)),
        ActionTemplate::Show { cards } => ActionKind::Show(cards.clone()),
    };
    PlayerAction::new(seat, kind)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn random_play_keeps_invariants(seed in any::<u64>(), stacks in proptest::array::uniform6(100u64..20_000)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = GameState::new_hand(TableConfig::default(), stacks, 5, &mut rng).unwrap();
        let total: u64 = stacks.iter().sum();
        let mut steps = 0;
        while !state.is_terminal() {
            prop_assert!(state.check_invariants().is_ok(), "{:?}", state.check_invariants());
            let a = random_action(&state, &mut rng);
            state = state.apply(&a).unwrap();
            steps += 1;
            prop_assert!(steps < 500);
        }
        prop_assert!(state.check_invariants().is_ok());
        let final_total: u64 = state.players().iter().map(|p| p.stack).sum();
        prop_assert_eq!(final_total, total);
    }

    #[test]
    fn illegal_actions_rejected(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = GameState::new_hand(TableConfig::default(), [10_000; 6], 5, &mut rng).unwrap();
        let seat = state.to_act().unwrap();
        let other = (seat + 1) % NUM_PLAYERS;
        prop_assert!(state.apply(&PlayerAction::new(other, ActionKind::Fold)).is_err());
        prop_assert!(state.apply(&PlayerAction::new(seat, ActionKind::BetRaise(150))).is_err());
        prop_assert!(state.apply(&PlayerAction::new(seat, ActionKind::BetRaise(1_000_000))).is_err());
    }
}

/// Final stacks after every player either folds or moves all in preflop,
/// computed from contributions, pot levels and a naive evaluator.
fn oracle_stacks(
    stacks: &[u64; 6],
    folded: &[bool; 6],
    holes: &[[Card; 2]; 6],
    board: &[Card],
    blinds: (u64, u64),
) -> Vec<u64> {
    let live: Vec<usize> = (0..6).filter(|&i| !folded[i]).collect();
    let mut contrib = [0u64; 6];
    for i in 0..6 {
        contrib[i] = if folded[i] {
            match i {
                0 => blinds.0,
                1 => blinds.1,
                _ => 0,
            }
        } else {
            let others = live.iter().filter(|&&j| j != i).map(|&j| stacks[j]).max().unwrap_or(0);
            stacks[i].min(others.max(if i == 1 { blinds.1 } else { 0 }))
        };
    }
    let mut out: Vec<u64> = (0..6).map(|i| stacks[i] - contrib[i]).collect();
    if live.len() == 1 {
        out[live[0]] += contrib.iter().sum::<u64>();
        return out;
    }
    let strength: Vec<_> = (0..6)
        .map(|i| {
            let mut seven = holes[i].to_vec();
            seven.extend_from_slice(board);
            common::best_of_21(&seven)
        })
        .collect();
    let mut levels: Vec<u64> = live.iter().map(|&i| contrib[i]).collect();
    levels.sort_unstable();
    levels.dedup();
    let mut prev = 0;
    let top = *levels.last().unwrap();
    for &level in &levels {
        let mut amount: u64 = (0..6).map(|i| contrib[i].min(level) - contrib[i].min(prev)).sum();
        if level == top {
            amount += (0..6).map(|i| contrib[i].saturating_sub(top)).sum::<u64>();
        }
        let eligible: Vec<usize> = live.iter().copied().filter(|&i| contrib[i] >= level).collect();
        let best = eligible.iter().map(|&i| strength[i]).max().unwrap();
        // Button is seat 5, so seat order from its left is 0..6.
        let winners: Vec<usize> = (0..6).filter(|i| eligible.contains(i) && strength[*i] == best).collect();
        let share = amount / winners.len() as u64;
        let odd = (amount % winners.len() as u64) as usize;
        for (k, &w) in winners.iter().enumerate() {
            out[w] += share + u64::from(k < odd);
        }
        prev = level;
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn all_in_side_pots_match_oracle(seed in any::<u64>(), stacks in proptest::array::uniform6(100u64..5_000), fold_mask in 0u8..64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = TableConfig::default();
        let mut state = GameState::new_hand(cfg, stacks, 5, &mut rng).unwrap();
        let holes: [[Card; 2]; 6] = std::array::from_fn(|i| state.players()[i].hole.unwrap());
        let mut folded = [false; 6];
        while !state.is_terminal() {
            let seat = state.to_act().unwrap();
            let legal = state.legal_actions();
            let want_fold = fold_mask >> seat & 1 == 1 && legal.contains(&ActionTemplate::Fold);
            let kind = if want_fold {
                folded[seat] = true;
                ActionKind::Fold
            } else if let Some(ActionTemplate::Show { cards }) = legal.iter().find(|t| matches!(t, ActionTemplate::Show { .. })) {
                ActionKind::Show(cards.clone())
            } else if let Some(ActionTemplate::BetRaise { max_to, .. }) = legal.iter().find(|t| matches!(t, ActionTemplate::BetRaise { .. })) {
                ActionKind::BetRaise(*max_to)
            } else {
                ActionKind::CheckCall
            };
            state = state.apply(&PlayerAction::new(seat, kind)).unwrap();
        }
        let got: Vec<u64> = state.players().iter().map(|p| p.stack).collect();
        let expected = oracle_stacks(&stacks, &folded, &holes, state.board(), (cfg.small_blind, cfg.big_blind));
        prop_assert_eq!(got, expected);
    }
}

#[test]
fn same_seed_same_hand() {
    let run = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = GameState::new_hand(TableConfig::default(), [10_000; 6], 5, &mut rng).unwrap();
        while !s.is_terminal() {
            let a = random_action(&s, &mut rng);
            s = s.apply(&a).unwrap();
        }
        s.events().to_vec()
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}
