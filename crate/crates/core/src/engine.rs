//! Six-seat no-limit hold'em state machine.
//!
//! [`GameState`] is a value: [`GameState::apply`] returns the successor and
//! leaves the input untouched. Blinds are posted and hole cards dealt by
//! [`GameState::new_hand`]; board cards are dealt from the hand's own deck
//! when a betting round closes. At showdown every remaining player shows in
//! seat order starting left of the button, after which the pots are awarded.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cards::{card_mask, evaluate_mask, Card, CardError, Deck};

pub const NUM_PLAYERS: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("illegal action by seat {seat}: {rule}")]
    IllegalAction { seat: usize, rule: String },
    #[error("seat {got} acted but seat {expected:?} is to act")]
    OutOfTurn { expected: Option<usize>, got: usize },
    #[error("the hand is already over")]
    HandOver,
    #[error("invalid setup: {0}")]
    Setup(String),
    #[error(transparent)]
    Cards(#[from] CardError),
}

fn illegal(seat: usize, rule: impl Into<String>) -> EngineError {
    EngineError::IllegalAction { seat, rule: rule.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableConfig {
    pub small_blind: u64,
    pub big_blind: u64,
    pub starting_stack: u64,
}

impl Default for TableConfig {
    fn default() -> Self {
        TableConfig { small_blind: 50, big_blind: 100, starting_stack: 10_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Street {
    Preflop,
    Flop,
    Turn,
    River,
    Showdown,
}

impl Street {
    /// Board size while betting on this street.
    pub fn board_len(self) -> usize {
        match self {
            Street::Preflop => 0,
            Street::Flop => 3,
            Street::Turn => 4,
            Street::River | Street::Showdown => 5,
        }
    }

    fn next(self) -> Street {
        match self {
            Street::Preflop => Street::Flop,
            Street::Flop => Street::Turn,
            Street::Turn => Street::River,
            Street::River | Street::Showdown => Street::Showdown,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlayerStatus {
    Active,
    Folded,
    AllIn,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Player {
    pub stack: u64,
    pub hole: Option<[Card; 2]>,
    pub status: PlayerStatus,
    /// Chips put in on the current street.
    pub street_bet: u64,
    /// Chips put in over the whole hand and not yet awarded.
    pub committed: u64,
    needs_action: bool,
    raise_option: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Fold,
    CheckCall,
    /// Raise (or bet) to this total for the street.
    BetRaise(u64),
    Show(Vec<Card>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlayerAction {
    pub actor: usize,
    pub kind: ActionKind,
}

impl PlayerAction {
    pub fn new(actor: usize, kind: ActionKind) -> PlayerAction {
        PlayerAction { actor, kind }
    }
}

/// What the player to act may do.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ActionTemplate {
    Fold,
    /// `cost` is what calling adds; `all_in` when that is the whole stack.
    CheckCall {
        cost: u64,
        all_in: bool,
    },
    /// Raise-to totals; `min_to == max_to` for a short all-in.
    BetRaise {
        min_to: u64,
        max_to: u64,
    },
    Show {
        cards: Vec<Card>,
    },
}

impl ActionTemplate {
    pub fn accepts(&self, kind: &ActionKind) -> bool {
        match (self, kind) {
            (ActionTemplate::Fold, ActionKind::Fold) => true,
            (ActionTemplate::CheckCall { .. }, ActionKind::CheckCall) => true,
            (ActionTemplate::BetRaise { min_to, max_to }, ActionKind::BetRaise(to)) => (*min_to..=*max_to).contains(to),
            (ActionTemplate::Show { cards }, ActionKind::Show(shown)) => cards == shown,
            _ => false,
        }
    }
}

/// One hand-history event. Seats are zero-based here; PHH text uses `p1..p6`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Event {
    DealHole { player: usize, cards: Vec<Card> },
    DealBoard { cards: Vec<Card> },
    Fold { player: usize },
    CheckCall { player: usize },
    BetRaise { player: usize, amount: u64 },
    Show { player: usize, cards: Vec<Card> },
}

impl Event {
    pub fn player(&self) -> Option<usize> {
        match self {
            Event::DealBoard { .. } => None,
            Event::DealHole { player, .. }
            | Event::Fold { player }
            | Event::CheckCall { player }
            | Event::BetRaise { player, .. }
            | Event::Show { player, .. } => Some(*player),
        }
    }

    /// The player action carried by this event, if it is not a deal.
    pub fn as_action(&self) -> Option<PlayerAction> {
        let (actor, kind) = match self {
            Event::DealHole { .. } | Event::DealBoard { .. } => return None,
            Event::Fold { player } => (*player, ActionKind::Fold),
            Event::CheckCall { player } => (*player, ActionKind::CheckCall),
            Event::BetRaise { player, amount } => (*player, ActionKind::BetRaise(*amount)),
            Event::Show { player, cards } => (*player, ActionKind::Show(cards.clone())),
        };
        Some(PlayerAction { actor, kind })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pot {
    pub amount: u64,
    pub eligible: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GameState {
    config: TableConfig,
    players: Vec<Player>,
    board: Vec<Card>,
    deck: Vec<Card>,
    deck_pos: usize,
    street: Street,
    to_act: Option<usize>,
    current_bet: u64,
    min_raise: u64,
    button: usize,
    total_chips: u64,
    events: Vec<Event>,
    pending_shows: Vec<usize>,
    aggressor: Option<usize>,
    prev_aggressor: Option<usize>,
    payouts: Option<Vec<u64>>,
}

impl GameState {
    /// Shuffles a fresh deck with `rng`, posts blinds and deals hole cards.
    pub fn new_hand<R: Rng + ?Sized>(
        config: TableConfig,
        stacks: [u64; NUM_PLAYERS],
        button: usize,
        rng: &mut R,
    ) -> Result<GameState, EngineError> {
        let deck = Deck::new().deal(rng, 52)?;
        GameState::with_deck(config, stacks, button, deck)
    }

    /// Deals from a fixed deck order: two hole cards per seat starting left of
    /// the button, then board cards in order.
    pub fn with_deck(
        config: TableConfig,
        stacks: [u64; NUM_PLAYERS],
        button: usize,
        deck: Vec<Card>,
    ) -> Result<GameState, EngineError> {
        if button >= NUM_PLAYERS {
            return Err(EngineError::Setup(format!("button {button} out of range")));
        }
        if stacks.contains(&0) {
            return Err(EngineError::Setup("every stack must be positive".into()));
        }
        if config.small_blind == 0 || config.big_blind < config.small_blind {
            return Err(EngineError::Setup("blinds must satisfy 0 < small <= big".into()));
        }
        if deck.len() < 2 * NUM_PLAYERS + 5 {
            return Err(EngineError::Setup(format!("deck of {} cards is too short", deck.len())));
        }
        crate::cards::check_distinct(&deck)?;

        let players = stacks
            .iter()
            .map(|&stack| Player {
                stack,
                hole: None,
                status: PlayerStatus::Active,
                street_bet: 0,
                committed: 0,
                needs_action: true,
                raise_option: true,
            })
            .collect();
        let mut s = GameState {
            config,
            players,
            board: Vec::new(),
            deck,
            deck_pos: 0,
            street: Street::Preflop,
            to_act: None,
            current_bet: config.big_blind,
            min_raise: config.big_blind,
            button,
            total_chips: stacks.iter().sum(),
            events: Vec::new(),
            pending_shows: Vec::new(),
            aggressor: None,
            prev_aggressor: None,
            payouts: None,
        };

        for k in 1..=NUM_PLAYERS {
            let seat = (button + k) % NUM_PLAYERS;
            let cards = [s.deck[s.deck_pos], s.deck[s.deck_pos + 1]];
            s.deck_pos += 2;
            s.players[seat].hole = Some(cards);
            s.events.push(Event::DealHole { player: seat, cards: cards.to_vec() });
        }

        s.post(s.seat_after(button, 1), config.small_blind);
        let bb = s.seat_after(button, 2);
        s.post(bb, config.big_blind);
        s.to_act = s.next_needing_action(bb);
        if s.to_act.is_none() {
            s.close_round();
        }
        Ok(s)
    }

    /// Builds the deck order for [`GameState::with_deck`] from known cards.
    /// Undealt positions are filled with the remaining cards in index order.
    pub fn deck_from_cards(
        button: usize,
        holes: &[[Card; 2]; NUM_PLAYERS],
        board: &[Card],
    ) -> Result<Vec<Card>, CardError> {
        let mut deck = Vec::with_capacity(52);
        for k in 1..=NUM_PLAYERS {
            deck.extend_from_slice(&holes[(button + k) % NUM_PLAYERS]);
        }
        deck.extend_from_slice(board);
        crate::cards::check_distinct(&deck)?;
        let rest = Deck::without(&deck);
        deck.extend_from_slice(rest.cards());
        Ok(deck)
    }

    fn seat_after(&self, seat: usize, k: usize) -> usize {
        (seat + k) % NUM_PLAYERS
    }

    fn post(&mut self, seat: usize, amount: u64) {
        let p = &mut self.players[seat];
        let paid = amount.min(p.stack);
        p.stack -= paid;
        p.street_bet += paid;
        p.committed += paid;
        if p.stack == 0 {
            p.status = PlayerStatus::AllIn;
        }
    }

    pub fn config(&self) -> &TableConfig {
        &self.config
    }

    pub fn players(&self) -> &[Player] {
        &self.players
    }

    pub fn board(&self) -> &[Card] {
        &self.board
    }

    pub fn street(&self) -> Street {
        self.street
    }

    pub fn to_act(&self) -> Option<usize> {
        self.to_act
    }

    pub fn button(&self) -> usize {
        self.button
    }

    pub fn current_bet(&self) -> u64 {
        self.current_bet
    }

    pub fn min_raise(&self) -> u64 {
        self.min_raise
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn is_terminal(&self) -> bool {
        self.payouts.is_some()
    }

    /// Chips each seat received at the end of the hand.
    pub fn payouts(&self) -> Option<&[u64]> {
        self.payouts.as_deref()
    }

    /// Last player to bet or raise on the previous street.
    pub fn previous_aggressor(&self) -> Option<usize> {
        self.prev_aggressor
    }

    pub fn street_aggressor(&self) -> Option<usize> {
        self.aggressor
    }

    /// Chips in the middle (all streets, including the current one).
    pub fn pot(&self) -> u64 {
        self.players.iter().map(|p| p.committed).sum()
    }

    pub fn total_chips(&self) -> u64 {
        self.total_chips
    }

    pub fn to_call(&self, seat: usize) -> u64 {
        let p = &self.players[seat];
        self.current_bet.saturating_sub(p.street_bet).min(p.stack)
    }

    pub fn in_hand(&self) -> impl Iterator<Item = usize> + '_ {
        (0..NUM_PLAYERS).filter(|&i| self.players[i].status != PlayerStatus::Folded)
    }

    fn next_needing_action(&self, from: usize) -> Option<usize> {
        (1..=NUM_PLAYERS)
            .map(|k| self.seat_after(from, k))
            .find(|&i| self.players[i].status == PlayerStatus::Active && self.players[i].needs_action)
    }

    pub fn legal_actions(&self) -> Vec<ActionTemplate> {
        let Some(seat) = self.to_act else { return Vec::new() };
        let p = &self.players[seat];
        if self.street == Street::Showdown {
            return vec![ActionTemplate::Show { cards: p.hole.expect("dealt").to_vec() }];
        }
        let cost = self.to_call(seat);
        let mut out = vec![ActionTemplate::Fold, ActionTemplate::CheckCall { cost, all_in: cost == p.stack }];
        let all_in_to = p.street_bet + p.stack;
        let others_can_act = (0..NUM_PLAYERS).any(|i| i != seat && self.players[i].status == PlayerStatus::Active);
        if p.raise_option && all_in_to > self.current_bet && others_can_act {
            let min_to = (self.current_bet + self.min_raise).min(all_in_to);
            out.push(ActionTemplate::BetRaise { min_to, max_to: all_in_to });
        }
        out
    }

    /// Successor state after `action`, or the rule it breaks.
    pub fn apply(&self, action: &PlayerAction) -> Result<GameState, EngineError> {
        if self.is_terminal() {
            return Err(EngineError::HandOver);
        }
        let seat = action.actor;
        if Some(seat) != self.to_act {
            return Err(EngineError::OutOfTurn { expected: self.to_act, got: seat });
        }
        let legal = self.legal_actions();
        if !legal.iter().any(|t| t.accepts(&action.kind)) {
            let rule = match &action.kind {
                ActionKind::Show(_) if self.street != Street::Showdown => {
                    "cards are shown only at showdown".to_string()
                }
                ActionKind::Show(_) => "shown cards must equal the player's hole cards".to_string(),
                _ if self.street == Street::Showdown => "only show is allowed at showdown".to_string(),
                ActionKind::BetRaise(to) => match legal.iter().find_map(|t| match t {
                    ActionTemplate::BetRaise { min_to, max_to } => Some((*min_to, *max_to)),
                    _ => None,
                }) {
                    Some((lo, hi)) => format!("raise-to {to} outside legal range {lo}..={hi}"),
                    None => "raising is not allowed here".to_string(),
                },
                _ => "action not available".to_string(),
            };
            return Err(illegal(seat, rule));
        }

        let mut s = self.clone();
        match &action.kind {
            ActionKind::Show(cards) => {
                s.events.push(Event::Show { player: seat, cards: cards.clone() });
                s.pending_shows.retain(|&i| i != seat);
                s.to_act = s.pending_shows.first().copied();
                if s.to_act.is_none() {
                    s.award();
                }
                return Ok(s);
            }
            ActionKind::Fold => {
                let p = &mut s.players[seat];
                p.status = PlayerStatus::Folded;
                p.needs_action = false;
                s.events.push(Event::Fold { player: seat });
                if s.in_hand().count() == 1 {
                    s.to_act = None;
                    s.award();
                    return Ok(s);
                }
            }
            ActionKind::CheckCall => {
                let cost = s.to_call(seat);
                let p = &mut s.players[seat];
                p.stack -= cost;
                p.street_bet += cost;
                p.committed += cost;
                p.needs_action = false;
                p.raise_option = false;
                if p.stack == 0 {
                    p.status = PlayerStatus::AllIn;
                }
                s.events.push(Event::CheckCall { player: seat });
            }
            ActionKind::BetRaise(to) => {
                let to = *to;
                let add = to - s.players[seat].street_bet;
                let increment = to - s.current_bet;
                let full = increment >= s.min_raise;
                {
                    let p = &mut s.players[seat];
                    p.stack -= add;
                    p.street_bet = to;
                    p.committed += add;
                    p.needs_action = false;
                    p.raise_option = false;
                    if p.stack == 0 {
                        p.status = PlayerStatus::AllIn;
                    }
                }
                for (i, p) in s.players.iter_mut().enumerate() {
                    if i == seat || p.status != PlayerStatus::Active {
                        continue;
                    }
                    if full {
                        p.needs_action = true;
                        p.raise_option = true;
                    } else if p.street_bet < to {
                        p.needs_action = true;
                    }
                }
                if full {
                    s.min_raise = increment;
                }
                s.current_bet = to;
                s.aggressor = Some(seat);
                s.events.push(Event::BetRaise { player: seat, amount: to });
            }
        }

        s.to_act = s.next_needing_action(seat);
        if s.to_act.is_none() {
            s.close_round();
        }
        Ok(s)
    }

    fn return_uncalled(&mut self) {
        let mut bets: Vec<(u64, usize)> = self.players.iter().enumerate().map(|(i, p)| (p.street_bet, i)).collect();
        bets.sort_unstable_by(|a, b| b.cmp(a));
        let (top, seat) = bets[0];
        let second = bets[1].0;
        if top > second {
            let p = &mut self.players[seat];
            let excess = top - second;
            p.stack += excess;
            p.street_bet -= excess;
            p.committed -= excess;
            if p.status == PlayerStatus::AllIn && p.stack > 0 {
                p.status = PlayerStatus::Active;
            }
        }
    }

    fn deal_board(&mut self, n: usize) {
        let cards = self.deck[self.deck_pos..self.deck_pos + n].to_vec();
        self.deck_pos += n;
        self.board.extend_from_slice(&cards);
        self.events.push(Event::DealBoard { cards });
    }

    fn close_round(&mut self) {
        self.return_uncalled();
        let can_act = self.in_hand().filter(|&i| self.players[i].status == PlayerStatus::Active).count();
        loop {
            if self.street == Street::River {
                self.start_showdown();
                return;
            }
            self.street = self.street.next();
            let n = self.street.board_len() - self.board.len();
            self.deal_board(n);
            for p in &mut self.players {
                p.street_bet = 0;
                if p.status == PlayerStatus::Active {
                    p.needs_action = true;
                    p.raise_option = true;
                }
            }
            self.current_bet = 0;
            self.min_raise = self.config.big_blind;
            self.prev_aggressor = self.aggressor.take();
            if can_act >= 2 {
                self.to_act = self.next_needing_action(self.button);
                return;
            }
        }
    }

    fn start_showdown(&mut self) {
        self.street = Street::Showdown;
        self.pending_shows = (1..=NUM_PLAYERS)
            .map(|k| self.seat_after(self.button, k))
            .filter(|&i| self.players[i].status != PlayerStatus::Folded)
            .collect();
        self.to_act = self.pending_shows.first().copied();
    }

    /// Main pot and side pots with the seats eligible to win each.
    pub fn pots(&self) -> Vec<Pot> {
        let live: Vec<usize> = self.in_hand().collect();
        let mut levels: Vec<u64> = live.iter().map(|&i| self.players[i].committed).filter(|&c| c > 0).collect();
        levels.sort_unstable();
        levels.dedup();
        let mut pots = Vec::new();
        let mut prev = 0;
        for &level in &levels {
            let amount = self.players.iter().map(|p| p.committed.min(level) - p.committed.min(prev)).sum();
            let eligible = live.iter().copied().filter(|&i| self.players[i].committed >= level).collect();
            pots.push(Pot { amount, eligible });
            prev = level;
        }
        let overflow: u64 = self.players.iter().map(|p| p.committed.saturating_sub(prev)).sum();
        if overflow > 0 {
            match pots.last_mut() {
                Some(last) => last.amount += overflow,
                None => pots.push(Pot { amount: overflow, eligible: live }),
            }
        }
        pots
    }

    fn award(&mut self) {
        let mut payouts = vec![0u64; NUM_PLAYERS];
        let live: Vec<usize> = self.in_hand().collect();
        if live.len() == 1 {
            payouts[live[0]] = self.pot();
        } else {
            let board = card_mask(&self.board);
            let strength: Vec<u32> = (0..NUM_PLAYERS)
                .map(|i| match self.players[i].hole {
                    Some(h) => evaluate_mask(board | card_mask(&h)),
                    None => 0,
                })
                .collect();
            for pot in self.pots() {
                let best = pot.eligible.iter().map(|&i| strength[i]).max().unwrap_or(0);
                let winners: Vec<usize> = (1..=NUM_PLAYERS)
                    .map(|k| self.seat_after(self.button, k))
                    .filter(|i| pot.eligible.contains(i) && strength[*i] == best)
                    .collect();
                split_pot(pot.amount, &winners, &mut payouts);
            }
        }
        for (p, won) in self.players.iter_mut().zip(&payouts) {
            p.stack += won;
            p.committed = 0;
            p.street_bet = 0;
        }
        self.to_act = None;
        self.payouts = Some(payouts);
    }

    /// Checks chip conservation, board size and the to-act invariant.
    pub fn check_invariants(&self) -> Result<(), String> {
        let chips: u64 = self.players.iter().map(|p| p.stack + p.committed).sum();
        if chips != self.total_chips {
            return Err(format!("chip total {chips} != {}", self.total_chips));
        }
        if self.board.len() != self.street.board_len() {
            return Err(format!("board has {} cards on {:?}", self.board.len(), self.street));
        }
        if let Some(seat) = self.to_act {
            let p = &self.players[seat];
            let ok = match self.street {
                Street::Showdown => p.status != PlayerStatus::Folded,
                _ => p.status == PlayerStatus::Active,
            };
            if !ok {
                return Err(format!("seat {seat} to act with status {:?}", p.status));
            }
        } else if !self.is_terminal() {
            return Err("no one to act in a live hand".into());
        }
        Ok(())
    }
}

/// Splits `amount` evenly among `winners` (given in seat order from the
/// button's left); odd chips go one each to the earliest winners.
pub fn split_pot(amount: u64, winners: &[usize], payouts: &mut [u64]) {
    if winners.is_empty() {
        return;
    }
    let n = winners.len() as u64;
    let share = amount / n;
    let odd = (amount % n) as usize;
    for (k, &w) in winners.iter().enumerate() {
        payouts[w] += share + u64::from(k < odd);
    }
}
