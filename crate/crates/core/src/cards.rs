//! Cards, decks and exact hand evaluation.
//!
//! A [`Card`] is a single byte: `(rank - 2) * 4 + suit`. Hands of five to
//! seven cards are evaluated with rank/suit bitmasks into a [`HandRank`] whose
//! derived ordering is the poker ordering.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngExt};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CardError {
    #[error("invalid card text {0:?}")]
    Parse(String),
    #[error("duplicate card {0}")]
    Duplicate(Card),
    #[error("expected {expected} cards, got {got}")]
    Count { expected: String, got: usize },
    #[error("cannot deal {requested} cards from a deck of {remaining}")]
    Overdraw { requested: usize, remaining: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Suit {
    Clubs,
    Diamonds,
    Hearts,
    Spades,
}

impl Suit {
    pub const ALL: [Suit; 4] = [Suit::Clubs, Suit::Diamonds, Suit::Hearts, Suit::Spades];

    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn to_char(self) -> char {
        match self {
            Suit::Clubs => 'c',
            Suit::Diamonds => 'd',
            Suit::Hearts => 'h',
            Suit::Spades => 's',
        }
    }

    pub fn from_char(c: char) -> Option<Suit> {
        match c {
            'c' => Some(Suit::Clubs),
            'd' => Some(Suit::Diamonds),
            'h' => Some(Suit::Hearts),
            's' => Some(Suit::Spades),
            _ => None,
        }
    }
}

const RANK_CHARS: [char; 13] = ['2', '3', '4', '5', '6', '7', '8', '9', 'T', 'J', 'Q', 'K', 'A'];

/// One of the 52 standard cards.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Card(u8);

impl Card {
    /// `rank` in 2..=14 (ace high).
    pub fn new(rank: u8, suit: Suit) -> Card {
        assert!((2..=14).contains(&rank), "rank {rank} out of range");
        Card((rank - 2) * 4 + suit.index())
    }

    pub fn from_index(index: u8) -> Option<Card> {
        (index < 52).then_some(Card(index))
    }

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn rank(self) -> u8 {
        self.0 / 4 + 2
    }

    pub fn suit(self) -> Suit {
        Suit::ALL[(self.0 % 4) as usize]
    }

    pub fn all() -> impl Iterator<Item = Card> {
        (0..52).map(Card)
    }

    fn bit(self) -> u64 {
        1u64 << self.0
    }
}

impl fmt::Display for Card {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", RANK_CHARS[(self.rank() - 2) as usize], self.suit().to_char())
    }
}

impl fmt::Debug for Card {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for Card {
    type Err = CardError;

    fn from_str(s: &str) -> Result<Card, CardError> {
        let mut chars = s.chars();
        let (Some(r), Some(su), None) = (chars.next(), chars.next(), chars.next()) else {
            return Err(CardError::Parse(s.to_string()));
        };
        let rank = RANK_CHARS.iter().position(|&c| c == r).ok_or_else(|| CardError::Parse(s.to_string()))?;
        let suit = Suit::from_char(su).ok_or_else(|| CardError::Parse(s.to_string()))?;
        Ok(Card::new(rank as u8 + 2, suit))
    }
}

impl Serialize for Card {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Card {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Card, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Parses concatenated two-character card codes, e.g. `"KhQs"`.
pub fn parse_cards(text: &str) -> Result<Vec<Card>, CardError> {
    if !text.is_ascii() || !text.len().is_multiple_of(2) {
        return Err(CardError::Parse(text.to_string()));
    }
    (0..text.len()).step_by(2).map(|i| text[i..i + 2].parse()).collect()
}

pub fn format_cards(cards: &[Card]) -> String {
    cards.iter().map(|c| c.to_string()).collect()
}

/// Fails on the first repeated card.
pub fn check_distinct(cards: &[Card]) -> Result<(), CardError> {
    let mut seen = 0u64;
    for &c in cards {
        if seen & c.bit() != 0 {
            return Err(CardError::Duplicate(c));
        }
        seen |= c.bit();
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HandCategory {
    HighCard,
    Pair,
    TwoPair,
    ThreeOfAKind,
    Straight,
    Flush,
    FullHouse,
    FourOfAKind,
    StraightFlush,
}

impl HandCategory {
    pub const ALL: [HandCategory; 9] = [
        HandCategory::HighCard,
        HandCategory::Pair,
        HandCategory::TwoPair,
        HandCategory::ThreeOfAKind,
        HandCategory::Straight,
        HandCategory::Flush,
        HandCategory::FullHouse,
        HandCategory::FourOfAKind,
        HandCategory::StraightFlush,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<HandCategory> {
        HandCategory::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            HandCategory::HighCard => "high_card",
            HandCategory::Pair => "pair",
            HandCategory::TwoPair => "two_pair",
            HandCategory::ThreeOfAKind => "three_of_a_kind",
            HandCategory::Straight => "straight",
            HandCategory::Flush => "flush",
            HandCategory::FullHouse => "full_house",
            HandCategory::FourOfAKind => "four_of_a_kind",
            HandCategory::StraightFlush => "straight_flush",
        }
    }
}

impl fmt::Display for HandCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Strength of the best five-card hand.
///
/// `kickers` lists the five ranks of that hand grouped by multiplicity
/// (larger groups first, then higher rank first). In a five-high straight the
/// ace is listed as rank 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HandRank {
    pub category: HandCategory,
    pub kickers: [u8; 5],
}

impl HandRank {
    /// Packs the rank into a `u32` whose integer order equals the hand order.
    pub fn value(&self) -> u32 {
        self.kickers.iter().fold(self.category as u32, |acc, &k| (acc << 4) | k as u32)
    }

    pub fn from_value(v: u32) -> HandRank {
        let mut kickers = [0u8; 5];
        for (i, k) in kickers.iter_mut().enumerate() {
            *k = ((v >> (4 * (4 - i))) & 0xF) as u8;
        }
        let category = HandCategory::from_index((v >> 20) as usize).expect("packed category");
        HandRank { category, kickers }
    }
}

const WHEEL: u16 = 0b1_0000_0000_1111;

/// Highest straight in a 13-bit rank mask (bit 0 = deuce), as a rank value.
fn straight_high(mask: u16) -> Option<u8> {
    for top in (4..13).rev() {
        let window = 0x1Fu16 << (top - 4);
        if mask & window == window {
            return Some(top as u8 + 2);
        }
    }
    (mask & WHEEL == WHEEL).then_some(5)
}

#[inline]
fn pack(category: HandCategory, kickers: [u8; 5]) -> u32 {
    kickers.iter().fold(category as u32, |acc, &k| (acc << 4) | k as u32)
}

fn straight_kickers(high: u8) -> [u8; 5] {
    if high == 5 {
        [5, 4, 3, 2, 1]
    } else {
        [high, high - 1, high - 2, high - 3, high - 4]
    }
}

/// Evaluates a bitmask of 5..=7 cards into a packed [`HandRank::value`].
///
/// This is the hot path used by equity rollouts; the mask must hold between
/// five and seven bits.
#[inline]
pub fn evaluate_mask(cards: u64) -> u32 {
    let mut suits = [0u16; 4];
    let mut counts = [0u8; 13];
    let mut m = cards;
    while m != 0 {
        let idx = m.trailing_zeros();
        m &= m - 1;
        let (r, s) = ((idx / 4) as usize, (idx % 4) as usize);
        suits[s] |= 1 << r;
        counts[r] += 1;
    }

    for &sm in &suits {
        if sm.count_ones() >= 5 {
            if let Some(h) = straight_high(sm) {
                return pack(HandCategory::StraightFlush, straight_kickers(h));
            }
            let mut k = [0u8; 5];
            let mut n = 0;
            for r in (0..13).rev() {
                if sm & (1 << r) != 0 && n < 5 {
                    k[n] = r as u8 + 2;
                    n += 1;
                }
            }
            return pack(HandCategory::Flush, k);
        }
    }

    let (mut quad, mut trips, mut pairs, mut singles) = (None, [0u8; 2], [0u8; 3], [0u8; 7]);
    let (mut nt, mut np, mut ns) = (0, 0, 0);
    for r in (0..13).rev() {
        let rank = r as u8 + 2;
        match counts[r] {
            4 => quad = Some(rank),
            3 => {
                trips[nt] = rank;
                nt += 1;
            }
            2 => {
                pairs[np] = rank;
                np += 1;
            }
            1 => {
                singles[ns] = rank;
                ns += 1;
            }
            _ => {}
        }
    }
    // Highest rank present other than the excluded ones.
    let best_other = |exclude: &[u8]| -> u8 {
        (0..13)
            .rev()
            .map(|r| r as u8 + 2)
            .find(|rank| counts[(rank - 2) as usize] > 0 && !exclude.contains(rank))
            .unwrap_or(0)
    };

    if let Some(q) = quad {
        let k = best_other(&[q]);
        return pack(HandCategory::FourOfAKind, [q, q, q, q, k]);
    }
    if nt >= 1 && (nt >= 2 || np >= 1) {
        let t = trips[0];
        let p = if nt >= 2 { trips[1].max(pairs[0]) } else { pairs[0] };
        return pack(HandCategory::FullHouse, [t, t, t, p, p]);
    }
    let mask = suits.iter().fold(0u16, |a, &s| a | s);
    if let Some(h) = straight_high(mask) {
        return pack(HandCategory::Straight, straight_kickers(h));
    }
    if nt == 1 {
        let t = trips[0];
        return pack(HandCategory::ThreeOfAKind, [t, t, t, singles[0], singles[1]]);
    }
    if np >= 2 {
        let (a, b) = (pairs[0], pairs[1]);
        let k = best_other(&[a, b]);
        return pack(HandCategory::TwoPair, [a, a, b, b, k]);
    }
    if np == 1 {
        let p = pairs[0];
        return pack(HandCategory::Pair, [p, p, singles[0], singles[1], singles[2]]);
    }
    pack(HandCategory::HighCard, [singles[0], singles[1], singles[2], singles[3], singles[4]])
}

pub fn card_mask(cards: &[Card]) -> u64 {
    cards.iter().fold(0, |m, c| m | c.bit())
}

/// Best five-card hand among 5, 6 or 7 distinct cards.
pub fn evaluate(cards: &[Card]) -> Result<HandRank, CardError> {
    if !(5..=7).contains(&cards.len()) {
        return Err(CardError::Count { expected: "5 to 7".into(), got: cards.len() });
    }
    check_distinct(cards)?;
    Ok(HandRank::from_value(evaluate_mask(card_mask(cards))))
}

/// Best five-card hand among exactly seven distinct cards.
pub fn evaluate7(cards: &[Card]) -> Result<HandRank, CardError> {
    if cards.len() != 7 {
        return Err(CardError::Count { expected: "7".into(), got: cards.len() });
    }
    evaluate(cards)
}

pub fn compare(a: &HandRank, b: &HandRank) -> std::cmp::Ordering {
    a.cmp(b)
}

/// Cards not yet dealt. Draws are uniform without replacement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Deck {
    cards: Vec<Card>,
}

impl Default for Deck {
    fn default() -> Self {
        Deck::new()
    }
}

impl Deck {
    pub fn new() -> Deck {
        Deck { cards: Card::all().collect() }
    }

    /// A full deck minus `used`.
    pub fn without(used: &[Card]) -> Deck {
        let mask = card_mask(used);
        Deck { cards: Card::all().filter(|c| mask & c.bit() == 0).collect() }
    }

    pub fn len(&self) -> usize {
        self.cards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cards.is_empty()
    }

    pub fn cards(&self) -> &[Card] {
        &self.cards
    }

    pub fn deal<R: Rng + ?Sized>(&mut self, rng: &mut R, n: usize) -> Result<Vec<Card>, CardError> {
        if n > self.cards.len() {
            return Err(CardError::Overdraw { requested: n, remaining: self.cards.len() });
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let j = rng.random_range(0..self.cards.len());
            out.push(self.cards.swap_remove(j));
        }
        Ok(out)
    }
}
