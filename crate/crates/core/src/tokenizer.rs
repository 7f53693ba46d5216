//! Fixed vocabulary over PHH tokens and GAP/ANS masked-sequence construction.
//!
//! A record becomes `<BOS>`, the whitespace-separated words of each event line
//! with cards split into two-character codes and chip amounts into digits,
//! then `<EOS>`. Line breaks carry no information (every event starts with
//! `d` or a player token) and are not encoded.
//!
//! Masking replaces a sample of content positions with `<GAP>`, appends
//! `<ANS>` and then the replaced tokens in position order. The model is
//! trained to predict only those appended tokens.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cards::Card;
use crate::engine::NUM_PLAYERS;
use crate::phh::{player_token, PhhEvent};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const GAP: TokenId = 3;
pub const ANS: TokenId = 4;
pub const NUM_SPECIALS: usize = 5;

pub const VOCAB_VERSION: u32 = 1;
const SPECIALS: [&str; NUM_SPECIALS] = ["<PAD>", "<BOS>", "<EOS>", "<GAP>", "<ANS>"];
const DEAL: &str = "d";
const KEYWORDS: [&str; 6] = ["dh", "db", "f", "cc", "cbr", "sm"];

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("token {0:?} is not in the vocabulary")]
    UnknownToken(String),
    #[error("id {0} is not in the vocabulary")]
    UnknownId(TokenId),
    #[error("malformed token stream at token {index}: {message}")]
    Malformed { index: usize, message: String },
    #[error("mask fraction {0} not in [0, 1)")]
    Fraction(f64),
    #[error("vocabulary file: {0}")]
    VocabFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    tokens: std::collections::BTreeMap<String, TokenId>,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::new()
    }
}

impl Vocab {
    /// Specials, `d`, action keywords, players, cards, digits.
    pub fn new() -> Vocab {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.push(DEAL.into());
        tokens.extend(KEYWORDS.iter().map(|s| s.to_string()));
        tokens.extend((0..NUM_PLAYERS).map(player_token));
        tokens.extend(Card::all().map(|c| c.to_string()));
        tokens.extend((0..10).map(|d| d.to_string()));
        Vocab::from_tokens(tokens).expect("built-in vocabulary is bijective")
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Vocab, TokenizerError> {
        let ids: HashMap<String, TokenId> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as TokenId)).collect();
        if ids.len() != tokens.len() {
            return Err(TokenizerError::VocabFile("duplicate token".into()));
        }
        Ok(Vocab { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<TokenId, TokenizerError> {
        self.ids.get(token).copied().ok_or_else(|| TokenizerError::UnknownToken(token.into()))
    }

    pub fn token(&self, id: TokenId) -> Result<&str, TokenizerError> {
        self.tokens.get(id as usize).map(String::as_str).ok_or(TokenizerError::UnknownId(id))
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        (id as usize) < NUM_SPECIALS
    }

    /// Positions eligible for masking: everything but specials and `d`.
    pub fn is_maskable(&self, id: TokenId) -> bool {
        !self.is_special(id) && self.tokens.get(id as usize).is_some_and(|t| t != DEAL)
    }

    pub fn card_id(&self, card: Card) -> TokenId {
        self.ids[&card.to_string()]
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let file = VocabFile {
            version: VOCAB_VERSION,
            tokens: self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as TokenId)).collect(),
        };
        fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab, TokenizerError> {
        let file: VocabFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        if file.version != VOCAB_VERSION {
            return Err(TokenizerError::VocabFile(format!("unsupported version {}", file.version)));
        }
        let mut tokens = vec![None; file.tokens.len()];
        for (t, id) in file.tokens {
            match tokens.get_mut(id as usize) {
                Some(slot @ None) => *slot = Some(t),
                _ => return Err(TokenizerError::VocabFile(format!("id {id} duplicated or out of range"))),
            }
        }
        let vocab = Vocab::from_tokens(tokens.into_iter().map(|t| t.expect("all ids filled")).collect())?;
        if vocab.tokens.iter().take(NUM_SPECIALS).ne(SPECIALS.iter()) {
            return Err(TokenizerError::VocabFile("special tokens must hold the low ids".into()));
        }
        Ok(vocab)
    }
}

/// Digits of a chip amount, most significant first.
pub fn amount_tokenize(chips: u64) -> Vec<String> {
    chips.to_string().chars().map(String::from).collect()
}

pub fn amount_detokenize<S: AsRef<str>>(digits: &[S]) -> Option<u64> {
    if digits.is_empty() || !digits.iter().all(|d| d.as_ref().len() == 1) {
        return None;
    }
    let s: String = digits.iter().map(AsRef::as_ref).collect();
    if s.len() > 1 && s.starts_with('0') {
        return None;
    }
    s.parse().ok()
}

fn push_cards(out: &mut Vec<String>, cards: &[Card]) {
    out.extend(cards.iter().map(Card::to_string));
}

/// Text tokens of the event lines, without BOS/EOS.
pub fn event_tokens(events: &[PhhEvent]) -> Vec<String> {
    let mut out = Vec::new();
    for e in events {
        match e {
            PhhEvent::DealHole { player, cards } => {
                out.extend([DEAL.into(), "dh".into(), player_token(*player)]);
                push_cards(&mut out, cards);
            }
            PhhEvent::DealBoard { cards } => {
                out.extend([DEAL.into(), "db".into()]);
                push_cards(&mut out, cards);
            }
            PhhEvent::Fold { player } => out.extend([player_token(*player), "f".into()]),
            PhhEvent::CheckCall { player } => out.extend([player_token(*player), "cc".into()]),
            PhhEvent::BetRaise { player, amount } => {
                out.extend([player_token(*player), "cbr".into()]);
                out.extend(amount_tokenize(*amount));
            }
            PhhEvent::Show { player, cards } => {
                out.extend([player_token(*player), "sm".into()]);
                push_cards(&mut out, cards);
            }
        }
    }
    out
}

/// Index of the first token of each event in [`encode`]'s output.
pub fn event_offsets(events: &[PhhEvent]) -> Vec<usize> {
    let mut at = 1;
    events
        .iter()
        .map(|e| {
            let start = at;
            at += event_tokens(std::slice::from_ref(e)).len();
            start
        })
        .collect()
}

pub fn encode(vocab: &Vocab, events: &[PhhEvent]) -> Result<Vec<TokenId>, TokenizerError> {
    let mut ids = vec![BOS];
    for t in event_tokens(events) {
        ids.push(vocab.id(&t)?);
    }
    ids.push(EOS);
    Ok(ids)
}

pub fn decode_tokens<'v>(vocab: &'v Vocab, ids: &[TokenId]) -> Result<Vec<&'v str>, TokenizerError> {
    ids.iter().map(|&i| vocab.token(i)).collect()
}

/// Inverse of [`encode`]: regroups the token stream into events.
pub fn decode(vocab: &Vocab, ids: &[TokenId]) -> Result<Vec<PhhEvent>, TokenizerError> {
    let toks = decode_tokens(vocab, ids)?;
    let bad = |index: usize, message: &str| TokenizerError::Malformed { index, message: message.into() };
    let mut i = 0;
    if toks.first() == Some(&"<BOS>") {
        i = 1;
    }
    let mut end = toks.len();
    if end > i && toks[end - 1] == "<EOS>" {
        end -= 1;
    }
    let player = |t: &str| -> Option<usize> {
        t.strip_prefix('p')
            .and_then(|d| d.parse::<usize>().ok())
            .filter(|n| (1..=NUM_PLAYERS).contains(n))
            .map(|n| n - 1)
    };
    let cards = |i: &mut usize, n: std::ops::RangeInclusive<usize>| -> Result<Vec<Card>, TokenizerError> {
        let mut out = Vec::new();
        while *i < end && out.len() < *n.end() {
            match toks[*i].parse::<Card>() {
                Ok(c) => out.push(c),
                Err(_) => break,
            }
            *i += 1;
        }
        if n.contains(&out.len()) {
            Ok(out)
        } else {
            Err(bad(*i, "wrong number of cards"))
        }
    };
    let mut events = Vec::new();
    while i < end {
        let head = toks[i];
        i += 1;
        if head == DEAL {
            let kind = *toks.get(i).filter(|_| i < end).ok_or_else(|| bad(i, "expected dh or db"))?;
            i += 1;
            match kind {
                "dh" => {
                    let p = toks
                        .get(i)
                        .filter(|_| i < end)
                        .and_then(|t| player(t))
                        .ok_or_else(|| bad(i, "expected player"))?;
                    i += 1;
                    events.push(PhhEvent::DealHole { player: p, cards: cards(&mut i, 2..=2)? });
                }
                "db" => events.push(PhhEvent::DealBoard { cards: cards(&mut i, 1..=5)? }),
                _ => return Err(bad(i - 1, "expected dh or db")),
            }
            continue;
        }
        let p = player(head).ok_or_else(|| bad(i - 1, "expected d or player"))?;
        let kind = *toks.get(i).filter(|_| i < end).ok_or_else(|| bad(i, "expected action"))?;
        i += 1;
        events.push(match kind {
            "f" => PhhEvent::Fold { player: p },
            "cc" => PhhEvent::CheckCall { player: p },
            "cbr" => {
                let start = i;
                while i < end && toks[i].len() == 1 && toks[i].as_bytes()[0].is_ascii_digit() {
                    i += 1;
                }
                let amount = amount_detokenize(&toks[start..i]).ok_or_else(|| bad(start, "expected amount"))?;
                PhhEvent::BetRaise { player: p, amount }
            }
            "sm" => PhhEvent::Show { player: p, cards: cards(&mut i, 2..=2)? },
            _ => return Err(bad(i - 1, "expected action")),
        });
    }
    Ok(events)
}

/// One masked training sequence.
///
/// `target_ids[i]` is the token expected at position `i`; the model predicts
/// it from positions `< i`. `loss_mask` is true exactly on the answers after
/// `<ANS>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedExample {
    pub input_ids: Vec<TokenId>,
    pub target_ids: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
    pub gap_positions: Vec<usize>,
}

impl TokenizedExample {
    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }

    /// Position of `<ANS>`.
    pub fn ans_position(&self) -> usize {
        self.input_ids.len() - self.gap_positions.len() - 1
    }

    /// Original sequence, with the answers put back into the gaps.
    pub fn invert(&self) -> Vec<TokenId> {
        let ans = self.ans_position();
        let mut out = self.input_ids[..ans].to_vec();
        for (k, &p) in self.gap_positions.iter().enumerate() {
            out[p] = self.input_ids[ans + 1 + k];
        }
        out
    }
}

/// Masks the given positions.
pub fn mask_positions(ids: &[TokenId], positions: &[usize]) -> TokenizedExample {
    let mut gap_positions = positions.to_vec();
    gap_positions.sort_unstable();
    gap_positions.dedup();
    let mut input_ids = ids.to_vec();
    for &p in &gap_positions {
        input_ids[p] = GAP;
    }
    input_ids.push(ANS);
    let mut loss_mask = vec![false; input_ids.len()];
    for &p in &gap_positions {
        input_ids.push(ids[p]);
        loss_mask.push(true);
    }
    TokenizedExample { target_ids: input_ids.clone(), input_ids, loss_mask, gap_positions }
}

/// Masks `ceil(fraction * n)` of the `n` maskable positions, chosen uniformly.
pub fn mask_gaps<R: Rng + ?Sized>(
    vocab: &Vocab,
    ids: &[TokenId],
    fraction: f64,
    rng: &mut R,
) -> Result<TokenizedExample, TokenizerError> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(TokenizerError::Fraction(fraction));
    }
    let maskable: Vec<usize> = (0..ids.len()).filter(|&i| vocab.is_maskable(ids[i])).collect();
    let k = (fraction * maskable.len() as f64).ceil() as usize;
    let chosen: Vec<usize> = sample(rng, maskable.len(), k).into_iter().map(|j| maskable[j]).collect();
    Ok(mask_positions(ids, &chosen))
}

pub fn write_examples(path: &Path, examples: &[TokenizedExample]) -> Result<(), TokenizerError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for e in examples {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_examples(path: &Path) -> Result<Vec<TokenizedExample>, TokenizerError> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn vocab_layout() {
        let v = Vocab::new();
        assert_eq!(v.len(), 80);
        assert_eq!(v.id("<GAP>").unwrap(), GAP);
        assert_eq!(v.id("<ANS>").unwrap(), ANS);
        assert!(!v.is_maskable(v.id("d").unwrap()));
        assert!(v.is_maskable(v.id("Kh").unwrap()));
        assert!(matches!(v.id("p7"), Err(TokenizerError::UnknownToken(t)) if t == "p7"));
    }

    #[test]
    fn fold_line() {
        let v = Vocab::new();
        let ids = encode(&v, &[PhhEvent::Fold { player: 2 }]).unwrap();
        assert_eq!(ids, vec![BOS, v.id("p3").unwrap(), v.id("f").unwrap(), EOS]);
        assert_eq!(encode(&v, &[]).unwrap(), vec![BOS, EOS]);
    }

    #[test]
    fn amounts() {
        assert_eq!(amount_tokenize(0), vec!["0"]);
        assert_eq!(amount_tokenize(300), vec!["3", "0", "0"]);
        assert_eq!(amount_detokenize(&amount_tokenize(98_765)), Some(98_765));
        assert_eq!(amount_detokenize(&["0", "5"]), None);
    }

    #[test]
    fn three_token_example() {
        let (a, b, c) = (10, 11, 12);
        let ex = mask_positions(&[a, b, c], &[1]);
        assert_eq!(ex.input_ids, vec![a, GAP, c, ANS, b]);
        assert_eq!(ex.loss_mask, vec![false, false, false, false, true]);
        assert_eq!(ex.invert(), vec![a, b, c]);
    }

    #[test]
    fn zero_fraction_masks_nothing() {
        let v = Vocab::new();
        let ids = encode(&v, &[PhhEvent::CheckCall { player: 0 }]).unwrap();
        let ex = mask_gaps(&v, &ids, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(ex.input_ids.last(), Some(&ANS));
        assert!(ex.loss_mask.iter().all(|m| !m));
        assert!(mask_gaps(&v, &ids, 1.0, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn mask_count_rounds_up() {
        let v = Vocab::new();
        let ids = encode(&v, &[PhhEvent::BetRaise { player: 1, amount: 300 }]).unwrap();
        // p2 cbr 3 0 0: five maskable tokens, ceil(0.15 * 5) = 1.
        let ex = mask_gaps(&v, &ids, 0.15, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(ex.gap_positions.len(), 1);
        assert_eq!(ex.invert(), ids);
    }
}
