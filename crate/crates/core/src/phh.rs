//! PHH hand-history text: serializer, strict parser, replay validator and
//! corpus writer.
//!
//! One event per line:
//!
//! ```text
//! # hand=17 players=6 blinds=50/100 stacks=10000,10000,10000,10000,10000,10000
//! d dh p1 KhQs
//! d db 7c8d2s
//! p3 f
//! p4 cc
//! p5 cbr 300
//! p4 sm KhQs
//! ```
//!
//! The optional `#` header carries the table metadata. Players are numbered
//! from the seat left of the button, so the button is always the last seat.
//! Corpus files hold many hands separated by blank lines.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cards::{format_cards, parse_cards, Card};
use crate::engine::{GameState, TableConfig, NUM_PLAYERS};

pub use crate::engine::Event as PhhEvent;

pub const GENERATOR_VERSION: &str = concat!("pokerlab ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Error)]
pub enum PhhError {
    #[error("line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("line {line}: {message}")]
    Semantic { line: usize, message: String },
    #[error("replay failed at event {event}: {message}")]
    Replay { event: usize, message: String },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {message}", path.display())]
    Corpus { path: PathBuf, message: String },
}

impl PhhError {
    pub fn is_syntax(&self) -> bool {
        matches!(self, PhhError::Syntax { .. })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PhhError + '_ {
    move |source| PhhError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhhMetadata {
    pub hand_id: u64,
    pub players: usize,
    pub small_blind: u64,
    pub big_blind: u64,
    pub stacks: Vec<u64>,
}

impl Default for PhhMetadata {
    fn default() -> Self {
        let table = TableConfig::default();
        PhhMetadata {
            hand_id: 0,
            players: NUM_PLAYERS,
            small_blind: table.small_blind,
            big_blind: table.big_blind,
            stacks: vec![table.starting_stack; NUM_PLAYERS],
        }
    }
}

impl PhhMetadata {
    pub fn table(&self) -> TableConfig {
        TableConfig {
            small_blind: self.small_blind,
            big_blind: self.big_blind,
            starting_stack: self.stacks.first().copied().unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PhhRecord {
    pub metadata: PhhMetadata,
    pub events: Vec<PhhEvent>,
}

pub fn player_token(seat: usize) -> String {
    format!("p{}", seat + 1)
}

/// The text of a single event line.
pub fn event_line(event: &PhhEvent) -> String {
    match event {
        PhhEvent::DealHole { player, cards } => format!("d dh {} {}", player_token(*player), format_cards(cards)),
        PhhEvent::DealBoard { cards } => format!("d db {}", format_cards(cards)),
        PhhEvent::Fold { player } => format!("{} f", player_token(*player)),
        PhhEvent::CheckCall { player } => format!("{} cc", player_token(*player)),
        PhhEvent::BetRaise { player, amount } => format!("{} cbr {amount}", player_token(*player)),
        PhhEvent::Show { player, cards } => format!("{} sm {}", player_token(*player), format_cards(cards)),
    }
}

pub fn serialize(record: &PhhRecord) -> String {
    let m = &record.metadata;
    let stacks: Vec<String> = m.stacks.iter().map(u64::to_string).collect();
    let mut out = format!(
        "# hand={} players={} blinds={}/{} stacks={}\n",
        m.hand_id,
        m.players,
        m.small_blind,
        m.big_blind,
        stacks.join(",")
    );
    for e in &record.events {
        let _ = writeln!(out, "{}", event_line(e));
    }
    out
}

struct LineParser<'a> {
    line_no: usize,
    tokens: Vec<(usize, &'a str)>,
    pos: usize,
    end_col: usize,
}

impl<'a> LineParser<'a> {
    fn new(line_no: usize, line: &'a str) -> Self {
        let mut tokens = Vec::new();
        let mut start = None;
        for (i, ch) in line.char_indices() {
            match (ch.is_ascii_whitespace(), start) {
                (true, Some(s)) => {
                    tokens.push((s, &line[s..i]));
                    start = None;
                }
                (false, None) => start = Some(i),
                _ => {}
            }
        }
        if let Some(s) = start {
            tokens.push((s, &line[s..]));
        }
        LineParser { line_no, tokens, pos: 0, end_col: line.len() + 1 }
    }

    fn err(&self, column: usize, message: impl Into<String>) -> PhhError {
        PhhError::Syntax { line: self.line_no, column, message: message.into() }
    }

    fn next(&mut self, expected: &str) -> Result<(usize, &'a str), PhhError> {
        match self.tokens.get(self.pos) {
            Some(&(col, tok)) => {
                self.pos += 1;
                Ok((col + 1, tok))
            }
            None => Err(self.err(self.end_col, format!("expected {expected}, found end of line"))),
        }
    }

    fn finish(&self) -> Result<(), PhhError> {
        match self.tokens.get(self.pos) {
            Some(&(col, tok)) => Err(self.err(col + 1, format!("expected end of line, found {tok:?}"))),
            None => Ok(()),
        }
    }

    fn player(&mut self, players: usize) -> Result<usize, PhhError> {
        let (col, tok) = self.next("player token pN")?;
        let digits = tok
            .strip_prefix('p')
            .filter(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()) && !d.starts_with('0'));
        let n: usize = digits
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| self.err(col, format!("expected player token pN, found {tok:?}")))?;
        if n > players {
            return Err(PhhError::Semantic {
                line: self.line_no,
                message: format!("player {tok} out of range p1..p{players}"),
            });
        }
        Ok(n - 1)
    }

    fn cards(&mut self) -> Result<Vec<Card>, PhhError> {
        let (col, tok) = self.next("cards")?;
        parse_cards(tok).map_err(|_| self.err(col, format!("malformed cards {tok:?}")))
    }

    fn amount(&mut self) -> Result<u64, PhhError> {
        let (col, tok) = self.next("amount")?;
        if !tok.bytes().all(|b| b.is_ascii_digit()) {
            return Err(self.err(col, format!("expected integer amount, found {tok:?}")));
        }
        tok.parse().map_err(|_| self.err(col, format!("amount {tok:?} out of range")))
    }
}

fn parse_header(line_no: usize, line: &str) -> Result<PhhMetadata, PhhError> {
    let mut p = LineParser::new(line_no, line);
    p.next("#")?;
    let mut meta = PhhMetadata::default();
    let mut stacks_seen = false;
    while p.pos < p.tokens.len() {
        let (col, tok) = p.next("key=value")?;
        let (key, value) =
            tok.split_once('=').ok_or_else(|| p.err(col, format!("expected key=value, found {tok:?}")))?;
        let bad = |what: &str| p.err(col, format!("malformed {what} value {value:?}"));
        let num = |s: &str| -> Option<u64> {
            (!s.is_empty() && s.bytes().all(|b| b.is_ascii_digit())).then(|| s.parse().ok()).flatten()
        };
        match key {
            "hand" => meta.hand_id = num(value).ok_or_else(|| bad("hand"))?,
            "players" => meta.players = num(value).ok_or_else(|| bad("players"))? as usize,
            "blinds" => {
                let (sb, bb) = value.split_once('/').ok_or_else(|| bad("blinds"))?;
                meta.small_blind = num(sb).ok_or_else(|| bad("blinds"))?;
                meta.big_blind = num(bb).ok_or_else(|| bad("blinds"))?;
            }
            "stacks" => {
                meta.stacks = value.split(',').map(num).collect::<Option<_>>().ok_or_else(|| bad("stacks"))?;
                stacks_seen = true;
            }
            _ => return Err(p.err(col, format!("unknown header key {key:?}"))),
        }
    }
    if !stacks_seen {
        meta.stacks = vec![TableConfig::default().starting_stack; meta.players];
    }
    if meta.players == 0 || meta.stacks.len() != meta.players {
        return Err(PhhError::Semantic {
            line: line_no,
            message: format!("{} stacks for {} players", meta.stacks.len(), meta.players),
        });
    }
    Ok(meta)
}

fn parse_event(line_no: usize, line: &str, players: usize) -> Result<PhhEvent, PhhError> {
    let mut p = LineParser::new(line_no, line);
    let (col, head) = p.next("event")?;
    let event = if head == "d" {
        let (col, kind) = p.next("dh or db")?;
        match kind {
            "dh" => {
                let player = p.player(players)?;
                PhhEvent::DealHole { player, cards: p.cards()? }
            }
            "db" => PhhEvent::DealBoard { cards: p.cards()? },
            _ => return Err(p.err(col, format!("expected dh or db, found {kind:?}"))),
        }
    } else {
        p.pos -= 1;
        let player = p.player(players).map_err(|e| match e {
            PhhError::Syntax { .. } => p.err(col, format!("expected d or player token, found {head:?}")),
            other => other,
        })?;
        let (col, kind) = p.next("action f, cc, cbr or sm")?;
        match kind {
            "f" => PhhEvent::Fold { player },
            "cc" => PhhEvent::CheckCall { player },
            "cbr" => PhhEvent::BetRaise { player, amount: p.amount()? },
            "sm" => PhhEvent::Show { player, cards: p.cards()? },
            _ => return Err(p.err(col, format!("expected action f, cc, cbr or sm, found {kind:?}"))),
        }
    };
    p.finish()?;
    Ok(event)
}

/// Strict parse of one hand. Blank lines are ignored; an empty input is an
/// empty record with default metadata.
pub fn parse(text: &str) -> Result<PhhRecord, PhhError> {
    let mut record = PhhRecord::default();
    let mut header_seen = false;
    for (i, line) in text.split('\n').enumerate() {
        let line_no = i + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        if line.starts_with('#') {
            if header_seen || !record.events.is_empty() {
                return Err(PhhError::Syntax {
                    line: line_no,
                    column: 1,
                    message: "header must be the first line of a hand".into(),
                });
            }
            record.metadata = parse_header(line_no, line)?;
            header_seen = true;
            continue;
        }
        record.events.push(parse_event(line_no, line, record.metadata.players)?);
    }
    Ok(record)
}

/// [`parse`] for arbitrary bytes; invalid UTF-8 is a syntax error.
pub fn parse_bytes(bytes: &[u8]) -> Result<PhhRecord, PhhError> {
    match std::str::from_utf8(bytes) {
        Ok(text) => parse(text),
        Err(e) => {
            let before = &bytes[..e.valid_up_to()];
            let line = before.iter().filter(|&&b| b == b'\n').count() + 1;
            let column = before.len() - before.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1) + 1;
            Err(PhhError::Syntax { line, column, message: "invalid UTF-8".into() })
        }
    }
}

fn replay_err(event: usize, message: impl Into<String>) -> PhhError {
    PhhError::Replay { event, message: message.into() }
}

/// Replays the record through the engine, checking every action and deal.
///
/// Returns the state after the last event. The record may stop before the
/// end of the hand, but it must not skip or reorder board deals.
pub fn replay(record: &PhhRecord) -> Result<GameState, PhhError> {
    let meta = &record.metadata;
    if meta.players != NUM_PLAYERS || meta.stacks.len() != NUM_PLAYERS {
        return Err(replay_err(0, format!("the engine plays {NUM_PLAYERS}-handed tables")));
    }
    let mut holes = [[Card::from_index(0).expect("valid index"); 2]; NUM_PLAYERS];
    for (i, hole) in holes.iter_mut().enumerate() {
        match record.events.get(i) {
            Some(PhhEvent::DealHole { player, cards }) if *player == i && cards.len() == 2 => {
                *hole = [cards[0], cards[1]];
            }
            _ => return Err(replay_err(i, format!("expected two hole cards for {}", player_token(i)))),
        }
    }
    let board: Vec<Card> = record
        .events
        .iter()
        .filter_map(|e| match e {
            PhhEvent::DealBoard { cards } => Some(cards.iter().copied()),
            _ => None,
        })
        .flatten()
        .collect();
    if board.len() > 5 {
        return Err(replay_err(0, format!("{} board cards dealt", board.len())));
    }
    let button = NUM_PLAYERS - 1;
    let deck = GameState::deck_from_cards(button, &holes, &board).map_err(|e| replay_err(0, e.to_string()))?;
    let stacks: [u64; NUM_PLAYERS] = meta.stacks.clone().try_into().expect("length checked");
    let mut state =
        GameState::with_deck(meta.table(), stacks, button, deck).map_err(|e| replay_err(0, e.to_string()))?;

    for (i, event) in record.events.iter().enumerate().skip(NUM_PLAYERS) {
        let emitted = state.events().len();
        match event.as_action() {
            None if i < emitted => {}
            None => return Err(replay_err(i, "board dealt before the betting round closed")),
            Some(_) if i < emitted => {
                return Err(replay_err(i, format!("expected `{}` before this action", event_line(&state.events()[i]))))
            }
            Some(action) => {
                state = state.apply(&action).map_err(|e| replay_err(i, e.to_string()))?;
            }
        }
        if state.events()[i] != *event {
            return Err(replay_err(
                i,
                format!("expected `{}`, found `{}`", event_line(&state.events()[i]), event_line(event)),
            ));
        }
    }
    Ok(state)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplaySummary {
    pub events: usize,
    pub complete: bool,
}

/// Like [`replay`], but an empty record is valid.
pub fn validate(record: &PhhRecord) -> Result<ReplaySummary, PhhError> {
    if record.events.is_empty() {
        return Ok(ReplaySummary { events: 0, complete: false });
    }
    let state = replay(record)?;
    let complete = state.is_terminal() && state.events().len() == record.events.len();
    Ok(ReplaySummary { events: record.events.len(), complete })
}

/// Splits a corpus file into hands on blank lines and parses each.
pub fn parse_corpus(text: &str) -> Result<Vec<PhhRecord>, PhhError> {
    let mut out = Vec::new();
    let mut block = String::new();
    let mut first_line = 1;
    let flush = |block: &mut String, first_line: usize, out: &mut Vec<PhhRecord>| -> Result<(), PhhError> {
        if block.is_empty() {
            return Ok(());
        }
        let rec = parse(block).map_err(|e| match e {
            PhhError::Syntax { line, column, message } => {
                PhhError::Syntax { line: line + first_line - 1, column, message }
            }
            PhhError::Semantic { line, message } => PhhError::Semantic { line: line + first_line - 1, message },
            other => other,
        })?;
        out.push(rec);
        block.clear();
        Ok(())
    };
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            flush(&mut block, first_line, &mut out)?;
            first_line = i + 2;
        } else {
            block.push_str(line);
            block.push('\n');
        }
    }
    flush(&mut block, first_line, &mut out)?;
    Ok(out)
}

pub fn read_corpus(path: &Path) -> Result<Vec<PhhRecord>, PhhError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_corpus(&text).map_err(|e| PhhError::Corpus { path: path.to_path_buf(), message: e.to_string() })
}

pub const TRAIN_FILE: &str = "train.phh";
pub const TEST_FILE: &str = "test.phh";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub generator_version: String,
    pub seed: u64,
    pub split_ratio: f64,
    pub train_hands: usize,
    pub test_hands: usize,
    /// Configuration of the run that produced the corpus.
    pub config: serde_json::Value,
}

/// Train/test assignment: `round(ratio * n)` hands chosen by a seeded shuffle
/// go to train, each side keeps the input order.
pub fn split_indices(n: usize, ratio: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n_train = (ratio * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Writes `train.phh`, `test.phh` and `manifest.json` under `out`.
pub fn write_corpus(
    hands: impl IntoIterator<Item = PhhRecord>,
    ratio: f64,
    seed: u64,
    out: &Path,
    config: serde_json::Value,
) -> Result<CorpusManifest, PhhError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(PhhError::Corpus {
            path: out.to_path_buf(),
            message: format!("split ratio {ratio} not in (0, 1)"),
        });
    }
    let hands: Vec<PhhRecord> = hands.into_iter().collect();
    let (train, test) = split_indices(hands.len(), ratio, seed);
    fs::create_dir_all(out).map_err(io_err(out))?;
    for (name, idx) in [(TRAIN_FILE, &train), (TEST_FILE, &test)] {
        let text: Vec<String> = idx.iter().map(|&i| serialize(&hands[i])).collect();
        let path = out.join(name);
        fs::write(&path, text.join("\n")).map_err(io_err(&path))?;
    }
    let manifest = CorpusManifest {
        generator_version: GENERATOR_VERSION.to_string(),
        seed,
        split_ratio: ratio,
        train_hands: train.len(),
        test_hands: test.len(),
        config,
    };
    let path = out.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(io_err(&path))?;
    Ok(manifest)
}

/// Reads both halves of a corpus directory written by [`write_corpus`].
pub fn read_corpus_dir(dir: &Path) -> Result<(Vec<PhhRecord>, Vec<PhhRecord>), PhhError> {
    Ok((read_corpus(&dir.join(TRAIN_FILE))?, read_corpus(&dir.join(TEST_FILE))?))
}
