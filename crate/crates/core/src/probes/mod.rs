//! Probing datasets, class balancing, probe fitting and per-layer reports.
//!
//! Three labelled inputs are derived from a hand:
//!
//! * hand rank: the category of player 1's hole cards plus the board at the
//!   probed street, read at the last board-card token of that street;
//! * action: one action per hand with its action token replaced by
//!   `<GAP>`, read at the gap (four classes);
//! * equity: player 1's Monte-Carlo equity at the probed street against
//!   the players still in the hand, with every other player's hole cards
//!   replaced by `<GAP>`, read at the last board-card token.
//!
//! Sequences are cut right after the read position; the model is causal, so
//! later tokens cannot change the activation.

mod fit;

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

pub use fit::{split_rows, train_probe, Dataset, Probe, ProbeHyper, ProbeKind, Standardizer, Targets};

use crate::cards::{evaluate, Card, HandCategory};
use crate::engine::{Street, NUM_PLAYERS};
use crate::equity::{mc_equity, EquityError};
use crate::model::{Gpt, ModelError, Real};
use crate::par::{mix_seed, Exec};
use crate::phh::{PhhEvent, PhhRecord};
use crate::tokenizer::{encode, event_offsets, TokenId, TokenizerError, Vocab, GAP};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("degenerate probe data: {0}")]
    Degenerate(String),
    #[error("invalid probe input: {0}")]
    Input(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Equity(#[from] EquityError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTask {
    HandRank,
    Action,
    Equity,
}

impl ProbeTask {
    pub fn name(self) -> &'static str {
        match self {
            ProbeTask::HandRank => "hand_rank",
            ProbeTask::Action => "action",
            ProbeTask::Equity => "equity",
        }
    }

    pub fn is_classification(self) -> bool {
        self != ProbeTask::Equity
    }
}

impl std::str::FromStr for ProbeTask {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "hand_rank" | "handrank" => Ok(ProbeTask::HandRank),
            "action" => Ok(ProbeTask::Action),
            "equity" => Ok(ProbeTask::Equity),
            _ => Err(format!("unknown task {s:?} (expected handrank, action or equity)")),
        }
    }
}

pub const ACTION_CLASSES: [&str; 4] = ["fold", "check_call", "bet_raise", "show"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Class(usize),
    Value(f64),
}

/// A labelled token sequence and the position whose activation is probed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeInput {
    pub hand_id: u64,
    pub input_ids: Vec<TokenId>,
    pub position: usize,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSample {
    pub activation: Vec<f64>,
    pub label: Label,
    pub layer: usize,
    pub hand_id: u64,
    pub position: usize,
}

fn hole_of(record: &PhhRecord, player: usize) -> Option<[Card; 2]> {
    record.events.iter().find_map(|e| match e {
        PhhEvent::DealHole { player: p, cards } if *p == player && cards.len() == 2 => Some([cards[0], cards[1]]),
        _ => None,
    })
}

/// Index of the board event completing `street` and the board so far.
fn street_board(record: &PhhRecord, street: Street) -> Option<(usize, Vec<Card>)> {
    let need = street.board_len();
    if need == 0 {
        return None;
    }
    let mut board = Vec::new();
    for (k, e) in record.events.iter().enumerate() {
        if let PhhEvent::DealBoard { cards } = e {
            board.extend_from_slice(cards);
            if board.len() == need {
                return Some((k, board));
            }
            if board.len() > need {
                return None;
            }
        }
    }
    None
}

/// Token index of the last card of board event `k`.
fn last_board_token(offsets: &[usize], record: &PhhRecord, k: usize) -> usize {
    let PhhEvent::DealBoard { cards } = &record.events[k] else { unreachable!("board event") };
    offsets[k] + 2 + cards.len() - 1
}

/// Hand-rank category of player 1 at `street`. Returns the inputs and the
/// number of hands that never reached the street.
pub fn handrank_inputs(
    vocab: &Vocab,
    records: &[PhhRecord],
    street: Street,
) -> Result<(Vec<ProbeInput>, usize), ProbeError> {
    let mut out = Vec::new();
    let mut skipped = 0;
    for r in records {
        let (Some((k, board)), Some(hole)) = (street_board(r, street), hole_of(r, 0)) else {
            skipped += 1;
            continue;
        };
        let mut cards = hole.to_vec();
        cards.extend_from_slice(&board);
        let category = evaluate(&cards).map_err(|e| ProbeError::Input(e.to_string()))?.category;
        let offsets = event_offsets(&r.events);
        let position = last_board_token(&offsets, r, k);
        let mut ids = encode(vocab, &r.events)?;
        ids.truncate(position + 1);
        out.push(ProbeInput {
            hand_id: r.metadata.hand_id,
            input_ids: ids,
            position,
            label: Label::Class(category.index()),
        });
    }
    Ok((out, skipped))
}

pub fn action_class(event: &PhhEvent) -> Option<usize> {
    match event {
        PhhEvent::Fold { .. } => Some(0),
        PhhEvent::CheckCall { .. } => Some(1),
        PhhEvent::BetRaise { .. } => Some(2),
        PhhEvent::Show { .. } => Some(3),
        _ => None,
    }
}

/// One action per hand, chosen with `mix_seed(seed, hand_id)`, with its
/// action token replaced by `<GAP>`.
pub fn action_inputs(vocab: &Vocab, records: &[PhhRecord], seed: u64) -> Result<Vec<ProbeInput>, ProbeError> {
    let mut out = Vec::new();
    for r in records {
        let actions: Vec<usize> = (0..r.events.len()).filter(|&k| action_class(&r.events[k]).is_some()).collect();
        if actions.is_empty() {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, r.metadata.hand_id));
        let k = *actions.choose(&mut rng).expect("nonempty");
        let position = event_offsets(&r.events)[k] + 1;
        let mut ids = encode(vocab, &r.events)?;
        ids[position] = GAP;
        ids.truncate(position + 1);
        let label = Label::Class(action_class(&r.events[k]).expect("action"));
        out.push(ProbeInput { hand_id: r.metadata.hand_id, input_ids: ids, position, label });
    }
    Ok(out)
}

/// Players other than player 1 who had not folded when `street`'s board
/// was dealt.
fn live_opponents(record: &PhhRecord, upto: usize) -> usize {
    let mut folded = [false; NUM_PLAYERS];
    for e in &record.events[..upto] {
        if let PhhEvent::Fold { player } = e {
            folded[*player] = true;
        }
    }
    (1..NUM_PLAYERS).filter(|&p| !folded[p]).count()
}

/// Player 1's equity at `street` with every other hole card hidden.
pub fn equity_inputs(
    vocab: &Vocab,
    records: &[PhhRecord],
    street: Street,
    rollouts: u64,
    seed: u64,
    exec: Exec,
) -> Result<(Vec<ProbeInput>, usize), ProbeError> {
    let results = exec.map_slice(records, |r| -> Result<Option<ProbeInput>, ProbeError> {
        let (Some((k, board)), Some(hole)) = (street_board(r, street), hole_of(r, 0)) else {
            return Ok(None);
        };
        let opponents = live_opponents(r, k).clamp(1, NUM_PLAYERS - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, r.metadata.hand_id));
        let eq = mc_equity(hole, &board, opponents, rollouts, &mut rng)?;
        let offsets = event_offsets(&r.events);
        let position = last_board_token(&offsets, r, k);
        let mut ids = encode(vocab, &r.events)?;
        for (j, e) in r.events.iter().enumerate() {
            if let PhhEvent::DealHole { player, cards } = e {
                if *player != 0 {
                    for c in 0..cards.len() {
                        ids[offsets[j] + 3 + c] = GAP;
                    }
                }
            }
        }
        ids.truncate(position + 1);
        Ok(Some(ProbeInput { hand_id: r.metadata.hand_id, input_ids: ids, position, label: Label::Value(eq.equity) }))
    });
    let mut out = Vec::new();
    let mut skipped = 0;
    for r in results {
        match r? {
            Some(i) => out.push(i),
            None => skipped += 1,
        }
    }
    Ok((out, skipped))
}

/// Linear-interpolation percentile of ascending `sorted`, rounded down to
/// an integer. Exact when `percentile * (len - 1)` is an integer.
pub fn percentile_floor(sorted: &[usize], percentile: f64) -> usize {
    assert!(!sorted.is_empty(), "percentile of an empty list");
    assert!((0.0..=100.0).contains(&percentile), "percentile out of range");
    let k = sorted.len();
    let scaled = percentile * (k - 1) as f64;
    if scaled.fract() == 0.0 {
        let scaled = scaled as u128;
        let (j, rem) = ((scaled / 100) as usize, scaled % 100);
        if j + 1 >= k {
            return sorted[k - 1];
        }
        let (lo, hi) = (sorted[j] as u128, sorted[j + 1] as u128);
        return ((lo * 100 + (hi - lo) * rem) / 100) as usize;
    }
    let rank = scaled / 100.0;
    let j = rank.floor() as usize;
    let g = rank - j as f64;
    let hi = sorted[(j + 1).min(k - 1)] as f64;
    (sorted[j] as f64 + g * (hi - sorted[j] as f64)).floor() as usize
}

/// Per-class cap: `max(percentile of the nonzero class counts, floor)`.
pub fn target_count(counts: &[usize], percentile: f64, floor: usize) -> usize {
    let mut c: Vec<usize> = counts.iter().copied().filter(|&c| c > 0).collect();
    if c.is_empty() {
        return floor;
    }
    c.sort_unstable();
    percentile_floor(&c, percentile).max(floor)
}

/// Indices kept after capping every class at [`target_count`]; classes
/// above the cap are downsampled uniformly without replacement.
pub fn balance_indices<R: Rng + ?Sized>(labels: &[usize], percentile: f64, floor: usize, rng: &mut R) -> Vec<usize> {
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut by_class = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let target = target_count(&counts, percentile, floor);
    let mut keep = Vec::new();
    for members in by_class {
        if members.len() <= target {
            keep.extend(members);
        } else {
            keep.extend(sample(rng, members.len(), target).into_iter().map(|j| members[j]));
        }
    }
    keep.sort_unstable();
    keep
}

/// [`balance_indices`] over samples with class labels; regression samples
/// are returned unchanged.
pub fn balance_classes<R: Rng + ?Sized>(
    samples: Vec<ProbeSample>,
    percentile: f64,
    floor: usize,
    rng: &mut R,
) -> Vec<ProbeSample> {
    let labels: Option<Vec<usize>> = samples
        .iter()
        .map(|s| match s.label {
            Label::Class(c) => Some(c),
            Label::Value(_) => None,
        })
        .collect();
    let Some(labels) = labels else { return samples };
    let keep = balance_indices(&labels, percentile, floor, rng);
    let mut samples: Vec<Option<ProbeSample>> = samples.into_iter().map(Some).collect();
    keep.into_iter().map(|i| samples[i].take().expect("unique index")).collect()
}

/// Post-block activations at each input's position, `[layer][input]`.
pub fn capture_inputs<T: Real>(
    model: &Gpt<T>,
    inputs: &[ProbeInput],
    layers: &[usize],
    exec: Exec,
) -> Result<Vec<Vec<Vec<f64>>>, ProbeError> {
    const CHUNK: usize = 32;
    let chunks: Vec<&[ProbeInput]> = inputs.chunks(CHUNK).collect();
    let parts = exec.map_slice(&chunks, |c| {
        let seqs: Vec<&[TokenId]> = c.iter().map(|i| i.input_ids.as_slice()).collect();
        let pos: Vec<usize> = c.iter().map(|i| i.position).collect();
        model.capture_rows(&seqs, &pos, layers)
    });
    let mut out = vec![Vec::with_capacity(inputs.len()); layers.len()];
    for p in parts {
        for (l, vecs) in p?.into_iter().enumerate() {
            out[l].extend(
                vecs.into_iter().map(|v| v.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect::<Vec<f64>>()),
            );
        }
    }
    Ok(out)
}

fn samples_at<T: Real>(
    model: &Gpt<T>,
    inputs: &[ProbeInput],
    layer: usize,
    exec: Exec,
) -> Result<Vec<ProbeSample>, ProbeError> {
    let acts = capture_inputs(model, inputs, &[layer], exec)?.pop().expect("one layer");
    Ok(inputs
        .iter()
        .zip(acts)
        .map(|(i, activation)| ProbeSample {
            activation,
            label: i.label,
            layer,
            hand_id: i.hand_id,
            position: i.position,
        })
        .collect())
}

/// Hand-rank samples at the flop for one layer. Hands that end before the
/// flop are skipped.
pub fn build_handrank_dataset<T: Real>(
    records: &[PhhRecord],
    model: &Gpt<T>,
    layer: usize,
) -> Result<Vec<ProbeSample>, ProbeError> {
    let (inputs, _) = handrank_inputs(&Vocab::new(), records, Street::Flop)?;
    samples_at(model, &inputs, layer, Exec::default())
}

pub fn build_action_dataset<T: Real>(
    records: &[PhhRecord],
    model: &Gpt<T>,
    layer: usize,
    seed: u64,
) -> Result<Vec<ProbeSample>, ProbeError> {
    let inputs = action_inputs(&Vocab::new(), records, seed)?;
    samples_at(model, &inputs, layer, Exec::default())
}

pub fn build_equity_dataset<T: Real>(
    records: &[PhhRecord],
    model: &Gpt<T>,
    layer: usize,
    rollouts: u64,
    seed: u64,
) -> Result<Vec<ProbeSample>, ProbeError> {
    let (inputs, _) = equity_inputs(&Vocab::new(), records, Street::Flop, rollouts, seed, Exec::default())?;
    samples_at(model, &inputs, layer, Exec::default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub task: ProbeTask,
    pub layer: usize,
    pub features: usize,
    pub labeler: serde_json::Value,
    pub seeds: Vec<u64>,
}

/// JSON-lines: the header, then one sample per line.
pub fn write_samples(path: &Path, header: &DatasetHeader, samples: &[ProbeSample]) -> Result<(), ProbeError> {
    let io = |source| ProbeError::Io { path: path.to_path_buf(), source };
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n").map_err(io)?;
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_samples(path: &Path) -> Result<(DatasetHeader, Vec<ProbeSample>), ProbeError> {
    let io = |source| ProbeError::Io { path: path.to_path_buf(), source };
    let mut lines = BufReader::new(fs::File::open(path).map_err(io)?).lines();
    let header: DatasetHeader = match lines.next() {
        Some(l) => serde_json::from_str(&l.map_err(io)?)?,
        None => return Err(ProbeError::Input(format!("{}: empty dataset file", path.display()))),
    };
    let mut samples = Vec::new();
    for l in lines {
        let l = l.map_err(io)?;
        if !l.trim().is_empty() {
            samples.push(serde_json::from_str(&l)?);
        }
    }
    Ok((header, samples))
}

/// Mean with a two-sided 95% Student-t interval half-width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub per_seed: Vec<f64>,
    pub mean: f64,
    /// `None` with fewer than two seeds.
    pub ci95: Option<f64>,
}

impl Stat {
    pub fn new(values: Vec<f64>) -> Stat {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n.max(1) as f64;
        let ci95 = (n >= 2).then(|| {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("dof > 0").inverse_cdf(0.975);
            t * (var / n as f64).sqrt()
        });
        Stat { per_seed: values, mean, ci95 }
    }
}

/// Metrics of one probe kind at one layer over all seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerResult {
    pub layer: usize,
    pub probe: ProbeKind,
    pub accuracy: Option<Stat>,
    pub pearson_r: Option<Stat>,
    pub r2: Option<Stat>,
    /// Rows are true classes, columns predictions (first seed).
    pub confusion: Option<Vec<Vec<usize>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub task: ProbeTask,
    pub street: Street,
    /// Class names in probe output order (classification only).
    pub classes: Vec<String>,
    pub seeds: Vec<u64>,
    pub percentile: f64,
    pub floor: usize,
    pub train_counts: Vec<usize>,
    pub test_counts: Vec<usize>,
    pub train_size: usize,
    pub test_size: usize,
    /// Hands without a probe input (e.g. no flop).
    pub skipped: usize,
    pub layers: Vec<LayerResult>,
}

impl ProbeReport {
    /// `1/C` for classification.
    pub fn chance(&self) -> Option<f64> {
        (!self.classes.is_empty()).then(|| 1.0 / self.classes.len() as f64)
    }

    /// Share of the most frequent test class.
    pub fn majority(&self) -> Option<f64> {
        let total: usize = self.test_counts.iter().sum();
        (total > 0).then(|| *self.test_counts.iter().max().expect("nonempty") as f64 / total as f64)
    }

    pub fn get(&self, layer: usize, probe: ProbeKind) -> Option<&LayerResult> {
        self.layers.iter().find(|r| r.layer == layer && r.probe == probe)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub task: ProbeTask,
    pub street: Street,
    pub layers: Vec<usize>,
    pub seeds: Vec<u64>,
    pub percentile: f64,
    pub floor: usize,
    pub rollouts: u64,
    /// Seed for action choice, equity labels and balancing.
    pub label_seed: u64,
    pub hyper: ProbeHyper,
    pub val_fraction: f64,
    pub max_train: Option<usize>,
    pub max_test: Option<usize>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            task: ProbeTask::HandRank,
            street: Street::Flop,
            layers: vec![0, 1, 2, 3],
            seeds: vec![0, 1, 2, 3, 4],
            percentile: 40.0,
            floor: 10,
            rollouts: 1000,
            label_seed: 0,
            hyper: ProbeHyper::default(),
            val_fraction: 0.1,
            max_train: None,
            max_test: None,
        }
    }
}

/// Probe inputs of `cfg.task` and the number of hands without one.
pub fn task_inputs(
    vocab: &Vocab,
    records: &[PhhRecord],
    cfg: &ProbeConfig,
    exec: Exec,
) -> Result<(Vec<ProbeInput>, usize), ProbeError> {
    match cfg.task {
        ProbeTask::HandRank => handrank_inputs(vocab, records, cfg.street),
        ProbeTask::Action => {
            let v = action_inputs(vocab, records, cfg.label_seed)?;
            let skipped = records.len() - v.len();
            Ok((v, skipped))
        }
        ProbeTask::Equity => equity_inputs(vocab, records, cfg.street, cfg.rollouts, cfg.label_seed, exec),
    }
}

fn class_of(i: &ProbeInput) -> usize {
    match i.label {
        Label::Class(c) => c,
        Label::Value(_) => unreachable!("classification input"),
    }
}

fn cap<R: Rng + ?Sized>(inputs: Vec<ProbeInput>, max: Option<usize>, rng: &mut R) -> Vec<ProbeInput> {
    match max {
        Some(m) if inputs.len() > m => {
            let mut keep = sample(rng, inputs.len(), m).into_vec();
            keep.sort_unstable();
            keep.into_iter().map(|i| inputs[i].clone()).collect()
        }
        _ => inputs,
    }
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// `1 - SS_res / SS_tot`.
pub fn r_squared(pred: &[f64], truth: &[f64]) -> f64 {
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|y| (y - mean).powi(2)).sum();
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, y)| (p - y).powi(2)).sum();
    if ss_tot == 0.0 {
        0.0
    } else {
        1.0 - ss_res / ss_tot
    }
}

pub fn pearson_r(pred: &[f64], truth: &[f64]) -> f64 {
    pearson(pred, truth)
}

/// Accuracy and confusion matrix (rows true class, columns prediction).
pub fn classification_metrics(pred: &[usize], truth: &[usize], classes: usize) -> (f64, Vec<Vec<usize>>) {
    let mut confusion = vec![vec![0; classes]; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        confusion[t][p] += 1;
    }
    let correct = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    (correct as f64 / truth.len().max(1) as f64, confusion)
}

struct Evaluated {
    metric: f64,
    r2: f64,
    confusion: Option<Vec<Vec<usize>>>,
}

fn evaluate_probe(probe: &Probe, test: &Dataset) -> Evaluated {
    match &test.targets {
        Targets::Class { labels, classes } => {
            let (acc, conf) = classification_metrics(&probe.predict_classes(&test.x), labels, *classes);
            Evaluated { metric: acc, r2: f64::NAN, confusion: Some(conf) }
        }
        Targets::Value(v) => {
            let pred = probe.predict_values(&test.x);
            Evaluated { metric: pearson(&pred, v), r2: r_squared(&pred, v), confusion: None }
        }
    }
}

/// Builds the datasets, captures activations at every requested layer,
/// trains linear and MLP probes for every seed, and evaluates them on the
/// test hands.
pub fn run_probes<T: Real>(
    model: &Gpt<T>,
    vocab: &Vocab,
    train_records: &[PhhRecord],
    test_records: &[PhhRecord],
    cfg: &ProbeConfig,
    exec: Exec,
) -> Result<ProbeReport, ProbeError> {
    if cfg.seeds.is_empty() || cfg.layers.is_empty() {
        return Err(ProbeError::Input("at least one seed and one layer are required".into()));
    }
    let (train_in, skip_a) = task_inputs(vocab, train_records, cfg, exec)?;
    let (test_in, skip_b) = task_inputs(vocab, test_records, cfg, exec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.label_seed, 0xba1a));

    let (train_in, test_in, class_map, classes) = if cfg.task.is_classification() {
        let labels: Vec<usize> = train_in.iter().map(class_of).collect();
        let keep = balance_indices(&labels, cfg.percentile, cfg.floor, &mut rng);
        let train_in: Vec<ProbeInput> = keep.into_iter().map(|i| train_in[i].clone()).collect();
        let mut present: Vec<usize> = train_in.iter().map(class_of).collect();
        present.sort_unstable();
        present.dedup();
        let test_in: Vec<ProbeInput> = test_in.into_iter().filter(|i| present.contains(&class_of(i))).collect();
        let labels: Vec<usize> = test_in.iter().map(class_of).collect();
        let keep = balance_indices(&labels, cfg.percentile, cfg.floor, &mut rng);
        let test_in: Vec<ProbeInput> = keep.into_iter().map(|i| test_in[i].clone()).collect();
        let names = present
            .iter()
            .map(|&c| match cfg.task {
                ProbeTask::HandRank => HandCategory::from_index(c).expect("category").name().to_string(),
                _ => ACTION_CLASSES[c].to_string(),
            })
            .collect();
        (train_in, test_in, present, names)
    } else {
        (cap(train_in, cfg.max_train, &mut rng), cap(test_in, cfg.max_test, &mut rng), Vec::new(), Vec::new())
    };
    let n_classes = classes.len();
    if cfg.task.is_classification() && n_classes < 2 {
        return Err(ProbeError::Degenerate(format!("{} class(es) after balancing", n_classes)));
    }
    if test_in.is_empty() {
        return Err(ProbeError::Degenerate("no test samples".into()));
    }
    let targets = |inputs: &[ProbeInput]| -> Targets {
        if cfg.task.is_classification() {
            let labels = inputs.iter().map(|i| class_map.binary_search(&class_of(i)).expect("mapped class")).collect();
            Targets::Class { labels, classes: n_classes }
        } else {
            Targets::Value(inputs.iter().map(|i| if let Label::Value(v) = i.label { v } else { f64::NAN }).collect())
        }
    };
    let counts = |t: &Targets| match t {
        Targets::Class { labels, classes } => {
            let mut c = vec![0; *classes];
            for &l in labels {
                c[l] += 1;
            }
            c
        }
        Targets::Value(_) => Vec::new(),
    };
    let (train_t, test_t) = (targets(&train_in), targets(&test_in));
    let train_acts = capture_inputs(model, &train_in, &cfg.layers, exec)?;
    let test_acts = capture_inputs(model, &test_in, &cfg.layers, exec)?;
    let d = model.config().model_dim;
    let datasets: Vec<(Dataset, Dataset)> = train_acts
        .into_iter()
        .zip(test_acts)
        .map(|(a, b)| {
            (
                Dataset { x: a.concat(), features: d, targets: train_t.clone() },
                Dataset { x: b.concat(), features: d, targets: test_t.clone() },
            )
        })
        .collect();

    let kinds = [ProbeKind::Linear, ProbeKind::Mlp];
    let jobs: Vec<(usize, ProbeKind, u64)> = (0..cfg.layers.len())
        .flat_map(|l| kinds.iter().flat_map(move |&k| cfg.seeds.iter().map(move |&s| (l, k, s))))
        .collect();
    let results = exec.map_slice(&jobs, |&(l, kind, seed)| -> Result<Evaluated, ProbeError> {
        let (train_all, test) = &datasets[l];
        let (tr, va) = split_rows(train_all.len(), cfg.val_fraction, seed);
        let probe = train_probe(kind, &fit::subset(train_all, &tr), &fit::subset(train_all, &va), seed, &cfg.hyper)?;
        Ok(evaluate_probe(&probe, test))
    });
    let results: Vec<Evaluated> = results.into_iter().collect::<Result<_, _>>()?;

    let mut layers = Vec::new();
    for (li, &layer) in cfg.layers.iter().enumerate() {
        for kind in kinds {
            let rs: Vec<&Evaluated> =
                jobs.iter().zip(&results).filter(|((l, k, _), _)| *l == li && *k == kind).map(|(_, r)| r).collect();
            let metric = Stat::new(rs.iter().map(|r| r.metric).collect());
            let (accuracy, pearson_r, r2) = if cfg.task.is_classification() {
                (Some(metric), None, None)
            } else {
                (None, Some(metric), Some(Stat::new(rs.iter().map(|r| r.r2).collect())))
            };
            layers.push(LayerResult {
                layer,
                probe: kind,
                accuracy,
                pearson_r,
                r2,
                confusion: rs[0].confusion.clone(),
            });
        }
    }
    Ok(ProbeReport {
        task: cfg.task,
        street: cfg.street,
        classes,
        seeds: cfg.seeds.clone(),
        percentile: cfg.percentile,
        floor: cfg.floor,
        train_counts: counts(&train_t),
        test_counts: counts(&test_t),
        train_size: train_in.len(),
        test_size: test_in.len(),
        skipped: skip_a + skip_b,
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phh::parse;

    #[test]
    fn equal_counts_keep_everything() {
        assert_eq!(target_count(&[100, 100, 100], 40.0, 10), 100);
        let labels: Vec<usize> = (0..300).map(|i| i % 3).collect();
        let keep = balance_indices(&labels, 40.0, 10, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(keep.len(), 300);
    }

    #[test]
    fn floor_applies() {
        assert_eq!(target_count(&[1, 4, 7, 10], 40.0, 10), 10);
    }

    #[test]
    fn interpolates_linearly() {
        // Ranks 0..4, position 0.4 * 3 = 1.2: 20 + 0.2 * (60 - 20) = 28.
        assert_eq!(target_count(&[60, 20, 100, 5], 40.0, 10), 28);
    }

    #[test]
    fn balancing_caps_large_classes() {
        let labels: Vec<usize> = (0..1000)
            .map(|i| {
                if i < 900 {
                    0
                } else if i < 980 {
                    1
                } else {
                    2
                }
            })
            .collect();
        let keep = balance_indices(&labels, 40.0, 10, &mut ChaCha8Rng::seed_from_u64(2));
        let count = |c| keep.iter().filter(|&&i| labels[i] == c).count();
        // Sorted counts 20, 80, 900: position 0.8 gives 20 + 0.8 * 60 = 68.
        assert_eq!((count(0), count(1), count(2)), (68, 68, 20));
    }

    #[test]
    fn quads_on_flop_label() {
        let text = "d dh p1 2c2d\nd dh p2 AhKh\nd dh p3 3c4c\nd dh p4 5c6c\nd dh p5 7c8c\nd dh p6 9cTc\n\
                    p3 f\np4 f\np5 f\np6 f\np1 cc\np2 cc\nd db 2h2s9d\n";
        let rec = parse(text).unwrap();
        let (inputs, skipped) = handrank_inputs(&Vocab::new(), &[rec], Street::Flop).unwrap();
        assert_eq!(skipped, 0);
        assert_eq!(inputs[0].label, Label::Class(HandCategory::FourOfAKind.index()));
        let v = Vocab::new();
        assert_eq!(inputs[0].input_ids[inputs[0].position], v.id("9d").unwrap());
    }

    #[test]
    fn action_token_is_gapped() {
        let text = "d dh p1 2c2d\nd dh p2 AhKh\nd dh p3 3c4c\nd dh p4 5c6c\nd dh p5 7c8c\nd dh p6 9cTc\np3 f\n";
        let rec = parse(text).unwrap();
        let inputs = action_inputs(&Vocab::new(), &[rec], 0).unwrap();
        assert_eq!(inputs[0].label, Label::Class(0));
        assert_eq!(inputs[0].input_ids.last(), Some(&GAP));
        assert_eq!(inputs[0].input_ids[inputs[0].position - 1], Vocab::new().id("p3").unwrap());
    }

    #[test]
    fn ci_uses_student_t() {
        let s = Stat::new(vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(s.mean, 3.0);
        // t(0.975, 4) = 2.776445105
        assert!((s.ci95.unwrap() - 2.776445105 * (2.5f64 / 5.0).sqrt()).abs() < 1e-8);
        assert_eq!(Stat::new(vec![1.0]).ci95, None);
    }

    #[test]
    fn metric_definitions() {
        let (acc, conf) = classification_metrics(&[0, 1, 2], &[0, 1, 2], 3);
        assert_eq!(acc, 1.0);
        assert_eq!(conf, vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]]);
        let (acc, _) = classification_metrics(&[0; 4], &[0, 1, 2, 3], 4);
        assert_eq!(acc, 0.25);
        assert_eq!(r_squared(&[2.5; 4], &[1.0, 2.0, 3.0, 4.0]), 0.0);
    }
}
