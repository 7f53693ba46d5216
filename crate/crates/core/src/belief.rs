//! Belief states of finite POMDPs and the two-coin log-likelihood-ratio task.
//!
//! Time convention: `S_0 ~ b_0`; at each step `t >= 1` an action
//! `A_t ~ pi` is drawn, then `S_t ~ T(. | S_{t-1}, A_t)` and
//! `O_t ~ Omega(. | S_t)`. A history is the list of `(A_t, O_t)` pairs and
//! `b_t(s) = Pr(S_t = s | H_t)`. The policy is a fixed distribution over
//! actions, independent of the history.
//!
//! For every future event `F` over the next `horizon` steps there is a
//! vector `v_F(s) = Pr(F | S_t = s)` with `Pr(F | H_t) = <b_t, v_F>`.
//! [`verify_linearity`] checks this against a brute-force enumeration of
//! full state trajectories that never uses the belief filter.

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AdamW, Gpt, ModelConfig, ModelError, OptimState, Real};
use crate::par::{mix_seed, Exec};
use crate::probes::{split_rows, train_probe, Dataset, ProbeError, ProbeHyper, ProbeKind, Targets};
use crate::tokenizer::{TokenId, TokenizedExample};

/// Normalization tolerance for distributions.
pub const NORM_TOL: f64 = 1e-12;
/// Largest number of enumerated branches.
pub const ENUM_BUDGET: u64 = 50_000_000;

#[derive(Debug, Error)]
pub enum BeliefError {
    #[error("invalid POMDP: {0}")]
    Invalid(String),
    #[error("observation {observation} after action {action} has zero probability")]
    ImpossibleObservation { action: usize, observation: usize },
    #[error("enumeration needs {needed} branches, budget is {budget}")]
    Budget { needed: u64, budget: u64 },
    #[error("degenerate coin task: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
}

/// One step of a history or future: `(action, observation)`.
pub type Step = (usize, usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinitePomdp {
    pub states: usize,
    pub observations: usize,
    pub actions: usize,
    /// `transition[a][s][s']`.
    pub transition: Vec<Vec<Vec<f64>>>,
    /// `observation[s][o]`.
    pub observation: Vec<Vec<f64>>,
    /// `policy[a]`.
    pub policy: Vec<f64>,
    pub initial: Vec<f64>,
}

fn check_dist(name: &str, p: &[f64], len: usize) -> Result<(), BeliefError> {
    if p.len() != len {
        return Err(BeliefError::Invalid(format!("{name} has {} entries, expected {len}", p.len())));
    }
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(BeliefError::Invalid(format!("{name} has a negative or non-finite entry")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > NORM_TOL {
        return Err(BeliefError::Invalid(format!("{name} sums to {sum}")));
    }
    Ok(())
}

fn random_dist<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.05).collect();
    let sum: f64 = raw.iter().sum();
    let mut p: Vec<f64> = raw.iter().map(|x| x / sum).collect();
    let rest: f64 = p[1..].iter().sum();
    p[0] = 1.0 - rest;
    p
}

impl FinitePomdp {
    pub fn validate(&self) -> Result<(), BeliefError> {
        let (ns, no, na) = (self.states, self.observations, self.actions);
        if ns == 0 || no == 0 || na == 0 {
            return Err(BeliefError::Invalid("states, observations and actions must be nonempty".into()));
        }
        if self.transition.len() != na {
            return Err(BeliefError::Invalid(format!(
                "transition has {} actions, expected {na}",
                self.transition.len()
            )));
        }
        for (a, t) in self.transition.iter().enumerate() {
            if t.len() != ns {
                return Err(BeliefError::Invalid(format!("transition[{a}] has {} rows, expected {ns}", t.len())));
            }
            for (s, row) in t.iter().enumerate() {
                check_dist(&format!("transition[{a}][{s}]"), row, ns)?;
            }
        }
        if self.observation.len() != ns {
            return Err(BeliefError::Invalid(format!(
                "observation has {} rows, expected {ns}",
                self.observation.len()
            )));
        }
        for (s, row) in self.observation.iter().enumerate() {
            check_dist(&format!("observation[{s}]"), row, no)?;
        }
        check_dist("policy", &self.policy, na)?;
        check_dist("initial", &self.initial, ns)
    }

    /// Three hidden states, two observations, one action.
    pub fn default_instance() -> FinitePomdp {
        FinitePomdp {
            states: 3,
            observations: 2,
            actions: 1,
            transition: vec![vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.6, 0.3], vec![0.25, 0.25, 0.5]]],
            observation: vec![vec![0.9, 0.1], vec![0.5, 0.5], vec![0.2, 0.8]],
            policy: vec![1.0],
            initial: vec![0.5, 0.3, 0.2],
        }
    }

    /// Strictly positive random distributions everywhere.
    pub fn random<R: Rng + ?Sized>(states: usize, observations: usize, actions: usize, rng: &mut R) -> FinitePomdp {
        FinitePomdp {
            states,
            observations,
            actions,
            transition: (0..actions).map(|_| (0..states).map(|_| random_dist(states, rng)).collect()).collect(),
            observation: (0..states).map(|_| random_dist(observations, rng)).collect(),
            policy: random_dist(actions, rng),
            initial: random_dist(states, rng),
        }
    }

    /// Every history of exactly `len` steps.
    pub fn histories(&self, len: usize) -> Vec<Vec<Step>> {
        let mut out = vec![Vec::new()];
        for _ in 0..len {
            out = out
                .into_iter()
                .flat_map(|h| {
                    (0..self.actions).flat_map(move |a| {
                        let h = h.clone();
                        (0..self.observations).map(move |o| {
                            let mut h = h.clone();
                            h.push((a, o));
                            h
                        })
                    })
                })
                .collect();
        }
        out
    }
}

/// A probability vector over latent states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefState {
    pub b: Vec<f64>,
}

impl BeliefState {
    pub fn initial(pomdp: &FinitePomdp) -> BeliefState {
        BeliefState { b: pomdp.initial.clone() }
    }

    pub fn dot(&self, v: &[f64]) -> f64 {
        self.b.iter().zip(v).map(|(b, v)| b * v).sum()
    }
}

/// Exact Bayes filter step: `b'(s') ∝ Omega(o|s') * sum_s T(s'|s,a) b(s)`.
pub fn belief_update(
    pomdp: &FinitePomdp,
    b: &BeliefState,
    action: usize,
    observation: usize,
) -> Result<BeliefState, BeliefError> {
    if action >= pomdp.actions || observation >= pomdp.observations {
        return Err(BeliefError::Invalid(format!("step ({action}, {observation}) out of range")));
    }
    let t = &pomdp.transition[action];
    let mut next: Vec<f64> = (0..pomdp.states)
        .map(|s2| pomdp.observation[s2][observation] * (0..pomdp.states).map(|s| t[s][s2] * b.b[s]).sum::<f64>())
        .collect();
    let z: f64 = next.iter().sum();
    if z <= 0.0 {
        return Err(BeliefError::ImpossibleObservation { action, observation });
    }
    next.iter_mut().for_each(|x| *x /= z);
    Ok(BeliefState { b: next })
}

/// `b_t` after filtering the whole history from `b_0`.
pub fn filter(pomdp: &FinitePomdp, history: &[Step]) -> Result<BeliefState, BeliefError> {
    history.iter().try_fold(BeliefState::initial(pomdp), |b, &(a, o)| belief_update(pomdp, &b, a, o))
}

fn check_budget(needed: f64) -> Result<(), BeliefError> {
    if needed > ENUM_BUDGET as f64 {
        return Err(BeliefError::Budget { needed: needed.min(u64::MAX as f64) as u64, budget: ENUM_BUDGET });
    }
    Ok(())
}

/// `v_F(s) = Pr(F | S_t = s)` by enumerating every future
/// `(action, next state, observation)` sequence of length `horizon`.
pub fn event_vector(
    pomdp: &FinitePomdp,
    event: &dyn Fn(&[Step]) -> bool,
    horizon: usize,
) -> Result<Vec<f64>, BeliefError> {
    let branch = (pomdp.actions * pomdp.states * pomdp.observations) as f64;
    check_budget(pomdp.states as f64 * branch.powi(horizon as i32))?;
    fn go(p: &FinitePomdp, f: &dyn Fn(&[Step]) -> bool, s: usize, left: usize, path: &mut Vec<Step>) -> f64 {
        if left == 0 {
            return if f(path) { 1.0 } else { 0.0 };
        }
        let mut total = 0.0;
        for a in 0..p.actions {
            for s2 in 0..p.states {
                let w = p.policy[a] * p.transition[a][s][s2];
                if w == 0.0 {
                    continue;
                }
                for o in 0..p.observations {
                    let w = w * p.observation[s2][o];
                    if w == 0.0 {
                        continue;
                    }
                    path.push((a, o));
                    total += w * go(p, f, s2, left - 1, path);
                    path.pop();
                }
            }
        }
        total
    }
    Ok((0..pomdp.states).map(|s| go(pomdp, event, s, horizon, &mut Vec::new())).collect())
}

/// Weighted state trajectories of the whole history, by depth-first
/// enumeration. Calls `leaf(weight, final state)` for every trajectory
/// consistent with the history.
fn enumerate_paths(pomdp: &FinitePomdp, history: &[Step], leaf: &mut dyn FnMut(f64, usize)) {
    fn go(p: &FinitePomdp, h: &[Step], s: usize, w: f64, leaf: &mut dyn FnMut(f64, usize)) {
        let Some((&(a, o), rest)) = h.split_first() else {
            leaf(w, s);
            return;
        };
        for s2 in 0..p.states {
            let w2 = w * p.policy[a] * p.transition[a][s][s2] * p.observation[s2][o];
            if w2 != 0.0 {
                go(p, rest, s2, w2, leaf);
            }
        }
    }
    for s0 in 0..pomdp.states {
        if pomdp.initial[s0] != 0.0 {
            go(pomdp, history, s0, pomdp.initial[s0], leaf);
        }
    }
}

/// `Pr(S_t | H_t)` by enumerating full trajectories.
pub fn brute_posterior(pomdp: &FinitePomdp, history: &[Step]) -> Result<Vec<f64>, BeliefError> {
    check_budget((pomdp.states as f64).powi(history.len() as i32 + 1))?;
    let mut post = vec![0.0; pomdp.states];
    enumerate_paths(pomdp, history, &mut |w, s| post[s] += w);
    let z: f64 = post.iter().sum();
    if z <= 0.0 {
        let (a, o) = history.last().copied().unwrap_or((0, 0));
        return Err(BeliefError::ImpossibleObservation { action: a, observation: o });
    }
    Ok(post.into_iter().map(|x| x / z).collect())
}

/// Every `(action, observation)` sequence of length `horizon`, in
/// lexicographic order. Index `i` of this list is atom `i`.
pub fn future_atoms(pomdp: &FinitePomdp, horizon: usize) -> Vec<Vec<Step>> {
    pomdp.histories(horizon)
}

/// `Pr(future = atom | H_t)` for every atom, by enumerating full
/// trajectories of history and future together.
pub fn brute_atom_probs(pomdp: &FinitePomdp, history: &[Step], horizon: usize) -> Result<Vec<f64>, BeliefError> {
    let atoms = future_atoms(pomdp, horizon);
    check_budget((pomdp.states as f64).powi((history.len() + horizon) as i32 + 1) * atoms.len() as f64)?;
    let mut joint = vec![0.0; atoms.len()];
    let mut z = 0.0;
    for (i, atom) in atoms.iter().enumerate() {
        let mut full = history.to_vec();
        full.extend_from_slice(atom);
        enumerate_paths(pomdp, &full, &mut |w, _| joint[i] += w);
    }
    enumerate_paths(pomdp, history, &mut |w, _| z += w);
    if z <= 0.0 {
        let (a, o) = history.last().copied().unwrap_or((0, 0));
        return Err(BeliefError::ImpossibleObservation { action: a, observation: o });
    }
    Ok(joint.into_iter().map(|j| j / z).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearityReport {
    pub histories: usize,
    pub events: usize,
    pub horizon: usize,
    /// Max `|Pr_brute(F | H_t) - <b_t, v_F>|`.
    pub max_error: f64,
    /// Max `|sum_o <b_t, v_{O_{t+1}=o}> - 1|`.
    pub max_normalization_error: f64,
    /// Max `|b_t - Pr_brute(S_t | H_t)|`.
    pub max_filter_error: f64,
}

/// Every subset of the horizon-`horizon` atoms, as bit masks. At most 16
/// atoms.
pub fn all_events(pomdp: &FinitePomdp, horizon: usize) -> Result<Vec<u64>, BeliefError> {
    let n = future_atoms(pomdp, horizon).len();
    if n > 16 {
        return Err(BeliefError::Budget { needed: 1u64 << n.min(63), budget: 1 << 16 });
    }
    Ok((0..1u64 << n).collect())
}

/// Compares `<b_t, v_F>` with brute-force `Pr(F | H_t)` for every history
/// and every event, where event `k` is the set of atoms whose bit is set
/// in `events[k]`.
pub fn verify_linearity(
    pomdp: &FinitePomdp,
    histories: &[Vec<Step>],
    events: &[u64],
    horizon: usize,
    exec: Exec,
) -> Result<LinearityReport, BeliefError> {
    pomdp.validate()?;
    let atoms = future_atoms(pomdp, horizon);
    let member = |mask: u64, path: &[Step]| atoms.iter().position(|a| a == path).is_some_and(|i| mask >> i & 1 == 1);
    let vectors: Vec<Vec<f64>> =
        events.iter().map(|&m| event_vector(pomdp, &|p: &[Step]| member(m, p), horizon)).collect::<Result<_, _>>()?;
    let next_obs: Vec<Vec<f64>> =
        (0..pomdp.observations).map(|o| event_vector(pomdp, &|p: &[Step]| p[0].1 == o, 1)).collect::<Result<_, _>>()?;
    let per_history = exec.map_slice(histories, |h| -> Result<Option<(f64, f64, f64)>, BeliefError> {
        let b = match filter(pomdp, h) {
            Ok(b) => b,
            Err(BeliefError::ImpossibleObservation { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        let post = brute_posterior(pomdp, h)?;
        let filter_err = b.b.iter().zip(&post).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let probs = brute_atom_probs(pomdp, h, horizon)?;
        let mut err = 0.0f64;
        for (&m, v) in events.iter().zip(&vectors) {
            let brute: f64 = (0..atoms.len()).filter(|i| m >> i & 1 == 1).map(|i| probs[i]).sum();
            err = err.max((brute - b.dot(v)).abs());
        }
        let norm = (next_obs.iter().map(|v| b.dot(v)).sum::<f64>() - 1.0).abs();
        Ok(Some((err, norm, filter_err)))
    });
    let mut report = LinearityReport {
        histories: 0,
        events: events.len(),
        horizon,
        max_error: 0.0,
        max_normalization_error: 0.0,
        max_filter_error: 0.0,
    };
    for r in per_history {
        if let Some((e, n, f)) = r? {
            report.histories += 1;
            report.max_error = report.max_error.max(e);
            report.max_normalization_error = report.max_normalization_error.max(n);
            report.max_filter_error = report.max_filter_error.max(f);
        }
    }
    Ok(report)
}

/// All histories of length `0..=max_len`.
pub fn histories_upto(pomdp: &FinitePomdp, max_len: usize) -> Vec<Vec<Step>> {
    (0..=max_len).flat_map(|l| pomdp.histories(l)).collect()
}

/// Log-likelihood-ratio trajectory of the two-coin task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlrTrace {
    pub p0: f64,
    pub p1: f64,
    /// `true` is heads.
    pub flips: Vec<bool>,
    /// `eta[t]` after `t` flips; `eta[0]` is the prior log-odds.
    pub eta: Vec<f64>,
}

fn check_coins(p0: f64, p1: f64) -> Result<(), BeliefError> {
    if !(p0 > 0.0 && p0 < 1.0 && p1 > 0.0 && p1 < 1.0) {
        return Err(BeliefError::Degenerate(format!("coin probabilities must lie in (0, 1), got {p0} and {p1}")));
    }
    if p0 == p1 {
        return Err(BeliefError::Degenerate("p0 = p1 makes the log-likelihood ratio constant".into()));
    }
    Ok(())
}

/// `eta_t = eta_{t-1} + log(p1/p0)` on heads and
/// `+ log((1-p1)/(1-p0))` on tails, from `eta_0 = log(prior/(1-prior))`
/// where `prior = Pr(Z = 1)`.
pub fn llr_trace(p0: f64, p1: f64, prior: f64, flips: &[bool]) -> Result<LlrTrace, BeliefError> {
    check_coins(p0, p1)?;
    let (heads, tails) = ((p1 / p0).ln(), ((1.0 - p1) / (1.0 - p0)).ln());
    let mut eta = vec![(prior / (1.0 - prior)).ln()];
    for &f in flips {
        let last = *eta.last().expect("nonempty");
        eta.push(last + if f { heads } else { tails });
    }
    Ok(LlrTrace { p0, p1, flips: flips.to_vec(), eta })
}

/// `log(Pr(Z=1 | h) / Pr(Z=0 | h))` from the two posteriors.
pub fn posterior_log_odds(p0: f64, p1: f64, prior: f64, flips: &[bool]) -> f64 {
    let lik = |p: f64| flips.iter().map(|&f| if f { p } else { 1.0 - p }).product::<f64>();
    let (a, b) = (prior * lik(p1), (1.0 - prior) * lik(p0));
    let (post1, post0) = (a / (a + b), b / (a + b));
    (post1 / post0).ln()
}

pub const COIN_PAD: TokenId = 0;
pub const COIN_BOS: TokenId = 1;
pub const COIN_HEADS: TokenId = 2;
pub const COIN_TAILS: TokenId = 3;
pub const COIN_VOCAB: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoinConfig {
    pub p0: f64,
    pub p1: f64,
    /// `Pr(Z = 1)`.
    pub prior: f64,
    pub seq_len: usize,
    pub corpus_size: usize,
    /// Held-out sequences used for probing.
    pub probe_sequences: usize,
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamW,
    pub max_steps: Option<u64>,
    pub shard_size: usize,
    pub seed: u64,
    pub probe_hyper: ProbeHyper,
}

impl Default for CoinConfig {
    fn default() -> Self {
        CoinConfig {
            p0: 0.3,
            p1: 0.7,
            prior: 0.5,
            seq_len: 64,
            corpus_size: 100_000,
            probe_sequences: 1000,
            model: ModelConfig {
                layers: 2,
                heads: 2,
                model_dim: 32,
                mlp_dim: 128,
                context_len: 65,
                vocab_size: COIN_VOCAB,
                seed: 0,
            },
            epochs: 1,
            batch_size: 64,
            optimizer: AdamW { lr: 3e-3, ..AdamW::default() },
            max_steps: None,
            shard_size: 16,
            seed: 0,
            probe_hyper: ProbeHyper { batch: 512, max_epochs: 100, ..ProbeHyper::default() },
        }
    }
}

/// Coin identity and flips of sequence `index`.
pub fn coin_sequence(cfg: &CoinConfig, stream: u64, index: u64) -> (bool, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(cfg.seed, stream), index));
    let z = rng.random::<f64>() < cfg.prior;
    let p = if z { cfg.p1 } else { cfg.p0 };
    (z, (0..cfg.seq_len).map(|_| rng.random::<f64>() < p).collect())
}

pub fn coin_tokens(flips: &[bool]) -> Vec<TokenId> {
    std::iter::once(COIN_BOS).chain(flips.iter().map(|&f| if f { COIN_HEADS } else { COIN_TAILS })).collect()
}

/// Next-flip prediction: every flip is a target.
pub fn coin_example(flips: &[bool]) -> TokenizedExample {
    let ids = coin_tokens(flips);
    let loss_mask = (0..ids.len()).map(|i| i > 0).collect();
    TokenizedExample { target_ids: ids.clone(), input_ids: ids, loss_mask, gap_positions: Vec::new() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoinReport {
    pub p0: f64,
    pub p1: f64,
    pub seq_len: usize,
    pub corpus_size: usize,
    pub steps: u64,
    pub final_train_loss: f64,
    /// Max `|eta_t - posterior log-odds|` over every probed prefix.
    pub max_recurrence_error: f64,
    /// Held-out Pearson r of the linear probe, one per layer.
    pub layer_r: Vec<f64>,
    pub best_layer: usize,
    pub best_r: f64,
}

const TRAIN_STREAM: u64 = 1;
const PROBE_STREAM: u64 = 2;

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    crate::probes::pearson_r(a, b)
}

/// Trains the tiny transformer on next-flip prediction, then fits a linear
/// probe from each layer's post-block activations to `eta_t` and reports
/// held-out Pearson r.
pub fn coin_task<T: Real>(
    cfg: &CoinConfig,
    exec: Exec,
    on_step: &mut dyn FnMut(u64, f64),
) -> Result<CoinReport, BeliefError> {
    check_coins(cfg.p0, cfg.p1)?;
    if cfg.model.vocab_size != COIN_VOCAB || cfg.model.context_len < cfg.seq_len + 1 {
        return Err(BeliefError::Invalid("coin model needs vocab 4 and context >= seq_len + 1".into()));
    }
    let mut model = Gpt::<T>::new(cfg.model)?;
    let groups: Vec<(std::ops::Range<usize>, bool)> =
        model.param_info().iter().map(|p| (p.range(), p.shape.len() == 2)).collect();
    let mut optim = OptimState::new(model.num_params(), cfg.optimizer);
    let mut step = 0u64;
    let mut last = f64::NAN;
    'train: for epoch in 0..cfg.epochs {
        let mut order: Vec<u64> = (0..cfg.corpus_size as u64).collect();
        rand::seq::SliceRandom::shuffle(
            &mut order[..],
            &mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 100 + epoch as u64)),
        );
        for batch in order.chunks(cfg.batch_size.max(1)) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'train;
            }
            let examples: Vec<TokenizedExample> =
                batch.iter().map(|&i| coin_example(&coin_sequence(cfg, TRAIN_STREAM, i).1)).collect();
            let count: usize = examples.iter().map(|e| e.len() - 1).sum();
            let scale = T::lit(1.0 / count as f64);
            let shards: Vec<&[TokenizedExample]> = examples.chunks(cfg.shard_size.max(1)).collect();
            let m = &model;
            let parts = exec.map_slice(&shards, |s| {
                let refs: Vec<&TokenizedExample> = s.iter().collect();
                let mut g = vec![T::zero(); m.num_params()];
                m.examples_loss(&refs, Some((&mut g, scale))).map(|(l, _)| (l, g))
            });
            let mut grad = vec![T::zero(); model.num_params()];
            let mut sum = 0.0;
            for p in parts {
                let (l, g) = p?;
                sum += l;
                crate::model::add_into(&mut grad, &g);
            }
            last = sum / count as f64;
            if !last.is_finite() {
                return Err(ModelError::NonFinite { step, epoch, batch: 0, last_loss: None }.into());
            }
            optim.update(&mut model.params, &grad, &groups);
            step += 1;
            on_step(step, last);
        }
    }

    let seqs: Vec<Vec<bool>> = (0..cfg.probe_sequences as u64).map(|i| coin_sequence(cfg, PROBE_STREAM, i).1).collect();
    let mut max_recurrence_error = 0.0f64;
    let mut etas = Vec::with_capacity(seqs.len());
    for s in &seqs {
        let tr = llr_trace(cfg.p0, cfg.p1, cfg.prior, s)?;
        for t in 0..=s.len() {
            let direct = posterior_log_odds(cfg.p0, cfg.p1, cfg.prior, &s[..t]);
            max_recurrence_error = max_recurrence_error.max((tr.eta[t] - direct).abs());
        }
        etas.push(tr.eta);
    }
    let layers = cfg.model.layers;
    let d = cfg.model.model_dim;
    let acts = exec.map_slice(&seqs, |s| model.forward_with_activations(&coin_tokens(s)).map(|(_, a)| a));
    let mut x = vec![Vec::new(); layers];
    let mut y = Vec::new();
    let mut owner = Vec::new();
    for (i, a) in acts.into_iter().enumerate() {
        let a = a?;
        for (t, &eta) in etas[i].iter().enumerate().take(cfg.seq_len + 1).skip(1) {
            for (l, tensor) in a.iter().enumerate() {
                x[l].extend(tensor.data[t * d..(t + 1) * d].iter().map(|v| v.to_f64().unwrap_or(f64::NAN)));
            }
            y.push(eta);
            owner.push(i);
        }
    }
    // Split by sequence so no prefix of a test sequence is seen in training.
    let (_, test_seq) = split_rows(seqs.len(), 0.2, mix_seed(cfg.seed, 7));
    let mut in_test = vec![false; seqs.len()];
    test_seq.iter().for_each(|&i| in_test[i] = true);
    let (mut tr_rows, mut te_rows) = (Vec::new(), Vec::new());
    for (r, &o) in owner.iter().enumerate() {
        if in_test[o] {
            te_rows.push(r);
        } else {
            tr_rows.push(r);
        }
    }
    let val_cut = tr_rows.len() / 10;
    let rows = |xs: &[f64], idx: &[usize]| -> Dataset {
        Dataset {
            x: idx.iter().flat_map(|&r| xs[r * d..(r + 1) * d].iter().copied()).collect(),
            features: d,
            targets: Targets::Value(idx.iter().map(|&r| y[r]).collect()),
        }
    };
    let layer_r: Vec<f64> = exec
        .map(layers, |l| -> Result<f64, BeliefError> {
            let val = rows(&x[l], &tr_rows[..val_cut]);
            let train = rows(&x[l], &tr_rows[val_cut..]);
            let test = rows(&x[l], &te_rows);
            let probe = train_probe(ProbeKind::Linear, &train, &val, cfg.seed, &cfg.probe_hyper)?;
            let Targets::Value(truth) = &test.targets else { unreachable!("regression targets") };
            Ok(pearson(&probe.predict_values(&test.x), truth))
        })
        .into_iter()
        .collect::<Result<_, _>>()?;
    let (best_layer, best_r) =
        layer_r.iter().copied().enumerate().fold((0, f64::NEG_INFINITY), |b, (l, r)| if r > b.1 { (l, r) } else { b });
    Ok(CoinReport {
        p0: cfg.p0,
        p1: cfg.p1,
        seq_len: cfg.seq_len,
        corpus_size: cfg.corpus_size,
        steps: step,
        final_train_loss: last,
        max_recurrence_error,
        layer_r,
        best_layer,
        best_r,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn revealing_observation_gives_one_hot() {
        let p = FinitePomdp {
            states: 3,
            observations: 3,
            actions: 1,
            transition: vec![vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]],
            observation: vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
            policy: vec![1.0],
            initial: vec![0.2, 0.3, 0.5],
        };
        let b = belief_update(&p, &BeliefState::initial(&p), 0, 2).unwrap();
        assert_eq!(b.b, vec![0.0, 0.0, 1.0]);
        assert!(matches!(belief_update(&p, &b, 0, 0), Err(BeliefError::ImpossibleObservation { .. })));
    }

    #[test]
    fn uninformative_observation_keeps_belief() {
        let mut p = FinitePomdp::default_instance();
        p.transition = vec![vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]];
        p.observation = vec![vec![0.5, 0.5]; 3];
        let b = belief_update(&p, &BeliefState::initial(&p), 0, 1).unwrap();
        for (x, y) in b.b.iter().zip(&p.initial) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn certain_and_impossible_events() {
        let p = FinitePomdp::default_instance();
        assert!(event_vector(&p, &|_| true, 3).unwrap().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert_eq!(event_vector(&p, &|_| false, 3).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn next_observation_vector_is_one_step_mixture() {
        let p = FinitePomdp::default_instance();
        let v = event_vector(&p, &|f| f[0].1 == 1, 1).unwrap();
        for (s, &vs) in v.iter().enumerate() {
            let direct: f64 = (0..3).map(|s2| p.transition[0][s][s2] * p.observation[s2][1]).sum();
            assert!((vs - direct).abs() < 1e-15);
        }
    }

    #[test]
    fn unnormalized_transition_rejected() {
        let mut p = FinitePomdp::default_instance();
        p.transition[0][1][2] += 0.01;
        assert!(matches!(p.validate(), Err(BeliefError::Invalid(_))));
    }

    #[test]
    fn enumeration_budget() {
        let p = FinitePomdp::default_instance();
        assert!(matches!(event_vector(&p, &|_| true, 40), Err(BeliefError::Budget { .. })));
    }

    #[test]
    fn llr_recurrence_matches_log_odds() {
        let flips = [true, true, false, true, false, false, false, true];
        let tr = llr_trace(0.3, 0.7, 0.5, &flips).unwrap();
        for t in 0..=flips.len() {
            assert!((tr.eta[t] - posterior_log_odds(0.3, 0.7, 0.5, &flips[..t])).abs() < 1e-12);
        }
        assert!(matches!(llr_trace(0.4, 0.4, 0.5, &flips), Err(BeliefError::Degenerate(_))));
    }

    #[test]
    fn small_linearity_check() {
        let p = FinitePomdp::default_instance();
        let events = all_events(&p, 2).unwrap();
        let r = verify_linearity(&p, &histories_upto(&p, 3), &events, 2, Exec::Sequential).unwrap();
        assert_eq!(r.histories, 15);
        assert!(r.max_error < 1e-12, "{r:?}");
        assert!(r.max_normalization_error < 1e-12);
        assert!(r.max_filter_error < 1e-12);
    }
}
