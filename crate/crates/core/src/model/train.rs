//! Minibatch training with gradient accumulation, per-epoch validation,
//! checkpointing and early stopping.
//!
//! Every random choice is derived from `(seed, epoch, example)`: the epoch
//! order, each training example's mask, and the fixed validation masks. A
//! run resumed from a checkpoint therefore continues exactly as if it had
//! never stopped. Gradients are computed over fixed-size shards of
//! sequences and summed in shard order, so results do not depend on the
//! number of threads.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, Checkpoint, TrainState};
use super::gpt::Gpt;
use super::linalg::{add_into, Real};
use super::optim::{AdamW, OptimState};
use super::ModelError;
use crate::par::{mix_seed, Exec};
use crate::phh::PhhRecord;
use crate::tokenizer::{encode, mask_gaps, TokenId, TokenizedExample, TokenizerError, Vocab};

const VAL_STREAM: u64 = 0x56_41_4c;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Sequences per micro-batch.
    pub batch_size: usize,
    /// Micro-batches per optimizer step.
    pub grad_accum: usize,
    pub optimizer: AdamW,
    /// Linear warm-up length in optimizer steps.
    pub warmup_steps: u64,
    pub mask_fraction: f64,
    pub checkpoint_every: u64,
    /// Consecutive validation regressions that stop training.
    pub patience: usize,
    pub seed: u64,
    /// Sequences per gradient shard.
    pub shard_size: usize,
    /// Stop after this many optimizer steps in total.
    pub max_steps: Option<u64>,
    pub dtype: Dtype,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            grad_accum: 2,
            optimizer: AdamW::default(),
            warmup_steps: 0,
            mask_fraction: 0.15,
            checkpoint_every: 5000,
            patience: 3,
            seed: 0,
            shard_size: 8,
            max_steps: None,
            dtype: Dtype::F64,
        }
    }
}

impl TrainConfig {
    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accum
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let lr = self.optimizer.lr;
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            lr
        } else {
            lr * (step + 1) as f64 / self.warmup_steps as f64
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.batch_size == 0 || self.grad_accum == 0 || self.shard_size == 0 {
            return Err(ModelError::Config("batch_size, grad_accum and shard_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.mask_fraction) {
            return Err(ModelError::Config(format!("mask_fraction {} not in [0, 1)", self.mask_fraction)));
        }
        Ok(())
    }
}

/// Unmasked token sequences for training and validation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EncodedCorpus {
    pub train: Vec<Vec<TokenId>>,
    pub val: Vec<Vec<TokenId>>,
    /// Hands dropped because their masked form would not fit the context.
    pub skipped: usize,
}

/// Longest masked form of `ids`: one `<ANS>` plus the answers.
fn masked_len(vocab: &Vocab, ids: &[TokenId], fraction: f64) -> usize {
    let maskable = ids.iter().filter(|&&t| vocab.is_maskable(t)).count();
    ids.len() + 1 + (fraction * maskable as f64).ceil() as usize
}

pub fn encode_corpus(
    vocab: &Vocab,
    train: &[PhhRecord],
    val: &[PhhRecord],
    context_len: usize,
    mask_fraction: f64,
) -> Result<EncodedCorpus, TokenizerError> {
    let mut skipped = 0;
    let mut enc = |records: &[PhhRecord]| -> Result<Vec<Vec<TokenId>>, TokenizerError> {
        let mut out = Vec::with_capacity(records.len());
        for r in records {
            let ids = encode(vocab, &r.events)?;
            if masked_len(vocab, &ids, mask_fraction) > context_len {
                skipped += 1;
            } else {
                out.push(ids);
            }
        }
        Ok(out)
    };
    let train = enc(train)?;
    let val = enc(val)?;
    Ok(EncodedCorpus { train, val, skipped })
}

fn mask_with(vocab: &Vocab, ids: &[TokenId], fraction: f64, seed: u64) -> TokenizedExample {
    mask_gaps(vocab, ids, fraction, &mut ChaCha8Rng::seed_from_u64(seed)).expect("fraction validated")
}

/// The fixed masked validation set.
pub fn validation_examples(vocab: &Vocab, val: &[Vec<TokenId>], cfg: &TrainConfig) -> Vec<TokenizedExample> {
    val.iter()
        .enumerate()
        .map(|(i, ids)| mask_with(vocab, ids, cfg.mask_fraction, mix_seed(cfg.seed ^ VAL_STREAM, i as u64)))
        .collect()
}

/// Mean masked-answer loss over `examples`.
pub fn evaluate<T: Real>(
    model: &Gpt<T>,
    examples: &[TokenizedExample],
    shard_size: usize,
    exec: Exec,
) -> Result<f64, ModelError> {
    let shards: Vec<&[TokenizedExample]> = examples.chunks(shard_size.max(1)).collect();
    let parts = exec.map_slice(&shards, |s| {
        let refs: Vec<&TokenizedExample> = s.iter().collect();
        model.examples_loss(&refs, None)
    });
    let (mut sum, mut count) = (0.0, 0usize);
    for p in parts {
        let (s, c) = p?;
        sum += s;
        count += c;
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// One training-log line. Validation rows carry `val_loss`, step rows
/// carry `train_loss`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

impl LogRow {
    fn csv(&self) -> String {
        let opt = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!("{},{},{},{}\n", self.step, opt(self.train_loss), opt(self.val_loss), self.lr)
    }
}

pub const LOG_HEADER: &str = "step,train_loss,val_loss,lr\n";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub log: Vec<LogRow>,
    pub state: TrainState,
    pub initial_val: Option<f64>,
    pub stopped_early: bool,
}

struct Outputs<'a> {
    dir: Option<&'a Path>,
    config: serde_json::Value,
}

impl Outputs<'_> {
    fn log(&self, row: &LogRow) -> Result<(), ModelError> {
        let Some(dir) = self.dir else { return Ok(()) };
        let path = dir.join("train_log.csv");
        let io = |source| ModelError::Io { path: path.clone(), source };
        let fresh = !path.exists();
        let mut f = fs::OpenOptions::new().create(true).append(true).open(&path).map_err(io)?;
        if fresh {
            f.write_all(LOG_HEADER.as_bytes()).map_err(io)?;
        }
        f.write_all(row.csv().as_bytes()).map_err(io)
    }

    fn save<T: Real>(
        &self,
        name: &str,
        model: &Gpt<T>,
        optim: &OptimState<T>,
        state: &TrainState,
    ) -> Result<(), ModelError> {
        let Some(dir) = self.dir else { return Ok(()) };
        let ckpt = Checkpoint {
            model: model.clone(),
            optim: Some(optim.clone()),
            train_state: Some(state.clone()),
            train_config: Some(self.config.clone()),
        };
        save_checkpoint(&dir.join(name), &ckpt)
    }
}

/// Parameter ranges for the optimizer: matrices are weight-decayed,
/// vectors (biases, LN gains) are not.
fn param_groups<T: Real>(model: &Gpt<T>) -> Vec<(std::ops::Range<usize>, bool)> {
    model.param_info().iter().map(|p| (p.range(), p.shape.len() == 2)).collect()
}

/// Trains `model` in place. Pass the optimizer and schedule state from a
/// checkpoint to resume. With `out_dir`, writes `train_log.csv`,
/// periodic `step-<n>.bin` checkpoints, `best.bin` and `last.bin`.
#[allow(clippy::too_many_arguments)]
pub fn train<T: Real>(
    model: &mut Gpt<T>,
    vocab: &Vocab,
    data: &EncodedCorpus,
    cfg: &TrainConfig,
    resume: Option<(OptimState<T>, TrainState)>,
    out_dir: Option<&Path>,
    exec: Exec,
    on_log: &mut dyn FnMut(&LogRow),
) -> Result<TrainOutcome, ModelError> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(ModelError::Input("empty training set".into()));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|source| ModelError::Io { path: dir.to_path_buf(), source })?;
    }
    let out = Outputs { dir: out_dir, config: serde_json::to_value(cfg).expect("config serializes") };
    let groups = param_groups(model);
    let (mut optim, mut state) = match resume {
        Some((o, s)) => (o, s),
        None => (OptimState::new(model.num_params(), cfg.optimizer), TrainState::default()),
    };
    let val = validation_examples(vocab, &data.val, cfg);
    let mut log = Vec::new();
    let mut emit = |row: LogRow, log: &mut Vec<LogRow>| -> Result<(), ModelError> {
        out.log(&row)?;
        on_log(&row);
        log.push(row);
        Ok(())
    };

    let mut initial_val = None;
    if state.step == 0 && state.cursor == 0 && state.epoch == 0 && !val.is_empty() {
        let v = evaluate(model, &val, cfg.shard_size, exec)?;
        initial_val = Some(v);
        emit(LogRow { step: 0, epoch: 0, train_loss: None, val_loss: Some(v), lr: cfg.lr_at(0) }, &mut log)?;
    }

    let n = data.train.len();
    let per_step = cfg.effective_batch();
    let steps_per_epoch = n.div_ceil(per_step);
    let mut last_loss = None;

    'epochs: while state.epoch < cfg.epochs && !state.stopped {
        let epoch_seed = mix_seed(cfg.seed, state.epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));

        while state.cursor < steps_per_epoch {
            if cfg.max_steps.is_some_and(|m| state.step >= m) {
                break 'epochs;
            }
            let batch = &order[state.cursor * per_step..((state.cursor + 1) * per_step).min(n)];
            let examples: Vec<TokenizedExample> = batch
                .iter()
                .map(|&i| mask_with(vocab, &data.train[i], cfg.mask_fraction, mix_seed(epoch_seed, i as u64)))
                .collect();
            let count: usize = examples.iter().map(|e| e.loss_mask.iter().filter(|&&m| m).count()).sum();
            let mut grad = vec![T::zero(); model.num_params()];
            let mut sum = 0.0;
            if count > 0 {
                let scale = T::lit(1.0 / count as f64);
                for micro in examples.chunks(cfg.batch_size) {
                    let shards: Vec<&[TokenizedExample]> = micro.chunks(cfg.shard_size).collect();
                    let m: &Gpt<T> = model;
                    let parts = exec.map_slice(&shards, |s| {
                        let refs: Vec<&TokenizedExample> = s.iter().collect();
                        let mut g = vec![T::zero(); m.num_params()];
                        m.examples_loss(&refs, Some((&mut g, scale))).map(|(l, _)| (l, g))
                    });
                    for p in parts {
                        let (l, g) = p?;
                        sum += l;
                        add_into(&mut grad, &g);
                    }
                }
            }
            let loss = if count == 0 { 0.0 } else { sum / count as f64 };
            if !loss.is_finite() {
                return Err(ModelError::NonFinite {
                    step: state.step,
                    epoch: state.epoch,
                    batch: state.cursor,
                    last_loss,
                });
            }
            last_loss = Some(loss);
            let lr = cfg.lr_at(state.step);
            optim.hyper.lr = lr;
            optim.update(&mut model.params, &grad, &groups);
            state.step += 1;
            state.cursor += 1;
            emit(
                LogRow { step: state.step, epoch: state.epoch, train_loss: Some(loss), val_loss: None, lr },
                &mut log,
            )?;
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
                out.save(&format!("step-{}.bin", state.step), model, &optim, &state)?;
            }
        }

        let v = if val.is_empty() { last_loss.unwrap_or(0.0) } else { evaluate(model, &val, cfg.shard_size, exec)? };
        state.val_history.push(v);
        if state.prev_val.is_some_and(|p| v > p) {
            state.regressions += 1;
        } else {
            state.regressions = 0;
        }
        state.prev_val = Some(v);
        state.epoch += 1;
        state.cursor = 0;
        if state.regressions >= cfg.patience {
            state.stopped = true;
        }
        let improved = state.best_val.is_none_or(|b| v < b);
        if improved {
            state.best_val = Some(v);
        }
        emit(
            LogRow {
                step: state.step,
                epoch: state.epoch - 1,
                train_loss: None,
                val_loss: Some(v),
                lr: cfg.lr_at(state.step),
            },
            &mut log,
        )?;
        if improved {
            out.save("best.bin", model, &optim, &state)?;
        }
    }
    out.save("last.bin", model, &optim, &state)?;
    Ok(TrainOutcome { log, stopped_early: state.stopped, state, initial_val })
}
