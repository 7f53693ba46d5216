//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use pokerlab::analysis::{export_projection, export_report, pca_project};
use pokerlab::belief::{
    all_events, coin_sequence, coin_task, histories_upto, llr_trace, posterior_log_odds, verify_linearity, FinitePomdp,
};
use pokerlab::datagen::generate as generate_hands;
use pokerlab::model::{encode_corpus, load_checkpoint, train as train_model, Dtype, Gpt, LogRow, Real, TrainState};
use pokerlab::par::Exec;
use pokerlab::phh::{read_corpus_dir, write_corpus, CorpusManifest, PhhRecord, MANIFEST_FILE};
use pokerlab::probes::{
    balance_indices, capture_inputs, run_probes, task_inputs, Label, ProbeInput, ProbeSample, ProbeTask,
};
use pokerlab::tokenizer::Vocab;
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::{Common, ProbeArgs};

pub enum Outcome {
    Success,
    ToleranceFailure,
}

/// A missing or malformed argument; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn apply_common(cfg: &mut RunConfig, common: &Common) {
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.model.seed = seed;
        cfg.training.seed = seed;
        cfg.probe.label_seed = seed;
        cfg.belief.coin_config.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.paths.out = Some(out.clone());
    }
}

fn exec(common: &Common) -> Exec {
    if common.sequential {
        Exec::Sequential
    } else {
        Exec::default()
    }
}

fn out_dir(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let dir = cfg.paths.out.clone().ok_or_else(|| usage("--out is required"))?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn corpus_dir(cfg: &RunConfig, flag: &Option<PathBuf>) -> anyhow::Result<PathBuf> {
    flag.clone().or_else(|| cfg.paths.corpus.clone()).ok_or_else(|| usage("--corpus is required"))
}

fn load_corpus(dir: &Path) -> anyhow::Result<(Vec<PhhRecord>, Vec<PhhRecord>)> {
    if !dir.join(MANIFEST_FILE).exists() {
        bail!("{} is not a corpus directory (no {MANIFEST_FILE}); run `pokerlab generate` first", dir.display());
    }
    read_corpus_dir(dir).with_context(|| format!("reading corpus {}", dir.display()))
}

/// `manifest.json` of a command's output directory.
fn write_manifest(dir: &Path, command: &str, cfg: &RunConfig, extra: serde_json::Value) -> anyhow::Result<()> {
    let manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
        "result": extra,
    });
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).with_context(|| format!("writing {}", path.display()))
}

pub fn generate(
    mut cfg: RunConfig,
    common: &Common,
    hands: Option<usize>,
    rollouts: Option<u64>,
    split_ratio: Option<f64>,
) -> anyhow::Result<Outcome> {
    if let Some(h) = hands {
        cfg.generation.hands = h;
    }
    if let Some(r) = rollouts {
        cfg.generation.rollouts = r;
    }
    if let Some(s) = split_ratio {
        cfg.generation.split_ratio = s;
    }
    if cfg.generation.hands == 0 {
        bail!("hands must be positive");
    }
    let out = out_dir(&cfg)?;
    let gen = cfg.gen_config();
    let generated = generate_hands(&gen, exec(common)).context("generating hands")?;
    let styles: Vec<String> = generated
        .iter()
        .map(|h| serde_json::to_string(&json!({"hand_id": h.record.metadata.hand_id, "styles": h.styles})))
        .collect::<Result<_, _>>()?;
    let styles_path = out.join("styles.jsonl");
    fs::write(&styles_path, styles.join("\n") + "\n").with_context(|| format!("writing {}", styles_path.display()))?;
    let manifest = write_corpus(
        generated.into_iter().map(|h| h.record),
        gen.split_ratio,
        cfg.seed,
        &out,
        json!({"command": "generate", "config": cfg, "styles": "styles.jsonl"}),
    )?;
    println!(
        "wrote {} train and {} test hands to {} (split {})",
        manifest.train_hands,
        manifest.test_hands,
        out.display(),
        manifest.split_ratio
    );
    Ok(Outcome::Success)
}

fn print_row(row: &LogRow) {
    if let Some(v) = row.val_loss {
        if row.step == 0 {
            println!("step 0 val_loss {v:.6}");
        } else {
            println!("epoch {} step {} val_loss {v:.6}", row.epoch, row.step);
        }
    }
}

fn train_typed<T: Real>(
    cfg: &RunConfig,
    corpus: &Path,
    out: &Path,
    resume: bool,
    exec: Exec,
) -> anyhow::Result<Outcome> {
    let (train, test) = load_corpus(corpus)?;
    let vocab = Vocab::new();
    if cfg.model.vocab_size != vocab.len() {
        bail!("model vocab_size {} does not match the tokenizer ({})", cfg.model.vocab_size, vocab.len());
    }
    vocab.save(&out.join("vocab.json"))?;
    let data = encode_corpus(&vocab, &train, &test, cfg.model.context_len, cfg.training.mask_fraction)?;
    if data.skipped > 0 {
        eprintln!("skipped {} hands longer than the context", data.skipped);
    }
    let (mut model, state) = if resume {
        let path = out.join("last.bin");
        let ckpt = load_checkpoint::<T>(&path).with_context(|| format!("resuming from {}", path.display()))?;
        let state: Option<(_, TrainState)> = ckpt.optim.zip(ckpt.train_state);
        (ckpt.model, Some(state.ok_or_else(|| anyhow::anyhow!("{} has no optimizer state", path.display()))?))
    } else {
        let log = out.join("train_log.csv");
        if log.exists() {
            fs::remove_file(&log).with_context(|| format!("removing stale {}", log.display()))?;
        }
        (Gpt::<T>::new(cfg.model)?, None)
    };
    let corpus_manifest: Option<CorpusManifest> =
        fs::read_to_string(corpus.join(MANIFEST_FILE)).ok().and_then(|t| serde_json::from_str(&t).ok());
    write_manifest(out, "train", cfg, json!({"corpus": corpus, "corpus_manifest": corpus_manifest}))?;
    let outcome = train_model(&mut model, &vocab, &data, &cfg.training, state, Some(out), exec, &mut print_row)?;
    println!(
        "finished at step {} epoch {}{}",
        outcome.state.step,
        outcome.state.epoch,
        if outcome.stopped_early { " (early stop)" } else { "" }
    );
    Ok(Outcome::Success)
}

pub fn train(
    mut cfg: RunConfig,
    common: &Common,
    corpus: Option<PathBuf>,
    epochs: Option<usize>,
    lr: Option<f64>,
    max_steps: Option<u64>,
    resume: bool,
) -> anyhow::Result<Outcome> {
    let corpus = corpus_dir(&cfg, &corpus)?;
    cfg.paths.corpus = Some(corpus.clone());
    if let Some(e) = epochs {
        cfg.training.epochs = e;
    }
    if let Some(lr) = lr {
        cfg.training.optimizer.lr = lr;
    }
    if max_steps.is_some() {
        cfg.training.max_steps = max_steps;
    }
    let out = out_dir(&cfg)?;
    match cfg.training.dtype {
        Dtype::F32 => train_typed::<f32>(&cfg, &corpus, &out, resume, exec(common)),
        Dtype::F64 => train_typed::<f64>(&cfg, &corpus, &out, resume, exec(common)),
    }
}

/// `"0,2,3"` or `"0..4"`.
pub fn parse_layers(s: &str) -> anyhow::Result<Vec<usize>> {
    let bad = || usage(format!("invalid --layers {s:?}"));
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a >= b {
            return Err(bad());
        }
        return Ok((a..b).collect());
    }
    s.split(',').map(|t| t.trim().parse().map_err(|_| bad())).collect()
}

fn apply_probe_args(cfg: &mut RunConfig, args: &ProbeArgs) -> anyhow::Result<()> {
    if let Some(t) = &args.task {
        cfg.probe.task = t.parse::<ProbeTask>().map_err(usage)?;
    }
    if let Some(l) = &args.layers {
        cfg.probe.layers = parse_layers(l)?;
    }
    if let Some(n) = args.probe_seeds {
        if n == 0 {
            return Err(usage("--probe-seeds must be positive"));
        }
        cfg.probe.seeds = (0..n).collect();
    }
    if let Some(p) = args.percentile {
        if !(0.0..=100.0).contains(&p) {
            return Err(usage("--percentile must lie in [0, 100]"));
        }
        cfg.probe.percentile = p;
    }
    if let Some(r) = args.rollouts {
        cfg.probe.rollouts = r;
    }
    if args.max_train.is_some() {
        cfg.probe.max_train = args.max_train;
    }
    if args.max_test.is_some() {
        cfg.probe.max_test = args.max_test;
    }
    if let Some(c) = &args.corpus {
        cfg.paths.corpus = Some(c.clone());
    }
    if let Some(c) = &args.checkpoint {
        cfg.paths.checkpoint = Some(c.clone());
    }
    Ok(())
}

fn load_model(cfg: &RunConfig) -> anyhow::Result<Gpt<f64>> {
    let path = cfg.paths.checkpoint.clone().ok_or_else(|| usage("--checkpoint is required"))?;
    let model = load_checkpoint::<f64>(&path).with_context(|| format!("loading {}", path.display()))?.model;
    for &l in &cfg.probe.layers {
        if l >= model.config().layers {
            bail!("layer {l} out of range: the model has {} layers", model.config().layers);
        }
    }
    Ok(model)
}

pub fn probe(mut cfg: RunConfig, common: &Common, args: &ProbeArgs) -> anyhow::Result<Outcome> {
    apply_probe_args(&mut cfg, args)?;
    let corpus = corpus_dir(&cfg, &None)?;
    let model = load_model(&cfg)?;
    let out = out_dir(&cfg)?;
    let (train, test) = load_corpus(&corpus)?;
    let report = run_probes(&model, &Vocab::new(), &train, &test, &cfg.probe, exec(common))?;
    let files = export_report(&report, &out)?;
    write_manifest(&out, "probe", &cfg, json!({"files": files}))?;
    println!(
        "{} probes: {} train / {} test samples, {} seeds",
        report.task.name(),
        report.train_size,
        report.test_size,
        report.seeds.len()
    );
    for r in &report.layers {
        let fmt = |name: &str, s: &Option<pokerlab::probes::Stat>| {
            s.as_ref().map(|s| {
                let ci = s.ci95.map(|c| format!(" ± {c:.4}")).unwrap_or_default();
                format!(" {name} {:.4}{ci}", s.mean)
            })
        };
        let line: String =
            [fmt("accuracy", &r.accuracy), fmt("r", &r.pearson_r), fmt("R2", &r.r2)].into_iter().flatten().collect();
        println!("layer {} {:<6}{line}", r.layer, r.probe.name());
    }
    Ok(Outcome::Success)
}

#[derive(Serialize)]
struct BeliefReport {
    instance: FinitePomdp,
    max_history: usize,
    horizon: usize,
    histories: usize,
    events: usize,
    max_linearity_error: f64,
    max_normalization_error: f64,
    max_filter_error: f64,
    recurrence_sequences: usize,
    max_recurrence_error: f64,
    tolerance: f64,
    normalization_tolerance: f64,
    coin: Option<pokerlab::belief::CoinReport>,
    passed: bool,
}

pub fn belief_check(
    mut cfg: RunConfig,
    common: &Common,
    coin: bool,
    pomdp: Option<PathBuf>,
    max_history: Option<usize>,
    horizon: Option<usize>,
) -> anyhow::Result<Outcome> {
    if let Some(p) = pomdp {
        let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        cfg.belief.pomdp = Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?);
    }
    if let Some(m) = max_history {
        cfg.belief.max_history = m;
    }
    if let Some(h) = horizon {
        cfg.belief.horizon = h;
    }
    cfg.belief.coin |= coin;
    let spec = &cfg.belief;
    let instance = spec.pomdp.clone().unwrap_or_else(FinitePomdp::default_instance);
    instance.validate()?;
    let ex = exec(common);
    let histories = histories_upto(&instance, spec.max_history);
    let events = all_events(&instance, spec.horizon)?;
    let lin = verify_linearity(&instance, &histories, &events, spec.horizon, ex)?;

    let cc = &spec.coin_config;
    let sequences = 1000u64;
    let mut recurrence = 0.0f64;
    for i in 0..sequences {
        let (_, flips) = coin_sequence(cc, 3, i);
        let tr = llr_trace(cc.p0, cc.p1, cc.prior, &flips)?;
        for t in 0..=flips.len() {
            recurrence = recurrence.max((tr.eta[t] - posterior_log_odds(cc.p0, cc.p1, cc.prior, &flips[..t])).abs());
        }
    }
    let coin_report = if spec.coin {
        let mut report_step = |step: u64, loss: f64| {
            if step.is_multiple_of(100) {
                println!("coin step {step} loss {loss:.4}");
            }
        };
        Some(coin_task::<f32>(cc, ex, &mut report_step)?)
    } else {
        None
    };
    let passed = lin.max_error < spec.tolerance
        && lin.max_filter_error < spec.tolerance
        && lin.max_normalization_error < spec.normalization_tolerance
        && recurrence < spec.normalization_tolerance
        && coin_report.as_ref().is_none_or(|c| c.max_recurrence_error < spec.normalization_tolerance);
    let report = BeliefReport {
        instance,
        max_history: spec.max_history,
        horizon: spec.horizon,
        histories: lin.histories,
        events: lin.events,
        max_linearity_error: lin.max_error,
        max_normalization_error: lin.max_normalization_error,
        max_filter_error: lin.max_filter_error,
        recurrence_sequences: sequences as usize,
        max_recurrence_error: recurrence,
        tolerance: spec.tolerance,
        normalization_tolerance: spec.normalization_tolerance,
        coin: coin_report,
        passed,
    };
    println!(
        "linearity: {} histories x {} events, max error {:.3e}; normalization {:.3e}; filter {:.3e}; LLR recurrence {:.3e}",
        report.histories,
        report.events,
        report.max_linearity_error,
        report.max_normalization_error,
        report.max_filter_error,
        report.max_recurrence_error
    );
    if let Some(c) = &report.coin {
        println!("coin probe r by layer {:?}, best layer {} r {:.4}", c.layer_r, c.best_layer, c.best_r);
    }
    if let Some(dir) = &cfg.paths.out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("belief_report.json");
        fs::write(&path, serde_json::to_string_pretty(&report)?)
            .with_context(|| format!("writing {}", path.display()))?;
        write_manifest(dir, "belief-check", &cfg, json!({"passed": passed}))?;
    }
    if passed {
        println!("PASS");
        Ok(Outcome::Success)
    } else {
        println!("FAIL: tolerance exceeded");
        Ok(Outcome::ToleranceFailure)
    }
}

fn class_of(i: &ProbeInput) -> Option<usize> {
    match i.label {
        Label::Class(c) => Some(c),
        Label::Value(_) => None,
    }
}

pub fn project(mut cfg: RunConfig, common: &Common, args: &ProbeArgs, max_samples: usize) -> anyhow::Result<Outcome> {
    apply_probe_args(&mut cfg, args)?;
    let corpus = corpus_dir(&cfg, &None)?;
    let model = load_model(&cfg)?;
    let out = out_dir(&cfg)?;
    let (_, test) = load_corpus(&corpus)?;
    let ex = exec(common);
    let (inputs, _) = task_inputs(&Vocab::new(), &test, &cfg.probe, ex)?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.probe.label_seed);
    let mut keep: Vec<usize> = match inputs.iter().map(class_of).collect::<Option<Vec<usize>>>() {
        Some(labels) => balance_indices(&labels, cfg.probe.percentile, cfg.probe.floor, &mut rng),
        None => (0..inputs.len()).collect(),
    };
    if keep.len() > max_samples {
        let mut picked = rand::seq::index::sample(&mut rng, keep.len(), max_samples).into_vec();
        picked.sort_unstable();
        keep = picked.into_iter().map(|i| keep[i]).collect();
    }
    let inputs: Vec<ProbeInput> = keep.into_iter().map(|i| inputs[i].clone()).collect();
    let acts = capture_inputs(&model, &inputs, &cfg.probe.layers, ex)?;
    let mut files = Vec::new();
    for (&layer, layer_acts) in cfg.probe.layers.iter().zip(acts) {
        let samples: Vec<ProbeSample> = inputs
            .iter()
            .zip(layer_acts)
            .map(|(i, activation)| ProbeSample {
                activation,
                label: i.label,
                layer,
                hand_id: i.hand_id,
                position: i.position,
            })
            .collect();
        let proj = pca_project(&samples)?;
        println!(
            "layer {layer}: {} points, explained variance {:.4} / {:.4}",
            proj.points.len(),
            proj.explained_variance[0],
            proj.explained_variance[1]
        );
        files.extend(export_projection(&proj, &out)?);
    }
    write_manifest(&out, "project", &cfg, json!({"files": files}))?;
    Ok(Outcome::Success)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_lists_and_ranges() {
        assert_eq!(parse_layers("0..4").unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(parse_layers("3, 1").unwrap(), vec![3, 1]);
        for bad in ["2..2", "a", "1,,2", "..3"] {
            assert!(parse_layers(bad).unwrap_err().downcast_ref::<UsageError>().is_some(), "{bad}");
        }
    }

    #[test]
    fn seed_flag_reaches_every_component() {
        let mut cfg = RunConfig::default();
        let common = Common { seed: Some(9), out: Some("o".into()), ..Common::default() };
        apply_common(&mut cfg, &common);
        assert_eq!(
            (cfg.seed, cfg.model.seed, cfg.training.seed, cfg.probe.label_seed, cfg.belief.coin_config.seed),
            (9, 9, 9, 9, 9)
        );
        assert_eq!(cfg.paths.out, Some(PathBuf::from("o")));
    }

    #[test]
    fn partial_config_files_keep_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"seed": 3, "generation": {"hands": 12}}"#).unwrap();
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!((cfg.seed, cfg.generation.hands), (3, 12));
        assert_eq!(cfg.training, RunConfig::default().training);
        assert_eq!(cfg.gen_config().table.big_blind, 100);
        fs::write(&p, "{").unwrap();
        assert!(RunConfig::load(&p).is_err());
    }
}
