mod common;

use pokerlab::analysis::{confusion_csv, export_report};
use pokerlab::cards::parse_cards;
use pokerlab::datagen::{generate, GenConfig};
use pokerlab::engine::Street;
use pokerlab::model::{Gpt, ModelConfig};
use pokerlab::par::Exec;
use pokerlab::phh::{serialize, PhhRecord};
use pokerlab::probes::{
    balance_classes, build_equity_dataset, build_handrank_dataset, handrank_inputs, read_samples, run_probes,
    split_rows, target_count, train_probe, write_samples, Dataset, DatasetHeader, Label, ProbeConfig, ProbeHyper,
    ProbeKind, ProbeSample, ProbeTask, Targets,
};
use pokerlab::tokenizer::Vocab;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn records(n: usize, seed: u64) -> Vec<PhhRecord> {
    let cfg = GenConfig { hands: n, seed, rollouts: 30, ..GenConfig::default() };
    generate(&cfg, Exec::default()).unwrap().into_iter().map(|h| h.record).collect()
}

fn tiny() -> Gpt<f64> {
    Gpt::new(ModelConfig { layers: 2, heads: 2, model_dim: 16, mlp_dim: 32, context_len: 256, vocab_size: 80, seed: 1 })
        .unwrap()
}

#[test]
fn target_count_matches_oracle_on_fuzzed_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for i in 0..1000 {
        let k = rng.random_range(1..=12);
        let scale = [10, 100, 10_000, 1_000_000][i % 4];
        let counts: Vec<usize> =
            (0..k).map(|_| if rng.random_bool(0.15) { 0 } else { rng.random_range(1..=scale) }).collect();
        let p = if i % 2 == 0 { 40 } else { rng.random_range(0..=100) };
        assert_eq!(target_count(&counts, p as f64, 10), common::percentile_oracle(&counts, p, 10), "{counts:?} p={p}");
    }
}

#[test]
fn balancing_caps_every_class() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let labels: Vec<usize> = (0..2000).map(|_| [0, 0, 0, 0, 1, 1, 2, 3][rng.random_range(0..8)]).collect();
    let samples: Vec<ProbeSample> = labels
        .iter()
        .enumerate()
        .map(|(i, &c)| ProbeSample {
            activation: vec![i as f64],
            label: Label::Class(c),
            layer: 0,
            hand_id: i as u64,
            position: 0,
        })
        .collect();
    let mut counts = [0usize; 4];
    labels.iter().for_each(|&c| counts[c] += 1);
    let target = target_count(&counts, 40.0, 10);
    let out = balance_classes(samples, 40.0, 10, &mut rng);
    let mut after = [0usize; 4];
    for s in &out {
        if let Label::Class(c) = s.label {
            after[c] += 1;
        }
    }
    for c in 0..4 {
        assert_eq!(after[c], counts[c].min(target));
    }
}

#[test]
fn linear_probe_recovers_linear_target() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 600;
    let x: Vec<f64> = (0..n * 4).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let y: Vec<f64> = (0..n).map(|i| 3.0 * x[i * 4] - 2.0 * x[i * 4 + 2] + 0.5).collect();
    let data = Dataset { x, features: 4, targets: Targets::Value(y) };
    let (tr, va) = split_rows(n, 0.2, 1);
    let sub = |idx: &[usize]| Dataset {
        x: idx.iter().flat_map(|&i| data.x[i * 4..i * 4 + 4].to_vec()).collect(),
        features: 4,
        targets: Targets::Value(
            idx.iter().map(|&i| if let Targets::Value(v) = &data.targets { v[i] } else { 0.0 }).collect(),
        ),
    };
    let (train, val) = (sub(&tr), sub(&va));
    let hyper = ProbeHyper { lr: 1e-2, ..ProbeHyper::default() };
    let probe = train_probe(ProbeKind::Linear, &train, &val, 0, &hyper).unwrap();
    let Targets::Value(truth) = &val.targets else { unreachable!() };
    assert!(common::pearson(&probe.predict_values(&val.x), truth) > 0.999);
}

/// Hand id, player 1's flop category and last flop card, read from the
/// serialized text alone. `None` when the hand never saw a flop.
fn relabel(text: &str) -> (u64, Option<(usize, String)>) {
    let id =
        text.lines().next().unwrap().split_whitespace().find_map(|f| f.strip_prefix("hand=")).unwrap().parse().unwrap();
    let hole = text.lines().find_map(|l| l.strip_prefix("d dh p1 ")).unwrap();
    let flop = text.lines().filter_map(|l| l.strip_prefix("d db ")).next().filter(|b| b.len() == 6);
    let label = flop.map(|b| {
        let cards = parse_cards(&format!("{hole}{b}")).unwrap();
        (common::naive_five(&cards).0.index(), b[4..].to_string())
    });
    (id, label)
}

#[test]
fn handrank_labels_match_text_relabeling() {
    let recs = records(300, 11);
    let vocab = Vocab::new();
    let (inputs, skipped) = handrank_inputs(&vocab, &recs, Street::Flop).unwrap();
    let oracle: Vec<(u64, (usize, String))> =
        recs.iter().map(|r| relabel(&serialize(r))).filter_map(|(id, l)| l.map(|l| (id, l))).collect();
    assert_eq!(inputs.len(), oracle.len());
    assert_eq!(skipped, recs.len() - oracle.len());
    assert!(oracle.len() > 50);
    for (input, (id, (class, last_card))) in inputs.iter().zip(&oracle) {
        assert_eq!(input.hand_id, *id);
        assert_eq!(input.label, Label::Class(*class), "hand {id}");
        assert_eq!(input.input_ids.len(), input.position + 1);
        assert_eq!(vocab.token(input.input_ids[input.position]).unwrap(), last_card, "hand {id}");
    }
}

#[test]
fn dataset_builders_and_file_round_trip() {
    let recs = records(40, 3);
    let m = tiny();
    let hr = build_handrank_dataset(&recs, &m, 1).unwrap();
    assert!(!hr.is_empty() && hr.iter().all(|s| s.activation.len() == 16 && matches!(s.label, Label::Class(_))));
    let eq = build_equity_dataset(&recs, &m, 0, 200, 4).unwrap();
    assert!(eq.iter().all(|s| matches!(s.label, Label::Value(v) if (0.0..=1.0).contains(&v))));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("hr.jsonl");
    let header = DatasetHeader {
        task: ProbeTask::HandRank,
        layer: 1,
        features: 16,
        labeler: serde_json::json!({"street": "flop"}),
        seeds: vec![0],
    };
    write_samples(&path, &header, &hr).unwrap();
    assert_eq!(read_samples(&path).unwrap(), (header, hr));
}

#[test]
fn pipeline_reports_every_layer_with_intervals() {
    let train = records(300, 4);
    let test = records(60, 5);
    let m = tiny();
    let vocab = Vocab::new();
    let hyper = ProbeHyper { hidden: 16, max_epochs: 20, ..ProbeHyper::default() };
    let cfg = ProbeConfig { layers: vec![0, 1], seeds: vec![0, 1, 2], hyper, ..ProbeConfig::default() };
    let hr = run_probes(&m, &vocab, &train, &test, &cfg, Exec::default()).unwrap();
    assert_eq!(hr.layers.len(), 4);
    for r in &hr.layers {
        let acc = r.accuracy.as_ref().unwrap();
        assert_eq!(acc.per_seed.len(), 3);
        assert!(acc.ci95.is_some());
        let conf = r.confusion.as_ref().unwrap();
        let sums: Vec<usize> = conf.iter().map(|row| row.iter().sum()).collect();
        assert_eq!(sums, hr.test_counts);
    }
    let csv = confusion_csv(&hr.classes, hr.layers[0].confusion.as_ref().unwrap());
    assert_eq!(csv.lines().count(), 1 + hr.classes.len());
    let dir = tempfile::tempdir().unwrap();
    let files = export_report(&hr, dir.path()).unwrap();
    assert!(files.iter().any(|f| f.ends_with("layer_curves.csv")));

    let eq_cfg = ProbeConfig { task: ProbeTask::Equity, rollouts: 200, max_train: Some(120), ..cfg.clone() };
    let eq = run_probes(&m, &vocab, &train, &test, &eq_cfg, Exec::default()).unwrap();
    assert!(eq.train_size <= 120);
    for r in &eq.layers {
        assert!(r.pearson_r.is_some() && r.r2.is_some() && r.accuracy.is_none());
    }
    let act_cfg = ProbeConfig { task: ProbeTask::Action, ..cfg };
    let act = run_probes(&m, &vocab, &train, &test, &act_cfg, Exec::default()).unwrap();
    assert!(act.classes.len() <= 4 && act.classes.len() >= 2);
}
