use pokerlab::datagen::{generate, GenConfig};
use pokerlab::par::Exec;
use pokerlab::phh::{parse, parse_bytes, parse_corpus, read_corpus_dir, serialize, validate, write_corpus, PhhError};
use proptest::prelude::*;

fn corpus() -> Vec<pokerlab::phh::PhhRecord> {
    let cfg = GenConfig { hands: 60, seed: 21, rollouts: 40, ..GenConfig::default() };
    generate(&cfg, Exec::default()).unwrap().into_iter().map(|h| h.record).collect()
}

#[test]
fn generated_hands_round_trip_and_replay() {
    for r in corpus() {
        let text = serialize(&r);
        let back = parse(&text).unwrap();
        assert_eq!(back, r);
        assert_eq!(serialize(&back), text);
        assert!(validate(&back).unwrap().complete);
    }
}

#[test]
fn corpus_files_round_trip_and_split() {
    let hands = corpus();
    let dir = tempfile::tempdir().unwrap();
    let m = write_corpus(hands.clone(), 0.95, 7, dir.path(), serde_json::json!({"k": 1})).unwrap();
    assert_eq!((m.train_hands, m.test_hands), (57, 3));
    assert_eq!(m.split_ratio, 0.95);
    let (train, test) = read_corpus_dir(dir.path()).unwrap();
    let mut all: Vec<_> = train.into_iter().chain(test).collect();
    all.sort_by_key(|r| r.metadata.hand_id);
    assert_eq!(all, hands);
    let again = tempfile::tempdir().unwrap();
    write_corpus(hands, 0.95, 7, again.path(), serde_json::json!({"k": 1})).unwrap();
    for f in ["train.phh", "test.phh", "manifest.json"] {
        assert_eq!(std::fs::read(dir.path().join(f)).unwrap(), std::fs::read(again.path().join(f)).unwrap());
    }
}

#[test]
fn corrupted_hands_fail_replay() {
    let r = &corpus()[0];
    let mut events = r.events.clone();
    events.swap(6, 7);
    let swapped = pokerlab::phh::PhhRecord { metadata: r.metadata.clone(), events };
    assert!(matches!(validate(&swapped), Err(PhhError::Replay { .. })));
}

#[test]
fn syntax_errors_carry_positions() {
    match parse("d dh p1 AhKh\np1 zz\n") {
        Err(PhhError::Syntax { line, column, .. }) => assert_eq!((line, column), (2, 4)),
        other => panic!("{other:?}"),
    }
    assert!(matches!(parse("p9 f\n"), Err(PhhError::Semantic { line: 1, .. })));
    assert!(parse_bytes(&[0xff, 0xfe]).unwrap_err().is_syntax());
    assert!(parse_corpus("d dh p1 AhKh\n\np1 zz\n").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(5000))]

    #[test]
    fn random_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
        let _ = parse_bytes(&bytes);
    }

    #[test]
    fn token_soup_never_panics(words in proptest::collection::vec(
        prop_oneof![Just("d"), Just("dh"), Just("db"), Just("p1"), Just("p7"), Just("f"), Just("cc"), Just("cbr"),
                    Just("sm"), Just("AhKd"), Just("2c"), Just("100"), Just("-5"), Just("\n"), Just("#"), Just("hand=1")],
        0..60)) {
        let text = words.join(" ");
        if let Ok(r) = parse(&text) {
            let _ = validate(&r);
        }
    }
}
