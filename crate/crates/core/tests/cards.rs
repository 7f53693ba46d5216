mod common;

use pokerlab::cards::{evaluate, evaluate7, parse_cards, Card, Deck, HandCategory};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn seven() -> impl Strategy<Value = Vec<Card>> {
    proptest::sample::subsequence((0u8..52).collect::<Vec<_>>(), 7)
        .prop_shuffle()
        .prop_map(|v| v.into_iter().map(|i| Card::from_index(i).unwrap()).collect())
}

proptest! {
    #[test]
    fn seven_card_matches_best_of_21(cards in seven()) {
        let r = evaluate7(&cards).unwrap();
        let (cat, kick) = common::best_of_21(&cards);
        prop_assert_eq!((r.category, r.kickers), (cat, kick));
    }

    #[test]
    fn five_card_matches_naive(cards in proptest::sample::subsequence((0u8..52).collect::<Vec<_>>(), 5)) {
        let cards: Vec<Card> = cards.into_iter().map(|i| Card::from_index(i).unwrap()).collect();
        let r = evaluate(&cards).unwrap();
        prop_assert_eq!((r.category, r.kickers), common::naive_five(&cards));
    }

    #[test]
    fn order_is_total_and_consistent(a in seven(), b in seven()) {
        let (ra, rb) = (evaluate(&a).unwrap(), evaluate(&b).unwrap());
        prop_assert_eq!(ra.cmp(&rb), common::best_of_21(&a).cmp(&common::best_of_21(&b)));
        prop_assert_eq!(ra.value().cmp(&rb.value()), ra.cmp(&rb));
    }
}

#[test]
fn category_frequencies_over_all_five_card_hands() {
    // Standard counts over the C(52,5) = 2,598,960 five-card hands.
    let expected = [1_302_540u64, 1_098_240, 123_552, 54_912, 10_200, 5_108, 3_744, 624, 40];
    let mut counts = [0u64; 9];
    let cards: Vec<Card> = Card::all().collect();
    for a in 0..52 {
        for b in a + 1..52 {
            for c in b + 1..52 {
                for d in c + 1..52 {
                    for e in d + 1..52 {
                        let h = [cards[a], cards[b], cards[c], cards[d], cards[e]];
                        counts[evaluate(&h).unwrap().category.index()] += 1;
                    }
                }
            }
        }
    }
    assert_eq!(counts, expected);
}

#[test]
fn wheel_is_lowest_straight() {
    let wheel = evaluate(&parse_cards("Ah2c3d4s5h").unwrap()).unwrap();
    let six = evaluate(&parse_cards("2c3d4s5h6d").unwrap()).unwrap();
    assert_eq!(wheel.category, HandCategory::Straight);
    assert_eq!(wheel.kickers, [5, 4, 3, 2, 1]);
    assert!(six > wheel);
}

#[test]
fn duplicates_and_bad_sizes_rejected() {
    assert!(evaluate(&parse_cards("AhAh2c3d4s").unwrap()).is_err());
    assert!(evaluate(&parse_cards("Ah2c3d4s").unwrap()).is_err());
    assert!(parse_cards("Xx").is_err());
}

#[test]
fn deck_deals_distinct_cards() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut deck = Deck::new();
    let dealt = deck.deal(&mut rng, 52).unwrap();
    let mut idx: Vec<u8> = dealt.iter().map(|c| c.index()).collect();
    idx.sort_unstable();
    assert_eq!(idx, (0..52).collect::<Vec<_>>());
    assert!(deck.deal(&mut rng, 1).is_err());
}
