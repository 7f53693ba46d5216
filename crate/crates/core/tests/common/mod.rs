//! Independent reference implementations shared by the integration tests.

#![allow(dead_code)]

use pokerlab::cards::{Card, HandCategory};

/// Category and tie-break ranks of exactly five cards, computed directly
/// from rank counts. Ranks are 2..=14; a five-high straight lists the ace
/// as 1.
pub fn naive_five(cards: &[Card]) -> (HandCategory, [u8; 5]) {
    assert_eq!(cards.len(), 5);
    let mut counts = [0u8; 15];
    for c in cards {
        counts[c.rank() as usize] += 1;
    }
    let flush = cards.iter().all(|c| c.suit() == cards[0].suit());
    let mut ranks: Vec<u8> = cards.iter().map(|c| c.rank()).collect();
    ranks.sort_unstable_by(|a, b| b.cmp(a));
    let distinct = counts.iter().filter(|&&n| n > 0).count() == 5;
    let straight_top = if distinct && ranks[0] - ranks[4] == 4 {
        Some(ranks[0])
    } else if distinct && ranks == [14, 5, 4, 3, 2] {
        Some(5)
    } else {
        None
    };
    if let Some(top) = straight_top {
        let k = [top, top - 1, top - 2, top - 3, top - 4];
        return (if flush { HandCategory::StraightFlush } else { HandCategory::Straight }, k);
    }
    // Group by (count desc, rank desc).
    let mut groups: Vec<(u8, u8)> =
        (2..=14u8).filter(|&r| counts[r as usize] > 0).map(|r| (counts[r as usize], r)).collect();
    groups.sort_unstable_by(|a, b| b.cmp(a));
    let mut kick = [0u8; 5];
    let mut i = 0;
    for &(n, r) in &groups {
        for _ in 0..n {
            kick[i] = r;
            i += 1;
        }
    }
    let shape: Vec<u8> = groups.iter().map(|g| g.0).collect();
    let cat = match shape.as_slice() {
        [4, 1] => HandCategory::FourOfAKind,
        [3, 2] => HandCategory::FullHouse,
        _ if flush => HandCategory::Flush,
        [3, 1, 1] => HandCategory::ThreeOfAKind,
        [2, 2, 1] => HandCategory::TwoPair,
        [2, 1, 1, 1] => HandCategory::Pair,
        _ => HandCategory::HighCard,
    };
    (cat, kick)
}

/// Best five-card hand among all 21 subsets of seven cards.
pub fn best_of_21(cards: &[Card]) -> (HandCategory, [u8; 5]) {
    assert_eq!(cards.len(), 7);
    let mut best: Option<(HandCategory, [u8; 5])> = None;
    for skip_a in 0..7 {
        for skip_b in skip_a + 1..7 {
            let five: Vec<Card> = (0..7).filter(|&i| i != skip_a && i != skip_b).map(|i| cards[i]).collect();
            let h = naive_five(&five);
            if best.is_none_or(|b| h > b) {
                best = Some(h);
            }
        }
    }
    best.expect("21 subsets")
}

/// Linear-interpolation percentile of the nonzero counts, floored to an
/// integer, then raised to `floor`. Uses the weighted form
/// `((100(j+1) - q) x_j + (q - 100 j) x_{j+1}) / 100` with `q = p (k - 1)`
/// in exact integer arithmetic; `percentile` must be an integer.
pub fn percentile_oracle(counts: &[usize], percentile: u32, floor: usize) -> usize {
    let mut xs: Vec<u128> = counts.iter().filter(|&&c| c > 0).map(|&c| c as u128).collect();
    if xs.is_empty() {
        return floor;
    }
    xs.sort();
    let k = xs.len() as u128;
    let q = percentile as u128 * (k - 1);
    let j = q / 100;
    let value = if j + 1 >= k {
        xs[(k - 1) as usize]
    } else {
        let (lo, hi) = (xs[j as usize], xs[j as usize + 1]);
        ((100 * (j + 1) - q) * lo + (q - 100 * j) * hi) / 100
    };
    (value as usize).max(floor)
}

/// Pearson correlation, two-pass.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}
