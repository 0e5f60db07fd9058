//! AUROC against the pairwise definition on tie-heavy instances.

use cxl_core::harness::auroc;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Share of (positive, negative) pairs ordered correctly, ties one half.
pub fn pairwise(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                den += 1.0;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

pub fn worked_example_is_exact() {
    assert_eq!(
        auroc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(),
        0.75
    );
}

pub fn thousand_tied_instances_match_pairwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xa0c);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < 1000 {
        let n = rng.random_range(2..=120);
        // At most 0.7 n distinct values leaves at least 0.3 n scores tied.
        let levels = rng.random_range(1..=(7 * n / 10).max(1));
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..levels) as f64 / levels as f64)
            .collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            continue;
        }
        let tied = scores
            .iter()
            .filter(|s| scores.iter().filter(|t| t == s).count() > 1)
            .count();
        assert!(tied * 10 >= 3 * n, "only {tied} of {n} scores tied");
        worst = worst.max((auroc(&scores, &labels).unwrap() - pairwise(&scores, &labels)).abs());
        done += 1;
    }
    assert!(worst <= 1e-12, "max deviation {worst}");
}

/// Every shared check, in a fixed order.
pub const CASES: &[(&str, fn())] = &[
    ("worked_example_is_exact", worked_example_is_exact),
    (
        "thousand_tied_instances_match_pairwise_oracle",
        thousand_tied_instances_match_pairwise_oracle,
    ),
];
