//! Factorization-order masks against a pairwise precedence oracle, and
//! leakage checks on the query stream.

use cxl_core::encoder::{Encoder, EncoderConfig, PermutationPlan};
use cxl_core::numerics::Tape;
use cxl_core::text::{CLS_ID, NUM_SPECIAL};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// True when `a` comes strictly before `b` in `order`, found by scanning.
fn precedes(order: &[usize], a: usize, b: usize) -> bool {
    let ia = order.iter().position(|&p| p == a).unwrap();
    let ib = order.iter().position(|&p| p == b).unwrap();
    ia < ib
}

/// Number of oracle disagreements over both masks and the target set.
fn violations(plan: &PermutationPlan) -> usize {
    let order = plan.order();
    let n = order.len();
    let (cm, qm) = (plan.content_mask(), plan.query_mask());
    let mut bad = 0;
    for j in 0..n {
        for k in 0..n {
            let content = k == j || precedes(order, k, j);
            let query = precedes(order, k, j);
            bad += usize::from(cm[j * n + k] != content);
            bad += usize::from(qm[j * n + k] != query);
        }
    }
    let expected_targets: Vec<usize> = order[plan.cutoff()..].to_vec();
    bad += usize::from(plan.targets() != expected_targets.as_slice());
    bad
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for slot in 0..=p.len() {
            let mut q = p.clone();
            q.insert(slot, n - 1);
            out.push(q);
        }
    }
    out
}

pub fn exhaustive_up_to_five() {
    let mut plans = 0;
    let mut bad = 0;
    for n in 1..=5 {
        let perms = permutations(n);
        assert_eq!(perms.len(), (1..=n).product::<usize>());
        for order in perms {
            for cutoff in 0..=n {
                let plan = PermutationPlan::from_order(order.clone(), cutoff).unwrap();
                bad += violations(&plan);
                plans += 1;
            }
        }
    }
    assert_eq!(bad, 0);
    assert_eq!(plans, 2 + 3 * 2 + 4 * 6 + 5 * 24 + 6 * 120);
}

pub fn thousand_random_plans_up_to_64() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xa11);
    let mut bad = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=64);
        let fraction = rng.random_range(0.05..=1.0);
        let n_special = rng.random_range(0..=n.min(3));
        let pinned: Vec<usize> = (0..n_special).collect();
        let plan = PermutationPlan::sample_pinned(n, &pinned, fraction, &mut rng).unwrap();
        bad += violations(&plan);
        let mut sorted = plan.order().to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        let free = n - n_special;
        let expected = if free == 0 {
            0
        } else {
            ((fraction * free as f64).floor() as usize).clamp(1, free)
        };
        assert_eq!(plan.targets().len(), expected);
        assert!(pinned.iter().all(|&p| !plan.is_target(p)));
        let (cm, qm) = (plan.content_mask(), plan.query_mask());
        for j in 0..n {
            assert!(cm[j * n + j] && !qm[j * n + j]);
        }
    }
    assert_eq!(bad, 0);
}

pub fn three_position_worked_example() {
    let plan = PermutationPlan::from_order(vec![2, 0, 1], 1).unwrap();
    let rows =
        |m: Vec<bool>| -> Vec<Vec<usize>> { (0..3).map(|j| (0..3).filter(|&k| m[j * 3 + k]).collect()).collect() };
    assert_eq!(rows(plan.content_mask()), vec![vec![0, 2], vec![0, 1, 2], vec![2]]);
    assert_eq!(rows(plan.query_mask()), vec![vec![2], vec![0, 2], vec![]]);
}

fn leak_config(vocab_size: usize) -> EncoderConfig {
    EncoderConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_head: 4,
        d_inner: 16,
        max_len: 32,
        vocab_size,
        mem_len: 0,
        predict_fraction: 0.5,
        dropout: 0.0,
    }
}

/// Changing a token that is permutation-future to target `t` (including `t`
/// itself) leaves `t`'s query-stream state bitwise unchanged, and changing
/// a strictly later token leaves `t`'s log-probability bitwise unchanged.
pub fn future_tokens_do_not_leak() {
    let vocab = NUM_SPECIAL + 7;
    let mut enc = Encoder::init(leak_config(vocab), 5).unwrap();
    enc.jitter(0.3, &mut ChaCha8Rng::seed_from_u64(6));
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut checked = 0;
    for _ in 0..20 {
        let n = rng.random_range(2..=16);
        let mut ids = vec![CLS_ID];
        ids.extend((1..n).map(|_| rng.random_range(NUM_SPECIAL..vocab)));
        let plan = PermutationPlan::for_tokens(&ids, 0.5, &mut rng).unwrap();
        let tape = Tape::new();
        let (_, g) = enc.two_stream(&tape, &ids, &plan, None).unwrap();
        let g = g.value();
        let lp = enc.target_log_probs(&tape, &ids, &plan, None).unwrap().unwrap().value();
        for (ti, &t) in plan.targets().iter().enumerate() {
            for p in 0..n {
                if plan.rank(p) < plan.rank(t) || p == 0 {
                    continue;
                }
                let mut mutated = ids.clone();
                mutated[p] = NUM_SPECIAL + (ids[p] - NUM_SPECIAL + 1) % (vocab - NUM_SPECIAL);
                let tape2 = Tape::new();
                let (_, g2) = enc.two_stream(&tape2, &mutated, &plan, None).unwrap();
                assert_eq!(g.row(t), g2.value().row(t), "query state at {t} moved when {p} changed");
                if p != t {
                    let lp2 = enc
                        .target_log_probs(&tape2, &mutated, &plan, None)
                        .unwrap()
                        .unwrap()
                        .value();
                    assert_eq!((lp.data()[ti] - lp2.data()[ti]).abs(), 0.0);
                }
                checked += 1;
            }
        }
    }
    assert!(checked > 100, "only {checked} mutations exercised");
}

/// Sanity check that the leakage test can fail: an earlier token does move
/// a later target's query state.
pub fn past_tokens_do_reach_the_query_stream() {
    let vocab = NUM_SPECIAL + 7;
    let mut enc = Encoder::init(leak_config(vocab), 5).unwrap();
    enc.jitter(0.3, &mut ChaCha8Rng::seed_from_u64(6));
    let ids = vec![CLS_ID, 3, 4, 5, 6];
    let plan = PermutationPlan::from_order(vec![0, 1, 2, 3, 4], 3).unwrap();
    let tape = Tape::new();
    let g = enc.two_stream(&tape, &ids, &plan, None).unwrap().1.value();
    let mut mutated = ids.clone();
    mutated[1] = 8;
    let g2 = enc.two_stream(&tape, &mutated, &plan, None).unwrap().1.value();
    assert_ne!(g.row(3), g2.row(3));
    assert_eq!(g.row(1), g2.row(1));
}

/// Every shared check, in a fixed order.
pub const CASES: &[(&str, fn())] = &[
    ("exhaustive_up_to_five", exhaustive_up_to_five),
    ("thousand_random_plans_up_to_64", thousand_random_plans_up_to_64),
    ("three_position_worked_example", three_position_worked_example),
    ("future_tokens_do_not_leak", future_tokens_do_not_leak),
    (
        "past_tokens_do_reach_the_query_stream",
        past_tokens_do_reach_the_query_stream,
    ),
];
