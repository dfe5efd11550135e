//! Fixtures and brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use dwellrec::dataset::{build_sessions, parse_clicks, ParseMode, Session};
use dwellrec::model::{batch_loss, forward, init_params, model_backward, Batch, ModelConfig, ModelParams};
use dwellrec::numeric::{finite_diff_check, FdOptions, FdReport, ParamSet};
use dwellrec::preprocess::Example;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const HAND20: &str = include_str!("../fixtures/hand20.csv");

pub fn hand_fixture() -> Vec<Session> {
    build_sessions(parse_clicks(HAND20.as_bytes(), ParseMode::Strict).unwrap().clicks)
}

/// Survivors of the default filter on `hand20.csv`, counted by hand:
/// item 50 has support 4 once the single-click session 3 is gone, item 70
/// likewise, item 60 has support 2, item 40 exactly 5. Session 12 keeps 17
/// clicks and is dropped; session 13 loses its item-60 click and keeps 16.
pub fn hand_survivors() -> Vec<(u64, Vec<u64>)> {
    let mut s13: Vec<u64> = [10, 20, 30].repeat(5);
    s13.push(10);
    vec![
        (1, vec![10, 20, 30]),
        (6, vec![30, 10]),
        (8, vec![40, 10]),
        (9, vec![40, 20]),
        (10, vec![40, 30, 40]),
        (13, s13),
        (15, vec![10, 10]),
        (16, vec![20, 30, 10, 20]),
    ]
}

/// Whole seconds by quotient and remainder, half rounds up.
pub fn dwell_oracle(session: &Session, cap: u32) -> Vec<usize> {
    session
        .clicks
        .windows(2)
        .map(|w| {
            let gap = w[1].timestamp_ms - w[0].timestamp_ms;
            let (q, r) = (gap / 1000, gap % 1000);
            let secs = q + i64::from(r >= 500);
            secs.min(cap as i64) as usize
        })
        .collect()
}

/// 1-based position of `target` in the descending sort of `row`, ties by index.
pub fn full_sort_rank(row: &[f64], target: usize) -> usize {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    idx.iter().position(|&i| i == target).unwrap() + 1
}

/// Two-sided signed-rank p-value by listing all 2^n sign patterns.
pub fn wilcoxon_enumeration(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|&d| d != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return 1.0;
    }
    // Average ranks of |d|, by counting.
    let ranks: Vec<f64> = d
        .iter()
        .map(|x| {
            let below = d.iter().filter(|y| y.abs() < x.abs()).count() as f64;
            let equal = d.iter().filter(|y| y.abs() == x.abs()).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect();
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    let total: f64 = ranks.iter().sum();
    let w = w_plus.min(total - w_plus);
    let mut hits = 0u64;
    for mask in 0u64..(1 << n) {
        let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if s <= w + 1e-9 {
            hits += 1;
        }
    }
    (2.0 * hits as f64 / (1u64 << n) as f64).min(1.0)
}

pub fn random_examples(seed: u64, n: usize, items: usize, buckets: usize, max_len: usize) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = rng.gen_range(1..=max_len);
            Example {
                session_id: i as u64,
                input_items: (0..len).map(|_| rng.gen_range(0..items)).collect(),
                input_dwell: (0..len).map(|_| rng.gen_range(0..buckets)).collect(),
                target_item: rng.gen_range(0..items),
            }
        })
        .collect()
}

/// Moves every parameter to a generic point; near-zero initial values give
/// gradients so small that finite-difference rounding dominates.
pub fn randomize(params: &mut ModelParams, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in params.params_mut() {
        p.value
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = rng.gen_range(-scale..scale));
    }
}

pub fn grad_check(config: ModelConfig, seed: u64) -> FdReport {
    let mut params = init_params(config, seed).unwrap();
    randomize(&mut params, seed ^ 0xabc, 1.0);
    let b = config.base();
    let buckets = match config {
        ModelConfig::DtRnn(d) => d.dwell_bucket_count,
        ModelConfig::ItRnn(_) => 1,
    };
    let examples = random_examples(seed + 1, 6, b.num_items, buckets, b.max_len);
    let batch = Batch::from_examples(&examples, b.max_len).unwrap();
    finite_diff_check(
        &mut params,
        |p| {
            let (_, trace) = forward(p, &batch)?;
            model_backward(p, &trace, &batch.targets)
        },
        |p| batch_loss(p, &batch),
        &FdOptions::default(),
    )
    .unwrap()
}
