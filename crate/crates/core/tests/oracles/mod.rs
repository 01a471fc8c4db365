//! Independent reference implementations and seeded instance generators,
//! shared by the integration tests and the acceptance suite.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use socratic_core::augment::{InvalidCategory, PreferencePair};
use socratic_core::corpus::TrainingExample;
use socratic_core::tinylm::{PolicyParams, Vocab};

pub const WORDS: [&str; 5] = ["alpha", "beta", "gamma", "delta", "eps"];
pub const FD_STEP: f64 = 1e-4;
/// Gradient entries smaller than this are compared absolutely.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Best total weight over every partial injective row-to-column map.
pub fn brute_force_matching(weights: &[Vec<f64>]) -> f64 {
    fn go(weights: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
        if row == weights.len() {
            return 0.0;
        }
        let mut best = go(weights, row + 1, used);
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                best = best.max(weights[row][j] + go(weights, row + 1, used));
                used[j] = false;
            }
        }
        best
    }
    let cols = weights.first().map_or(0, Vec::len);
    go(weights, 0, &mut vec![false; cols])
}

fn is_subsequence<T: PartialEq>(needle: &[&T], haystack: &[T]) -> bool {
    let mut it = haystack.iter();
    needle.iter().all(|x| it.any(|y| y == *x))
}

/// Longest common subsequence by enumerating every subsequence of `a`.
pub fn exhaustive_lcs<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    assert!(a.len() <= 16);
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let len = mask.count_ones() as usize;
        if len <= best {
            continue;
        }
        let sub: Vec<&T> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| &a[i]).collect();
        if is_subsequence(&sub, b) {
            best = len;
        }
    }
    best
}

/// (precision, recall, f1) from the oracle LCS.
pub fn oracle_rouge<T: PartialEq>(candidate: &[T], reference: &[T]) -> (f64, f64, f64) {
    if candidate.is_empty() || reference.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let l = exhaustive_lcs(candidate, reference) as f64;
    let p = l / candidate.len() as f64;
    let r = l / reference.len() as f64;
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f)
}

pub fn random_tokens(rng: &mut impl Rng, max_len: usize, alphabet: usize) -> Vec<u8> {
    let len = rng.random_range(0..=max_len);
    (0..len).map(|_| rng.random_range(0..alphabet as u8)).collect()
}

pub fn random_matrix(rng: &mut impl Rng, max_dim: usize) -> Vec<Vec<f64>> {
    let m = rng.random_range(1..=max_dim);
    let n = rng.random_range(1..=max_dim);
    (0..m)
        .map(|_| {
            (0..n)
                .map(|_| match rng.random_range(0..4) {
                    // repeated values and zeros exercise ties and dropped edges
                    0 => 0.0,
                    1 => f64::from(rng.random_range(0..4u8)) / 4.0,
                    _ => rng.random::<f64>(),
                })
                .collect()
        })
        .collect()
}

pub fn vocab() -> Vocab {
    Vocab::build(WORDS)
}

pub fn random_params(rng: &mut impl Rng, buckets: usize) -> PolicyParams {
    let v = vocab();
    let logits = (0..buckets * v.len()).map(|_| rng.random_range(-2.0..2.0)).collect();
    PolicyParams::from_parts(v, buckets, logits).unwrap()
}

pub fn random_text(rng: &mut impl Rng) -> String {
    let len = rng.random_range(1..=4);
    (0..len).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

pub fn random_examples(rng: &mut impl Rng) -> Vec<TrainingExample> {
    (0..rng.random_range(1..=4))
        .map(|i| TrainingExample {
            prompt: format!("prompt {}", rng.random_range(0..3)),
            target: random_text(rng),
            dialogue_id: "d".into(),
            turn_index: i,
        })
        .collect()
}

pub fn random_pairs(rng: &mut impl Rng) -> Vec<PreferencePair> {
    (0..rng.random_range(1..=4))
        .map(|i| {
            let chosen = random_text(rng);
            let mut rejected = random_text(rng);
            while rejected == chosen {
                rejected = random_text(rng);
            }
            PreferencePair {
                prompt: format!("prompt {}", rng.random_range(0..3)),
                chosen,
                rejected,
                rejected_category: InvalidCategory::ALL[i % 4],
                dialogue_id: "d".into(),
                turn_index: i,
            }
        })
        .collect()
}

/// Central differences of `loss` along every logit.
pub fn numeric_gradient(params: &PolicyParams, loss: impl Fn(&PolicyParams) -> f64) -> Vec<f64> {
    let mut probe = params.clone();
    (0..params.logits().len())
        .map(|k| {
            let x = params.logits()[k];
            probe.logits_mut()[k] = x + FD_STEP;
            let up = loss(&probe);
            probe.logits_mut()[k] = x - FD_STEP;
            let down = loss(&probe);
            probe.logits_mut()[k] = x;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Largest `|a - n| / max(|a|, |n|, FD_FLOOR)` over all coordinates.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR))
        .fold(0.0, f64::max)
}

/// Dense copy of a sparse gradient table, laid out like the logits.
pub fn dense(grad: &socratic_core::train::GradTable, params: &PolicyParams) -> Vec<f64> {
    let v = params.vocab_size();
    (0..params.bucket_count() * v).map(|k| grad.get(k / v, k % v)).collect()
}
