//! Seeded workloads shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use socratic_core::augment::{InvalidCategory, PreferencePair};
use socratic_core::corpus::TrainingExample;
use socratic_core::tinylm::Vocab;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn weight_matrix(rng: &mut impl Rng, m: usize, n: usize) -> Vec<Vec<f64>> {
    (0..m).map(|_| (0..n).map(|_| rng.random()).collect()).collect()
}

const WORDS: [&str; 16] = [
    "what", "does", "line", "the", "loop", "return", "value", "of", "is", "list", "index", "why", "when", "k", "call",
    "empty",
];

pub fn sentence(rng: &mut impl Rng, len: usize) -> String {
    (0..len).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

pub fn vocab() -> Vocab {
    Vocab::build(WORDS)
}

pub fn examples(rng: &mut impl Rng, count: usize, prompts: usize) -> Vec<TrainingExample> {
    (0..count)
        .map(|i| TrainingExample {
            prompt: format!("prompt {}", i % prompts),
            target: sentence(rng, 8),
            dialogue_id: "bench".into(),
            turn_index: i,
        })
        .collect()
}

pub fn pairs(rng: &mut impl Rng, count: usize, prompts: usize) -> Vec<PreferencePair> {
    (0..count)
        .map(|i| PreferencePair {
            prompt: format!("prompt {}", i % prompts),
            chosen: sentence(rng, 8),
            rejected: sentence(rng, 8),
            rejected_category: InvalidCategory::ALL[i % 4],
            dialogue_id: "bench".into(),
            turn_index: i,
        })
        .collect()
}
