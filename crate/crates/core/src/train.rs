//! Supervised fine-tuning and direct preference optimization of
//! [`PolicyParams`] by plain gradient descent.
//!
//! SFT minimizes the mean negative log-likelihood of the valid questions and
//! yields the reference policy. DPO starts from a copy of the reference and
//! minimizes
//!
//! ```text
//! L = -mean log σ(β·[(log πθ(q_v|p) - log πref(q_v|p)) - (log πθ(q_iv|p) - log πref(q_iv|p))])
//! ```
//!
//! Both gradients are exact: each visited (bucket, target) step contributes
//! `softmax(row) - onehot(target)` to its row, scaled per loss.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::PreferencePair;
use crate::corpus::TrainingExample;
use crate::tinylm::{
    encode_checked, logsumexp, path_logprob, sequence_path, ModelError, PolicyParams, PromptHash,
    TokenId, Vocab,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty training batch")]
    EmptyBatch,
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("{phase} loss became non-finite ({loss}) at step {step}")]
    NonFinite { phase: Phase, step: usize, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Sft,
    Dpo,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Sft => "sft",
            Phase::Dpo => "dpo",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    FullBatch,
    Minibatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// DPO deviation coefficient; ignored by SFT.
    pub beta: f64,
    pub seed: u64,
    pub gradient_mode: GradientMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            epochs: 200,
            batch_size: 8,
            beta: 0.1,
            seed: 0,
            gradient_mode: GradientMode::FullBatch,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and nonnegative");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub phase: Phase,
    pub step: usize,
    /// Batch loss before this step's update.
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin_mean: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub log: Vec<LossReport>,
    /// Loss over the whole training set after the last update.
    pub final_loss: f64,
}

/// Sparse gradient over the logits table: only visited buckets hold rows.
#[derive(Debug, Clone, PartialEq)]
pub struct GradTable {
    vocab_size: usize,
    rows: BTreeMap<usize, Vec<f64>>,
}

impl GradTable {
    fn new(vocab_size: usize) -> Self {
        Self { vocab_size, rows: BTreeMap::new() }
    }

    pub fn get(&self, bucket: usize, token: usize) -> f64 {
        self.rows.get(&bucket).map_or(0.0, |r| r[token])
    }

    pub fn row(&self, bucket: usize) -> Option<&[f64]> {
        self.rows.get(&bucket).map(Vec::as_slice)
    }

    /// Buckets with a (possibly zero) gradient row, ascending.
    pub fn buckets(&self) -> impl Iterator<Item = usize> + '_ {
        self.rows.keys().copied()
    }

    /// Add `scale · (softmax(row) - onehot(target))` to the row of `bucket`.
    fn add_step(&mut self, logits: &[f64], bucket: usize, target: TokenId, scale: f64) {
        let lse = logsumexp(logits);
        let row = self
            .rows
            .entry(bucket)
            .or_insert_with(|| vec![0.0; self.vocab_size]);
        for (g, x) in row.iter_mut().zip(logits) {
            *g += scale * (x - lse).exp();
        }
        row[target as usize] -= scale;
    }

    /// `params ← params - lr · grad`.
    pub fn descend(&self, params: &mut PolicyParams, lr: f64) {
        for (&b, g) in &self.rows {
            for (x, gi) in params.row_mut(b).iter_mut().zip(g) {
                *x -= lr * gi;
            }
        }
    }
}

type Path = Vec<(usize, TokenId)>;

fn encode_path(params: &PolicyParams, prompt: PromptHash, text: &str) -> Result<Path, ModelError> {
    let ids = encode_checked(params, text)?;
    Ok(sequence_path(prompt, &ids, params.bucket_count()).collect())
}

fn path_logprob_of(params: &PolicyParams, path: &Path) -> f64 {
    path.iter()
        .map(|&(b, y)| {
            let row = params.row(b);
            row[y as usize] - logsumexp(row)
        })
        .sum()
}

fn encode_examples(params: &PolicyParams, examples: &[TrainingExample]) -> Result<Vec<Path>, ModelError> {
    examples
        .iter()
        .map(|e| encode_path(params, PromptHash::new(&e.prompt), &e.target))
        .collect()
}

fn sft_loss_paths(params: &PolicyParams, paths: &[&Path]) -> f64 {
    -paths.iter().map(|p| path_logprob_of(params, p)).sum::<f64>() / paths.len() as f64
}

fn sft_grad_paths(params: &PolicyParams, paths: &[&Path]) -> GradTable {
    let mut grad = GradTable::new(params.vocab_size());
    let scale = 1.0 / paths.len() as f64;
    for path in paths {
        for &(b, y) in path.iter() {
            grad.add_step(params.row(b), b, y, scale);
        }
    }
    grad
}

/// Mean negative log-likelihood of the targets given their prompts.
pub fn sft_loss(params: &PolicyParams, examples: &[TrainingExample]) -> Result<f64, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let paths = encode_examples(params, examples)?;
    Ok(sft_loss_paths(params, &paths.iter().collect::<Vec<_>>()))
}

pub fn sft_grad(params: &PolicyParams, examples: &[TrainingExample]) -> Result<GradTable, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let paths = encode_examples(params, examples)?;
    Ok(sft_grad_paths(params, &paths.iter().collect::<Vec<_>>()))
}

/// Numerically stable `ln(1 + e^z)`.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

struct EncodedPair {
    chosen: Path,
    rejected: Path,
    // frozen reference log-probabilities
    ref_chosen: f64,
    ref_rejected: f64,
}

fn encode_pairs(
    theta: &PolicyParams,
    reference: &PolicyParams,
    pairs: &[PreferencePair],
) -> Result<Vec<EncodedPair>, TrainError> {
    theta.ensure_compatible(reference)?;
    pairs
        .iter()
        .map(|pair| {
            let prompt = PromptHash::new(&pair.prompt);
            let chosen = encode_path(theta, prompt, &pair.chosen)?;
            let rejected = encode_path(theta, prompt, &pair.rejected)?;
            Ok(EncodedPair {
                ref_chosen: path_logprob_of(reference, &chosen),
                ref_rejected: path_logprob_of(reference, &rejected),
                chosen,
                rejected,
            })
        })
        .collect()
}

/// β-scaled implicit reward margin of one pair.
fn pair_margin(theta: &PolicyParams, pair: &EncodedPair, beta: f64) -> f64 {
    let chosen = path_logprob_of(theta, &pair.chosen) - pair.ref_chosen;
    let rejected = path_logprob_of(theta, &pair.rejected) - pair.ref_rejected;
    beta * (chosen - rejected)
}

fn dpo_loss_encoded(theta: &PolicyParams, pairs: &[&EncodedPair], beta: f64) -> (f64, f64) {
    let n = pairs.len() as f64;
    let (loss, margin) = pairs.iter().fold((0.0, 0.0), |(l, m), p| {
        let x = pair_margin(theta, p, beta);
        (l + softplus(-x), m + x)
    });
    (loss / n, margin / n)
}

fn dpo_grad_encoded(theta: &PolicyParams, pairs: &[&EncodedPair], beta: f64) -> GradTable {
    let mut grad = GradTable::new(theta.vocab_size());
    let n = pairs.len() as f64;
    for pair in pairs {
        let coef = beta * sigmoid(-pair_margin(theta, pair, beta)) / n;
        for &(b, y) in &pair.chosen {
            grad.add_step(theta.row(b), b, y, coef);
        }
        for &(b, y) in &pair.rejected {
            grad.add_step(theta.row(b), b, y, -coef);
        }
    }
    grad
}

/// DPO loss of `theta` against the frozen `reference`.
pub fn dpo_loss(
    theta: &PolicyParams,
    reference: &PolicyParams,
    pairs: &[PreferencePair],
    beta: f64,
) -> Result<f64, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let encoded = encode_pairs(theta, reference, pairs)?;
    Ok(dpo_loss_encoded(theta, &encoded.iter().collect::<Vec<_>>(), beta).0)
}

/// Mean β-scaled margin over the pairs.
pub fn dpo_margin_mean(
    theta: &PolicyParams,
    reference: &PolicyParams,
    pairs: &[PreferencePair],
    beta: f64,
) -> Result<f64, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let encoded = encode_pairs(theta, reference, pairs)?;
    Ok(dpo_loss_encoded(theta, &encoded.iter().collect::<Vec<_>>(), beta).1)
}

/// Gradient of [`dpo_loss`] with respect to `theta`'s logits.
pub fn dpo_grad(
    theta: &PolicyParams,
    reference: &PolicyParams,
    pairs: &[PreferencePair],
    beta: f64,
) -> Result<GradTable, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let encoded = encode_pairs(theta, reference, pairs)?;
    Ok(dpo_grad_encoded(theta, &encoded.iter().collect::<Vec<_>>(), beta))
}

/// Index batches for one run: the whole set per epoch, or seeded shuffled
/// minibatches.
fn schedule(n: usize, config: &TrainConfig) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut batches = Vec::new();
    for _ in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        match config.gradient_mode {
            GradientMode::FullBatch => batches.push(order),
            GradientMode::Minibatch => {
                order.shuffle(&mut rng);
                batches.extend(order.chunks(config.batch_size).map(<[usize]>::to_vec));
            }
        }
    }
    batches
}

fn check_finite(phase: Phase, step: usize, loss: f64) -> Result<(), TrainError> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(TrainError::NonFinite { phase, step, loss })
    }
}

/// Train the reference policy from zero-initialized logits.
pub fn train_sft(
    examples: &[TrainingExample],
    vocab: Vocab,
    bucket_count: usize,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train_sft_with(examples, vocab, bucket_count, config, |_| {})
}

/// [`train_sft`] with a callback receiving each step's report.
pub fn train_sft_with(
    examples: &[TrainingExample],
    vocab: Vocab,
    bucket_count: usize,
    config: &TrainConfig,
    mut on_step: impl FnMut(&LossReport),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if examples.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut params = PolicyParams::zeros(vocab, bucket_count)?;
    let paths = encode_examples(&params, examples)?;
    let mut log = Vec::new();
    for (step, batch) in schedule(paths.len(), config).into_iter().enumerate() {
        let batch: Vec<&Path> = batch.iter().map(|&i| &paths[i]).collect();
        let loss = sft_loss_paths(&params, &batch);
        check_finite(Phase::Sft, step, loss)?;
        let report = LossReport { phase: Phase::Sft, step, loss, margin_mean: None };
        on_step(&report);
        log.push(report);
        sft_grad_paths(&params, &batch).descend(&mut params, config.learning_rate);
    }
    let final_loss = sft_loss_paths(&params, &paths.iter().collect::<Vec<_>>());
    check_finite(Phase::Sft, log.len(), final_loss)?;
    Ok(TrainOutcome { params, log, final_loss })
}

/// Train the preference-aligned policy starting from a copy of `reference`.
pub fn train_dpo(
    pairs: &[PreferencePair],
    reference: &PolicyParams,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train_dpo_with(pairs, reference, config, |_| {})
}

pub fn train_dpo_with(
    pairs: &[PreferencePair],
    reference: &PolicyParams,
    config: &TrainConfig,
    mut on_step: impl FnMut(&LossReport),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut params = reference.clone();
    let encoded = encode_pairs(&params, reference, pairs)?;
    let mut log = Vec::new();
    for (step, batch) in schedule(encoded.len(), config).into_iter().enumerate() {
        let batch: Vec<&EncodedPair> = batch.iter().map(|&i| &encoded[i]).collect();
        let (loss, margin) = dpo_loss_encoded(&params, &batch, config.beta);
        check_finite(Phase::Dpo, step, loss)?;
        let report = LossReport { phase: Phase::Dpo, step, loss, margin_mean: Some(margin) };
        on_step(&report);
        log.push(report);
        dpo_grad_encoded(&params, &batch, config.beta).descend(&mut params, config.learning_rate);
    }
    let final_loss = dpo_loss_encoded(&params, &encoded.iter().collect::<Vec<_>>(), config.beta).0;
    check_finite(Phase::Dpo, log.len(), final_loss)?;
    Ok(TrainOutcome { params, log, final_loss })
}

/// `log π(text | prompt)` with the text tokenized by the policy's vocabulary.
pub fn text_logprob(params: &PolicyParams, prompt: &str, text: &str) -> Result<f64, ModelError> {
    let ids = encode_checked(params, text)?;
    Ok(path_logprob(params, PromptHash::new(prompt), &ids))
}
