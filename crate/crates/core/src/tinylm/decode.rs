use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{softmax, ModelError, PolicyParams, PromptHash, TokenId, Vocab};

/// Argmax decoding; ties go to the lowest token id. Stops after EOS or
/// `max_len` tokens.
pub fn greedy_decode(params: &PolicyParams, prompt: &str, max_len: usize) -> Vec<TokenId> {
    let hash = PromptHash::new(prompt);
    let mut out = Vec::new();
    let mut prev = Vocab::BOS;
    while out.len() < max_len {
        let row = params.row(hash.bucket(prev, params.bucket_count()));
        let next = argmax(row);
        out.push(next);
        if next == Vocab::EOS {
            break;
        }
        prev = next;
    }
    out
}

fn argmax(row: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best as TokenId
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    /// Nucleus mass in `(0, 1]`.
    pub p: f64,
    pub temperature: f64,
    pub k_return: usize,
    pub max_len: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            p: 0.9,
            temperature: 1.0,
            k_return: 5,
            max_len: 32,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(ModelError::Sampling(format!("p = {} not in (0, 1]", self.p)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(ModelError::Sampling(format!(
                "temperature = {} must be positive",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// The renormalized nucleus of one logits row: tokens in descending
/// probability order (ties by lower id), truncated to the smallest prefix
/// whose mass reaches `p`.
pub fn nucleus_distribution(row: &[f64], p: f64, temperature: f64) -> Vec<(TokenId, f64)> {
    let scaled: Vec<f64> = row.iter().map(|x| x / temperature).collect();
    let probs = softmax(&scaled);
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));

    let mut kept = Vec::new();
    let mut mass = 0.0;
    for i in order {
        kept.push((i as TokenId, probs[i]));
        mass += probs[i];
        if mass >= p {
            break;
        }
    }
    for entry in &mut kept {
        entry.1 /= mass;
    }
    kept
}

/// Draw `k_return` independent sequences from one generator seeded with
/// `seed`.
pub fn nucleus_sample(
    params: &PolicyParams,
    prompt: &str,
    config: &SamplingConfig,
    seed: u64,
) -> Result<Vec<Vec<TokenId>>, ModelError> {
    config.validate()?;
    let hash = PromptHash::new(prompt);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(config.k_return);
    for _ in 0..config.k_return {
        let mut seq = Vec::new();
        let mut prev = Vocab::BOS;
        while seq.len() < config.max_len {
            let row = params.row(hash.bucket(prev, params.bucket_count()));
            let dist = nucleus_distribution(row, config.p, config.temperature);
            let next = draw(&dist, rng.random::<f64>());
            seq.push(next);
            if next == Vocab::EOS {
                break;
            }
            prev = next;
        }
        out.push(seq);
    }
    Ok(out)
}

fn draw(dist: &[(TokenId, f64)], u: f64) -> TokenId {
    let mut acc = 0.0;
    for &(token, prob) in dist {
        acc += prob;
        if u < acc {
            return token;
        }
    }
    dist.last().expect("nucleus is never empty").0
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::super::*;
    use super::*;

    #[test]
    fn eos_dominant() {
        let mut p = PolicyParams::zeros(vocab(4), 8).unwrap();
        for b in 0..8 {
            p.row_mut(b)[Vocab::EOS as usize] = 5.0;
        }
        assert_eq!(greedy_decode(&p, "anything", 10), vec![Vocab::EOS]);
    }

    #[test]
    fn constructed_path() {
        let mut p = PolicyParams::zeros(vocab(4), 4096).unwrap();
        let (a, b) = (4, 6);
        let h = PromptHash::new("q");
        p.row_mut(h.bucket(Vocab::BOS, 4096))[a as usize] = 3.0;
        p.row_mut(h.bucket(a, 4096))[b as usize] = 3.0;
        p.row_mut(h.bucket(b, 4096))[Vocab::EOS as usize] = 3.0;
        assert_eq!(greedy_decode(&p, "q", 10), vec![a, b, Vocab::EOS]);
        assert_eq!(greedy_decode(&p, "q", 2), vec![a, b]);
    }

    #[test]
    fn ties_take_lowest_id() {
        let mut row = vec![0.0; 9];
        row[3] = 1.0;
        row[7] = 1.0;
        assert_eq!(argmax(&row), 3);
        let nucleus = nucleus_distribution(&row, 1e-9, 1.0);
        assert_eq!(nucleus, vec![(3, 1.0)]);
    }

    #[test]
    fn full_nucleus_is_model_softmax() {
        let p = random_params(vocab(6), 4, 3);
        for b in 0..4 {
            let full = softmax(p.row(b));
            let mut dist = nucleus_distribution(p.row(b), 1.0, 1.0);
            assert_eq!(dist.len(), full.len());
            dist.sort_by_key(|d| d.0);
            for (i, (t, prob)) in dist.iter().enumerate() {
                assert_eq!(*t as usize, i);
                assert!((prob - full[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tiny_p_matches_greedy() {
        let p = random_params(vocab(6), 64, 5);
        let config = SamplingConfig { p: 1e-12, k_return: 3, ..Default::default() };
        let greedy = greedy_decode(&p, "prompt", config.max_len);
        for s in nucleus_sample(&p, "prompt", &config, 99).unwrap() {
            assert_eq!(s, greedy);
        }
    }

    #[test]
    fn seeded_determinism() {
        let p = random_params(vocab(6), 64, 8);
        let config = SamplingConfig::default();
        let a = nucleus_sample(&p, "prompt", &config, 7).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a, nucleus_sample(&p, "prompt", &config, 7).unwrap());
        assert!(a.iter().all(|s| !s.is_empty() && s.len() <= config.max_len));
    }

    #[test]
    fn shift_invariant_decoding() {
        let p = random_params(vocab(6), 16, 21);
        let mut shifted = p.clone();
        for x in shifted.logits_mut() {
            *x += 0.5;
        }
        assert_eq!(greedy_decode(&p, "s", 20), greedy_decode(&shifted, "s", 20));
        let config = SamplingConfig::default();
        assert_eq!(
            nucleus_sample(&p, "s", &config, 1).unwrap(),
            nucleus_sample(&shifted, "s", &config, 1).unwrap()
        );
    }

    #[test]
    fn sampling_matches_nucleus_frequencies() {
        let p = random_params(vocab(3), 1, 4);
        let config = SamplingConfig { p: 1.0, k_return: 20_000, max_len: 1, ..Default::default() };
        let draws = nucleus_sample(&p, "", &config, 0).unwrap();
        let probs = softmax(p.row(0));
        for (t, &prob) in probs.iter().enumerate() {
            let freq = draws.iter().filter(|s| s[0] as usize == t).count() as f64 / 20_000.0;
            assert!((freq - prob).abs() < 0.015, "token {t}: {freq} vs {prob}");
        }
    }

    #[test]
    fn rejects_bad_config() {
        let p = random_params(vocab(2), 2, 0);
        for config in [
            SamplingConfig { p: 0.0, ..Default::default() },
            SamplingConfig { p: 1.5, ..Default::default() },
            SamplingConfig { temperature: 0.0, ..Default::default() },
        ] {
            assert!(nucleus_sample(&p, "", &config, 0).is_err());
        }
    }
}
