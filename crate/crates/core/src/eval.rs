//! Multi-reference evaluation: Rouge-L similarity, optimal bipartite matching
//! between generated and ground-truth question sets, and TP/FP/FN accounting.
//!
//! Per turn, every generated question is weighed against every ground-truth
//! question. The maximum-weight matching pairs them one-to-one; matched
//! weights count as true positives, the shortfall `1 - w` of each matched
//! edge and every unmatched generation count as false positives, and every
//! unmatched reference counts as a false negative.

mod matching;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use matching::{matching_weight, max_weight_matching};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("weight matrix row {row} has {len} columns, expected {expected}")]
    Ragged { row: usize, len: usize, expected: usize },
    #[error("weight at ({row}, {col}) is {value}; weights must be finite and nonnegative")]
    BadWeight { row: usize, col: usize, value: f64 },
}

/// Lowercase, split on whitespace, and make each punctuation character a
/// standalone token. Underscores stay inside identifiers.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            flush(&mut current, &mut tokens);
        } else if is_punctuation(ch) {
            flush(&mut current, &mut tokens);
            tokens.push(ch.to_string());
        } else {
            current.extend(ch.to_lowercase());
        }
    }
    flush(&mut current, &mut tokens);
    tokens
}

fn is_punctuation(ch: char) -> bool {
    !ch.is_alphanumeric() && !ch.is_whitespace() && ch != '_'
}

fn flush(current: &mut String, tokens: &mut Vec<String>) {
    if !current.is_empty() {
        tokens.push(std::mem::take(current));
    }
}

/// Longest common subsequence length, two-row dynamic program.
pub fn lcs_length<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn rouge_l(candidate: &str, reference: &str) -> RougeScore {
    rouge_l_tokens(&tokenize(candidate), &tokenize(reference))
}

pub fn rouge_l_tokens<T: PartialEq>(candidate: &[T], reference: &[T]) -> RougeScore {
    if candidate.is_empty() || reference.is_empty() {
        return RougeScore::default();
    }
    let lcs = lcs_length(candidate, reference) as f64;
    let precision = lcs / candidate.len() as f64;
    let recall = lcs / reference.len() as f64;
    RougeScore {
        precision,
        recall,
        f1: harmonic_mean(precision, recall),
    }
}

fn harmonic_mean(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Edge weight between a generated question and a reference, in `[0, 1]`.
///
/// An embedding-based scorer can be plugged in here; only Rouge-L ships.
pub trait Similarity {
    fn score(&self, generated: &str, reference: &str) -> f64;
}

impl<F: Fn(&str, &str) -> f64> Similarity for F {
    fn score(&self, generated: &str, reference: &str) -> f64 {
        self(generated, reference)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RougeComponent {
    Precision,
    Recall,
    #[default]
    F1,
}

/// Rouge-L with the generated question as candidate.
#[derive(Debug, Clone, Copy, Default)]
pub struct RougeL {
    pub component: RougeComponent,
}

impl Similarity for RougeL {
    fn score(&self, generated: &str, reference: &str) -> f64 {
        let s = rouge_l(generated, reference);
        match self.component {
            RougeComponent::Precision => s.precision,
            RougeComponent::Recall => s.recall,
            RougeComponent::F1 => s.f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchedPair {
    pub generated: usize,
    pub reference: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub tp: f64,
    pub fp: f64,
    #[serde(rename = "fn")]
    pub fn_: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub matched_pairs: Vec<MatchedPair>,
    /// Set when both the generated and the reference sets were empty.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
}

impl MetricReport {
    pub fn from_counts(tp: f64, fp: f64, fn_: f64) -> Self {
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        Self {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1: harmonic_mean(precision, recall),
            matched_pairs: Vec::new(),
            degenerate: false,
        }
    }
}

/// Score one turn's generated questions against its ground-truth set.
pub fn turn_metrics(
    generated: &[String],
    ground_truth: &[String],
    weight: &dyn Similarity,
) -> Result<MetricReport, EvalError> {
    if generated.is_empty() && ground_truth.is_empty() {
        return Ok(MetricReport {
            degenerate: true,
            ..MetricReport::default()
        });
    }
    let matrix: Vec<Vec<f64>> = generated
        .iter()
        .map(|g| ground_truth.iter().map(|r| weight.score(g, r)).collect())
        .collect();
    let pairs = max_weight_matching(&matrix)?;

    let tp: f64 = pairs.iter().map(|&(i, j)| matrix[i][j]).sum();
    // equals the summed deficits (1 - w) of matched edges plus the unmatched
    // generations; written as m - tp so that tp + fp = m holds exactly in f64
    let fp = generated.len() as f64 - tp;
    let fn_ = (ground_truth.len() - pairs.len()) as f64;

    let mut report = MetricReport::from_counts(tp, fp, fn_);
    report.matched_pairs = pairs
        .into_iter()
        .map(|(i, j)| MatchedPair {
            generated: i,
            reference: j,
            weight: matrix[i][j],
        })
        .collect();
    Ok(report)
}

/// Micro-average: sum counts across turns, then derive P/R/F1.
pub fn aggregate(reports: &[MetricReport]) -> MetricReport {
    let (tp, fp, fn_) = reports.iter().fold((0.0, 0.0, 0.0), |(tp, fp, fn_), r| {
        (tp + r.tp, fp + r.fp, fn_ + r.fn_)
    });
    MetricReport::from_counts(tp, fp, fn_)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MacroAverage {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub turns: usize,
}

/// Unweighted mean of per-turn P/R/F1, skipping degenerate turns.
pub fn macro_average(reports: &[MetricReport]) -> MacroAverage {
    let live: Vec<&MetricReport> = reports.iter().filter(|r| !r.degenerate).collect();
    if live.is_empty() {
        return MacroAverage::default();
    }
    let n = live.len() as f64;
    MacroAverage {
        precision: live.iter().map(|r| r.precision).sum::<f64>() / n,
        recall: live.iter().map(|r| r.recall).sum::<f64>() / n,
        f1: live.iter().map(|r| r.f1).sum::<f64>() / n,
        turns: live.len(),
    }
}
