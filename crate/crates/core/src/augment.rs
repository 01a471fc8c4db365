//! Negative-example augmentation: ask a chat model for one flawed question per
//! invalid category, have it grade each candidate, keep the ones graded as
//! invalid and pair them with the ground-truth questions of the same turn.

mod mock;
mod prompts;

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::sync::LazyLock;

use rayon::prelude::*;
use regex::Regex;
use serde::de::DeserializeOwned;
use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::corpus::{render_prompt_with, Dialogue, PromptOptions};
use crate::llm_gateway::{Gateway, GatewayError};

pub use mock::RuleBasedResponder;
pub use prompts::{build_consistency_prompt, build_generation_prompt};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("{message}; raw response: {raw:?}")]
    Format { message: String, raw: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("line {line}: {message}")]
    Jsonl { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum InvalidCategory {
    Irrelevant,
    Repeated,
    Direct,
    Premature,
}

impl InvalidCategory {
    pub const ALL: [Self; 4] = [Self::Irrelevant, Self::Repeated, Self::Direct, Self::Premature];

    pub fn name(self) -> &'static str {
        match self {
            Self::Irrelevant => "Irrelevant",
            Self::Repeated => "Repeated",
            Self::Direct => "Direct",
            Self::Premature => "Premature",
        }
    }
}

impl fmt::Display for InvalidCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Declaration order is the argmax tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ConsistencyLabel {
    Irrelevant,
    Repeated,
    Direct,
    Premature,
    Good,
    Incorrect,
}

impl ConsistencyLabel {
    pub const ALL: [Self; 6] = [
        Self::Irrelevant,
        Self::Repeated,
        Self::Direct,
        Self::Premature,
        Self::Good,
        Self::Incorrect,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Good => "Good",
            Self::Incorrect => "Incorrect",
            other => other.as_invalid().expect("invalid label").name(),
        }
    }

    /// `None` for Good and Incorrect.
    pub fn as_invalid(self) -> Option<InvalidCategory> {
        match self {
            Self::Irrelevant => Some(InvalidCategory::Irrelevant),
            Self::Repeated => Some(InvalidCategory::Repeated),
            Self::Direct => Some(InvalidCategory::Direct),
            Self::Premature => Some(InvalidCategory::Premature),
            Self::Good | Self::Incorrect => None,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl From<InvalidCategory> for ConsistencyLabel {
    fn from(c: InvalidCategory) -> Self {
        Self::ALL[c as usize]
    }
}

impl fmt::Display for ConsistencyLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedInvalidQuestion {
    pub category: InvalidCategory,
    pub reasoning: String,
    pub question: String,
    pub dialogue_id: String,
    pub turn_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub rejected_category: InvalidCategory,
    pub dialogue_id: String,
    pub turn_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSettings {
    pub model_name: String,
    pub max_tokens: u32,
    pub generation_temperature: f64,
    pub consistency_temperature: f64,
    /// Options for the policy prompt stored in each preference pair.
    pub prompt_options: PromptOptions,
}

impl Default for AugmentSettings {
    fn default() -> Self {
        Self {
            model_name: "gpt-4".into(),
            max_tokens: crate::llm_gateway::DEFAULT_MAX_TOKENS,
            generation_temperature: 0.5,
            consistency_temperature: 0.0,
            prompt_options: PromptOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedGeneration {
    /// At most one per category, in category order.
    pub items: Vec<GeneratedInvalidQuestion>,
    pub warnings: Vec<String>,
}

fn strip_decoration(s: &str) -> &str {
    s.trim_start_matches(|c: char| c.is_whitespace() || "#*-_>".contains(c) || c.is_ascii_digit() || c == '.' || c == ')')
}

fn strip_emphasis(s: &str) -> &str {
    s.trim_start_matches(['*', '_'])
}

fn strip_prefix_ci<'a>(s: &'a str, prefix: &str) -> Option<&'a str> {
    let head = s.get(..prefix.len())?;
    head.eq_ignore_ascii_case(prefix).then(|| &s[prefix.len()..])
}

/// A category header is the category name, optionally followed by the word
/// "question(s)", then either a colon or the end of the line.
fn category_header(line: &str) -> Option<(InvalidCategory, &str)> {
    let body = strip_decoration(line);
    for category in InvalidCategory::ALL {
        let Some(rest) = strip_prefix_ci(body, category.name()) else {
            continue;
        };
        let mut rest = strip_emphasis(rest);
        for word in [" questions", " question"] {
            if let Some(r) = strip_prefix_ci(rest, word) {
                rest = strip_emphasis(r);
                break;
            }
        }
        let rest = rest.trim_end().trim_end_matches(['*', '_']);
        if rest.is_empty() {
            return Some((category, ""));
        }
        if let Some(r) = rest.strip_prefix(':') {
            return Some((category, strip_emphasis(r.trim_start()).trim()));
        }
    }
    None
}

#[derive(Clone, Copy, PartialEq)]
enum Field {
    Loose,
    Reasoning,
    Question,
}

fn field_marker(line: &str) -> Option<(Field, &str)> {
    let body = strip_decoration(line);
    for (name, field) in [("reasoning", Field::Reasoning), ("question", Field::Question)] {
        if let Some(rest) = strip_prefix_ci(body, name) {
            let rest = strip_emphasis(rest).trim_start();
            if let Some(r) = rest.strip_prefix(':') {
                return Some((field, strip_emphasis(r.trim_start()).trim()));
            }
        }
    }
    None
}

fn join(parts: &[&str]) -> String {
    parts.iter().map(|s| s.trim()).filter(|s| !s.is_empty()).collect::<Vec<_>>().join(" ")
}

/// Split a section body into (reasoning, question). Without a question
/// marker the unmarked text is the question.
fn split_section(lines: &[&str]) -> (String, String) {
    let mut fields: [Vec<&str>; 3] = Default::default();
    let mut current = Field::Loose;
    for line in lines {
        match field_marker(line) {
            Some((field, rest)) => {
                current = field;
                fields[field as usize].push(rest);
            }
            None => fields[current as usize].push(line),
        }
    }
    let reasoning = join(&fields[Field::Reasoning as usize]);
    let question = if fields[Field::Question as usize].is_empty() {
        join(&fields[Field::Loose as usize])
    } else {
        join(&fields[Field::Question as usize])
    };
    (reasoning, question)
}

pub fn parse_generation_response(
    text: &str,
    dialogue_id: &str,
    turn_index: usize,
) -> Result<ParsedGeneration, AugmentError> {
    let mut sections: Vec<(InvalidCategory, Vec<&str>)> = Vec::new();
    for line in text.lines() {
        if let Some((category, rest)) = category_header(line) {
            sections.push((category, vec![rest]));
        } else if let Some((_, body)) = sections.last_mut() {
            body.push(line);
        }
    }
    if sections.is_empty() {
        return Err(AugmentError::Format {
            message: "no invalid-question category found".into(),
            raw: text.to_string(),
        });
    }

    let mut items: Vec<GeneratedInvalidQuestion> = Vec::new();
    let mut warnings = Vec::new();
    for (category, body) in sections {
        if items.iter().any(|q| q.category == category) {
            warnings.push(format!("{dialogue_id}#{turn_index}: duplicate {category} section ignored"));
            continue;
        }
        let (reasoning, question) = split_section(&body);
        if question.is_empty() {
            warnings.push(format!("{dialogue_id}#{turn_index}: {category} section has no question"));
            continue;
        }
        items.push(GeneratedInvalidQuestion {
            category,
            reasoning,
            question,
            dialogue_id: dialogue_id.to_string(),
            turn_index,
        });
    }
    for category in InvalidCategory::ALL {
        if !items.iter().any(|q| q.category == category) {
            warnings.push(format!("{dialogue_id}#{turn_index}: no {category} question"));
        }
    }
    items.sort_by_key(|q| q.category);
    Ok(ParsedGeneration { items, warnings })
}

/// Probabilities over the six labels, summing to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelDistribution([f64; 6]);

impl LabelDistribution {
    /// Clamp each weight to [0, 1] and divide by the total.
    pub fn from_weights(weights: [f64; 6]) -> Option<Self> {
        let clamped = weights.map(|w| if w.is_nan() { 0.0 } else { w.clamp(0.0, 1.0) });
        let total: f64 = clamped.iter().sum();
        (total > 0.0).then(|| Self(clamped.map(|w| w / total)))
    }

    pub fn get(&self, label: ConsistencyLabel) -> f64 {
        self.0[label.index()]
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    /// Highest weight; ties resolve to the earliest label in declaration order.
    pub fn argmax(&self) -> ConsistencyLabel {
        let mut best = ConsistencyLabel::Irrelevant;
        for label in ConsistencyLabel::ALL {
            if self.get(label) > self.get(best) {
                best = label;
            }
        }
        best
    }
}

impl Serialize for LabelDistribution {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(6))?;
        for label in ConsistencyLabel::ALL {
            map.serialize_entry(label.name(), &self.get(label))?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for LabelDistribution {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let map = BTreeMap::<ConsistencyLabel, f64>::deserialize(deserializer)?;
        let mut weights = [0.0; 6];
        for (label, w) in map {
            weights[label.index()] = w;
        }
        Self::from_weights(weights).ok_or_else(|| serde::de::Error::custom("all label weights are zero"))
    }
}

static LABEL_ENTRY: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r#"(?i)["']?\b(irrelevant|repeated|direct|premature|good|incorrect)\b["']?\s*:\s*([-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:e[-+]?\d+)?)"#,
    )
    .expect("label regex compiles")
});

/// Read a `{label: weight}` dictionary from free text. The last braced span
/// is searched when present; missing labels count as 0; the first entry for
/// a repeated label wins.
pub fn parse_label_distribution(text: &str) -> Result<LabelDistribution, AugmentError> {
    let span = text
        .rfind('{')
        .and_then(|start| text[start..].find('}').map(|end| &text[start..=start + end]))
        .unwrap_or(text);
    let mut weights = [None; 6];
    for caps in LABEL_ENTRY.captures_iter(span) {
        let label = ConsistencyLabel::ALL
            .into_iter()
            .find(|l| l.name().eq_ignore_ascii_case(&caps[1]))
            .expect("regex only matches label names");
        let value: f64 = caps[2].parse().expect("regex only matches numbers");
        weights[label.index()].get_or_insert(value);
    }
    let format_error = |message: &str| AugmentError::Format {
        message: message.into(),
        raw: text.to_string(),
    };
    if weights.iter().all(Option::is_none) {
        return Err(format_error("no label dictionary found"));
    }
    LabelDistribution::from_weights(weights.map(|w| w.unwrap_or(0.0)))
        .ok_or_else(|| format_error("label weights sum to zero"))
}

/// Keep candidates whose argmax label is one of the invalid categories,
/// relabelled with that argmax.
///
/// Panics if the two slices differ in length.
pub fn filter_consistent(
    candidates: &[GeneratedInvalidQuestion],
    labels: &[LabelDistribution],
) -> Vec<GeneratedInvalidQuestion> {
    assert_eq!(candidates.len(), labels.len(), "one distribution per candidate");
    candidates
        .iter()
        .zip(labels)
        .filter_map(|(q, dist)| {
            dist.argmax().as_invalid().map(|category| GeneratedInvalidQuestion { category, ..q.clone() })
        })
        .collect()
}

/// Valid-major cross product; pairs whose two texts coincide are dropped.
pub fn build_preference_pairs(
    prompt: &str,
    valid: &[String],
    invalid: &[GeneratedInvalidQuestion],
) -> Vec<PreferencePair> {
    let mut pairs = Vec::with_capacity(valid.len() * invalid.len());
    for chosen in valid {
        for q in invalid {
            if *chosen == q.question {
                continue;
            }
            pairs.push(PreferencePair {
                prompt: prompt.to_string(),
                chosen: chosen.clone(),
                rejected: q.question.clone(),
                rejected_category: q.category,
                dialogue_id: q.dialogue_id.clone(),
                turn_index: q.turn_index,
            });
        }
    }
    pairs
}

/// One generated question together with the grader's verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifiedQuestion {
    #[serde(flatten)]
    pub generated: GeneratedInvalidQuestion,
    /// `None` when the grader's reply could not be parsed.
    pub distribution: Option<LabelDistribution>,
    pub label: Option<ConsistencyLabel>,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub turns: usize,
    pub turns_without_questions: usize,
    pub generated: usize,
    pub unparsed_labels: usize,
    pub label_counts: BTreeMap<ConsistencyLabel, usize>,
    pub kept: usize,
    /// Fractions of all generated questions.
    pub kept_fraction: f64,
    pub good_fraction: f64,
    pub incorrect_fraction: f64,
    pub pairs: usize,
    pub warnings: Vec<String>,
}

impl ConsistencyReport {
    pub fn tally(
        turns: usize,
        turns_without_questions: usize,
        classified: &[ClassifiedQuestion],
        pairs: usize,
        warnings: Vec<String>,
    ) -> Self {
        let mut label_counts: BTreeMap<ConsistencyLabel, usize> =
            ConsistencyLabel::ALL.into_iter().map(|l| (l, 0)).collect();
        for q in classified {
            if let Some(label) = q.label {
                *label_counts.entry(label).or_default() += 1;
            }
        }
        let generated = classified.len();
        let kept = classified.iter().filter(|q| q.kept).count();
        let fraction = |n: usize| if generated == 0 { 0.0 } else { n as f64 / generated as f64 };
        Self {
            turns,
            turns_without_questions,
            generated,
            unparsed_labels: classified.iter().filter(|q| q.label.is_none()).count(),
            kept_fraction: fraction(kept),
            good_fraction: fraction(label_counts[&ConsistencyLabel::Good]),
            incorrect_fraction: fraction(label_counts[&ConsistencyLabel::Incorrect]),
            label_counts,
            kept,
            pairs,
            warnings,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentOutput {
    /// Sorted by (dialogue_id, turn_index, generator category).
    pub classified: Vec<ClassifiedQuestion>,
    /// Sorted by (dialogue_id, turn_index), valid-major within a turn.
    pub pairs: Vec<PreferencePair>,
    pub report: ConsistencyReport,
}

struct TurnResult {
    classified: Vec<ClassifiedQuestion>,
    pairs: Vec<PreferencePair>,
    warnings: Vec<String>,
    empty: bool,
}

fn augment_turn(
    gateway: &Gateway,
    dialogue: &Dialogue,
    turn_index: usize,
    settings: &AugmentSettings,
) -> Result<TurnResult, GatewayError> {
    let history = &dialogue.turns[..turn_index];
    let problem = &dialogue.problem;
    let reply = gateway.complete(&build_generation_prompt(problem, history, settings))?;
    let parsed = match parse_generation_response(&reply, dialogue.id(), turn_index) {
        Ok(parsed) => parsed,
        Err(e) => {
            return Ok(TurnResult {
                classified: Vec::new(),
                pairs: Vec::new(),
                warnings: vec![format!("{}#{turn_index}: {e}", dialogue.id())],
                empty: true,
            })
        }
    };
    let mut warnings = parsed.warnings;
    let mut classified = Vec::with_capacity(parsed.items.len());
    let mut kept = Vec::new();
    for q in parsed.items {
        let verdict = gateway.complete(&build_consistency_prompt(problem, history, &q.question, settings))?;
        let distribution = match parse_label_distribution(&verdict) {
            Ok(d) => Some(d),
            Err(e) => {
                warnings.push(format!("{}#{turn_index} {}: {e}", dialogue.id(), q.category));
                None
            }
        };
        let label = distribution.map(|d| d.argmax());
        if let Some(d) = distribution {
            kept.extend(filter_consistent(std::slice::from_ref(&q), &[d]));
        }
        classified.push(ClassifiedQuestion {
            kept: label.and_then(ConsistencyLabel::as_invalid).is_some(),
            generated: q,
            distribution,
            label,
        });
    }
    let prompt = render_prompt_with(problem, history, &settings.prompt_options);
    let pairs = build_preference_pairs(&prompt, &dialogue.turns[turn_index].ground_truth_questions, &kept);
    Ok(TurnResult {
        empty: classified.is_empty(),
        classified,
        pairs,
        warnings,
    })
}

/// Run generation and grading for every annotated turn. Turns are processed
/// in parallel; output order does not depend on scheduling.
pub fn augment_corpus(
    dialogues: &[Dialogue],
    gateway: &Gateway,
    settings: &AugmentSettings,
) -> Result<AugmentOutput, AugmentError> {
    let mut jobs: Vec<(&Dialogue, usize)> = dialogues
        .iter()
        .flat_map(|d| d.annotated_turns().map(move |t| (d, t)))
        .collect();
    jobs.sort_by(|a, b| a.0.id().cmp(b.0.id()).then(a.1.cmp(&b.1)));

    let results = jobs
        .par_iter()
        .map(|&(d, t)| augment_turn(gateway, d, t, settings))
        .collect::<Result<Vec<_>, _>>()?;

    let turns = results.len();
    let mut empty = 0;
    let mut classified = Vec::new();
    let mut pairs = Vec::new();
    let mut warnings = Vec::new();
    for r in results {
        empty += usize::from(r.empty);
        classified.extend(r.classified);
        pairs.extend(r.pairs);
        warnings.extend(r.warnings);
    }
    let report = ConsistencyReport::tally(turns, empty, &classified, pairs.len(), warnings);
    Ok(AugmentOutput { classified, pairs, report })
}

/// One JSON object per line, each terminated by a newline.
pub fn write_jsonl<T: Serialize>(mut out: impl Write, records: &[T]) -> std::io::Result<()> {
    for record in records {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Blank lines are skipped; line numbers in errors are 1-based.
pub fn read_jsonl<T: DeserializeOwned>(input: impl BufRead) -> Result<Vec<T>, AugmentError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| AugmentError::Jsonl {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fixtures::dialogue;
    use crate::llm_gateway::MockProvider;
    use proptest::prelude::*;

    fn q(category: InvalidCategory, text: &str) -> GeneratedInvalidQuestion {
        GeneratedInvalidQuestion {
            category,
            reasoning: String::new(),
            question: text.into(),
            dialogue_id: "d".into(),
            turn_index: 1,
        }
    }

    fn dist(weights: [f64; 6]) -> LabelDistribution {
        LabelDistribution::from_weights(weights).unwrap()
    }

    const WELL_FORMED: &str = "\
Irrelevant:
Reasoning: off topic.
Question: What is your favourite editor?

Repeated:
Reasoning: already asked.
Question: Do you know what might be the issue?

Direct:
Reasoning: gives it away.
Question: Is `pop` using the value as an index?

Premature:
Reasoning: suggests the fix.
Question: Why not use `remove`?
";

    #[test]
    fn well_formed_response() {
        let parsed = parse_generation_response(WELL_FORMED, "d", 1).unwrap();
        assert!(parsed.warnings.is_empty());
        assert_eq!(parsed.items.len(), 4);
        assert_eq!(parsed.items[0].reasoning, "off topic.");
        assert_eq!(parsed.items[0].question, "What is your favourite editor?");
        assert_eq!(parsed.items[3].question, "Why not use `remove`?");
        assert!(parsed.items.iter().all(|x| x.dialogue_id == "d" && x.turn_index == 1));
    }

    #[test]
    fn missing_section_warns() {
        let text = WELL_FORMED.split("Premature:").next().unwrap();
        let parsed = parse_generation_response(text, "d", 1).unwrap();
        assert_eq!(parsed.items.len(), 3);
        assert_eq!(parsed.warnings.len(), 1);
        assert!(parsed.warnings[0].contains("Premature"));
    }

    #[test]
    fn duplicate_section_keeps_first() {
        let text = format!("{WELL_FORMED}\nDirect:\nQuestion: second direct?\n");
        let parsed = parse_generation_response(&text, "d", 1).unwrap();
        assert_eq!(parsed.items.len(), 4);
        assert_eq!(parsed.items[2].question, "Is `pop` using the value as an index?");
        assert_eq!(parsed.warnings.len(), 1);
    }

    #[test]
    fn no_category_is_format_error() {
        match parse_generation_response("I cannot help with that.", "d", 0) {
            Err(AugmentError::Format { raw, .. }) => assert_eq!(raw, "I cannot help with that."),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn top_k_inline_response() {
        // the four invalid questions reported for the top_k example turn
        let text = "\
Irrelevant: What happens if you enter an empty list as the input?
Repeated: Do you know what might be the issue?
Direct: Are you sure you should be using the pop() method to remove the maximum element from the list?
Premature: Have you considered using the remove() method instead of pop()?";
        let parsed = parse_generation_response(text, "top_k", 2).unwrap();
        let questions: Vec<_> = parsed.items.iter().map(|x| x.question.as_str()).collect();
        assert_eq!(
            questions,
            [
                "What happens if you enter an empty list as the input?",
                "Do you know what might be the issue?",
                "Are you sure you should be using the pop() method to remove the maximum element from the list?",
                "Have you considered using the remove() method instead of pop()?",
            ]
        );
        assert_eq!(
            parsed.items.iter().map(|x| x.category).collect::<Vec<_>>(),
            InvalidCategory::ALL
        );
    }

    #[test]
    fn decorated_headers() {
        let text = "\
### 1. **IRRELEVANT QUESTION**
**Reasoning:** unrelated
**Question:** Which IDE do you use?
2) repeated:
- Question: Where is the issue?
  Continued on a second line?";
        let parsed = parse_generation_response(text, "d", 0).unwrap();
        assert_eq!(parsed.items[0].category, InvalidCategory::Irrelevant);
        assert_eq!(parsed.items[0].reasoning, "unrelated");
        assert_eq!(parsed.items[0].question, "Which IDE do you use?");
        assert_eq!(parsed.items[1].question, "Where is the issue? Continued on a second line?");
    }

    #[test]
    fn prose_mentioning_a_category_is_not_a_header() {
        let text = "Irrelevant:\nQuestion: a?\nDirect questions are risky, so here is one\n";
        let parsed = parse_generation_response(text, "d", 0).unwrap();
        assert_eq!(parsed.items.len(), 1);
    }

    #[test]
    fn example_distribution() {
        let d = parse_label_distribution(
            "{'Irrelevant': 0.6, 'Repeated': 0.2, 'Direct': 0.1, 'Premature': 0.05, 'Good': 0.05, 'Incorrect': 0}",
        )
        .unwrap();
        assert_eq!(d.argmax(), ConsistencyLabel::Irrelevant);
        assert!((d.get(ConsistencyLabel::Irrelevant) - 0.6).abs() < 1e-12);
        assert!((d.total() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn distribution_edge_cases() {
        assert_eq!(parse_label_distribution("{'Good': 1.0}").unwrap().argmax(), ConsistencyLabel::Good);
        let tie = parse_label_distribution(r#"Output: {"Direct": 0.5, "Premature": 0.5}"#).unwrap();
        assert_eq!(tie.argmax(), ConsistencyLabel::Direct);
        let drift = parse_label_distribution("{'good': 2, 'incorrect': -1, 'repeated': 0.5}").unwrap();
        assert!((drift.get(ConsistencyLabel::Good) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(drift.get(ConsistencyLabel::Incorrect), 0.0);
        assert!(parse_label_distribution("no idea").is_err());
        assert!(parse_label_distribution("{'Good': 0}").is_err());
    }

    #[test]
    fn reasoning_before_dictionary_is_ignored() {
        let text = "Direct: 0.9 seems high. Final answer: {'Premature': 0.7, 'Direct': 0.3}";
        assert_eq!(parse_label_distribution(text).unwrap().argmax(), ConsistencyLabel::Premature);
    }

    #[test]
    fn distribution_serde_round_trip() {
        let d = dist([0.1, 0.2, 0.3, 0.4, 0.0, 0.0]);
        let json = serde_json::to_string(&d).unwrap();
        assert!(json.starts_with(r#"{"Irrelevant":"#));
        let back: LabelDistribution = serde_json::from_str(&json).unwrap();
        for l in ConsistencyLabel::ALL {
            assert!((back.get(l) - d.get(l)).abs() < 1e-15);
        }
    }

    #[test]
    fn filtering() {
        let cands: Vec<_> = InvalidCategory::ALL.iter().map(|&c| q(c, c.name())).collect();
        let mut labels: Vec<_> = InvalidCategory::ALL
            .iter()
            .map(|&c| {
                let mut w = [0.0; 6];
                w[c as usize] = 1.0;
                dist(w)
            })
            .collect();
        labels[1] = dist([0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(filter_consistent(&cands, &labels).len(), 3);

        let incorrect = vec![dist([0.0, 0.0, 0.0, 0.0, 0.0, 1.0]); 4];
        assert!(filter_consistent(&cands, &incorrect).is_empty());

        let relabelled = filter_consistent(
            &[q(InvalidCategory::Direct, "x")],
            &[dist([0.0, 0.0, 0.2, 0.8, 0.0, 0.0])],
        );
        assert_eq!(relabelled[0].category, InvalidCategory::Premature);
    }

    #[test]
    fn pair_cross_product() {
        let valid: Vec<String> = (0..4).map(|i| format!("v{i}")).collect();
        let invalid: Vec<_> = InvalidCategory::ALL.iter().map(|&c| q(c, c.name())).collect();
        let pairs = build_preference_pairs("p", &valid, &invalid);
        assert_eq!(pairs.len(), 16);
        assert_eq!((pairs[0].chosen.as_str(), pairs[0].rejected.as_str()), ("v0", "Irrelevant"));
        assert_eq!((pairs[4].chosen.as_str(), pairs[4].rejected.as_str()), ("v1", "Irrelevant"));
        assert!(build_preference_pairs("p", &valid, &[]).is_empty());

        let colliding = build_preference_pairs("p", &["same".to_string()], &[q(InvalidCategory::Repeated, "same")]);
        assert!(colliding.is_empty());
    }

    #[test]
    fn jsonl_round_trip() {
        let pairs = build_preference_pairs(
            "p",
            &["a".to_string(), "b".to_string()],
            &[q(InvalidCategory::Direct, "c")],
        );
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &pairs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().next().unwrap().contains(r#""rejected_category":"Direct""#));
        let back: Vec<PreferencePair> = read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, pairs);
        assert!(matches!(
            read_jsonl::<PreferencePair>(&b"{}\n"[..]),
            Err(AugmentError::Jsonl { line: 1, .. })
        ));
    }

    #[test]
    fn pipeline_with_rule_based_mock() {
        let dialogues = vec![dialogue("b"), dialogue("a")];
        let gw = Gateway::new(RuleBasedResponder);
        let out = augment_corpus(&dialogues, &gw, &AugmentSettings::default()).unwrap();
        assert_eq!(out.report.turns, 2);
        assert_eq!(out.report.generated, 8);
        // no instructor turn precedes the annotated one, so the repeat grades Good
        assert_eq!(out.report.kept, 6);
        assert_eq!(out.report.label_counts[&ConsistencyLabel::Good], 2);
        // two ground-truth questions per annotated turn
        assert_eq!(out.pairs.len(), 2 * 2 * 3);
        assert_eq!(out.classified[0].generated.dialogue_id, "a");
        assert!(out.pairs.iter().all(|p| !p.prompt.is_empty() && p.chosen != p.rejected));

        let calls = gw.stats().network_calls;
        let again = augment_corpus(&dialogues, &gw, &AugmentSettings::default()).unwrap();
        assert_eq!(again, out);
        assert_eq!(gw.stats().network_calls, calls);
    }

    #[test]
    fn pipeline_drops_good_and_reports_fractions() {
        let dialogues = vec![dialogue("a")];
        let gw = Gateway::new(MockProvider::new(|ex: &crate::llm_gateway::ChatExchange| {
            let user = &ex.messages.last().unwrap().content;
            if ex.temperature > 0.0 {
                return Ok(WELL_FORMED.to_string());
            }
            let label = if user.contains("favourite editor") { "Good" } else { "Direct" };
            Ok(format!("{{'{label}': 1.0}}"))
        }));
        let out = augment_corpus(&dialogues, &gw, &AugmentSettings::default()).unwrap();
        assert_eq!(out.report.generated, 4);
        assert_eq!(out.report.kept, 3);
        assert_eq!(out.report.kept_fraction, 0.75);
        assert_eq!(out.report.good_fraction, 0.25);
        assert_eq!(out.report.label_counts[&ConsistencyLabel::Direct], 3);
        // the ground-truth "Do you know what might be the issue?" collides with the Repeated question
        assert_eq!(out.pairs.len(), 2 * 3 - 1);
        assert!(out.pairs.iter().all(|p| p.rejected_category == InvalidCategory::Direct));
    }

    #[test]
    fn unparsable_replies_become_warnings() {
        let gw = Gateway::new(MockProvider::constant("sorry"));
        let out = augment_corpus(&[dialogue("a")], &gw, &AugmentSettings::default()).unwrap();
        assert_eq!(out.report.turns_without_questions, 1);
        assert!(out.pairs.is_empty());
        assert_eq!(out.report.warnings.len(), 1);
    }

    proptest! {
        #[test]
        fn distributions_normalize(weights in proptest::array::uniform6(-0.5f64..3.0)) {
            let text = format!(
                "{{'Irrelevant': {}, 'Repeated': {}, 'Direct': {}, 'Premature': {}, 'Good': {}, 'Incorrect': {}}}",
                weights[0], weights[1], weights[2], weights[3], weights[4], weights[5]
            );
            match parse_label_distribution(&text) {
                Ok(d) => {
                    prop_assert!((d.total() - 1.0).abs() < 1e-9);
                    for l in ConsistencyLabel::ALL {
                        prop_assert!((0.0..=1.0).contains(&d.get(l)));
                    }
                }
                Err(_) => prop_assert!(weights.iter().all(|w| *w <= 0.0)),
            }
        }

        #[test]
        fn pair_count_formula(
            valid in proptest::collection::vec("[ab]{1,2}", 0..5),
            invalid in proptest::collection::vec("[ab]{1,2}", 0..5),
        ) {
            let invalid: Vec<_> = invalid.iter().map(|t| q(InvalidCategory::Direct, t)).collect();
            let collisions = valid
                .iter()
                .map(|v| invalid.iter().filter(|q| &q.question == v).count())
                .sum::<usize>();
            let pairs = build_preference_pairs("p", &valid, &invalid);
            prop_assert_eq!(pairs.len(), valid.len() * invalid.len() - collisions);
        }
    }
}
