//! Dialogue corpus schema, parsing, per-turn example splitting and prompt
//! rendering.
//!
//! A corpus document is JSON tagged with [`CORPUS_VERSION`]. Each dialogue
//! carries its problem metadata and an ordered list of turns; instructor turns
//! may hold several interchangeable ground-truth questions.

mod ingest;

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ingest::{ingest_transcripts, parse_transcript, IngestError};

/// Version tag every corpus document must carry.
pub const CORPUS_VERSION: &str = "socratic-corpus/1";

/// Version of the prompt template below. Bump whenever a byte of the
/// rendered prompt changes.
pub const PROMPT_TEMPLATE_VERSION: &str = "socratic-prompt/1";

/// System message heading every generation prompt.
pub const SYSTEM_MESSAGE: &str = "You are a helpful instructor who guides a student through debugging their \
code. Ask a single Socratic question that helps the student discover the bug on their own. \
Do not reveal the bug and do not suggest code changes.";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed corpus at byte {offset} (line {line}, column {column}), field `{path}`: {message}")]
    Parse {
        offset: usize,
        line: usize,
        column: usize,
        path: String,
        message: String,
    },
    #[error("unsupported corpus version `{found}` (expected `{CORPUS_VERSION}`)")]
    Version { found: String },
    #[error("invalid corpus at `{path}`: {message}")]
    Invalid { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub input: String,
    pub expected_output: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub statement: String,
    pub test_cases: Vec<TestCase>,
    pub bug_description: String,
    pub bug_fixes: Vec<String>,
    pub buggy_code: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Student,
    Instructor,
}

impl Speaker {
    pub fn label(self) -> &'static str {
        match self {
            Speaker::Student => "Student",
            Speaker::Instructor => "Instructor",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub utterance: String,
    #[serde(default)]
    pub ground_truth_questions: Vec<String>,
}

impl Turn {
    pub fn student(utterance: impl Into<String>) -> Self {
        Self {
            speaker: Speaker::Student,
            utterance: utterance.into(),
            ground_truth_questions: Vec::new(),
        }
    }

    pub fn instructor(utterance: impl Into<String>, questions: Vec<String>) -> Self {
        Self {
            speaker: Speaker::Instructor,
            utterance: utterance.into(),
            ground_truth_questions: questions,
        }
    }

    /// An instructor turn with at least one ground-truth question.
    pub fn is_annotated(&self) -> bool {
        self.speaker == Speaker::Instructor && !self.ground_truth_questions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub problem: Problem,
    pub turns: Vec<Turn>,
}

impl Dialogue {
    /// Dialogues are keyed by their problem id, which is unique per corpus.
    pub fn id(&self) -> &str {
        &self.problem.id
    }

    /// Indices of instructor turns carrying ground-truth questions.
    pub fn annotated_turns(&self) -> impl Iterator<Item = usize> + '_ {
        self.turns
            .iter()
            .enumerate()
            .filter(|(_, t)| t.is_annotated())
            .map(|(i, _)| i)
    }
}

/// One (prompt, valid question) supervision target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub prompt: String,
    pub target: String,
    pub dialogue_id: String,
    pub turn_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptOptions {
    /// Show the reference bug fixes to the question generator.
    pub include_bug_fixes: bool,
}

impl Default for PromptOptions {
    fn default() -> Self {
        Self {
            include_bug_fixes: true,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CorpusDocument {
    version: String,
    dialogues: Vec<Dialogue>,
}

#[derive(Deserialize)]
struct VersionProbe {
    version: Option<String>,
}

/// Parse a corpus document, checking the version tag and schema invariants.
pub fn parse_corpus(bytes: &[u8]) -> Result<Vec<Dialogue>, CorpusError> {
    let probe: VersionProbe =
        serde_json::from_slice(bytes).map_err(|e| parse_error(bytes, "<root>".into(), e))?;
    match probe.version {
        Some(v) if v == CORPUS_VERSION => {}
        Some(v) => return Err(CorpusError::Version { found: v }),
        None => {
            return Err(CorpusError::Parse {
                offset: 0,
                line: 1,
                column: 1,
                path: "version".into(),
                message: "missing field `version`".into(),
            })
        }
    }

    let mut de = serde_json::Deserializer::from_slice(bytes);
    let doc: CorpusDocument = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        parse_error(bytes, path, e.into_inner())
    })?;
    validate(&doc.dialogues)?;
    Ok(doc.dialogues)
}

fn parse_error(bytes: &[u8], path: String, err: serde_json::Error) -> CorpusError {
    let (line, column) = (err.line(), err.column());
    CorpusError::Parse {
        offset: byte_offset(bytes, line, column),
        line,
        column,
        path,
        message: err.to_string(),
    }
}

fn byte_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start = bytes
        .split_inclusive(|&b| b == b'\n')
        .take(line - 1)
        .map(<[u8]>::len)
        .sum::<usize>();
    (line_start + column.saturating_sub(1)).min(bytes.len())
}

/// Serialize dialogues into a versioned corpus document.
pub fn serialize_corpus(dialogues: &[Dialogue]) -> String {
    let doc = CorpusDocument {
        version: CORPUS_VERSION.to_string(),
        dialogues: dialogues.to_vec(),
    };
    let mut out = serde_json::to_string_pretty(&doc).expect("corpus serializes");
    out.push('\n');
    out
}

/// Check the schema invariants that serde cannot express.
pub fn validate(dialogues: &[Dialogue]) -> Result<(), CorpusError> {
    let invalid = |path: String, message: &str| CorpusError::Invalid {
        path,
        message: message.to_string(),
    };
    let mut seen = HashSet::new();
    for (d, dialogue) in dialogues.iter().enumerate() {
        let problem = &dialogue.problem;
        if problem.id.is_empty() {
            return Err(invalid(format!("dialogues[{d}].problem.id"), "empty id"));
        }
        if !seen.insert(problem.id.as_str()) {
            return Err(invalid(
                format!("dialogues[{d}].problem.id"),
                &format!("duplicate id `{}`", problem.id),
            ));
        }
        if problem.statement.trim().is_empty() {
            return Err(invalid(
                format!("dialogues[{d}].problem.statement"),
                "empty statement",
            ));
        }
        for (t, turn) in dialogue.turns.iter().enumerate() {
            let path = format!("dialogues[{d}].turns[{t}].ground_truth_questions");
            if turn.speaker == Speaker::Student && !turn.ground_truth_questions.is_empty() {
                return Err(invalid(path, "student turns cannot carry questions"));
            }
            if turn.ground_truth_questions.iter().any(|q| q.trim().is_empty()) {
                return Err(invalid(path, "empty question"));
            }
        }
        if !dialogue.turns.iter().any(Turn::is_annotated) {
            return Err(invalid(
                format!("dialogues[{d}].turns"),
                "no instructor turn with ground-truth questions",
            ));
        }
    }
    Ok(())
}

/// Fan a dialogue out into one example per ground-truth question per
/// annotated instructor turn. Questions of the same turn share a prompt.
pub fn split_turns(dialogue: &Dialogue) -> Vec<TrainingExample> {
    split_turns_with(dialogue, &PromptOptions::default())
}

pub fn split_turns_with(dialogue: &Dialogue, options: &PromptOptions) -> Vec<TrainingExample> {
    let mut out = Vec::new();
    for turn_index in dialogue.annotated_turns() {
        let prompt = render_prompt_with(&dialogue.problem, &dialogue.turns[..turn_index], options);
        for q in &dialogue.turns[turn_index].ground_truth_questions {
            out.push(TrainingExample {
                prompt: prompt.clone(),
                target: q.clone(),
                dialogue_id: dialogue.id().to_string(),
                turn_index,
            });
        }
    }
    out
}

pub fn render_prompt(problem: &Problem, history: &[Turn]) -> String {
    render_prompt_with(problem, history, &PromptOptions::default())
}

/// Render the generation prompt: system message, metadata block, then one
/// speaker-tagged line per history turn.
pub fn render_prompt_with(problem: &Problem, history: &[Turn], options: &PromptOptions) -> String {
    let mut out = String::new();
    out.push_str(SYSTEM_MESSAGE);
    out.push_str("\n\n");
    write_metadata(&mut out, problem, options.include_bug_fixes);
    for turn in history {
        let _ = writeln!(out, "{}: {}", turn.speaker.label(), turn.utterance);
    }
    out
}

/// The labeled metadata block shared by the generation prompt and the
/// augmentation prompts. Ends with the conversation header.
pub(crate) fn write_metadata(out: &mut String, problem: &Problem, include_bug_fixes: bool) {
    let _ = writeln!(out, "Problem Description:\n{}\n", problem.statement.trim_end());
    out.push_str("Test Cases:\n");
    for case in &problem.test_cases {
        let _ = writeln!(out, "{} => {}", case.input, case.expected_output);
    }
    let _ = writeln!(out, "\nStudent's Buggy Code:\n{}\n", problem.buggy_code.trim_end());
    let _ = writeln!(out, "Bug Description:\n{}\n", problem.bug_description.trim_end());
    if include_bug_fixes {
        out.push_str("Bug Fixes:\n");
        for fix in &problem.bug_fixes {
            let _ = writeln!(out, "- {fix}");
        }
        out.push('\n');
    }
    out.push_str("Conversation so far:\n");
}
