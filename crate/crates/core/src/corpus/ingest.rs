//! One-way adapter for tagged plain-text debugging transcripts.
//!
//! Each file holds `<problem>`, `<bug_code>`, `<bug_desc>`, `<bug_fixes>`,
//! `<unit_tests>` and `<dialogue>` sections. Dialogue lines start with
//! `User:` (student) or `Assistant:` (instructor); a following line starting
//! with `<alt>` (usually tab-indented) is an alternative utterance for the
//! previous turn. For instructor turns the main utterance and every
//! alternative become ground-truth questions. Lines without a prefix continue
//! the previous utterance.

use std::path::{Path, PathBuf};

use thiserror::Error;
use walkdir::WalkDir;

use super::{validate, CorpusError, Dialogue, Problem, Speaker, TestCase, Turn};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: missing `<{section}>` section")]
    MissingSection { path: PathBuf, section: &'static str },
    #[error("{path}: dialogue line {line} precedes any speaker tag")]
    Orphan { path: PathBuf, line: usize },
    #[error(transparent)]
    Invalid(#[from] CorpusError),
}

/// Ingest every `*.txt` transcript below `dir`, in path order.
pub fn ingest_transcripts(dir: &Path) -> Result<Vec<Dialogue>, IngestError> {
    let mut files: Vec<PathBuf> = WalkDir::new(dir)
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    files.sort();

    let mut dialogues = Vec::with_capacity(files.len());
    for path in files {
        let text = std::fs::read_to_string(&path).map_err(|source| IngestError::Io {
            path: path.clone(),
            source,
        })?;
        let rel = path.strip_prefix(dir).unwrap_or(&path).with_extension("");
        let id = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        dialogues.push(parse_transcript(&id, &text, &path)?);
    }
    validate(&dialogues)?;
    Ok(dialogues)
}

/// Parse one transcript. `origin` is only used in error messages.
pub fn parse_transcript(id: &str, text: &str, origin: &Path) -> Result<Dialogue, IngestError> {
    let section = |name: &'static str| {
        extract_section(text, name).ok_or_else(|| IngestError::MissingSection {
            path: origin.to_path_buf(),
            section: name,
        })
    };
    let statement = section("problem")?.trim().to_string();
    let buggy_code = section("bug_code")?.trim_matches('\n').to_string();
    let bug_description = section("bug_desc")?.trim().to_string();
    let bug_fixes = non_empty_lines(section("bug_fixes")?);
    let test_cases = extract_section(text, "unit_tests")
        .map(|s| non_empty_lines(s).iter().map(|l| parse_test_case(l)).collect())
        .unwrap_or_default();
    let turns = parse_dialogue(section("dialogue")?, origin)?;

    Ok(Dialogue {
        problem: Problem {
            id: id.to_string(),
            statement,
            test_cases,
            bug_description,
            bug_fixes,
            buggy_code,
        },
        turns,
    })
}

fn extract_section<'a>(text: &'a str, name: &str) -> Option<&'a str> {
    let open = format!("<{name}>");
    let close = format!("</{name}>");
    let start = text.find(&open)? + open.len();
    let end = text[start..].find(&close)? + start;
    Some(&text[start..end])
}

fn non_empty_lines(s: &str) -> Vec<String> {
    s.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

fn parse_test_case(line: &str) -> TestCase {
    let body = line.strip_prefix("assert ").unwrap_or(line);
    match body.split_once(" == ") {
        Some((lhs, rhs)) => TestCase {
            input: lhs.trim().to_string(),
            expected_output: rhs.trim().to_string(),
        },
        None => TestCase {
            input: body.to_string(),
            expected_output: String::new(),
        },
    }
}

enum Target {
    Main,
    Alt,
}

fn parse_dialogue(body: &str, origin: &Path) -> Result<Vec<Turn>, IngestError> {
    let mut turns: Vec<Turn> = Vec::new();
    let mut target = Target::Main;
    for (n, raw) in body.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("User:") {
            turns.push(Turn::student(rest.trim()));
            target = Target::Main;
        } else if let Some(rest) = line.strip_prefix("Assistant:") {
            let rest = rest.trim();
            turns.push(Turn::instructor(rest, vec![rest.to_string()]));
            target = Target::Main;
        } else if let Some(rest) = line.strip_prefix("<alt>") {
            let turn = turns.last_mut().ok_or_else(|| IngestError::Orphan {
                path: origin.to_path_buf(),
                line: n + 1,
            })?;
            if turn.speaker == Speaker::Instructor {
                turn.ground_truth_questions.push(rest.trim().to_string());
            }
            target = Target::Alt;
        } else {
            let turn = turns.last_mut().ok_or_else(|| IngestError::Orphan {
                path: origin.to_path_buf(),
                line: n + 1,
            })?;
            let dest = match target {
                Target::Main => {
                    if turn.speaker == Speaker::Instructor {
                        append(&mut turn.ground_truth_questions[0], line);
                    }
                    &mut turn.utterance
                }
                // student alternatives are dropped, so their continuations are too
                Target::Alt if turn.speaker == Speaker::Student => continue,
                Target::Alt => turn.ground_truth_questions.last_mut().expect("alt pushed"),
            };
            append(dest, line);
        }
    }
    for turn in &mut turns {
        turn.ground_truth_questions.retain(|q| !q.is_empty());
    }
    Ok(turns)
}

fn append(dest: &mut String, line: &str) {
    if !dest.is_empty() {
        dest.push(' ');
    }
    dest.push_str(line);
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "<problem>\nWrite a function `top_k(lst, k)`.\n</problem>\n\
<bug_code>\n1. def top_k(lst, k):\n2.     return lst.pop(max(lst))\n</bug_code>\n\
<bug_desc>\nPops by index.\n</bug_desc>\n\
<bug_fixes>\nUse remove.\n\nOr sort.\n</bug_fixes>\n\
<unit_tests>\nassert top_k([1, 2, 3], 1) == [3]\n</unit_tests>\n\
<dialogue>\nUser: Hi. Can you help?\n\t<alt>Hello, help me?\nAssistant: Sure. What is wrong?\n\t<alt>What have you tried?\n\
and what happened?\nUser: It crashes.\nAssistant: Which line crashes?\n</dialogue>\n";

    #[test]
    fn parses_sections_and_alternatives() {
        let d = parse_transcript("top_k_1", SAMPLE, Path::new("x.txt")).unwrap();
        assert_eq!(d.problem.bug_fixes, vec!["Use remove.", "Or sort."]);
        assert_eq!(d.problem.test_cases[0].input, "top_k([1, 2, 3], 1)");
        assert_eq!(d.problem.test_cases[0].expected_output, "[3]");
        assert_eq!(d.turns.len(), 4);
        assert_eq!(d.turns[0].utterance, "Hi. Can you help?");
        assert!(d.turns[0].ground_truth_questions.is_empty());
        assert_eq!(
            d.turns[1].ground_truth_questions,
            vec!["Sure. What is wrong?", "What have you tried? and what happened?"]
        );
        assert_eq!(d.turns[3].ground_truth_questions, vec!["Which line crashes?"]);
    }

    #[test]
    fn missing_section() {
        let err = parse_transcript("x", "<problem>a</problem>", Path::new("x.txt")).unwrap_err();
        assert!(matches!(err, IngestError::MissingSection { section: "bug_code", .. }));
    }

    #[test]
    fn ingests_directory_in_path_order() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("b.txt"), SAMPLE).unwrap();
        std::fs::write(dir.path().join("a.txt"), SAMPLE).unwrap();
        std::fs::write(dir.path().join("notes.md"), "ignored").unwrap();
        let ds = ingest_transcripts(dir.path()).unwrap();
        let ids: Vec<_> = ds.iter().map(Dialogue::id).collect();
        assert_eq!(ids, vec!["a", "b"]);
    }
}
