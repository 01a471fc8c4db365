use crate::llm_gateway::{ChatExchange, ChatProvider, ProviderFailure};

use super::prompts::CANDIDATE_LABEL;

const IRRELEVANT: &str = "What happens if you enter an empty list as the input?";
const FALLBACK: &str = "Can you walk me through what your code does line by line?";
const DIRECT_PREFIX: &str = "Is the bug that";
const PREMATURE_PREFIX: &str = "Have you considered this change:";

/// Offline stand-in for the augmentation model. It reads the prompts this
/// crate renders and answers deterministically:
///
/// * generation: a fixed irrelevant question, the last instructor utterance
///   as the repeat (a generic question when there is none, which grades as
///   Good), the bug description turned into a question, and the first bug
///   fix turned into a suggestion;
/// * grading: recognises those four shapes and puts 0.85 on the match.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleBasedResponder;

impl RuleBasedResponder {
    pub fn respond(&self, exchange: &ChatExchange) -> String {
        let context = exchange.messages.last().map(|m| m.content.as_str()).unwrap_or("");
        match candidate(context) {
            Some(question) => grade(context, question),
            None => generate(context),
        }
    }
}

impl ChatProvider for RuleBasedResponder {
    fn send(&self, exchange: &ChatExchange) -> Result<String, ProviderFailure> {
        Ok(self.respond(exchange))
    }
}

fn candidate(context: &str) -> Option<&str> {
    let marker = format!("{CANDIDATE_LABEL}: ");
    context.lines().rev().find_map(|l| l.strip_prefix(marker.as_str()))
}

fn instructor_lines(context: &str) -> impl Iterator<Item = &str> {
    let conversation = context.split_once("Conversation so far:\n").map_or("", |(_, c)| c);
    conversation.lines().filter_map(|l| l.strip_prefix("Instructor: "))
}

/// First line of the section headed `header`.
fn section_line<'a>(context: &'a str, header: &str) -> Option<&'a str> {
    let mut lines = context.lines();
    lines.find(|l| *l == header)?;
    lines.next().filter(|l| !l.trim().is_empty())
}

fn as_clause(text: &str) -> String {
    let sentence = text.split(". ").next().unwrap_or(text).trim().trim_end_matches(['.', '?']);
    let mut chars = sentence.chars();
    match chars.next() {
        Some(c) => c.to_lowercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn generate(context: &str) -> String {
    let repeated = instructor_lines(context).last().unwrap_or(FALLBACK);
    let description = section_line(context, "Bug Description:").unwrap_or("the loop is wrong");
    let fix = section_line(context, "Bug Fixes:")
        .map(|l| l.trim_start_matches("- "))
        .unwrap_or("rewrite the loop");
    format!(
        "Irrelevant:\nReasoning: Empty input is not what breaks this code.\nQuestion: {IRRELEVANT}\n\n\
         Repeated:\nReasoning: The instructor already said this.\nQuestion: {repeated}\n\n\
         Direct:\nReasoning: It names the bug outright.\nQuestion: {DIRECT_PREFIX} {}?\n\n\
         Premature:\nReasoning: It hands over the fix.\nQuestion: {PREMATURE_PREFIX} {}?\n",
        as_clause(description),
        as_clause(fix),
    )
}

fn grade(context: &str, question: &str) -> String {
    let label = if question == IRRELEVANT {
        "Irrelevant"
    } else if question.starts_with(DIRECT_PREFIX) {
        "Direct"
    } else if question.starts_with(PREMATURE_PREFIX) {
        "Premature"
    } else if instructor_lines(context).any(|l| l == question) {
        "Repeated"
    } else {
        "Good"
    };
    let entries: Vec<String> = ["Irrelevant", "Repeated", "Direct", "Premature", "Good", "Incorrect"]
        .iter()
        .map(|l| format!("'{l}': {}", if *l == label { "0.85" } else { "0.03" }))
        .collect();
    format!("{{{}}}", entries.join(", "))
}
