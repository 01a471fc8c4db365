//! Chat templates for the two augmentation calls: producing one flawed
//! question per invalid category, and grading a single candidate question.

use std::fmt::Write as _;

use crate::corpus::{write_metadata, Problem, Turn};
use crate::llm_gateway::{ChatExchange, ChatMessage};

use super::AugmentSettings;

const GENERATION_SYSTEM: &str = "\
You play a deliberately unhelpful tutor (the Assistant) in a debugging conversation with a student. \
Your job is to write poor Socratic questions, one for each flaw category below, so they can be used \
as negative examples.

You will receive:
1. Problem Description
2. Test Cases
3. Student's Buggy Code
4. Bug Description
5. Bug Fixes
6. Conversation so far

Flaw categories:
1. Irrelevant: the question pulls attention away from the real bug toward something that does not matter for it.
2. Repeated: the question was already asked, or already answered, earlier in the conversation.
3. Direct: the question gives the bug away before the student has had a chance to find it.
4. Premature: the question pushes the student toward a code edit before they have located the problem.

For every category, first explain why your question belongs to it, then state the question. \
Use exactly this layout:

Irrelevant:
Reasoning: <why the question fits the category>
Question: <the question>

Repeated:
Reasoning: ...
Question: ...

Direct:
Reasoning: ...
Question: ...

Premature:
Reasoning: ...
Question: ...";

const FEW_SHOT_INPUT: &str = "\
Problem Description:
Write a function `top_k(lst: List[int], k: int) -> List[int]` that returns the k largest values of `lst` in descending order.

Test Cases:
top_k([1, 2, 3, 4, 5], 3) => [5, 4, 3]

Student's Buggy Code:
def top_k(lst, k):
    result = []
    for i in range(k):
        result.append(max(lst))
        lst.pop(max(lst))
    return result

Bug Description:
`lst.pop(max(lst))` treats the largest value as an index, so an IndexError is raised once that value exceeds the list length.

Bug Fixes:
- Replace `lst.pop(max(lst))` with `lst.remove(max(lst))`.

Conversation so far:
Student: My function crashes and I can't tell why.
Instructor: Let's figure it out together. Where do you think the problem is?
Student: Maybe in the line with `.pop()`?
";

const FEW_SHOT_OUTPUT: &str = "\
Irrelevant:
Reasoning: Sorting direction has nothing to do with the crash, so this sends the student down a side path.
Question: Could you rewrite the loop so the result comes out in ascending order?

Repeated:
Reasoning: The instructor has already asked the student to locate the problem.
Question: Where do you think the problem is?

Direct:
Reasoning: It tells the student that the argument to `pop` is being used as an index, which is the bug itself.
Question: Did you notice that `pop` takes an index, so `max(lst)` is being used as a position?

Premature:
Reasoning: It proposes the exact code change before the student has understood the failure.
Question: What if you called `remove` instead of `pop` on line 5?";

const CONSISTENCY_SYSTEM: &str = "\
You grade a single Socratic question written by an assistant tutor in a debugging conversation. \
Report how likely the question is to belong to each label as a probability distribution.

You will receive:
1. Problem Description
2. Test Cases
3. Student's Buggy Code
4. Bug Description
5. Bug Fixes
6. Conversation so far

Labels:
1. Irrelevant: the question pulls attention away from the real bug toward something that does not matter for it.
2. Repeated: the question was already asked, or already answered, earlier in the conversation.
3. Direct: the question gives the bug away before the student has had a chance to find it.
4. Premature: the question pushes the student toward a code edit before they have located the problem. \
Keep Direct and Premature apart: a Premature question names a code change tied to the bug, while a Direct \
question only exposes the bug.
5. Good: the question follows naturally from the conversation and nudges the student without exposing the \
bug or proposing a fix.
6. Incorrect: the question has nothing to do with this problem or conversation.

The question to grade appears after the conversation, on the line starting with \
'Assistant Socratic Question'.

Answer with a single dictionary mapping every label to its probability, for example:
{'Irrelevant': 0.1, 'Repeated': 0.05, 'Direct': 0.6, 'Premature': 0.15, 'Good': 0.1, 'Incorrect': 0}";

pub(crate) const CANDIDATE_LABEL: &str = "Assistant Socratic Question";

fn context_block(problem: &Problem, history: &[Turn]) -> String {
    let mut out = String::new();
    write_metadata(&mut out, problem, true);
    for turn in history {
        let _ = writeln!(out, "{}: {}", turn.speaker.label(), turn.utterance);
    }
    out
}

/// System role and category definitions, one worked example as a prior
/// exchange, then the current context as the final user message.
pub fn build_generation_prompt(problem: &Problem, history: &[Turn], settings: &AugmentSettings) -> ChatExchange {
    let messages = vec![
        ChatMessage::system(GENERATION_SYSTEM),
        ChatMessage::user(FEW_SHOT_INPUT),
        ChatMessage::assistant(FEW_SHOT_OUTPUT),
        ChatMessage::user(context_block(problem, history)),
    ];
    let mut exchange = ChatExchange::new(&settings.model_name, settings.generation_temperature, messages);
    exchange.max_tokens = settings.max_tokens;
    exchange
}

/// The candidate goes on its own labeled line after the conversation. The
/// generator's reasoning is not shown to the grader.
pub fn build_consistency_prompt(
    problem: &Problem,
    history: &[Turn],
    question: &str,
    settings: &AugmentSettings,
) -> ChatExchange {
    let mut user = context_block(problem, history);
    let _ = writeln!(user, "{CANDIDATE_LABEL}: {question}");
    let messages = vec![ChatMessage::system(CONSISTENCY_SYSTEM), ChatMessage::user(user)];
    let mut exchange = ChatExchange::new(&settings.model_name, settings.consistency_temperature, messages);
    exchange.max_tokens = settings.max_tokens;
    exchange
}
