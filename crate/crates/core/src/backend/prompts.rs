//! Prompt texts for generation and judging.

use std::fmt::Write as _;

use crate::types::{Query, Trajectory};

pub const FLAWED_HEADER: &str = "Previous flawed attempts (do not repeat these mistakes):";

const FORMAT_INSTRUCTION: &str = "Respond with your step-by-step reasoning inside <think></think> tags, \
followed by the final answer inside <answer></answer> tags.";

const REFLECT_INSTRUCTION: &str = "Reflect on where the attempts above went wrong and solve the problem again \
without repeating those mistakes. Respond with your step-by-step reasoning inside <think></think> tags, \
followed by the final answer inside <answer></answer> tags.";

fn question_block(query: &Query) -> String {
    let mut q = query.prompt.trim().to_string();
    if let Some(opts) = &query.options {
        let _ = write!(q, "\nOptions: {}", opts.join(", "));
    }
    q
}

/// The question alone, or the question followed by the flawed attempts in
/// the given order and a reflection instruction.
pub fn generation_prompt(query: &Query, negatives: &[Trajectory]) -> String {
    let mut out = question_block(query);
    out.push_str("\n\n");
    if negatives.is_empty() {
        out.push_str(FORMAT_INSTRUCTION);
        return out;
    }
    out.push_str(FLAWED_HEADER);
    out.push('\n');
    for (i, n) in negatives.iter().enumerate() {
        let _ = write!(
            out,
            "Attempt {}:\n<think>{}</think>\n<answer>{}</answer>\n",
            i + 1,
            n.think_text.trim(),
            n.answer_text.trim()
        );
    }
    out.push('\n');
    out.push_str(REFLECT_INSTRUCTION);
    out
}

pub const JUDGE_KEYS: [&str; 5] = ["LS", "EI", "CR", "LC", "RD"];

/// Rubric prompt over the reasoning text only. The final answer and its
/// correctness are deliberately left out.
pub fn judge_prompt(query: &Query, think_text: &str) -> String {
    format!(
        "You are grading the quality of a reasoning process, not whether its final answer is right.\n\
\n\
Question:\n{question}\n\
\n\
Reasoning:\n{think}\n\
\n\
Score each dimension from 0 to 1:\n\
LS (Logical Soundness): every step follows from the previous ones.\n\
EI (Error Identification): mistakes and doubtful steps are noticed and handled.\n\
CR (Correct Reasoning): facts, calculations and readings of the question are right.\n\
LC (Language Consistency): one language and consistent notation throughout.\n\
RD (Redundancy): 1 means no needless repetition or padding.\n\
\n\
Reply with exactly these six lines and nothing else:\n\
LS: <score>\n\
EI: <score>\n\
CR: <score>\n\
LC: <score>\n\
RD: <score>\n\
FINAL: <mean of the five scores>",
        question = question_block(query),
        think = think_text.trim(),
    )
}
