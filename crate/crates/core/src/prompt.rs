//! Prompt templates for the generator and student roles.

use serde::{Deserialize, Serialize};

use crate::sample::{render_tagged, Sample};

/// Shape of the generator instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    /// Free-response problems with a short final answer.
    #[default]
    Math,
    /// Four-option multiple-choice questions answered by letter.
    Choice,
}

const FORMAT_LINE: &str = "Wrap the question, reasoning, and answer in <question></question>, \
<reasoning></reasoning>, and <answer></answer> tags.\n";

/// Generator instruction followed by `examples` rendered as tagged triplets.
pub fn generator_prompt(kind: TemplateKind, examples: &[Sample]) -> String {
    let mut p = String::new();
    match kind {
        TemplateKind::Math => p.push_str(
            "Write one new practice problem of the same kind and difficulty as the examples. \
Do not copy an example. Give a step by step solution and the final answer.\n\n",
        ),
        TemplateKind::Choice => p.push_str(
            "Write one new multiple-choice question of the same kind and difficulty as the examples, \
with options A) to D). Do not copy an example. Explain the solution, then answer with the option letter.\n\n",
        ),
    }
    for (i, ex) in examples.iter().enumerate() {
        p.push_str(&format!("Example {}:\n{}\n\n", i + 1, render_tagged(ex)));
    }
    p.push_str(FORMAT_LINE);
    p.push_str("New problem:\n");
    p
}

/// Student input for `question`.
pub fn student_prompt(question: &str) -> String {
    format!("<question>{}</question>\n", question.trim())
}

/// Student training target: reasoning and answer regions.
pub fn student_target(reasoning: &str, answer: &str) -> String {
    format!("<reasoning>{}</reasoning>\n<answer>{}</answer>", reasoning.trim(), answer.trim())
}

/// Student prompt and target for a sample.
pub fn render_student_pair_text(sample: &Sample) -> (String, String) {
    (student_prompt(&sample.question), student_target(&sample.reasoning, &sample.answer))
}

/// In-context prefix made of fully rendered examples.
pub fn icl_prefix(examples: &[Sample]) -> String {
    examples.iter().map(|s| format!("{}\n\n", render_tagged(s))).collect()
}
