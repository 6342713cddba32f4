//! Few-shot reasoning prompt assembly.

use serde::{Deserialize, Serialize};

const QUESTION_MARKER: &str = "Q: ";
const ANSWER_MARKER: &str = "\nA:";

/// Demonstrations followed by the question; the completion is expected to
/// end with "The answer is ...".
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReasoningPrompt {
    pub demonstrations: String,
}

impl ReasoningPrompt {
    pub fn new(demonstrations: impl Into<String>) -> Self {
        Self {
            demonstrations: demonstrations.into(),
        }
    }

    pub fn render(&self, question_text: &str) -> String {
        let demos = self.demonstrations.trim_end();
        if demos.is_empty() {
            format!("{QUESTION_MARKER}{question_text}{ANSWER_MARKER}")
        } else {
            format!("{demos}\n\n{QUESTION_MARKER}{question_text}{ANSWER_MARKER}")
        }
    }
}

/// Recovers the question text from a prompt produced by [`ReasoningPrompt::render`].
pub fn question_from_reasoning_prompt(prompt: &str) -> Option<&str> {
    let body = prompt.strip_suffix(ANSWER_MARKER)?;
    let start = body.rfind(QUESTION_MARKER)? + QUESTION_MARKER.len();
    Some(&body[start..])
}
