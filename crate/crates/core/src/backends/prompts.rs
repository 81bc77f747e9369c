//! Bundled prompt templates. `{Question}` is replaced by the problem text.

use serde::{Deserialize, Serialize};

pub const AIME: &str = include_str!("../../assets/prompt_aime.txt");
pub const MATH500: &str = include_str!("../../assets/prompt_math500.txt");
pub const LIVECODEBENCH: &str = include_str!("../../assets/prompt_livecodebench.txt");
/// Trace-validation prompt for an external judge; placeholders
/// `{ProblemText}` and `{ModelTrace}`.
pub const VALIDATION_AIME: &str = include_str!("../../assets/prompt_validation_aime.txt");

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptTemplate {
    Aime,
    Math500,
    #[serde(rename = "livecodebench")]
    LiveCodeBench,
    /// The question text is sent as-is.
    #[default]
    Raw,
}

impl PromptTemplate {
    pub fn render(self, question: &str) -> String {
        let template = match self {
            PromptTemplate::Aime => AIME,
            PromptTemplate::Math500 => MATH500,
            PromptTemplate::LiveCodeBench => LIVECODEBENCH,
            PromptTemplate::Raw => return question.to_string(),
        };
        template.replace("{Question}", question)
    }
}

pub fn render_validation(problem: &str, trace: &str) -> String {
    VALIDATION_AIME
        .replace("{ProblemText}", problem)
        .replace("{ModelTrace}", trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn templates_substitute_question() {
        let p = PromptTemplate::Aime.render("Find x.");
        assert!(p.contains("\\boxed{}"));
        assert!(p.trim_end().ends_with("Find x."));
        assert!(PromptTemplate::Math500.render("Q").contains("\\boxed{2}"));
        assert!(PromptTemplate::LiveCodeBench.render("Q").contains("class Solution"));
        assert_eq!(PromptTemplate::Raw.render("Q"), "Q");
        let v = render_validation("P", "T");
        assert!(v.contains("[Original problem]\nP\n"));
        assert!(v.trim_end().ends_with("Do not output anything after that final line."));
    }
}
