//! Answer extraction and correctness checks.
//!
//! Symbolic equivalence is not attempted: normalized string equality is the
//! strongest check available, so `\frac{1}{2}` and `0.5` compare unequal.

use serde::{Deserialize, Serialize};

use crate::trace_store::TraceRecord;

/// Outcome of scanning a completion for its final `\boxed{...}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Extraction {
    pub answer: Option<String>,
    /// The last `\boxed{` was never closed.
    pub unbalanced: bool,
}

const BOXED: &str = "\\boxed{";

/// Content of the last `\boxed{...}`, matched with balanced braces.
pub fn extract_boxed(text: &str) -> Extraction {
    let Some(start) = text.rfind(BOXED) else {
        return Extraction {
            answer: None,
            unbalanced: false,
        };
    };
    let body = &text[start + BOXED.len()..];
    let mut depth = 1usize;
    for (i, ch) in body.char_indices() {
        match ch {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Extraction {
                        answer: Some(body[..i].to_string()),
                        unbalanced: false,
                    };
                }
            }
            _ => {}
        }
    }
    Extraction {
        answer: None,
        unbalanced: true,
    }
}

/// Body of the last fenced code block (```lang ... ```), if any.
pub fn extract_code_block(text: &str) -> Option<String> {
    let end = text.rfind("```")?;
    let start = text[..end].rfind("```")?;
    let inner = &text[start + 3..end];
    // drop the language tag line
    let body = match inner.find('\n') {
        Some(nl) => &inner[nl + 1..],
        None => inner,
    };
    Some(body.to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifierKind {
    BoxedInteger,
    BoxedExact,
    ExactMatch,
    ExternalJudgeStub,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifierSpec {
    pub kind: VerifierKind,
    #[serde(default)]
    pub references: Vec<String>,
}

impl VerifierSpec {
    pub fn new(kind: VerifierKind, references: impl IntoIterator<Item = impl Into<String>>) -> Self {
        VerifierSpec {
            kind,
            references: references.into_iter().map(Into::into).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.kind != VerifierKind::ExternalJudgeStub && self.references.is_empty() {
            return Err(format!("{:?} verifier needs at least one reference answer", self.kind));
        }
        Ok(())
    }

    /// Extracts the answer this verifier compares.
    pub fn extract(&self, text: &str) -> Extraction {
        match self.kind {
            VerifierKind::BoxedInteger | VerifierKind::BoxedExact | VerifierKind::ExternalJudgeStub => {
                extract_boxed(text)
            }
            VerifierKind::ExactMatch => Extraction {
                answer: Some(extract_code_block(text).unwrap_or_else(|| text.trim().to_string())),
                unbalanced: false,
            },
        }
    }
}

/// Trims and collapses internal whitespace runs to one space.
pub fn normalize_text(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Canonical decimal integer: whitespace removed, optional sign, no leading
/// zeros. `None` if the text is not an integer.
pub fn normalize_integer(s: &str) -> Option<String> {
    let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    let (negative, digits) = match compact.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, compact.strip_prefix('+').unwrap_or(&compact)),
    };
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let trimmed = digits.trim_start_matches('0');
    if trimmed.is_empty() {
        return Some("0".to_string());
    }
    Some(if negative {
        format!("-{trimmed}")
    } else {
        trimmed.to_string()
    })
}

/// `Some(true/false)` for a verdict, `None` when the verifier abstains.
pub fn check(answer: Option<&str>, spec: &VerifierSpec) -> Option<bool> {
    if spec.kind == VerifierKind::ExternalJudgeStub {
        return None;
    }
    let Some(answer) = answer else {
        return Some(false);
    };
    let hit = match spec.kind {
        VerifierKind::BoxedInteger => match normalize_integer(answer) {
            Some(a) => spec
                .references
                .iter()
                .filter_map(|r| normalize_integer(r))
                .any(|r| r == a),
            None => false,
        },
        VerifierKind::BoxedExact | VerifierKind::ExactMatch => {
            let a = normalize_text(answer);
            spec.references.iter().any(|r| normalize_text(r) == a)
        }
        VerifierKind::ExternalJudgeStub => unreachable!(),
    };
    Some(hit)
}

/// Fills `answer_extracted` (if absent) and `correct` from `answer_raw`.
pub fn apply(record: &mut TraceRecord, spec: &VerifierSpec) {
    if record.answer_extracted.is_none() {
        if let Some(raw) = &record.answer_raw {
            let ex = spec.extract(raw);
            if ex.unbalanced {
                log::debug!(
                    "{} T={} #{}: unbalanced \\boxed{{",
                    record.question_id,
                    record.temperature,
                    record.sample_index
                );
            }
            record.answer_extracted = ex.answer;
        }
    }
    record.correct = check(record.answer_extracted.as_deref(), spec);
}

/// One line of a `judged_valid` overlay produced by out-of-band judging.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgedValid {
    pub run_id: String,
    pub question_id: String,
    pub temperature: crate::temperature::Temperature,
    pub round: u32,
    pub sample_index: u32,
    pub valid: bool,
}

/// Downgrades `correct=true` to false for traces judged invalid. Returns the
/// number of records changed.
pub fn apply_overlay(records: &mut [TraceRecord], overlay: &[JudgedValid]) -> usize {
    use std::collections::HashSet;
    let invalid: HashSet<_> = overlay
        .iter()
        .filter(|j| !j.valid)
        .map(|j| {
            (
                j.run_id.as_str(),
                j.question_id.as_str(),
                j.temperature,
                j.round,
                j.sample_index,
            )
        })
        .collect();
    let mut changed = 0;
    for r in records.iter_mut() {
        let key = (
            r.run_id.as_str(),
            r.question_id.as_str(),
            r.temperature,
            r.round,
            r.sample_index,
        );
        if r.correct == Some(true) && invalid.contains(&key) {
            r.correct = Some(false);
            changed += 1;
        }
    }
    changed
}
