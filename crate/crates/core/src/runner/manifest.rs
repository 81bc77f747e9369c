//! Question manifest: one JSON object per line.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RunnerError;
use crate::backends::{PromptTemplate, Question, Scenario};
use crate::trace_store::read_jsonl_lines;
use crate::verifiers::{VerifierKind, VerifierSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub question: String,
    #[serde(default)]
    pub template: PromptTemplate,
    #[serde(default)]
    pub references: Vec<String>,
    /// Falls back to the run config's verifier kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verifier: Option<VerifierKind>,
}

impl ManifestEntry {
    pub fn to_question(&self) -> Question {
        Question {
            id: self.id.clone(),
            prompt: self.template.render(&self.question),
        }
    }

    pub fn verifier_spec(&self, default_kind: VerifierKind) -> VerifierSpec {
        VerifierSpec::new(self.verifier.unwrap_or(default_kind), self.references.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>, default_kind: VerifierKind) -> Result<Self, RunnerError> {
        if entries.is_empty() {
            return Err(RunnerError::Config("manifest has no questions".into()));
        }
        let mut seen = HashSet::new();
        for e in &entries {
            if e.id.is_empty() {
                return Err(RunnerError::Config("manifest entry with empty id".into()));
            }
            if !seen.insert(e.id.as_str()) {
                return Err(RunnerError::Config(format!("duplicate question id {} in manifest", e.id)));
            }
            e.verifier_spec(default_kind)
                .validate()
                .map_err(|reason| RunnerError::Verifier(format!("question {}: {reason}", e.id)))?;
        }
        Ok(Manifest { entries })
    }

    pub fn load(path: &Path, default_kind: VerifierKind) -> Result<Self, RunnerError> {
        if !path.exists() {
            return Err(RunnerError::Config(format!("manifest {} not found", path.display())));
        }
        let entries: Vec<ManifestEntry> =
            read_jsonl_lines(path).map_err(|e| RunnerError::Config(e.to_string()))?;
        Self::new(entries, default_kind)
    }

    /// One entry per scenario question, checked by exact match against the
    /// scenario's reference answer.
    pub fn from_scenario(scenario: &Scenario) -> Result<Self, RunnerError> {
        let entries = scenario
            .questions
            .iter()
            .map(|q| ManifestEntry {
                id: q.id.clone(),
                question: format!("Simulated question {}", q.id),
                template: PromptTemplate::Raw,
                references: vec![q.reference.clone()],
                verifier: Some(VerifierKind::BoxedExact),
            })
            .collect();
        Self::new(entries, VerifierKind::BoxedExact)
    }

    pub fn questions(&self) -> Vec<Question> {
        self.entries.iter().map(ManifestEntry::to_question).collect()
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }
}
