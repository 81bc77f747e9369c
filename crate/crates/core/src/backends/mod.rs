//! Sampling backends: a seeded simulator and an OpenAI-compatible HTTP client.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::temperature::Temperature;
use crate::trace_store::TraceRecord;

pub mod http;
pub mod prompts;
pub mod rng;
pub mod simulated;

pub use http::{http_sample, EndpointConfig, HttpBackend};
pub use prompts::PromptTemplate;
pub use simulated::{scenario_from_taxonomy, simulated_sample, Scenario, SimulatedBackend};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("T=0 admits a single deterministic trace, {0} requested")]
    ZeroTemperatureCount(u32),
    #[error("unknown question {0:?}")]
    UnknownQuestion(String),
    #[error("question {question_id} has no entry for T={temperature}")]
    UnknownTemperature {
        question_id: String,
        temperature: Temperature,
    },
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("authentication rejected (HTTP {0})")]
    Auth(u16),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("transient failure: {0}")]
    Transient(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("requested {requested} samples, received {received}")]
    Deficit { requested: u32, received: u32 },
    #[error("backend configuration: {0}")]
    Config(String),
}

/// A question as the samplers see it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub prompt: String,
}

/// `count` traces for one (question, temperature), indexed from
/// `first_index` within `round`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleRequest {
    pub run_id: String,
    pub question_id: String,
    pub prompt: String,
    pub temperature: Temperature,
    pub count: u32,
    pub seed: u64,
    pub round: u32,
    pub first_index: u32,
}

impl SampleRequest {
    /// Rejects requests for more than one trace at T=0.
    pub fn check(&self) -> Result<(), BackendError> {
        if self.temperature.is_zero() && self.count > 1 {
            return Err(BackendError::ZeroTemperatureCount(self.count));
        }
        Ok(())
    }
}

/// Records from one request plus how many were asked for but not delivered.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleBatch {
    pub records: Vec<TraceRecord>,
    pub deficit: u64,
}

pub trait TraceSampler: Sync {
    fn sample(&self, request: &SampleRequest) -> Result<SampleBatch, BackendError>;

    /// True when `mean_entropy` comes from truncated top-k distributions.
    fn entropy_is_lower_bound(&self) -> bool {
        false
    }
}

impl<T: TraceSampler + ?Sized> TraceSampler for &T {
    fn sample(&self, request: &SampleRequest) -> Result<SampleBatch, BackendError> {
        (**self).sample(request)
    }

    fn entropy_is_lower_bound(&self) -> bool {
        (**self).entropy_is_lower_bound()
    }
}

impl<T: TraceSampler + ?Sized> TraceSampler for Box<T> {
    fn sample(&self, request: &SampleRequest) -> Result<SampleBatch, BackendError> {
        (**self).sample(request)
    }

    fn entropy_is_lower_bound(&self) -> bool {
        (**self).entropy_is_lower_bound()
    }
}
