//! Multi-temperature test-time scaling.
//!
//! Sample reasoning traces for each question at several decoding
//! temperatures, estimate Pass@K from the stored traces, stop early on
//! questions whose answers agree across temperatures, and compare the
//! entropy of correct and incorrect traces.

pub mod backends;
pub mod entropy;
pub mod estimators;
pub mod temperature;
pub mod temperature_plan;
pub mod trace_store;
pub mod verifiers;
pub mod runner;
pub mod voting;

pub use backends::{
    scenario_from_taxonomy, BackendError, EndpointConfig, HttpBackend, PromptTemplate, Question,
    SampleBatch, SampleRequest, Scenario, SimulatedBackend, TraceSampler,
};
pub use entropy::{split_by_correctness, EntropySummary, GroupBy};
pub use estimators::{
    avg_at_n, dataset_curve, dataset_pass_all, multi_temperature_curve, pass_all, pass_at_k,
    EstimatorError, PassKCurve,
};
pub use temperature::Temperature;
pub use temperature_plan::{
    build_grid, classify_difficulty, minimal_subset, preferred_temperature, split_budget,
    DifficultyLabel, TemperaturePlan,
};
pub use trace_store::{QuestionTally, StoreError, TraceKey, TraceRecord, TraceStore};
pub use verifiers::{VerifierKind, VerifierSpec};
pub use runner::{RunConfig, RunReport, RunnerError};
pub use voting::{VotingError, VotingParams, VotingRun};
