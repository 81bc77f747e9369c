//! Round-based multi-temperature sampling with two-stage voting.
//!
//! Every round each active question receives one new trace per voting
//! temperature. Stage 1 takes the modal answer inside each temperature's
//! pool; a temperature passes when that answer's share of the pool reaches
//! `tau_intra`. Only if every temperature passes does Stage 2 vote across the
//! per-temperature majorities; when the winner's share of all M temperatures
//! reaches `tau_cross` (and at least `min_rounds` rounds are in), the question
//! is treated as easy and stops sampling. Questions still active after
//! `max_rounds` fall back to full-grid sampling.
//!
//! Both thresholds are fractions. With counts, 0.8 would be met by a single
//! sample.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, Question, SampleRequest, TraceSampler};
use crate::temperature::Temperature;
use crate::temperature_plan::TemperaturePlan;
use crate::trace_store::{StoreError, TraceKey, TraceRecord, TraceStore};

#[derive(Debug, Error)]
pub enum VotingError {
    #[error("invalid voting parameters: {0}")]
    Params(String),
    #[error("no questions given")]
    NoQuestions,
    #[error("duplicate question id {0}")]
    DuplicateQuestion(String),
    #[error("cannot vote on an empty pool")]
    EmptyPool,
    #[error("all {0} rounds already run")]
    RoundsExhausted(u32),
    #[error("ΔC undefined: full-grid sample count is zero")]
    ZeroBaseline,
    #[error("samples used ({used}) exceed the full grid ({full}); check the plans")]
    UsedExceedsFull { used: u64, full: u64 },
    #[error("fallback plan for question {question_id}: {reason}")]
    Fallback { question_id: String, reason: String },
    #[error("question {question_id}: {source}")]
    Backend {
        question_id: String,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VotingParams {
    pub temperatures: Vec<Temperature>,
    pub max_rounds: u32,
    pub tau_intra: f64,
    pub tau_cross: f64,
    pub min_rounds: u32,
}

pub const DEFAULT_TAU_INTRA: f64 = 0.8;
pub const DEFAULT_TAU_CROSS: f64 = 1.0;
pub const DEFAULT_MIN_ROUNDS: u32 = 4;
pub const DEFAULT_MAX_ROUNDS: u32 = 16;

impl VotingParams {
    pub fn new(temperatures: Vec<Temperature>) -> Self {
        VotingParams {
            temperatures,
            max_rounds: DEFAULT_MAX_ROUNDS,
            tau_intra: DEFAULT_TAU_INTRA,
            tau_cross: DEFAULT_TAU_CROSS,
            min_rounds: DEFAULT_MIN_ROUNDS,
        }
    }

    pub fn validate(&self) -> Result<(), VotingError> {
        let bad = |m: String| Err(VotingError::Params(m));
        if self.temperatures.is_empty() {
            return bad("no voting temperatures".into());
        }
        if self.temperatures.windows(2).any(|w| w[0] >= w[1]) {
            return bad("voting temperatures must be strictly increasing".into());
        }
        if self.temperatures.iter().any(|t| t.is_zero()) {
            return bad("T=0 yields one deterministic trace and cannot vote each round".into());
        }
        if self.max_rounds < 1 || self.min_rounds < 1 {
            return bad("max_rounds and min_rounds must be >= 1".into());
        }
        if self.min_rounds > self.max_rounds {
            return bad(format!(
                "min_rounds {} exceeds max_rounds {}",
                self.min_rounds, self.max_rounds
            ));
        }
        for (name, tau) in [("tau_intra", self.tau_intra), ("tau_cross", self.tau_cross)] {
            if !(tau > 0.0 && tau <= 1.0) {
                return bad(format!("{name} must lie in (0, 1], got {tau}"));
            }
        }
        Ok(())
    }
}

/// A majority answer and its share of the votes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vote {
    pub answer: Option<String>,
    pub fraction: f64,
}

/// Modal answer of one temperature's pool, ties broken by the
/// lexicographically smallest answer. Traces without an extracted answer
/// count toward the pool size but never win.
pub fn intra_vote(pool: &[Option<String>]) -> Result<Vote, VotingError> {
    if pool.is_empty() {
        return Err(VotingError::EmptyPool);
    }
    let (answer, count) = modal(pool.iter().flatten().map(String::as_str));
    Ok(Vote {
        answer: answer.map(str::to_string),
        fraction: count as f64 / pool.len() as f64,
    })
}

/// Modal answer across per-temperature majorities. The share is taken over
/// all `temperature_count` voting temperatures, including ones that did not
/// pass Stage 1 and so cast no vote.
pub fn cross_vote(majorities: &[String], temperature_count: usize) -> Result<Vote, VotingError> {
    if majorities.is_empty() || temperature_count == 0 {
        return Err(VotingError::EmptyPool);
    }
    let (answer, count) = modal(majorities.iter().map(String::as_str));
    Ok(Vote {
        answer: answer.map(str::to_string),
        fraction: count as f64 / temperature_count.max(majorities.len()) as f64,
    })
}

fn modal<'a>(answers: impl Iterator<Item = &'a str>) -> (Option<&'a str>, usize) {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for a in answers {
        *counts.entry(a).or_default() += 1;
    }
    // BTreeMap iterates in lexicographic order; keep the first maximum
    let mut best: (Option<&str>, usize) = (None, 0);
    for (a, c) in counts {
        if c > best.1 {
            best = (Some(a), c);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntraResult {
    pub temperature: Temperature,
    pub answer: Option<String>,
    pub fraction: f64,
    pub passed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Continue,
    Exit,
    /// A draw failed; the question's round was discarded and is retried.
    Aborted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoteOutcome {
    pub question_id: String,
    pub round: u32,
    pub intra: Vec<IntraResult>,
    pub cross: Option<Vote>,
    pub decision: Decision,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip)]
    pub new_records: Vec<TraceRecord>,
}

/// Both voting stages on the current pools. Returns the per-temperature
/// results, the cross vote when Stage 2 ran, and whether both thresholds held.
pub fn evaluate_pools(
    pools: &[(Temperature, &[Option<String>])],
    tau_intra: f64,
    tau_cross: f64,
) -> Result<(Vec<IntraResult>, Option<Vote>, bool), VotingError> {
    let mut intra = Vec::with_capacity(pools.len());
    let mut majorities = Vec::new();
    for (t, pool) in pools {
        let v = intra_vote(pool)?;
        let passed = v.answer.is_some() && v.fraction >= tau_intra;
        if passed {
            majorities.extend(v.answer.clone());
        }
        intra.push(IntraResult {
            temperature: *t,
            answer: v.answer,
            fraction: v.fraction,
            passed,
        });
    }
    if intra.iter().any(|r| !r.passed) {
        return Ok((intra, None, false));
    }
    let cross = cross_vote(&majorities, pools.len())?;
    let ok = cross.fraction >= tau_cross;
    Ok((intra, Some(cross), ok))
}

#[derive(Clone, Debug)]
struct Pool {
    answers: Vec<Option<String>>,
    traces: Vec<TraceRecord>,
}

#[derive(Clone, Debug)]
struct QuestionState {
    question: Question,
    pools: Vec<Pool>,
    rounds_completed: u32,
    exit_round: Option<u32>,
}

impl QuestionState {
    fn active(&self) -> bool {
        self.exit_round.is_none()
    }
}

/// Scheduler state: per (question, temperature) pools plus activity flags.
type Drawn = Result<TraceRecord, BackendError>;

#[derive(Clone, Debug)]
pub struct VotingSession {
    params: VotingParams,
    questions: Vec<QuestionState>,
    round: u32,
}

pub fn new_session(questions: &[Question], params: VotingParams) -> Result<VotingSession, VotingError> {
    params.validate()?;
    if questions.is_empty() {
        return Err(VotingError::NoQuestions);
    }
    let mut seen = std::collections::HashSet::new();
    for q in questions {
        if !seen.insert(q.id.as_str()) {
            return Err(VotingError::DuplicateQuestion(q.id.clone()));
        }
    }
    let empty = Pool {
        answers: Vec::new(),
        traces: Vec::new(),
    };
    let states = questions
        .iter()
        .map(|q| QuestionState {
            question: q.clone(),
            pools: vec![empty.clone(); params.temperatures.len()],
            rounds_completed: 0,
            exit_round: None,
        })
        .collect();
    Ok(VotingSession {
        params,
        questions: states,
        round: 0,
    })
}

impl VotingSession {
    pub fn params(&self) -> &VotingParams {
        &self.params
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn pool_count(&self) -> usize {
        self.questions.iter().map(|q| q.pools.len()).sum()
    }

    pub fn active_count(&self) -> usize {
        self.questions.iter().filter(|q| q.active()).count()
    }

    pub fn is_finished(&self) -> bool {
        self.active_count() == 0 || self.round >= self.params.max_rounds
    }

    pub fn exit_round(&self, question_id: &str) -> Option<u32> {
        self.state(question_id).and_then(|q| q.exit_round)
    }

    pub fn rounds_completed(&self, question_id: &str) -> Option<u32> {
        self.state(question_id).map(|q| q.rounds_completed)
    }

    /// Answers drawn so far for one question at one voting temperature.
    pub fn answers(&self, question_id: &str, temperature: Temperature) -> Option<&[Option<String>]> {
        let idx = self.params.temperatures.iter().position(|t| *t == temperature)?;
        self.state(question_id).map(|q| q.pools[idx].answers.as_slice())
    }

    /// Traces drawn so far for one question, all voting temperatures.
    pub fn traces(&self, question_id: &str) -> impl Iterator<Item = &TraceRecord> {
        self.state(question_id)
            .into_iter()
            .flat_map(|q| q.pools.iter().flat_map(|p| p.traces.iter()))
    }

    /// Questions still active; after `max_rounds` these are the non-easy ones
    /// handed to the fallback plan.
    pub fn survivors(&self) -> Vec<&Question> {
        self.questions
            .iter()
            .filter(|q| q.active())
            .map(|q| &q.question)
            .collect()
    }

    fn state(&self, question_id: &str) -> Option<&QuestionState> {
        self.questions.iter().find(|q| q.question.id == question_id)
    }

    /// Runs one round. `draw(question, temperature, round)` must return one
    /// trace; draws run in parallel, voting happens afterwards in fixed
    /// (question, temperature) order.
    pub fn step_round<F>(&mut self, draw: F) -> Result<Vec<VoteOutcome>, VotingError>
    where
        F: Fn(&Question, Temperature, u32) -> Result<TraceRecord, BackendError> + Sync,
    {
        if self.active_count() == 0 {
            return Ok(Vec::new());
        }
        if self.round >= self.params.max_rounds {
            return Err(VotingError::RoundsExhausted(self.params.max_rounds));
        }
        self.round += 1;

        let temps = &self.params.temperatures;
        let jobs: Vec<(usize, usize, u32)> = self
            .questions
            .iter()
            .enumerate()
            .filter(|(_, q)| q.active())
            .flat_map(|(qi, q)| (0..temps.len()).map(move |ti| (qi, ti, q.rounds_completed + 1)))
            .collect();
        let questions = &self.questions;
        let drawn: Vec<Result<TraceRecord, BackendError>> = jobs
            .par_iter()
            .map(|(qi, ti, r)| draw(&questions[*qi].question, temps[*ti], *r))
            .collect();

        let mut by_question: BTreeMap<usize, Vec<(usize, Drawn)>> = BTreeMap::new();
        for ((qi, ti, _), result) in jobs.into_iter().zip(drawn) {
            by_question.entry(qi).or_default().push((ti, result));
        }

        let mut outcomes = Vec::with_capacity(by_question.len());
        for (qi, results) in by_question {
            let state = &mut self.questions[qi];
            let round = state.rounds_completed + 1;
            if let Some(err) = results.iter().find_map(|(_, r)| r.as_ref().err()) {
                log::warn!("question {}: round {round} aborted: {err}", state.question.id);
                outcomes.push(VoteOutcome {
                    question_id: state.question.id.clone(),
                    round,
                    intra: Vec::new(),
                    cross: None,
                    decision: Decision::Aborted,
                    error: Some(err.to_string()),
                    new_records: Vec::new(),
                });
                continue;
            }
            let mut new_records = Vec::with_capacity(results.len());
            for (ti, result) in results {
                let record = result.expect("errors handled above");
                state.pools[ti].answers.push(record.answer_extracted.clone());
                state.pools[ti].traces.push(record.clone());
                new_records.push(record);
            }
            state.rounds_completed = round;

            let pools: Vec<(Temperature, &[Option<String>])> = temps
                .iter()
                .zip(&state.pools)
                .map(|(t, p)| (*t, p.answers.as_slice()))
                .collect();
            let (intra, cross, thresholds_met) =
                evaluate_pools(&pools, self.params.tau_intra, self.params.tau_cross)?;
            let decision = if thresholds_met && round >= self.params.min_rounds {
                state.exit_round = Some(round);
                Decision::Exit
            } else {
                Decision::Continue
            };
            outcomes.push(VoteOutcome {
                question_id: state.question.id.clone(),
                round,
                intra,
                cross,
                decision,
                error: None,
                new_records,
            });
        }
        Ok(outcomes)
    }
}

/// Fractional compute saving `1 - used / full`.
pub fn delta_c(samples_used: u64, samples_full_grid: u64) -> Result<f64, VotingError> {
    if samples_full_grid == 0 {
        return Err(VotingError::ZeroBaseline);
    }
    if samples_used > samples_full_grid {
        return Err(VotingError::UsedExceedsFull {
            used: samples_used,
            full: samples_full_grid,
        });
    }
    Ok(1.0 - samples_used as f64 / samples_full_grid as f64)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "round")]
pub enum ExitStatus {
    Exited(u32),
    Survived,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitEntry {
    pub question_id: String,
    pub status: ExitStatus,
    pub samples_used: u64,
    /// Samples the backend failed to deliver.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub deficit: u64,
}

fn is_zero(v: &u64) -> bool {
    *v == 0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VotingRun {
    pub params: VotingParams,
    pub rounds_run: u32,
    pub exit_log: Vec<ExitEntry>,
    pub samples_used: u64,
    pub samples_full_grid: u64,
    pub delta_c: f64,
}

impl VotingRun {
    pub fn exited(&self) -> usize {
        self.exit_log
            .iter()
            .filter(|e| matches!(e.status, ExitStatus::Exited(_)))
            .count()
    }
}

/// Identifies the run a scheduler writes into.
#[derive(Clone, Debug)]
pub struct RunContext {
    pub run_id: String,
    pub seed: u64,
}

/// Runs the voting stage and then samples every survivor with
/// `fallback_plan`, persisting all traces to `store`. ΔC is reported
/// against `baseline_plan` applied to every question.
///
/// Record layout: voting round `r` is stored as `(round = r, sample_index = 0)`;
/// fallback draws continue round 1 from its first free sample index and top
/// each temperature up to its allocation. Records
/// already present in the store (a resumed run) are reused instead of
/// resampled.
pub fn run<S>(
    questions: &[Question],
    params: &VotingParams,
    sampler: &S,
    ctx: &RunContext,
    fallback_plan: &TemperaturePlan,
    baseline_plan: &TemperaturePlan,
    store: &mut TraceStore,
) -> Result<VotingRun, VotingError>
where
    S: TraceSampler + ?Sized,
{
    let mut session = new_session(questions, params.clone())?;
    let existing: HashMap<TraceKey, TraceRecord> = store
        .records()
        .iter()
        .filter(|r| r.run_id == ctx.run_id)
        .map(|r| (r.key(), r.clone()))
        .collect();

    let draw = |q: &Question, t: Temperature, round: u32| -> Result<TraceRecord, BackendError> {
        let key = TraceKey {
            run_id: ctx.run_id.clone(),
            question_id: q.id.clone(),
            temperature: t,
            round,
            sample_index: 0,
        };
        if let Some(r) = existing.get(&key) {
            return Ok(r.clone());
        }
        let request = SampleRequest {
            run_id: ctx.run_id.clone(),
            question_id: q.id.clone(),
            prompt: q.prompt.clone(),
            temperature: t,
            count: 1,
            seed: ctx.seed,
            round,
            first_index: 0,
        };
        let batch = sampler.sample(&request)?;
        batch
            .records
            .into_iter()
            .next()
            .ok_or(BackendError::Deficit { requested: 1, received: 0 })
    };

    let mut used: BTreeMap<String, u64> = BTreeMap::new();
    let mut deficits: BTreeMap<String, u64> = BTreeMap::new();
    while !session.is_finished() {
        let outcomes = session.step_round(draw)?;
        let mut fresh = Vec::new();
        for outcome in outcomes {
            *used.entry(outcome.question_id.clone()).or_default() += outcome.new_records.len() as u64;
            fresh.extend(
                outcome
                    .new_records
                    .into_iter()
                    .filter(|r| !store.contains(&r.key())),
            );
        }
        store.append_batch(fresh)?;
    }

    let survivors: Vec<Question> = session.survivors().into_iter().cloned().collect();
    for q in &survivors {
        let (records, deficit) = sample_fallback(q, &session, sampler, ctx, fallback_plan, store)?;
        *used.entry(q.id.clone()).or_default() += records;
        *deficits.entry(q.id.clone()).or_default() += deficit;
    }

    let exit_log: Vec<ExitEntry> = questions
        .iter()
        .map(|q| ExitEntry {
            question_id: q.id.clone(),
            status: match session.exit_round(&q.id) {
                Some(r) => ExitStatus::Exited(r),
                None => ExitStatus::Survived,
            },
            samples_used: used.get(&q.id).copied().unwrap_or(0),
            deficit: deficits.get(&q.id).copied().unwrap_or(0),
        })
        .collect();
    let samples_used = exit_log.iter().map(|e| e.samples_used).sum();
    let samples_full_grid = questions.len() as u64 * baseline_plan.total_per_question();
    let delta = delta_c(samples_used, samples_full_grid)?;
    Ok(VotingRun {
        params: params.clone(),
        rounds_run: session.round(),
        exit_log,
        samples_used,
        samples_full_grid,
        delta_c: delta,
    })
}

/// Samples one surviving question under the fallback plan. The question's
/// voting traces at a temperature count toward that temperature's
/// allocation, so only the remainder is drawn. Returns the number of
/// fallback-phase records it now holds and the deficit.
fn sample_fallback<S>(
    q: &Question,
    session: &VotingSession,
    sampler: &S,
    ctx: &RunContext,
    plan: &TemperaturePlan,
    store: &mut TraceStore,
) -> Result<(u64, u64), VotingError>
where
    S: TraceSampler + ?Sized,
{
    // (temperature, first index, already stored, wanted)
    let jobs: Vec<(Temperature, u32, u64, u64)> = plan
        .iter()
        .map(|(t, n)| {
            let voted = session.answers(&q.id, t).map_or(0, |a| a.len() as u64);
            let start = u32::from(voted > 0);
            let wanted = n.saturating_sub(voted);
            let stored = (0..wanted)
                .take_while(|i| {
                    store.contains(&TraceKey {
                        run_id: ctx.run_id.clone(),
                        question_id: q.id.clone(),
                        temperature: t,
                        round: 1,
                        sample_index: start + *i as u32,
                    })
                })
                .count() as u64;
            (t, start, stored, wanted)
        })
        .collect();

    let fetched: Vec<Result<(Vec<TraceRecord>, u64), BackendError>> = jobs
        .par_iter()
        .map(|(t, start, stored, n)| {
            if stored >= n {
                return Ok((Vec::new(), 0));
            }
            let request = SampleRequest {
                run_id: ctx.run_id.clone(),
                question_id: q.id.clone(),
                prompt: q.prompt.clone(),
                temperature: *t,
                count: (n - stored) as u32,
                seed: ctx.seed,
                round: 1,
                first_index: start + *stored as u32,
            };
            sampler.sample(&request).map(|b| (b.records, b.deficit))
        })
        .collect();

    let mut total = 0u64;
    let mut deficit = 0u64;
    for ((_, _, stored, _), result) in jobs.iter().zip(fetched) {
        let (records, missing) = result.map_err(|source| VotingError::Backend {
            question_id: q.id.clone(),
            source,
        })?;
        total += stored + records.len() as u64;
        deficit += missing;
        store.append_batch(records).map_err(|e| VotingError::Fallback {
            question_id: q.id.clone(),
            reason: e.to_string(),
        })?;
    }
    Ok((total, deficit))
}
