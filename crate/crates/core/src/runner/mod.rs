//! Orchestration: configured sweeps, voting runs, offline reports.
//!
//! Each command takes a resolved [`RunConfig`], holds the output directory's
//! lock while it writes, and finishes by emitting a [`RunReport`] as JSON
//! plus CSV tables.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::backends::{
    scenario_from_taxonomy, BackendError, Question, SampleBatch, SampleRequest, Scenario, TraceSampler,
};
use crate::estimators::EstimatorError;
use crate::temperature::Temperature;
use crate::trace_store::{read_jsonl_lines, read_store, StoreError, TraceKey, TraceRecord, TraceStore};
use crate::verifiers::{apply, apply_overlay, JudgedValid, VerifierSpec};
use crate::voting::{self, RunContext, VotingError};

pub mod config;
pub mod manifest;
pub mod report;

pub use config::{BackendConfig, PlanConfig, ReportOptions, RunConfig, VoteConfig};
pub use manifest::{Manifest, ManifestEntry};
pub use report::{build_report, flagged_traces, write_report, FlaggedTrace, ReportInputs, RunReport};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("config: {0}")]
    Config(String),
    #[error("output directory {0} is locked by another run")]
    Locked(PathBuf),
    #[error("backend: {0}")]
    Backend(String),
    #[error("verifier: {0}")]
    Verifier(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error("{0}")]
    Io(String),
}

impl RunnerError {
    /// Process exit code: 2 config, 3 backend, 4 verifier, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunnerError::Config(_) | RunnerError::Locked(_) => 2,
            RunnerError::Backend(_) => 3,
            RunnerError::Verifier(_) => 4,
            RunnerError::Store(_) | RunnerError::Estimator(_) | RunnerError::Io(_) => 1,
        }
    }
}

impl From<VotingError> for RunnerError {
    fn from(e: VotingError) -> Self {
        match e {
            VotingError::Backend { .. } => RunnerError::Backend(e.to_string()),
            VotingError::Store(s) => RunnerError::Store(s),
            VotingError::Params(_) => RunnerError::Config(e.to_string()),
            other => RunnerError::Backend(other.to_string()),
        }
    }
}

/// Exclusive lock on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self, RunnerError> {
        fs::create_dir_all(dir).map_err(|e| RunnerError::Io(format!("{}: {e}", dir.display())))?;
        let path = dir.join(".tempscale.lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(RunnerError::Locked(dir.to_path_buf())),
            Err(e) => Err(RunnerError::Io(format!("{}: {e}", path.display()))),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Command-line overrides applied on top of a loaded config.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub prune_raw: bool,
    pub resume: bool,
}

impl Overrides {
    pub fn apply(&self, config: &mut RunConfig) {
        if let Some(s) = self.seed {
            config.seed = Some(s);
        }
        if let Some(o) = &self.out {
            config.output_dir = o.clone();
        }
        config.prune_raw |= self.prune_raw;
    }
}

/// Applies each question's verifier to records the backend left unjudged.
struct Verified<'a> {
    inner: &'a dyn TraceSampler,
    specs: &'a HashMap<String, VerifierSpec>,
}

impl TraceSampler for Verified<'_> {
    fn sample(&self, request: &SampleRequest) -> Result<SampleBatch, BackendError> {
        let mut batch = self.inner.sample(request)?;
        if let Some(spec) = self.specs.get(&request.question_id) {
            for r in batch.records.iter_mut().filter(|r| r.correct.is_none()) {
                apply(r, spec);
            }
        }
        Ok(batch)
    }

    fn entropy_is_lower_bound(&self) -> bool {
        self.inner.entropy_is_lower_bound()
    }
}

/// What a finished command produced.
#[derive(Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub store: PathBuf,
    pub files: Vec<PathBuf>,
}

struct Prepared {
    config: RunConfig,
    manifest: Manifest,
    backend: Box<dyn TraceSampler>,
    specs: HashMap<String, VerifierSpec>,
}

/// The config's manifest, or one derived from its simulated scenario.
pub fn manifest_for(config: &RunConfig, scenario: Option<&Scenario>) -> Result<Manifest, RunnerError> {
    match (&config.manifest, scenario) {
        (Some(path), _) => Manifest::load(path, config.verifier),
        (None, Some(s)) => Manifest::from_scenario(s),
        (None, None) => Err(RunnerError::Config("http backend needs a question manifest".into())),
    }
}

fn prepare(config: &RunConfig) -> Result<Prepared, RunnerError> {
    config.validate()?;
    let scenario = config.load_scenario()?;
    let manifest = manifest_for(config, scenario.as_ref())?;
    let specs = manifest
        .entries
        .iter()
        .map(|e| (e.id.clone(), e.verifier_spec(config.verifier)))
        .collect();
    let backend = config.build_backend(scenario)?;
    Ok(Prepared {
        config: config.clone(),
        manifest,
        backend,
        specs,
    })
}

fn open_store(config: &RunConfig, resume: bool) -> Result<TraceStore, RunnerError> {
    let path = config.store_path();
    if !resume && path.exists() && fs::metadata(&path).map(|m| m.len() > 0).unwrap_or(false) {
        return Err(RunnerError::Config(format!(
            "{} already exists; pass --resume to continue run {}",
            path.display(),
            config.run_id
        )));
    }
    Ok(TraceStore::open(&path)?.with_prune_raw(config.prune_raw))
}

fn load_overlay(options: &ReportOptions) -> Result<Option<Vec<JudgedValid>>, RunnerError> {
    match &options.judged_valid {
        Some(path) => read_jsonl_lines(path)
            .map(Some)
            .map_err(|e| RunnerError::Verifier(format!("judged_valid overlay: {e}"))),
        None => Ok(None),
    }
}

fn finish(
    prepared: &Prepared,
    store: &TraceStore,
    voting: Option<voting::VotingRun>,
) -> Result<RunOutcome, RunnerError> {
    let config = &prepared.config;
    let mut records: Vec<TraceRecord> = store
        .records()
        .iter()
        .filter(|r| r.run_id == config.run_id)
        .cloned()
        .collect();
    let overlay_downgraded = load_overlay(&config.report)?.map(|o| apply_overlay(&mut records, &o));
    let report = build_report(
        &records,
        ReportInputs {
            options: config.report.clone(),
            questions: Some(prepared.manifest.ids()),
            stores: vec![store.path().display().to_string()],
            config: Some(config.clone()),
            entropy_lower_bound: prepared.backend.entropy_is_lower_bound(),
            overlay_downgraded,
            voting,
        },
    )?;
    let problems: BTreeMap<String, String> = prepared
        .manifest
        .entries
        .iter()
        .map(|e| (e.id.clone(), e.question.clone()))
        .collect();
    let flagged = flagged_traces(&report, &records, &problems);
    let files = write_report(&report, &flagged, &config.output_dir, &config.run_id)?;
    Ok(RunOutcome {
        report,
        store: store.path().to_path_buf(),
        files,
    })
}

/// Questions sampled concurrently before their traces are appended.
const SWEEP_BATCH: usize = 8;

/// Samples the full plan for every manifest question, skipping traces
/// already in the store when resuming.
pub fn cmd_sweep(config: &RunConfig, resume: bool) -> Result<RunOutcome, RunnerError> {
    let prepared = prepare(config)?;
    let plan = config.plan()?;
    let _lock = DirLock::acquire(&config.output_dir)?;
    let mut store = open_store(config, resume)?;
    let sampler = Verified {
        inner: prepared.backend.as_ref(),
        specs: &prepared.specs,
    };
    let questions = prepared.manifest.questions();
    let mut deficit = 0u64;

    for batch in questions.chunks(SWEEP_BATCH) {
        // (question, temperature, first missing index, count)
        let jobs: Vec<(&Question, Temperature, u32, u32)> = batch
            .iter()
            .flat_map(|q| plan.iter().map(move |(t, n)| (q, t, n)))
            .filter_map(|(q, t, n)| {
                let have = (0..n)
                    .take_while(|i| {
                        store.contains(&TraceKey {
                            run_id: config.run_id.clone(),
                            question_id: q.id.clone(),
                            temperature: t,
                            round: 1,
                            sample_index: *i as u32,
                        })
                    })
                    .count() as u64;
                (have < n).then_some((q, t, have as u32, (n - have) as u32))
            })
            .collect();
        let results: Vec<Result<SampleBatch, BackendError>> = jobs
            .par_iter()
            .map(|(q, t, first, count)| {
                sampler.sample(&SampleRequest {
                    run_id: config.run_id.clone(),
                    question_id: q.id.clone(),
                    prompt: q.prompt.clone(),
                    temperature: *t,
                    count: *count,
                    seed: config.seed(),
                    round: 1,
                    first_index: *first,
                })
            })
            .collect();
        let mut records = Vec::new();
        for ((q, t, _, _), result) in jobs.iter().zip(results) {
            let batch = result.map_err(|e| RunnerError::Backend(format!("question {} T={t}: {e}", q.id)))?;
            deficit += batch.deficit;
            records.extend(batch.records);
        }
        store.append_batch(records)?;
    }
    store.sync()?;
    if deficit > 0 {
        log::warn!("{deficit} requested samples were not delivered");
    }
    finish(&prepared, &store, None)
}

/// Voting stage followed by fallback sampling of the survivors.
pub fn cmd_vote(config: &RunConfig, resume: bool) -> Result<RunOutcome, RunnerError> {
    let vote = config
        .vote
        .clone()
        .ok_or_else(|| RunnerError::Config("vote needs a [vote] section".into()))?;
    let prepared = prepare(config)?;
    let plan = config.plan()?;
    let (params, fallback) = vote.resolve(&plan)?;
    let _lock = DirLock::acquire(&config.output_dir)?;
    let mut store = open_store(config, resume)?;
    let sampler = Verified {
        inner: prepared.backend.as_ref(),
        specs: &prepared.specs,
    };
    let ctx = RunContext {
        run_id: config.run_id.clone(),
        seed: config.seed(),
    };
    let run = voting::run(
        &prepared.manifest.questions(),
        &params,
        &sampler,
        &ctx,
        &fallback,
        &plan,
        &mut store,
    )?;
    store.sync()?;
    finish(&prepared, &store, Some(run))
}

/// Inputs of an offline report.
#[derive(Clone, Debug, Default)]
pub struct ReportRequest {
    pub stores: Vec<PathBuf>,
    pub options: ReportOptions,
    pub manifest: Option<Manifest>,
    pub config: Option<RunConfig>,
    pub entropy_lower_bound: bool,
}

impl ReportRequest {
    /// Options, manifest and provenance taken from the config of the run
    /// that wrote `stores`.
    pub fn for_config(config: &RunConfig, stores: Vec<PathBuf>) -> Result<Self, RunnerError> {
        config.validate()?;
        let scenario = config.load_scenario()?;
        Ok(ReportRequest {
            stores,
            options: config.report.clone(),
            manifest: Some(manifest_for(config, scenario.as_ref())?),
            config: Some(config.clone()),
            entropy_lower_bound: matches!(&config.backend, BackendConfig::Http(e) if e.logprobs),
        })
    }
}

/// Recomputes every statistic from the given stores, pooling all runs.
pub fn report_from_stores(request: &ReportRequest) -> Result<(RunReport, Vec<FlaggedTrace>), RunnerError> {
    if request.stores.is_empty() {
        return Err(RunnerError::Config("no stores given".into()));
    }
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for path in &request.stores {
        if !path.exists() {
            return Err(RunnerError::Config(format!("store {} not found", path.display())));
        }
        for r in read_store(path)? {
            if !seen.insert(r.key()) {
                return Err(RunnerError::Store(StoreError::Duplicate(r.key())));
            }
            records.push(r);
        }
    }
    let overlay_downgraded = load_overlay(&request.options)?.map(|o| apply_overlay(&mut records, &o));
    let report = build_report(
        &records,
        ReportInputs {
            options: request.options.clone(),
            questions: request.manifest.as_ref().map(Manifest::ids),
            stores: request.stores.iter().map(|p| p.display().to_string()).collect(),
            config: request.config.clone(),
            entropy_lower_bound: request.entropy_lower_bound,
            overlay_downgraded,
            voting: None,
        },
    )?;
    let problems: BTreeMap<String, String> = request
        .manifest
        .iter()
        .flat_map(|m| m.entries.iter().map(|e| (e.id.clone(), e.question.clone())))
        .collect();
    let flagged = flagged_traces(&report, &records, &problems);
    Ok((report, flagged))
}

/// [`report_from_stores`] plus files `<prefix>.*` in `out`.
pub fn cmd_report(request: &ReportRequest, out: &Path, prefix: &str) -> Result<RunOutcome, RunnerError> {
    let (report, flagged) = report_from_stores(request)?;
    let _lock = DirLock::acquire(out)?;
    let files = write_report(&report, &flagged, out, prefix)?;
    Ok(RunOutcome {
        report,
        store: request.stores[0].clone(),
        files,
    })
}

/// Taxonomy scenario rendered as TOML.
pub fn scenario_gen(
    counts: [usize; 4],
    temperatures: &[Temperature],
    seed: u64,
) -> Result<(Scenario, String), RunnerError> {
    let [easy, medium, hard, impossible] = counts;
    let scenario = scenario_from_taxonomy(easy, medium, hard, impossible, temperatures, seed)
        .map_err(|e| RunnerError::Config(e.to_string()))?;
    let text = toml::to_string(&scenario).map_err(|e| RunnerError::Io(e.to_string()))?;
    Ok((scenario, text))
}
