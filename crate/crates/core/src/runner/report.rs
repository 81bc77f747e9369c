//! The run report: a pure function of stored traces and report options.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ReportOptions, RunConfig};
use super::RunnerError;
use crate::backends::prompts::render_validation;
use crate::entropy::{split_by_correctness, write_histograms_csv, write_splits_csv, EntropySummary, GroupBy};
use crate::estimators::{
    avg_at_n, dataset_curve, default_k_grid, multi_temperature_curve, question_curve, write_curves_csv,
    PassKCurve,
};
use crate::temperature::Temperature;
use crate::temperature_plan::{classify_difficulty, minimal_subset, preferred_temperature, DifficultyLabel};
use crate::trace_store::{tally_records, QuestionTally, TraceRecord};
use crate::voting::{ExitStatus, VotingRun};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub run_ids: Vec<String>,
    pub stores: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<RunConfig>,
    pub options: ReportOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSummary {
    pub temperature: Temperature,
    /// Questions with at least one trace at this temperature.
    pub questions: usize,
    pub min_samples: u64,
    /// Mean over questions of Avg@N.
    pub avg_at_n: f64,
    /// Fraction of all report questions solved here (Pass@N at N).
    pub pass_at_n: f64,
    pub solved: usize,
    pub curve: PassKCurve,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestSingle {
    pub temperature: Temperature,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassAllSummary {
    pub multi_temperature: f64,
    pub solved: usize,
    pub total: usize,
    /// Highest single-temperature Pass@N; ties go to the lower temperature.
    pub best_single: Option<BestSingle>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preferred {
    pub temperature: Temperature,
    pub traces_to_first_success: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionReport {
    pub question_id: String,
    pub samples: u64,
    pub correct: u64,
    pub unknown: u64,
    pub solved: bool,
    pub solved_at: Vec<Temperature>,
    /// Absent when the question lacks traces at either pair temperature.
    pub difficulty: Option<DifficultyLabel>,
    /// Fewest traces to the first correct one; ties go to the lower
    /// temperature.
    pub preferred: Option<Preferred>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropySection {
    /// Entropy came from renormalized top-k log-probabilities and
    /// underestimates the full-vocabulary value.
    pub lower_bound: bool,
    pub dataset: EntropySummary,
    pub questions: EntropySummary,
}

/// A (question, temperature) cell with a low but nonzero solve rate whose
/// correct traces deserve an external check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlaggedCell {
    pub question_id: String,
    pub temperature: Temperature,
    pub avg_at_n: f64,
    pub n_correct: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub provenance: Provenance,
    pub questions: Vec<String>,
    pub temperatures: Vec<Temperature>,
    pub per_temperature: Vec<TemperatureSummary>,
    pub question_curves: Vec<PassKCurve>,
    pub multi_temperature: Option<PassKCurve>,
    /// Why the multi-temperature curve is absent, when it is.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multi_temperature_note: Option<String>,
    pub pass_all: PassAllSummary,
    pub difficulty_pair: Option<(Temperature, Temperature)>,
    pub per_question: Vec<QuestionReport>,
    pub minimal_subset: Vec<Temperature>,
    pub entropy: EntropySection,
    pub unknown_verdicts: u64,
    pub flagged_for_validation: Vec<FlaggedCell>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlay_downgraded: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub voting: Option<VotingRun>,
}

/// Everything a report needs besides the traces.
#[derive(Clone, Debug, Default)]
pub struct ReportInputs {
    pub options: ReportOptions,
    /// Manifest order; when absent, the sorted question ids in the traces.
    pub questions: Option<Vec<String>>,
    pub stores: Vec<String>,
    pub config: Option<RunConfig>,
    pub entropy_lower_bound: bool,
    pub overlay_downgraded: Option<usize>,
    pub voting: Option<VotingRun>,
}

fn budget_grid(total: u64) -> Vec<u64> {
    let mut g = default_k_grid(total);
    if g.last() != Some(&total) && total > 0 {
        g.push(total);
    }
    g
}

pub fn build_report(records: &[TraceRecord], inputs: ReportInputs) -> Result<RunReport, RunnerError> {
    let options = inputs.options;
    options.validate()?;
    let tallies = tally_records(records);

    // sorted so a report does not depend on manifest order
    let questions: Vec<String> = match inputs.questions {
        Some(mut q) => {
            q.sort();
            q.dedup();
            q
        }
        None => tallies
            .iter()
            .map(|t| t.question_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    let known: BTreeSet<&str> = questions.iter().map(String::as_str).collect();
    if let Some(t) = tallies.iter().find(|t| !known.contains(t.question_id.as_str())) {
        return Err(RunnerError::Config(format!(
            "traces for question {} which is not in the manifest",
            t.question_id
        )));
    }
    let total = questions.len();

    let mut by_temp: BTreeMap<Temperature, Vec<&QuestionTally>> = BTreeMap::new();
    for t in &tallies {
        by_temp.entry(t.temperature).or_default().push(t);
    }
    let temperatures: Vec<Temperature> = by_temp.keys().copied().collect();

    let mut per_temperature = Vec::new();
    let mut question_curves = Vec::new();
    for (temp, ts) in &by_temp {
        let owned: Vec<QuestionTally> = ts.iter().map(|t| (*t).clone()).collect();
        let min_samples = owned.iter().map(|t| t.n_samples).min().unwrap_or(0);
        let grid: Vec<u64> = match &options.k_grid {
            Some(g) => g.iter().copied().filter(|k| *k <= min_samples).collect(),
            None => default_k_grid(min_samples),
        };
        let curve = dataset_curve(&owned, &grid)?;
        for t in &owned {
            question_curves.push(question_curve(t, &grid)?);
        }
        let avg = owned
            .iter()
            .map(|t| avg_at_n(t.n_samples, t.n_correct))
            .sum::<Result<f64, _>>()?
            / owned.len() as f64;
        let solved = owned.iter().filter(|t| t.n_correct > 0).count();
        per_temperature.push(TemperatureSummary {
            temperature: *temp,
            questions: owned.len(),
            min_samples,
            avg_at_n: avg,
            pass_at_n: solved as f64 / total.max(1) as f64,
            solved,
            curve,
        });
    }

    let nonzero: Vec<&TemperatureSummary> =
        per_temperature.iter().filter(|s| !s.temperature.is_zero()).collect();
    let (multi_temperature, multi_temperature_note) = if nonzero.is_empty() {
        (None, Some("no nonzero temperatures".to_string()))
    } else {
        let budget: u64 = nonzero.iter().map(|s| s.min_samples).sum();
        let grid = match &options.k_grid {
            Some(g) => g.iter().copied().filter(|k| *k <= budget).collect(),
            None => budget_grid(budget),
        };
        match multi_temperature_curve(&tallies, &grid) {
            Ok(c) => (Some(c), None),
            Err(e) => (None, Some(e.to_string())),
        }
    };

    let solved_set: BTreeSet<&str> = tallies
        .iter()
        .filter(|t| t.n_correct > 0)
        .map(|t| t.question_id.as_str())
        .collect();
    let best_single = per_temperature
        .iter()
        .fold(None::<BestSingle>, |best, s| match best {
            Some(b) if b.value >= s.pass_at_n => Some(b),
            _ => Some(BestSingle {
                temperature: s.temperature,
                value: s.pass_at_n,
            }),
        });
    let pass_all = PassAllSummary {
        multi_temperature: solved_set.len() as f64 / total.max(1) as f64,
        solved: solved_set.len(),
        total,
        best_single,
    };

    let difficulty_pair = options.difficulty_pair.or_else(|| {
        let lo = temperatures.iter().find(|t| !t.is_zero())?;
        let hi = temperatures.last()?;
        (lo != hi).then_some((*lo, *hi))
    });

    // correctness sequences in sampling order, per (question, temperature)
    let mut ordered: Vec<&TraceRecord> = records.iter().collect();
    ordered.sort_by(|a, b| {
        (&a.question_id, a.temperature, &a.run_id, a.round, a.sample_index).cmp(&(
            &b.question_id,
            b.temperature,
            &b.run_id,
            b.round,
            b.sample_index,
        ))
    });
    let mut sequences: BTreeMap<&str, BTreeMap<Temperature, Vec<bool>>> = BTreeMap::new();
    for r in ordered {
        sequences
            .entry(&r.question_id)
            .or_default()
            .entry(r.temperature)
            .or_default()
            .push(r.is_correct());
    }
    let mut tally_index: BTreeMap<(&str, Temperature), &QuestionTally> = BTreeMap::new();
    for t in &tallies {
        tally_index.insert((t.question_id.as_str(), t.temperature), t);
    }

    let mut per_question = Vec::with_capacity(total);
    let mut unknown_verdicts = 0;
    for q in &questions {
        let cells: Vec<&QuestionTally> = tallies.iter().filter(|t| t.question_id == *q).collect();
        let unknown: u64 = cells.iter().map(|t| t.n_unknown).sum();
        unknown_verdicts += unknown;
        let difficulty = difficulty_pair.and_then(|(t1, t2)| {
            let a = tally_index.get(&(q.as_str(), t1))?;
            let b = tally_index.get(&(q.as_str(), t2))?;
            let avg1 = avg_at_n(a.n_samples, a.n_correct).ok()?;
            let avg2 = avg_at_n(b.n_samples, b.n_correct).ok()?;
            Some(classify_difficulty(avg1, avg2, (a.n_correct, b.n_correct), options.theta_easy))
        });
        let preferred = sequences.get(q.as_str()).and_then(|per_t| {
            preferred_temperature(per_t.iter().map(|(t, s)| (*t, s.as_slice()))).map(|(temperature, n)| {
                Preferred {
                    temperature,
                    traces_to_first_success: n,
                }
            })
        });
        let solved_at: Vec<Temperature> =
            cells.iter().filter(|t| t.n_correct > 0).map(|t| t.temperature).collect();
        per_question.push(QuestionReport {
            question_id: q.clone(),
            samples: cells.iter().map(|t| t.n_samples).sum(),
            correct: cells.iter().map(|t| t.n_correct).sum(),
            unknown,
            solved: !solved_at.is_empty(),
            solved_at,
            difficulty,
            preferred,
        });
    }

    let mut solved_sets: BTreeMap<Temperature, BTreeSet<String>> = BTreeMap::new();
    for t in &tallies {
        let set = solved_sets.entry(t.temperature).or_default();
        if t.n_correct > 0 {
            set.insert(t.question_id.clone());
        }
    }

    let flagged_for_validation = tallies
        .iter()
        .filter(|t| t.n_correct > 0 && (t.n_correct as f64 / t.n_samples as f64) <= options.validation_threshold)
        .map(|t| FlaggedCell {
            question_id: t.question_id.clone(),
            temperature: t.temperature,
            avg_at_n: t.n_correct as f64 / t.n_samples as f64,
            n_correct: t.n_correct,
        })
        .collect();

    let entropy = EntropySection {
        lower_bound: inputs.entropy_lower_bound,
        dataset: split_by_correctness(records, GroupBy::Dataset, options.entropy_bins),
        questions: split_by_correctness(records, GroupBy::Question, options.entropy_bins),
    };

    let run_ids: Vec<String> = records
        .iter()
        .map(|r| r.run_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    Ok(RunReport {
        provenance: Provenance {
            tool: "tempscale".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            run_ids,
            stores: inputs.stores,
            seed: inputs.config.as_ref().and_then(|c| c.seed),
            config: inputs.config,
            options,
        },
        questions,
        temperatures,
        per_temperature,
        question_curves,
        multi_temperature,
        multi_temperature_note,
        pass_all,
        difficulty_pair,
        per_question,
        minimal_subset: minimal_subset(&solved_sets),
        entropy,
        unknown_verdicts,
        flagged_for_validation,
        overlay_downgraded: inputs.overlay_downgraded,
        voting: inputs.voting,
    })
}

/// One line of the flagged-trace export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlaggedTrace {
    pub run_id: String,
    pub question_id: String,
    pub temperature: Temperature,
    pub round: u32,
    pub sample_index: u32,
    pub trace: Option<String>,
    pub answer_extracted: Option<String>,
    /// Filled in by whoever runs the judge.
    pub reference_solutions: Vec<String>,
    pub validation_prompt: String,
}

/// Correct traces in the flagged cells, with the validation prompt filled
/// in from `problems` (question id to problem text) where known.
pub fn flagged_traces(
    report: &RunReport,
    records: &[TraceRecord],
    problems: &BTreeMap<String, String>,
) -> Vec<FlaggedTrace> {
    let cells: BTreeSet<(&str, Temperature)> = report
        .flagged_for_validation
        .iter()
        .map(|c| (c.question_id.as_str(), c.temperature))
        .collect();
    records
        .iter()
        .filter(|r| r.is_correct() && cells.contains(&(r.question_id.as_str(), r.temperature)))
        .map(|r| {
            let problem = problems.get(&r.question_id).map(String::as_str).unwrap_or("");
            let trace = r.answer_raw.clone();
            FlaggedTrace {
                run_id: r.run_id.clone(),
                question_id: r.question_id.clone(),
                temperature: r.temperature,
                round: r.round,
                sample_index: r.sample_index,
                validation_prompt: render_validation(problem, trace.as_deref().unwrap_or("")),
                trace,
                answer_extracted: r.answer_extracted.clone(),
                reference_solutions: Vec::new(),
            }
        })
        .collect()
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> RunnerError + '_ {
    move |e| RunnerError::Io(format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Result<fs::File, RunnerError> {
    fs::File::create(path).map_err(|e| RunnerError::Io(format!("{}: {e}", path.display())))
}

/// Writes the JSON report and its CSV tables as `<prefix>.*` under `dir`.
/// Returns the paths written.
pub fn write_report(
    report: &RunReport,
    flagged: &[FlaggedTrace],
    dir: &Path,
    prefix: &str,
) -> Result<Vec<PathBuf>, RunnerError> {
    fs::create_dir_all(dir).map_err(|e| RunnerError::Io(format!("{}: {e}", dir.display())))?;
    let path = |suffix: &str| dir.join(format!("{prefix}.{suffix}"));
    let mut written = Vec::new();

    let p = path("report.json");
    let mut f = create(&p)?;
    serde_json::to_writer_pretty(&mut f, report).map_err(|e| RunnerError::Io(e.to_string()))?;
    f.write_all(b"\n").map_err(|e| RunnerError::Io(e.to_string()))?;
    written.push(p);

    let p = path("passk.csv");
    let mut curves: Vec<PassKCurve> = report.per_temperature.iter().map(|s| s.curve.clone()).collect();
    curves.extend(report.multi_temperature.iter().cloned());
    curves.extend(report.question_curves.iter().cloned());
    write_curves_csv(create(&p)?, &curves).map_err(csv_err(&p))?;
    written.push(p);

    let splits: Vec<_> = report
        .entropy
        .dataset
        .splits
        .iter()
        .chain(&report.entropy.questions.splits)
        .cloned()
        .collect();
    let p = path("entropy.csv");
    write_splits_csv(create(&p)?, &splits).map_err(csv_err(&p))?;
    written.push(p);
    let p = path("entropy_hist.csv");
    write_histograms_csv(create(&p)?, &splits).map_err(csv_err(&p))?;
    written.push(p);

    let p = path("summary.csv");
    let mut w = csv::Writer::from_writer(create(&p)?);
    let write = |w: &mut csv::Writer<fs::File>, row: &[String]| w.write_record(row).map_err(csv_err(&p));
    write(
        &mut w,
        &["temperature", "questions", "min_samples", "avg_at_n", "pass_at_n", "solved"].map(String::from),
    )?;
    for s in &report.per_temperature {
        write(
            &mut w,
            &[
                s.temperature.to_string(),
                s.questions.to_string(),
                s.min_samples.to_string(),
                s.avg_at_n.to_string(),
                s.pass_at_n.to_string(),
                s.solved.to_string(),
            ],
        )?;
    }
    write(
        &mut w,
        &[
            "all".into(),
            report.pass_all.total.to_string(),
            String::new(),
            String::new(),
            report.pass_all.multi_temperature.to_string(),
            report.pass_all.solved.to_string(),
        ],
    )?;
    w.flush().map_err(|e| RunnerError::Io(e.to_string()))?;
    written.push(p.clone());

    let p = path("difficulty.csv");
    let mut w = csv::Writer::from_writer(create(&p)?);
    let write = |w: &mut csv::Writer<fs::File>, row: &[String]| w.write_record(row).map_err(csv_err(&p));
    write(
        &mut w,
        &[
            "question_id",
            "samples",
            "correct",
            "unknown",
            "solved",
            "difficulty",
            "preferred_temperature",
            "traces_to_first_success",
        ]
        .map(String::from),
    )?;
    for q in &report.per_question {
        write(
            &mut w,
            &[
                q.question_id.clone(),
                q.samples.to_string(),
                q.correct.to_string(),
                q.unknown.to_string(),
                q.solved.to_string(),
                q.difficulty.map(|d| d.to_string()).unwrap_or_default(),
                q.preferred.map(|p| p.temperature.to_string()).unwrap_or_default(),
                q.preferred
                    .map(|p| p.traces_to_first_success.to_string())
                    .unwrap_or_default(),
            ],
        )?;
    }
    w.flush().map_err(|e| RunnerError::Io(e.to_string()))?;
    written.push(p.clone());

    if let Some(v) = &report.voting {
        let p = path("exit_log.csv");
        let mut w = csv::Writer::from_writer(create(&p)?);
        let write = |w: &mut csv::Writer<fs::File>, row: &[String]| w.write_record(row).map_err(csv_err(&p));
        write(
            &mut w,
            &["question_id", "exit_round", "samples_used", "deficit"].map(String::from),
        )?;
        for e in &v.exit_log {
            let status = match e.status {
                ExitStatus::Exited(r) => r.to_string(),
                ExitStatus::Survived => "survived".into(),
            };
            write(
                &mut w,
                &[
                    e.question_id.clone(),
                    status,
                    e.samples_used.to_string(),
                    e.deficit.to_string(),
                ],
            )?;
        }
        w.flush().map_err(|e| RunnerError::Io(e.to_string()))?;
        written.push(p.clone());
    }

    let p = path("flagged.jsonl");
    let mut f = create(&p)?;
    for t in flagged {
        serde_json::to_writer(&mut f, t).map_err(|e| RunnerError::Io(e.to_string()))?;
        f.write_all(b"\n").map_err(|e| RunnerError::Io(e.to_string()))?;
    }
    written.push(p);
    Ok(written)
}
