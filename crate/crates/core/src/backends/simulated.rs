//! Seeded stand-in for a model server.
//!
//! A [`Scenario`] gives, per question and temperature, the probability of a
//! correct answer, a categorical over wrong answers and an entropy model.
//! Each sample is drawn from its own counter-based stream, so results are a
//! pure function of `(scenario, request)`.

use std::collections::{HashMap, HashSet};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::rng::{labelled_rng, StreamKey};
use super::{BackendError, SampleBatch, SampleRequest, TraceSampler};
use crate::temperature::Temperature;
use crate::temperature_plan::DifficultyLabel;
use crate::trace_store::TraceRecord;

/// Gaussian model of a trace's mean entropy, clamped at zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyModel {
    pub correct_mean: f64,
    pub correct_spread: f64,
    pub incorrect_mean: f64,
    pub incorrect_spread: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioCell {
    pub temperature: Temperature,
    pub p_correct: f64,
    /// Weights over the question's `wrong_answers`, summing to 1.
    pub wrong_weights: Vec<f64>,
    pub entropy: EntropyModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioQuestion {
    pub id: String,
    pub reference: String,
    pub wrong_answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<DifficultyLabel>,
    pub cells: Vec<ScenarioCell>,
}

impl ScenarioQuestion {
    pub fn cell(&self, t: Temperature) -> Option<&ScenarioCell> {
        self.cells.iter().find(|c| c.temperature == t)
    }
}

/// Uniform trace length model, in tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCountModel {
    pub min: u64,
    pub max: u64,
}

impl Default for TokenCountModel {
    fn default() -> Self {
        TokenCountModel { min: 256, max: 4096 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub token_count: TokenCountModel,
    pub questions: Vec<ScenarioQuestion>,
}

impl Scenario {
    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |m: String| Err(BackendError::Scenario(m));
        if self.token_count.min > self.token_count.max {
            return bad("token_count.min exceeds token_count.max".into());
        }
        let mut ids = HashSet::new();
        for q in &self.questions {
            if !ids.insert(q.id.as_str()) {
                return bad(format!("duplicate question id {}", q.id));
            }
            if q.wrong_answers.contains(&q.reference) {
                return bad(format!("{}: a wrong answer equals the reference", q.id));
            }
            let mut temps = HashSet::new();
            for c in &q.cells {
                let at = format!("{} T={}", q.id, c.temperature);
                if !temps.insert(c.temperature) {
                    return bad(format!("{at}: duplicate temperature"));
                }
                if !(0.0..=1.0).contains(&c.p_correct) {
                    return bad(format!("{at}: p_correct {} outside [0,1]", c.p_correct));
                }
                if c.temperature.is_zero() && c.p_correct != 0.0 && c.p_correct != 1.0 {
                    return bad(format!("{at}: T=0 is deterministic, p_correct must be 0 or 1"));
                }
                if c.p_correct < 1.0 {
                    if c.wrong_weights.len() != q.wrong_answers.len() || q.wrong_answers.is_empty() {
                        return bad(format!("{at}: wrong_weights must match wrong_answers"));
                    }
                    if c.wrong_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                        return bad(format!("{at}: negative wrong weight"));
                    }
                    let sum: f64 = c.wrong_weights.iter().sum();
                    if (sum - 1.0).abs() > 1e-9 {
                        return bad(format!("{at}: wrong weights sum to {sum}, not 1"));
                    }
                }
                let e = c.entropy;
                if [e.correct_mean, e.correct_spread, e.incorrect_mean, e.incorrect_spread]
                    .iter()
                    .any(|v| !(v.is_finite() && *v >= 0.0))
                {
                    return bad(format!("{at}: entropy model needs finite non-negative values"));
                }
            }
        }
        Ok(())
    }

    pub fn question(&self, id: &str) -> Option<&ScenarioQuestion> {
        self.questions.iter().find(|q| q.id == id)
    }

    pub fn temperatures(&self) -> Vec<Temperature> {
        let mut ts: Vec<Temperature> = self
            .questions
            .iter()
            .flat_map(|q| q.cells.iter().map(|c| c.temperature))
            .collect();
        ts.sort_unstable();
        ts.dedup();
        ts
    }
}

/// Draws one sample from its own stream.
fn draw_one(
    scenario: &Scenario,
    q: &ScenarioQuestion,
    cell: &ScenarioCell,
    request: &SampleRequest,
    sample_index: u32,
) -> TraceRecord {
    // T=0 is greedy decoding: every draw is the same trace
    let (round, idx) = if cell.temperature.is_zero() {
        (0, 0)
    } else {
        (request.round, sample_index)
    };
    let mut rng = StreamKey {
        seed: request.seed,
        question_id: &q.id,
        temperature: cell.temperature,
        round,
        sample_index: idx,
    }
    .rng();
    let u: f64 = rng.random();
    let correct = u < cell.p_correct;
    let answer = if correct {
        q.reference.clone()
    } else {
        let v: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = q.wrong_answers.len() - 1;
        for (i, w) in cell.wrong_weights.iter().enumerate() {
            acc += w;
            if v < acc {
                pick = i;
                break;
            }
        }
        q.wrong_answers[pick].clone()
    };
    let (mean, spread) = if correct {
        (cell.entropy.correct_mean, cell.entropy.correct_spread)
    } else {
        (cell.entropy.incorrect_mean, cell.entropy.incorrect_spread)
    };
    let z: f64 = Normal::new(0.0, 1.0).expect("unit normal").sample(&mut rng);
    let entropy = (mean + spread * z).max(0.0);
    let tokens = rng.random_range(scenario.token_count.min..=scenario.token_count.max);
    TraceRecord {
        run_id: request.run_id.clone(),
        question_id: q.id.clone(),
        temperature: cell.temperature,
        round: request.round,
        sample_index,
        answer_raw: Some(format!(
            "[simulated trace {} T={}]\nTherefore the answer is \\boxed{{{answer}}}.",
            q.id, cell.temperature
        )),
        answer_extracted: Some(answer),
        correct: Some(correct),
        mean_entropy: Some(entropy),
        token_count: tokens,
    }
}

/// `request.count` simulated traces.
pub fn simulated_sample(scenario: &Scenario, request: &SampleRequest) -> Result<Vec<TraceRecord>, BackendError> {
    request.check()?;
    let q = scenario
        .question(&request.question_id)
        .ok_or_else(|| BackendError::UnknownQuestion(request.question_id.clone()))?;
    sample_question(scenario, q, request)
}

fn sample_question(
    scenario: &Scenario,
    q: &ScenarioQuestion,
    request: &SampleRequest,
) -> Result<Vec<TraceRecord>, BackendError> {
    let cell = q.cell(request.temperature).ok_or_else(|| BackendError::UnknownTemperature {
        question_id: q.id.clone(),
        temperature: request.temperature,
    })?;
    Ok((0..request.count)
        .map(|i| draw_one(scenario, q, cell, request, request.first_index + i))
        .collect())
}

/// [`TraceSampler`] over a validated scenario.
#[derive(Clone, Debug)]
pub struct SimulatedBackend {
    scenario: Scenario,
    index: HashMap<String, usize>,
}

impl SimulatedBackend {
    pub fn new(scenario: Scenario) -> Result<Self, BackendError> {
        scenario.validate()?;
        let index = scenario
            .questions
            .iter()
            .enumerate()
            .map(|(i, q)| (q.id.clone(), i))
            .collect();
        Ok(SimulatedBackend { scenario, index })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }
}

impl TraceSampler for SimulatedBackend {
    fn sample(&self, request: &SampleRequest) -> Result<SampleBatch, BackendError> {
        request.check()?;
        let q = self
            .index
            .get(&request.question_id)
            .map(|i| &self.scenario.questions[*i])
            .ok_or_else(|| BackendError::UnknownQuestion(request.question_id.clone()))?;
        Ok(SampleBatch {
            records: sample_question(&self.scenario, q, request)?,
            deficit: 0,
        })
    }
}

const WRONG_ANSWERS_PER_QUESTION: usize = 6;

fn entropy_for(label: DifficultyLabel, t: Temperature) -> EntropyModel {
    let x = t.as_f64();
    match label {
        // correct traces stay calm while wrong ones heat up with T
        DifficultyLabel::Easy | DifficultyLabel::Medium => EntropyModel {
            correct_mean: 0.30 + 0.30 * x,
            correct_spread: 0.08,
            incorrect_mean: 0.30 + 0.90 * x,
            incorrect_spread: 0.08,
        },
        // indistinguishable
        DifficultyLabel::Hard => EntropyModel {
            correct_mean: 0.50 + 0.60 * x,
            correct_spread: 0.15,
            incorrect_mean: 0.50 + 0.60 * x,
            incorrect_spread: 0.15,
        },
        DifficultyLabel::Impossible => EntropyModel {
            correct_mean: 0.50 + 1.20 * x,
            correct_spread: 0.15,
            incorrect_mean: 0.50 + 1.20 * x,
            incorrect_spread: 0.15,
        },
    }
}

/// Builds a scenario from the four difficulty groups.
///
/// * easy: `p ~ U[0.90, 0.99]` at every T>0, solved at T=0;
/// * medium: `p ~ U[0.005, 0.05]` at every T>0;
/// * hard: `p ~ U[0.001, 0.01]` at exactly one T>0 and 0 elsewhere, assigned
///   round-robin starting from the highest temperature;
/// * impossible: never correct.
///
/// T=0 is deterministic, so only easy questions are correct there.
pub fn scenario_from_taxonomy(
    n_easy: usize,
    n_medium: usize,
    n_hard: usize,
    n_impossible: usize,
    temperatures: &[Temperature],
    seed: u64,
) -> Result<Scenario, BackendError> {
    let mut temps = temperatures.to_vec();
    temps.sort_unstable();
    temps.dedup();
    if temps.is_empty() {
        return Err(BackendError::Scenario("no temperatures".into()));
    }
    let sampling: Vec<Temperature> = temps.iter().rev().copied().filter(|t| !t.is_zero()).collect();
    if n_hard > 0 && (temps.len() < 2 || sampling.is_empty()) {
        return Err(BackendError::Scenario(
            "hard questions need at least two temperatures, one of them above zero".into(),
        ));
    }

    let groups = [
        (DifficultyLabel::Easy, n_easy),
        (DifficultyLabel::Medium, n_medium),
        (DifficultyLabel::Hard, n_hard),
        (DifficultyLabel::Impossible, n_impossible),
    ];
    let mut questions = Vec::new();
    let mut hard_slot = 0usize;
    for (label, count) in groups {
        for i in 0..count {
            let id = format!("{label}-{:02}", i + 1);
            let mut rng = labelled_rng(seed, &id);
            let reference = rng.random_range(0..1000u32);
            let mut wrong = Vec::with_capacity(WRONG_ANSWERS_PER_QUESTION);
            while wrong.len() < WRONG_ANSWERS_PER_QUESTION {
                let w = rng.random_range(0..1000u32);
                if w != reference && !wrong.contains(&w) {
                    wrong.push(w);
                }
            }
            let hard_temperature = (label == DifficultyLabel::Hard).then(|| {
                let t = sampling[hard_slot % sampling.len()];
                hard_slot += 1;
                t
            });
            let cells = temps
                .iter()
                .map(|t| {
                    let p_correct = if t.is_zero() {
                        if label == DifficultyLabel::Easy { 1.0 } else { 0.0 }
                    } else {
                        match label {
                            DifficultyLabel::Easy => rng.random_range(0.90..=0.99),
                            DifficultyLabel::Medium => rng.random_range(0.005..=0.05),
                            DifficultyLabel::Hard if Some(*t) == hard_temperature => {
                                rng.random_range(0.001..=0.01)
                            }
                            DifficultyLabel::Hard | DifficultyLabel::Impossible => 0.0,
                        }
                    };
                    let raw: Vec<f64> = (0..WRONG_ANSWERS_PER_QUESTION)
                        .map(|_| rng.random_range(0.2..1.0))
                        .collect();
                    let sum: f64 = raw.iter().sum();
                    let mut wrong_weights: Vec<f64> = raw.iter().map(|w| w / sum).collect();
                    // absorb rounding so the weights sum to 1 to the last bit
                    let head: f64 = wrong_weights[..WRONG_ANSWERS_PER_QUESTION - 1].iter().sum();
                    wrong_weights[WRONG_ANSWERS_PER_QUESTION - 1] = 1.0 - head;
                    ScenarioCell {
                        temperature: *t,
                        p_correct,
                        wrong_weights,
                        entropy: entropy_for(label, *t),
                    }
                })
                .collect();
            questions.push(ScenarioQuestion {
                id,
                reference: reference.to_string(),
                wrong_answers: wrong.iter().map(u32::to_string).collect(),
                label: Some(label),
                cells,
            });
        }
    }
    let scenario = Scenario {
        token_count: TokenCountModel::default(),
        questions,
    };
    scenario.validate()?;
    Ok(scenario)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(x: u16) -> Temperature {
        Temperature::from_tenths(x)
    }

    fn grid() -> Vec<Temperature> {
        (0..=12).map(t).collect()
    }

    fn request(q: &str, temp: Temperature, count: u32) -> SampleRequest {
        SampleRequest {
            run_id: "r".into(),
            question_id: q.into(),
            prompt: String::new(),
            temperature: temp,
            count,
            seed: 11,
            round: 1,
            first_index: 0,
        }
    }

    fn single_cell(p: f64) -> Scenario {
        Scenario {
            token_count: TokenCountModel::default(),
            questions: vec![ScenarioQuestion {
                id: "q".into(),
                reference: "1".into(),
                wrong_answers: vec!["2".into(), "3".into()],
                label: None,
                cells: vec![ScenarioCell {
                    temperature: t(6),
                    p_correct: p,
                    wrong_weights: vec![0.5, 0.5],
                    entropy: entropy_for(DifficultyLabel::Easy, t(6)),
                }],
            }],
        }
    }

    #[test]
    fn extreme_probabilities() {
        let all = simulated_sample(&single_cell(1.0), &request("q", t(6), 64)).unwrap();
        assert!(all.iter().all(|r| r.correct == Some(true)));
        let none = simulated_sample(&single_cell(0.0), &request("q", t(6), 64)).unwrap();
        assert!(none.iter().all(|r| r.correct == Some(false)));
        assert!(none.iter().all(|r| r.answer_extracted.as_deref() != Some("1")));
    }

    #[test]
    fn binomial_count_within_three_sigma_and_replayable() {
        let s = single_cell(0.25);
        let a = simulated_sample(&s, &request("q", t(6), 4096)).unwrap();
        let c = a.iter().filter(|r| r.is_correct()).count() as f64;
        let sigma = (4096.0f64 * 0.25 * 0.75).sqrt();
        assert!((c - 1024.0).abs() <= 3.0 * sigma, "C={c}");
        let b = simulated_sample(&s, &request("q", t(6), 4096)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn order_independent() {
        let s = single_cell(0.5);
        let whole = simulated_sample(&s, &request("q", t(6), 10)).unwrap();
        let mut tail = request("q", t(6), 5);
        tail.first_index = 5;
        let second = simulated_sample(&s, &tail).unwrap();
        let first = simulated_sample(&s, &request("q", t(6), 5)).unwrap();
        let stitched: Vec<_> = first.into_iter().chain(second).collect();
        assert_eq!(whole, stitched);
    }

    #[test]
    fn request_errors() {
        let s = single_cell(0.5);
        assert!(matches!(
            simulated_sample(&s, &request("nope", t(6), 1)),
            Err(BackendError::UnknownQuestion(_))
        ));
        assert!(matches!(
            simulated_sample(&s, &request("q", t(7), 1)),
            Err(BackendError::UnknownTemperature { .. })
        ));
        assert!(matches!(
            simulated_sample(&s, &request("q", t(0), 2)),
            Err(BackendError::ZeroTemperatureCount(2))
        ));
    }

    #[test]
    fn zero_temperature_is_deterministic() {
        let s = scenario_from_taxonomy(1, 1, 0, 0, &grid(), 3).unwrap();
        for q in ["easy-01", "medium-01"] {
            let a = simulated_sample(&s, &request(q, t(0), 1)).unwrap();
            let mut later = request(q, t(0), 1);
            later.round = 9;
            let b = simulated_sample(&s, &later).unwrap();
            assert_eq!(a[0].answer_extracted, b[0].answer_extracted);
            assert_eq!(a[0].mean_entropy, b[0].mean_entropy);
        }
    }

    #[test]
    fn validation_rejects_bad_scenarios() {
        let mut s = single_cell(0.5);
        s.questions[0].cells[0].wrong_weights = vec![0.7, 0.7];
        assert!(s.validate().is_err());
        let mut s = single_cell(1.5);
        assert!(s.validate().is_err());
        s = single_cell(0.5);
        s.questions[0].cells[0].temperature = t(0);
        assert!(s.validate().is_err());
    }

    #[test]
    fn taxonomy_single_easy() {
        let s = scenario_from_taxonomy(1, 0, 0, 0, &grid(), 1).unwrap();
        assert_eq!(s.questions.len(), 1);
        assert!(s.questions[0].cells.iter().all(|c| c.p_correct >= 0.5));
    }

    #[test]
    fn taxonomy_hard_exclusive() {
        let temps = [t(4), t(8), t(12)];
        let s = scenario_from_taxonomy(0, 0, 3, 0, &temps, 1).unwrap();
        let mut owners = Vec::new();
        for q in &s.questions {
            let positive: Vec<_> = q.cells.iter().filter(|c| c.p_correct > 0.0).collect();
            assert_eq!(positive.len(), 1);
            assert!((0.001..=0.01).contains(&positive[0].p_correct));
            owners.push(positive[0].temperature);
        }
        owners.sort();
        assert_eq!(owners, temps.to_vec());
        assert!(scenario_from_taxonomy(0, 0, 1, 0, &[t(7)], 1).is_err());
    }

    #[test]
    fn taxonomy_union_solvable() {
        let s = scenario_from_taxonomy(10, 10, 8, 2, &grid(), 5).unwrap();
        assert_eq!(s.questions.len(), 30);
        let solvable = s
            .questions
            .iter()
            .filter(|q| q.cells.iter().any(|c| c.p_correct > 0.0))
            .count();
        assert_eq!(solvable, 28);
        // hard questions sit on the eight highest temperatures
        let mut hard_temps: Vec<_> = s
            .questions
            .iter()
            .filter(|q| q.label == Some(DifficultyLabel::Hard))
            .map(|q| q.cells.iter().find(|c| c.p_correct > 0.0).unwrap().temperature)
            .collect();
        hard_temps.sort();
        assert_eq!(hard_temps, (5..=12).map(t).collect::<Vec<_>>());
        let toml_text = toml::to_string(&s).unwrap();
        let back: Scenario = toml::from_str(&toml_text).unwrap();
        assert_eq!(back, s);
    }
}
