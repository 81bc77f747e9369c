//! Pass@K, Avg@N and Pass@All estimators.
//!
//! `pass_at_k` is the unbiased estimator `1 - C(N-C, K) / C(N, K)`: the
//! probability that a uniformly random K-subset of the N stored samples
//! contains at least one of the C correct ones.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::temperature::Temperature;
use crate::temperature_plan::split_budget;
use crate::trace_store::QuestionTally;

#[derive(Debug, Error, PartialEq)]
pub enum EstimatorError {
    #[error("n_correct {n_correct} exceeds n_samples {n_samples}")]
    CorrectExceedsSamples { n_samples: u64, n_correct: u64 },
    #[error("K={k} outside 1..={n_samples}")]
    KOutOfRange { k: u64, n_samples: u64 },
    #[error("Avg@N undefined for zero samples")]
    NoSamples,
    #[error("no tallies given")]
    Empty,
    #[error("question {question_id} has {available} samples at T={temperature}, needs {needed}")]
    InsufficientSamples {
        question_id: String,
        temperature: Temperature,
        available: u64,
        needed: u64,
    },
    #[error("question {question_id} has no samples at T={temperature}")]
    MissingTemperature {
        question_id: String,
        temperature: Temperature,
    },
    #[error("budget split failed: {0}")]
    Budget(String),
}

/// Above this K the log-gamma form is used instead of the running product.
const PRODUCT_LIMIT: u64 = 4096;

fn ln_choose(n: u64, k: u64) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// `ln(C(N-C, K) / C(N, K))`, requiring `K <= N - C`.
fn ln_miss_probability(n: u64, c: u64, k: u64) -> f64 {
    if c == 0 {
        return 0.0;
    }
    if k <= PRODUCT_LIMIT {
        // C(N-C,K)/C(N,K) = prod_{i<K} (N-C-i)/(N-i) = prod (1 - C/(N-i))
        let c = c as f64;
        (0..k).map(|i| (-c / (n - i) as f64).ln_1p()).sum()
    } else {
        ln_choose(n - c, k) - ln_choose(n, k)
    }
}

fn check_tally(n: u64, c: u64) -> Result<(), EstimatorError> {
    if c > n {
        return Err(EstimatorError::CorrectExceedsSamples {
            n_samples: n,
            n_correct: c,
        });
    }
    Ok(())
}

/// Unbiased Pass@K for one question.
pub fn pass_at_k(n_samples: u64, n_correct: u64, k: u64) -> Result<f64, EstimatorError> {
    check_tally(n_samples, n_correct)?;
    if k == 0 || k > n_samples {
        return Err(EstimatorError::KOutOfRange { k, n_samples });
    }
    if n_correct == 0 {
        return Ok(0.0);
    }
    if k > n_samples - n_correct {
        return Ok(1.0);
    }
    let miss = ln_miss_probability(n_samples, n_correct, k).exp();
    Ok((1.0 - miss).clamp(0.0, 1.0))
}

/// Miss probability `C(N-C, K)/C(N, K)`, with `K = 0` allowed (miss = 1).
fn miss_probability(n: u64, c: u64, k: u64) -> f64 {
    if k == 0 || c == 0 {
        1.0
    } else if k > n - c {
        0.0
    } else {
        ln_miss_probability(n, c, k).exp().clamp(0.0, 1.0)
    }
}

pub fn avg_at_n(n_samples: u64, n_correct: u64) -> Result<f64, EstimatorError> {
    check_tally(n_samples, n_correct)?;
    if n_samples == 0 {
        return Err(EstimatorError::NoSamples);
    }
    Ok(n_correct as f64 / n_samples as f64)
}

/// True iff any of the question's tallies contains a correct sample.
pub fn pass_all(tallies: &[QuestionTally]) -> Result<bool, EstimatorError> {
    if tallies.is_empty() {
        return Err(EstimatorError::Empty);
    }
    Ok(tallies.iter().any(|t| t.n_correct >= 1))
}

/// Fraction of questions solved by at least one trace at any temperature.
/// Each question is counted once, however many temperatures it has.
pub fn dataset_pass_all(tallies: &[QuestionTally]) -> Result<f64, EstimatorError> {
    if tallies.is_empty() {
        return Err(EstimatorError::Empty);
    }
    let mut solved: BTreeMap<&str, bool> = BTreeMap::new();
    for t in tallies {
        *solved.entry(&t.question_id).or_default() |= t.n_correct >= 1;
    }
    let hits = solved.values().filter(|s| **s).count();
    Ok(hits as f64 / solved.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "id")]
pub enum CurveScope {
    Dataset,
    Question(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: u64,
    pub value: f64,
}

/// Pass@K as a function of K. `temperature` is `None` for curves whose K
/// budget is spread across several temperatures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassKCurve {
    pub scope: CurveScope,
    pub temperature: Option<Temperature>,
    pub points: Vec<CurvePoint>,
}

impl PassKCurve {
    pub fn value_at(&self, k: u64) -> Option<f64> {
        self.points.iter().find(|p| p.k == k).map(|p| p.value)
    }

    pub fn last(&self) -> Option<CurvePoint> {
        self.points.last().copied()
    }
}

/// Powers of two from 1 up to and including `n` when `n` is itself a power
/// of two.
pub fn default_k_grid(n: u64) -> Vec<u64> {
    std::iter::successors(Some(1u64), |k| k.checked_mul(2))
        .take_while(|k| *k <= n)
        .collect()
}

fn sorted_grid(grid: &[u64]) -> Vec<u64> {
    let mut g: Vec<u64> = grid.iter().copied().filter(|k| *k >= 1).collect();
    g.sort_unstable();
    g.dedup();
    g
}

/// Per-question Pass@K curve.
pub fn question_curve(tally: &QuestionTally, k_grid: &[u64]) -> Result<PassKCurve, EstimatorError> {
    let points = sorted_grid(k_grid)
        .into_iter()
        .map(|k| {
            pass_at_k(tally.n_samples, tally.n_correct, k).map(|value| CurvePoint { k, value })
        })
        .collect::<Result<_, _>>()?;
    Ok(PassKCurve {
        scope: CurveScope::Question(tally.question_id.clone()),
        temperature: Some(tally.temperature),
        points,
    })
}

/// Dataset Pass@K at one temperature: the mean over questions of the
/// per-question estimator. `tallies` holds one entry per question.
pub fn dataset_curve(tallies: &[QuestionTally], k_grid: &[u64]) -> Result<PassKCurve, EstimatorError> {
    let first = tallies.first().ok_or(EstimatorError::Empty)?;
    let grid = sorted_grid(k_grid);
    let max_k = grid.last().copied().unwrap_or(0);
    for t in tallies {
        check_tally(t.n_samples, t.n_correct)?;
        if t.n_samples < max_k {
            return Err(EstimatorError::InsufficientSamples {
                question_id: t.question_id.clone(),
                temperature: t.temperature,
                available: t.n_samples,
                needed: max_k,
            });
        }
    }
    let mut points = Vec::with_capacity(grid.len());
    for k in grid {
        let mut sum = 0.0;
        for t in tallies {
            sum += pass_at_k(t.n_samples, t.n_correct, k)?;
        }
        points.push(CurvePoint {
            k,
            value: sum / tallies.len() as f64,
        });
    }
    let temperature = if tallies.iter().all(|t| t.temperature == first.temperature) {
        Some(first.temperature)
    } else {
        None
    };
    Ok(PassKCurve {
        scope: CurveScope::Dataset,
        temperature,
        points,
    })
}

/// Dataset Pass@B when a total budget B is split evenly over the nonzero
/// temperatures present in `tallies` (see [`split_budget`]). Draws at
/// different temperatures are independent, so a question's miss
/// probability is the product of its per-temperature misses.
pub fn multi_temperature_curve(
    tallies: &[QuestionTally],
    total_budget_grid: &[u64],
) -> Result<PassKCurve, EstimatorError> {
    if tallies.is_empty() {
        return Err(EstimatorError::Empty);
    }
    let mut by_question: BTreeMap<&str, BTreeMap<Temperature, &QuestionTally>> = BTreeMap::new();
    for t in tallies.iter().filter(|t| !t.temperature.is_zero()) {
        check_tally(t.n_samples, t.n_correct)?;
        by_question
            .entry(&t.question_id)
            .or_default()
            .insert(t.temperature, t);
    }
    let mut temperatures: Vec<Temperature> = by_question
        .values()
        .flat_map(|m| m.keys().copied())
        .collect();
    temperatures.sort_unstable();
    temperatures.dedup();
    if temperatures.is_empty() {
        return Err(EstimatorError::Empty);
    }
    for (q, per_t) in &by_question {
        if let Some(t) = temperatures.iter().find(|t| !per_t.contains_key(t)) {
            return Err(EstimatorError::MissingTemperature {
                question_id: q.to_string(),
                temperature: *t,
            });
        }
    }

    let mut points = Vec::new();
    for budget in sorted_grid(total_budget_grid) {
        let allocation =
            split_budget(budget, &temperatures).map_err(|e| EstimatorError::Budget(e.to_string()))?;
        let mut miss_sum = 0.0;
        for per_t in by_question.values() {
            let mut miss = 1.0;
            for (t, k) in &allocation {
                let tally = per_t[t];
                if *k > tally.n_samples {
                    return Err(EstimatorError::InsufficientSamples {
                        question_id: tally.question_id.clone(),
                        temperature: *t,
                        available: tally.n_samples,
                        needed: *k,
                    });
                }
                miss *= miss_probability(tally.n_samples, tally.n_correct, *k);
            }
            miss_sum += miss;
        }
        let value = (1.0 - miss_sum / by_question.len() as f64).clamp(0.0, 1.0);
        points.push(CurvePoint { k: budget, value });
    }
    Ok(PassKCurve {
        scope: CurveScope::Dataset,
        temperature: None,
        points,
    })
}

/// Writes curves as CSV with columns `scope,question_id,temperature,K,value`.
/// Multi-temperature curves leave `temperature` empty.
pub fn write_curves_csv<W: Write>(writer: W, curves: &[PassKCurve]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["scope", "question_id", "temperature", "K", "value"])?;
    for curve in curves {
        let (scope, qid) = match &curve.scope {
            CurveScope::Dataset if curve.temperature.is_none() => ("multi_temperature", ""),
            CurveScope::Dataset => ("dataset", ""),
            CurveScope::Question(q) => ("question", q.as_str()),
        };
        let temp = curve.temperature.map(|t| t.to_string()).unwrap_or_default();
        for p in &curve.points {
            w.write_record([
                scope,
                qid,
                temp.as_str(),
                &p.k.to_string(),
                &p.value.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Brute force: fraction of K-subsets of N samples (the first C correct)
    /// containing a correct one.
    fn enumerate_pass_at_k(n: u32, c: u32, k: u32) -> f64 {
        let mut hit = 0u64;
        let mut total = 0u64;
        for mask in 0u32..(1 << n) {
            if mask.count_ones() != k {
                continue;
            }
            total += 1;
            if mask & ((1u32 << c) - 1) != 0 {
                hit += 1;
            }
        }
        hit as f64 / total as f64
    }

    fn tally(q: &str, t: u16, n: u64, c: u64) -> QuestionTally {
        QuestionTally::new(q, Temperature::from_tenths(t), n, c)
    }

    #[test]
    fn spot_values() {
        assert_eq!(pass_at_k(1024, 0, 512).unwrap(), 0.0);
        assert_eq!(pass_at_k(4, 1, 4).unwrap(), 1.0);
        let v = pass_at_k(4, 2, 2).unwrap();
        assert!((v - enumerate_pass_at_k(4, 2, 2)).abs() < 1e-15);
        assert!((v - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn k_one_is_fraction_correct() {
        for n in 1..=12u64 {
            for c in 0..=n {
                let v = pass_at_k(n, c, 1).unwrap();
                assert!((v - c as f64 / n as f64).abs() < 1e-12, "N={n} C={c}");
                assert!((v - enumerate_pass_at_k(n as u32, c as u32, 1)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn domain_errors() {
        assert!(matches!(pass_at_k(4, 1, 5), Err(EstimatorError::KOutOfRange { .. })));
        assert!(matches!(pass_at_k(4, 1, 0), Err(EstimatorError::KOutOfRange { .. })));
        assert!(matches!(
            pass_at_k(4, 5, 1),
            Err(EstimatorError::CorrectExceedsSamples { .. })
        ));
        assert_eq!(avg_at_n(0, 0), Err(EstimatorError::NoSamples));
    }

    #[test]
    fn log_gamma_branch_agrees_with_product() {
        let (n, c, k) = (20_000u64, 3u64, 5_000u64);
        let product: f64 = (0..k).map(|i| (-(c as f64) / (n - i) as f64).ln_1p()).sum();
        let lgamma = ln_choose(n - c, k) - ln_choose(n, k);
        assert!((product - lgamma).abs() < 1e-8);
        let v = pass_at_k(n, c, k).unwrap();
        assert!((v - (1.0 - product.exp())).abs() < 1e-8);
    }

    #[test]
    fn avg_values() {
        assert_eq!(avg_at_n(1024, 512).unwrap(), 0.5);
        assert_eq!(avg_at_n(1024, 0).unwrap(), 0.0);
        assert!((avg_at_n(3, 2).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn pass_all_cases() {
        assert!(pass_all(&[tally("q", 5, 1024, 0), tally("q", 7, 1024, 1)]).unwrap());
        assert!(!pass_all(&[tally("q", 5, 8, 0), tally("q", 7, 8, 0)]).unwrap());
        assert!(pass_all(&[tally("q", 5, 8, 3)]).unwrap());
        assert_eq!(pass_all(&[]), Err(EstimatorError::Empty));
        let ds = dataset_pass_all(&[
            tally("a", 5, 8, 0),
            tally("a", 7, 8, 2),
            tally("b", 5, 8, 0),
            tally("b", 7, 8, 0),
        ])
        .unwrap();
        assert_eq!(ds, 0.5);
    }

    #[test]
    fn dataset_curve_cases() {
        let all = dataset_curve(&[tally("a", 6, 8, 8), tally("b", 6, 8, 8)], &[1, 2, 4, 8]).unwrap();
        assert!(all.points.iter().all(|p| p.value == 1.0));
        let half = dataset_curve(&[tally("a", 6, 8, 0), tally("b", 6, 8, 8)], &[1, 2, 4, 8]).unwrap();
        assert!(half.points.iter().all(|p| p.value == 0.5));

        let ts = [tally("a", 6, 8, 0), tally("b", 6, 8, 1), tally("c", 6, 8, 4)];
        let curve = dataset_curve(&ts, &[1, 2, 4, 8]).unwrap();
        for p in &curve.points {
            let k = p.k as u32;
            let oracle = (enumerate_pass_at_k(8, 0, k)
                + enumerate_pass_at_k(8, 1, k)
                + enumerate_pass_at_k(8, 4, k))
                / 3.0;
            assert!((p.value - oracle).abs() < 1e-12, "K={k}");
        }

        let err = dataset_curve(&[tally("a", 6, 8, 0), tally("short", 6, 4, 1)], &[8]).unwrap_err();
        assert!(matches!(err, EstimatorError::InsufficientSamples { ref question_id, .. } if question_id == "short"));
    }

    /// Exhaustive oracle for two temperatures with N=4, C=1 each and a total
    /// budget of 4 split 2+2: enumerate both subset choices jointly.
    #[test]
    fn multi_temperature_two_stage_enumeration() {
        let mut hits = 0u32;
        let mut total = 0u32;
        for m1 in 0u32..16 {
            for m2 in 0u32..16 {
                if m1.count_ones() != 2 || m2.count_ones() != 2 {
                    continue;
                }
                total += 1;
                if m1 & 1 != 0 || m2 & 1 != 0 {
                    hits += 1;
                }
            }
        }
        let oracle = f64::from(hits) / f64::from(total);
        assert!((oracle - 0.75).abs() < 1e-15);
        let curve =
            multi_temperature_curve(&[tally("q", 5, 4, 1), tally("q", 7, 4, 1)], &[4]).unwrap();
        assert!((curve.points[0].value - oracle).abs() < 1e-12);
    }

    #[test]
    fn multi_temperature_degenerate_cases() {
        let zero = multi_temperature_curve(&[tally("q", 5, 8, 0), tally("q", 7, 8, 0)], &[2, 4, 8]).unwrap();
        assert!(zero.points.iter().all(|p| p.value == 0.0));
        let one = multi_temperature_curve(&[tally("q", 5, 8, 0), tally("q", 7, 8, 8)], &[2, 4, 8]).unwrap();
        assert!(one.points.iter().all(|p| p.value == 1.0));
        let err = multi_temperature_curve(&[tally("q", 5, 2, 0), tally("q", 7, 2, 0)], &[8]).unwrap_err();
        assert!(matches!(err, EstimatorError::InsufficientSamples { .. }));
        let err = multi_temperature_curve(&[tally("a", 5, 8, 0), tally("a", 7, 8, 0), tally("b", 5, 8, 0)], &[2])
            .unwrap_err();
        assert!(matches!(err, EstimatorError::MissingTemperature { .. }));
    }

    #[test]
    fn default_grid_powers_of_two() {
        assert_eq!(default_k_grid(1024).len(), 11);
        assert_eq!(default_k_grid(6), vec![1, 2, 4]);
        assert_eq!(default_k_grid(1), vec![1]);
        assert!(default_k_grid(0).is_empty());
    }

    #[test]
    fn csv_columns() {
        let curve = dataset_curve(&[tally("a", 6, 2, 1)], &[1, 2]).unwrap();
        let mut buf = Vec::new();
        write_curves_csv(&mut buf, &[curve]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("scope,question_id,temperature,K,value"));
        assert_eq!(lines.next(), Some("dataset,,0.6,1,0.5"));
        assert_eq!(lines.next(), Some("dataset,,0.6,2,1"));
    }

    proptest! {
        #[test]
        fn monotone_in_k_and_c(n in 1u64..300, c_frac in 0.0f64..1.0, k_frac in 0.0f64..1.0) {
            let c = ((n as f64) * c_frac) as u64;
            let k = 1 + ((n - 1) as f64 * k_frac) as u64;
            let v = pass_at_k(n, c, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
            if k < n {
                prop_assert!(pass_at_k(n, c, k + 1).unwrap() >= v);
            }
            if c < n {
                prop_assert!(pass_at_k(n, c + 1, k).unwrap() >= v);
            }
            prop_assert!(avg_at_n(n, c).unwrap() <= v + 1e-15);
        }

        #[test]
        fn singleton_multi_equals_dataset(cs in proptest::collection::vec(0u64..=16, 1..6)) {
            let ts: Vec<_> = cs.iter().enumerate().map(|(i, c)| tally(&format!("q{i}"), 8, 16, *c)).collect();
            let grid = [1, 2, 4, 8, 16];
            let single = dataset_curve(&ts, &grid).unwrap();
            let multi = multi_temperature_curve(&ts, &grid).unwrap();
            for (a, b) in single.points.iter().zip(&multi.points) {
                prop_assert_eq!(a.k, b.k);
                prop_assert!((a.value - b.value).abs() < 1e-12);
            }
        }
    }
}
