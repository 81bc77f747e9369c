//! Token entropy (nats) and correct-vs-incorrect entropy aggregation.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::temperature::Temperature;
use crate::trace_store::TraceRecord;

#[derive(Debug, Error, PartialEq)]
pub enum EntropyError {
    #[error("negative or non-finite probability {value} at index {index}")]
    InvalidProbability { index: usize, value: f64 },
    #[error("distribution has zero total mass")]
    ZeroMass,
    #[error("non-finite log-probability at index {0}")]
    InvalidLogProbability(usize),
    #[error("no token distributions")]
    Empty,
}

/// A next-token distribution from the untempered softmax, either as
/// (possibly unnormalized) probabilities or as log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub enum TokenDistribution {
    Probabilities(Vec<f64>),
    LogProbabilities(Vec<f64>),
}

impl TokenDistribution {
    /// Normalized probabilities.
    pub fn probabilities(&self) -> Result<Vec<f64>, EntropyError> {
        match self {
            TokenDistribution::Probabilities(w) => {
                check_weights(w)?;
                let z = neumaier_sum(w.iter().copied());
                if z <= 0.0 {
                    return Err(EntropyError::ZeroMass);
                }
                Ok(w.iter().map(|x| x / z).collect())
            }
            TokenDistribution::LogProbabilities(lp) => {
                let lse = log_sum_exp(lp)?;
                Ok(lp.iter().map(|x| (x - lse).exp()).collect())
            }
        }
    }
}

fn check_weights(w: &[f64]) -> Result<(), EntropyError> {
    match w.iter().position(|x| !x.is_finite() || *x < 0.0) {
        Some(index) => Err(EntropyError::InvalidProbability {
            index,
            value: w[index],
        }),
        None => Ok(()),
    }
}

fn log_sum_exp(lp: &[f64]) -> Result<f64, EntropyError> {
    if let Some(i) = lp.iter().position(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(EntropyError::InvalidLogProbability(i));
    }
    let max = lp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(EntropyError::ZeroMass);
    }
    Ok(max + neumaier_sum(lp.iter().map(|x| (x - max).exp())).ln())
}

/// Compensated summation.
fn neumaier_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Shannon entropy in nats, with `0 log 0 = 0`.
///
/// Evaluated as `ln Z - (sum w ln w) / Z` on the raw weights, which is exact
/// for uniform and point-mass inputs.
pub fn token_entropy(dist: &TokenDistribution) -> Result<f64, EntropyError> {
    match dist {
        TokenDistribution::Probabilities(w) => {
            check_weights(w)?;
            let z = neumaier_sum(w.iter().copied());
            if z <= 0.0 {
                return Err(EntropyError::ZeroMass);
            }
            let wlw = neumaier_sum(w.iter().filter(|x| **x > 0.0).map(|x| x * x.ln()));
            Ok((z.ln() - wlw / z).max(0.0))
        }
        TokenDistribution::LogProbabilities(lp) => {
            let lse = log_sum_exp(lp)?;
            // H = lse - sum p_i lp_i
            let expected = neumaier_sum(
                lp.iter()
                    .filter(|x| x.is_finite())
                    .map(|x| (x - lse).exp() * x),
            );
            Ok((lse - expected).max(0.0))
        }
    }
}

/// Entropy over the renormalized top-k log-probabilities an HTTP backend
/// returns. This ignores the tail mass, so it is reported as a lower-bound
/// approximation of the full-vocabulary entropy.
pub fn top_k_entropy(top_logprobs: &[f64]) -> Result<f64, EntropyError> {
    token_entropy(&TokenDistribution::LogProbabilities(top_logprobs.to_vec()))
}

/// Mean of per-token entropies over one generated trace.
pub fn trace_mean_entropy(dists: &[TokenDistribution]) -> Result<f64, EntropyError> {
    if dists.is_empty() {
        return Err(EntropyError::Empty);
    }
    let hs = dists.iter().map(token_entropy).collect::<Result<Vec<_>, _>>()?;
    Ok(neumaier_sum(hs.iter().copied()) / hs.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SubsetStats {
    pub count: u64,
    pub mean: Option<f64>,
    /// Population standard deviation.
    pub stddev: Option<f64>,
}

impl SubsetStats {
    fn from_values(values: &[f64]) -> Self {
        if values.is_empty() {
            return SubsetStats::default();
        }
        let n = values.len() as f64;
        let mean = neumaier_sum(values.iter().copied()) / n;
        let var = neumaier_sum(values.iter().map(|v| (v - mean).powi(2))) / n;
        SubsetStats {
            count: values.len() as u64,
            mean: Some(mean),
            stddev: Some(var.sqrt()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub all: Vec<u64>,
    pub correct: Vec<u64>,
    pub incorrect: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    Dataset,
    Question,
}

pub const DATASET_GROUP: &str = "dataset";
pub const DEFAULT_HISTOGRAM_BINS: usize = 30;

/// Entropy statistics of one (group, temperature) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropySplit {
    pub group: String,
    pub temperature: Temperature,
    pub all: SubsetStats,
    pub correct: SubsetStats,
    pub incorrect: SubsetStats,
    pub histogram: Histogram,
}

impl EntropySplit {
    /// `mean(all) n_all - mean(c) n_c - mean(i) n_i`; zero up to rounding.
    pub fn recombination_residual(&self) -> f64 {
        let part = |s: &SubsetStats| s.mean.unwrap_or(0.0) * s.count as f64;
        part(&self.all) - part(&self.correct) - part(&self.incorrect)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EntropySummary {
    pub splits: Vec<EntropySplit>,
    /// Records skipped because they carry no mean entropy.
    pub excluded_without_entropy: u64,
}

/// Groups records by (group, temperature) and splits each group by
/// correctness. Unknown verdicts fall in the incorrect subset.
pub fn split_by_correctness(records: &[TraceRecord], group_by: GroupBy, bins: usize) -> EntropySummary {
    let bins = bins.max(1);
    let mut groups: BTreeMap<(String, Temperature), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut excluded = 0u64;
    for r in records {
        let Some(h) = r.mean_entropy else {
            excluded += 1;
            continue;
        };
        let group = match group_by {
            GroupBy::Dataset => DATASET_GROUP.to_string(),
            GroupBy::Question => r.question_id.clone(),
        };
        let cell = groups.entry((group, r.temperature)).or_default();
        if r.is_correct() {
            cell.0.push(h);
        } else {
            cell.1.push(h);
        }
    }
    let splits = groups
        .into_iter()
        .map(|((group, temperature), (correct, incorrect))| {
            let all: Vec<f64> = correct.iter().chain(&incorrect).copied().collect();
            let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let bin_of = |v: f64| -> usize {
                if hi > lo {
                    (((v - lo) / (hi - lo)) * bins as f64).floor().min((bins - 1) as f64) as usize
                } else {
                    0
                }
            };
            let fill = |values: &[f64]| {
                let mut counts = vec![0u64; bins];
                for v in values {
                    counts[bin_of(*v)] += 1;
                }
                counts
            };
            EntropySplit {
                group,
                temperature,
                all: SubsetStats::from_values(&all),
                correct: SubsetStats::from_values(&correct),
                incorrect: SubsetStats::from_values(&incorrect),
                histogram: Histogram {
                    lo,
                    hi,
                    all: fill(&all),
                    correct: fill(&correct),
                    incorrect: fill(&incorrect),
                },
            }
        })
        .collect();
    EntropySummary {
        splits,
        excluded_without_entropy: excluded,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// CSV `group,temperature,subset,count,mean,stddev`.
pub fn write_splits_csv<W: Write>(writer: W, splits: &[EntropySplit]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["group", "temperature", "subset", "count", "mean", "stddev"])?;
    for s in splits {
        for (name, stats) in [("all", &s.all), ("correct", &s.correct), ("incorrect", &s.incorrect)] {
            w.write_record([
                s.group.as_str(),
                &s.temperature.to_string(),
                name,
                &stats.count.to_string(),
                &opt(stats.mean),
                &opt(stats.stddev),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// CSV `group,temperature,subset,bin,lo,hi,count`.
pub fn write_histograms_csv<W: Write>(writer: W, splits: &[EntropySplit]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["group", "temperature", "subset", "bin", "lo", "hi", "count"])?;
    for s in splits {
        let h = &s.histogram;
        let bins = h.all.len();
        let width = if bins > 0 { (h.hi - h.lo) / bins as f64 } else { 0.0 };
        for (name, counts) in [("all", &h.all), ("correct", &h.correct), ("incorrect", &h.incorrect)] {
            for (i, c) in counts.iter().enumerate() {
                w.write_record([
                    s.group.as_str(),
                    &s.temperature.to_string(),
                    name,
                    &i.to_string(),
                    &(h.lo + width * i as f64).to_string(),
                    &(h.lo + width * (i + 1) as f64).to_string(),
                    &c.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
