//! Temperature grids, budget splitting, minimal covering subsets and the
//! easy/medium/hard/impossible taxonomy.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::temperature::Temperature;

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error("t_min {t_min} exceeds t_max {t_max}")]
    InvertedRange { t_min: Temperature, t_max: Temperature },
    #[error("step must be positive")]
    ZeroStep,
    #[error("samples_per_temp must be >= 1")]
    NoSamples,
    #[error("stepping {step} from {t_min} does not land on t_max {t_max}")]
    StepMisses {
        t_min: Temperature,
        t_max: Temperature,
        step: Temperature,
    },
    #[error("temperatures must be strictly increasing")]
    NotIncreasing,
    #[error("T=0 admits at most one sample, got {0}")]
    ZeroTemperatureAllocation(u64),
    #[error("temperature list is empty")]
    Empty,
    #[error("T=0 cannot take part in an even budget split")]
    ZeroTemperatureInSplit,
    #[error("temperature {0} not in plan")]
    UnknownTemperature(Temperature),
}

/// Ordered temperatures with a sample allocation for each.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PlanRepr", into = "PlanRepr")]
pub struct TemperaturePlan {
    temperatures: Vec<Temperature>,
    per_temperature_samples: BTreeMap<Temperature, u64>,
}

#[derive(Serialize, Deserialize)]
struct PlanEntry {
    temperature: Temperature,
    samples: u64,
}

#[derive(Serialize, Deserialize)]
struct PlanRepr {
    allocations: Vec<PlanEntry>,
}

impl TryFrom<PlanRepr> for TemperaturePlan {
    type Error = PlanError;

    fn try_from(repr: PlanRepr) -> Result<Self, Self::Error> {
        TemperaturePlan::new(repr.allocations.into_iter().map(|e| (e.temperature, e.samples)))
    }
}

impl From<TemperaturePlan> for PlanRepr {
    fn from(plan: TemperaturePlan) -> Self {
        PlanRepr {
            allocations: plan
                .iter()
                .map(|(temperature, samples)| PlanEntry {
                    temperature,
                    samples,
                })
                .collect(),
        }
    }
}

impl TemperaturePlan {
    pub fn new(allocations: impl IntoIterator<Item = (Temperature, u64)>) -> Result<Self, PlanError> {
        let mut temperatures = Vec::new();
        let mut per_temperature_samples = BTreeMap::new();
        for (t, n) in allocations {
            if temperatures.last().is_some_and(|prev| *prev >= t) {
                return Err(PlanError::NotIncreasing);
            }
            if t.is_zero() && n > 1 {
                return Err(PlanError::ZeroTemperatureAllocation(n));
            }
            temperatures.push(t);
            per_temperature_samples.insert(t, n);
        }
        if temperatures.is_empty() {
            return Err(PlanError::Empty);
        }
        Ok(TemperaturePlan {
            temperatures,
            per_temperature_samples,
        })
    }

    pub fn temperatures(&self) -> &[Temperature] {
        &self.temperatures
    }

    pub fn samples_at(&self, t: Temperature) -> Option<u64> {
        self.per_temperature_samples.get(&t).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Temperature, u64)> + '_ {
        self.temperatures
            .iter()
            .map(move |t| (*t, self.per_temperature_samples[t]))
    }

    /// Samples one question consumes under this plan.
    pub fn total_per_question(&self) -> u64 {
        self.per_temperature_samples.values().sum()
    }

    pub fn max_samples(&self) -> u64 {
        self.per_temperature_samples.values().copied().max().unwrap_or(0)
    }

    /// The plan restricted to temperatures not in `excluded`.
    pub fn without(&self, excluded: &[Temperature]) -> Result<Self, PlanError> {
        TemperaturePlan::new(self.iter().filter(|(t, _)| !excluded.contains(t)))
    }

    /// A plan over the given temperatures whose nonzero members share
    /// `total` evenly (see [`split_budget`]); T=0, when listed, gets its single
    /// deterministic sample on top.
    pub fn from_budget(total: u64, temperatures: &[Temperature]) -> Result<Self, PlanError> {
        let nonzero: Vec<Temperature> = temperatures.iter().copied().filter(|t| !t.is_zero()).collect();
        let split = split_budget(total, &nonzero)?;
        let zero = temperatures.iter().any(|t| t.is_zero()).then_some((Temperature::ZERO, 1));
        TemperaturePlan::new(zero.into_iter().chain(split))
    }
}

/// Builds `{t_min, t_min+step, ..., t_max}` with `samples_per_temp` at every
/// temperature except T=0, which gets one deterministic sample.
pub fn build_grid(
    t_min: Temperature,
    t_max: Temperature,
    step: Temperature,
    samples_per_temp: u64,
) -> Result<TemperaturePlan, PlanError> {
    if t_min > t_max {
        return Err(PlanError::InvertedRange { t_min, t_max });
    }
    if step.tenths() == 0 {
        return Err(PlanError::ZeroStep);
    }
    if samples_per_temp == 0 {
        return Err(PlanError::NoSamples);
    }
    let span = t_max.tenths() - t_min.tenths();
    if !span.is_multiple_of(step.tenths()) {
        return Err(PlanError::StepMisses { t_min, t_max, step });
    }
    let grid = (t_min.tenths()..=t_max.tenths())
        .step_by(usize::from(step.tenths()))
        .map(Temperature::from_tenths)
        .map(|t| (t, if t.is_zero() { 1 } else { samples_per_temp }));
    TemperaturePlan::new(grid)
}

/// Splits `total` samples evenly over `temperatures`: each gets
/// `total / M` and the `total % M` leftovers go one each to the highest
/// temperatures. Returned in ascending temperature order.
pub fn split_budget(total: u64, temperatures: &[Temperature]) -> Result<Vec<(Temperature, u64)>, PlanError> {
    if temperatures.is_empty() {
        return Err(PlanError::Empty);
    }
    if temperatures.iter().any(|t| t.is_zero()) {
        return Err(PlanError::ZeroTemperatureInSplit);
    }
    let mut sorted = temperatures.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(PlanError::NotIncreasing);
    }
    let m = sorted.len() as u64;
    let base = total / m;
    let remainder = total % m;
    Ok(sorted
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let extra = u64::from((i as u64) >= m - remainder);
            (*t, base + extra)
        })
        .collect())
}

/// Greedy high-first cover: walk temperatures from highest to lowest and
/// keep one iff it solves a question not yet covered.
pub fn minimal_subset(solved_sets: &BTreeMap<Temperature, BTreeSet<String>>) -> Vec<Temperature> {
    let mut covered: BTreeSet<&str> = BTreeSet::new();
    let mut chosen = Vec::new();
    for (t, solved) in solved_sets.iter().rev() {
        let new = solved.iter().any(|q| !covered.contains(q.as_str()));
        if new {
            covered.extend(solved.iter().map(String::as_str));
            chosen.push(*t);
        }
    }
    chosen
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DifficultyLabel {
    Easy,
    Medium,
    Hard,
    Impossible,
}

impl std::fmt::Display for DifficultyLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DifficultyLabel::Easy => "easy",
            DifficultyLabel::Medium => "medium",
            DifficultyLabel::Hard => "hard",
            DifficultyLabel::Impossible => "impossible",
        })
    }
}

pub const DEFAULT_THETA_EASY: f64 = 0.5;

/// Labels a question from its Avg@N at two temperatures and the underlying
/// correct counts.
pub fn classify_difficulty(avg_t1: f64, avg_t2: f64, counts: (u64, u64), theta_easy: f64) -> DifficultyLabel {
    match counts {
        (0, 0) => DifficultyLabel::Impossible,
        (0, _) | (_, 0) => DifficultyLabel::Hard,
        _ if avg_t1.min(avg_t2) >= theta_easy => DifficultyLabel::Easy,
        _ => DifficultyLabel::Medium,
    }
}

/// Temperature needing the fewest traces to the first correct one, given
/// each temperature's correctness sequence in sampling order. Ties go to
/// the lower temperature. `None` when nothing is solved.
pub fn preferred_temperature<'a, I>(sequences: I) -> Option<(Temperature, u64)>
where
    I: IntoIterator<Item = (Temperature, &'a [bool])>,
{
    let mut best: Option<(Temperature, u64)> = None;
    for (t, seq) in sequences {
        let Some(pos) = seq.iter().position(|c| *c) else {
            continue;
        };
        let traces = pos as u64 + 1;
        let better = match best {
            None => true,
            Some((bt, bn)) => traces < bn || (traces == bn && t < bt),
        };
        if better {
            best = Some((t, traces));
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(tenths: u16) -> Temperature {
        Temperature::from_tenths(tenths)
    }

    #[test]
    fn standard_grid() {
        let plan = build_grid(t(0), t(12), t(1), 1024).unwrap();
        assert_eq!(plan.temperatures().len(), 13);
        assert_eq!(plan.samples_at(t(0)), Some(1));
        assert!(plan.iter().skip(1).all(|(_, n)| n == 1024));
        assert_eq!(plan.total_per_question(), 1 + 12 * 1024);

        let single = build_grid(t(7), t(7), t(1), 8).unwrap();
        assert_eq!(single.temperatures(), &[t(7)]);
        assert_eq!(single.samples_at(t(7)), Some(8));

        assert_eq!(build_grid(t(0), t(14), t(1), 128).unwrap().temperatures().len(), 15);
    }

    #[test]
    fn grid_errors() {
        assert!(matches!(build_grid(t(0), t(10), t(3), 8), Err(PlanError::StepMisses { .. })));
        assert_eq!(build_grid(t(5), t(1), t(1), 8), Err(PlanError::InvertedRange { t_min: t(5), t_max: t(1) }));
        assert_eq!(build_grid(t(0), t(1), t(0), 8), Err(PlanError::ZeroStep));
        assert_eq!(build_grid(t(0), t(1), t(1), 0), Err(PlanError::NoSamples));
    }

    #[test]
    fn plan_invariants() {
        assert_eq!(TemperaturePlan::new([(t(0), 2)]), Err(PlanError::ZeroTemperatureAllocation(2)));
        assert_eq!(TemperaturePlan::new([(t(3), 2), (t(3), 2)]), Err(PlanError::NotIncreasing));
        let plan = build_grid(t(0), t(12), t(1), 1024).unwrap();
        let sub = plan.without(&[t(1), t(2), t(3)]).unwrap();
        assert_eq!(sub.temperatures().len(), 10);
        assert_eq!(sub.total_per_question(), 1 + 9 * 1024);
        let json = serde_json::to_string(&sub).unwrap();
        let back: TemperaturePlan = serde_json::from_str(&json).unwrap();
        assert_eq!(back, sub);
    }

    #[test]
    fn split_examples() {
        let temps = [t(4), t(6), t(8), t(10), t(12)];
        let split: Vec<u64> = split_budget(12, &temps).unwrap().into_iter().map(|(_, n)| n).collect();
        assert_eq!(split, vec![2, 2, 2, 3, 3]);
        assert!(split_budget(0, &temps).unwrap().iter().all(|(_, n)| *n == 0));
        assert_eq!(split_budget(1024, &[t(6)]).unwrap(), vec![(t(6), 1024)]);
        assert_eq!(split_budget(4, &[t(0), t(6)]), Err(PlanError::ZeroTemperatureInSplit));
        assert_eq!(split_budget(4, &[]), Err(PlanError::Empty));
    }

    #[test]
    fn budget_plan_adds_zero_sample() {
        let plan = TemperaturePlan::from_budget(12, &[t(0), t(4), t(8)]).unwrap();
        assert_eq!(plan.iter().collect::<Vec<_>>(), vec![(t(0), 1), (t(4), 6), (t(8), 6)]);
    }

    fn sets(entries: &[(u16, &[&str])]) -> BTreeMap<Temperature, BTreeSet<String>> {
        entries
            .iter()
            .map(|(tt, qs)| (t(*tt), qs.iter().map(|s| s.to_string()).collect()))
            .collect()
    }

    /// Smallest cover size by brute force over all subsets.
    fn brute_minimal_cover(solved: &BTreeMap<Temperature, BTreeSet<String>>) -> usize {
        let entries: Vec<_> = solved.values().collect();
        let union: BTreeSet<&String> = entries.iter().flat_map(|s| s.iter()).collect();
        (0u32..(1 << entries.len()))
            .filter(|mask| {
                let cover: BTreeSet<&String> = entries
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| mask & (1 << i) != 0)
                    .flat_map(|(_, s)| s.iter())
                    .collect();
                cover == union
            })
            .map(|mask| mask.count_ones() as usize)
            .min()
            .unwrap()
    }

    #[test]
    fn minimal_subset_examples() {
        let s = sets(&[(12, &["A", "B"]), (11, &["A"]), (7, &["A", "C"])]);
        let chosen = minimal_subset(&s);
        assert_eq!(chosen, vec![t(12), t(7)]);
        assert_eq!(chosen.len(), brute_minimal_cover(&s));

        let same = sets(&[(4, &["A"]), (8, &["A"]), (12, &["A"])]);
        assert_eq!(minimal_subset(&same), vec![t(12)]);

        let disjoint = sets(&[(4, &["A"]), (8, &["B"]), (12, &["C"])]);
        assert_eq!(minimal_subset(&disjoint), vec![t(12), t(8), t(4)]);
    }

    #[test]
    fn difficulty_examples() {
        assert_eq!(classify_difficulty(0.9, 0.85, (922, 870), 0.5), DifficultyLabel::Easy);
        assert_eq!(classify_difficulty(0.0, 0.002, (0, 2), 0.5), DifficultyLabel::Hard);
        assert_eq!(classify_difficulty(0.0, 0.0, (0, 0), 0.5), DifficultyLabel::Impossible);
        assert_eq!(classify_difficulty(0.02, 0.6, (20, 600), 0.5), DifficultyLabel::Medium);
    }

    #[test]
    fn preferred_temperature_ties_go_low() {
        let a = [false, true, false];
        let b = [false, true];
        let c = [false, false, false, true];
        let got = preferred_temperature([(t(9), &a[..]), (t(5), &b[..]), (t(3), &c[..])]);
        assert_eq!(got, Some((t(5), 2)));
        let none: [bool; 2] = [false, false];
        assert_eq!(preferred_temperature([(t(5), &none[..])]), None);
    }

    proptest! {
        #[test]
        fn split_conserves(total in 0u64..100_000, m in 1usize..20) {
            let temps: Vec<_> = (1..=m as u16).map(t).collect();
            let split = split_budget(total, &temps).unwrap();
            let sum: u64 = split.iter().map(|(_, n)| n).sum();
            prop_assert_eq!(sum, total);
            let max = split.iter().map(|(_, n)| *n).max().unwrap();
            let min = split.iter().map(|(_, n)| *n).min().unwrap();
            prop_assert!(max - min <= 1);
            // remainder lands on the high end
            prop_assert!(split.windows(2).all(|w| w[0].1 <= w[1].1));
        }

        #[test]
        fn subset_covers_union(raw in proptest::collection::btree_map(1u16..13, proptest::collection::btree_set(0u8..8, 0..5), 1..8)) {
            let solved: BTreeMap<Temperature, BTreeSet<String>> = raw
                .into_iter()
                .map(|(tt, qs)| (t(tt), qs.into_iter().map(|q| q.to_string()).collect()))
                .collect();
            let chosen = minimal_subset(&solved);
            let union: BTreeSet<&String> = solved.values().flatten().collect();
            let covered: BTreeSet<&String> = chosen.iter().flat_map(|t| solved[t].iter()).collect();
            prop_assert_eq!(union, covered);
        }

        #[test]
        fn classification_is_exhaustive(c1 in 0u64..50, c2 in 0u64..50, theta in 0.01f64..1.0) {
            let (a1, a2) = (c1 as f64 / 50.0, c2 as f64 / 50.0);
            let label = classify_difficulty(a1, a2, (c1, c2), theta);
            let expected_hits = [
                c1 == 0 && c2 == 0,
                (c1 == 0) != (c2 == 0),
                c1 > 0 && c2 > 0 && a1.min(a2) >= theta,
                c1 > 0 && c2 > 0 && a1.min(a2) < theta,
            ];
            prop_assert_eq!(expected_hits.iter().filter(|h| **h).count(), 1);
            let idx = match label {
                DifficultyLabel::Impossible => 0,
                DifficultyLabel::Hard => 1,
                DifficultyLabel::Easy => 2,
                DifficultyLabel::Medium => 3,
            };
            prop_assert!(expected_hits[idx]);
        }
    }
}
