use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use tempscale_core::backends::{SampleRequest, SimulatedBackend, TraceSampler};
use tempscale_core::voting::new_session;
use tempscale_core::{
    dataset_curve, multi_temperature_curve, pass_at_k, scenario_from_taxonomy, trace_store, Question, QuestionTally,
    Temperature, TraceRecord, TraceStore, VotingParams,
};

fn t(x: u16) -> Temperature {
    Temperature::from_tenths(x)
}

fn estimators(c: &mut Criterion) {
    let mut g = c.benchmark_group("pass_at_k");
    for k in [1u64, 64, 1024] {
        g.bench_with_input(BenchmarkId::new("n1024_c7", k), &k, |b, &k| {
            b.iter(|| pass_at_k(black_box(1024), black_box(7), k))
        });
    }
    g.bench_function("n100000_k50000", |b| b.iter(|| pass_at_k(black_box(100_000), 3, 50_000)));
    g.finish();

    let temps: Vec<Temperature> = (1..=12).map(t).collect();
    let tallies: Vec<QuestionTally> = (0..30)
        .flat_map(|q| temps.iter().map(move |&tt| QuestionTally::new(format!("q{q}"), tt, 1024, (q * 7) % 40)))
        .collect();
    let grid: Vec<u64> = (0..=10).map(|i| 1 << i).collect();
    let at_06: Vec<QuestionTally> = tallies.iter().filter(|x| x.temperature == t(6)).cloned().collect();
    c.bench_function("dataset_curve_30q_11k", |b| b.iter(|| dataset_curve(&at_06, &grid)));
    let budgets: Vec<u64> = (0..=13).map(|i| 12 << i).filter(|b| *b <= 12 * 1024).collect();
    c.bench_function("multi_temperature_curve_30q_12t", |b| {
        b.iter(|| multi_temperature_curve(&tallies, &budgets))
    });
}

fn simulated(c: &mut Criterion) {
    let scenario = scenario_from_taxonomy(10, 10, 8, 2, &(0..=12).map(t).collect::<Vec<_>>(), 1).unwrap();
    let backend = SimulatedBackend::new(scenario).unwrap();
    let request = SampleRequest {
        run_id: "bench".into(),
        question_id: "hard-01".into(),
        prompt: String::new(),
        temperature: t(8),
        count: 1024,
        seed: 3,
        round: 1,
        first_index: 0,
    };
    c.bench_function("simulated_sample_1024", |b| b.iter(|| backend.sample(black_box(&request)).unwrap()));
}

fn record(q: &Question, temp: Temperature, round: u32, answer: &str) -> TraceRecord {
    TraceRecord {
        run_id: "bench".into(),
        question_id: q.id.clone(),
        temperature: temp,
        round,
        sample_index: 0,
        answer_raw: None,
        answer_extracted: Some(answer.into()),
        correct: None,
        mean_entropy: Some(0.4),
        token_count: 900,
    }
}

fn voting(c: &mut Criterion) {
    let questions: Vec<Question> = (0..30)
        .map(|i| Question {
            id: format!("q{i}"),
            prompt: String::new(),
        })
        .collect();
    let params = VotingParams::new((4..=12).map(t).collect());
    c.bench_function("voting_16_rounds_30q_9t", |b| {
        b.iter(|| {
            let mut s = new_session(&questions, params.clone()).unwrap();
            while !s.is_finished() {
                s.step_round(|q, temp, r| Ok(record(q, temp, r, if r % 3 == 0 { "1" } else { "2" })))
                    .unwrap();
            }
            s.survivors().len()
        })
    });
}

fn store(c: &mut Criterion) {
    let q = Question {
        id: "q".into(),
        prompt: String::new(),
    };
    let records: Vec<TraceRecord> = (0..4096)
        .map(|i| {
            let mut r = record(&q, t(6), 1, "7");
            r.sample_index = i;
            r
        })
        .collect();
    let bytes = trace_store::to_jsonl(&records);
    c.bench_function("parse_jsonl_4096", |b| {
        b.iter(|| trace_store::parse_jsonl("bench.jsonl".as_ref(), black_box(&bytes)).unwrap())
    });
    c.bench_function("append_batch_4096", |b| {
        b.iter_batched(
            || tempfile::tempdir().unwrap(),
            |dir| {
                let mut s = TraceStore::open(dir.path().join("s.jsonl")).unwrap();
                s.append_batch(records.clone()).unwrap();
                s.sync().unwrap();
                dir
            },
            criterion::BatchSize::PerIteration,
        )
    });
}

criterion_group!(benches, estimators, simulated, voting, store);
criterion_main!(benches);
