//! HTTP backend behaviour against the stub server. Each check returns a
//! description of the first violation.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use tempscale_core::backends::{http_sample, BackendError, EndpointConfig, HttpBackend, SampleRequest};
use tempscale_core::Temperature;

use super::stub_server::{requested_n, Reply, StubServer};

pub type Check = fn() -> Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn endpoint(server: &StubServer) -> EndpointConfig {
    let mut c = EndpointConfig::new(server.base_url.clone(), "stub-model");
    c.chunk_size = 4;
    c.max_in_flight = 2;
    c.initial_backoff_ms = 5;
    c.max_backoff_ms = 20;
    c.timeout_secs = 10;
    c.api_key_env = "TEMPSCALE_STUB_KEY".into();
    c
}

fn request(count: u32, tenths: u16) -> SampleRequest {
    SampleRequest {
        run_id: "http".into(),
        question_id: "q1".into(),
        prompt: "What is 1+1?".into(),
        temperature: Temperature::from_tenths(tenths),
        count,
        seed: 0,
        round: 1,
        first_index: 10,
    }
}

fn backend(config: EndpointConfig) -> Result<HttpBackend, String> {
    HttpBackend::new(config).map_err(|e| e.to_string())
}

pub fn chunking() -> Result<(), String> {
    let server = StubServer::start(|_, body| Reply::choices(requested_n(body)));
    let mut cfg = endpoint(&server);
    cfg.max_tokens = Some(2048);
    let b = backend(cfg)?;
    let batch = http_sample(&b, &request(8, 6)).map_err(|e| e.to_string())?;
    let got = server.received();
    ensure!(got.len() == 2, "count=8 chunk=4 should send 2 requests, sent {}", got.len());
    ensure!(batch.records.len() == 8, "expected 8 records, got {}", batch.records.len());
    ensure!(batch.deficit == 0, "unexpected deficit {}", batch.deficit);
    let idx: Vec<u32> = batch.records.iter().map(|r| r.sample_index).collect();
    ensure!(idx == (10..18).collect::<Vec<_>>(), "indices not contiguous from first_index: {idx:?}");
    for r in &got {
        ensure!(r.path == "/v1/chat/completions", "wrong path {}", r.path);
        let b = &r.body;
        ensure!(b["model"] == "stub-model", "model missing: {b}");
        ensure!(b["n"] == 4, "n should be 4: {b}");
        ensure!((b["temperature"].as_f64() == Some(0.6)), "temperature: {b}");
        ensure!(b["max_tokens"] == 2048, "max_tokens: {b}");
        ensure!(b["messages"][0]["content"] == "What is 1+1?", "messages: {b}");
        ensure!(b.get("logprobs").is_none(), "logprobs sent unasked: {b}");
    }
    let r = &batch.records[0];
    ensure!(r.answer_raw.as_deref().is_some_and(|t| t.contains("\\boxed{0}")), "raw text {:?}", r.answer_raw);
    ensure!(r.correct.is_none() && r.answer_extracted.is_none(), "backend must not judge");
    ensure!(r.temperature == Temperature::from_tenths(6) && r.round == 1, "record keys");
    Ok(())
}

pub fn uneven_chunks_and_logprobs() -> Result<(), String> {
    let server = StubServer::start(|_, body| Reply::choices(requested_n(body)));
    let mut cfg = endpoint(&server);
    cfg.logprobs = true;
    cfg.top_logprobs = Some(2);
    let b = backend(cfg)?;
    let batch = http_sample(&b, &request(10, 8)).map_err(|e| e.to_string())?;
    let mut ns: Vec<u64> = server.received().iter().map(|r| requested_n(&r.body)).collect();
    ns.sort();
    ensure!(ns == vec![2, 4, 4], "chunk sizes {ns:?}");
    ensure!(batch.records.len() == 10, "records {}", batch.records.len());
    let body = &server.received()[0].body;
    ensure!(body["logprobs"] == true && body["top_logprobs"] == 2, "logprob fields: {body}");
    let h = batch.records[0].mean_entropy.ok_or("no entropy")?;
    ensure!((h - std::f64::consts::LN_2).abs() < 1e-12, "entropy {h}");
    ensure!(tempscale_core::TraceSampler::entropy_is_lower_bound(&b), "top-k entropy must be flagged");
    Ok(())
}

pub fn deficit() -> Result<(), String> {
    // one choice short on the first request only
    let server = StubServer::start(|i, body| {
        let n = requested_n(body);
        Reply::choices(if i == 0 { n - 1 } else { n })
    });
    let b = backend(endpoint(&server))?;
    let batch = http_sample(&b, &request(4, 6)).map_err(|e| e.to_string())?;
    ensure!(batch.records.len() == 3, "server returned 3 of 4, got {} records", batch.records.len());
    ensure!(batch.deficit == 1, "deficit should be 1, got {}", batch.deficit);
    let idx: Vec<u32> = batch.records.iter().map(|r| r.sample_index).collect();
    ensure!(idx == vec![10, 11, 12], "indices {idx:?}");
    Ok(())
}

pub fn retries_transient() -> Result<(), String> {
    let server = StubServer::start(|i, body| match i {
        0 => Reply::status(503),
        1 => Reply::status(429),
        _ => Reply::choices(requested_n(body)),
    });
    let b = backend(endpoint(&server))?;
    let batch = http_sample(&b, &request(4, 6)).map_err(|e| e.to_string())?;
    ensure!(batch.records.len() == 4, "records {}", batch.records.len());
    ensure!(server.received().len() == 3, "expected 2 retries, saw {} requests", server.received().len());
    Ok(())
}

pub fn retries_exhausted() -> Result<(), String> {
    let server = StubServer::start(|_, _| Reply::status(500));
    let mut cfg = endpoint(&server);
    cfg.max_retries = 2;
    let b = backend(cfg)?;
    match http_sample(&b, &request(4, 6)) {
        Err(BackendError::RetriesExhausted { attempts: 3, .. }) => {}
        other => return Err(format!("expected RetriesExhausted after 3 attempts, got {other:?}")),
    }
    ensure!(server.received().len() == 3, "sent {} requests", server.received().len());
    Ok(())
}

pub fn backoff_is_capped() -> Result<(), String> {
    let server = StubServer::start(|i, body| if i < 4 { Reply::status(502) } else { Reply::choices(requested_n(body)) });
    let mut cfg = endpoint(&server);
    cfg.max_retries = 4;
    cfg.initial_backoff_ms = 20;
    cfg.max_backoff_ms = 40;
    let b = backend(cfg)?;
    let start = Instant::now();
    http_sample(&b, &request(2, 6)).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    // 20 + 40 + 40 + 40 ms of sleeping; uncapped would be 20+40+80+160
    ensure!(took >= Duration::from_millis(140), "slept too little: {took:?}");
    ensure!(took < Duration::from_millis(300) + Duration::from_millis(1000), "backoff not capped: {took:?}");
    Ok(())
}

pub fn auth_failure_is_not_retried() -> Result<(), String> {
    let server = StubServer::start(|_, _| Reply::status(401));
    std::env::set_var("TEMPSCALE_STUB_KEY", "sekrit");
    let b = backend(endpoint(&server))?;
    let r = http_sample(&b, &request(4, 6));
    ensure!(matches!(r, Err(BackendError::Auth(401))), "expected Auth(401), got {r:?}");
    let got = server.received();
    ensure!(got.len() == 1, "auth failure retried: {} requests", got.len());
    ensure!(got[0].authorization.as_deref() == Some("Bearer sekrit"), "auth header {:?}", got[0].authorization);
    Ok(())
}

pub fn malformed_response() -> Result<(), String> {
    let server = StubServer::start(|_, _| Reply::raw("{\"choices\": 12}"));
    let b = backend(endpoint(&server))?;
    let r = http_sample(&b, &request(2, 6));
    ensure!(matches!(r, Err(BackendError::Malformed(_))), "expected Malformed, got {r:?}");
    ensure!(server.received().len() == 1, "malformed response retried");
    Ok(())
}

pub fn zero_temperature_rejected() -> Result<(), String> {
    let server = StubServer::start(|_, body| Reply::choices(requested_n(body)));
    let b = backend(endpoint(&server))?;
    let r = http_sample(&b, &request(2, 0));
    ensure!(matches!(r, Err(BackendError::ZeroTemperatureCount(2))), "expected rejection, got {r:?}");
    ensure!(server.received().is_empty(), "request dispatched for T=0 count>1");
    let one = http_sample(&b, &request(1, 0)).map_err(|e| e.to_string())?;
    ensure!(one.records.len() == 1, "T=0 single trace should go through");
    Ok(())
}

pub fn in_flight_bounded() -> Result<(), String> {
    let seen = Arc::new(AtomicUsize::new(0));
    let s = seen.clone();
    let server = StubServer::start(move |_, body| {
        s.fetch_add(1, Ordering::SeqCst);
        Reply::choices(requested_n(body)).delayed(Duration::from_millis(60))
    });
    let b = backend(endpoint(&server))?;
    let batch = http_sample(&b, &request(20, 6)).map_err(|e| e.to_string())?;
    ensure!(batch.records.len() == 20, "records {}", batch.records.len());
    ensure!(seen.load(Ordering::SeqCst) == 5, "requests {}", seen.load(Ordering::SeqCst));
    ensure!(server.max_in_flight() <= 2, "in-flight reached {}", server.max_in_flight());
    ensure!(server.max_in_flight() == 2, "chunks never overlapped (max {})", server.max_in_flight());
    Ok(())
}

pub const CHECKS: &[(&str, Check)] = &[
    ("chunking", chunking),
    ("uneven_chunks_and_logprobs", uneven_chunks_and_logprobs),
    ("deficit", deficit),
    ("retries_transient", retries_transient),
    ("retries_exhausted", retries_exhausted),
    ("backoff_is_capped", backoff_is_capped),
    ("auth_failure_is_not_retried", auth_failure_is_not_retried),
    ("malformed_response", malformed_response),
    ("zero_temperature_rejected", zero_temperature_rejected),
    ("in_flight_bounded", in_flight_bounded),
];
