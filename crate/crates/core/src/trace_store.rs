//! Append-only JSONL persistence for sampled traces, plus per
//! (question, temperature) tallies.
//!
//! One record per line, `\n` separated. A trailing line without its newline
//! is a torn write: readers ignore it and [`TraceStore::open`] truncates it,
//! so a reader racing the writer always observes a prefix of the appends.

use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::temperature::Temperature;

/// One sampled completion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub run_id: String,
    pub question_id: String,
    pub temperature: Temperature,
    pub round: u32,
    pub sample_index: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_raw: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_extracted: Option<String>,
    /// `None` means the verifier abstained.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    /// Mean per-token entropy in nats.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_entropy: Option<f64>,
    pub token_count: u64,
}

/// Uniqueness key of a record inside a store.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TraceKey {
    pub run_id: String,
    pub question_id: String,
    pub temperature: Temperature,
    pub round: u32,
    pub sample_index: u32,
}

impl std::fmt::Display for TraceKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "(run={}, question={}, T={}, round={}, sample={})",
            self.run_id, self.question_id, self.temperature, self.round, self.sample_index
        )
    }
}

impl TraceRecord {
    pub fn key(&self) -> TraceKey {
        TraceKey {
            run_id: self.run_id.clone(),
            question_id: self.question_id.clone(),
            temperature: self.temperature,
            round: self.round,
            sample_index: self.sample_index,
        }
    }

    pub fn is_correct(&self) -> bool {
        self.correct == Some(true)
    }

    /// Checks the per-record invariants, naming the offending field.
    pub fn validate(&self) -> Result<(), StoreError> {
        let invalid = |field: &'static str, reason: String| {
            Err(StoreError::Invalid { field, reason })
        };
        if self.run_id.is_empty() {
            return invalid("run_id", "must not be empty".into());
        }
        if self.question_id.is_empty() {
            return invalid("question_id", "must not be empty".into());
        }
        if self.round < 1 {
            return invalid("round", "must be >= 1".into());
        }
        if let Some(h) = self.mean_entropy {
            if !h.is_finite() || h < 0.0 {
                return invalid("mean_entropy", format!("must be finite and >= 0, got {h}"));
            }
        }
        Ok(())
    }
}

/// Per (question, temperature) counts: `n_samples` is N and `n_correct` is C.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionTally {
    pub question_id: String,
    pub temperature: Temperature,
    pub n_samples: u64,
    pub n_correct: u64,
    /// Records whose verdict was unknown; already counted as not correct.
    pub n_unknown: u64,
}

impl QuestionTally {
    pub fn new(question_id: impl Into<String>, temperature: Temperature, n: u64, c: u64) -> Self {
        QuestionTally {
            question_id: question_id.into(),
            temperature,
            n_samples: n,
            n_correct: c,
            n_unknown: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("invalid record field `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("duplicate record key {0}")]
    Duplicate(TraceKey),
    #[error("second T=0 record for run {run_id}, question {question_id}")]
    ZeroTemperatureRepeat { run_id: String, question_id: String },
    #[error("unknown run_id {0:?}")]
    UnknownRun(String),
    #[error("{path}: line {line}: corrupt record: {reason}")]
    Corrupt { path: PathBuf, line: usize, reason: String },
    #[error("store {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Parses JSONL bytes into records. Complete lines only; a final line with no
/// terminating newline is ignored and its byte offset returned.
pub fn parse_jsonl(path: &Path, bytes: &[u8]) -> Result<(Vec<TraceRecord>, usize), StoreError> {
    let complete = match bytes.iter().rposition(|b| *b == b'\n') {
        Some(pos) => pos + 1,
        None => 0,
    };
    let mut records = Vec::new();
    for (idx, line) in bytes[..complete].split(|b| *b == b'\n').enumerate() {
        if line.is_empty() {
            continue;
        }
        let corrupt = |reason: String| StoreError::Corrupt {
            path: path.to_path_buf(),
            line: idx + 1,
            reason,
        };
        let text = std::str::from_utf8(line).map_err(|e| corrupt(e.to_string()))?;
        let record: TraceRecord = serde_json::from_str(text).map_err(|e| corrupt(e.to_string()))?;
        record.validate().map_err(|e| corrupt(e.to_string()))?;
        records.push(record);
    }
    Ok((records, complete))
}

/// Serializes records to JSONL bytes.
pub fn to_jsonl(records: &[TraceRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("TraceRecord serialization is infallible");
        out.push(b'\n');
    }
    out
}

/// Reads every complete record of a store file without taking ownership of it.
pub fn read_store(path: &Path) -> Result<Vec<TraceRecord>, StoreError> {
    let io = |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(io)?
        .read_to_end(&mut bytes)
        .map_err(io)?;
    let (records, _) = parse_jsonl(path, &bytes)?;
    Ok(records)
}

/// Single-writer handle on a JSONL trace file.
pub struct TraceStore {
    path: PathBuf,
    writer: BufWriter<File>,
    records: Vec<TraceRecord>,
    keys: HashSet<TraceKey>,
    zero_temp: HashSet<(String, String)>,
    prune_raw: bool,
}

impl std::fmt::Debug for TraceStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TraceStore")
            .field("path", &self.path)
            .field("records", &self.records.len())
            .finish()
    }
}

impl TraceStore {
    /// Opens (or creates) a store, replaying existing records. A torn final
    /// line is truncated away.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let io = |source| StoreError::Io {
            path: path.clone(),
            source,
        };
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(&path)
            .map_err(io)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(io)?;
        let (existing, complete) = parse_jsonl(&path, &bytes)?;
        if complete < bytes.len() {
            log::warn!(
                "{}: dropping {} bytes of torn trailing record",
                path.display(),
                bytes.len() - complete
            );
            file.set_len(complete as u64).map_err(io)?;
        }
        drop(file);
        let file = OpenOptions::new().append(true).open(&path).map_err(io)?;
        let mut store = TraceStore {
            path,
            writer: BufWriter::new(file),
            records: Vec::with_capacity(existing.len()),
            keys: HashSet::with_capacity(existing.len()),
            zero_temp: HashSet::new(),
            prune_raw: false,
        };
        for record in existing {
            store.check_insertable(&record)?;
            store.index(record);
        }
        Ok(store)
    }

    /// Drops `answer_raw` from every record appended after this call.
    pub fn with_prune_raw(mut self, prune: bool) -> Self {
        self.prune_raw = prune;
        self
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn contains(&self, key: &TraceKey) -> bool {
        self.keys.contains(key)
    }

    fn check_insertable(&self, record: &TraceRecord) -> Result<(), StoreError> {
        record.validate()?;
        let key = record.key();
        if self.keys.contains(&key) {
            return Err(StoreError::Duplicate(key));
        }
        if record.temperature.is_zero()
            && self
                .zero_temp
                .contains(&(record.run_id.clone(), record.question_id.clone()))
        {
            return Err(StoreError::ZeroTemperatureRepeat {
                run_id: record.run_id.clone(),
                question_id: record.question_id.clone(),
            });
        }
        Ok(())
    }

    fn index(&mut self, record: TraceRecord) {
        if record.temperature.is_zero() {
            self.zero_temp
                .insert((record.run_id.clone(), record.question_id.clone()));
        }
        self.keys.insert(record.key());
        self.records.push(record);
    }

    pub fn append(&mut self, record: TraceRecord) -> Result<(), StoreError> {
        self.append_batch(vec![record])
    }

    /// Appends a batch. The whole batch is validated before anything is
    /// written, so a rejected batch leaves the store unchanged.
    pub fn append_batch(&mut self, records: Vec<TraceRecord>) -> Result<(), StoreError> {
        let mut batch_keys = HashSet::with_capacity(records.len());
        let mut batch_zero = HashSet::new();
        for r in &records {
            self.check_insertable(r)?;
            if !batch_keys.insert(r.key()) {
                return Err(StoreError::Duplicate(r.key()));
            }
            if r.temperature.is_zero()
                && !batch_zero.insert((r.run_id.clone(), r.question_id.clone()))
            {
                return Err(StoreError::ZeroTemperatureRepeat {
                    run_id: r.run_id.clone(),
                    question_id: r.question_id.clone(),
                });
            }
        }
        let mut records = records;
        if self.prune_raw {
            for r in &mut records {
                r.answer_raw = None;
            }
        }
        let bytes = to_jsonl(&records);
        let path = self.path.clone();
        let io = |source| StoreError::Io { path, source };
        self.writer
            .write_all(&bytes)
            .and_then(|_| self.writer.flush())
            .map_err(io)?;
        for r in records {
            self.index(r);
        }
        Ok(())
    }

    /// Flushes and fsyncs the file.
    pub fn sync(&mut self) -> Result<(), StoreError> {
        let path = self.path.clone();
        self.writer
            .flush()
            .and_then(|_| self.writer.get_ref().sync_data())
            .map_err(|source| StoreError::Io { path, source })
    }

    pub fn run_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.records.iter().map(|r| r.run_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Tallies one run.
    pub fn tally(&self, run_id: &str) -> Result<Vec<QuestionTally>, StoreError> {
        let run: Vec<&TraceRecord> = self.records.iter().filter(|r| r.run_id == run_id).collect();
        if run.is_empty() {
            return Err(StoreError::UnknownRun(run_id.to_string()));
        }
        Ok(tally_records(run))
    }
}

/// Groups records by (question, temperature). Unknown verdicts count as not
/// correct and are reported in `n_unknown`.
pub fn tally_records<'a>(records: impl IntoIterator<Item = &'a TraceRecord>) -> Vec<QuestionTally> {
    let mut groups: BTreeMap<(&str, Temperature), (u64, u64, u64)> = BTreeMap::new();
    for r in records {
        let entry = groups
            .entry((r.question_id.as_str(), r.temperature))
            .or_default();
        entry.0 += 1;
        match r.correct {
            Some(true) => entry.1 += 1,
            Some(false) => {}
            None => entry.2 += 1,
        }
    }
    groups
        .into_iter()
        .map(|((q, t), (n, c, u))| QuestionTally {
            question_id: q.to_string(),
            temperature: t,
            n_samples: n,
            n_correct: c,
            n_unknown: u,
        })
        .collect()
}

/// Line-by-line reader that reports corrupt lines with their number; used
/// for overlay files that share the JSONL conventions.
pub fn read_jsonl_lines<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    let file = File::open(path).map_err(|source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| StoreError::Corrupt {
            path: path.to_path_buf(),
            line: idx + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}
