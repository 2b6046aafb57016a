//! Plan-construction traces: operators, join patterns, per-step records and
//! workloads, plus JSONL/CSV ingestion and query-level calibration/test splits.
//!
//! A trace records, for every join a learned optimizer built while planning a
//! query, the cost it predicted and the latency that was later measured.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TraceError {
    #[error("malformed record at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("negative latency at line {line}")]
    NegativeLatency { line: usize },
    #[error("negative cost at line {line}")]
    NegativeCost { line: usize },
    #[error("non-finite value at line {line}")]
    NonFinite { line: usize },
    #[error("duplicate step {step} for query {query_id} at line {line}")]
    DuplicateStep { query_id: String, step: usize, line: usize },
    #[error("steps of query {query_id} are not dense 0..{len}")]
    SparseSteps { query_id: String, len: usize },
    #[error("unknown operator code {0:?}")]
    UnknownOperator(String),
    #[error("invalid pattern: {0}")]
    InvalidPattern(String),
    #[error("duplicate query id {0} in workload")]
    DuplicateQuery(String),
    #[error("need at least 2 traces to split, got {0}")]
    TooFewTraces(usize),
    #[error("calibration fraction must lie in (0, 1), got {0}")]
    BadFraction(f64),
    #[error("trace is empty")]
    EmptyTrace,
}

/// Physical operator codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Operator {
    /// Sequential scan.
    SS,
    /// Index scan.
    IS,
    /// Hash join.
    HJ,
    /// Nested-loop join.
    NL,
    /// Merge join.
    MJ,
}

impl Operator {
    pub const JOINS: [Operator; 3] = [Operator::HJ, Operator::NL, Operator::MJ];
    pub const SCANS: [Operator; 2] = [Operator::SS, Operator::IS];

    pub fn code(self) -> &'static str {
        match self {
            Operator::SS => "SS",
            Operator::IS => "IS",
            Operator::HJ => "HJ",
            Operator::NL => "NL",
            Operator::MJ => "MJ",
        }
    }

    pub fn is_join(self) -> bool {
        matches!(self, Operator::HJ | Operator::NL | Operator::MJ)
    }

    pub fn is_scan(self) -> bool {
        !self.is_join()
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Operator {
    type Err = TraceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "SS" => Ok(Operator::SS),
            "IS" => Ok(Operator::IS),
            "HJ" => Ok(Operator::HJ),
            "NL" => Ok(Operator::NL),
            "MJ" => Ok(Operator::MJ),
            other => Err(TraceError::UnknownOperator(other.to_string())),
        }
    }
}

impl Serialize for Operator {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.code())
    }
}

impl<'de> Deserialize<'de> for Operator {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A two-level plan sub-structure: a join operator and the operators of its
/// left and right children. Left and right are not interchangeable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Pattern {
    parent: Operator,
    left: Operator,
    right: Operator,
}

impl Pattern {
    pub fn new(parent: Operator, left: Operator, right: Operator) -> Result<Self, TraceError> {
        if !parent.is_join() {
            return Err(TraceError::InvalidPattern(format!(
                "parent {parent} is not a join operator"
            )));
        }
        Ok(Pattern { parent, left, right })
    }

    pub fn parent(&self) -> Operator {
        self.parent
    }

    pub fn left(&self) -> Operator {
        self.left
    }

    pub fn right(&self) -> Operator {
        self.right
    }

    fn from_parts(parts: &[&str]) -> Result<Self, TraceError> {
        if parts.len() != 3 {
            return Err(TraceError::InvalidPattern(format!(
                "expected 3 operators, got {}",
                parts.len()
            )));
        }
        Pattern::new(parts[0].parse()?, parts[1].parse()?, parts[2].parse()?)
    }
}

/// Renders as `HJ|SS|SS`.
impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}|{}|{}", self.parent, self.left, self.right)
    }
}

impl FromStr for Pattern {
    type Err = TraceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split('|').collect();
        Pattern::from_parts(&parts)
    }
}

impl Serialize for Pattern {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Pattern {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One plan-construction step of one query.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub query_id: String,
    pub step: usize,
    pub pattern: Option<Pattern>,
    /// Predicted cost in milliseconds.
    pub predicted_cost: f64,
    /// Measured latency in milliseconds.
    pub actual_latency: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryTrace {
    pub query_id: String,
    pub steps: Vec<StepRecord>,
    /// Whether the full actual trajectory of the plan is known.
    pub complete: bool,
}

impl QueryTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_latency(&self) -> f64 {
        self.steps.iter().map(|s| s.actual_latency).sum()
    }

    pub fn total_predicted_cost(&self) -> f64 {
        self.steps.iter().map(|s| s.predicted_cost).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub label: String,
    pub traces: Vec<QueryTrace>,
}

impl Workload {
    /// Builds a workload, rejecting duplicate query ids.
    pub fn new(label: impl Into<String>, traces: Vec<QueryTrace>) -> Result<Self, TraceError> {
        let mut seen = HashSet::new();
        for t in &traces {
            if !seen.insert(t.query_id.as_str()) {
                return Err(TraceError::DuplicateQuery(t.query_id.clone()));
            }
        }
        Ok(Workload {
            label: label.into(),
            traces,
        })
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    /// All step records, trace by trace.
    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.traces.iter().flat_map(|t| t.steps.iter())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Jsonl,
    Csv,
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" | "json" => Ok(Format::Jsonl),
            "csv" => Ok(Format::Csv),
            other => Err(format!("unknown trace format {other:?}")),
        }
    }
}

impl Format {
    /// Guesses the format from a file extension, defaulting to JSONL.
    pub fn from_path(path: &std::path::Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Format::Csv,
            _ => Format::Jsonl,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    query_id: String,
    step: usize,
    pattern: Option<[String; 3]>,
    predicted_cost: f64,
    actual_latency: f64,
}

#[derive(Serialize, Deserialize)]
struct CsvRecord {
    query_id: String,
    step: usize,
    pattern: String,
    predicted_cost: f64,
    actual_latency: f64,
}

fn check_record(rec: &StepRecord, line: usize) -> Result<(), TraceError> {
    if !rec.actual_latency.is_finite() || !rec.predicted_cost.is_finite() {
        return Err(TraceError::NonFinite { line });
    }
    if rec.actual_latency < 0.0 {
        return Err(TraceError::NegativeLatency { line });
    }
    if rec.predicted_cost < 0.0 {
        return Err(TraceError::NegativeCost { line });
    }
    Ok(())
}

/// Parses a trace file. Records may appear in any order; traces keep the
/// order in which their query id first appears.
pub fn parse_workload(bytes: &[u8], format: Format) -> Result<Workload, TraceError> {
    let records = match format {
        Format::Jsonl => parse_jsonl(bytes)?,
        Format::Csv => parse_csv(bytes)?,
    };
    assemble(records)
}

fn parse_jsonl(bytes: &[u8]) -> Result<Vec<(usize, StepRecord)>, TraceError> {
    let text = std::str::from_utf8(bytes).map_err(|e| TraceError::Malformed {
        line: 0,
        reason: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord = serde_json::from_str(raw).map_err(|e| TraceError::Malformed {
            line,
            reason: e.to_string(),
        })?;
        let pattern = match rec.pattern {
            None => None,
            Some(parts) => {
                let refs: Vec<&str> = parts.iter().map(String::as_str).collect();
                Some(Pattern::from_parts(&refs)?)
            }
        };
        let step = StepRecord {
            query_id: rec.query_id,
            step: rec.step,
            pattern,
            predicted_cost: rec.predicted_cost,
            actual_latency: rec.actual_latency,
        };
        check_record(&step, line)?;
        out.push((line, step));
    }
    Ok(out)
}

fn parse_csv(bytes: &[u8]) -> Result<Vec<(usize, StepRecord)>, TraceError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let mut out = Vec::new();
    for (idx, row) in reader.deserialize::<CsvRecord>().enumerate() {
        // header occupies line 1
        let line = idx + 2;
        let rec = row.map_err(|e| TraceError::Malformed {
            line,
            reason: e.to_string(),
        })?;
        let pattern = if rec.pattern.is_empty() {
            None
        } else {
            Some(rec.pattern.parse()?)
        };
        let step = StepRecord {
            query_id: rec.query_id,
            step: rec.step,
            pattern,
            predicted_cost: rec.predicted_cost,
            actual_latency: rec.actual_latency,
        };
        check_record(&step, line)?;
        out.push((line, step));
    }
    Ok(out)
}

fn assemble(records: Vec<(usize, StepRecord)>) -> Result<Workload, TraceError> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, BTreeMap<usize, StepRecord>> = BTreeMap::new();
    for (line, rec) in records {
        let group = groups.entry(rec.query_id.clone()).or_insert_with(|| {
            order.push(rec.query_id.clone());
            BTreeMap::new()
        });
        if group.contains_key(&rec.step) {
            return Err(TraceError::DuplicateStep {
                query_id: rec.query_id,
                step: rec.step,
                line,
            });
        }
        group.insert(rec.step, rec);
    }
    let mut traces = Vec::with_capacity(order.len());
    for qid in order {
        let group = groups.remove(&qid).unwrap_or_default();
        let len = group.len();
        if group.keys().enumerate().any(|(i, &s)| i != s) {
            return Err(TraceError::SparseSteps { query_id: qid, len });
        }
        traces.push(QueryTrace {
            query_id: qid,
            steps: group.into_values().collect(),
            complete: true,
        });
    }
    Workload::new("", traces)
}

/// Writes a workload in the given format; `parse_workload` reads it back
/// unchanged (up to the label).
pub fn serialize_workload(w: &Workload, format: Format) -> String {
    match format {
        Format::Jsonl => {
            let mut out = String::new();
            for rec in w.steps() {
                let json = JsonRecord {
                    query_id: rec.query_id.clone(),
                    step: rec.step,
                    pattern: rec.pattern.map(|p| {
                        [
                            p.parent.code().to_string(),
                            p.left.code().to_string(),
                            p.right.code().to_string(),
                        ]
                    }),
                    predicted_cost: rec.predicted_cost,
                    actual_latency: rec.actual_latency,
                };
                out.push_str(&serde_json::to_string(&json).expect("record serializes"));
                out.push('\n');
            }
            out
        }
        Format::Csv => {
            let mut writer = csv::Writer::from_writer(Vec::new());
            // header is emitted even for an empty workload
            writer
                .write_record([
                    "query_id",
                    "step",
                    "pattern",
                    "predicted_cost",
                    "actual_latency",
                ])
                .expect("in-memory write");
            for rec in w.steps() {
                writer
                    .write_record([
                        rec.query_id.clone(),
                        rec.step.to_string(),
                        rec.pattern.map(|p| p.to_string()).unwrap_or_default(),
                        rec.predicted_cost.to_string(),
                        rec.actual_latency.to_string(),
                    ])
                    .expect("in-memory write");
            }
            let bytes = writer.into_inner().expect("in-memory flush");
            String::from_utf8(bytes).expect("csv output is utf-8")
        }
    }
}

/// Number of traces that go to the calibration side: `floor(fraction * n + 0.5)`.
pub fn calibration_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64 + 0.5).floor() as usize).min(n)
}

/// Splits whole traces into (calibration, test). The calibration side is the
/// prefix of a seeded Fisher-Yates shuffle; both sides keep the input order.
pub fn split_workload(
    w: &Workload,
    calibration_fraction: f64,
    seed: u64,
) -> Result<(Workload, Workload), TraceError> {
    if w.len() < 2 {
        return Err(TraceError::TooFewTraces(w.len()));
    }
    if !(calibration_fraction > 0.0 && calibration_fraction < 1.0) {
        return Err(TraceError::BadFraction(calibration_fraction));
    }
    let n = w.len();
    let take = calibration_count(n, calibration_fraction);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let mut in_cal = vec![false; n];
    for &i in &idx[..take] {
        in_cal[i] = true;
    }
    let (mut cal, mut test) = (Vec::with_capacity(take), Vec::with_capacity(n - take));
    for (i, t) in w.traces.iter().enumerate() {
        if in_cal[i] {
            cal.push(t.clone());
        } else {
            test.push(t.clone());
        }
    }
    Ok((
        Workload {
            label: "calibration".into(),
            traces: cal,
        },
        Workload {
            label: "test".into(),
            traces: test,
        },
    ))
}

/// Prefix sums of the per-step actual latencies.
pub fn cumulative_signal(trace: &QueryTrace) -> Result<Vec<f64>, TraceError> {
    if trace.steps.is_empty() {
        return Err(TraceError::EmptyTrace);
    }
    Ok(trace
        .steps
        .iter()
        .scan(0.0, |acc, s| {
            *acc += s.actual_latency;
            Some(*acc)
        })
        .collect())
}
