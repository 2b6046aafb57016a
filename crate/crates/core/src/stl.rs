//! Signal temporal logic over latency signals and predictive runtime
//! verification of plan construction.
//!
//! Signals are cumulative actual latency per construction step. At step `tau`
//! the monitor sees the observed prefix and appends one predicted point (the
//! last observed value plus the predicted cost of the next step). Temporal
//! windows are intersected with whatever indices the signal has.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cp::{ScoreSet, UpperBound};
use crate::trace::{cumulative_signal, QueryTrace, StepRecord, Workload};

/// Robustness reported for `True`; never written as "inf" into CSV output.
pub const TRUE_ROBUSTNESS: f64 = 1e18;

#[derive(Debug, Error, PartialEq)]
pub enum StlError {
    #[error("cannot evaluate a formula on an empty signal")]
    EmptySignal,
    #[error("window [{a}, {b}] at time {t} has no samples in a signal of length {len}")]
    EmptyWindow { a: usize, b: usize, t: usize, len: usize },
    #[error("invalid window [{a}, {b}]: a must not exceed b")]
    BadWindow { a: usize, b: usize },
    #[error("{message} at position {pos}; expected e.g. G(x<1000), G[0,5](x<2000), !(...), (...)&(...)")]
    Parse { message: String, pos: usize },
    #[error("trace prefix is empty")]
    EmptyPrefix,
    #[error("next predicted cost must be finite and >= 0, got {0}")]
    BadCost(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Lt,
    Gt,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StlSpec {
    True,
    Predicate { threshold: f64, relation: Relation },
    Not(Box<StlSpec>),
    And(Box<StlSpec>, Box<StlSpec>),
    /// `G[a,b]`; `b = None` means unbounded.
    Always { a: usize, b: Option<usize>, spec: Box<StlSpec> },
}

impl StlSpec {
    pub fn lt(threshold: f64) -> Self {
        StlSpec::Predicate {
            threshold,
            relation: Relation::Lt,
        }
    }

    pub fn gt(threshold: f64) -> Self {
        StlSpec::Predicate {
            threshold,
            relation: Relation::Gt,
        }
    }

    pub fn and(a: StlSpec, b: StlSpec) -> Self {
        StlSpec::And(Box::new(a), Box::new(b))
    }

    pub fn always(spec: StlSpec) -> Self {
        StlSpec::Always {
            a: 0,
            b: None,
            spec: Box::new(spec),
        }
    }

    pub fn always_within(a: usize, b: usize, spec: StlSpec) -> Result<Self, StlError> {
        if a > b {
            return Err(StlError::BadWindow { a, b });
        }
        Ok(StlSpec::Always {
            a,
            b: Some(b),
            spec: Box::new(spec),
        })
    }

    /// `G(x < threshold)`, the latency-budget constraint.
    pub fn latency_budget(threshold: f64) -> Self {
        StlSpec::always(StlSpec::lt(threshold))
    }

    fn eval_at(&self, x: &[f64], t: usize) -> Result<f64, StlError> {
        match self {
            StlSpec::True => Ok(TRUE_ROBUSTNESS),
            StlSpec::Predicate {
                threshold,
                relation,
            } => {
                let v = x[t];
                Ok(match relation {
                    Relation::Lt => threshold - v,
                    Relation::Gt => v - threshold,
                })
            }
            StlSpec::Not(inner) => Ok(-inner.eval_at(x, t)?),
            StlSpec::And(l, r) => Ok(l.eval_at(x, t)?.min(r.eval_at(x, t)?)),
            StlSpec::Always { a, b, spec } => {
                let last = x.len() - 1;
                let start = t.saturating_add(*a);
                let end = b.map_or(last, |b| t.saturating_add(b).min(last));
                if start > end {
                    return Err(StlError::EmptyWindow {
                        a: *a,
                        b: b.unwrap_or(usize::MAX),
                        t,
                        len: x.len(),
                    });
                }
                let mut worst = f64::INFINITY;
                for s in start..=end {
                    worst = worst.min(spec.eval_at(x, s)?);
                }
                Ok(worst)
            }
        }
    }
}

/// Prints in the same mini-language `parse` accepts.
impl fmt::Display for StlSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StlSpec::True => f.write_str("true"),
            StlSpec::Predicate {
                threshold,
                relation,
            } => {
                let op = match relation {
                    Relation::Lt => '<',
                    Relation::Gt => '>',
                };
                write!(f, "x{op}{threshold}")
            }
            StlSpec::Not(inner) => write!(f, "!({inner})"),
            StlSpec::And(l, r) => write!(f, "({l})&({r})"),
            StlSpec::Always { a, b, spec } => match b {
                None if *a == 0 => write!(f, "G({spec})"),
                None => write!(f, "G[{a},inf]({spec})"),
                Some(b) => write!(f, "G[{a},{b}]({spec})"),
            },
        }
    }
}

impl FromStr for StlSpec {
    type Err = StlError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut p = Parser {
            src: s.as_bytes(),
            pos: 0,
        };
        let spec = p.conjunction()?;
        p.skip_ws();
        if p.pos != p.src.len() {
            return Err(p.error("unexpected trailing input"));
        }
        Ok(spec)
    }
}

/// Recursive-descent parser for
/// `conj := unary ('&' unary)*`,
/// `unary := '!' unary | 'G' window? '(' conj ')' | '(' conj ')' | 'true' | 'x' ('<'|'>') number`.
struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, message: &str) -> StlError {
        StlError::Parse {
            message: message.to_string(),
            pos: self.pos,
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<(), StlError> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(&format!("expected '{}'", c as char)))
        }
    }

    fn conjunction(&mut self) -> Result<StlSpec, StlError> {
        let mut spec = self.unary()?;
        while self.peek() == Some(b'&') {
            self.pos += 1;
            let rhs = self.unary()?;
            spec = StlSpec::and(spec, rhs);
        }
        Ok(spec)
    }

    fn unary(&mut self) -> Result<StlSpec, StlError> {
        match self.peek() {
            Some(b'!') => {
                self.pos += 1;
                Ok(!self.unary()?)
            }
            Some(b'(') => {
                self.pos += 1;
                let inner = self.conjunction()?;
                self.expect(b')')?;
                Ok(inner)
            }
            Some(b'G') => {
                self.pos += 1;
                let window = if self.peek() == Some(b'[') {
                    self.pos += 1;
                    let a = self.integer()?;
                    self.expect(b',')?;
                    let b = if self.keyword("inf") {
                        None
                    } else {
                        Some(self.integer()?)
                    };
                    self.expect(b']')?;
                    Some((a, b))
                } else {
                    None
                };
                self.expect(b'(')?;
                let inner = self.conjunction()?;
                self.expect(b')')?;
                match window {
                    None => Ok(StlSpec::always(inner)),
                    Some((a, None)) => Ok(StlSpec::Always {
                        a,
                        b: None,
                        spec: Box::new(inner),
                    }),
                    Some((a, Some(b))) => StlSpec::always_within(a, b, inner),
                }
            }
            Some(b'x') => {
                self.pos += 1;
                let relation = match self.peek() {
                    Some(b'<') => Relation::Lt,
                    Some(b'>') => Relation::Gt,
                    _ => return Err(self.error("expected '<' or '>'")),
                };
                self.pos += 1;
                let threshold = self.number()?;
                Ok(StlSpec::Predicate {
                    threshold,
                    relation,
                })
            }
            _ if self.keyword("true") => Ok(StlSpec::True),
            _ => Err(self.error("expected a formula")),
        }
    }

    fn keyword(&mut self, word: &str) -> bool {
        self.skip_ws();
        if self.src[self.pos..].starts_with(word.as_bytes()) {
            self.pos += word.len();
            true
        } else {
            false
        }
    }

    fn token(&mut self, accept: impl Fn(u8) -> bool) -> &str {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && accept(self.src[self.pos]) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.src[start..self.pos]).unwrap_or("")
    }

    fn integer(&mut self) -> Result<usize, StlError> {
        let start = self.pos;
        let tok = self.token(|c| c.is_ascii_digit());
        tok.parse().map_err(|_| StlError::Parse {
            message: "expected a non-negative integer".into(),
            pos: start,
        })
    }

    fn number(&mut self) -> Result<f64, StlError> {
        let start = self.pos;
        let tok = self.token(|c| c.is_ascii_digit() || matches!(c, b'.' | b'-' | b'+' | b'e' | b'E'));
        match tok.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(StlError::Parse {
                message: "expected a decimal threshold".into(),
                pos: start,
            }),
        }
    }
}

/// Robustness of `spec` on `x`, evaluated at time 0.
pub fn robustness(spec: &StlSpec, x: &[f64]) -> Result<f64, StlError> {
    if x.is_empty() {
        return Err(StlError::EmptySignal);
    }
    spec.eval_at(x, 0)
}

/// Whether `x` satisfies `spec` (robustness strictly positive).
pub fn satisfies(spec: &StlSpec, x: &[f64]) -> Result<bool, StlError> {
    Ok(robustness(spec, x)? > 0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEstimate {
    /// Cumulative latencies of steps `0..=tau`.
    pub observed: Vec<f64>,
    /// Last observed value plus the predicted cost of step `tau + 1`.
    pub predicted_next: f64,
    pub tau: usize,
}

impl TrajectoryEstimate {
    /// The observed prefix followed by the predicted point.
    pub fn signal(&self) -> Vec<f64> {
        let mut x = self.observed.clone();
        x.push(self.predicted_next);
        x
    }
}

pub fn trajectory_estimate(
    prefix: &[StepRecord],
    next_predicted_cost: f64,
) -> Result<TrajectoryEstimate, StlError> {
    let latencies: Vec<f64> = prefix.iter().map(|s| s.actual_latency).collect();
    trajectory_estimate_from(&latencies, next_predicted_cost)
}

/// `trajectory_estimate` over raw per-step latencies.
pub fn trajectory_estimate_from(
    latencies: &[f64],
    next_predicted_cost: f64,
) -> Result<TrajectoryEstimate, StlError> {
    if latencies.is_empty() {
        return Err(StlError::EmptyPrefix);
    }
    if !(next_predicted_cost.is_finite() && next_predicted_cost >= 0.0) {
        return Err(StlError::BadCost(next_predicted_cost));
    }
    let observed: Vec<f64> = latencies
        .iter()
        .scan(0.0, |acc, t| {
            *acc += t;
            Some(*acc)
        })
        .collect();
    let last = *observed.last().expect("non-empty prefix");
    Ok(TrajectoryEstimate {
        tau: observed.len() - 1,
        predicted_next: last + next_predicted_cost,
        observed,
    })
}

/// One estimate per step `tau < N - 1` of a trace, using the recorded
/// predicted cost of step `tau + 1`.
pub fn trace_estimates(trace: &QueryTrace) -> Result<Vec<TrajectoryEstimate>, StlError> {
    (0..trace.steps.len().saturating_sub(1))
        .map(|tau| trajectory_estimate(&trace.steps[..=tau], trace.steps[tau + 1].predicted_cost))
        .collect()
}

/// Per-step scores `rho(x_hat) - rho(x)` for one complete trace.
pub fn trace_robustness_scores(spec: &StlSpec, trace: &QueryTrace) -> Result<Vec<f64>, StlError> {
    if trace.steps.len() < 2 {
        return Ok(Vec::new());
    }
    let full = cumulative_signal(trace).map_err(|_| StlError::EmptySignal)?;
    let actual = robustness(spec, &full)?;
    trace_estimates(trace)?
        .iter()
        .map(|est| Ok(robustness(spec, &est.signal())? - actual))
        .collect()
}

/// Pooled robustness-difference scores over every step of every calibration trace.
pub fn robustness_scores(cal: &Workload, spec: &StlSpec) -> Result<ScoreSet, StlError> {
    let mut scores = Vec::new();
    for trace in &cal.traces {
        scores.extend(trace_robustness_scores(spec, trace)?);
    }
    Ok(ScoreSet::signed(scores).expect("robustness of finite signals is finite"))
}

impl std::ops::Not for StlSpec {
    type Output = StlSpec;

    fn not(self) -> StlSpec {
        StlSpec::Not(Box::new(self))
    }
}

/// One score per calibration query: the largest of its per-step scores.
/// A bound on these covers every step of a test query at once.
pub fn robustness_scores_query_max(cal: &Workload, spec: &StlSpec) -> Result<ScoreSet, StlError> {
    let mut scores = Vec::new();
    for trace in &cal.traces {
        let per_step = trace_robustness_scores(spec, trace)?;
        if let Some(m) = per_step.into_iter().reduce(f64::max) {
            scores.push(m);
        }
    }
    Ok(ScoreSet::signed(scores).expect("robustness of finite signals is finite"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorePooling {
    /// Every step of every calibration query is one score.
    PerStep,
    /// The maximum over a calibration query's steps is one score.
    QueryMax,
}

impl FromStr for ScorePooling {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per_step" | "per-step" => Ok(ScorePooling::PerStep),
            "query_max" | "query-max" => Ok(ScorePooling::QueryMax),
            other => Err(format!("unknown pooling {other:?} (expected per-step or query-max)")),
        }
    }
}

/// Robustness-difference scores of `cal` under the given pooling.
pub fn pooled_robustness_scores(
    cal: &Workload,
    spec: &StlSpec,
    pooling: ScorePooling,
) -> Result<ScoreSet, StlError> {
    match pooling {
        ScorePooling::PerStep => robustness_scores(cal, spec),
        ScorePooling::QueryMax => robustness_scores_query_max(cal, spec),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerificationVerdict {
    pub robust_estimate: f64,
    pub bound: f64,
    /// `robust_estimate > bound`, strictly.
    pub guaranteed: bool,
    pub tau: usize,
}

pub fn verify_step(
    spec: &StlSpec,
    est: &TrajectoryEstimate,
    bound: &UpperBound,
) -> Result<VerificationVerdict, StlError> {
    let rho = robustness(spec, &est.signal())?;
    Ok(VerificationVerdict {
        robust_estimate: rho,
        bound: bound.value,
        guaranteed: rho > bound.value,
        tau: est.tau,
    })
}
