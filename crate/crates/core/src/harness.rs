//! Empirical-coverage experiments: repeated calibration/test sampling,
//! KDE density curves over coverage values, runtime-verification statistics
//! and shift experiments, with CSV output.
//!
//! Iteration `m` draws from sub-seed `derive_seed(seed, m)`, so parallel and
//! serial schedules give identical results.

use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptive::{
    adjusted_upper_bound, estimate_density, total_variation, AdjustedDelta, ShiftConfig,
    ShiftError,
};
use crate::cp::{
    nonconformity_scores, pattern_upper_bounds, quantile_upper_bound, CpError, ScoreSet,
};
use crate::sim::derive_seed;
use crate::stl::{
    pooled_robustness_scores, robustness, trace_estimates, ScorePooling, StlError, StlSpec,
};
use crate::trace::{
    calibration_count, cumulative_signal, split_workload, QueryTrace, StepRecord, TraceError,
    Workload,
};

/// Points on the [0, 1] grid of coverage density curves.
pub const DENSITY_GRID_POINTS: usize = 512;

/// Scores drawn per side for the shift TV estimate.
pub const TV_SAMPLE_SIZE: usize = 500;

#[derive(Debug, Error, PartialEq)]
pub enum HarnessError {
    #[error("test set is empty")]
    EmptyTest,
    #[error("need at least 2 coverage values for a density curve, got {0}")]
    TooFewValues(usize),
    #[error("calibration set too small for delta {delta} in every iteration (largest K seen: {k})")]
    Insufficient { delta: f64, k: usize },
    #[error("invalid experiment config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Cp(#[from] CpError),
    #[error(transparent)]
    Stl(#[from] StlError),
    #[error(transparent)]
    Shift(#[from] ShiftError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// Every step's `|t - c|` against one bound.
    Unified,
    /// Every step against the bound of its own pattern.
    Pattern,
    /// One score per query: `|sum t - sum c|`.
    WholePlan,
}

impl FromStr for Granularity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "unified" => Ok(Granularity::Unified),
            "pattern" => Ok(Granularity::Pattern),
            "whole_plan" | "whole-plan" => Ok(Granularity::WholePlan),
            other => Err(format!(
                "unknown granularity {other:?} (expected unified, pattern or whole_plan)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub iterations: usize,
    pub delta: f64,
    pub calibration_fraction: f64,
    pub seed: u64,
    pub granularity: Granularity,
    /// Draw calibration queries with replacement (test = queries never drawn)
    /// instead of a fresh disjoint split per iteration.
    pub with_replacement: bool,
    /// How robustness scores are pooled in runtime verification.
    pub pooling: ScorePooling,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            iterations: 1000,
            delta: 0.1,
            calibration_fraction: 0.5,
            seed: 0,
            granularity: Granularity::Unified,
            with_replacement: false,
            pooling: ScorePooling::QueryMax,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.iterations == 0 {
            return Err(HarnessError::BadConfig("iterations must be at least 1".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(CpError::BadDelta(self.delta).into());
        }
        if !(self.calibration_fraction > 0.0 && self.calibration_fraction < 1.0) {
            return Err(TraceError::BadFraction(self.calibration_fraction).into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageResult {
    /// `EC_m` per iteration.
    pub ec: Vec<f64>,
    /// The bound per iteration; in pattern mode the largest pattern bound.
    pub c_values: Vec<f64>,
    /// Calibration size per iteration.
    pub k_values: Vec<usize>,
    pub mean: f64,
    /// Argmax of the density curve; `None` with a single iteration.
    pub peak: Option<f64>,
}

impl CoverageResult {
    fn from_iterations(rows: Vec<(f64, f64, usize)>) -> Result<Self, HarnessError> {
        let ec: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let mean = ec.iter().sum::<f64>() / ec.len() as f64;
        let peak = if ec.len() >= 2 {
            Some(curve_peak(&kde_density_curve(&ec)?))
        } else {
            None
        };
        Ok(CoverageResult {
            c_values: rows.iter().map(|r| r.1).collect(),
            k_values: rows.iter().map(|r| r.2).collect(),
            ec,
            mean,
            peak,
        })
    }
}

/// Fraction of `test_scores` at or below the bound built from `cal_scores`.
pub fn empirical_coverage(
    cal_scores: &ScoreSet,
    test_scores: &ScoreSet,
    delta: f64,
) -> Result<f64, HarnessError> {
    if test_scores.is_empty() {
        return Err(HarnessError::EmptyTest);
    }
    let c = quantile_upper_bound(cal_scores, delta)?.value;
    Ok(coverage_at(test_scores.sorted(), c))
}

fn coverage_at(scores: &[f64], c: f64) -> f64 {
    scores.iter().filter(|&&s| s <= c).count() as f64 / scores.len() as f64
}

fn whole_plan_score(t: &QueryTrace) -> f64 {
    (t.total_latency() - t.total_predicted_cost()).abs()
}

/// Calibration and test traces for iteration `m`.
fn sample_split(
    w: &Workload,
    cfg: &ExperimentConfig,
    m: usize,
) -> Result<(Vec<QueryTrace>, Vec<QueryTrace>), HarnessError> {
    let seed = derive_seed(cfg.seed, m as u64);
    if !cfg.with_replacement {
        let (cal, test) = split_workload(w, cfg.calibration_fraction, seed)?;
        return Ok((cal.traces, test.traces));
    }
    if w.len() < 2 {
        return Err(TraceError::TooFewTraces(w.len()).into());
    }
    let k = calibration_count(w.len(), cfg.calibration_fraction);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut drawn = vec![false; w.len()];
    let mut cal = Vec::with_capacity(k);
    for _ in 0..k {
        let i = rng.random_range(0..w.len());
        drawn[i] = true;
        cal.push(w.traces[i].clone());
    }
    let test = w
        .traces
        .iter()
        .zip(&drawn)
        .filter(|(_, d)| !**d)
        .map(|(t, _)| t.clone())
        .collect();
    Ok((cal, test))
}

/// One `(EC, C, K)` triple.
fn sampling_iteration(
    w: &Workload,
    cfg: &ExperimentConfig,
    m: usize,
) -> Result<(f64, f64, usize), HarnessError> {
    let (cal, test) = sample_split(w, cfg, m)?;
    let steps = |ts: &[QueryTrace]| -> Vec<StepRecord> {
        ts.iter().flat_map(|t| t.steps.iter().cloned()).collect()
    };
    match cfg.granularity {
        Granularity::Unified => {
            let (cs, ts) = (steps(&cal), steps(&test));
            let cal_scores = nonconformity_scores(&cs);
            let test_scores = nonconformity_scores(&ts);
            let c = quantile_upper_bound(&cal_scores, cfg.delta)?.value;
            if test_scores.is_empty() {
                return Err(HarnessError::EmptyTest);
            }
            Ok((coverage_at(test_scores.sorted(), c), c, cal_scores.len()))
        }
        Granularity::WholePlan => {
            let cal_scores = ScoreSet::new(cal.iter().map(whole_plan_score).collect())?;
            let test_scores: Vec<f64> = test.iter().map(whole_plan_score).collect();
            if test_scores.is_empty() {
                return Err(HarnessError::EmptyTest);
            }
            let c = quantile_upper_bound(&cal_scores, cfg.delta)?.value;
            Ok((coverage_at(&test_scores, c), c, cal_scores.len()))
        }
        Granularity::Pattern => {
            let cs = steps(&cal);
            let table = pattern_upper_bounds(&cs, cfg.delta)?;
            let ts = steps(&test);
            if ts.is_empty() {
                return Err(HarnessError::EmptyTest);
            }
            let k = table.entries.values().map(|b| b.k).min().unwrap_or(0);
            if table.is_empty() {
                return Ok((1.0, f64::INFINITY, k));
            }
            let mut covered = 0usize;
            for s in &ts {
                let c = table.bound_for(s.pattern.as_ref())?;
                if (s.actual_latency - s.predicted_cost).abs() <= c {
                    covered += 1;
                }
            }
            Ok((covered as f64 / ts.len() as f64, table.fallback_max()?, k))
        }
    }
}

/// `cfg.iterations` rounds of split, bound, and coverage on the test side.
pub fn run_sampling_experiment(
    workload: &Workload,
    cfg: &ExperimentConfig,
) -> Result<CoverageResult, HarnessError> {
    cfg.validate()?;
    let rows = (0..cfg.iterations)
        .into_par_iter()
        .map(|m| sampling_iteration(workload, cfg, m))
        .collect::<Result<Vec<_>, _>>()?;
    if rows.iter().all(|r| r.1.is_infinite()) {
        return Err(HarnessError::Insufficient {
            delta: cfg.delta,
            k: rows.iter().map(|r| r.2).max().unwrap_or(0),
        });
    }
    CoverageResult::from_iterations(rows)
}

/// KDE of coverage values on a 512-point grid over [0, 1]. The bandwidth is
/// floored at the grid spacing so identical values still show as a spike.
pub fn kde_density_curve(values: &[f64]) -> Result<Vec<(f64, f64)>, HarnessError> {
    if values.len() < 2 {
        return Err(HarnessError::TooFewValues(values.len()));
    }
    let step = 1.0 / (DENSITY_GRID_POINTS - 1) as f64;
    let kde = estimate_density(values)?.with_min_bandwidth(step);
    let grid: Vec<f64> = (0..DENSITY_GRID_POINTS).map(|i| i as f64 * step).collect();
    Ok(kde.evaluate_on(&grid))
}

/// Location of the highest point; the first one on ties.
pub fn curve_peak(curve: &[(f64, f64)]) -> f64 {
    curve
        .iter()
        .fold((f64::NAN, f64::NEG_INFINITY), |best, &(x, y)| {
            if y > best.1 {
                (x, y)
            } else {
                best
            }
        })
        .0
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationRow {
    pub query_id: String,
    pub tau: usize,
    pub rho_hat: f64,
    pub rho_actual: f64,
    pub c: f64,
    pub guaranteed: bool,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationStats {
    pub c: f64,
    pub calibration_scores: usize,
    pub test_queries: usize,
    /// Fraction of test queries with `rho(x_hat) - rho(x) <= C` at every step.
    pub covered_fraction: f64,
    /// Test queries whose every step was guaranteed (and that had a step).
    pub guaranteed_queries: usize,
    /// Among those, the fraction that actually satisfied the formula; 1 when none.
    pub guaranteed_satisfied_fraction: f64,
    /// Test queries with at least one step that was not guaranteed.
    pub violations: usize,
    pub violating_queries: Vec<String>,
    /// Test queries whose full signal does not satisfy the formula.
    pub unsatisfied: usize,
    pub rows: Vec<VerificationRow>,
}

/// Splits once with `cfg.seed`, calibrates `C` on robustness-difference
/// scores pooled per `cfg.pooling`, then monitors every test query step by step.
pub fn runtime_verification_experiment(
    workload: &Workload,
    spec: &StlSpec,
    delta: f64,
    cfg: &ExperimentConfig,
) -> Result<VerificationStats, HarnessError> {
    let (cal, test) = split_workload(workload, cfg.calibration_fraction, cfg.seed)?;
    let scores = pooled_robustness_scores(&cal, spec, cfg.pooling)?;
    let c = quantile_upper_bound(&scores, delta)?.value;
    verify_against(&test, spec, c, scores.len())
}

/// Monitoring statistics for `test` against a fixed bound `c`.
pub fn verify_against(
    test: &Workload,
    spec: &StlSpec,
    c: f64,
    calibration_scores: usize,
) -> Result<VerificationStats, HarnessError> {
    let mut rows = Vec::new();
    let (mut covered, mut guaranteed_q, mut guaranteed_sat, mut unsatisfied) = (0, 0, 0, 0);
    let mut violating_queries = Vec::new();
    for trace in &test.traces {
        let full = cumulative_signal(trace)?;
        let rho_actual = robustness(spec, &full)?;
        let satisfied = rho_actual > 0.0;
        let (mut all_covered, mut all_guaranteed) = (true, true);
        let estimates = trace_estimates(trace)?;
        for est in &estimates {
            let rho_hat = robustness(spec, &est.signal())?;
            all_covered &= rho_hat - rho_actual <= c;
            let guaranteed = rho_hat > c;
            all_guaranteed &= guaranteed;
            rows.push(VerificationRow {
                query_id: trace.query_id.clone(),
                tau: est.tau,
                rho_hat,
                rho_actual,
                c,
                guaranteed,
                satisfied,
            });
        }
        covered += all_covered as usize;
        unsatisfied += !satisfied as usize;
        if estimates.is_empty() {
            continue;
        }
        if all_guaranteed {
            guaranteed_q += 1;
            guaranteed_sat += satisfied as usize;
        } else {
            violating_queries.push(trace.query_id.clone());
        }
    }
    let n = test.len();
    if n == 0 {
        return Err(HarnessError::EmptyTest);
    }
    Ok(VerificationStats {
        c,
        calibration_scores,
        test_queries: n,
        covered_fraction: covered as f64 / n as f64,
        guaranteed_queries: guaranteed_q,
        guaranteed_satisfied_fraction: if guaranteed_q == 0 {
            1.0
        } else {
            guaranteed_sat as f64 / guaranteed_q as f64
        },
        violations: violating_queries.len(),
        violating_queries,
        unsatisfied,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShiftStats {
    pub tv: f64,
    pub epsilon: f64,
    pub adjusted: AdjustedDelta,
    /// Mean coverage of test draws under the plain bound `C`.
    pub cov_c: f64,
    /// Mean coverage under the adjusted bound `C~`.
    pub cov_c_tilde: f64,
    pub plain: CoverageResult,
    pub adjusted_result: CoverageResult,
}

/// Draws `n` values without replacement, in draw order.
fn subsample(pool: &[f64], n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    index::sample(rng, pool.len(), n.min(pool.len()))
        .into_iter()
        .map(|i| pool[i])
        .collect()
}

/// Total variation between KDEs of up to `TV_SAMPLE_SIZE` draws from each pool.
pub fn measured_tv(cal_pool: &[f64], test_pool: &[f64], seed: u64) -> Result<f64, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = estimate_density(&subsample(cal_pool, TV_SAMPLE_SIZE, &mut rng))?;
    let b = estimate_density(&subsample(test_pool, TV_SAMPLE_SIZE, &mut rng))?;
    Ok(total_variation(&a, &b))
}

/// Shift experiment on raw score pools. Each iteration draws `k` calibration
/// scores from `cal_pool` and `n_test` test scores from `test_pool` (both
/// without replacement) and records coverage under `C` and `C~`.
pub fn shift_experiment_scores(
    cal_pool: &[f64],
    test_pool: &[f64],
    k: usize,
    n_test: usize,
    delta: f64,
    epsilon: f64,
    cfg: &ExperimentConfig,
) -> Result<ShiftStats, HarnessError> {
    if cfg.iterations == 0 {
        return Err(HarnessError::BadConfig("iterations must be at least 1".into()));
    }
    if test_pool.is_empty() || n_test == 0 {
        return Err(HarnessError::EmptyTest);
    }
    if k == 0 || k > cal_pool.len() {
        return Err(HarnessError::BadConfig(format!(
            "calibration size {k} must be in 1..={}",
            cal_pool.len()
        )));
    }
    let tv = measured_tv(cal_pool, test_pool, derive_seed(cfg.seed, u64::MAX))?;
    let shift = ShiftConfig {
        epsilon,
        estimated_tv: tv,
    };
    shift.check()?;
    let rows = (0..cfg.iterations)
        .into_par_iter()
        .map(|m| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, m as u64));
            let cal = ScoreSet::signed(subsample(cal_pool, k, &mut rng))?;
            let mut test = subsample(test_pool, n_test, &mut rng);
            test.shuffle(&mut rng);
            let c = quantile_upper_bound(&cal, delta)?.value;
            let (ct, adj) = adjusted_upper_bound(&cal, delta, epsilon, Some(&shift))?;
            Ok(((coverage_at(&test, c), c, k), (coverage_at(&test, ct.value), ct.value, k), adj))
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let adjusted = rows[0].2;
    let (plain_rows, adj_rows): (Vec<_>, Vec<_>) = rows.into_iter().map(|r| (r.0, r.1)).unzip();
    let plain = CoverageResult::from_iterations(plain_rows)?;
    let adjusted_result = CoverageResult::from_iterations(adj_rows)?;
    Ok(ShiftStats {
        tv,
        epsilon,
        adjusted,
        cov_c: plain.mean,
        cov_c_tilde: adjusted_result.mean,
        plain,
        adjusted_result,
    })
}

/// Shift experiment on two workloads: latency-cost step scores of `cal` are
/// the calibration pool, those of `test` the shifted test pool. Each
/// iteration takes `calibration_fraction` of each pool.
pub fn shift_experiment(
    cal: &Workload,
    test: &Workload,
    delta: f64,
    epsilon: f64,
    cfg: &ExperimentConfig,
) -> Result<ShiftStats, HarnessError> {
    let cal_pool = nonconformity_scores(cal.steps()).sorted().to_vec();
    let test_pool = nonconformity_scores(test.steps()).sorted().to_vec();
    if test_pool.is_empty() {
        return Err(HarnessError::EmptyTest);
    }
    let k = calibration_count(cal_pool.len(), cfg.calibration_fraction).max(1);
    let n_test = calibration_count(test_pool.len(), cfg.calibration_fraction).max(1);
    shift_experiment_scores(&cal_pool, &test_pool, k, n_test, delta, epsilon, cfg)
}

fn to_csv<R: Serialize>(header: &[&str], rows: impl IntoIterator<Item = R>) -> String {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(header).expect("writing to memory");
    for r in rows {
        w.serialize(r).expect("serializing to memory");
    }
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8 csv")
}

/// `iteration,ec,c`
pub fn coverage_csv(result: &CoverageResult) -> String {
    #[derive(Serialize)]
    struct Row {
        iteration: usize,
        ec: f64,
        c: f64,
    }
    to_csv(
        &["iteration", "ec", "c"],
        result
            .ec
            .iter()
            .zip(&result.c_values)
            .enumerate()
            .map(|(iteration, (&ec, &c))| Row { iteration, ec, c }),
    )
}

/// `coverage,density`
pub fn density_csv(curve: &[(f64, f64)]) -> String {
    #[derive(Serialize)]
    struct Row {
        coverage: f64,
        density: f64,
    }
    to_csv(&["coverage", "density"], curve.iter().map(|&(coverage, density)| Row { coverage, density }))
}

/// `query_id,rho_hat,rho_actual,c,guaranteed,satisfied`, one row per step.
pub fn verification_csv(rows: &[VerificationRow]) -> String {
    #[derive(Serialize)]
    struct Row<'a> {
        query_id: &'a str,
        rho_hat: f64,
        rho_actual: f64,
        c: f64,
        guaranteed: bool,
        satisfied: bool,
    }
    let header = ["query_id", "rho_hat", "rho_actual", "c", "guaranteed", "satisfied"];
    to_csv(&header, rows.iter().map(|r| Row {
        query_id: &r.query_id,
        rho_hat: r.rho_hat,
        rho_actual: r.rho_actual,
        c: r.c,
        guaranteed: r.guaranteed,
        satisfied: r.satisfied,
    }))
}

/// `tv,epsilon,delta,delta_tilde,cov_c,cov_c_tilde`
pub fn shift_csv(stats: &ShiftStats) -> String {
    #[derive(Serialize)]
    struct Row {
        tv: f64,
        epsilon: f64,
        delta: f64,
        delta_tilde: f64,
        cov_c: f64,
        cov_c_tilde: f64,
    }
    let header = ["tv", "epsilon", "delta", "delta_tilde", "cov_c", "cov_c_tilde"];
    to_csv(&header, [Row {
        tv: stats.tv,
        epsilon: stats.epsilon,
        delta: stats.adjusted.delta,
        delta_tilde: stats.adjusted.delta_tilde,
        cov_c: stats.cov_c,
        cov_c_tilde: stats.cov_c_tilde,
    }])
}

/// Single-step traces with predicted cost 0 and i.i.d. exponential latency,
/// so step scores are exchangeable.
pub fn exchangeable_workload(n: usize, mean: f64, seed: u64) -> Workload {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = rand_distr::Exp::new(1.0 / mean).expect("positive mean");
    let traces = (0..n)
        .map(|i| {
            let id = format!("x{i}");
            QueryTrace {
                query_id: id.clone(),
                steps: vec![StepRecord {
                    query_id: id,
                    step: 0,
                    pattern: None,
                    predicted_cost: 0.0,
                    actual_latency: rand_distr::Distribution::sample(&dist, &mut rng),
                }],
                complete: true,
            }
        })
        .collect();
    Workload::new("exchangeable", traces).expect("ids are unique")
}
