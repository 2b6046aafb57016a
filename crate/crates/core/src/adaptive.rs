//! Conformal bounds that stay valid under a bounded distribution shift.
//!
//! The shift between calibration and test score distributions is measured as
//! the total variation distance between two Gaussian kernel density estimates.
//! Given an allowed shift `epsilon >= TV`, the user's `delta` is replaced by a
//! smaller `delta_tilde` and the bound is re-read from the same calibration
//! scores at that level.

use serde::Serialize;
use thiserror::Error;

use crate::cp::{quantile_value, BoundMode, ScoreSet, UpperBound};

#[derive(Debug, Error, PartialEq)]
pub enum ShiftError {
    #[error("density estimation needs at least 2 samples, got {0}")]
    SampleTooSmall(usize),
    #[error("sample contains a non-finite value")]
    NonFinite,
    #[error("epsilon below estimated shift (epsilon {epsilon}, estimated tv {tv})")]
    EpsilonBelowShift { epsilon: f64, tv: f64 },
    #[error("delta must lie in (0, 1), got {0}")]
    BadDelta(f64),
    #[error("epsilon must lie in [0, 1), got {0}")]
    BadEpsilon(f64),
    #[error("need at least one calibration score")]
    NoScores,
}

/// Grid resolution used for density evaluation and integration.
pub const GRID_POINTS: usize = 2048;
/// The evaluation grid extends this many bandwidths past the sample range.
pub const GRID_PAD_BANDWIDTHS: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl Grid {
    pub fn nodes(&self) -> Vec<f64> {
        if self.points < 2 {
            return vec![self.lo];
        }
        let step = (self.hi - self.lo) / (self.points - 1) as f64;
        (0..self.points).map(|i| self.lo + step * i as f64).collect()
    }
}

/// A Gaussian KDE with Silverman's bandwidth.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityEstimate {
    sample: Vec<f64>,
    bandwidth: f64,
    grid: Grid,
}

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl DensityEstimate {
    pub fn sample(&self) -> &[f64] {
        &self.sample
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    /// Same sample, bandwidth raised to at least `min_bandwidth`.
    pub fn with_min_bandwidth(mut self, min_bandwidth: f64) -> Self {
        if self.bandwidth < min_bandwidth {
            self.bandwidth = min_bandwidth;
            self.grid = default_grid(&self.sample, min_bandwidth);
        }
        self
    }

    pub fn density_at(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        let sum: f64 = self
            .sample
            .iter()
            .map(|&xi| {
                let u = (x - xi) / h;
                (-0.5 * u * u).exp()
            })
            .sum();
        sum * INV_SQRT_2PI / (h * self.sample.len() as f64)
    }

    /// Density on the estimate's own grid as `(x, p(x))` pairs.
    pub fn evaluate(&self) -> Vec<(f64, f64)> {
        self.evaluate_on(&self.grid.nodes())
    }

    pub fn evaluate_on(&self, xs: &[f64]) -> Vec<(f64, f64)> {
        xs.iter().map(|&x| (x, self.density_at(x))).collect()
    }
}

fn default_grid(sample: &[f64], h: f64) -> Grid {
    let (min, max) = sample
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    Grid {
        lo: min - GRID_PAD_BANDWIDTHS * h,
        hi: max + GRID_PAD_BANDWIDTHS * h,
        points: GRID_POINTS,
    }
}

/// `1.06 * sd * n^(-1/5)`, floored at `1e-6 * (1 + |mean|)`.
pub fn silverman_bandwidth(sample: &[f64]) -> f64 {
    let n = sample.len() as f64;
    let mean = sample.iter().sum::<f64>() / n;
    let var = sample.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let h = 1.06 * var.sqrt() * n.powf(-0.2);
    h.max(1e-6 * (1.0 + mean.abs()))
}

pub fn estimate_density(sample: &[f64]) -> Result<DensityEstimate, ShiftError> {
    if sample.len() < 2 {
        return Err(ShiftError::SampleTooSmall(sample.len()));
    }
    if sample.iter().any(|x| !x.is_finite()) {
        return Err(ShiftError::NonFinite);
    }
    let bandwidth = silverman_bandwidth(sample);
    Ok(DensityEstimate {
        sample: sample.to_vec(),
        bandwidth,
        grid: default_grid(sample, bandwidth),
    })
}

/// Trapezoidal integral of sampled `(x, y)` pairs, in order.
pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1))
        .sum()
}

/// `1/2 * integral |p - q|` on the merged grids of both estimates.
///
/// Merging the two grids (rather than laying one uniform grid over the union
/// hull) keeps narrow, far-apart densities resolved.
pub fn total_variation(a: &DensityEstimate, b: &DensityEstimate) -> f64 {
    let mut xs = a.grid.nodes();
    xs.extend(b.grid.nodes());
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let diff: Vec<(f64, f64)> = xs
        .iter()
        .map(|&x| (x, (a.density_at(x) - b.density_at(x)).abs()))
        .collect();
    (0.5 * trapezoid(&diff)).clamp(0.0, 1.0)
}

/// An allowed shift together with the measured one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ShiftConfig {
    pub epsilon: f64,
    pub estimated_tv: f64,
}

impl ShiftConfig {
    pub fn check(&self) -> Result<(), ShiftError> {
        if self.epsilon < self.estimated_tv {
            Err(ShiftError::EpsilonBelowShift {
                epsilon: self.epsilon,
                tv: self.estimated_tv,
            })
        } else {
            Ok(())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdjustedDelta {
    pub delta: f64,
    pub delta_tilde: f64,
    pub k: usize,
    pub epsilon: f64,
}

/// `delta_tilde = 1 - g_inv(g((1 + 1/K) * g_inv(1 - delta)))` with
/// `g(b) = max(0, b - eps)` and `g_inv(b) = min(1, b + eps)`, clamped to [0, 1].
pub fn adjust_delta(delta: f64, k: usize, epsilon: f64) -> AdjustedDelta {
    let g = |b: f64| (b - epsilon).max(0.0);
    let g_inv = |b: f64| (b + epsilon).min(1.0);
    let inflation = 1.0 + 1.0 / k.max(1) as f64;
    let level = g_inv(g(inflation * g_inv(1.0 - delta)));
    AdjustedDelta {
        delta,
        delta_tilde: (1.0 - level).clamp(0.0, 1.0),
        k,
        epsilon,
    }
}

/// The bound `C~`: the `(1 - delta_tilde)` quantile of the original calibration
/// scores. When `shift` is given, `epsilon` must cover its estimated TV.
pub fn adjusted_upper_bound(
    scores: &ScoreSet,
    delta: f64,
    epsilon: f64,
    shift: Option<&ShiftConfig>,
) -> Result<(UpperBound, AdjustedDelta), ShiftError> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(ShiftError::BadDelta(delta));
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(ShiftError::BadEpsilon(epsilon));
    }
    if let Some(cfg) = shift {
        ShiftConfig {
            epsilon,
            estimated_tv: cfg.estimated_tv,
        }
        .check()?;
    }
    if scores.is_empty() {
        return Err(ShiftError::NoScores);
    }
    let adj = adjust_delta(delta, scores.len(), epsilon);
    let bound = UpperBound {
        value: quantile_value(scores.sorted(), adj.delta_tilde),
        delta: adj.delta_tilde,
        k: scores.len(),
        mode: if scores.pattern().is_some() {
            BoundMode::PatternBased
        } else {
            BoundMode::Unified
        },
        pattern: scores.pattern(),
    };
    Ok((bound, adj))
}
