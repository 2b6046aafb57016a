//! Split conformal prediction over latency-cost non-conformity scores.
//!
//! The calibration scores are sorted, `+inf` is appended, and the bound `C` is
//! the element at 0-based index `ceil((K + 1)(1 - delta)) - 1`. When that index
//! lands on the appended infinity the bound is trivial, which happens exactly
//! when `K < (1 - delta) / delta`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{Pattern, StepRecord};

#[derive(Debug, Error, PartialEq)]
pub enum CpError {
    #[error("delta must lie in (0, 1), got {0}")]
    BadDelta(f64),
    #[error("score {0} is not a finite non-negative number")]
    BadScore(f64),
    #[error("score {0} is not finite")]
    NonFiniteScore(f64),
    #[error("bound table has no finite entries")]
    EmptyTable,
    #[error("bound table json: {0}")]
    Json(String),
}

/// Slack used when rounding products such as `(K+1)(1-delta)` that are
/// mathematically integral but carry floating-point error.
const INTEGRAL_SLACK: f64 = 1e-9;

/// `ceil(x)`, treating values within `INTEGRAL_SLACK` of an integer as that integer.
pub(crate) fn snapped_ceil(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= INTEGRAL_SLACK * r.abs().max(1.0) {
        r
    } else {
        x.ceil()
    }
}

/// A multiset of calibration scores. Latency-cost scores are non-negative;
/// robustness-difference scores may be negative.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    sorted: Vec<f64>,
    pattern: Option<Pattern>,
}

impl ScoreSet {
    /// Latency-cost scores: finite and `>= 0`.
    pub fn new(scores: Vec<f64>) -> Result<Self, CpError> {
        if let Some(&bad) = scores.iter().find(|s| !s.is_finite() || **s < 0.0) {
            return Err(CpError::BadScore(bad));
        }
        Ok(Self::from_unchecked(scores))
    }

    /// Signed scores, such as robustness differences. Only finiteness is checked.
    pub fn signed(scores: Vec<f64>) -> Result<Self, CpError> {
        if let Some(&bad) = scores.iter().find(|s| !s.is_finite()) {
            return Err(CpError::NonFiniteScore(bad));
        }
        Ok(Self::from_unchecked(scores))
    }

    fn from_unchecked(mut scores: Vec<f64>) -> Self {
        scores.sort_by(f64::total_cmp);
        ScoreSet {
            sorted: scores,
            pattern: None,
        }
    }

    pub fn with_pattern(mut self, pattern: Pattern) -> Self {
        self.pattern = Some(pattern);
        self
    }

    pub fn pattern(&self) -> Option<Pattern> {
        self.pattern
    }

    /// Scores in ascending order.
    pub fn sorted(&self) -> &[f64] {
        &self.sorted
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }
}

/// One score `|t - c|` per step, pooled.
pub fn nonconformity_scores<'a>(steps: impl IntoIterator<Item = &'a StepRecord>) -> ScoreSet {
    let scores = steps
        .into_iter()
        .map(|s| (s.actual_latency - s.predicted_cost).abs())
        .collect();
    ScoreSet::from_unchecked(scores)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundMode {
    Unified,
    #[serde(rename = "pattern")]
    PatternBased,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpperBound {
    /// `C`, possibly `+inf`.
    pub value: f64,
    pub delta: f64,
    pub k: usize,
    pub mode: BoundMode,
    pub pattern: Option<Pattern>,
}

impl UpperBound {
    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
    }
}

fn check_delta(delta: f64) -> Result<(), CpError> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(CpError::BadDelta(delta))
    }
}

/// Smallest `K` with `K >= (1 - delta) / delta`.
pub fn min_calibration_size(delta: f64) -> Result<usize, CpError> {
    check_delta(delta)?;
    Ok(snapped_ceil((1.0 - delta) / delta) as usize)
}

/// 0-based index into `sorted ++ [inf]`. `delta` may be 0 here (adjusted
/// deltas saturate there); the result is then `K`, i.e. the infinity.
pub(crate) fn quantile_index(k: usize, delta: f64) -> usize {
    let rank = snapped_ceil((k as f64 + 1.0) * (1.0 - delta));
    (rank.max(1.0) as usize - 1).min(k)
}

pub(crate) fn quantile_value(sorted: &[f64], delta: f64) -> f64 {
    let p = quantile_index(sorted.len(), delta);
    sorted.get(p).copied().unwrap_or(f64::INFINITY)
}

/// The `(1 - delta)` conformal quantile of `scores`.
pub fn quantile_upper_bound(scores: &ScoreSet, delta: f64) -> Result<UpperBound, CpError> {
    check_delta(delta)?;
    Ok(UpperBound {
        value: quantile_value(&scores.sorted, delta),
        delta,
        k: scores.len(),
        mode: if scores.pattern.is_some() {
            BoundMode::PatternBased
        } else {
            BoundMode::Unified
        },
        pattern: scores.pattern,
    })
}

/// Pattern-keyed (or single unified) bounds built with one `delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundTable {
    pub delta: f64,
    pub mode: BoundMode,
    /// Finite per-pattern bounds. Empty in unified mode.
    pub entries: BTreeMap<Pattern, UpperBound>,
    /// The single bound used in unified mode, when it is finite.
    pub unified: Option<UpperBound>,
    /// Groups (pattern, or `None` for the unified pool) that fell below the
    /// minimum calibration size, with their score counts.
    pub insufficient: Vec<(Option<Pattern>, usize)>,
    /// Steps without a pattern that pattern mode had to skip.
    pub skipped_unpatterned: usize,
}

impl BoundTable {
    /// One bound for every step, pattern or not.
    pub fn unified<'a>(
        steps: impl IntoIterator<Item = &'a StepRecord>,
        delta: f64,
    ) -> Result<Self, CpError> {
        let scores = nonconformity_scores(steps);
        let bound = quantile_upper_bound(&scores, delta)?;
        let (unified, insufficient) = if bound.is_finite() {
            (Some(bound), Vec::new())
        } else {
            (None, vec![(None, scores.len())])
        };
        Ok(BoundTable {
            delta,
            mode: BoundMode::Unified,
            entries: BTreeMap::new(),
            unified,
            insufficient,
            skipped_unpatterned: 0,
        })
    }

    /// A table with exactly the given finite entries; mostly useful for tests
    /// and for hand-specified bounds.
    pub fn from_entries(delta: f64, entries: impl IntoIterator<Item = (Pattern, f64)>) -> Self {
        let entries = entries
            .into_iter()
            .map(|(p, c)| {
                (
                    p,
                    UpperBound {
                        value: c,
                        delta,
                        k: 0,
                        mode: BoundMode::PatternBased,
                        pattern: Some(p),
                    },
                )
            })
            .collect();
        BoundTable {
            delta,
            mode: BoundMode::PatternBased,
            entries,
            unified: None,
            insufficient: Vec::new(),
            skipped_unpatterned: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty() && self.unified.is_none()
    }

    /// Largest finite bound in the table.
    pub fn fallback_max(&self) -> Result<f64, CpError> {
        self.entries
            .values()
            .chain(self.unified.iter())
            .map(|b| b.value)
            .reduce(f64::max)
            .ok_or(CpError::EmptyTable)
    }

    /// The bound recorded for `pattern`: the unified bound in unified mode,
    /// the pattern's own entry in pattern mode.
    pub fn lookup(&self, pattern: Option<&Pattern>) -> Option<f64> {
        match self.mode {
            BoundMode::Unified => self.unified.map(|b| b.value),
            BoundMode::PatternBased => pattern.and_then(|p| self.entries.get(p)).map(|b| b.value),
        }
    }

    /// `lookup`, falling back to `fallback_max` for unseen patterns and leaves.
    pub fn bound_for(&self, pattern: Option<&Pattern>) -> Result<f64, CpError> {
        match self.lookup(pattern) {
            Some(c) => Ok(c),
            None => self.fallback_max(),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut entries: Vec<TableEntry> = self
            .entries
            .iter()
            .map(|(p, b)| TableEntry {
                pattern: Some(*p),
                c: b.value,
                k: b.k,
            })
            .collect();
        if let Some(b) = self.unified {
            entries.push(TableEntry {
                pattern: None,
                c: b.value,
                k: b.k,
            });
        }
        let doc = TableDoc {
            delta: self.delta,
            mode: self.mode,
            entries,
            insufficient: self
                .insufficient
                .iter()
                .map(|(p, k)| Insufficient { pattern: *p, k: *k })
                .collect(),
        };
        serde_json::to_value(doc).expect("bound table serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CpError> {
        let doc: TableDoc = serde_json::from_str(text).map_err(|e| CpError::Json(e.to_string()))?;
        check_delta(doc.delta)?;
        let mut entries = BTreeMap::new();
        let mut unified = None;
        for e in doc.entries {
            if !e.c.is_finite() {
                return Err(CpError::NonFiniteScore(e.c));
            }
            let bound = UpperBound {
                value: e.c,
                delta: doc.delta,
                k: e.k,
                mode: doc.mode,
                pattern: e.pattern,
            };
            match e.pattern {
                Some(p) => {
                    entries.insert(p, bound);
                }
                None => unified = Some(bound),
            }
        }
        Ok(BoundTable {
            delta: doc.delta,
            mode: doc.mode,
            entries,
            unified,
            insufficient: doc.insufficient.into_iter().map(|i| (i.pattern, i.k)).collect(),
            skipped_unpatterned: 0,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct TableEntry {
    pattern: Option<Pattern>,
    c: f64,
    k: usize,
}

#[derive(Serialize, Deserialize)]
struct Insufficient {
    pattern: Option<Pattern>,
    k: usize,
}

#[derive(Serialize, Deserialize)]
struct TableDoc {
    delta: f64,
    mode: BoundMode,
    entries: Vec<TableEntry>,
    #[serde(default)]
    insufficient: Vec<Insufficient>,
}

/// Groups scores by pattern and emits a finite bound for every group that
/// meets the minimum calibration size. Steps without a pattern are counted
/// in `skipped_unpatterned`.
pub fn pattern_upper_bounds<'a>(
    steps: impl IntoIterator<Item = &'a StepRecord>,
    delta: f64,
) -> Result<BoundTable, CpError> {
    let min_k = min_calibration_size(delta)?;
    let mut groups: BTreeMap<Pattern, Vec<f64>> = BTreeMap::new();
    let mut skipped = 0;
    for s in steps {
        match s.pattern {
            Some(p) => groups
                .entry(p)
                .or_default()
                .push((s.actual_latency - s.predicted_cost).abs()),
            None => skipped += 1,
        }
    }
    let mut entries = BTreeMap::new();
    let mut insufficient = Vec::new();
    for (pattern, scores) in groups {
        if scores.len() < min_k {
            insufficient.push((Some(pattern), scores.len()));
            continue;
        }
        let set = ScoreSet::from_unchecked(scores).with_pattern(pattern);
        entries.insert(pattern, quantile_upper_bound(&set, delta)?);
    }
    Ok(BoundTable {
        delta,
        mode: BoundMode::PatternBased,
        entries,
        unified: None,
        insufficient,
        skipped_unpatterned: skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatencyInterval {
    pub lower: f64,
    pub upper: f64,
}

impl LatencyInterval {
    pub fn contains(&self, latency: f64) -> bool {
        self.lower <= latency && latency <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Renders as `[50, 70]`.
impl std::fmt::Display for LatencyInterval {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}, {}]", self.lower, self.upper)
    }
}

/// `[max(0, c - C), c + C]` around a predicted cost.
pub fn interval_around(predicted_cost: f64, c: f64) -> LatencyInterval {
    LatencyInterval {
        lower: (predicted_cost - c).max(0.0),
        upper: predicted_cost + c,
    }
}

pub fn latency_interval(predicted_cost: f64, bound: &UpperBound) -> LatencyInterval {
    interval_around(predicted_cost, bound.value)
}

/// Whether `score <= C` (inclusive).
pub fn covers(bound: &UpperBound, score: f64) -> bool {
    score <= bound.value
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::Operator::*;
    use proptest::prelude::*;

    fn step(c: f64, t: f64, pattern: Option<Pattern>) -> StepRecord {
        StepRecord {
            query_id: "q".into(),
            step: 0,
            pattern,
            predicted_cost: c,
            actual_latency: t,
        }
    }

    fn pat(p: crate::trace::Operator, l: crate::trace::Operator, r: crate::trace::Operator) -> Pattern {
        Pattern::new(p, l, r).unwrap()
    }

    #[test]
    fn scores_are_absolute_residuals() {
        assert_eq!(nonconformity_scores(&[step(60.0, 58.0, None)]).sorted(), &[2.0]);
        assert_eq!(nonconformity_scores(&[step(100.0, 100.0, None)]).sorted(), &[0.0]);
        assert_eq!(
            nonconformity_scores(&[step(60.0, 58.0, None), step(100.0, 111.0, None)]).sorted(),
            &[2.0, 11.0]
        );
    }

    #[test]
    fn min_calibration_size_examples() {
        assert_eq!(min_calibration_size(0.1), Ok(9));
        assert_eq!(min_calibration_size(0.5), Ok(1));
        assert_eq!(min_calibration_size(0.2), Ok(4));
        assert_eq!(min_calibration_size(0.0), Err(CpError::BadDelta(0.0)));
        assert_eq!(min_calibration_size(1.0), Err(CpError::BadDelta(1.0)));
    }

    #[test]
    fn quantile_examples() {
        let nine = ScoreSet::new((1..=9).map(f64::from).collect()).unwrap();
        assert_eq!(quantile_upper_bound(&nine, 0.1).unwrap().value, 9.0);
        let eight = ScoreSet::new((1..=8).map(f64::from).collect()).unwrap();
        assert_eq!(quantile_upper_bound(&eight, 0.1).unwrap().value, f64::INFINITY);
        let one = ScoreSet::new(vec![5.0]).unwrap();
        assert_eq!(quantile_upper_bound(&one, 0.5).unwrap().value, 5.0);
        let empty = ScoreSet::new(vec![]).unwrap();
        let b = quantile_upper_bound(&empty, 0.5).unwrap();
        assert!(b.value.is_infinite() && b.k == 0);
        assert!(quantile_upper_bound(&one, 1.5).is_err());
    }

    #[test]
    fn inexact_float_products_round_to_the_true_index() {
        // 10 * (1 - 0.3) evaluates to 7.000000000000001 in binary floating point.
        assert_eq!(quantile_index(9, 0.3), 6);
        assert_eq!(quantile_index(9, 0.1), 8);
    }

    #[test]
    fn score_set_validation() {
        assert_eq!(ScoreSet::new(vec![1.0, -1.0]), Err(CpError::BadScore(-1.0)));
        assert!(ScoreSet::new(vec![f64::NAN]).is_err());
        assert_eq!(ScoreSet::signed(vec![-2.0, 1.0]).unwrap().sorted(), &[-2.0, 1.0]);
    }

    #[test]
    fn pattern_table_thresholds() {
        let good = pat(HJ, SS, SS);
        let thin = pat(HJ, HJ, IS);
        let mut steps: Vec<_> = (1..=9).map(|i| step(0.0, i as f64, Some(good))).collect();
        steps.extend((0..3).map(|_| step(1.0, 2.0, Some(thin))));
        steps.push(step(0.0, 1.0, None));
        let table = pattern_upper_bounds(&steps, 0.1).unwrap();
        assert_eq!(table.entries[&good].value, 9.0);
        assert!(!table.entries.contains_key(&thin));
        assert_eq!(table.insufficient, vec![(Some(thin), 3)]);
        assert_eq!(table.skipped_unpatterned, 1);
        assert_eq!(table.fallback_max(), Ok(9.0));

        let empty = pattern_upper_bounds(std::iter::empty(), 0.1).unwrap();
        assert!(empty.is_empty());
        assert_eq!(empty.fallback_max(), Err(CpError::EmptyTable));
    }

    #[test]
    fn unified_table_applies_everywhere() {
        let steps: Vec<_> = (0..10).map(|i| step(0.0, i as f64, None)).collect();
        let table = BoundTable::unified(&steps, 0.1).unwrap();
        assert_eq!(table.bound_for(None), Ok(9.0));
        assert_eq!(table.bound_for(Some(&pat(NL, SS, IS))), Ok(9.0));
        let short = BoundTable::unified(&steps[..8], 0.1).unwrap();
        assert!(short.is_empty());
        assert_eq!(short.insufficient, vec![(None, 8)]);
    }

    #[test]
    fn intervals_match_worked_example() {
        let c10 = |c| interval_around(c, 10.0);
        assert_eq!(c10(60.0), LatencyInterval { lower: 50.0, upper: 70.0 });
        assert_eq!(c10(100.0), LatencyInterval { lower: 90.0, upper: 110.0 });
        assert_eq!(c10(150.0), LatencyInterval { lower: 140.0, upper: 160.0 });
        assert_eq!(interval_around(60.0, 5.0).to_string(), "[55, 65]");
        let inf = interval_around(3.0, f64::INFINITY);
        assert_eq!((inf.lower, inf.upper), (0.0, f64::INFINITY));
    }

    #[test]
    fn covers_is_inclusive() {
        let b = UpperBound {
            value: 10.0,
            delta: 0.1,
            k: 9,
            mode: BoundMode::Unified,
            pattern: None,
        };
        assert!(covers(&b, 10.0));
        assert!(!covers(&b, 10.5));
        let inf = UpperBound { value: f64::INFINITY, ..b };
        assert!(covers(&inf, 1e300));
    }

    #[test]
    fn table_json_roundtrip() {
        let p = pat(HJ, SS, SS);
        let mut t = BoundTable::from_entries(0.1, [(p, 5.0)]);
        t.entries.get_mut(&p).unwrap().k = 9;
        t.insufficient.push((Some(pat(HJ, HJ, IS)), 3));
        let json = t.to_json();
        assert_eq!(
            json,
            serde_json::json!({
                "delta": 0.1, "mode": "pattern",
                "entries": [{"pattern": "HJ|SS|SS", "c": 5.0, "k": 9}],
                "insufficient": [{"pattern": "HJ|HJ|IS", "k": 3}]
            })
        );
        let back = BoundTable::from_json(&json.to_string()).unwrap();
        assert_eq!(back, t);
    }

    proptest! {
        #[test]
        fn smaller_delta_never_tightens(scores in prop::collection::vec(0.0..1e3f64, 0..60),
                                        d1 in 0.01f64..0.99, d2 in 0.01f64..0.99) {
            let (lo, hi) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
            let s = ScoreSet::new(scores).unwrap();
            prop_assert!(quantile_upper_bound(&s, lo).unwrap().value >= quantile_upper_bound(&s, hi).unwrap().value);
        }

        #[test]
        fn interval_width_is_twice_c(cost in 0.0..1e6f64, c in 0.0..1e6f64) {
            prop_assume!(cost >= c);
            let iv = interval_around(cost, c);
            prop_assert!((iv.width() - 2.0 * c).abs() <= 1e-9 * (1.0 + cost));
        }
    }
}
