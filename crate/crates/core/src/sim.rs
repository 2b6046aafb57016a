//! Synthetic queries, a ground-truth latency model and a learned-cost
//! predictor stand-in.
//!
//! Latency of a join node is a cardinality-driven base formula, times a
//! per-pattern bias, times a global scale, times lognormal noise `exp(sigma Z)`.
//! Noise for a node is drawn from a generator seeded by the node's text form,
//! so a node's latency does not depend on the order nodes are visited in.

use std::collections::BTreeMap;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::search::{extract_pattern, CostPredictor, PlanError, PlanNode, QuerySpec, RelationSpec};
use crate::trace::{Operator, Pattern, QueryTrace, StepRecord, Workload};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("query count must be at least 1")]
    ZeroCount,
    #[error("invalid schema: {0}")]
    BadSchema(String),
    #[error("shift must be finite and >= 0, got {0}")]
    BadShift(f64),
    #[error("invalid latency model: {0}")]
    BadModel(String),
    #[error(transparent)]
    Plan(#[from] PlanError),
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable sub-seed for stream `index` of `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index.wrapping_mul(GOLDEN)))
}

/// FNV-1a, used to key noise streams by text.
pub fn stable_hash(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JoinGraphStyle {
    Chain,
    Star,
    /// A random spanning tree plus each remaining pair with probability `p`.
    Random(f64),
}

impl FromStr for JoinGraphStyle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "chain" => Ok(JoinGraphStyle::Chain),
            "star" => Ok(JoinGraphStyle::Star),
            _ => {
                let p = s
                    .strip_prefix("random:")
                    .and_then(|p| p.parse::<f64>().ok())
                    .filter(|p| (0.0..=1.0).contains(p))
                    .ok_or_else(|| {
                        format!("unknown join graph {s:?} (expected chain, star or random:<p>)")
                    })?;
                Ok(JoinGraphStyle::Random(p))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchemaSpec {
    pub relation_count: usize,
    pub cardinality_range: (u64, u64),
    pub join_graph_style: JoinGraphStyle,
}

impl Default for SchemaSpec {
    fn default() -> Self {
        SchemaSpec {
            relation_count: 5,
            cardinality_range: (100, 100_000),
            join_graph_style: JoinGraphStyle::Chain,
        }
    }
}

impl SchemaSpec {
    fn validate(&self) -> Result<(), SimError> {
        let (lo, hi) = self.cardinality_range;
        if self.relation_count == 0 {
            return Err(SimError::BadSchema("relation_count must be at least 1".into()));
        }
        if lo == 0 || lo > hi {
            return Err(SimError::BadSchema(format!(
                "cardinality range ({lo}, {hi}) must be positive and ordered"
            )));
        }
        if let JoinGraphStyle::Random(p) = self.join_graph_style {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimError::BadSchema(format!("edge probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// `count` connected queries `q0..`; query `i` draws from its own sub-seed.
pub fn generate_queries(
    schema: &SchemaSpec,
    count: usize,
    seed: u64,
) -> Result<Vec<QuerySpec>, SimError> {
    if count == 0 {
        return Err(SimError::ZeroCount);
    }
    schema.validate()?;
    (0..count)
        .map(|i| generate_query(schema, format!("q{i}"), derive_seed(seed, i as u64)))
        .collect()
}

fn generate_query(schema: &SchemaSpec, id: String, seed: u64) -> Result<QuerySpec, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = schema.relation_count;
    let (lo, hi) = schema.cardinality_range;
    let relations = (0..n)
        .map(|i| RelationSpec {
            name: format!("r{i}"),
            cardinality: rng.random_range(lo..=hi),
        })
        .collect();
    let name = |i: usize| format!("r{i}");
    let mut edges = Vec::new();
    match schema.join_graph_style {
        JoinGraphStyle::Chain => edges.extend((1..n).map(|i| (name(i - 1), name(i)))),
        JoinGraphStyle::Star => edges.extend((1..n).map(|i| (name(0), name(i)))),
        JoinGraphStyle::Random(p) => {
            let mut tree = vec![false; n * n];
            for i in 1..n {
                let j = rng.random_range(0..i);
                tree[j * n + i] = true;
            }
            for i in 0..n {
                for j in i + 1..n {
                    if tree[i * n + j] || rng.random_bool(p) {
                        edges.push((name(i), name(j)));
                    }
                }
            }
        }
    }
    let q = QuerySpec {
        id,
        relations,
        join_edges: edges,
    };
    q.validate()?;
    Ok(q)
}

/// Coefficients of the base latency formula, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OperatorCosts {
    /// Per scanned row.
    pub scan: f64,
    /// Per input row of a hash join.
    pub hash_join: f64,
    /// Per pair of input rows of a nested loop, divided by `nl_scale`.
    pub nested_loop: f64,
    pub nl_scale: f64,
    /// Per `n log2 n` input rows of a merge join.
    pub merge_join: f64,
}

impl Default for OperatorCosts {
    fn default() -> Self {
        OperatorCosts {
            scan: 0.001,
            hash_join: 0.002,
            nested_loop: 1.0,
            nl_scale: 1e6,
            merge_join: 0.0003,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatencyModel {
    pub costs: OperatorCosts,
    /// Sigma of the multiplicative lognormal noise.
    pub noise_sigma: f64,
    pub pattern_bias: BTreeMap<Pattern, f64>,
    /// Global multiplier applied on top of the pattern bias.
    pub scale: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            costs: OperatorCosts::default(),
            noise_sigma: 0.2,
            pattern_bias: BTreeMap::new(),
            scale: 1.0,
        }
    }
}

impl LatencyModel {
    pub fn validate(&self) -> Result<(), SimError> {
        let c = &self.costs;
        let coeffs = [c.scan, c.hash_join, c.nested_loop, c.merge_join];
        if coeffs.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(SimError::BadModel("cost coefficients must be finite and >= 0".into()));
        }
        if !(c.nl_scale.is_finite() && c.nl_scale > 0.0) {
            return Err(SimError::BadModel("nl_scale must be positive".into()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(SimError::BadModel("noise_sigma must be finite and >= 0".into()));
        }
        if !(self.scale.is_finite() && self.scale >= 0.0) {
            return Err(SimError::BadModel("scale must be finite and >= 0".into()));
        }
        if self.pattern_bias.values().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(SimError::BadModel("pattern biases must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let m: LatencyModel =
            serde_json::from_str(text).map_err(|e| SimError::BadModel(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }
}

/// Noise-free latency of the operator at the root of `node`.
pub fn base_latency(node: &PlanNode, query: &QuerySpec, costs: &OperatorCosts) -> f64 {
    match node.children() {
        None => {
            let rel = node.relations().iter().next().expect("leaf has a relation");
            costs.scan * query.cardinality(rel).unwrap_or(0) as f64
        }
        Some((l, r)) => {
            let lr = query.output_rows(l.relations());
            let rr = query.output_rows(r.relations());
            match node.operator() {
                Operator::NL => costs.nested_loop * lr * rr / costs.nl_scale,
                Operator::MJ => {
                    let n = lr + rr;
                    costs.merge_join * n * n.log2().max(0.0)
                }
                _ => costs.hash_join * (lr + rr),
            }
        }
    }
}

fn pattern_factor(bias: &BTreeMap<Pattern, f64>, node: &PlanNode) -> f64 {
    extract_pattern(node)
        .and_then(|p| bias.get(&p).copied())
        .unwrap_or(1.0)
}

fn node_normal(seed: u64, node: &PlanNode) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stable_hash(&node.to_string())));
    StandardNormal.sample(&mut rng)
}

/// Actual latency of each given join node, in the given order.
pub fn step_latencies(
    nodes: &[&PlanNode],
    query: &QuerySpec,
    model: &LatencyModel,
    seed: u64,
) -> Vec<f64> {
    nodes
        .iter()
        .map(|node| {
            let noise = if model.noise_sigma > 0.0 {
                (model.noise_sigma * node_normal(seed, node)).exp()
            } else {
                1.0
            };
            base_latency(node, query, &model.costs)
                * pattern_factor(&model.pattern_bias, node)
                * model.scale
                * noise
        })
        .collect()
}

/// Per-join latencies of `plan` in construction (post-) order.
pub fn true_latency(plan: &PlanNode, query: &QuerySpec, model: &LatencyModel, seed: u64) -> Vec<f64> {
    step_latencies(&plan.joins_post_order(), query, model, seed)
}

/// The base formula times a per-pattern bias, optionally with seeded
/// per-node lognormal jitter.
#[derive(Debug, Clone, PartialEq)]
pub struct SimPredictor {
    pub costs: OperatorCosts,
    pub predictor_bias: BTreeMap<Pattern, f64>,
    pub jitter: f64,
    pub seed: u64,
}

impl SimPredictor {
    pub fn with_jitter(mut self, jitter: f64) -> Self {
        self.jitter = jitter;
        self
    }
}

impl CostPredictor for SimPredictor {
    fn predict(&self, node: &PlanNode, query: &QuerySpec) -> f64 {
        let jitter = if self.jitter > 0.0 {
            let key = derive_seed(self.seed, stable_hash(&query.id));
            (self.jitter * node_normal(key, node)).exp()
        } else {
            1.0
        };
        base_latency(node, query, &self.costs) * pattern_factor(&self.predictor_bias, node) * jitter
    }
}

pub fn make_predictor(
    model: &LatencyModel,
    predictor_bias: BTreeMap<Pattern, f64>,
    seed: u64,
) -> SimPredictor {
    SimPredictor {
        costs: model.costs,
        predictor_bias,
        jitter: 0.0,
        seed,
    }
}

/// One step per given join node, with predicted cost and actual latency.
pub fn execute_steps(
    nodes: &[&PlanNode],
    query: &QuerySpec,
    predictor: &dyn CostPredictor,
    model: &LatencyModel,
    seed: u64,
) -> QueryTrace {
    let actual = step_latencies(nodes, query, model, seed);
    let steps = nodes
        .iter()
        .zip(actual)
        .enumerate()
        .map(|(i, (node, t))| StepRecord {
            query_id: query.id.clone(),
            step: i,
            pattern: extract_pattern(node),
            predicted_cost: predictor.predict(node, query),
            actual_latency: t,
        })
        .collect();
    QueryTrace {
        query_id: query.id.clone(),
        steps,
        complete: true,
    }
}

/// The trace of executing `plan`, one step per join in post-order.
pub fn execute_trace(
    plan: &PlanNode,
    query: &QuerySpec,
    predictor: &dyn CostPredictor,
    model: &LatencyModel,
    seed: u64,
) -> QueryTrace {
    execute_steps(&plan.joins_post_order(), query, predictor, model, seed)
}

/// Noise sigma and global scale both multiplied by `1 + shift`.
pub fn shifted_model(model: &LatencyModel, shift: f64) -> Result<LatencyModel, SimError> {
    if !(shift.is_finite() && shift >= 0.0) {
        return Err(SimError::BadShift(shift));
    }
    Ok(LatencyModel {
        noise_sigma: model.noise_sigma * (1.0 + shift),
        scale: model.scale * (1.0 + shift),
        ..model.clone()
    })
}

/// A uniformly random join order over the query's edges, with random join
/// operators and child orders over sequential scans.
pub fn random_plan(query: &QuerySpec, rng: &mut impl Rng) -> Result<PlanNode, SimError> {
    query.validate()?;
    let mut parts: Vec<Arc<PlanNode>> = query
        .relations
        .iter()
        .map(|r| PlanNode::scan(Operator::SS, r.name.clone()).map(Arc::new))
        .collect::<Result<_, _>>()?;
    while parts.len() > 1 {
        let pairs: Vec<(usize, usize)> = (0..parts.len())
            .flat_map(|i| (i + 1..parts.len()).map(move |j| (i, j)))
            .filter(|&(i, j)| query.joinable(parts[i].relations(), parts[j].relations()))
            .collect();
        let (i, j) = pairs[rng.random_range(0..pairs.len())];
        let op = Operator::JOINS[rng.random_range(0..Operator::JOINS.len())];
        let (l, r) = if rng.random_bool(0.5) { (i, j) } else { (j, i) };
        let node = Arc::new(PlanNode::join(op, parts[l].clone(), parts[r].clone())?);
        parts.remove(j);
        parts.remove(i);
        parts.push(node);
    }
    Ok((*parts[0]).clone())
}

/// Traces of one random plan per query. Query `i` uses sub-seeds
/// `2i` (plan) and `2i + 1` (latency noise) of `seed`.
pub fn random_plan_workload(
    queries: &[QuerySpec],
    predictor: &(dyn CostPredictor + Sync),
    model: &LatencyModel,
    seed: u64,
) -> Result<Workload, SimError> {
    let traces = queries
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2 * i as u64));
            let plan = random_plan(q, &mut rng)?;
            Ok(execute_trace(&plan, q, predictor, model, derive_seed(seed, 2 * i as u64 + 1)))
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    Ok(Workload::new("", traces).expect("query ids are unique"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cp::nonconformity_scores;
    use crate::trace::{parse_workload, serialize_workload, Format};

    fn schema(n: usize, style: JoinGraphStyle) -> SchemaSpec {
        SchemaSpec {
            relation_count: n,
            cardinality_range: (100, 5000),
            join_graph_style: style,
        }
    }

    fn quiet() -> LatencyModel {
        LatencyModel {
            noise_sigma: 0.0,
            ..LatencyModel::default()
        }
    }

    fn pat(s: &str) -> Pattern {
        s.parse().unwrap()
    }

    #[test]
    fn generated_graphs() {
        let qs = generate_queries(&schema(4, JoinGraphStyle::Chain), 3, 1).unwrap();
        let edges: Vec<(&str, &str)> =
            qs[0].join_edges.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        assert_eq!(edges, [("r0", "r1"), ("r1", "r2"), ("r2", "r3")]);
        let star = generate_queries(&schema(4, JoinGraphStyle::Star), 1, 1).unwrap();
        assert!(star[0].join_edges.iter().all(|(a, _)| a == "r0"));
        for p in [0.0, 0.3, 1.0] {
            for q in generate_queries(&schema(7, JoinGraphStyle::Random(p)), 20, 5).unwrap() {
                q.validate().unwrap();
                for r in &q.relations {
                    assert!((100..=5000).contains(&r.cardinality));
                }
            }
        }
        let full = generate_queries(&schema(5, JoinGraphStyle::Random(1.0)), 1, 2).unwrap();
        assert_eq!(full[0].join_edges.len(), 10);
        assert_eq!(
            generate_queries(&schema(4, JoinGraphStyle::Chain), 0, 1),
            Err(SimError::ZeroCount)
        );
        assert_eq!(
            generate_queries(&schema(6, JoinGraphStyle::Random(0.4)), 5, 9),
            generate_queries(&schema(6, JoinGraphStyle::Random(0.4)), 5, 9)
        );
        assert_eq!("random:0.25".parse(), Ok(JoinGraphStyle::Random(0.25)));
        assert!("random:2".parse::<JoinGraphStyle>().is_err());
    }

    #[test]
    fn base_formulas() {
        let q = &generate_queries(&schema(2, JoinGraphStyle::Chain), 1, 3).unwrap()[0];
        let (a, b) = (q.relations[0].cardinality as f64, q.relations[1].cardinality as f64);
        let c = OperatorCosts::default();
        let plan = |op: &str| format!("{op}(SS(r0),SS(r1))").parse::<PlanNode>().unwrap();
        let near = |x: f64, y: f64| (x - y).abs() <= 1e-12 * y.abs().max(1.0);
        assert!(near(base_latency(&plan("HJ"), q, &c), c.hash_join * (a + b)));
        assert!(near(base_latency(&plan("NL"), q, &c), c.nested_loop * a * b / c.nl_scale));
        assert!(near(
            base_latency(&plan("MJ"), q, &c),
            c.merge_join * (a + b) * (a + b).log2()
        ));
        let scan = PlanNode::scan(Operator::SS, "r1").unwrap();
        assert!(near(base_latency(&scan, q, &c), c.scan * b));
        // zero noise, unit bias: latency is exactly the base formula
        assert_eq!(
            true_latency(&plan("HJ"), q, &quiet(), 7),
            vec![base_latency(&plan("HJ"), q, &c)]
        );
    }

    #[test]
    fn pattern_bias_multiplies() {
        let q = &generate_queries(&schema(3, JoinGraphStyle::Chain), 1, 4).unwrap()[0];
        let plan: PlanNode = "NL(NL(SS(r0),SS(r1)),SS(r2))".parse().unwrap();
        let plain = true_latency(&plan, q, &quiet(), 1);
        let mut model = quiet();
        model.pattern_bias.insert(pat("NL|NL|SS"), 3.0);
        let biased = true_latency(&plan, q, &model, 1);
        assert_eq!(biased[0], plain[0]);
        assert_eq!(biased[1], 3.0 * plain[1]);
    }

    #[test]
    fn noise_is_seeded() {
        let q = &generate_queries(&schema(4, JoinGraphStyle::Star), 1, 4).unwrap()[0];
        let plan = random_plan(q, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let m = LatencyModel::default();
        assert_eq!(true_latency(&plan, q, &m, 11), true_latency(&plan, q, &m, 11));
        assert_ne!(true_latency(&plan, q, &m, 11), true_latency(&plan, q, &m, 12));
        assert!(true_latency(&plan, q, &m, 11).iter().all(|&t| t > 0.0));
    }

    #[test]
    fn perfect_predictor_scores_zero() {
        let mut model = quiet();
        model.pattern_bias.insert(pat("HJ|SS|SS"), 2.0);
        let pred = make_predictor(&model, model.pattern_bias.clone(), 1);
        let qs = generate_queries(&schema(5, JoinGraphStyle::Random(0.3)), 30, 2).unwrap();
        let w = random_plan_workload(&qs, &pred, &model, 5).unwrap();
        assert!(nonconformity_scores(w.steps()).sorted().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn score_closed_form_without_noise() {
        let mut model = quiet();
        model.pattern_bias.insert(pat("HJ|SS|SS"), 1.75);
        model.pattern_bias.insert(pat("NL|HJ|SS"), 0.4);
        let pred = make_predictor(&model, BTreeMap::new(), 1);
        let qs = generate_queries(&schema(4, JoinGraphStyle::Chain), 40, 8).unwrap();
        for (i, q) in qs.iter().enumerate() {
            let plan = random_plan(q, &mut ChaCha8Rng::seed_from_u64(i as u64)).unwrap();
            let trace = execute_trace(&plan, q, &pred, &model, 1);
            for (node, step) in plan.joins_post_order().into_iter().zip(&trace.steps) {
                let gap = model.pattern_bias.get(&extract_pattern(node).unwrap()).copied().unwrap_or(1.0);
                let expect = (gap - 1.0).abs() * base_latency(node, q, &model.costs);
                let score = (step.actual_latency - step.predicted_cost).abs();
                assert!((score - expect).abs() <= 1e-9 * expect.max(1.0), "{score} vs {expect}");
            }
        }
    }

    #[test]
    fn underestimated_pattern_dominates_bounds() {
        let model = LatencyModel::default();
        let pred = make_predictor(&model, BTreeMap::from([(pat("NL|SS|SS"), 0.2)]), 1);
        let qs = generate_queries(&schema(5, JoinGraphStyle::Random(0.4)), 400, 3).unwrap();
        let w = random_plan_workload(&qs, &pred, &model, 4).unwrap();
        let table = crate::cp::pattern_upper_bounds(w.steps(), 0.1).unwrap();
        let worst = table
            .entries
            .iter()
            .max_by(|a, b| a.1.value.total_cmp(&b.1.value))
            .unwrap();
        assert_eq!(*worst.0, pat("NL|SS|SS"));
    }

    #[test]
    fn traces_are_valid_and_reproducible() {
        let model = LatencyModel::default();
        let pred = make_predictor(&model, BTreeMap::new(), 1).with_jitter(0.1);
        let qs = generate_queries(&schema(6, JoinGraphStyle::Random(0.2)), 25, 6).unwrap();
        let a = random_plan_workload(&qs, &pred, &model, 9).unwrap();
        let b = random_plan_workload(&qs, &pred, &model, 9).unwrap();
        for fmt in [Format::Jsonl, Format::Csv] {
            let text = serialize_workload(&a, fmt);
            assert_eq!(text, serialize_workload(&b, fmt));
            assert_eq!(parse_workload(text.as_bytes(), fmt).unwrap().traces, a.traces);
        }
        for t in &a.traces {
            assert_eq!(t.steps.len(), 5);
            assert!(t.steps.iter().all(|s| s.pattern.is_some()));
        }
    }

    #[test]
    fn shifted_model_rules() {
        let m = LatencyModel::default();
        assert_eq!(shifted_model(&m, 0.0).unwrap(), m);
        let s = shifted_model(&m, 0.5).unwrap();
        assert_eq!(s.noise_sigma, m.noise_sigma * 1.5);
        assert_eq!(s.scale, 1.5);
        assert_eq!(shifted_model(&m, -1.0), Err(SimError::BadShift(-1.0)));
    }

    #[test]
    fn model_json_round_trip() {
        let mut m = LatencyModel::default();
        m.pattern_bias.insert(pat("NL|NL|IS"), 3.0);
        let text = serde_json::to_string(&m).unwrap();
        assert_eq!(LatencyModel::from_json(&text).unwrap(), m);
        let partial = LatencyModel::from_json(r#"{"noise_sigma": 0.5}"#).unwrap();
        assert_eq!(partial.noise_sigma, 0.5);
        assert_eq!(partial.costs, OperatorCosts::default());
        assert!(LatencyModel::from_json(r#"{"noise_sigma": -1}"#).is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        let seeds: std::collections::BTreeSet<u64> = (0..1000).map(|i| derive_seed(7, i)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_ne!(derive_seed(7, 0), derive_seed(8, 0));
    }
}
