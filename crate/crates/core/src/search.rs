//! Plan trees, beam search over join orders, and search guided by conformal
//! latency upper bounds.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cp::{BoundTable, CpError, UpperBound};
use crate::sim::{step_latencies, LatencyModel};
use crate::stl::{trajectory_estimate_from, verify_step, StlError, StlSpec, VerificationVerdict};
use crate::trace::{Operator, Pattern};

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error("plan text: {message} at position {pos}")]
    Parse { message: String, pos: usize },
    #[error("scan nodes must use a scan operator, got {0}")]
    NotAScan(Operator),
    #[error("join nodes must use a join operator, got {0}")]
    NotAJoin(Operator),
    #[error("join children overlap on relation {0}")]
    Overlap(String),
    #[error("query has no relations")]
    EmptyQuery,
    #[error("relation {0} listed twice")]
    DuplicateRelation(String),
    #[error("unknown relation {0}")]
    UnknownRelation(String),
    #[error("relation {0} has zero cardinality")]
    ZeroCardinality(String),
    #[error("join edge {0}-{0} is a self loop")]
    SelfLoop(String),
    #[error("join graph is not connected")]
    Disconnected,
    #[error("plan covers {found:?} but the query has {expected:?}")]
    Coverage {
        found: Vec<String>,
        expected: Vec<String>,
    },
    #[error("invalid search config: {0}")]
    BadConfig(String),
    #[error("search space exhausted before any complete plan was found")]
    NoCompletePlan,
    #[error(transparent)]
    Cp(#[from] CpError),
    #[error(transparent)]
    Stl(#[from] StlError),
}

/// A node of a binary join tree.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "PlanRepr", into = "PlanRepr")]
pub struct PlanNode {
    operator: Operator,
    children: Option<(Arc<PlanNode>, Arc<PlanNode>)>,
    relations: BTreeSet<String>,
}

impl PlanNode {
    pub fn scan(operator: Operator, relation: impl Into<String>) -> Result<Self, PlanError> {
        if !operator.is_scan() {
            return Err(PlanError::NotAScan(operator));
        }
        Ok(PlanNode {
            operator,
            children: None,
            relations: BTreeSet::from([relation.into()]),
        })
    }

    pub fn join(
        operator: Operator,
        left: Arc<PlanNode>,
        right: Arc<PlanNode>,
    ) -> Result<Self, PlanError> {
        if !operator.is_join() {
            return Err(PlanError::NotAJoin(operator));
        }
        if let Some(r) = left.relations.intersection(&right.relations).next() {
            return Err(PlanError::Overlap(r.clone()));
        }
        let relations = left.relations.union(&right.relations).cloned().collect();
        Ok(PlanNode {
            operator,
            children: Some((left, right)),
            relations,
        })
    }

    pub fn operator(&self) -> Operator {
        self.operator
    }

    pub fn children(&self) -> Option<(&Arc<PlanNode>, &Arc<PlanNode>)> {
        self.children.as_ref().map(|(l, r)| (l, r))
    }

    pub fn relations(&self) -> &BTreeSet<String> {
        &self.relations
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }

    /// Join nodes in post-order (children before parents, left before right).
    pub fn joins_post_order(&self) -> Vec<&PlanNode> {
        let mut out = Vec::new();
        self.collect_joins(&mut out);
        out
    }

    fn collect_joins<'a>(&'a self, out: &mut Vec<&'a PlanNode>) {
        if let Some((l, r)) = &self.children {
            l.collect_joins(out);
            r.collect_joins(out);
            out.push(self);
        }
    }

    pub fn join_count(&self) -> usize {
        self.relations.len() - 1
    }
}

impl fmt::Display for PlanNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.children {
            None => write!(
                f,
                "{}({})",
                self.operator,
                self.relations.iter().next().expect("leaf has a relation")
            ),
            Some((l, r)) => write!(f, "{}({l},{r})", self.operator),
        }
    }
}

impl FromStr for PlanNode {
    type Err = PlanError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut p = PlanParser {
            src: s.as_bytes(),
            pos: 0,
        };
        let node = p.node()?;
        p.skip_ws();
        if p.pos != p.src.len() {
            return Err(p.error("unexpected trailing input"));
        }
        Ok(node)
    }
}

fn is_ident_byte(c: u8) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, b'_' | b'-' | b'.' | b':')
}

struct PlanParser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl PlanParser<'_> {
    fn error(&self, message: &str) -> PlanError {
        PlanError::Parse {
            message: message.into(),
            pos: self.pos,
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn expect(&mut self, c: u8) -> Result<(), PlanError> {
        self.skip_ws();
        if self.src.get(self.pos) == Some(&c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(&format!("expected '{}'", c as char)))
        }
    }

    fn ident(&mut self) -> Result<&str, PlanError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && is_ident_byte(self.src[self.pos]) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.error("expected an identifier"));
        }
        Ok(std::str::from_utf8(&self.src[start..self.pos]).expect("ascii identifier"))
    }

    fn node(&mut self) -> Result<PlanNode, PlanError> {
        let start = self.pos;
        let op: Operator = self.ident()?.parse().map_err(|_| PlanError::Parse {
            message: "unknown operator".into(),
            pos: start,
        })?;
        self.expect(b'(')?;
        let node = if op.is_scan() {
            let rel = self.ident()?.to_string();
            PlanNode::scan(op, rel)?
        } else {
            let l = self.node()?;
            self.expect(b',')?;
            let r = self.node()?;
            PlanNode::join(op, Arc::new(l), Arc::new(r))?
        };
        self.expect(b')')?;
        Ok(node)
    }
}

#[derive(Serialize, Deserialize)]
struct PlanRepr {
    op: Operator,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    relation: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    children: Vec<PlanRepr>,
}

impl From<PlanNode> for PlanRepr {
    fn from(node: PlanNode) -> Self {
        match node.children {
            None => PlanRepr {
                op: node.operator,
                relation: node.relations.into_iter().next(),
                children: Vec::new(),
            },
            Some((l, r)) => PlanRepr {
                op: node.operator,
                relation: None,
                children: vec![(*l).clone().into(), (*r).clone().into()],
            },
        }
    }
}

impl TryFrom<PlanRepr> for PlanNode {
    type Error = PlanError;

    fn try_from(repr: PlanRepr) -> Result<Self, Self::Error> {
        match (repr.relation, repr.children.len()) {
            (Some(rel), 0) => PlanNode::scan(repr.op, rel),
            (None, 2) => {
                let mut it = repr.children.into_iter();
                let l = PlanNode::try_from(it.next().expect("two children"))?;
                let r = PlanNode::try_from(it.next().expect("two children"))?;
                PlanNode::join(repr.op, Arc::new(l), Arc::new(r))
            }
            _ => Err(PlanError::Parse {
                message: "a node needs either a relation or exactly two children".into(),
                pos: 0,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationSpec {
    pub name: String,
    pub cardinality: u64,
}

/// Relations with cardinalities and the edges along which they may be joined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub id: String,
    pub relations: Vec<RelationSpec>,
    pub join_edges: Vec<(String, String)>,
}

impl QuerySpec {
    pub fn validate(&self) -> Result<(), PlanError> {
        if self.relations.is_empty() {
            return Err(PlanError::EmptyQuery);
        }
        let mut names = BTreeSet::new();
        for r in &self.relations {
            if !names.insert(r.name.as_str()) {
                return Err(PlanError::DuplicateRelation(r.name.clone()));
            }
            if r.cardinality == 0 {
                return Err(PlanError::ZeroCardinality(r.name.clone()));
            }
        }
        let mut adj: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for (a, b) in &self.join_edges {
            for x in [a, b] {
                if !names.contains(x.as_str()) {
                    return Err(PlanError::UnknownRelation(x.clone()));
                }
            }
            if a == b {
                return Err(PlanError::SelfLoop(a.clone()));
            }
            adj.entry(a).or_default().push(b);
            adj.entry(b).or_default().push(a);
        }
        let first = self.relations[0].name.as_str();
        let mut seen = BTreeSet::from([first]);
        let mut stack = vec![first];
        while let Some(x) = stack.pop() {
            for &y in adj.get(x).map(Vec::as_slice).unwrap_or(&[]) {
                if seen.insert(y) {
                    stack.push(y);
                }
            }
        }
        if seen.len() != names.len() {
            return Err(PlanError::Disconnected);
        }
        Ok(())
    }

    pub fn cardinality(&self, relation: &str) -> Option<u64> {
        self.relations
            .iter()
            .find(|r| r.name == relation)
            .map(|r| r.cardinality)
    }

    pub fn relation_names(&self) -> BTreeSet<String> {
        self.relations.iter().map(|r| r.name.clone()).collect()
    }

    /// Whether some join edge connects the two relation sets.
    pub fn joinable(&self, a: &BTreeSet<String>, b: &BTreeSet<String>) -> bool {
        self.join_edges.iter().any(|(x, y)| {
            (a.contains(x) && b.contains(y)) || (a.contains(y) && b.contains(x))
        })
    }

    /// Estimated rows produced by joining `set`: the product of cardinalities
    /// times `1 / max(|x|, |y|)` for every edge inside the set.
    pub fn output_rows(&self, set: &BTreeSet<String>) -> f64 {
        let card = |name: &str| self.cardinality(name).unwrap_or(1) as f64;
        let mut rows: f64 = set.iter().map(|r| card(r)).product();
        for (x, y) in &self.join_edges {
            if set.contains(x) && set.contains(y) {
                rows /= card(x).max(card(y));
            }
        }
        rows
    }
}

/// Predicted cost in milliseconds of the operator at the root of `node`.
pub trait CostPredictor {
    fn predict(&self, node: &PlanNode, query: &QuerySpec) -> f64;
}

impl<F> CostPredictor for F
where
    F: Fn(&PlanNode, &QuerySpec) -> f64,
{
    fn predict(&self, node: &PlanNode, query: &QuerySpec) -> f64 {
        self(node, query)
    }
}

/// `(parent, left child, right child)` operators of a join; `None` for leaves.
pub fn extract_pattern(plan: &PlanNode) -> Option<Pattern> {
    let (l, r) = plan.children()?;
    Pattern::new(plan.operator, l.operator, r.operator).ok()
}

/// `cost + C` for the pattern at the root of `plan`, falling back to the
/// largest bound in the table for unseen patterns and leaves.
pub fn latency_upper_bound(plan: &PlanNode, cost: f64, table: &BoundTable) -> Result<f64, CpError> {
    Ok(cost + table.bound_for(extract_pattern(plan).as_ref())?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMode {
    Vanilla,
    #[serde(rename = "cp")]
    CpGuided,
}

impl FromStr for SearchMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vanilla" => Ok(SearchMode::Vanilla),
            "cp" | "cp-guided" => Ok(SearchMode::CpGuided),
            other => Err(format!("unknown search mode {other:?} (expected vanilla or cp)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub beam_size: usize,
    /// Number of complete plans to collect before stopping.
    pub n: usize,
    pub mode: SearchMode,
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), PlanError> {
        if self.beam_size == 0 {
            return Err(PlanError::BadConfig("beam_size must be at least 1".into()));
        }
        if self.n == 0 {
            return Err(PlanError::BadConfig("n must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchState {
    /// Partial plans with disjoint relation sets, ordered by relation set.
    pub partials: Vec<Arc<PlanNode>>,
    /// Accumulated predicted cost of every join built so far.
    pub predicted_cost: f64,
    /// Priority key: the predicted cost in vanilla mode, `U` in guided mode.
    pub latency_ub: f64,
    /// Joins in the order they were built.
    pub steps: Vec<Arc<PlanNode>>,
    /// Per-step predicted costs, aligned with `steps`.
    pub step_costs: Vec<f64>,
}

impl SearchState {
    /// One sequential scan per relation.
    pub fn initial(query: &QuerySpec) -> Result<Self, PlanError> {
        let mut partials = query
            .relations
            .iter()
            .map(|r| PlanNode::scan(Operator::SS, r.name.clone()).map(Arc::new))
            .collect::<Result<Vec<_>, _>>()?;
        partials.sort_by(|a, b| a.relations.cmp(&b.relations));
        Ok(SearchState {
            partials,
            predicted_cost: 0.0,
            latency_ub: 0.0,
            steps: Vec::new(),
            step_costs: Vec::new(),
        })
    }

    pub fn is_complete(&self, query: &QuerySpec) -> bool {
        self.partials.len() == 1 && self.partials[0].relations.len() == query.relations.len()
    }

    /// The most recently built join, if any.
    pub fn latest(&self) -> Option<&Arc<PlanNode>> {
        self.steps.last()
    }
}

/// Every successor of `state`: each joinable pair of partials, each join
/// operator, and both child orders. Enumeration is ordered by the pair's
/// relation sets, then operator code, then order flag.
pub fn explore(
    predictor: &dyn CostPredictor,
    state: &SearchState,
    query: &QuerySpec,
) -> Vec<(SearchState, f64)> {
    let mut joins = Operator::JOINS;
    joins.sort_by_key(|op| op.code());
    let mut out = Vec::new();
    let parts = &state.partials;
    for i in 0..parts.len() {
        for j in i + 1..parts.len() {
            if !query.joinable(&parts[i].relations, &parts[j].relations) {
                continue;
            }
            for op in joins {
                for swapped in [false, true] {
                    let (l, r) = if swapped { (j, i) } else { (i, j) };
                    let node = Arc::new(
                        PlanNode::join(op, parts[l].clone(), parts[r].clone())
                            .expect("partials are disjoint"),
                    );
                    let cost = predictor.predict(&node, query);
                    let mut partials: Vec<_> = parts
                        .iter()
                        .enumerate()
                        .filter(|&(k, _)| k != i && k != j)
                        .map(|(_, p)| p.clone())
                        .collect();
                    let pos = partials
                        .binary_search_by(|p| p.relations.cmp(&node.relations))
                        .unwrap_or_else(|e| e);
                    partials.insert(pos, node.clone());
                    let mut steps = state.steps.clone();
                    steps.push(node);
                    let mut step_costs = state.step_costs.clone();
                    step_costs.push(cost);
                    let predicted_cost = state.predicted_cost + cost;
                    out.push((
                        SearchState {
                            partials,
                            predicted_cost,
                            latency_ub: predicted_cost,
                            steps,
                            step_costs,
                        },
                        cost,
                    ));
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
struct Ranked {
    state: SearchState,
    seq: u64,
}

fn rank_cmp(a: &Ranked, b: &Ranked) -> Ordering {
    a.state
        .latency_ub
        .total_cmp(&b.state.latency_ub)
        .then(a.state.predicted_cost.total_cmp(&b.state.predicted_cost))
        .then(a.seq.cmp(&b.seq))
}

/// The two hooks a search strategy provides to the search core.
trait Frontier {
    fn select_next(&mut self) -> Option<Ranked>;
    fn insert(&mut self, candidates: Vec<Ranked>);
}

/// Keeps the best `beam_size` states by `(key, predicted cost, sequence)`.
struct Beam {
    items: Vec<Ranked>,
    beam_size: usize,
}

impl Frontier for Beam {
    fn select_next(&mut self) -> Option<Ranked> {
        (!self.items.is_empty()).then(|| self.items.remove(0))
    }

    fn insert(&mut self, candidates: Vec<Ranked>) {
        self.items.extend(candidates);
        self.items.sort_by(rank_cmp);
        self.items.truncate(self.beam_size);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletePlan {
    pub plan: Arc<PlanNode>,
    pub predicted_cost: f64,
    /// The key the plan was ranked by.
    pub key: f64,
    pub steps: Vec<Arc<PlanNode>>,
    pub step_costs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub best: CompletePlan,
    /// Complete plans in the order they were reached.
    pub complete: Vec<CompletePlan>,
    /// Number of states passed to `explore`.
    pub expansions: usize,
}

fn run_search(
    predictor: &dyn CostPredictor,
    query: &QuerySpec,
    config: &SearchConfig,
    key: &dyn Fn(&SearchState) -> Result<f64, CpError>,
) -> Result<SearchOutcome, PlanError> {
    config.validate()?;
    query.validate()?;
    let mut seq = 0u64;
    let mut beam = Beam {
        items: Vec::new(),
        beam_size: config.beam_size,
    };
    let mut start = SearchState::initial(query)?;
    start.latency_ub = key(&start)?;
    beam.insert(vec![Ranked { state: start, seq }]);
    let mut complete: Vec<Ranked> = Vec::new();
    let mut expansions = 0;
    while complete.len() < config.n {
        let Some(next) = beam.select_next() else {
            break;
        };
        if next.state.is_complete(query) {
            complete.push(next);
            continue;
        }
        expansions += 1;
        let mut ranked = Vec::new();
        for (mut state, _) in explore(predictor, &next.state, query) {
            seq += 1;
            state.latency_ub = key(&state)?;
            ranked.push(Ranked { state, seq });
        }
        beam.insert(ranked);
    }
    let to_plan = |r: &Ranked| CompletePlan {
        plan: r.state.partials[0].clone(),
        predicted_cost: r.state.predicted_cost,
        key: r.state.latency_ub,
        steps: r.state.steps.clone(),
        step_costs: r.state.step_costs.clone(),
    };
    let best = complete
        .iter()
        .min_by(|a, b| rank_cmp(a, b))
        .map(to_plan)
        .ok_or(PlanError::NoCompletePlan)?;
    Ok(SearchOutcome {
        best,
        complete: complete.iter().map(to_plan).collect(),
        expansions,
    })
}

/// Beam search ranked by accumulated predicted cost.
pub fn beam_search(
    predictor: &dyn CostPredictor,
    query: &QuerySpec,
    config: &SearchConfig,
) -> Result<SearchOutcome, PlanError> {
    if config.mode != SearchMode::Vanilla {
        return Err(PlanError::BadConfig("beam_search needs vanilla mode".into()));
    }
    run_search(predictor, query, config, &|s| Ok(s.predicted_cost))
}

/// Beam search ranked by `U = accumulated cost + C` of the latest join's pattern.
pub fn cp_guided_search(
    predictor: &dyn CostPredictor,
    query: &QuerySpec,
    config: &SearchConfig,
    table: &BoundTable,
) -> Result<SearchOutcome, PlanError> {
    if config.mode != SearchMode::CpGuided {
        return Err(PlanError::BadConfig("cp_guided_search needs cp mode".into()));
    }
    table.fallback_max()?;
    run_search(predictor, query, config, &|s| match s.latest() {
        Some(node) => latency_upper_bound(node, s.predicted_cost, table),
        None => Ok(s.predicted_cost + table.fallback_max()?),
    })
}

/// Dispatches on `config.mode`; guided mode requires a table.
pub fn search(
    predictor: &dyn CostPredictor,
    query: &QuerySpec,
    config: &SearchConfig,
    table: Option<&BoundTable>,
) -> Result<SearchOutcome, PlanError> {
    match (config.mode, table) {
        (SearchMode::Vanilla, _) => beam_search(predictor, query, config),
        (SearchMode::CpGuided, Some(t)) => cp_guided_search(predictor, query, config, t),
        (SearchMode::CpGuided, None) => Err(PlanError::BadConfig(
            "cp mode needs a bound table".into(),
        )),
    }
}

/// Deterministic stand-in for a traditional optimizer: repeatedly hash-join
/// the joinable pair with the fewest output rows, smaller input on the left,
/// over sequential scans.
pub fn fallback_plan(query: &QuerySpec) -> Result<PlanNode, PlanError> {
    query.validate()?;
    let mut parts = SearchState::initial(query)?.partials;
    while parts.len() > 1 {
        let mut best: Option<(f64, f64, usize, usize)> = None;
        for i in 0..parts.len() {
            for j in i + 1..parts.len() {
                if !query.joinable(&parts[i].relations, &parts[j].relations) {
                    continue;
                }
                let union = parts[i].relations.union(&parts[j].relations).cloned().collect();
                let out = query.output_rows(&union);
                let inputs = query.output_rows(&parts[i].relations)
                    + query.output_rows(&parts[j].relations);
                let better = match best {
                    None => true,
                    Some((bo, bi, _, _)) => (out, inputs) < (bo, bi),
                };
                if better {
                    best = Some((out, inputs, i, j));
                }
            }
        }
        let (_, _, i, j) = best.ok_or(PlanError::Disconnected)?;
        let (a, b) = (parts[i].clone(), parts[j].clone());
        let (l, r) = if query.output_rows(&b.relations) < query.output_rows(&a.relations) {
            (b, a)
        } else {
            (a, b)
        };
        let node = Arc::new(PlanNode::join(Operator::HJ, l, r)?);
        parts.remove(j);
        parts.remove(i);
        parts.push(node);
        parts.sort_by(|a, b| a.relations.cmp(&b.relations));
    }
    Ok((*parts[0]).clone())
}

/// Checks that `plan` is a binary join tree covering every query relation once.
pub fn validate_plan(plan: &PlanNode, query: &QuerySpec) -> Result<(), PlanError> {
    fn walk(node: &PlanNode, query: &QuerySpec, seen: &mut Vec<String>) -> Result<(), PlanError> {
        match node.children() {
            None => {
                if !node.operator.is_scan() {
                    return Err(PlanError::NotAScan(node.operator));
                }
                let rel = node.relations.iter().next().expect("leaf has a relation");
                if query.cardinality(rel).is_none() {
                    return Err(PlanError::UnknownRelation(rel.clone()));
                }
                seen.push(rel.clone());
            }
            Some((l, r)) => {
                if !node.operator.is_join() {
                    return Err(PlanError::NotAJoin(node.operator));
                }
                walk(l, query, seen)?;
                walk(r, query, seen)?;
            }
        }
        Ok(())
    }
    let mut seen = Vec::new();
    walk(plan, query, &mut seen)?;
    seen.sort();
    let expected: Vec<String> = query.relation_names().into_iter().collect();
    if seen != expected {
        return Err(PlanError::Coverage {
            found: seen,
            expected,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifiedPlan {
    /// The plan that is executed: the searched plan, or the fallback.
    pub plan: Arc<PlanNode>,
    pub searched: CompletePlan,
    /// Verdicts up to and including the first violation.
    pub verdicts: Vec<VerificationVerdict>,
    pub used_fallback: bool,
}

/// Searches, then monitors the winning construction sequence step by step.
/// At step `tau` the observed actual latencies of steps `0..=tau` plus the
/// predicted cost of step `tau + 1` form the trajectory estimate; the first
/// verdict that is not guaranteed discards the plan in favour of
/// `fallback_plan`. The fallback itself is not re-checked.
#[allow(clippy::too_many_arguments)]
pub fn plan_with_verification(
    predictor: &dyn CostPredictor,
    query: &QuerySpec,
    config: &SearchConfig,
    table: Option<&BoundTable>,
    spec: &StlSpec,
    bound: &UpperBound,
    model: &LatencyModel,
    seed: u64,
) -> Result<VerifiedPlan, PlanError> {
    let outcome = search(predictor, query, config, table)?;
    let searched = outcome.best;
    let nodes: Vec<&PlanNode> = searched.steps.iter().map(|n| n.as_ref()).collect();
    let actual = step_latencies(&nodes, query, model, seed);
    let mut verdicts = Vec::new();
    for tau in 0..actual.len().saturating_sub(1) {
        let est = trajectory_estimate_from(&actual[..=tau], searched.step_costs[tau + 1])?;
        let verdict = verify_step(spec, &est, bound)?;
        verdicts.push(verdict);
        if !verdict.guaranteed {
            return Ok(VerifiedPlan {
                plan: Arc::new(fallback_plan(query)?),
                searched,
                verdicts,
                used_fallback: true,
            });
        }
    }
    Ok(VerifiedPlan {
        plan: searched.plan.clone(),
        searched,
        verdicts,
        used_fallback: false,
    })
}
