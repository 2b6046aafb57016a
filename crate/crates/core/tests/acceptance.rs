//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use lqo_cp::adaptive::adjust_delta;
use lqo_cp::cp::{
    interval_around, latency_interval, min_calibration_size, pattern_upper_bounds,
    quantile_upper_bound, BoundTable, ScoreSet,
};
use lqo_cp::harness::{
    exchangeable_workload, measured_tv, run_sampling_experiment, runtime_verification_experiment,
    shift_experiment_scores, ExperimentConfig,
};
use lqo_cp::search::{
    beam_search, cp_guided_search, plan_with_verification, search, QuerySpec, SearchConfig,
    SearchMode,
};
use lqo_cp::sim::{
    derive_seed, generate_queries, make_predictor, random_plan_workload, true_latency,
    JoinGraphStyle, LatencyModel, SchemaSpec, SimPredictor,
};
use lqo_cp::stl::{pooled_robustness_scores, ScorePooling, StlSpec};
use lqo_cp::trace::{Operator, Pattern, Workload};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Runs one criterion, adding a runtime limit check when given.
fn check(id: u32, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let mut o = f();
    let elapsed = start.elapsed();
    if let Some(limit) = limit {
        if elapsed > limit {
            o.pass = false;
            o.detail += &format!("; runtime {:.1}s exceeds {}s", elapsed.as_secs_f64(), limit.as_secs());
        }
    }
    println!(
        "criterion {id:>2} {}: {name}: {} ({:.2}s)",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        elapsed.as_secs_f64()
    );
    o.pass
}

/// `ceil((k + 1) * (100 - d) / 100)`-th smallest, or infinity past the end.
fn oracle_bound(scores: &[f64], percent: usize) -> f64 {
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = ((s.len() + 1) * (100 - percent)).div_ceil(100);
    if rank > s.len() {
        f64::INFINITY
    } else {
        s[rank - 1]
    }
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let deltas = [5usize, 10, 20, 50];
    let mut mismatches = 0;
    for _ in 0..1000 {
        let k = rng.random_range(1..=200);
        let percent = deltas[rng.random_range(0..deltas.len())];
        let scores: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1000.0)).collect();
        let got = quantile_upper_bound(&ScoreSet::new(scores.clone()).unwrap(), percent as f64 / 100.0)
            .unwrap()
            .value;
        if got != oracle_bound(&scores, percent) {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches} mismatches in 1000 score sets"))
}

fn criterion_2() -> Outcome {
    let bound = |k: usize, delta: f64| {
        let scores: Vec<f64> = (0..k).map(|i| i as f64 + 1.0).collect();
        quantile_upper_bound(&ScoreSet::new(scores).unwrap(), delta).unwrap().value
    };
    let c8 = bound(8, 0.1);
    let c9 = bound(9, 0.1);
    let mut failures = 0;
    for percent in [5usize, 10, 20, 50] {
        let delta = percent as f64 / 100.0;
        // K >= (100 - d) / d in integers.
        let min_k = (100 - percent).div_ceil(percent);
        if min_calibration_size(delta).unwrap() != min_k {
            failures += 1;
        }
        for k in 0..=30 {
            if bound(k, delta).is_finite() != (k >= min_k) {
                failures += 1;
            }
        }
    }
    outcome(
        c8 == f64::INFINITY && c9.is_finite() && failures == 0,
        format!("K=8 -> {c8}, K=9 -> {c9}, sweep failures {failures}"),
    )
}

fn criterion_3() -> Outcome {
    let unified: Vec<String> = [60.0, 100.0, 150.0]
        .iter()
        .map(|&c| interval_around(c, 10.0).to_string())
        .collect();
    let hj: Pattern = "HJ|SS|SS".parse().unwrap();
    let table = BoundTable::from_entries(0.1, [(hj, 5.0)]);
    let pattern = interval_around(60.0, table.bound_for(Some(&hj)).unwrap()).to_string();
    let ub = quantile_upper_bound(&ScoreSet::new(vec![10.0; 20]).unwrap(), 0.1).unwrap();
    let via_bound = latency_interval(60.0, &ub).to_string();
    let pass = unified == ["[50, 70]", "[90, 110]", "[140, 160]"]
        && pattern == "[55, 65]"
        && via_bound == "[50, 70]";
    outcome(pass, format!("unified {unified:?}, pattern {pattern}"))
}

fn criterion_4() -> Outcome {
    let w = exchangeable_workload(200, 100.0, 4);
    let cfg = ExperimentConfig {
        iterations: 1000,
        delta: 0.1,
        seed: 4,
        ..ExperimentConfig::default()
    };
    let r = run_sampling_experiment(&w, &cfg).unwrap();
    let target = 91.0 / 101.0;
    let peak = r.peak.unwrap();
    let k = r.k_values[0];
    outcome(
        k == 100 && (r.mean - target).abs() <= 0.01 && peak >= 0.90,
        format!("K={k}, mean EC {:.4} (target {target:.4}), KDE peak {peak:.4}", r.mean),
    )
}

fn criterion_5() -> Outcome {
    let a = adjust_delta(0.2, 300, 0.08);
    let mut exact = true;
    for k in [1usize, 4, 9, 50, 300, 1000] {
        for delta in [0.05, 0.1, 0.2, 0.5] {
            let expected = 1.0 - f64::min(1.0, (1.0 + 1.0 / k as f64) * (1.0 - delta));
            if adjust_delta(delta, k, 0.0).delta_tilde != expected {
                exact = false;
            }
        }
    }
    outcome(
        (a.delta_tilde - 0.117067).abs() <= 1e-6 && exact,
        format!("delta~ = {:.6}, epsilon=0 reduction exact: {exact}", a.delta_tilde),
    )
}

fn half_normal_pool(n: usize, scale: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z.abs()
        })
        .collect()
}

fn criterion_6() -> Outcome {
    let cal = half_normal_pool(1_000_000, 1.0, 61);
    let test = half_normal_pool(1_000_000, 1.15, 62);
    let cfg = ExperimentConfig {
        iterations: 1000,
        delta: 0.1,
        seed: 6,
        ..ExperimentConfig::default()
    };
    let (k, n_test) = (300, 100);
    let tv = measured_tv(&cal, &test, derive_seed(cfg.seed, u64::MAX)).unwrap();
    let epsilon = (tv * 100.0).ceil() / 100.0;
    let s = shift_experiment_scores(&cal, &test, k, n_test, 0.1, epsilon, &cfg).unwrap();
    let draws = cfg.iterations * n_test;
    outcome(
        s.tv <= s.epsilon && s.cov_c <= 0.9 - 0.03 && s.cov_c_tilde >= 0.9 - 0.02 && draws >= 100_000,
        format!(
            "tv {:.4} <= epsilon {:.2}, delta~ {:.4}, coverage C {:.4}, C~ {:.4} over {draws} draws",
            s.tv, s.epsilon, s.adjusted.delta_tilde, s.cov_c, s.cov_c_tilde
        ),
    )
}

/// Threshold at the 80th percentile of total true latency.
fn percentile_80(w: &Workload) -> f64 {
    let mut totals: Vec<f64> = w.traces.iter().map(|t| t.total_latency()).collect();
    totals.sort_by(f64::total_cmp);
    totals[(totals.len() * 4).div_ceil(5) - 1]
}

fn criterion_7() -> Outcome {
    let schema = SchemaSpec {
        relation_count: 5,
        cardinality_range: (100, 100_000),
        join_graph_style: JoinGraphStyle::Random(0.3),
    };
    let model = LatencyModel::default();
    let predictor = make_predictor(&model, BTreeMap::new(), 71).with_jitter(0.1);
    let queries = generate_queries(&schema, 200, 72).unwrap();
    let w = random_plan_workload(&queries, &predictor, &model, 73).unwrap();
    let spec = StlSpec::latency_budget(percentile_80(&w));
    let splits = 100;
    let mean_over = |pooling: ScorePooling| {
        let (mut a, mut b, mut guaranteed) = (0.0, 0.0, 0);
        for s in 0..splits {
            let cfg = ExperimentConfig {
                seed: derive_seed(7, s),
                pooling,
                ..ExperimentConfig::default()
            };
            let st = runtime_verification_experiment(&w, &spec, 0.1, &cfg).unwrap();
            a += st.covered_fraction;
            b += st.guaranteed_satisfied_fraction;
            guaranteed += st.guaranteed_queries;
        }
        let n = splits as f64;
        (a / n, b / n, guaranteed as f64 / n)
    };
    let (a, b, g) = mean_over(ScorePooling::QueryMax);
    let (pa, pb, _) = mean_over(ScorePooling::PerStep);
    outcome(
        a >= 0.88 && b >= 0.88 && g > 0.0,
        format!(
            "spec {spec}, mean over {splits} splits: (a) {a:.3}, (b) {b:.3}, {g:.1} guaranteed queries per split; per-step pooling gives (a) {pa:.3}, (b) {pb:.3}"
        ),
    )
}

fn criterion_8() -> Outcome {
    let schema = SchemaSpec {
        relation_count: 5,
        cardinality_range: (1000, 30_000),
        join_graph_style: JoinGraphStyle::Random(0.3),
    };
    let model = LatencyModel::default();
    let nl: Pattern = "NL|SS|SS".parse().unwrap();
    let predictor = make_predictor(&model, BTreeMap::from([(nl, 0.2)]), 81);
    let vanilla_cfg = SearchConfig {
        beam_size: 8,
        n: 4,
        mode: SearchMode::Vanilla,
    };
    let cp_cfg = SearchConfig {
        mode: SearchMode::CpGuided,
        ..vanilla_cfg
    };
    let queries = generate_queries(&schema, 100, 82).unwrap();

    // (a) one entry: every key shifts by the same constant.
    let single = BoundTable::from_entries(0.1, [(nl, 37.5)]);
    let mut identical = 0;
    for q in &queries {
        let v = beam_search(&predictor, q, &vanilla_cfg).unwrap();
        let c = cp_guided_search(&predictor, q, &cp_cfg, &single).unwrap();
        if v.best.plan == c.best.plan && v.expansions == c.expansions {
            identical += 1;
        }
    }

    // (b) pattern bounds from random-plan calibration traces.
    let cal_queries = generate_queries(&schema, 1000, 83).unwrap();
    let cal = random_plan_workload(&cal_queries, &predictor, &model, 84).unwrap();
    let table = pattern_upper_bounds(cal.steps(), 0.1).unwrap();
    let (mut vanilla, mut guided) = (0.0, 0.0);
    for (i, q) in queries.iter().enumerate() {
        let v = beam_search(&predictor, q, &vanilla_cfg).unwrap();
        let c = cp_guided_search(&predictor, q, &cp_cfg, &table).unwrap();
        let seed = derive_seed(85, i as u64);
        vanilla += true_latency(&v.best.plan, q, &model, seed).iter().sum::<f64>();
        guided += true_latency(&c.best.plan, q, &model, seed).iter().sum::<f64>();
    }
    let n = queries.len() as f64;
    outcome(
        identical == queries.len() && guided < vanilla,
        format!(
            "(a) {identical}/{} identical plans and expansion counts; (b) mean true latency vanilla {:.1}, guided {:.1}",
            queries.len(),
            vanilla / n,
            guided / n
        ),
    )
}

fn renamed(queries: Vec<QuerySpec>, prefix: &str) -> Vec<QuerySpec> {
    queries
        .into_iter()
        .map(|mut q| {
            q.id = format!("{prefix}{}", q.id);
            q
        })
        .collect()
}

fn criterion_9() -> Outcome {
    let model = LatencyModel::default();
    let all_ops: Vec<Operator> = Operator::JOINS.into_iter().chain(Operator::SCANS).collect();
    let nl_patterns: BTreeMap<Pattern, f64> = all_ops
        .iter()
        .flat_map(|&l| all_ops.iter().map(move |&r| (l, r)))
        .map(|(l, r)| (Pattern::new(Operator::NL, l, r).unwrap(), 0.01))
        .collect();
    let predictor: SimPredictor = make_predictor(&model, nl_patterns, 91);
    let normal = SchemaSpec {
        relation_count: 5,
        cardinality_range: (10, 300),
        join_graph_style: JoinGraphStyle::Chain,
    };
    let pathological = SchemaSpec {
        cardinality_range: (20_000, 200_000),
        ..normal
    };
    let cal_queries = renamed(generate_queries(&normal, 200, 92).unwrap(), "cal-");
    let cal = random_plan_workload(&cal_queries, &predictor, &model, 93).unwrap();
    let mut totals: Vec<f64> = cal.traces.iter().map(|t| t.total_latency()).collect();
    totals.sort_by(f64::total_cmp);
    let spec = StlSpec::latency_budget(totals[(totals.len() * 19).div_ceil(20) - 1]);
    let scores = pooled_robustness_scores(&cal, &spec, ScorePooling::QueryMax).unwrap();
    let bound = quantile_upper_bound(&scores, 0.1).unwrap();

    let mut test = renamed(generate_queries(&normal, 40, 94).unwrap(), "n-");
    test.extend(renamed(generate_queries(&pathological, 10, 95).unwrap(), "p-"));
    let cfg = SearchConfig {
        beam_size: 8,
        n: 4,
        mode: SearchMode::Vanilla,
    };
    let (mut without, mut with) = (0.0, 0.0);
    let (mut flagged, mut flagged_fallback, mut flagged_pathological) = (0, 0, 0);
    for (i, q) in test.iter().enumerate() {
        let seed = derive_seed(96, i as u64);
        let searched = search(&predictor, q, &cfg, None).unwrap().best;
        let searched_latency: Vec<f64> = true_latency(&searched.plan, q, &model, seed);
        without += searched_latency.iter().sum::<f64>();
        let v = plan_with_verification(&predictor, q, &cfg, None, &spec, &bound, &model, seed).unwrap();
        let is_flagged = v.verdicts.iter().any(|d| !d.guaranteed);
        if is_flagged {
            flagged += 1;
            flagged_fallback += usize::from(v.used_fallback);
            flagged_pathological += usize::from(q.id.starts_with("p-"));
            // Steps executed before the violation are paid for.
            let sunk: f64 = searched_latency[..v.verdicts.len()].iter().sum();
            with += sunk + true_latency(&v.plan, q, &model, derive_seed(seed, 1)).iter().sum::<f64>();
        } else {
            with += searched_latency.iter().sum::<f64>();
        }
    }
    outcome(
        with < without && flagged > 0 && flagged_fallback == flagged,
        format!(
            "spec {spec}, C {:.1}; total latency without {without:.0}, with {with:.0}; {flagged} flagged ({flagged_pathological} pathological), {flagged_fallback} used the fallback",
            bound.value
        ),
    )
}

fn run_cli(cwd: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_lqo-cp"))
        .current_dir(cwd)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

const PIPELINE: &[&[&str]] = &[
    &["--seed", "5", "--output-dir", "gen", "gen", "--queries", "80", "--relations", "4", "--jitter", "0.1"],
    &["--output-dir", "cal", "calibrate", "--input", "gen/traces.jsonl"],
    &["--output-dir", "bound", "bound", "--table", "cal/bounds.json", "--trace", "gen/traces.jsonl"],
    &["--seed", "5", "--output-dir", "verify", "verify", "--input", "gen/traces.jsonl", "--spec", "G(x<5000)"],
    &["--output-dir", "search", "search", "--setup", "gen/setup.json", "--table", "cal/bounds.json"],
    &["--seed", "5", "--output-dir", "coverage", "coverage", "--input", "gen/traces.jsonl", "--iterations", "100"],
    &["--seed", "5", "--output-dir", "shift", "shift", "--epsilon", "0.5", "--shift", "0.2", "--queries", "100", "--k", "100", "--n-test", "100", "--iterations", "100"],
];

/// Relative path and contents of every file under `dir`.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn criterion_10() -> Outcome {
    let attempt = || -> Result<Outcome, String> {
        let first = tempfile::tempdir().map_err(|e| e.to_string())?;
        let second = tempfile::tempdir().map_err(|e| e.to_string())?;
        for dir in [first.path(), second.path()] {
            for args in PIPELINE {
                run_cli(dir, args)?;
            }
        }
        let a = snapshot(first.path());
        let b = snapshot(second.path());
        let mut replay_diffs = 0;
        for stage in ["gen", "cal", "bound", "verify", "search", "coverage", "shift"] {
            run_cli(first.path(), &["replay", &format!("{stage}/manifest.json")])?;
        }
        let replayed = snapshot(first.path());
        for (name, bytes) in &a {
            if replayed.get(name) != Some(bytes) {
                replay_diffs += 1;
            }
        }
        let same = a == b;
        Ok(outcome(
            same && replay_diffs == 0 && a.len() > PIPELINE.len(),
            format!(
                "{} files; reruns identical: {same}; files changed by replay: {replay_diffs}",
                a.len()
            ),
        ))
    };
    attempt().unwrap_or_else(|e| outcome(false, e))
}

fn main() -> ExitCode {
    let secs = |s| Some(Duration::from_secs(s));
    let results = [
        check(1, "quantile oracle", secs(5), criterion_1),
        check(2, "calibration size boundary", None, criterion_2),
        check(3, "worked intervals", None, criterion_3),
        check(4, "marginal coverage", secs(60), criterion_4),
        check(5, "adjusted delta", None, criterion_5),
        check(6, "coverage under shift", secs(120), criterion_6),
        check(7, "runtime verification soundness", secs(60), criterion_7),
        check(8, "guided search equivalence and gain", secs(120), criterion_8),
        check(9, "violation fallback", secs(30), criterion_9),
        check(10, "CLI determinism", None, criterion_10),
    ];
    let failed = results.iter().filter(|&&p| !p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
