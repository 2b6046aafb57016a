//! Command-line front end.
//!
//! Every subcommand writes `manifest.json` into `--output-dir` with the full
//! argument vector, the resolved configuration and SHA-256 digests of every
//! input and output file. `lqo-cp replay <manifest>` reruns it.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 failed
//! precondition, 4 I/O error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adaptive::{adjusted_upper_bound, ShiftConfig, ShiftError};
use crate::cp::{
    interval_around, nonconformity_scores, quantile_upper_bound, BoundTable, CpError,
    LatencyInterval, ScoreSet,
};
use crate::harness::{
    coverage_csv, density_csv, exchangeable_workload, kde_density_curve,
    run_sampling_experiment, runtime_verification_experiment, shift_csv, shift_experiment_scores,
    verification_csv, ExperimentConfig, Granularity, HarnessError,
};
use crate::search::{search, PlanError, QuerySpec, SearchConfig, SearchMode};
use crate::sim::{
    derive_seed, generate_queries, make_predictor, random_plan_workload, shifted_model,
    true_latency, JoinGraphStyle, LatencyModel, SchemaSpec, SimError,
};
use crate::stl::{ScorePooling, StlError, StlSpec};
use crate::trace::{parse_workload, serialize_workload, Format, Pattern, TraceError, Workload};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Precondition(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Precondition(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<TraceError> for CliError {
    fn from(e: TraceError) -> Self {
        match e {
            TraceError::TooFewTraces(_) | TraceError::EmptyTrace => CliError::Precondition(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<CpError> for CliError {
    fn from(e: CpError) -> Self {
        match e {
            CpError::EmptyTable => CliError::Precondition(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<StlError> for CliError {
    fn from(e: StlError) -> Self {
        match e {
            StlError::Parse { .. } | StlError::BadWindow { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Precondition(e.to_string()),
        }
    }
}

impl From<ShiftError> for CliError {
    fn from(e: ShiftError) -> Self {
        match e {
            ShiftError::BadDelta(_) | ShiftError::BadEpsilon(_) => CliError::Usage(e.to_string()),
            _ => CliError::Precondition(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Plan(p) => p.into(),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<PlanError> for CliError {
    fn from(e: PlanError) -> Self {
        match e {
            PlanError::NoCompletePlan => CliError::Precondition(e.to_string()),
            PlanError::Cp(c) => c.into(),
            PlanError::Stl(s) => s.into(),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Trace(t) => t.into(),
            HarnessError::Cp(c) => c.into(),
            HarnessError::Stl(s) => s.into(),
            HarnessError::Shift(s) => s.into(),
            HarnessError::BadConfig(_) => CliError::Usage(e.to_string()),
            _ => CliError::Precondition(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Json,
    Csv,
}

#[derive(Debug, Parser, Serialize)]
#[command(name = "lqo-cp", version, about = "Conformal latency bounds and runtime verification for plan traces")]
pub struct Cli {
    /// Master seed; every random stream derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Directory for output files and manifest.json.
    #[arg(long, global = true, default_value = ".")]
    pub output_dir: PathBuf,

    /// Encoding of trace files written by `gen` (json means JSON lines).
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Json)]
    pub format: OutputFormat,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Generate synthetic queries and traces of random plans.
    Gen(GenArgs),
    /// Build a bound table from calibration traces.
    Calibrate(CalibrateArgs),
    /// Print latency intervals for predicted costs.
    Bound(BoundArgs),
    /// Calibrate robustness bounds and monitor test queries against a spec.
    Verify(VerifyArgs),
    /// Plan queries with vanilla and/or bound-guided beam search.
    Search(SearchArgs),
    /// Repeated-sampling empirical coverage.
    Coverage(CoverageArgs),
    /// Coverage under distribution shift with plain and adjusted bounds.
    Shift(ShiftArgs),
    /// Rerun the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SimArgs {
    /// Relations per query.
    #[arg(long, default_value_t = 5)]
    pub relations: usize,
    /// Join graph: chain, star or random:<p>.
    #[arg(long, default_value = "chain", value_parser = parse_graph)]
    pub graph: JoinGraphStyle,
    #[arg(long, default_value_t = 100)]
    pub card_min: u64,
    #[arg(long, default_value_t = 100_000)]
    pub card_max: u64,
    /// Latency model JSON; flags below override its fields.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Lognormal noise sigma of actual latencies.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Actual-latency bias, PATTERN=FACTOR (e.g. NL|SS|SS=3); repeatable.
    #[arg(long = "model-bias", value_parser = parse_bias)]
    pub model_bias: Vec<(Pattern, f64)>,
    /// Predictor bias, PATTERN=FACTOR; repeatable.
    #[arg(long = "bias", value_parser = parse_bias)]
    pub predictor_bias: Vec<(Pattern, f64)>,
    /// Lognormal sigma of per-node predictor jitter.
    #[arg(long, default_value_t = 0.0)]
    pub jitter: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct GenArgs {
    #[arg(long, default_value_t = 100)]
    pub queries: usize,
    #[command(flatten)]
    pub sim: SimArgs,
    /// Multiply noise sigma and latency scale by 1 + shift.
    #[arg(long, default_value_t = 0.0)]
    pub shift: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibrationMode {
    Unified,
    Pattern,
}

#[derive(Debug, Args, Serialize)]
pub struct CalibrateArgs {
    /// Calibration traces (.jsonl or .csv).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub delta: f64,
    #[arg(long, value_enum, default_value_t = CalibrationMode::Pattern)]
    pub mode: CalibrationMode,
}

#[derive(Debug, Args, Serialize)]
pub struct BoundArgs {
    /// Bound table written by `calibrate`.
    #[arg(long, conflicts_with = "c")]
    pub table: Option<PathBuf>,
    /// A bound value to use instead of a table.
    #[arg(long)]
    pub c: Option<f64>,
    /// Predicted costs; repeatable.
    #[arg(long, conflicts_with = "trace")]
    pub cost: Vec<f64>,
    /// Pattern for `--cost` lookups in a pattern table.
    #[arg(long, value_parser = parse_pattern)]
    pub pattern: Option<Pattern>,
    /// Traces: one interval per step, written to intervals.csv.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct VerifyArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// STL spec, e.g. "G(x<1000)".
    #[arg(long)]
    pub spec: String,
    #[arg(long, default_value_t = 0.1)]
    pub delta: f64,
    #[arg(long, default_value_t = 0.5)]
    pub calibration_fraction: f64,
    /// Score pooling: per-step or query-max.
    #[arg(long, default_value = "query-max")]
    pub pooling: ScorePooling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchModeArg {
    Vanilla,
    Cp,
    Both,
}

#[derive(Debug, Args, Serialize)]
pub struct SearchArgs {
    /// setup.json written by `gen`.
    #[arg(long)]
    pub setup: PathBuf,
    /// Only this query.
    #[arg(long)]
    pub query_id: Option<String>,
    #[arg(long, value_enum, default_value_t = SearchModeArg::Both)]
    pub mode: SearchModeArg,
    #[arg(long, default_value_t = 8)]
    pub beam: usize,
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    /// Bound table for cp mode.
    #[arg(long)]
    pub table: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct CoverageArgs {
    /// Traces; without it, single-step traces with i.i.d. scores are generated.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Size of the generated workload when no input is given.
    #[arg(long, default_value_t = 200)]
    pub synthetic: usize,
    #[arg(long, default_value_t = 1000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0.1)]
    pub delta: f64,
    #[arg(long, default_value_t = 0.5)]
    pub calibration_fraction: f64,
    #[arg(long, default_value = "unified", value_parser = parse_granularity)]
    pub granularity: Granularity,
    #[arg(long)]
    pub with_replacement: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct ShiftArgs {
    /// Calibration traces; with `--test`. Without both, workloads are simulated.
    #[arg(long, requires = "test")]
    pub cal: Option<PathBuf>,
    #[arg(long, requires = "cal")]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 0.1)]
    pub delta: f64,
    /// Calibration scores per iteration.
    #[arg(long, default_value_t = 300)]
    pub k: usize,
    /// Test scores per iteration.
    #[arg(long, default_value_t = 300)]
    pub n_test: usize,
    #[arg(long, default_value_t = 1000)]
    pub iterations: usize,
    /// Simulated queries per side.
    #[arg(long, default_value_t = 400)]
    pub queries: usize,
    #[command(flatten)]
    pub sim: SimArgs,
    /// Shift applied to the simulated test side.
    #[arg(long, default_value_t = 0.0)]
    pub shift: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
}

fn parse_graph(s: &str) -> Result<JoinGraphStyle, String> {
    s.parse()
}

fn parse_granularity(s: &str) -> Result<Granularity, String> {
    s.parse()
}

fn parse_pattern(s: &str) -> Result<Pattern, String> {
    s.parse().map_err(|e: TraceError| e.to_string())
}

fn parse_bias(s: &str) -> Result<(Pattern, f64), String> {
    let (p, f) = s
        .split_once('=')
        .ok_or_else(|| format!("expected PATTERN=FACTOR, got {s:?}"))?;
    let factor: f64 = f.parse().map_err(|_| format!("bad factor in {s:?}"))?;
    if !(factor.is_finite() && factor >= 0.0) {
        return Err(format!("factor must be finite and >= 0 in {s:?}"));
    }
    Ok((parse_pattern(p)?, factor))
}

/// Queries, the latency model and the predictor used to produce a trace set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Setup {
    pub queries: Vec<QuerySpec>,
    pub model: LatencyModel,
    pub predictor_bias: BTreeMap<Pattern, f64>,
    pub jitter: f64,
    pub predictor_seed: u64,
    /// Noise of query `i` uses `derive_seed(latency_seed, 2i + 1)`.
    pub latency_seed: u64,
}

struct Run<'a> {
    out_dir: PathBuf,
    inputs: Vec<(String, String)>,
    outputs: Vec<(String, String)>,
    stdout: &'a mut dyn Write,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

impl Run<'_> {
    fn read(&mut self, path: &Path) -> Result<Vec<u8>, CliError> {
        let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
        self.inputs.push((path.display().to_string(), sha256_hex(&bytes)));
        Ok(bytes)
    }

    fn read_workload(&mut self, path: &Path) -> Result<Workload, CliError> {
        let bytes = self.read(path)?;
        Ok(parse_workload(&bytes, Format::from_path(path))?)
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.out_dir.join(name);
        fs::write(&path, contents).map_err(|e| io_err(&path, e))?;
        self.outputs.push((name.to_string(), sha256_hex(contents.as_bytes())));
        Ok(())
    }

    fn say(&mut self, line: impl AsRef<str>) -> Result<(), CliError> {
        writeln!(self.stdout, "{}", line.as_ref()).map_err(|e| CliError::Io(e.to_string()))
    }
}

/// Parses `args` (program name first) and runs the command, writing
/// human-readable output to `stdout`.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                write!(stdout, "{e}").map_err(|e| CliError::Io(e.to_string()))?;
                return Ok(());
            }
            return Err(CliError::Usage(e.to_string()));
        }
    };
    if let Command::Replay(r) = &cli.command {
        return replay(&r.manifest, stdout);
    }
    let recorded: Vec<String> = argv[1..]
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    fs::create_dir_all(&cli.output_dir).map_err(|e| io_err(&cli.output_dir, e))?;
    let mut run = Run {
        out_dir: cli.output_dir.clone(),
        inputs: Vec::new(),
        outputs: Vec::new(),
        stdout,
    };
    let resolved = match &cli.command {
        Command::Gen(a) => cmd_gen(&cli, a, &mut run)?,
        Command::Calibrate(a) => cmd_calibrate(a, &mut run)?,
        Command::Bound(a) => cmd_bound(a, &mut run)?,
        Command::Verify(a) => cmd_verify(&cli, a, &mut run)?,
        Command::Search(a) => cmd_search(a, &mut run)?,
        Command::Coverage(a) => cmd_coverage(&cli, a, &mut run)?,
        Command::Shift(a) => cmd_shift(&cli, a, &mut run)?,
        Command::Replay(_) => unreachable!("handled above"),
    };
    let digests = |v: &[(String, String)]| -> Vec<Value> {
        v.iter().map(|(p, d)| json!({"path": p, "sha256": d})).collect()
    };
    let manifest = json!({
        "tool": "lqo-cp",
        "version": env!("CARGO_PKG_VERSION"),
        "argv": recorded,
        "args": serde_json::to_value(&cli).expect("arguments serialize"),
        "resolved": resolved,
        "inputs": digests(&run.inputs),
        "outputs": digests(&run.outputs),
    });
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    let path = run.out_dir.join("manifest.json");
    fs::write(&path, text).map_err(|e| io_err(&path, e))
}

fn replay(manifest: &Path, stdout: &mut dyn Write) -> Result<(), CliError> {
    let text = fs::read_to_string(manifest).map_err(|e| io_err(manifest, e))?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("manifest: {e}")))?;
    let argv = doc
        .get("argv")
        .and_then(Value::as_array)
        .ok_or_else(|| CliError::Usage("manifest has no argv".into()))?;
    let mut args = vec!["lqo-cp".to_string()];
    for a in argv {
        args.push(
            a.as_str()
                .ok_or_else(|| CliError::Usage("manifest argv must be strings".into()))?
                .to_string(),
        );
    }
    if args.get(1).map(String::as_str) == Some("replay") {
        return Err(CliError::Usage("a manifest cannot replay a replay".into()));
    }
    run(args, stdout)
}

fn check_delta(delta: f64) -> Result<(), CliError> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(CliError::Usage(format!("delta must be in (0, 1), got {delta}")))
    }
}

fn build_model(sim: &SimArgs, run: &mut Run) -> Result<LatencyModel, CliError> {
    let mut model = match &sim.model {
        Some(path) => {
            let bytes = run.read(path)?;
            LatencyModel::from_json(&String::from_utf8_lossy(&bytes))?
        }
        None => LatencyModel::default(),
    };
    if let Some(noise) = sim.noise {
        model.noise_sigma = noise;
    }
    model.pattern_bias.extend(sim.model_bias.iter().copied());
    model.validate()?;
    Ok(model)
}

fn schema(sim: &SimArgs) -> SchemaSpec {
    SchemaSpec {
        relation_count: sim.relations,
        cardinality_range: (sim.card_min, sim.card_max),
        join_graph_style: sim.graph,
    }
}

/// Queries, predictor and traces from one seed: queries use sub-seed 0, the
/// predictor 1, plans and latencies 2.
fn simulate(
    sim: &SimArgs,
    model: &LatencyModel,
    count: usize,
    seed: u64,
) -> Result<(Setup, Workload), CliError> {
    if !(sim.jitter.is_finite() && sim.jitter >= 0.0) {
        return Err(CliError::Usage("jitter must be finite and >= 0".into()));
    }
    let queries = generate_queries(&schema(sim), count, derive_seed(seed, 0))?;
    let bias: BTreeMap<Pattern, f64> = sim.predictor_bias.iter().copied().collect();
    let predictor_seed = derive_seed(seed, 1);
    let predictor = make_predictor(model, bias.clone(), predictor_seed).with_jitter(sim.jitter);
    let latency_seed = derive_seed(seed, 2);
    let workload = random_plan_workload(&queries, &predictor, model, latency_seed)?;
    Ok((
        Setup {
            queries,
            model: model.clone(),
            predictor_bias: bias,
            jitter: sim.jitter,
            predictor_seed,
            latency_seed,
        },
        workload,
    ))
}

fn cmd_gen(cli: &Cli, a: &GenArgs, run: &mut Run) -> Result<Value, CliError> {
    if a.queries == 0 {
        return Err(SimError::ZeroCount.into());
    }
    let model = shifted_model(&build_model(&a.sim, run)?, a.shift)?;
    let (setup, workload) = simulate(&a.sim, &model, a.queries, cli.seed)?;
    let (fmt, name) = match cli.format {
        OutputFormat::Json => (Format::Jsonl, "traces.jsonl"),
        OutputFormat::Csv => (Format::Csv, "traces.csv"),
    };
    run.write(name, &serialize_workload(&workload, fmt))?;
    let setup_text = serde_json::to_string_pretty(&setup).expect("setup serializes") + "\n";
    run.write("setup.json", &setup_text)?;
    let steps: usize = workload.traces.iter().map(|t| t.len()).sum();
    run.say(format!(
        "wrote {} traces ({steps} steps) to {}",
        workload.len(),
        run.out_dir.join(name).display()
    ))?;
    Ok(json!({ "model": model, "schema": schema(&a.sim) }))
}

fn cmd_calibrate(a: &CalibrateArgs, run: &mut Run) -> Result<Value, CliError> {
    check_delta(a.delta)?;
    let w = run.read_workload(&a.input)?;
    let table = match a.mode {
        CalibrationMode::Unified => BoundTable::unified(w.steps(), a.delta)?,
        CalibrationMode::Pattern => crate::cp::pattern_upper_bounds(w.steps(), a.delta)?,
    };
    let text = serde_json::to_string_pretty(&table.to_json()).expect("table serializes") + "\n";
    run.write("bounds.json", &text)?;
    if let Some(u) = table.unified {
        run.say(format!("unified C = {} (K = {})", u.value, u.k))?;
    }
    for (p, b) in &table.entries {
        run.say(format!("{p} C = {} (K = {})", b.value, b.k))?;
    }
    for (p, k) in &table.insufficient {
        let name = p.map_or("unified".to_string(), |p| p.to_string());
        run.say(format!("insufficient: {name} has K = {k}"))?;
    }
    Ok(json!({ "mode": table.mode, "entries": table.entries.len() + table.unified.is_some() as usize }))
}

fn cmd_bound(a: &BoundArgs, run: &mut Run) -> Result<Value, CliError> {
    let table = match (&a.table, a.c) {
        (Some(path), _) => {
            let bytes = run.read(path)?;
            Some(BoundTable::from_json(&String::from_utf8_lossy(&bytes))?)
        }
        (None, Some(c)) if c.is_finite() && c >= 0.0 => None,
        (None, Some(c)) => return Err(CliError::Usage(format!("--c must be finite and >= 0, got {c}"))),
        (None, None) => return Err(CliError::Usage("one of --table or --c is required".into())),
    };
    let c_for = |pattern: Option<&Pattern>| -> Result<f64, CliError> {
        match (&table, a.c) {
            (Some(t), _) => Ok(t.bound_for(pattern)?),
            (None, Some(c)) => Ok(c),
            (None, None) => unreachable!("checked above"),
        }
    };
    let mut intervals: Vec<LatencyInterval> = Vec::new();
    if let Some(path) = &a.trace {
        let w = run.read_workload(path)?;
        let mut csv = String::from("query_id,step,pattern,predicted_cost,lower,upper\n");
        for s in w.steps() {
            let iv = interval_around(s.predicted_cost, c_for(s.pattern.as_ref())?);
            let pat = s.pattern.map(|p| p.to_string()).unwrap_or_default();
            run.say(format!("{} {} {} {iv}", s.query_id, s.step, if pat.is_empty() { "-" } else { &pat }))?;
            csv.push_str(&format!(
                "{},{},{pat},{},{},{}\n",
                csv_field(&s.query_id),
                s.step,
                s.predicted_cost,
                iv.lower,
                iv.upper
            ));
            intervals.push(iv);
        }
        run.write("intervals.csv", &csv)?;
    } else {
        if a.cost.is_empty() {
            return Err(CliError::Usage("give --cost or --trace".into()));
        }
        for &cost in &a.cost {
            if !(cost.is_finite() && cost >= 0.0) {
                return Err(CliError::Usage(format!("cost must be finite and >= 0, got {cost}")));
            }
            let iv = interval_around(cost, c_for(a.pattern.as_ref())?);
            run.say(iv.to_string())?;
            intervals.push(iv);
        }
    }
    Ok(json!({ "intervals": intervals.len() }))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn cmd_verify(cli: &Cli, a: &VerifyArgs, run: &mut Run) -> Result<Value, CliError> {
    check_delta(a.delta)?;
    let spec: StlSpec = a.spec.parse()?;
    let w = run.read_workload(&a.input)?;
    let cfg = ExperimentConfig {
        iterations: 1,
        delta: a.delta,
        calibration_fraction: a.calibration_fraction,
        seed: cli.seed,
        pooling: a.pooling,
        ..ExperimentConfig::default()
    };
    let stats = runtime_verification_experiment(&w, &spec, a.delta, &cfg)?;
    run.write("verification.csv", &verification_csv(&stats.rows))?;
    run.say(format!("spec {spec}, C = {} from {} scores", stats.c, stats.calibration_scores))?;
    run.say(format!(
        "covered at every step: {:.4} of {} test queries",
        stats.covered_fraction, stats.test_queries
    ))?;
    run.say(format!(
        "fully guaranteed: {} queries, {:.4} of them satisfy the formula",
        stats.guaranteed_queries, stats.guaranteed_satisfied_fraction
    ))?;
    run.say(format!("violations: {}", stats.violations))?;
    for q in &stats.violating_queries {
        run.say(format!("violation: {q}"))?;
    }
    Ok(json!({
        "spec": spec.to_string(),
        "c": stats.c,
        "covered_fraction": stats.covered_fraction,
        "guaranteed_queries": stats.guaranteed_queries,
        "guaranteed_satisfied_fraction": stats.guaranteed_satisfied_fraction,
        "violations": stats.violations,
        "unsatisfied": stats.unsatisfied,
    }))
}

fn cmd_search(a: &SearchArgs, run: &mut Run) -> Result<Value, CliError> {
    let bytes = run.read(&a.setup)?;
    let setup: Setup = serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Usage(format!("{}: {e}", a.setup.display())))?;
    setup.model.validate()?;
    let table = match &a.table {
        Some(path) => {
            let bytes = run.read(path)?;
            Some(BoundTable::from_json(&String::from_utf8_lossy(&bytes))?)
        }
        None => None,
    };
    let modes: Vec<SearchMode> = match a.mode {
        SearchModeArg::Vanilla => vec![SearchMode::Vanilla],
        SearchModeArg::Cp => vec![SearchMode::CpGuided],
        SearchModeArg::Both => vec![SearchMode::Vanilla, SearchMode::CpGuided],
    };
    if modes.contains(&SearchMode::CpGuided) && table.is_none() {
        return Err(CliError::Usage("cp mode needs --table".into()));
    }
    for mode in &modes {
        SearchConfig {
            beam_size: a.beam,
            n: a.n,
            mode: *mode,
        }
        .validate()?;
    }
    let predictor = make_predictor(&setup.model, setup.predictor_bias.clone(), setup.predictor_seed)
        .with_jitter(setup.jitter);
    let mut csv = String::from("query_id,mode,plan,expansions,predicted_cost,true_latency\n");
    let mut totals: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    let mut matched = 0;
    for (i, q) in setup.queries.iter().enumerate() {
        if a.query_id.as_ref().is_some_and(|id| *id != q.id) {
            continue;
        }
        matched += 1;
        for &mode in &modes {
            let cfg = SearchConfig {
                beam_size: a.beam,
                n: a.n,
                mode,
            };
            let out = search(&predictor, q, &cfg, table.as_ref())?;
            let plan: Arc<_> = out.best.plan.clone();
            let latency: f64 = true_latency(&plan, q, &setup.model, derive_seed(setup.latency_seed, 2 * i as u64 + 1)).iter().sum();
            let name = match mode {
                SearchMode::Vanilla => "vanilla",
                SearchMode::CpGuided => "cp",
            };
            let e = totals.entry(name).or_default();
            e.0 += latency;
            e.1 += out.expansions;
            run.say(format!(
                "{} {name} {plan} expansions={} predicted={} latency={latency}",
                q.id, out.expansions, out.best.predicted_cost
            ))?;
            csv.push_str(&format!(
                "{},{name},{plan},{},{},{latency}\n",
                csv_field(&q.id),
                out.expansions,
                out.best.predicted_cost
            ));
        }
    }
    if matched == 0 {
        return Err(CliError::Usage(format!(
            "no query with id {:?}",
            a.query_id.as_deref().unwrap_or("")
        )));
    }
    for (name, (lat, exp)) in &totals {
        run.say(format!("total {name}: latency={lat} expansions={exp}"))?;
    }
    run.write("search.csv", &csv)?;
    Ok(json!({ "queries": matched, "totals": totals }))
}

fn cmd_coverage(cli: &Cli, a: &CoverageArgs, run: &mut Run) -> Result<Value, CliError> {
    check_delta(a.delta)?;
    let w = match &a.input {
        Some(path) => run.read_workload(path)?,
        None => exchangeable_workload(a.synthetic, 100.0, derive_seed(cli.seed, 0)),
    };
    let cfg = ExperimentConfig {
        iterations: a.iterations,
        delta: a.delta,
        calibration_fraction: a.calibration_fraction,
        seed: cli.seed,
        granularity: a.granularity,
        with_replacement: a.with_replacement,
        ..ExperimentConfig::default()
    };
    let result = run_sampling_experiment(&w, &cfg)?;
    run.write("coverage.csv", &coverage_csv(&result))?;
    if result.ec.len() >= 2 {
        run.write("density.csv", &density_csv(&kde_density_curve(&result.ec)?))?;
    }
    let target = 1.0 - a.delta;
    run.say(format!(
        "mean EC {:.4} over {} iterations (target {target})",
        result.mean, a.iterations
    ))?;
    if let Some(peak) = result.peak {
        run.say(format!("density peak at {peak:.4}"))?;
    }
    Ok(json!({ "config": cfg, "mean": result.mean, "peak": result.peak }))
}

fn cmd_shift(cli: &Cli, a: &ShiftArgs, run: &mut Run) -> Result<Value, CliError> {
    check_delta(a.delta)?;
    if !(0.0..1.0).contains(&a.epsilon) {
        return Err(ShiftError::BadEpsilon(a.epsilon).into());
    }
    let (cal, test) = match (&a.cal, &a.test) {
        (Some(c), Some(t)) => (run.read_workload(c)?, run.read_workload(t)?),
        _ => {
            let model = build_model(&a.sim, run)?;
            let (_, cal) = simulate(&a.sim, &model, a.queries, derive_seed(cli.seed, 10))?;
            let shifted = shifted_model(&model, a.shift)?;
            let (_, test) = simulate(&a.sim, &shifted, a.queries, derive_seed(cli.seed, 11))?;
            (cal, test)
        }
    };
    let cal_pool = nonconformity_scores(cal.steps()).sorted().to_vec();
    let test_pool = nonconformity_scores(test.steps()).sorted().to_vec();
    let cfg = ExperimentConfig {
        iterations: a.iterations,
        delta: a.delta,
        seed: cli.seed,
        ..ExperimentConfig::default()
    };
    let stats =
        shift_experiment_scores(&cal_pool, &test_pool, a.k, a.n_test, a.delta, a.epsilon, &cfg)?;
    run.write("shift.csv", &shift_csv(&stats))?;
    run.write("coverage_c.csv", &coverage_csv(&stats.plain))?;
    run.write("coverage_c_tilde.csv", &coverage_csv(&stats.adjusted_result))?;
    if a.iterations >= 2 {
        run.write("density_c.csv", &density_csv(&kde_density_curve(&stats.plain.ec)?))?;
        run.write(
            "density_c_tilde.csv",
            &density_csv(&kde_density_curve(&stats.adjusted_result.ec)?),
        )?;
    }
    // Bounds from the whole calibration pool.
    let full = ScoreSet::new(cal_pool)?;
    let c = quantile_upper_bound(&full, a.delta)?.value;
    let shift = ShiftConfig {
        epsilon: a.epsilon,
        estimated_tv: stats.tv,
    };
    let (c_tilde, adjusted) = adjusted_upper_bound(&full, a.delta, a.epsilon, Some(&shift))?;
    let summary = json!({
        "tv": stats.tv,
        "epsilon": a.epsilon,
        "delta": a.delta,
        "delta_tilde": adjusted.delta_tilde,
        "c": c,
        "c_tilde": c_tilde.value,
    });
    run.say(summary.to_string())?;
    run.say(format!(
        "coverage over {} iterations (K = {}, delta_tilde {:.6}): under C {:.4}, under C~ {:.4}",
        a.iterations, stats.adjusted.k, stats.adjusted.delta_tilde, stats.cov_c, stats.cov_c_tilde
    ))?;
    Ok(json!({
        "summary": summary,
        "iteration_delta_tilde": stats.adjusted.delta_tilde,
        "cov_c": stats.cov_c,
        "cov_c_tilde": stats.cov_c_tilde,
    }))
}

/// Entry point for the binary: runs and maps errors to exit codes.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(args, &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
