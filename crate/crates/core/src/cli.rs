//! Command-line front end: `explain`, `bench` and `validate`.

use std::ffi::OsString;
use std::io::Write;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::bounds::TightenMode;
use crate::explain::{explain_batch, FeatureOrder};
use crate::lp::Tolerances;
use crate::milp::Limits;
use crate::model::{load_instances, load_model, Instance, NeuralNetwork};
use crate::oracle::{Oracle, OracleError, Verification, DEFAULT_CAPACITY};
use crate::par;
use crate::report::{
    bench_table, instance_record, level_report, records_total_s, sha256_hex, LevelReport, ModelRun, Report,
    RunConfig, REPORT_VERSION,
};
use crate::slice::{make_plan, pick_features, SliceError, SlicingPlan, MAX_SLICES};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_PARTIAL: i32 = 4;
pub const EXIT_VALIDATION: i32 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Solver(String),
    #[error("{0} instance(s) could not be explained")]
    Partial(usize),
    #[error("{0} explanation(s) failed verification")]
    Validation(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Input(_) => EXIT_INPUT,
            CliError::Solver(_) => EXIT_SOLVER,
            CliError::Partial(_) => EXIT_PARTIAL,
            CliError::Validation(_) => EXIT_VALIDATION,
        }
    }
}

impl From<SliceError> for CliError {
    fn from(e: SliceError) -> Self {
        match e {
            SliceError::Bounds(_) | SliceError::Encode(_) | SliceError::Milp(_) => CliError::Solver(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "axp", version, about = "Minimal abductive explanations for ReLU classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Explain every instance under one slicing level and write a report.
    Explain(ExplainArgs),
    /// Explain under several slicing levels and print the time / removal table.
    Bench(BenchArgs),
    /// Re-verify the explanations of a report with the enumeration oracle.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct SolverArgs {
    /// Comma-separated feature names (or 0-based indices) to slice, in order.
    #[arg(long, value_name = "CSV", conflicts_with = "slice_seed")]
    pub slice_features: Option<String>,
    /// Seed for drawing slice features uniformly.
    #[arg(long, value_name = "INT")]
    pub slice_seed: Option<u64>,
    /// Feature elimination order: natural or random:SEED.
    #[arg(long, default_value = "natural")]
    pub order: FeatureOrder,
    /// Bound tightening: interval, lp or milp.
    #[arg(long, default_value = "interval")]
    pub tighten: TightenMode,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Branch-and-bound node limit per query.
    #[arg(long, default_value_t = 1_000_000)]
    pub node_limit: u64,
    /// Time limit per query in seconds.
    #[arg(long, default_value_t = 60.0, value_name = "SECS")]
    pub time_limit: f64,
    #[arg(long, default_value_t = crate::lp::FEASIBILITY_TOL)]
    pub feasibility_tol: f64,
    #[arg(long, default_value_t = crate::lp::OPTIMALITY_TOL)]
    pub optimality_tol: f64,
    /// Report JSON destination.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Write each subdomain encoding as LP-like text next to the report
    /// (or to stderr without --out).
    #[arg(long)]
    pub dump_lp: bool,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long, value_name = "PATH")]
    pub model: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub instances: PathBuf,
    /// Number of sliced features (0-3).
    #[arg(long, default_value_t = 0, value_parser = clap::value_parser!(u8).range(0..=MAX_SLICES as i64))]
    pub slices: u8,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Model files; repeat for several table rows.
    #[arg(long, value_name = "PATH", required = true)]
    pub model: Vec<PathBuf>,
    /// Instance files, one per model.
    #[arg(long, value_name = "PATH", required = true)]
    pub instances: Vec<PathBuf>,
    /// Inclusive slice levels, e.g. 0..3.
    #[arg(long, default_value = "0..3")]
    pub slices_range: SliceRange,
    /// Explain at most this many instances per model.
    #[arg(long)]
    pub max_instances: Option<usize>,
    /// Draw the `--max-instances` subset with this seed instead of taking the first rows.
    #[arg(long, requires = "max_instances")]
    pub instance_seed: Option<u64>,
    /// Repetitions per level; the table shows the median total time.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub repeat: u64,
    /// Also write the table to this file.
    #[arg(long, value_name = "PATH")]
    pub table: Option<PathBuf>,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long, value_name = "PATH")]
    pub report: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub model: PathBuf,
    /// Optional instances file; its rows must match the report's.
    #[arg(long, value_name = "PATH")]
    pub instances: Option<PathBuf>,
    /// Maximum number of unstable neurons the oracle will enumerate.
    #[arg(long, default_value_t = DEFAULT_CAPACITY)]
    pub capacity: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SliceRange(pub usize, pub usize);

impl SliceRange {
    pub fn levels(&self) -> RangeInclusive<usize> {
        self.0..=self.1
    }
}

impl FromStr for SliceRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, b) = match s.split_once("..") {
            Some((a, b)) => (a, b.trim_start_matches('=')),
            None => (s, s),
        };
        let parse = |t: &str| t.trim().parse::<usize>().map_err(|_| format!("bad slice range `{s}`"));
        let (a, b) = (parse(a)?, parse(b)?);
        if a > b || b > MAX_SLICES {
            return Err(format!("slice range `{s}` must satisfy 0 <= start <= end <= {MAX_SLICES}"));
        }
        Ok(SliceRange(a, b))
    }
}

/// Parses `args` (program name first) and runs the command. Returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            if code == EXIT_OK {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    let result = match &cli.command {
        Command::Explain(a) => cmd_explain(a, out, err),
        Command::Bench(a) => cmd_bench(a, out, err),
        Command::Validate(a) => cmd_validate(a, out, err),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn read(path: &Path, what: &str) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::Input(format!("cannot read {what} {}: {e}", path.display())))
}

struct Loaded {
    net: NeuralNetwork,
    model_sha: String,
    instances: Vec<Instance>,
    instances_sha: String,
}

fn load(model: &Path, instances: &Path) -> Result<Loaded, CliError> {
    let model_bytes = read(model, "model")?;
    let net = load_model(&model_bytes).map_err(|e| CliError::Input(format!("{}: {e}", model.display())))?;
    let inst_bytes = read(instances, "instances")?;
    let instances_v =
        load_instances(&net, &inst_bytes).map_err(|e| CliError::Input(format!("{}: {e}", instances.display())))?;
    Ok(Loaded {
        net,
        model_sha: sha256_hex(&model_bytes),
        instances: instances_v,
        instances_sha: sha256_hex(&inst_bytes),
    })
}

fn limits(a: &SolverArgs) -> Result<Limits, CliError> {
    if !(a.time_limit.is_finite() && a.time_limit > 0.0) {
        return Err(CliError::Usage("--time-limit must be a positive number of seconds".into()));
    }
    for (flag, v) in [("--feasibility-tol", a.feasibility_tol), ("--optimality-tol", a.optimality_tol)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(CliError::Usage(format!("{flag} must be positive")));
        }
    }
    Ok(Limits {
        max_nodes: a.node_limit,
        time_limit: Duration::from_secs_f64(a.time_limit),
        tolerances: Tolerances {
            feasibility: a.feasibility_tol,
            optimality: a.optimality_tol,
        },
    })
}

fn explicit_features(net: &NeuralNetwork, csv: &str) -> Result<Vec<usize>, CliError> {
    csv.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|tok| {
            net.feature_index(tok)
                .or_else(|| tok.parse::<usize>().ok().filter(|&i| i < net.num_features()))
                .ok_or_else(|| CliError::Usage(format!("unknown slice feature `{tok}`")))
        })
        .collect()
}

/// Features for each level, reusing the previous level's features.
fn level_features(net: &NeuralNetwork, a: &SolverArgs, levels: &[usize]) -> Result<Vec<Vec<usize>>, CliError> {
    let max = levels.iter().copied().max().unwrap_or(0);
    if let Some(csv) = &a.slice_features {
        let feats = explicit_features(net, csv)?;
        if feats.len() < max {
            return Err(CliError::Usage(format!(
                "--slice-features lists {} feature(s) but {max} slice(s) were requested",
                feats.len()
            )));
        }
        return Ok(levels.iter().map(|&s| feats[..s].to_vec()).collect());
    }
    let seed = a.slice_seed.unwrap_or(0);
    let mut out = Vec::new();
    let mut prev: Vec<usize> = Vec::new();
    for &s in levels {
        let reuse: Vec<usize> = prev.iter().copied().take(s).collect();
        let feats = pick_features(net.domain(), s, seed, &reuse)?;
        prev = feats.clone();
        out.push(feats);
    }
    Ok(out)
}

fn config(command: &str, a: &SolverArgs, levels: Vec<usize>) -> RunConfig {
    RunConfig {
        command: command.to_string(),
        slice_levels: levels,
        slice_features: a
            .slice_features
            .as_ref()
            .map(|s| s.split(',').map(|t| t.trim().to_string()).filter(|t| !t.is_empty()).collect()),
        slice_seed: a.slice_seed.unwrap_or(0),
        order: a.order.to_string(),
        tighten: a.tighten.to_string(),
        node_limit: a.node_limit,
        time_limit_s: a.time_limit,
        feasibility_tol: a.feasibility_tol,
        optimality_tol: a.optimality_tol,
        workers: a.workers,
        max_instances: None,
        instance_seed: None,
        repeat: 1,
    }
}

fn dump_plan(plan: &SlicingPlan, a: &SolverArgs, run_name: &str, err: &mut dyn Write) -> Result<(), CliError> {
    if !a.dump_lp {
        return Ok(());
    }
    for (k, sub) in plan.subdomains.iter().enumerate() {
        let text = sub.system.dump_lp();
        match &a.out {
            Some(out) => {
                let path = out.with_file_name(format!(
                    "{}.{run_name}.s{}.d{k}.lp",
                    out.file_stem().and_then(|s| s.to_str()).unwrap_or("report"),
                    plan.slices()
                ));
                std::fs::write(&path, text)
                    .map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))?;
            }
            None => {
                let _ = writeln!(err, "\\ {run_name} slices={} subdomain {k}\n{text}", plan.slices());
            }
        }
    }
    Ok(())
}

/// Explains `instances` at one level, `repeat` times.
fn run_level(
    net: &NeuralNetwork,
    instances: &[Instance],
    features: &[usize],
    a: &SolverArgs,
    limits: &Limits,
    repeat: usize,
    run_name: &str,
    err: &mut dyn Write,
) -> Result<LevelReport, CliError> {
    let workers = par::effective_workers(a.workers);
    let plan = par::with_pool(workers, || make_plan(net, net.domain(), features, a.tighten, limits, workers))?;
    dump_plan(&plan, a, run_name, err)?;
    let mut first = None;
    let mut extra = Vec::new();
    for _ in 0..repeat {
        let results = par::with_pool(workers, || explain_batch(net, instances, &plan, a.order, limits, workers));
        let records: Vec<_> = results
            .iter()
            .enumerate()
            .map(|(i, r)| instance_record(net, i, &instances[i], r))
            .collect();
        if first.is_none() {
            first = Some(records);
        } else {
            extra.push(records_total_s(&records));
        }
    }
    Ok(level_report(net, &plan, first.unwrap_or_default(), &extra))
}

fn write_report(report: &Report, path: Option<&PathBuf>) -> Result<(), CliError> {
    if let Some(path) = path {
        std::fs::write(path, report.to_json())
            .map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}

fn fmt_values(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(", ")
}

pub fn cmd_explain(a: &ExplainArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let limits = limits(&a.solver)?;
    let loaded = load(&a.model, &a.instances)?;
    let net = &loaded.net;
    let slices = a.slices as usize;
    let features = level_features(net, &a.solver, &[slices])?.remove(0);
    let level = run_level(net, &loaded.instances, &features, &a.solver, &limits, 1, &net.name, err)?;
    for rec in &level.instances {
        let line = match (&rec.explanation, &rec.error) {
            (Some(x), _) => format!(
                "#{} ({}) -> {}: X = {{{}}} [{:.1} ms]",
                rec.index,
                fmt_values(&rec.values),
                rec.prediction.as_deref().unwrap_or("?"),
                x.iter().map(|f| format!("{}={}", f.name, f.value)).collect::<Vec<_>>().join(", "),
                rec.time_ms
            ),
            (None, e) => format!(
                "#{} ({}) -> error: {}",
                rec.index,
                fmt_values(&rec.values),
                e.as_deref().unwrap_or("unknown")
            ),
        };
        let _ = writeln!(out, "{line}");
    }
    let _ = writeln!(
        out,
        "slices {} [{}]: {:.2}% binaries removed, total {:.3} s",
        level.slices,
        level.sliced_features.join(","),
        level.avg_removed_pct,
        level.summary.total_time_s
    );
    let report = Report {
        version: REPORT_VERSION,
        config: config("explain", &a.solver, vec![slices]),
        runs: vec![ModelRun {
            name: net.name.clone(),
            model_path: a.model.display().to_string(),
            model_sha256: loaded.model_sha.clone(),
            instances_path: a.instances.display().to_string(),
            instances_sha256: loaded.instances_sha.clone(),
            levels: vec![level],
        }],
    };
    write_report(&report, a.solver.out.as_ref())?;
    match report.failed_instances() {
        0 => Ok(()),
        n => Err(CliError::Partial(n)),
    }
}

fn subsample(instances: Vec<Instance>, max: Option<usize>, seed: Option<u64>) -> Vec<Instance> {
    let Some(max) = max else { return instances };
    if instances.len() <= max {
        return instances;
    }
    match seed {
        None => instances.into_iter().take(max).collect(),
        Some(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = rand::seq::index::sample(&mut rng, instances.len(), max).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| instances[i].clone()).collect()
        }
    }
}

pub fn cmd_bench(a: &BenchArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    if a.model.len() != a.instances.len() {
        return Err(CliError::Usage(format!(
            "{} --model but {} --instances; pass one instances file per model",
            a.model.len(),
            a.instances.len()
        )));
    }
    let limits = limits(&a.solver)?;
    let levels: Vec<usize> = a.slices_range.levels().collect();
    let mut runs = Vec::new();
    for (model, inst_path) in a.model.iter().zip(&a.instances) {
        let loaded = load(model, inst_path)?;
        let net = &loaded.net;
        let instances = subsample(loaded.instances.clone(), a.max_instances, a.instance_seed);
        let features = level_features(net, &a.solver, &levels)?;
        let mut level_reports = Vec::new();
        for feats in &features {
            let level = run_level(net, &instances, feats, &a.solver, &limits, a.repeat as usize, &net.name, err)?;
            let _ = writeln!(
                err,
                "{}: slices {} [{}] {:.2}% removed, median total {:.3} s",
                net.name,
                level.slices,
                level.sliced_features.join(","),
                level.avg_removed_pct,
                level.summary.median_total_s
            );
            level_reports.push(level);
        }
        runs.push(ModelRun {
            name: net.name.clone(),
            model_path: model.display().to_string(),
            model_sha256: loaded.model_sha.clone(),
            instances_path: inst_path.display().to_string(),
            instances_sha256: loaded.instances_sha.clone(),
            levels: level_reports,
        });
    }
    let mut cfg = config("bench", &a.solver, levels);
    cfg.max_instances = a.max_instances;
    cfg.instance_seed = a.instance_seed;
    cfg.repeat = a.repeat as usize;
    let report = Report {
        version: REPORT_VERSION,
        config: cfg,
        runs,
    };
    let table = bench_table(&report);
    let _ = write!(out, "{table}");
    if let Some(path) = &a.table {
        std::fs::write(path, &table).map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))?;
    }
    write_report(&report, a.solver.out.as_ref())?;
    match report.failed_instances() {
        0 => Ok(()),
        n => Err(CliError::Partial(n)),
    }
}

pub fn cmd_validate(a: &ValidateArgs, out: &mut dyn Write, _err: &mut dyn Write) -> Result<(), CliError> {
    let text = read(&a.report, "report")?;
    let report: Report = serde_json::from_slice(&text)
        .map_err(|e| CliError::Input(format!("{}: not a report: {e}", a.report.display())))?;
    let model_bytes = read(&a.model, "model")?;
    let sha = sha256_hex(&model_bytes);
    let net = load_model(&model_bytes).map_err(|e| CliError::Input(format!("{}: {e}", a.model.display())))?;
    let runs: Vec<&ModelRun> = report.runs.iter().filter(|r| r.model_sha256 == sha).collect();
    if runs.is_empty() {
        return Err(CliError::Input(format!(
            "model hash {sha} matches no run in {}",
            a.report.display()
        )));
    }
    let expected: Option<Vec<Instance>> = match &a.instances {
        Some(p) => Some(
            load_instances(&net, &read(p, "instances")?)
                .map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?,
        ),
        None => None,
    };
    let oracle = Oracle { capacity: a.capacity };
    let mut checked = 0;
    let mut failed = 0;
    for run in runs {
        for level in &run.levels {
            for rec in &level.instances {
                if let Some(exp) = &expected {
                    if exp.get(rec.index).map(|i| &i.values) != Some(&rec.values) {
                        return Err(CliError::Input(format!(
                            "instance #{} of the report does not match the instances file",
                            rec.index
                        )));
                    }
                }
                let Some(kept) = rec.kept() else { continue };
                let inst = Instance::new(rec.values.clone());
                net.check_instance(&inst).map_err(|e| CliError::Input(e.to_string()))?;
                if kept.iter().any(|&f| f >= net.num_features()) {
                    return Err(CliError::Input(format!("instance #{}: feature index out of range", rec.index)));
                }
                checked += 1;
                let verdict = oracle.verify_explanation(&net, &inst, &kept).map_err(|e| match e {
                    OracleError::CapacityExceeded { .. } | OracleError::DimensionMismatch { .. } => {
                        CliError::Input(e.to_string())
                    }
                    OracleError::Lp(_) => CliError::Solver(e.to_string()),
                })?;
                let tag = format!("{} slices={} #{}", run.name, level.slices, rec.index);
                match verdict {
                    Verification::Ok => {}
                    Verification::NotSufficient { witness } => {
                        failed += 1;
                        let _ = writeln!(out, "{tag}: not sufficient, counterexample ({})", fmt_values(&witness));
                    }
                    Verification::NotMinimal { feature } => {
                        failed += 1;
                        let _ = writeln!(out, "{tag}: not minimal, `{}` is redundant", net.feature_names[feature]);
                    }
                }
            }
        }
    }
    let _ = writeln!(out, "verified {} explanation(s), {failed} failed", checked);
    if failed > 0 {
        return Err(CliError::Validation(failed));
    }
    Ok(())
}
