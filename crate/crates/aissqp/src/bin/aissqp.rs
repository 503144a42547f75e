//! Command-line benchmark harness for the AI-SSQP library.
//!
//! Subcommands:
//! - `run`: one experiment configuration via flags, aggregated CSV/JSON out.
//! - `grid`: many configurations from a TOML file, optionally parallel
//!   across replications.
//! - `trace`: a single trajectory's error and interval-width trace.
//! - `selftest`: fast internal consistency checks.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use aissqp::bench::{
    emit, linear_fit, parse_tau, render, run_experiment, ExperimentConfig, OutputFormat,
};
use aissqp::inference::{Method, RandomScalingState, WSpec, RS_QUANTILE_TABLE};
use aissqp::model::{DesignCov, DesignKind, LossKind};
use aissqp::sketch::{solve_exact, SketchMode};
use aissqp::ssqp::{run, RunConfig, SolverConfig};
use aissqp::{Error, Result};

#[derive(Parser)]
#[command(name = "aissqp", version, about = "AI-SSQP benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment configuration and write aggregate rows.
    Run(RunArgs),
    /// Run a grid of configurations from a TOML file.
    Grid(GridArgs),
    /// Dump one trajectory's error/width trace for plotting.
    Trace(TraceArgs),
    /// Run fast internal consistency checks.
    Selftest,
}

#[derive(Args)]
struct ProblemArgs {
    /// Loss function: squared | logistic
    #[arg(long, default_value = "squared")]
    loss: String,
    /// Model dimension d
    #[arg(long, default_value_t = 5)]
    dim: usize,
    /// Number of linear constraint rows (the sphere is always included)
    #[arg(long, default_value_t = 0)]
    m_lin: usize,
    /// Design covariance: identity | toeplitz | equicorr
    #[arg(long, default_value = "identity")]
    design: String,
    /// Design correlation parameter (toeplitz/equicorr only)
    #[arg(long, default_value_t = 0.5)]
    r: f64,
    /// KKT solver: 'exact', an integer number of Kaczmarz sketch steps,
    /// or 'gaussian:N'
    #[arg(long, default_value = "exact")]
    tau: String,
    /// Iterations per replication
    #[arg(long, default_value_t = 100_000)]
    iters: usize,
    /// Base RNG seed; replication i uses seed + i
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Confidence level
    #[arg(long, default_value_t = 0.95)]
    level: f64,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    /// Number of independent replications
    #[arg(long, default_value_t = 200)]
    reps: usize,
    /// Comma-separated methods (AveRS, AvePlugIn, AveBM, LastPlugIn)
    #[arg(long, default_value = "AveRS,AvePlugIn,AveBM,LastPlugIn")]
    methods: String,
    /// Worker threads across replications (default: AISSQP_WORKERS or 1)
    #[arg(long)]
    parallel: Option<usize>,
    /// Output path; stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output format: csv | json
    #[arg(long, default_value = "csv")]
    format: String,
}

#[derive(Args)]
struct GridArgs {
    /// TOML file with [[experiment]] blocks
    #[arg(long)]
    config: PathBuf,
    /// Worker threads across replications (default: AISSQP_WORKERS or 1)
    #[arg(long)]
    parallel: Option<usize>,
    /// Output path; stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output format: csv | json
    #[arg(long, default_value = "csv")]
    format: String,
}

#[derive(Args)]
struct TraceArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    /// Trace sampling stride in iterations
    #[arg(long, default_value_t = 100)]
    stride: usize,
    /// Output path; stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_loss(s: &str) -> Result<LossKind> {
    match s.to_ascii_lowercase().as_str() {
        "squared" => Ok(LossKind::Squared),
        "logistic" => Ok(LossKind::Logistic),
        other => Err(Error::InvalidConfig(format!(
            "unknown loss '{other}' (expected squared | logistic)"
        ))),
    }
}

fn parse_design(kind: &str, r: f64) -> Result<DesignCov> {
    let cov = match kind.to_ascii_lowercase().as_str() {
        "identity" => DesignCov::identity(),
        "toeplitz" => DesignCov::toeplitz(r),
        "equicorr" => DesignCov::equicorr(r),
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown design '{other}' (expected identity | toeplitz | equicorr)"
            )))
        }
    };
    cov.validate()?;
    Ok(cov)
}

fn parse_methods(s: &str) -> Result<Vec<Method>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(Method::from_str)
        .collect()
}

fn workers_from(parallel: Option<usize>) -> usize {
    parallel
        .or_else(|| {
            std::env::var("AISSQP_WORKERS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or(1)
        .max(1)
}

fn write_or_print(text: &str, out: Option<&PathBuf>) -> Result<()> {
    match out {
        Some(path) => {
            std::fs::write(path, text)?;
            Ok(())
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn experiment_from(p: &ProblemArgs, reps: usize, methods: Vec<Method>) -> Result<ExperimentConfig> {
    Ok(ExperimentConfig {
        loss: parse_loss(&p.loss)?,
        d: p.dim,
        m_lin: p.m_lin,
        design: parse_design(&p.design, p.r)?,
        sketch: parse_tau(&p.tau)?,
        n_iters: p.iters,
        n_reps: reps,
        base_seed: p.seed,
        level: p.level,
        methods,
        w: WSpec::CoordAverage,
    })
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let cfg = experiment_from(&args.problem, args.reps, parse_methods(&args.methods)?)?;
    let workers = workers_from(args.parallel);
    let result = run_experiment(&cfg, workers)?;
    let format = OutputFormat::from_str(&args.format)?;
    match &args.out {
        Some(path) => emit(&result.rows, format, path)?,
        None => print!("{}", render(&result.rows, format)?),
    }
    Ok(())
}

/// Flat TOML experiment block; `tau` accepts a string or an integer.
#[derive(Deserialize)]
struct RawExperiment {
    loss: String,
    dim: usize,
    #[serde(default)]
    m_lin: usize,
    design: String,
    #[serde(default = "default_r")]
    r: f64,
    tau: toml::Value,
    iters: usize,
    reps: usize,
    seed: u64,
    #[serde(default = "default_level")]
    level: f64,
    #[serde(default)]
    methods: Vec<String>,
}

fn default_r() -> f64 {
    0.5
}

fn default_level() -> f64 {
    0.95
}

#[derive(Deserialize)]
struct GridFile {
    experiment: Vec<RawExperiment>,
}

impl RawExperiment {
    fn into_config(self) -> Result<ExperimentConfig> {
        let tau = match &self.tau {
            toml::Value::String(s) => parse_tau(s)?,
            toml::Value::Integer(i) if *i > 0 => SketchMode::Kaczmarz { tau: *i as usize },
            other => {
                return Err(Error::InvalidConfig(format!(
                    "tau must be 'exact', a positive integer, or 'gaussian:N', got {other}"
                )))
            }
        };
        let methods = if self.methods.is_empty() {
            Method::all()
        } else {
            self.methods
                .iter()
                .map(|m| Method::from_str(m))
                .collect::<Result<_>>()?
        };
        Ok(ExperimentConfig {
            loss: parse_loss(&self.loss)?,
            d: self.dim,
            m_lin: self.m_lin,
            design: parse_design(&self.design, self.r)?,
            sketch: tau,
            n_iters: self.iters,
            n_reps: self.reps,
            base_seed: self.seed,
            level: self.level,
            methods,
            w: WSpec::CoordAverage,
        })
    }
}

fn cmd_grid(args: &GridArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config)?;
    let grid: GridFile =
        toml::from_str(&text).map_err(|e| Error::Format(format!("config parse: {e}")))?;
    if grid.experiment.is_empty() {
        return Err(Error::InvalidConfig("config file lists no experiments".into()));
    }
    let workers = workers_from(args.parallel);
    let format = OutputFormat::from_str(&args.format)?;
    let mut rows = Vec::new();
    for (i, raw) in grid.experiment.into_iter().enumerate() {
        let cfg = raw.into_config()?;
        eprintln!(
            "experiment {}: d={} loss={} design={} tau={} reps={} iters={}",
            i + 1,
            cfg.d,
            cfg.loss.as_str(),
            cfg.design.kind.as_str(),
            aissqp::bench::tau_label(cfg.sketch),
            cfg.n_reps,
            cfg.n_iters,
        );
        rows.extend(run_experiment(&cfg, workers)?.rows);
    }
    match &args.out {
        Some(path) => emit(&rows, format, path)?,
        None => print!("{}", render(&rows, format)?),
    }
    Ok(())
}

fn cmd_trace(args: &TraceArgs) -> Result<()> {
    if args.stride == 0 {
        return Err(Error::InvalidConfig("stride must be at least 1".into()));
    }
    let cfg = experiment_from(&args.problem, 1, vec![Method::AveRs])?;
    let problem = cfg.build_problem()?;
    let solver_cfg = SolverConfig::new(cfg.sketch);
    let rc = RunConfig {
        n_iters: cfg.n_iters,
        seed: cfg.base_seed,
        inference: aissqp::inference::InferenceConfig {
            level: cfg.level,
            w: WSpec::CoordAverage,
            methods: vec![Method::AveRs],
        },
        trace_stride: Some(args.stride),
    };
    let record = run(&problem, &solver_cfg, &rc)?;
    let mut out = String::from("t,err_last,err_avg,rs_half_width,feasibility_avg\n");
    for row in &record.trace {
        out.push_str(&format!(
            "{},{:.16e},{:.16e},{:.16e},{:.16e}\n",
            row.t, row.err_last, row.err_avg, row.rs_half_width, row.feasibility_avg
        ));
    }
    write_or_print(&out, args.out.as_ref())
}

fn check(name: &str, ok: bool, failures: &mut usize) {
    if ok {
        println!("ok: {name}");
    } else {
        println!("FAIL: {name}");
        *failures += 1;
    }
}

fn cmd_selftest() -> Result<()> {
    let mut failures = 0usize;

    // quantile table endpoints
    check(
        "quantile table",
        aissqp::inference::rs_quantile(0.90)? == RS_QUANTILE_TABLE[0].1
            && aissqp::inference::rs_quantile(0.99)? == RS_QUANTILE_TABLE[3].1,
        &mut failures,
    );

    // random-scaling recursion vs direct double sum
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 6;
    let mut rs = RandomScalingState::new(n);
    let mut means = Vec::new();
    let mut sum = DVector::zeros(n);
    for i in 0..100 {
        let s = DVector::from_fn(n, |_, _| rng.gen::<f64>() - 0.5);
        rs.update(&s);
        sum += &s;
        means.push(&sum / (i + 1) as f64);
    }
    let s_t = means.last().unwrap().clone();
    let mut direct = DMatrix::zeros(n, n);
    for (i, m) in means.iter().enumerate() {
        let diff = m - &s_t;
        direct.ger(((i + 1) * (i + 1)) as f64, &diff, &diff, 1.0);
    }
    direct /= (means.len() * means.len()) as f64;
    let v = rs.materialize();
    check(
        "random-scaling recursion",
        (&v - &direct).norm() < 1e-10 * (1.0 + direct.norm()),
        &mut failures,
    );

    // exact KKT solve against explicit inversion
    let mut ok = true;
    for _ in 0..50 {
        let d = 4;
        let h = {
            let a = DMatrix::from_fn(d, d, |_, _| rng.gen::<f64>() - 0.5);
            &a * a.transpose() + DMatrix::identity(d, d)
        };
        let g = DMatrix::from_fn(1, d, |_, _| rng.gen::<f64>() - 0.5);
        let grad = DVector::from_fn(d, |_, _| rng.gen::<f64>() - 0.5);
        let c = DVector::from_fn(1, |_, _| rng.gen::<f64>() - 0.5);
        let sys = aissqp::kkt::assemble(&h, &g, &grad, &c, 0.0)?;
        let z = solve_exact(&sys)?.z;
        let z2 = sys.k.clone().try_inverse().unwrap() * &sys.rhs;
        ok &= (z - z2).norm() < 1e-9;
    }
    check("exact KKT solver", ok, &mut failures);

    // sketch contraction: log mean-squared error decays linearly in tau
    let cfg = ExperimentConfig {
        loss: LossKind::Squared,
        d: 5,
        m_lin: 0,
        design: DesignCov { kind: DesignKind::Identity, r: 0.0 },
        sketch: SketchMode::Kaczmarz { tau: 10 },
        n_iters: 200,
        n_reps: 2,
        base_seed: 3,
        level: 0.95,
        methods: vec![Method::AveRs],
        w: WSpec::CoordAverage,
    };
    let res = run_experiment(&cfg, 1)?;
    check(
        "sketched end-to-end run",
        res.rows.len() == 1 && res.rows[0].mae_last.is_finite(),
        &mut failures,
    );
    let xs: Vec<f64> = (1..=20).map(|t| t as f64).collect();
    let ys: Vec<f64> = xs.iter().map(|t| (-0.3 * t).exp().ln()).collect();
    let (slope, r2) = linear_fit(&xs, &ys);
    check("linear fit", slope < 0.0 && r2 > 0.999, &mut failures);

    if failures > 0 {
        Err(Error::Format(format!("{failures} selftest check(s) failed")))
    } else {
        println!("all selftest checks passed");
        Ok(())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Grid(args) => cmd_grid(args),
        Command::Trace(args) => cmd_trace(args),
        Command::Selftest => cmd_selftest(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
