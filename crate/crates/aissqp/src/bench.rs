//! Replicated-experiment harness: runs many independent AI-SSQP
//! trajectories per configuration, aggregates error/coverage/length/flop
//! statistics, and writes CSV or JSON artifacts.
//!
//! Replication `i` of a config uses seed `base_seed + i`; the problem
//! instance itself is drawn once per config from a stream derived from
//! `base_seed`, so every replication solves the same problem. Identical
//! config and seed therefore reproduce byte-identical output.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::inference::{tangential_fraction, InferenceConfig, Method, WSpec};
use crate::model::{make_problem, DesignCov, DesignKind, LossKind, ProblemSpec};
use crate::sketch::SketchMode;
use crate::ssqp::{run, RunConfig, RunRecord, SolverConfig};
use crate::{Error, Result};

/// Ordinary least-squares fit `y ≈ slope·x + intercept`; returns
/// `(slope, R²)`. Used for log-log rate diagnostics.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2, "need at least two points to fit a line");
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, r2)
}

/// One experiment cell: a problem configuration plus the replication
/// protocol.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub loss: LossKind,
    pub d: usize,
    /// Number of linear constraint rows (the sphere row is always present).
    #[serde(default)]
    pub m_lin: usize,
    pub design: DesignCov,
    pub sketch: SketchMode,
    pub n_iters: usize,
    pub n_reps: usize,
    pub base_seed: u64,
    pub level: f64,
    pub methods: Vec<Method>,
    #[serde(default = "default_w")]
    pub w: WSpec,
}

fn default_w() -> WSpec {
    WSpec::CoordAverage
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_reps < 1 {
            return Err(Error::InvalidConfig("n_reps must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidConfig("at least one method is required".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "confidence level {} must lie in (0, 1)",
                self.level
            )));
        }
        self.design.validate()?;
        self.sketch.validate()?;
        Ok(())
    }

    fn inference(&self) -> InferenceConfig {
        InferenceConfig {
            level: self.level,
            w: self.w.clone(),
            methods: self.methods.clone(),
        }
    }

    /// The problem instance is a deterministic function of the config: its
    /// generator stream is decoupled from the replication seeds so reps
    /// share one problem.
    pub fn build_problem(&self) -> Result<ProblemSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.base_seed ^ 0x9e37_79b9_7f4a_7c15);
        make_problem(self.loss, self.d, self.m_lin, self.design, &mut rng)
    }
}

/// Label used in the `tau` CSV column.
pub fn tau_label(mode: SketchMode) -> String {
    match mode {
        SketchMode::Exact => "exact".to_string(),
        SketchMode::Kaczmarz { tau } => tau.to_string(),
        SketchMode::GaussianVector { tau } => format!("gaussian:{tau}"),
    }
}

/// Parses the `--tau` flag: `exact` (or `inf`), an integer count of
/// Kaczmarz steps, or `gaussian:N`.
pub fn parse_tau(s: &str) -> Result<SketchMode> {
    let mode = match s.trim().to_ascii_lowercase().as_str() {
        "exact" | "inf" | "infinity" => SketchMode::Exact,
        other => {
            if let Some(rest) = other.strip_prefix("gaussian:") {
                let tau: usize = rest.parse().map_err(|_| {
                    Error::InvalidConfig(format!("invalid gaussian sketch count '{rest}'"))
                })?;
                SketchMode::GaussianVector { tau }
            } else {
                let tau: usize = other.parse().map_err(|_| {
                    Error::InvalidConfig(format!(
                        "tau must be 'exact', a positive integer, or 'gaussian:N', got '{s}'"
                    ))
                })?;
                SketchMode::Kaczmarz { tau }
            }
        }
    };
    mode.validate()?;
    Ok(mode)
}

/// One output row: the aggregate of one method over all replications of one
/// config. Field order matches the CSV schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub d: usize,
    pub loss: String,
    pub design: String,
    pub r: f64,
    pub tau: String,
    pub method: String,
    pub mae_last: f64,
    pub mae_avg: f64,
    /// Fraction of converged replications whose interval covers the truth.
    pub coverage: f64,
    pub avg_len: f64,
    pub flops_per_iter: f64,
    pub n_diverged: usize,
    pub n_reps: usize,
    pub seed: u64,
}

/// Everything `run_experiment` produces: per-method aggregate rows plus the
/// raw replication records for downstream analysis.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub rows: Vec<AggregateRow>,
    pub records: Vec<RunRecord>,
}

/// Runs `n_reps` independent replications (seeds `base_seed + i`) of one
/// configuration and aggregates per method. All requested methods share
/// each replication's single trajectory. With `workers > 1`, replications
/// run on a bounded thread pool; aggregation order is by replication index
/// either way, so output does not depend on `workers`.
pub fn run_experiment(cfg: &ExperimentConfig, workers: usize) -> Result<ExperimentResult> {
    cfg.validate()?;
    let problem = cfg.build_problem()?;
    let inference = cfg.inference();
    let w = inference.weight_vector(&problem)?;

    // warn when the requested functional has zero limiting variance
    let (_, g_star) = problem.constraints(&problem.x_star);
    if w.rows(problem.d, problem.m()).norm() == 0.0
        && tangential_fraction(&g_star, &w, problem.d) < 1e-6
    {
        eprintln!(
            "warning: inference direction w lies in the row space of the \
             constraint Jacobian; the limiting variance along it is zero and \
             interval widths are unreliable"
        );
    }
    let truth = w.dot(&problem.true_solution().stacked());

    let solver_cfg = SolverConfig::new(cfg.sketch);
    let run_one = |i: usize| -> Result<RunRecord> {
        let rc = RunConfig {
            n_iters: cfg.n_iters,
            seed: cfg.base_seed + i as u64,
            inference: inference.clone(),
            trace_stride: None,
        };
        run(&problem, &solver_cfg, &rc)
    };

    let records: Vec<RunRecord> = if workers > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Format(format!("worker pool: {e}")))?;
        pool.install(|| {
            (0..cfg.n_reps)
                .into_par_iter()
                .map(run_one)
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        (0..cfg.n_reps).map(run_one).collect::<Result<_>>()?
    };

    let rows = aggregate(cfg, &records, truth)?;
    Ok(ExperimentResult { rows, records })
}

/// Reduces replication records into one row per method. Diverged runs are
/// excluded from every average but counted in `n_diverged`.
pub fn aggregate(
    cfg: &ExperimentConfig,
    records: &[RunRecord],
    truth: f64,
) -> Result<Vec<AggregateRow>> {
    let converged: Vec<&RunRecord> = records.iter().filter(|r| !r.diverged).collect();
    let n_diverged = records.len() - converged.len();
    if converged.is_empty() {
        return Err(Error::Format(format!(
            "all {} replications diverged; aggregate is invalid",
            records.len()
        )));
    }
    let nc = converged.len() as f64;
    let mae_last = converged.iter().map(|r| r.mae_last).sum::<f64>() / nc;
    let mae_avg = converged.iter().map(|r| r.mae_avg).sum::<f64>() / nc;
    let flops_per_iter = converged
        .iter()
        .map(|r| r.flops_total as f64 / r.n_iters.max(1) as f64)
        .sum::<f64>()
        / nc;

    let mut rows = Vec::with_capacity(cfg.methods.len());
    for &method in &cfg.methods {
        let mut hits = 0usize;
        let mut len_sum = 0.0;
        let mut len_n = 0usize;
        for rec in &converged {
            let ci = rec
                .cis
                .iter()
                .find(|mc| mc.method == method)
                .and_then(|mc| mc.ci.as_ref());
            if let Some(ci) = ci {
                if ci.contains(truth) {
                    hits += 1;
                }
                len_sum += ci.length();
                len_n += 1;
            }
            // a method that produced no interval cannot cover: it counts in
            // the denominator but not the numerator
        }
        rows.push(AggregateRow {
            d: cfg.d,
            loss: cfg.loss.as_str().to_string(),
            design: cfg.design.kind.as_str().to_string(),
            r: if cfg.design.kind == DesignKind::Identity { 0.0 } else { cfg.design.r },
            tau: tau_label(cfg.sketch),
            method: method.as_str().to_string(),
            mae_last,
            mae_avg,
            coverage: hits as f64 / nc,
            avg_len: if len_n > 0 { len_sum / len_n as f64 } else { f64::NAN },
            flops_per_iter,
            n_diverged,
            n_reps: records.len(),
            seed: cfg.base_seed,
        });
    }
    Ok(rows)
}

/// Output serialization format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Json,
}

impl std::str::FromStr for OutputFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(Error::InvalidConfig(format!("unknown format '{other}'"))),
        }
    }
}

pub const CSV_HEADER: &str = "d,loss,design,r,tau,method,mae_last,mae_avg,coverage,\
avg_len,flops_per_iter,n_diverged,n_reps,seed";

/// Fixed float formatting: 17 significant digits, enough to round-trip f64.
fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Renders aggregate rows as CSV with the fixed 14-column schema.
pub fn to_csv(rows: &[AggregateRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.d,
            r.loss,
            r.design,
            fmt_f64(r.r),
            r.tau,
            r.method,
            fmt_f64(r.mae_last),
            fmt_f64(r.mae_avg),
            fmt_f64(r.coverage),
            fmt_f64(r.avg_len),
            fmt_f64(r.flops_per_iter),
            r.n_diverged,
            r.n_reps,
            r.seed,
        );
    }
    out
}

/// Renders rows in the requested format.
pub fn render(rows: &[AggregateRow], format: OutputFormat) -> Result<String> {
    match format {
        OutputFormat::Csv => Ok(to_csv(rows)),
        OutputFormat::Json => {
            serde_json::to_string_pretty(rows).map_err(|e| Error::Format(e.to_string()))
        }
    }
}

/// Writes rows to `path` in the requested format.
pub fn emit(rows: &[AggregateRow], format: OutputFormat, path: &Path) -> Result<()> {
    std::fs::write(path, render(rows, format)?)?;
    Ok(())
}
