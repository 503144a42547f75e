//! The AI-SSQP iteration driver: safeguarded random stepsizes, the
//! primal-dual update, running averages, and full runs with inference
//! accumulators threaded through.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::inference::{
    BatchMeansState, ConfidenceInterval, InferenceConfig, Method, PluginScaling,
    PluginState, RandomScalingState,
};
use crate::kkt::{assemble, regularize, HessianAccumulator, KktSystem, DEFAULT_GAMMA_RH};
use crate::model::{PrimalDual, ProblemSpec};
use crate::sketch::{solve_exact, solve_sketched, SketchMode};
use crate::{Error, Result};

/// Stepsize schedule `β_t = c_β/(t+1)^β`, `χ_t = c_χ/(t+1)^χ`,
/// `η_t = β_t + χ_t`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepSchedule {
    pub c_beta: f64,
    pub beta_exp: f64,
    pub c_chi: f64,
    pub chi_exp: f64,
}

impl Default for StepSchedule {
    /// The experimental defaults: `β_t = 1/(t+1)^0.501`, `χ_t = β_t²`.
    fn default() -> Self {
        StepSchedule { c_beta: 1.0, beta_exp: 0.501, c_chi: 1.0, chi_exp: 1.002 }
    }
}

impl StepSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_beta > 0.0) {
            return Err(Error::InvalidConfig("c_beta must be positive".into()));
        }
        if !(self.beta_exp > 0.5 && self.beta_exp < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "beta exponent {} must lie in (0.5, 1)",
                self.beta_exp
            )));
        }
        if self.c_chi < 0.0 {
            return Err(Error::InvalidConfig("c_chi must be nonnegative".into()));
        }
        if self.c_chi > 0.0 && !(self.chi_exp > self.beta_exp + 0.5) {
            return Err(Error::InvalidConfig(format!(
                "chi exponent {} must exceed beta + 0.5 = {}",
                self.chi_exp,
                self.beta_exp + 0.5
            )));
        }
        Ok(())
    }

    /// `(β_t, η_t)` at iteration `t`.
    pub fn stepsizes(&self, t: usize) -> (f64, f64) {
        let beta = self.c_beta / ((t + 1) as f64).powf(self.beta_exp);
        let chi = self.c_chi / ((t + 1) as f64).powf(self.chi_exp);
        (beta, beta + chi)
    }

    /// Draws `ᾱ_t ~ Uniform[β_t, η_t]`, always inside the safeguard bounds.
    pub fn draw_stepsize<R: Rng>(&self, t: usize, rng: &mut R) -> f64 {
        let (beta, eta) = self.stepsizes(t);
        if eta <= beta {
            return beta;
        }
        beta + (eta - beta) * rng.gen::<f64>()
    }
}

/// Solver configuration: sketching mode, schedule, and the regularization
/// floor for the reduced Hessian.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    pub sketch: SketchMode,
    pub sched: StepSchedule,
    pub gamma_rh: f64,
    /// Iterates with index below this are excluded from all averages.
    /// Zero (the default) includes the all-ones start.
    pub burn_in: usize,
    /// Trust-region cap on the norm of the primal-dual update `ᾱ_t·z_t`.
    /// Keeps the iterates in a compact set, which the asymptotic theory
    /// assumes; during the first few iterations the averaged Hessian is
    /// rank-deficient and the regularized Newton direction can otherwise
    /// be enormous. `None` (the default) caps at 1.1× the norm of the
    /// starting point; `Some(f64::INFINITY)` disables the cap entirely.
    pub step_cap: Option<f64>,
}

/// Default step cap as a multiple of the starting point's norm `√(d+m)`:
/// large enough to traverse the region where the solution lives in one
/// move, small enough that a single bad sample cannot leave it.
pub const DEFAULT_STEP_CAP_FACTOR: f64 = 1.1;

impl SolverConfig {
    pub fn new(sketch: SketchMode) -> Self {
        SolverConfig {
            sketch,
            sched: StepSchedule::default(),
            gamma_rh: DEFAULT_GAMMA_RH,
            burn_in: 0,
            step_cap: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sketch.validate()?;
        self.sched.validate()?;
        if !(self.gamma_rh > 0.0) {
            return Err(Error::InvalidConfig("gamma_rh must be positive".into()));
        }
        if let Some(cap) = self.step_cap {
            if !(cap > 0.0) {
                return Err(Error::InvalidConfig("step_cap must be positive".into()));
            }
        }
        Ok(())
    }
}

/// What one step produced, for the inference accumulators.
#[derive(Debug)]
pub struct StepOutput {
    /// Stacked iterate `(x_t, λ_t)` *before* the update.
    pub s_prev: DVector<f64>,
    /// Stochastic Lagrangian gradient `∇̄_x L_t` at the pre-update iterate.
    pub grad_lx: DVector<f64>,
    /// The assembled KKT system of this step.
    pub kkt: KktSystem,
    /// Effective step scale: the drawn stepsize, shrunk if the trust-region
    /// cap on `‖ᾱ_t z_t‖` was active.
    pub alpha: f64,
    pub beta_t: f64,
    pub delta: f64,
}

/// Mutable per-run solver state. One instance per run; not shared.
pub struct Solver<'a> {
    problem: &'a ProblemSpec,
    cfg: &'a SolverConfig,
    pub iterate: PrimalDual,
    sum_iterates: DVector<f64>,
    n_averaged: usize,
    hess_acc: HessianAccumulator,
    step_cap: f64,
    pub t: usize,
    pub flop_total: u64,
}

impl<'a> Solver<'a> {
    pub fn new(problem: &'a ProblemSpec, cfg: &'a SolverConfig) -> Result<Self> {
        cfg.validate()?;
        let iterate = PrimalDual::ones(problem.d, problem.m());
        let step_cap = cfg
            .step_cap
            .unwrap_or_else(|| DEFAULT_STEP_CAP_FACTOR * iterate.stacked().norm());
        Ok(Solver {
            problem,
            cfg,
            iterate,
            sum_iterates: DVector::zeros(problem.n()),
            n_averaged: 0,
            hess_acc: HessianAccumulator::new(problem.d),
            step_cap,
            t: 0,
            flop_total: 0,
        })
    }

    /// Averaged iterate over the first `t` iterates (pre-update indices),
    /// or `None` before any step completed.
    pub fn averaged_iterate(&self) -> Option<DVector<f64>> {
        if self.n_averaged == 0 {
            None
        } else {
            Some(&self.sum_iterates / self.n_averaged as f64)
        }
    }

    /// One AI-SSQP step: draw a sample, build the regularized averaged
    /// Hessian excluding the current sample, solve the KKT system, and move
    /// by a safeguarded random stepsize.
    pub fn step<R: Rng>(&mut self, rng: &mut R) -> Result<StepOutput> {
        let p = self.problem;
        let s_prev = self.iterate.stacked();

        // (1) sample, (2) first-order quantities at the current iterate
        let sample = p.sample_data(rng);
        let g_bar = p.stochastic_gradient(&self.iterate.x, &sample);
        let (c, g_jac) = p.constraints(&self.iterate.x);
        let grad_lx = &g_bar + g_jac.transpose() * &self.iterate.lambda;

        // (3) regularized averaged Hessian, excluding the current sample
        let avg_h = self.hess_acc.average();
        let (b, delta) = regularize(&avg_h, &g_jac, self.cfg.gamma_rh)?;

        // (4) assemble and solve
        let sys = assemble(&b, &g_jac, &grad_lx, &c, delta)?;
        let dir = match self.cfg.sketch {
            SketchMode::Exact => solve_exact(&sys)?,
            mode => solve_sketched(&sys, mode, rng)?,
        };
        self.flop_total += dir.flops_used;

        // (5) safeguarded random stepsize, trust-region cap, and update
        let (beta_t, eta_t) = self.cfg.sched.stepsizes(self.t);
        let mut alpha = self.cfg.sched.draw_stepsize(self.t, rng);
        debug_assert!(alpha >= beta_t && alpha <= eta_t);
        let step_norm = alpha * dir.z.norm();
        if step_norm > self.step_cap {
            alpha *= self.step_cap / step_norm;
        }
        let d = p.d;
        self.iterate.x.axpy(alpha, &dir.z.rows(0, d).into_owned(), 1.0);
        self.iterate
            .lambda
            .axpy(alpha, &dir.z.rows(d, p.m()).into_owned(), 1.0);

        // (6) fold the current sample into the Hessian average
        let x_prev = s_prev.rows(0, d).into_owned();
        let lam_prev = s_prev.rows(d, p.m()).into_owned();
        self.hess_acc.accumulate(p, &x_prev, &lam_prev, &sample)?;

        // (7) averages run over the pre-update iterates
        if self.t >= self.cfg.burn_in {
            self.sum_iterates += &s_prev;
            self.n_averaged += 1;
        }
        self.t += 1;

        if !self.iterate.is_finite() {
            return Err(Error::Diverged);
        }

        Ok(StepOutput { s_prev, grad_lx, kkt: sys, alpha, beta_t, delta })
    }
}

/// One confidence interval produced by a named method, or a marker that the
/// method could not produce one (batch means before two completed batches).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodCi {
    pub method: Method,
    pub ci: Option<ConfidenceInterval>,
}

/// Sampled trajectory point for rate diagnostics and plotting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: usize,
    pub err_last: f64,
    pub err_avg: f64,
    pub rs_half_width: f64,
    pub feasibility_avg: f64,
}

/// Everything a single replication produces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub final_iterate: Vec<f64>,
    pub averaged_iterate: Option<Vec<f64>>,
    pub cis: Vec<MethodCi>,
    pub mae_last: f64,
    pub mae_avg: f64,
    pub flops_total: u64,
    pub n_iters: usize,
    pub diverged: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<TraceRow>,
}

/// Run parameters for a single replication.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub n_iters: usize,
    pub seed: u64,
    pub inference: InferenceConfig,
    pub trace_stride: Option<usize>,
}

/// Executes `n_iters` AI-SSQP steps from the all-ones start, threading the
/// random-scaling, plug-in, and batch-means accumulators through the run.
/// Divergence sets a flag on the record instead of erroring.
pub fn run(
    problem: &ProblemSpec,
    solver_cfg: &SolverConfig,
    run_cfg: &RunConfig,
) -> Result<RunRecord> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(run_cfg.seed);
    let mut solver = Solver::new(problem, solver_cfg)?;
    let n = problem.n();
    let w = run_cfg.inference.weight_vector(problem)?;
    let truth = problem.true_solution().stacked();

    let mut rs = RandomScalingState::new(n);
    let mut plugin = PluginState::new(problem.d, problem.m());
    let mut bm = BatchMeansState::new(n, solver_cfg.sched.beta_exp);

    let mut trace = Vec::new();
    let mut diverged = false;
    let mut last_beta = solver_cfg.sched.stepsizes(0).0;

    for t in 0..run_cfg.n_iters {
        let out = match solver.step(&mut rng) {
            Ok(o) => o,
            Err(Error::Diverged) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        last_beta = out.beta_t;
        if t >= solver_cfg.burn_in {
            rs.update(&out.s_prev);
            bm.update(&out.s_prev);
            plugin.update(&out.grad_lx, out.kkt.k);
        }
        if let Some(stride) = run_cfg.trace_stride {
            if ((t + 1) % stride == 0 || t + 1 == run_cfg.n_iters)
                && solver.averaged_iterate().is_some()
            {
                let avg = solver.averaged_iterate().unwrap();
                let half = rs
                    .confint(&w, run_cfg.inference.level)
                    .map(|ci| ci.half_width)
                    .unwrap_or(f64::NAN);
                let x_avg = avg.rows(0, problem.d).into_owned();
                let (c_avg, _) = problem.constraints(&x_avg);
                trace.push(TraceRow {
                    t: t + 1,
                    err_last: (solver.iterate.stacked() - &truth).norm(),
                    err_avg: (&avg - &truth).norm(),
                    rs_half_width: half,
                    feasibility_avg: c_avg.norm(),
                });
            }
        }
    }

    let final_iterate = solver.iterate.stacked();
    let averaged = solver.averaged_iterate();
    // primal-dual mean absolute error: the ℓ1 norm of the stacked error
    let mae_last = (&final_iterate - &truth).abs().sum();
    let mae_avg = averaged
        .as_ref()
        .map(|a| (a - &truth).abs().sum())
        .unwrap_or(f64::NAN);

    let mut cis = Vec::new();
    if !diverged && averaged.is_some() {
        let avg = averaged.as_ref().unwrap();
        for &method in &run_cfg.inference.methods {
            let ci = match method {
                Method::AveRs => rs.confint(&w, run_cfg.inference.level).ok(),
                Method::AvePlugIn => plugin
                    .confint(avg, &w, run_cfg.inference.level, PluginScaling::Averaged)
                    .ok(),
                Method::LastPlugIn => plugin
                    .confint(
                        &final_iterate,
                        &w,
                        run_cfg.inference.level,
                        PluginScaling::Last { beta_t: last_beta },
                    )
                    .ok(),
                Method::AveBm => bm.confint(rs.mean(), &w, run_cfg.inference.level),
            };
            cis.push(MethodCi { method, ci });
        }
    }

    Ok(RunRecord {
        seed: run_cfg.seed,
        final_iterate: final_iterate.iter().copied().collect(),
        averaged_iterate: averaged.map(|a| a.iter().copied().collect()),
        cis,
        mae_last,
        mae_avg,
        flops_total: solver.flop_total,
        n_iters: solver.t,
        diverged,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_problem, DesignCov, LossKind, Sample};
    use rand::SeedableRng;

    #[test]
    fn schedule_defaults_at_zero() {
        let s = StepSchedule::default();
        let (beta, eta) = s.stepsizes(0);
        assert!((beta - 1.0).abs() < 1e-15);
        assert!((eta - 2.0).abs() < 1e-15);
    }

    #[test]
    fn schedule_at_t99() {
        let s = StepSchedule::default();
        let (beta, _) = s.stepsizes(99);
        assert!((beta - 100f64.powf(-0.501)).abs() < 1e-12);
        assert!((beta - 0.09954).abs() < 1e-4);
    }

    #[test]
    fn schedule_monotone_to_zero() {
        let s = StepSchedule::default();
        let mut prev = f64::INFINITY;
        for t in 0..1000 {
            let (beta, _) = s.stepsizes(t);
            assert!(beta < prev);
            prev = beta;
        }
        assert!(prev < 0.04);
    }

    #[test]
    fn schedule_validation() {
        assert!(StepSchedule::default().validate().is_ok());
        assert!(StepSchedule { beta_exp: 0.4, ..Default::default() }.validate().is_err());
        assert!(StepSchedule { beta_exp: 1.0, ..Default::default() }.validate().is_err());
        assert!(StepSchedule { chi_exp: 0.9, ..Default::default() }.validate().is_err());
        // degenerate c_chi = 0 is allowed
        assert!(StepSchedule { c_chi: 0.0, chi_exp: 0.0, ..Default::default() }
            .validate()
            .is_ok());
    }

    #[test]
    fn stepsize_draw_within_safeguard() {
        let s = StepSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for t in [0usize, 3, 50, 5000] {
            let (beta, eta) = s.stepsizes(t);
            for _ in 0..200 {
                let a = s.draw_stepsize(t, &mut rng);
                assert!(a >= beta && a <= eta);
            }
        }
    }

    #[test]
    fn stepsize_draw_mean_matches_uniform() {
        let s = StepSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = 10;
        let (beta, eta) = s.stepsizes(t);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| s.draw_stepsize(t, &mut rng)).sum::<f64>() / n as f64;
        let expect = (beta + eta) / 2.0;
        let se = (eta - beta) / (12f64).sqrt() / (n as f64).sqrt();
        assert!((mean - expect).abs() < 3.0 * se);
    }

    #[test]
    fn stepsize_degenerate_chi_zero() {
        let s = StepSchedule { c_chi: 0.0, chi_exp: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (beta, _) = s.stepsizes(5);
        assert_eq!(s.draw_stepsize(5, &mut rng), beta);
    }

    #[test]
    fn step_is_fixed_point_at_truth_with_zero_noise() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let p = make_problem(LossKind::Squared, 5, 0, DesignCov::identity(), &mut r).unwrap();
        let cfg = SolverConfig::new(SketchMode::Exact);
        let mut solver = Solver::new(&p, &cfg).unwrap();
        solver.iterate = p.true_solution();
        // a zero-noise sample: ξ_b = ξ_a^T x*
        let sraw = p.sample_data(&mut r);
        let s = Sample { xi_b: sraw.xi_a.dot(&p.x_star), xi_a: sraw.xi_a };
        // replicate the step manually to control the sample
        let g_bar = p.stochastic_gradient(&solver.iterate.x, &s);
        let (c, g_jac) = p.constraints(&solver.iterate.x);
        let grad_lx = &g_bar + g_jac.transpose() * &solver.iterate.lambda;
        assert!(grad_lx.norm() < 1e-12 && c.norm() < 1e-12);
        let (b, delta) = regularize(&solver.hess_acc.average(), &g_jac, cfg.gamma_rh).unwrap();
        let sys = assemble(&b, &g_jac, &grad_lx, &c, delta).unwrap();
        let dir = solve_exact(&sys).unwrap();
        assert!(dir.z.norm() < 1e-10);
    }

    #[test]
    fn step_satisfies_linearized_feasibility() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let p = make_problem(LossKind::Squared, 5, 1, DesignCov::identity(), &mut r).unwrap();
        let cfg = SolverConfig::new(SketchMode::Exact);
        let mut solver = Solver::new(&p, &cfg).unwrap();
        let (c0, g0) = p.constraints(&solver.iterate.x);
        let out = solver.step(&mut r).unwrap();
        // recover the direction from the update: Δx = (x1 − x0)/α
        let x0 = out.s_prev.rows(0, 5).into_owned();
        let dx = (&solver.iterate.x - &x0) / out.alpha;
        assert!((c0 + g0 * dx).norm() < 1e-9);
    }

    #[test]
    fn averaging_identity() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let p = make_problem(LossKind::Squared, 5, 0, DesignCov::identity(), &mut r).unwrap();
        let cfg = SolverConfig::new(SketchMode::Kaczmarz { tau: 10 });
        let mut solver = Solver::new(&p, &cfg).unwrap();
        let mut log = Vec::new();
        for _ in 0..200 {
            log.push(solver.iterate.stacked());
            solver.step(&mut r).unwrap();
        }
        let avg = solver.averaged_iterate().unwrap();
        let mut direct = DVector::zeros(p.n());
        for v in &log {
            direct += v;
        }
        direct /= log.len() as f64;
        assert!((avg - &direct).norm() / (1.0 + direct.norm()) < 1e-12);
    }

    #[test]
    fn run_zero_iters_has_no_average() {
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let p = make_problem(LossKind::Squared, 5, 0, DesignCov::identity(), &mut r).unwrap();
        let cfg = SolverConfig::new(SketchMode::Exact);
        let rc = RunConfig {
            n_iters: 0,
            seed: 1,
            inference: InferenceConfig::default_with_methods(vec![Method::AveRs]),
            trace_stride: None,
        };
        let rec = run(&p, &cfg, &rc).unwrap();
        assert!(rec.averaged_iterate.is_none());
        assert!(rec.cis.is_empty());
    }

    #[test]
    fn run_determinism() {
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let p = make_problem(LossKind::Logistic, 5, 0, DesignCov::identity(), &mut r).unwrap();
        let cfg = SolverConfig::new(SketchMode::Kaczmarz { tau: 20 });
        let rc = RunConfig {
            n_iters: 500,
            seed: 99,
            inference: InferenceConfig::default_with_methods(vec![
                Method::AveRs,
                Method::AvePlugIn,
                Method::AveBm,
                Method::LastPlugIn,
            ]),
            trace_stride: None,
        };
        let a = run(&p, &cfg, &rc).unwrap();
        let b = run(&p, &cfg, &rc).unwrap();
        assert_eq!(a.final_iterate, b.final_iterate);
        assert_eq!(a.averaged_iterate, b.averaged_iterate);
        assert_eq!(a.flops_total, b.flops_total);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn feasibility_drift_vanishes() {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let p = make_problem(LossKind::Squared, 5, 0, DesignCov::identity(), &mut r).unwrap();
        let cfg = SolverConfig::new(SketchMode::Exact);
        let rc = RunConfig {
            n_iters: 20_000,
            seed: 5,
            inference: InferenceConfig::default_with_methods(vec![Method::AveRs]),
            trace_stride: Some(20_000),
        };
        let rec = run(&p, &cfg, &rc).unwrap();
        let last = rec.trace.last().unwrap();
        assert!(
            last.feasibility_avg <= 10.0 * rec.mae_avg,
            "‖c(x̄)‖ = {} vs MAE {}",
            last.feasibility_avg,
            rec.mae_avg
        );
    }

    #[test]
    fn regularization_vanishes_after_burn_in_on_squared_loss() {
        let mut r = ChaCha8Rng::seed_from_u64(10);
        let p = make_problem(LossKind::Squared, 5, 0, DesignCov::identity(), &mut r).unwrap();
        let cfg = SolverConfig::new(SketchMode::Exact);
        let mut solver = Solver::new(&p, &cfg).unwrap();
        let mut deltas = Vec::new();
        for _ in 0..500 {
            deltas.push(solver.step(&mut r).unwrap().delta);
        }
        assert!(deltas[100..].iter().all(|&d| d == 0.0), "δ nonzero after burn-in");
    }
}
