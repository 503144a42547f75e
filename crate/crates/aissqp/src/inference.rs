//! Online inference machinery: the random-scaling accumulator and pivotal
//! confidence intervals, plus plug-in and batch-means baselines.
//!
//! The random-scaling matrix
//!
//! ```text
//! V_t = (1/t²) Σ_{i=1}^t i² (s̄_i − s̄_t)(s̄_i − s̄_t)ᵀ
//! ```
//!
//! is maintained with O((d+m)²) work per step through the recursion on
//! `(s̄, P, Q)`. The studentized statistic `√t wᵀ(s̄_t − s*)/√(wᵀV_t w)` is
//! asymptotically pivotal; its quantiles are tabulated below.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::model::ProblemSpec;
use crate::{Error, Result};

/// Quantiles of the limiting distribution of the random-scaling statistic.
pub const RS_QUANTILE_TABLE: [(f64, f64); 4] =
    [(0.90, 3.875), (0.95, 5.323), (0.975, 6.747), (0.99, 8.613)];

/// Quantile lookup with linear interpolation, restricted to [0.90, 0.99].
pub fn rs_quantile(p: f64) -> Result<f64> {
    let lo = RS_QUANTILE_TABLE[0].0;
    let hi = RS_QUANTILE_TABLE[3].0;
    if !(p >= lo && p <= hi) {
        return Err(Error::InvalidConfig(format!(
            "random-scaling quantile level {p} outside tabulated range [{lo}, {hi}]"
        )));
    }
    for w in RS_QUANTILE_TABLE.windows(2) {
        let (p0, q0) = w[0];
        let (p1, q1) = w[1];
        if p <= p1 {
            return Ok(q0 + (q1 - q0) * (p - p0) / (p1 - p0));
        }
    }
    Ok(RS_QUANTILE_TABLE[3].1)
}

/// Standard normal quantile, used by the plug-in and batch-means baselines.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().inverse_cdf(p)
}

/// A two-sided confidence interval `center ± half_width`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub center: f64,
    pub half_width: f64,
    pub level: f64,
    /// Set when the variance quadratic form was negative from roundoff and
    /// clamped to zero.
    #[serde(default)]
    pub clamped: bool,
}

impl ConfidenceInterval {
    pub fn contains(&self, value: f64) -> bool {
        (value - self.center).abs() <= self.half_width
    }

    pub fn length(&self) -> f64 {
        2.0 * self.half_width
    }
}

fn kahan_add_slice(sum: &mut [f64], comp: &mut [f64], term: impl Iterator<Item = f64>) {
    for (i, v) in term.enumerate() {
        let y = v - comp[i];
        let t = sum[i] + y;
        comp[i] = (t - sum[i]) - y;
        sum[i] = t;
    }
}

/// Online state for the random-scaling matrix: the running average `s̄_t`
/// and the compensated sums `P_t = Σ i² s̄_i s̄_iᵀ`, `Q_t = Σ i² s̄_i`.
#[derive(Debug, Clone)]
pub struct RandomScalingState {
    s_bar: DVector<f64>,
    p: DMatrix<f64>,
    p_comp: DMatrix<f64>,
    q: DVector<f64>,
    q_comp: DVector<f64>,
    t: usize,
}

impl RandomScalingState {
    pub fn new(n: usize) -> Self {
        RandomScalingState {
            s_bar: DVector::zeros(n),
            p: DMatrix::zeros(n, n),
            p_comp: DMatrix::zeros(n, n),
            q: DVector::zeros(n),
            q_comp: DVector::zeros(n),
            t: 0,
        }
    }

    pub fn count(&self) -> usize {
        self.t
    }

    /// Current running average `s̄_t`.
    pub fn mean(&self) -> &DVector<f64> {
        &self.s_bar
    }

    /// Feeds the iterate `s_t`; updates `s̄`, `P`, `Q` in place.
    pub fn update(&mut self, s_t: &DVector<f64>) {
        let t1 = (self.t + 1) as f64;
        self.s_bar = (s_t + self.t as f64 * &self.s_bar) / t1;
        let w = t1 * t1;
        let sb = &self.s_bar;
        let n = sb.len();
        kahan_add_slice(
            self.p.as_mut_slice(),
            self.p_comp.as_mut_slice(),
            (0..n * n).map(|k| w * sb[k % n] * sb[k / n]),
        );
        kahan_add_slice(
            self.q.as_mut_slice(),
            self.q_comp.as_mut_slice(),
            (0..n).map(|k| w * sb[k]),
        );
        self.t += 1;
    }

    /// Materializes `V_t`, symmetrized to kill roundoff asymmetry.
    pub fn materialize(&self) -> DMatrix<f64> {
        let n = self.s_bar.len();
        if self.t == 0 {
            return DMatrix::zeros(n, n);
        }
        let t = self.t as f64;
        let t2 = t * t;
        let sum_i2 = t * (t + 1.0) * (2.0 * t + 1.0) / 6.0;
        let mut v = &self.p / t2;
        v.ger(-1.0 / t2, &self.q, &self.s_bar, 1.0);
        v.ger(-1.0 / t2, &self.s_bar, &self.q, 1.0);
        v.ger(sum_i2 / t2, &self.s_bar, &self.s_bar, 1.0);
        (&v + v.transpose()) * 0.5
    }

    /// Quadratic form `wᵀ V_t w` without materializing the full matrix.
    pub fn quad_form(&self, w: &DVector<f64>) -> f64 {
        if self.t == 0 {
            return 0.0;
        }
        let t = self.t as f64;
        let t2 = t * t;
        let sum_i2 = t * (t + 1.0) * (2.0 * t + 1.0) / 6.0;
        let wpw = (w.transpose() * &self.p * w)[(0, 0)];
        let wq = w.dot(&self.q);
        let ws = w.dot(&self.s_bar);
        (wpw - 2.0 * wq * ws + sum_i2 * ws * ws) / t2
    }

    /// Random-scaling confidence interval for `wᵀ(x*, λ*)` at the given
    /// level; uses `U_{(1+level)/2}` from the quantile table.
    pub fn confint(&self, w: &DVector<f64>, level: f64) -> Result<ConfidenceInterval> {
        if self.t < 2 {
            return Err(Error::InvalidConfig(
                "random-scaling interval needs at least two updates".into(),
            ));
        }
        if w.norm() == 0.0 {
            return Err(Error::InvalidConfig("inference direction w must be nonzero".into()));
        }
        let u = rs_quantile((1.0 + level) / 2.0)?;
        let q = self.quad_form(w);
        let clamped = q < 0.0;
        let q = q.max(0.0);
        Ok(ConfidenceInterval {
            center: w.dot(&self.s_bar),
            half_width: u * (q / self.t as f64).sqrt(),
            level,
            clamped,
        })
    }
}

/// Scaling used by the plug-in intervals: `√t` for the averaged iterate,
/// `√(1/β_t)` for the last iterate.
#[derive(Debug, Clone, Copy)]
pub enum PluginScaling {
    Averaged,
    Last { beta_t: f64 },
}

/// Plug-in sandwich covariance estimator: accumulates the outer products of
/// the stochastic Lagrangian gradients and sandwiches them with the most
/// recent KKT matrix. Targets the minimax covariance of the exact method;
/// known to be biased under sketching.
#[derive(Debug, Clone)]
pub struct PluginState {
    grad_outer_sum: DMatrix<f64>,
    last_k: Option<DMatrix<f64>>,
    count: usize,
    d: usize,
    m: usize,
}

impl PluginState {
    pub fn new(d: usize, m: usize) -> Self {
        PluginState {
            grad_outer_sum: DMatrix::zeros(d, d),
            last_k: None,
            count: 0,
            d,
            m,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn update(&mut self, grad_lx: &DVector<f64>, k: DMatrix<f64>) {
        self.grad_outer_sum.ger(1.0, grad_lx, grad_lx, 1.0);
        self.last_k = Some(k);
        self.count += 1;
    }

    /// `Ξ̂ = K⁻¹ blockdiag(Σ̂_g, 0) K⁻¹` with `Σ̂_g` the gradient outer-product
    /// average.
    pub fn cov(&self) -> Result<DMatrix<f64>> {
        let k = self.last_k.as_ref().ok_or(Error::SingularKkt)?;
        let n = self.d + self.m;
        let mut mid = DMatrix::zeros(n, n);
        mid.view_mut((0, 0), (self.d, self.d))
            .copy_from(&(&self.grad_outer_sum / self.count.max(1) as f64));
        let lu = k.clone().lu();
        let x = lu.solve(&mid).ok_or(Error::SingularKkt)?;
        let xi = lu
            .solve(&x.transpose())
            .ok_or(Error::SingularKkt)?
            .transpose();
        Ok((&xi + xi.transpose()) * 0.5)
    }

    pub fn confint(
        &self,
        center_vec: &DVector<f64>,
        w: &DVector<f64>,
        level: f64,
        scaling: PluginScaling,
    ) -> Result<ConfidenceInterval> {
        let xi = self.cov()?;
        let z = normal_quantile((1.0 + level) / 2.0);
        let quad = (w.transpose() * xi * w)[(0, 0)];
        let clamped = quad < 0.0;
        let quad = quad.max(0.0);
        let half = match scaling {
            PluginScaling::Averaged => z * (quad / self.count as f64).sqrt(),
            PluginScaling::Last { beta_t } => z * (beta_t * quad).sqrt(),
        };
        Ok(ConfidenceInterval { center: w.dot(center_vec), half_width: half, level, clamped })
    }
}

/// Non-overlapping batch-means covariance with the growing batch schedule
/// `a_m = ⌊m^{2/(1−β)}⌋`.
#[derive(Debug, Clone)]
pub struct BatchMeansState {
    beta_exp: f64,
    completed: Vec<(DVector<f64>, usize)>,
    cur_sum: DVector<f64>,
    cur_len: usize,
    batch_idx: usize,
    next_boundary: u64,
    t: u64,
}

impl BatchMeansState {
    pub fn new(n: usize, beta_exp: f64) -> Self {
        BatchMeansState {
            beta_exp,
            completed: Vec::new(),
            cur_sum: DVector::zeros(n),
            cur_len: 0,
            batch_idx: 1,
            next_boundary: Self::boundary(2, beta_exp),
            t: 0,
        }
    }

    /// `a_m = ⌊m^{2/(1−β)}⌋`
    pub fn boundary(m: usize, beta_exp: f64) -> u64 {
        (m as f64).powf(2.0 / (1.0 - beta_exp)).floor() as u64
    }

    pub fn completed_batches(&self) -> usize {
        self.completed.len()
    }

    pub fn update(&mut self, s_t: &DVector<f64>) {
        let i = self.t + 1; // 1-based sample index
        while i >= self.next_boundary {
            if self.cur_len > 0 {
                self.completed
                    .push((&self.cur_sum / self.cur_len as f64, self.cur_len));
                self.cur_sum.fill(0.0);
                self.cur_len = 0;
            }
            self.batch_idx += 1;
            self.next_boundary = Self::boundary(self.batch_idx + 1, self.beta_exp);
        }
        self.cur_sum += s_t;
        self.cur_len += 1;
        self.t = i;
    }

    /// Batch-means interval around `wᵀ s̄_t`; `None` before two batches
    /// have completed.
    pub fn confint(
        &self,
        s_bar: &DVector<f64>,
        w: &DVector<f64>,
        level: f64,
    ) -> Option<ConfidenceInterval> {
        let m = self.completed.len();
        if m < 2 || self.t == 0 {
            return None;
        }
        // w^T Σ̂_BM w with Σ̂_BM = (1/M) Σ n_k (b̄_k − s̄)(b̄_k − s̄)^T
        let ws = w.dot(s_bar);
        let quad: f64 = self
            .completed
            .iter()
            .map(|(b, n)| *n as f64 * (w.dot(b) - ws).powi(2))
            .sum::<f64>()
            / m as f64;
        let z = normal_quantile((1.0 + level) / 2.0);
        Some(ConfidenceInterval {
            center: ws,
            half_width: z * (quad / self.t as f64).sqrt(),
            level,
            clamped: false,
        })
    }
}

/// Named inference procedures built from one AI-SSQP trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "AveRS")]
    AveRs,
    #[serde(rename = "AvePlugIn")]
    AvePlugIn,
    #[serde(rename = "AveBM")]
    AveBm,
    #[serde(rename = "LastPlugIn")]
    LastPlugIn,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::AveRs => "AveRS",
            Method::AvePlugIn => "AvePlugIn",
            Method::AveBm => "AveBM",
            Method::LastPlugIn => "LastPlugIn",
        }
    }

    pub fn all() -> Vec<Method> {
        vec![Method::AveRs, Method::AvePlugIn, Method::AveBm, Method::LastPlugIn]
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "avers" | "ave_rs" | "rs" => Ok(Method::AveRs),
            "aveplugin" | "ave_plugin" => Ok(Method::AvePlugIn),
            "avebm" | "ave_bm" | "bm" => Ok(Method::AveBm),
            "lastplugin" | "last_plugin" => Ok(Method::LastPlugIn),
            other => Err(Error::InvalidConfig(format!("unknown method '{other}'"))),
        }
    }
}

/// The functional direction `w`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum WSpec {
    /// `w = (1/d, …, 1/d, 0, …, 0)`: the coordinate-wise average of the
    /// model parameter.
    CoordAverage,
    Custom(Vec<f64>),
}

/// Inference settings threaded through a run.
#[derive(Debug, Clone)]
pub struct InferenceConfig {
    pub level: f64,
    pub w: WSpec,
    pub methods: Vec<Method>,
}

impl InferenceConfig {
    pub fn default_with_methods(methods: Vec<Method>) -> Self {
        InferenceConfig { level: 0.95, w: WSpec::CoordAverage, methods }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "confidence level {} must lie in (0, 1)",
                self.level
            )));
        }
        Ok(())
    }

    pub fn weight_vector(&self, problem: &ProblemSpec) -> Result<DVector<f64>> {
        self.validate()?;
        match &self.w {
            WSpec::CoordAverage => {
                let mut w = DVector::zeros(problem.n());
                for i in 0..problem.d {
                    w[i] = 1.0 / problem.d as f64;
                }
                Ok(w)
            }
            WSpec::Custom(v) => {
                if v.len() != problem.n() {
                    return Err(Error::Dimension(format!(
                        "custom w has length {}, expected d + m = {}",
                        v.len(),
                        problem.n()
                    )));
                }
                Ok(DVector::from_vec(v.clone()))
            }
        }
    }
}

/// Fraction of `w_x` lying outside the row space of the constraint Jacobian.
/// Near-zero with `w_λ = 0` means the direction is degenerate (zero limiting
/// variance) and intervals along it are unreliable.
pub fn tangential_fraction(g: &DMatrix<f64>, w: &DVector<f64>, d: usize) -> f64 {
    let w_x = w.rows(0, d).into_owned();
    let nw = w_x.norm();
    if nw == 0.0 {
        return 0.0;
    }
    let rows = match crate::kkt::null_space_basis(g) {
        Ok(z) => z,
        Err(_) => return 1.0,
    };
    // projection of w_x onto Kernel(G) = the tangential component
    let coeffs = rows.transpose() * &w_x;
    coeffs.norm() / nw
}
