//! Constrained stochastic regression problems: synthetic data generation,
//! stochastic gradient/Hessian oracles, and constraint derivatives.
//!
//! A [`ProblemSpec`] couples a loss (squared or logistic) with linear
//! constraints `A x = b` and the sphere constraint `‖x‖² = R²`. The ground
//! truth `x*` is feasible by construction and `λ* = 0` because both models
//! are well specified.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Loss function of the stochastic objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Squared,
    Logistic,
}

impl LossKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::Squared => "squared",
            LossKind::Logistic => "logistic",
        }
    }
}

/// Covariance structure of the covariate design, `ξ_a ~ N(0, 5I + Σ_a)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignKind {
    Identity,
    Toeplitz,
    Equicorr,
}

impl DesignKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DesignKind::Identity => "identity",
            DesignKind::Toeplitz => "toeplitz",
            DesignKind::Equicorr => "equicorr",
        }
    }
}

/// Design covariance `Σ_a`: identity, Toeplitz `r^|i-j|`, or equi-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignCov {
    pub kind: DesignKind,
    /// Correlation parameter, ignored for the identity design.
    pub r: f64,
}

impl DesignCov {
    pub fn identity() -> Self {
        DesignCov { kind: DesignKind::Identity, r: 0.0 }
    }

    pub fn toeplitz(r: f64) -> Self {
        DesignCov { kind: DesignKind::Toeplitz, r }
    }

    pub fn equicorr(r: f64) -> Self {
        DesignCov { kind: DesignKind::Equicorr, r }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind != DesignKind::Identity && !(self.r > 0.0 && self.r < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "design correlation r = {} must lie in (0, 1) for {} designs",
                self.r,
                self.kind.as_str()
            )));
        }
        Ok(())
    }
}

/// One covariate-response pair.
#[derive(Debug, Clone)]
pub struct Sample {
    pub xi_a: DVector<f64>,
    /// Response; lies in {-1, +1} for the logistic loss.
    pub xi_b: f64,
}

/// Joint primal-dual iterate `(x, λ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimalDual {
    pub x: DVector<f64>,
    pub lambda: DVector<f64>,
}

impl PrimalDual {
    pub fn ones(d: usize, m: usize) -> Self {
        PrimalDual { x: DVector::repeat(d, 1.0), lambda: DVector::repeat(m, 1.0) }
    }

    /// Stacks `(x, λ)` into one vector of length `d + m`.
    pub fn stacked(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.x.len() + self.lambda.len());
        v.rows_mut(0, self.x.len()).copy_from(&self.x);
        v.rows_mut(self.x.len(), self.lambda.len()).copy_from(&self.lambda);
        v
    }

    pub fn from_stacked(v: &DVector<f64>, d: usize) -> Self {
        PrimalDual {
            x: v.rows(0, d).into_owned(),
            lambda: v.rows(d, v.len() - d).into_owned(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().all(|v| v.is_finite()) && self.lambda.iter().all(|v| v.is_finite())
    }
}

/// A constrained stochastic regression problem instance.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub loss_kind: LossKind,
    pub d: usize,
    pub m_lin: usize,
    /// Linear constraint matrix, `m_lin × d`.
    pub a: DMatrix<f64>,
    /// Linear constraint right-hand side, `b = A x*`.
    pub b: DVector<f64>,
    /// Sphere radius squared, `R² = ‖x*‖²`.
    pub r2: f64,
    pub x_star: DVector<f64>,
    pub design: DesignCov,
    /// Cached Cholesky factor of the covariate covariance `5I + Σ_a`.
    cov_chol: DMatrix<f64>,
}

/// Builds the design covariance `Σ_a` for a given kind and dimension.
pub fn build_design_matrix(design: DesignCov, d: usize) -> Result<DMatrix<f64>> {
    if d == 0 {
        return Err(Error::InvalidConfig("dimension must be at least 1".into()));
    }
    design.validate()?;
    let sigma = match design.kind {
        DesignKind::Identity => DMatrix::identity(d, d),
        DesignKind::Toeplitz => DMatrix::from_fn(d, d, |i, j| {
            design.r.powi((i as i32 - j as i32).abs())
        }),
        DesignKind::Equicorr => {
            DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { design.r })
        }
    };
    Ok(sigma)
}

const MAX_REDRAWS: usize = 64;

/// Generates a problem with `x*` linearly spaced on [0, 1], i.i.d. standard
/// normal `A`, `b = A x*`, and `R² = ‖x*‖²`. Redraws `A` until the stacked
/// Jacobian `[A; 2 x*ᵀ]` has full row rank.
pub fn make_problem<R: Rng>(
    loss_kind: LossKind,
    d: usize,
    m_lin: usize,
    design: DesignCov,
    rng: &mut R,
) -> Result<ProblemSpec> {
    if d < 2 {
        return Err(Error::InvalidConfig("dimension must be at least 2".into()));
    }
    if m_lin + 1 >= d {
        return Err(Error::InvalidConfig(format!(
            "need m_lin + 1 < d, got m_lin = {m_lin}, d = {d}"
        )));
    }
    design.validate()?;

    let x_star = DVector::from_fn(d, |i, _| i as f64 / (d - 1) as f64);
    let r2 = x_star.norm_squared();

    let sigma = build_design_matrix(design, d)?;
    let cov = DMatrix::identity(d, d) * 5.0 + sigma;
    let cov_chol = cov
        .cholesky()
        .ok_or_else(|| Error::InvalidConfig("covariate covariance is not PD".into()))?
        .l();

    let m = m_lin + 1;
    for attempt in 0..MAX_REDRAWS {
        let a = DMatrix::from_fn(m_lin, d, |_, _| StandardNormal.sample(rng));
        // Stacked Jacobian at x*: [A; 2 x*^T].
        let mut jac = DMatrix::zeros(m, d);
        jac.rows_mut(0, m_lin).copy_from(&a);
        jac.row_mut(m_lin).copy_from(&(2.0 * x_star.transpose()));
        if jac.rank(1e-10) == m {
            let b = &a * &x_star;
            return Ok(ProblemSpec {
                loss_kind,
                d,
                m_lin,
                a,
                b,
                r2,
                x_star,
                design,
                cov_chol,
            });
        }
        if attempt + 1 == MAX_REDRAWS {
            break;
        }
    }
    Err(Error::DegenerateProblem(MAX_REDRAWS))
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl ProblemSpec {
    /// Total constraint dimension (linear rows plus the sphere).
    pub fn m(&self) -> usize {
        self.m_lin + 1
    }

    /// Dimension of the stacked primal-dual vector.
    pub fn n(&self) -> usize {
        self.d + self.m()
    }

    /// Draws one covariate-response pair: `ξ_a ~ N(0, 5I + Σ_a)` and the
    /// response following the linear or logistic model at `x*`.
    pub fn sample_data<R: Rng>(&self, rng: &mut R) -> Sample {
        let z = DVector::from_fn(self.d, |_, _| StandardNormal.sample(rng));
        let xi_a = &self.cov_chol * z;
        let margin = xi_a.dot(&self.x_star);
        let xi_b = match self.loss_kind {
            LossKind::Squared => {
                let eps: f64 = StandardNormal.sample(rng);
                margin + eps
            }
            LossKind::Logistic => {
                let p_plus = sigmoid(margin);
                if rng.gen::<f64>() < p_plus {
                    1.0
                } else {
                    -1.0
                }
            }
        };
        Sample { xi_a, xi_b }
    }

    /// Pointwise loss `F(x; ξ)`; used by finite-difference oracles in tests.
    pub fn pointwise_loss(&self, x: &DVector<f64>, sample: &Sample) -> f64 {
        match self.loss_kind {
            LossKind::Squared => {
                let r = sample.xi_b - sample.xi_a.dot(x);
                0.5 * r * r
            }
            LossKind::Logistic => {
                let z = -sample.xi_b * sample.xi_a.dot(x);
                // log(1 + exp(z)), stable for large |z|
                if z > 0.0 {
                    z + (-z).exp().ln_1p()
                } else {
                    z.exp().ln_1p()
                }
            }
        }
    }

    /// Stochastic objective gradient `∇F(x; ξ)`.
    pub fn stochastic_gradient(&self, x: &DVector<f64>, sample: &Sample) -> DVector<f64> {
        match self.loss_kind {
            LossKind::Squared => {
                let r = sample.xi_b - sample.xi_a.dot(x);
                -r * &sample.xi_a
            }
            LossKind::Logistic => {
                let s = sigmoid(-sample.xi_b * sample.xi_a.dot(x));
                (-sample.xi_b * s) * &sample.xi_a
            }
        }
    }

    /// Stochastic objective Hessian `∇²F(x; ξ)`; symmetric PSD rank-one.
    pub fn stochastic_hessian(&self, x: &DVector<f64>, sample: &Sample) -> DMatrix<f64> {
        let scale = match self.loss_kind {
            LossKind::Squared => 1.0,
            LossKind::Logistic => {
                let s = sigmoid(sample.xi_a.dot(x));
                s * (1.0 - s)
            }
        };
        let mut h = DMatrix::zeros(self.d, self.d);
        h.ger(scale, &sample.xi_a, &sample.xi_a, 1.0);
        h
    }

    /// Constraint values and Jacobian: `c = (Ax − b; ‖x‖² − R²)`,
    /// `G = [A; 2xᵀ]`.
    pub fn constraints(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let m = self.m();
        let mut c = DVector::zeros(m);
        let mut g = DMatrix::zeros(m, self.d);
        if self.m_lin > 0 {
            c.rows_mut(0, self.m_lin).copy_from(&(&self.a * x - &self.b));
            g.rows_mut(0, self.m_lin).copy_from(&self.a);
        }
        c[self.m_lin] = x.norm_squared() - self.r2;
        g.row_mut(self.m_lin).copy_from(&(2.0 * x.transpose()));
        (c, g)
    }

    /// `Σ_j λ_j ∇²c_j(x)`: linear rows contribute nothing, the sphere row
    /// contributes `2 λ_sphere I`.
    pub fn constraint_hessian_contraction(&self, lambda: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(self.d, self.d) * (2.0 * lambda[self.m_lin])
    }

    /// The regular local solution `(x*, λ* = 0)`.
    pub fn true_solution(&self) -> PrimalDual {
        PrimalDual { x: self.x_star.clone(), lambda: DVector::zeros(self.m()) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn design_identity() {
        let s = build_design_matrix(DesignCov::identity(), 3).unwrap();
        assert_eq!(s, DMatrix::identity(3, 3));
    }

    #[test]
    fn design_toeplitz() {
        let s = build_design_matrix(DesignCov::toeplitz(0.5), 3).unwrap();
        let expect = DMatrix::from_row_slice(
            3,
            3,
            &[1.0, 0.5, 0.25, 0.5, 1.0, 0.5, 0.25, 0.5, 1.0],
        );
        assert!((s - expect).norm() < 1e-15);
    }

    #[test]
    fn design_equicorr() {
        let s = build_design_matrix(DesignCov::equicorr(0.2), 2).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 1.0]);
        assert!((s - expect).norm() < 1e-15);
    }

    #[test]
    fn design_rejects_bad_r() {
        assert!(build_design_matrix(DesignCov::toeplitz(1.5), 3).is_err());
        assert!(build_design_matrix(DesignCov::equicorr(0.0), 3).is_err());
        assert!(build_design_matrix(DesignCov::toeplitz(-0.1), 3).is_err());
    }

    #[test]
    fn make_problem_linspace_truth() {
        let mut r = rng(1);
        let p = make_problem(LossKind::Squared, 5, 0, DesignCov::identity(), &mut r).unwrap();
        let expect = DVector::from_vec(vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert!((&p.x_star - expect).norm() < 1e-15);
        assert_eq!(p.m(), 1);
        assert!((p.r2 - p.x_star.norm_squared()).abs() < 1e-15);
    }

    #[test]
    fn make_problem_feasible_truth() {
        let mut r = rng(2);
        let p =
            make_problem(LossKind::Logistic, 20, 2, DesignCov::toeplitz(0.5), &mut r).unwrap();
        assert_eq!(p.m(), 3);
        let (c, g) = p.constraints(&p.x_star);
        assert!(c.norm() < 1e-12, "c(x*) = {c}");
        assert_eq!(g.nrows(), 3);
        assert_eq!(g.rank(1e-10), 3);
    }

    #[test]
    fn make_problem_rejects_bad_dims() {
        let mut r = rng(3);
        assert!(make_problem(LossKind::Squared, 1, 0, DesignCov::identity(), &mut r).is_err());
        assert!(make_problem(LossKind::Squared, 5, 4, DesignCov::identity(), &mut r).is_err());
    }

    #[test]
    fn covariate_covariance_identity_design() {
        // Monte Carlo: cov(ξ_a) ≈ 6 I entrywise within 0.15 over 1e5 draws.
        let mut r = rng(4);
        let p = make_problem(LossKind::Squared, 5, 0, DesignCov::identity(), &mut r).unwrap();
        let n = 100_000;
        let mut cov = DMatrix::zeros(5, 5);
        for _ in 0..n {
            let s = p.sample_data(&mut r);
            cov.ger(1.0 / n as f64, &s.xi_a, &s.xi_a, 1.0);
        }
        for i in 0..5 {
            for j in 0..5 {
                let expect = if i == j { 6.0 } else { 0.0 };
                assert!(
                    (cov[(i, j)] - expect).abs() < 0.15,
                    "cov[{i},{j}] = {}",
                    cov[(i, j)]
                );
            }
        }
    }

    #[test]
    fn logistic_symmetric_at_zero_truth() {
        let mut r = rng(5);
        let mut p =
            make_problem(LossKind::Logistic, 5, 0, DesignCov::identity(), &mut r).unwrap();
        p.x_star = DVector::zeros(5); // synthetic override
        let n = 10_000;
        let mut plus = 0usize;
        for _ in 0..n {
            if p.sample_data(&mut r).xi_b > 0.0 {
                plus += 1;
            }
        }
        let frac = plus as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.02, "P(ξ_b = 1) = {frac}");
    }

    #[test]
    fn squared_noise_variance_is_one() {
        let mut r = rng(6);
        let p = make_problem(LossKind::Squared, 5, 0, DesignCov::identity(), &mut r).unwrap();
        let n = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let s = p.sample_data(&mut r);
            let e = s.xi_b - s.xi_a.dot(&p.x_star);
            sum += e;
            sumsq += e * e;
        }
        let var = sumsq / n as f64 - (sum / n as f64).powi(2);
        assert!((var - 1.0).abs() < 0.05, "var = {var}");
    }

    #[test]
    fn squared_gradient_zero_residual() {
        let mut r = rng(7);
        let p = make_problem(LossKind::Squared, 5, 0, DesignCov::identity(), &mut r).unwrap();
        let s = p.sample_data(&mut r);
        // pick x so that xi_a^T x = xi_b (scale x* direction along xi_a)
        let x = (s.xi_b / s.xi_a.norm_squared()) * &s.xi_a;
        assert!(p.stochastic_gradient(&x, &s).norm() < 1e-12);
    }

    #[test]
    fn squared_gradient_hand_example() {
        let mut r = rng(8);
        let p = make_problem(LossKind::Squared, 2, 0, DesignCov::identity(), &mut r).unwrap();
        let s = Sample { xi_a: DVector::from_vec(vec![1.0, 0.0]), xi_b: 2.0 };
        let g = p.stochastic_gradient(&DVector::zeros(2), &s);
        assert!((g - DVector::from_vec(vec![-2.0, 0.0])).norm() < 1e-15);
    }

    fn fd_gradient(p: &ProblemSpec, x: &DVector<f64>, s: &Sample) -> DVector<f64> {
        let h = 1e-6;
        DVector::from_fn(x.len(), |i, _| {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            (p.pointwise_loss(&xp, s) - p.pointwise_loss(&xm, s)) / (2.0 * h)
        })
    }

    #[test]
    fn oracle_consistency_finite_differences() {
        // gradient and Hessian match finite differences for 100 random pairs
        for &loss in &[LossKind::Squared, LossKind::Logistic] {
            let mut r = rng(9);
            let p = make_problem(loss, 5, 0, DesignCov::toeplitz(0.5), &mut r).unwrap();
            for _ in 0..100 {
                let s = p.sample_data(&mut r);
                let x = DVector::from_fn(5, |_, _| StandardNormal.sample(&mut r));
                let g = p.stochastic_gradient(&x, &s);
                let g_fd = fd_gradient(&p, &x, &s);
                let scale = 1.0 + g.norm();
                assert!((&g - &g_fd).norm() / scale < 1e-5, "{loss:?} gradient fd mismatch");

                let hm = p.stochastic_hessian(&x, &s);
                let h = 1e-5;
                for i in 0..5 {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[i] += h;
                    xm[i] -= h;
                    let col = (p.stochastic_gradient(&xp, &s)
                        - p.stochastic_gradient(&xm, &s))
                        / (2.0 * h);
                    let hscale = 1.0 + hm.norm();
                    assert!(
                        (hm.column(i) - col).norm() / hscale < 1e-4,
                        "{loss:?} hessian fd mismatch"
                    );
                }
            }
        }
    }

    #[test]
    fn hessian_unit_covariate() {
        let mut r = rng(10);
        let p = make_problem(LossKind::Squared, 3, 0, DesignCov::identity(), &mut r).unwrap();
        let mut e1 = DVector::zeros(3);
        e1[0] = 1.0;
        let s = Sample { xi_a: e1.clone(), xi_b: 0.3 };
        let h = p.stochastic_hessian(&DVector::zeros(3), &s);
        let mut expect = DMatrix::zeros(3, 3);
        expect[(0, 0)] = 1.0;
        assert!((h - expect).norm() < 1e-15);
    }

    #[test]
    fn hessian_psd() {
        for &loss in &[LossKind::Squared, LossKind::Logistic] {
            let mut r = rng(11);
            let p = make_problem(loss, 4, 0, DesignCov::identity(), &mut r).unwrap();
            for _ in 0..50 {
                let s = p.sample_data(&mut r);
                let x = DVector::from_fn(4, |_, _| StandardNormal.sample(&mut r));
                let h = p.stochastic_hessian(&x, &s);
                assert!((&h - h.transpose()).norm() < 1e-12);
                let eig = h.symmetric_eigen();
                assert!(eig.eigenvalues.min() >= -1e-12);
            }
        }
    }

    #[test]
    fn constraints_hand_example() {
        // d=2, no linear rows, R2=1, x=(1,1) -> c=(1), G=(2,2)
        let mut r = rng(12);
        let mut p = make_problem(LossKind::Squared, 2, 0, DesignCov::identity(), &mut r).unwrap();
        p.r2 = 1.0;
        let x = DVector::from_vec(vec![1.0, 1.0]);
        let (c, g) = p.constraints(&x);
        assert!((c[0] - 1.0).abs() < 1e-15);
        assert!((g[(0, 0)] - 2.0).abs() < 1e-15 && (g[(0, 1)] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn contraction_is_scaled_identity() {
        let mut r = rng(13);
        let p = make_problem(LossKind::Squared, 3, 0, DesignCov::identity(), &mut r).unwrap();
        assert!(p
            .constraint_hessian_contraction(&DVector::zeros(1))
            .iter()
            .all(|&v| v == 0.0));
        let m = p.constraint_hessian_contraction(&DVector::from_vec(vec![0.5]));
        assert!((m - DMatrix::identity(3, 3)).norm() < 1e-15);
    }

    #[test]
    fn true_solution_is_kkt_point() {
        // E[∇F(x*; ξ)] ≈ 0 by Monte Carlo, so λ* = 0 satisfies the KKT
        // residual bound up to Monte Carlo error.
        for &loss in &[LossKind::Squared, LossKind::Logistic] {
            let mut r = rng(14);
            let p = make_problem(loss, 5, 1, DesignCov::identity(), &mut r).unwrap();
            let sol = p.true_solution();
            assert_eq!(sol.lambda.len(), 2);
            assert!(sol.lambda.norm() == 0.0);
            assert_eq!(sol.x, p.x_star);

            let n = 100_000;
            let mut mean = DVector::zeros(5);
            let mut sumsq = 0.0;
            for _ in 0..n {
                let s = p.sample_data(&mut r);
                let g = p.stochastic_gradient(&p.x_star, &s);
                sumsq += g.norm_squared();
                mean += g;
            }
            mean /= n as f64;
            let se = (sumsq / n as f64 / n as f64).sqrt();
            assert!(mean.norm() <= 3.0 * se, "‖mean grad‖ = {} vs se {}", mean.norm(), se);
        }
    }

    #[test]
    fn gradient_unbiased_squared_closed_form() {
        // E[∇F(x;ξ)] = (5I + Σ_a)(x − x*) for the squared loss.
        let mut r = rng(15);
        let p = make_problem(LossKind::Squared, 4, 0, DesignCov::toeplitz(0.5), &mut r).unwrap();
        let x = DVector::from_fn(4, |_, _| StandardNormal.sample(&mut r));
        let sigma = build_design_matrix(p.design, 4).unwrap();
        let expect = (DMatrix::identity(4, 4) * 5.0 + sigma) * (&x - &p.x_star);
        let n = 100_000;
        let mut mean = DVector::zeros(4);
        let mut sumsq = 0.0;
        for _ in 0..n {
            let s = p.sample_data(&mut r);
            let g = p.stochastic_gradient(&x, &s);
            sumsq += (&g - &expect).norm_squared();
            mean += g;
        }
        mean /= n as f64;
        let se = (sumsq / n as f64 / n as f64).sqrt();
        assert!(
            (&mean - &expect).norm() <= 4.0 * se,
            "bias {} vs 4se {}",
            (&mean - &expect).norm(),
            4.0 * se
        );
    }

    #[test]
    fn sigmoid_overflow_safe() {
        assert!(sigmoid(1000.0) <= 1.0 && sigmoid(1000.0) > 0.999);
        assert!(sigmoid(-1000.0) >= 0.0 && sigmoid(-1000.0) < 1e-100);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}
