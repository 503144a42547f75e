//! Running-average Lagrangian Hessian with null-space regularization, and
//! assembly of the Newton/KKT saddle-point system
//!
//! ```text
//! [ B   Gᵀ ] [Δx]     [∇_x L]
//! [ G   0  ] [Δλ] = − [  c  ]
//! ```
//!
//! `B` is the average of the per-sample Lagrangian Hessians, shifted by
//! `δ I` when its restriction to `Kernel(G)` falls below the `γ_RH` floor.

use nalgebra::{DMatrix, DVector};

use crate::model::{ProblemSpec, Sample};
use crate::{Error, Result};

/// Default eigenvalue floor for the reduced Hessian `Zᵀ B Z`.
///
/// The floor bounds the worst-case Newton direction by `‖rhs‖ / γ_RH`, so
/// it is the primary guard against runaway steps when the sampled
/// curvature is weak (early iterations, or flat directions of saturated
/// logistic problems). A floor of 1 keeps every solve at least as damped
/// as the identity-Hessian start; on strongly convex losses the sampled
/// curvature exceeds it quickly and the shift `δ` self-extinguishes, and
/// for the averaged iterate the limiting covariance is unaffected by any
/// fixed positive-definite damping.
pub const DEFAULT_GAMMA_RH: f64 = 1.0;

/// Running sum of stochastic Lagrangian Hessians `∇̄²_x L_i`.
#[derive(Debug, Clone)]
pub struct HessianAccumulator {
    sum_h: DMatrix<f64>,
    count: usize,
}

impl HessianAccumulator {
    pub fn new(d: usize) -> Self {
        HessianAccumulator { sum_h: DMatrix::zeros(d, d), count: 0 }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Adds the current sample's Lagrangian Hessian. The caller must read
    /// [`average`](Self::average) *before* this call when forming `B_t`, so
    /// the system at step `t` never contains the step-`t` sample.
    pub fn accumulate(
        &mut self,
        problem: &ProblemSpec,
        x: &DVector<f64>,
        lambda: &DVector<f64>,
        sample: &Sample,
    ) -> Result<()> {
        if x.len() != self.sum_h.nrows() {
            return Err(Error::Dimension(format!(
                "accumulator is {}-dimensional, iterate is {}-dimensional",
                self.sum_h.nrows(),
                x.len()
            )));
        }
        self.sum_h += problem.stochastic_hessian(x, sample);
        // sphere row contributes 2 λ_sphere I
        let shift = 2.0 * lambda[problem.m_lin];
        for i in 0..self.sum_h.nrows() {
            self.sum_h[(i, i)] += shift;
        }
        self.count += 1;
        Ok(())
    }

    /// Average Hessian `(1/t) Σ ∇̄²_x L_i`. The empty average is the
    /// identity, giving a damped-Newton start.
    pub fn average(&self) -> DMatrix<f64> {
        if self.count == 0 {
            DMatrix::identity(self.sum_h.nrows(), self.sum_h.ncols())
        } else {
            &self.sum_h / self.count as f64
        }
    }
}

/// Orthonormal basis of `Kernel(G)` via modified Gram-Schmidt: orthonormalize
/// the rows of `G`, then sweep the standard basis and keep what survives.
pub fn null_space_basis(g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (m, d) = g.shape();
    let mut rows: Vec<DVector<f64>> = Vec::with_capacity(m);
    for i in 0..m {
        let mut v: DVector<f64> = g.row(i).transpose();
        let scale = v.norm();
        for u in &rows {
            let p = u.dot(&v);
            v.axpy(-p, u, 1.0);
        }
        // second pass for stability
        for u in &rows {
            let p = u.dot(&v);
            v.axpy(-p, u, 1.0);
        }
        if v.norm() <= 1e-10 * scale.max(1.0) {
            return Err(Error::RankDeficient);
        }
        let n = v.norm();
        rows.push(v / n);
    }
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(d - m);
    for i in 0..d {
        if basis.len() == d - m {
            break;
        }
        let mut v = DVector::zeros(d);
        v[i] = 1.0;
        for _ in 0..2 {
            for u in rows.iter().chain(basis.iter()) {
                let p = u.dot(&v);
                v.axpy(-p, u, 1.0);
            }
        }
        let n = v.norm();
        if n > 1e-8 {
            basis.push(v / n);
        }
    }
    if basis.len() != d - m {
        return Err(Error::RankDeficient);
    }
    let mut z = DMatrix::zeros(d, d - m);
    for (j, v) in basis.iter().enumerate() {
        z.column_mut(j).copy_from(v);
    }
    Ok(z)
}

/// Shifts `avg_H` by `δ I` so that the reduced Hessian `Zᵀ B Z` has smallest
/// eigenvalue at least `gamma_rh`, with the minimal deterministic `δ`.
pub fn regularize(
    avg_h: &DMatrix<f64>,
    g: &DMatrix<f64>,
    gamma_rh: f64,
) -> Result<(DMatrix<f64>, f64)> {
    let z = null_space_basis(g)?;
    if z.ncols() == 0 {
        return Ok((avg_h.clone(), 0.0));
    }
    let reduced = z.transpose() * avg_h * &z;
    let sym = (&reduced + reduced.transpose()) * 0.5;
    let lambda_min = sym.symmetric_eigen().eigenvalues.min();
    if lambda_min >= gamma_rh {
        Ok((avg_h.clone(), 0.0))
    } else {
        let delta = gamma_rh - lambda_min;
        let mut b = avg_h.clone();
        for i in 0..b.nrows() {
            b[(i, i)] += delta;
        }
        Ok((b, delta))
    }
}

/// The assembled saddle-point system `K z = rhs`.
#[derive(Debug, Clone)]
pub struct KktSystem {
    pub k: DMatrix<f64>,
    pub rhs: DVector<f64>,
    pub delta_applied: f64,
    pub d: usize,
    pub m: usize,
}

/// Builds `K = [[B, Gᵀ], [G, 0]]` and `rhs = −(∇_x L; c)`, verifying
/// invertibility through an LU factorization with a pivot-ratio estimate.
pub fn assemble(
    b: &DMatrix<f64>,
    g: &DMatrix<f64>,
    grad_lx: &DVector<f64>,
    c: &DVector<f64>,
    delta_applied: f64,
) -> Result<KktSystem> {
    let d = b.nrows();
    let m = g.nrows();
    if g.ncols() != d || grad_lx.len() != d || c.len() != m {
        return Err(Error::Dimension("assemble: inconsistent block shapes".into()));
    }
    let n = d + m;
    let mut k = DMatrix::zeros(n, n);
    k.view_mut((0, 0), (d, d)).copy_from(b);
    k.view_mut((0, d), (d, m)).copy_from(&g.transpose());
    k.view_mut((d, 0), (m, d)).copy_from(g);
    let mut rhs = DVector::zeros(n);
    for i in 0..d {
        rhs[i] = -grad_lx[i];
    }
    for i in 0..m {
        rhs[d + i] = -c[i];
    }

    let lu = k.clone().lu();
    let u = lu.u();
    let mut max_p = 0.0f64;
    let mut min_p = f64::INFINITY;
    for i in 0..n {
        let p = u[(i, i)].abs();
        max_p = max_p.max(p);
        min_p = min_p.min(p);
    }
    if !(min_p > 1e-12 * max_p.max(1.0)) {
        return Err(Error::SingularKkt);
    }
    Ok(KktSystem { k, rhs, delta_applied, d, m })
}
