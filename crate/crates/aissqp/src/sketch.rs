//! Newton-system solvers: dense exact solve and the sketch-and-project
//! iteration with coordinate (randomized Kaczmarz) or Gaussian sketches.
//!
//! Each sketch step projects the current guess onto the solution set of a
//! one-dimensional sketched subsystem `sᵀ K z = sᵀ rhs`; the projection is
//! orthogonal, so the error `‖z − z̃‖` never increases.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::kkt::KktSystem;
use crate::{Error, Result};

/// How the KKT system is solved at each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SketchMode {
    /// Dense factorization of the full system.
    Exact,
    /// `tau` coordinate-sketch steps with `s ~ Uniform{e_1..e_n}`.
    Kaczmarz { tau: usize },
    /// `tau` steps with i.i.d. standard normal sketch vectors.
    GaussianVector { tau: usize },
}

impl SketchMode {
    pub fn validate(&self) -> Result<()> {
        match self {
            SketchMode::Exact => Ok(()),
            SketchMode::Kaczmarz { tau } | SketchMode::GaussianVector { tau } => {
                if *tau >= 1 {
                    Ok(())
                } else {
                    Err(Error::InvalidConfig(
                        "sketching steps tau must be at least 1".into(),
                    ))
                }
            }
        }
    }
}

/// An (approximate) Newton direction with its multiply-add count.
///
/// Flop counting treats a fused multiply-add as one flop; the counts are a
/// self-consistent convention, not a hardware measurement.
#[derive(Debug, Clone)]
pub struct NewtonDirection {
    pub z: DVector<f64>,
    pub flops_used: u64,
}

impl NewtonDirection {
    pub fn flops(&self) -> u64 {
        self.flops_used
    }
}

/// Solves `K z = rhs` by dense LU with a residual check.
pub fn solve_exact(sys: &KktSystem) -> Result<NewtonDirection> {
    let n = sys.k.nrows();
    let lu = sys.k.clone().lu();
    let z = lu.solve(&sys.rhs).ok_or(Error::SingularKkt)?;
    let resid = (&sys.k * &z - &sys.rhs).norm();
    if !(resid <= 1e-8 * (1.0 + sys.rhs.norm())) {
        return Err(Error::SingularKkt);
    }
    let n3 = (n * n * n) as u64;
    let n2 = (n * n) as u64;
    Ok(NewtonDirection { z, flops_used: n3 / 3 + 2 * n2 })
}

/// One sketch-and-project step with a general sketch vector `s`:
/// `z' = z − (sᵀ r / sᵀ K² s) K s` with residual `r = K z − rhs`, and the
/// scalar pseudoinverse mapping `sᵀ K² s = 0` to the identity step.
pub fn sketch_step(sys: &KktSystem, z: &DVector<f64>, s: &DVector<f64>) -> DVector<f64> {
    let ks = &sys.k * s;
    let denom = ks.norm_squared();
    if denom == 0.0 {
        return z.clone();
    }
    let resid = ks.dot(z) - s.dot(&sys.rhs); // s^T (K z − rhs), K symmetric
    z - (resid / denom) * ks
}

/// Runs `tau` sketch steps from `z = 0`, drawing sketch vectors i.i.d.
/// according to the configured mode. The coordinate mode touches a single
/// column of `K` per step, costing `Θ(d+m)` flops.
pub fn solve_sketched<R: Rng>(
    sys: &KktSystem,
    mode: SketchMode,
    rng: &mut R,
) -> Result<NewtonDirection> {
    mode.validate()?;
    let n = sys.k.nrows();
    let mut z = DVector::zeros(n);
    let mut flops: u64 = 0;
    match mode {
        SketchMode::Exact => {
            return Err(Error::InvalidConfig(
                "solve_sketched requires a sketching mode".into(),
            ))
        }
        SketchMode::Kaczmarz { tau } => {
            for _ in 0..tau {
                let i = rng.gen_range(0..n);
                let col = sys.k.column(i);
                let denom = col.norm_squared();
                if denom > 0.0 {
                    // K symmetric: row i of K equals column i
                    let resid = col.dot(&z) - sys.rhs[i];
                    z.axpy(-resid / denom, &col.into_owned(), 1.0);
                }
                flops += 3 * n as u64 + 2;
            }
        }
        SketchMode::GaussianVector { tau } => {
            for _ in 0..tau {
                let s = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
                z = sketch_step(sys, &z, &s);
                flops += 2 * (n * n) as u64 + 4 * n as u64;
            }
        }
    }
    Ok(NewtonDirection { z, flops_used: flops })
}
