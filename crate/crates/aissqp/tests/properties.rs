//! Randomized property checks over the numerical kernels.

use aissqp::inference::RandomScalingState;
use aissqp::kkt::{assemble, regularize, null_space_basis};
use aissqp::model::PrimalDual;
use aissqp::sketch::{sketch_step, solve_exact};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// A bounded-entry matrix strategy.
fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    proptest::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |v| DMatrix::from_vec(rows, cols, v))
}

fn vector(n: usize) -> impl Strategy<Value = DVector<f64>> {
    proptest::collection::vec(-3.0f64..3.0, n).prop_map(DVector::from_vec)
}

/// A full-row-rank constraint Jacobian (rejection-sampled).
fn jacobian(m: usize, d: usize) -> impl Strategy<Value = DMatrix<f64>> {
    matrix(m, d).prop_filter("full row rank", move |g| g.rank(1e-6) == m)
}

/// A regularized KKT system from arbitrary symmetric data.
fn kkt_system(d: usize, m: usize) -> impl Strategy<Value = aissqp::kkt::KktSystem> {
    (matrix(d, d), jacobian(m, d), vector(d), vector(m)).prop_map(move |(a, g, gl, c)| {
        let h = (&a + a.transpose()) * 0.5;
        let (b, delta) = regularize(&h, &g, 0.1).expect("regularize");
        assemble(&b, &g, &gl, &c, delta).expect("assemble")
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Each sketch-and-project step is an orthogonal projection toward the
    /// solution: the error never increases, for any sketch vector.
    #[test]
    fn sketch_step_never_increases_error(
        sys in kkt_system(4, 2),
        z0 in vector(6),
        sketches in proptest::collection::vec(vector(6), 1..20),
    ) {
        let z_star = solve_exact(&sys).unwrap().z;
        let mut z = z0;
        let mut err = (&z - &z_star).norm();
        for s in &sketches {
            z = sketch_step(&sys, &z, s);
            let e = (&z - &z_star).norm();
            prop_assert!(e <= err * (1.0 + 1e-12) + 1e-12);
            err = e;
        }
    }

    /// `regularize` enforces the reduced-Hessian floor with the minimal
    /// uniform shift: the floor holds after, and δ = 0 when it already held.
    #[test]
    fn regularize_enforces_floor_minimally(
        a in matrix(5, 5),
        g in jacobian(2, 5),
        gamma in 1e-3f64..1.0,
    ) {
        let h = (&a + a.transpose()) * 0.5;
        let (b, delta) = regularize(&h, &g, gamma).unwrap();
        let z = null_space_basis(&g).unwrap();
        let red = z.transpose() * &b * &z;
        let red = (&red + red.transpose()) * 0.5;
        let lmin = red.symmetric_eigenvalues().min();
        prop_assert!(lmin >= gamma - 1e-8, "floor violated: {lmin} < {gamma}");
        prop_assert!(delta >= 0.0);
        // minimality: before the shift, the floor failed by exactly δ (up
        // to eigenvalue tolerance)
        let red0 = z.transpose() * &h * &z;
        let red0 = (&red0 + red0.transpose()) * 0.5;
        let lmin0 = red0.symmetric_eigenvalues().min();
        if delta > 0.0 {
            prop_assert!((lmin0 + delta - gamma).abs() <= 1e-8);
        } else {
            prop_assert!(lmin0 >= gamma - 1e-8);
        }
    }

    /// The exact KKT solve really solves the system.
    #[test]
    fn solve_exact_residual_is_small(sys in kkt_system(4, 2)) {
        let dir = solve_exact(&sys).unwrap();
        let resid = (&sys.k * &dir.z - &sys.rhs).norm();
        let scale = 1.0 + sys.rhs.norm();
        prop_assert!(resid <= 1e-8 * scale, "residual {resid}");
    }

    /// Translating the iterate stream translates the interval center and
    /// leaves the half-width unchanged; rescaling rescales both.
    #[test]
    fn random_scaling_equivariance(
        stream in proptest::collection::vec(vector(3), 8..40),
        shift in vector(3),
        scale in 0.1f64..10.0,
    ) {
        let w = DVector::from_vec(vec![0.5, -1.0, 0.25]);
        let mut base = RandomScalingState::new(3);
        let mut moved = RandomScalingState::new(3);
        let mut scaled = RandomScalingState::new(3);
        for s in &stream {
            base.update(s);
            moved.update(&(s + &shift));
            scaled.update(&(s * scale));
        }
        let (b, m, c) = (
            base.confint(&w, 0.95).unwrap(),
            moved.confint(&w, 0.95).unwrap(),
            scaled.confint(&w, 0.95).unwrap(),
        );
        let tol = 1e-7 * (1.0 + b.half_width.abs());
        prop_assert!((m.half_width - b.half_width).abs() <= tol);
        prop_assert!((m.center - (b.center + w.dot(&shift))).abs() <= 1e-7);
        prop_assert!((c.half_width - scale * b.half_width).abs()
            <= 1e-7 * (1.0 + scale * b.half_width.abs()));
        prop_assert!((c.center - scale * b.center).abs() <= 1e-7 * (1.0 + scale * b.center.abs()));
    }

    /// The materialized random-scaling matrix is PSD: quadratic forms are
    /// nonnegative in every direction.
    #[test]
    fn random_scaling_quad_form_nonnegative(
        stream in proptest::collection::vec(vector(3), 2..30),
        w in vector(3),
    ) {
        let mut rs = RandomScalingState::new(3);
        for s in &stream {
            rs.update(s);
        }
        prop_assert!(rs.quad_form(&w) >= -1e-12);
        let v = rs.materialize();
        let direct = (w.transpose() * &v * &w)[(0, 0)];
        prop_assert!((rs.quad_form(&w) - direct).abs() <= 1e-9 * (1.0 + direct.abs()));
    }

    /// Stacking a primal-dual pair and splitting it back is the identity.
    #[test]
    fn primal_dual_stack_roundtrip(x in vector(5), l in vector(2)) {
        let pd = PrimalDual { x: x.clone(), lambda: l.clone() };
        let rt = PrimalDual::from_stacked(&pd.stacked(), 5);
        prop_assert_eq!(rt.x, x);
        prop_assert_eq!(rt.lambda, l);
    }
}
