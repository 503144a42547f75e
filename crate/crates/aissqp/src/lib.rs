//! Adaptive Inexact Stochastic Sequential Quadratic Programming (AI-SSQP)
//! for equality-constrained stochastic optimization, with fully online
//! statistical inference.
//!
//! The library solves problems of the form
//!
//! ```text
//! min_x  E[F(x; ξ)]   s.t.  A x = b,  ‖x‖² = R²
//! ```
//!
//! by a stochastic SQP iteration whose Newton/KKT system may be solved
//! either exactly or inexactly with a sketch-and-project (randomized
//! Kaczmarz) solver. Confidence intervals for linear functionals of the
//! primal-dual solution are produced online by the random-scaling pivotal
//! statistic, alongside plug-in and batch-means baselines.
//!
//! A quick tour:
//!
//! ```
//! use aissqp::model::{DesignCov, LossKind, make_problem};
//! use aissqp::sketch::SketchMode;
//! use aissqp::ssqp::{RunConfig, SolverConfig, run};
//! use aissqp::inference::{InferenceConfig, Method};
//! use rand::SeedableRng;
//! use rand_chacha::ChaCha8Rng;
//!
//! let mut rng = ChaCha8Rng::seed_from_u64(1);
//! let problem = make_problem(LossKind::Squared, 5, 0, DesignCov::identity(), &mut rng).unwrap();
//! let solver = SolverConfig::new(SketchMode::Exact);
//! let run_cfg = RunConfig {
//!     n_iters: 10_000,
//!     seed: 3,
//!     inference: InferenceConfig::default_with_methods(vec![Method::AveRs]),
//!     trace_stride: None,
//! };
//! let record = run(&problem, &solver, &run_cfg).unwrap();
//! assert!(!record.diverged);
//! assert!(record.mae_avg < record.mae_last);
//! ```

pub mod bench;
pub mod inference;
pub mod kkt;
pub mod model;
pub mod sketch;
pub mod ssqp;

/// The user guide's chapters, embedded so every fenced code block in the
/// book compiles and runs as a doc-test against the current API.
#[doc(hidden)]
pub mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/problem.md")]
    pub mod problem {}
    #[doc = include_str!("../../../book/src/algorithm.md")]
    pub mod algorithm {}
    #[doc = include_str!("../../../book/src/sketching.md")]
    pub mod sketching {}
    #[doc = include_str!("../../../book/src/inference.md")]
    pub mod inference {}
    #[doc = include_str!("../../../book/src/benchmarks.md")]
    pub mod benchmarks {}
    #[doc = include_str!("../../../book/src/stabilization.md")]
    pub mod stabilization {}
}

use thiserror::Error;

/// Errors surfaced by the solver and harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("constraint Jacobian is rank deficient")]
    RankDeficient,
    #[error("KKT matrix is singular or numerically ill-conditioned")]
    SingularKkt,
    #[error("failed to generate a problem with full-rank constraints after {0} redraws")]
    DegenerateProblem(usize),
    #[error("iterate diverged to non-finite values")]
    Diverged,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
