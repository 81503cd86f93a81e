//! Controller synthesis, Lyapunov-certified invariant sets, and Monte
//! Carlo region-of-attraction estimation for a two-wheeled inverted
//! pendulum.
//!
//! The pipeline, end to end:
//!
//! 1. [`model`] — nonlinear pitch/translation dynamics, analytic
//!    linearization around the upright equilibrium, exact zero-order-hold
//!    discretization, RK4 closed-loop stepping;
//! 2. [`controllers`] — saturated LQR, soft-constrained linear MPC with a
//!    maximal positively invariant terminal set, and constraint-tightening
//!    tube MPC with a robust invariant terminal set;
//! 3. [`certification`] — a quadratic Lyapunov function whose sublevel set
//!    is certified invariant for the nonlinear closed loop and admissible
//!    for all three controllers;
//! 4. [`mc`] — parallel Monte Carlo estimation of the region of
//!    attraction, using entry into the certified set as the stopping
//!    condition.
//!
//! The numeric core is generic over the scalar type through [`Scalar`];
//! the aliases below fix the `f64` instantiation the pipeline defaults to.

pub mod certification;
pub mod controllers;
pub mod geometry;
pub mod linalg;
pub mod mc;
pub mod model;
pub mod qp;
pub mod report;
pub mod scalar;

pub use scalar::Scalar;

/// `f64` instantiations of the main pipeline types.
pub type TwipParams = model::TwipParams<f64>;
pub type State = model::State<f64>;
pub type Input = model::Input<f64>;
pub type LinearDiscreteModel = model::LinearDiscreteModel<f64>;
pub type SymmetricMatrix = linalg::SymmetricMatrix<f64>;
pub type Polytope = geometry::Polytope<f64>;
pub type Ellipsoid = geometry::Ellipsoid<f64>;
pub type Interval = geometry::Interval<f64>;
pub type QpProblem = qp::QpProblem<f64>;
pub type QpSolution = qp::QpSolution<f64>;
pub type LqrPolicy = controllers::LqrPolicy<f64>;
pub type MpcPolicy = controllers::MpcPolicy<f64>;
pub type CtmpcPolicy = controllers::CtmpcPolicy<f64>;
pub type Policy = controllers::Policy<f64>;
pub type CertifiedInvariantSet = certification::CertifiedInvariantSet<f64>;
pub type LqrClosedLoop = certification::LqrClosedLoop<f64>;
