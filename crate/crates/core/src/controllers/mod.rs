//! The three control policies behind one uniform contract, the embedded
//! convex QP machinery, and the offline tube synthesis.
//!
//! All three controllers enforce the hard actuator bound `|u| <= u_max`;
//! state constraints, where present, are softened with slack penalties so
//! that receding-horizon simulation stays feasible.

mod condensed;
mod ctmpc;
mod lqr;
mod mpc;
mod shooting;

pub use condensed::HingeDiagnostics;
pub use ctmpc::{delta_sequence, synthesize_tube, CtmpcPolicy, CtmpcSettings, Tube};
pub use lqr::LqrPolicy;
pub use mpc::{MpcPolicy, MpcSettings};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Input, State};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("riccati synthesis failed: {0}")]
    Linalg(#[from] crate::linalg::LinalgError),
    #[error("terminal set computation failed: {0}")]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error("model construction failed: {0}")]
    Model(#[from] crate::model::ModelError),
    #[error("tube contraction certificate failed: lambda_max {achieved} > alpha {alpha}")]
    ContractionViolated { achieved: f64, alpha: f64 },
    #[error("contraction rate must lie in (0, 1), got {0}")]
    InvalidContraction(f64),
    #[error("input tightening exceeds the actuator bound at stage {stage}")]
    InputTightenedAway { stage: usize },
    #[error("tightened terminal set lost the origin")]
    TerminalSetEmpty,
    #[error("horizon must be at least 1")]
    ZeroHorizon,
}

/// Outcome classification of a policy evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyStatus {
    Ok,
    Infeasible,
    DivergedGuard,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyOutput<T> {
    pub input: Input<T>,
    pub status: PolicyStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    Lqr,
    Mpc,
    Ctmpc,
}

impl ControllerKind {
    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::Lqr => "lqr",
            ControllerKind::Mpc => "mpc",
            ControllerKind::Ctmpc => "ctmpc",
        }
    }
}

impl std::fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Uniform contract: map a state to a motor voltage with `|u| <= u_max`.
///
/// Implementations may carry mutable solver workspaces (warm starts), so
/// each concurrent worker owns its own instance; `reset_warm_start` clears
/// the workspace at the start of a rollout so results do not depend on
/// work scheduling.
pub trait ControllerPolicy<T: Scalar> {
    fn compute(&mut self, x: &State<T>) -> PolicyOutput<T>;
    fn reset_warm_start(&mut self);
    fn kind(&self) -> ControllerKind;
}

/// Enum dispatch over the three policies, cloneable per worker.
#[derive(Debug, Clone)]
pub enum Policy<T: Scalar> {
    Lqr(LqrPolicy<T>),
    Mpc(Box<MpcPolicy<T>>),
    Ctmpc(Box<CtmpcPolicy<T>>),
}

impl<T: Scalar> ControllerPolicy<T> for Policy<T> {
    fn compute(&mut self, x: &State<T>) -> PolicyOutput<T> {
        match self {
            Policy::Lqr(p) => p.compute(x),
            Policy::Mpc(p) => p.compute(x),
            Policy::Ctmpc(p) => p.compute(x),
        }
    }

    fn reset_warm_start(&mut self) {
        match self {
            Policy::Lqr(p) => p.reset_warm_start(),
            Policy::Mpc(p) => p.reset_warm_start(),
            Policy::Ctmpc(p) => p.reset_warm_start(),
        }
    }

    fn kind(&self) -> ControllerKind {
        match self {
            Policy::Lqr(p) => p.kind(),
            Policy::Mpc(p) => p.kind(),
            Policy::Ctmpc(p) => p.kind(),
        }
    }
}

#[cfg(test)]
pub(crate) mod tests_support {
    use crate::model::LinearDiscreteModel;
    use crate::scalar::Scalar;
    use nalgebra::DMatrix;

    pub fn to_dyn<T: Scalar>(m: &LinearDiscreteModel<T>) -> (DMatrix<T>, DMatrix<T>) {
        super::mpc::to_dynamic(&m.a, &m.b)
    }
}

/// Symmetric state constraint bounds; the axle position is unconstrained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateBounds<T> {
    pub velocity: T,
    pub pitch: T,
    pub pitch_rate: T,
}

impl<T: Scalar> StateBounds<T> {
    pub(crate) fn polytope(&self) -> crate::geometry::Polytope<T> {
        crate::geometry::Polytope::symmetric_box(&[
            None,
            Some(self.velocity),
            Some(self.pitch),
            Some(self.pitch_rate),
        ])
        .expect("positive bounds yield a valid polytope")
    }
}
