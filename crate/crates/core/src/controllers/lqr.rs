//! Saturated linear quadratic regulator.

use nalgebra::RowVector4;

use super::{ControllerKind, ControllerPolicy, PolicyOutput, PolicyStatus};
use crate::model::{Input, State};
use crate::scalar::Scalar;

/// State feedback `u = sat(-K x)` with elementwise saturation at the
/// actuator bound.
#[derive(Debug, Clone)]
pub struct LqrPolicy<T: Scalar> {
    gain: RowVector4<T>,
    u_max: T,
}

impl<T: Scalar> LqrPolicy<T> {
    pub fn new(gain: RowVector4<T>, u_max: T) -> Self {
        Self { gain, u_max }
    }

    pub fn gain(&self) -> &RowVector4<T> {
        &self.gain
    }

    pub fn u_max(&self) -> T {
        self.u_max
    }

    /// The raw control law without the divergence guard.
    pub fn feedback(&self, x: &State<T>) -> T {
        let v = x.to_vector();
        (-(self.gain * v))[(0, 0)].clamp(-self.u_max, self.u_max)
    }
}

impl<T: Scalar> ControllerPolicy<T> for LqrPolicy<T> {
    fn compute(&mut self, x: &State<T>) -> PolicyOutput<T> {
        if !x.within_guard() {
            return PolicyOutput {
                input: Input::zero(),
                status: PolicyStatus::DivergedGuard,
            };
        }
        PolicyOutput {
            input: Input::new(self.feedback(x)),
            status: PolicyStatus::Ok,
        }
    }

    fn reset_warm_start(&mut self) {}

    fn kind(&self) -> ControllerKind {
        ControllerKind::Lqr
    }
}
