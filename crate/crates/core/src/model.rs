//! Nonlinear two-wheeled inverted pendulum model.
//!
//! Planar pitch/translation dynamics of a TWIP driven by two geared DC
//! motors, its linearization around the upright equilibrium, exact
//! zero-order-hold discretization, and a fixed-step RK4 integrator for
//! closed-loop simulation.
//!
//! The state is `[x_w, xdot_w, theta, thetadot]`: wheel-axle position [m],
//! its velocity [m/s], body pitch angle [rad] (0 = upright), and pitch
//! rate [rad/s]. The input is the motor voltage [V], identical on both
//! motors. The pitch angle lives on the real line; divergent trajectories
//! are detected by magnitude, not by wrapping.

use nalgebra::{Matrix4, Matrix5, Vector4};
use thiserror::Error;

use crate::scalar::Scalar;

/// Any state component beyond this magnitude flags the trajectory as
/// diverged and short-circuits simulation.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("parameter `{0}` must be strictly positive")]
    NonPositiveParameter(&'static str),
    #[error("motor constant must be nonnegative")]
    NegativeMotorConstant,
    #[error("mass matrix is singular somewhere on the pitch circle: min d1 = {0}")]
    SingularMassMatrix(f64),
    #[error("non-finite input to the dynamics")]
    NonFiniteInput,
    #[error("sampling period must be strictly positive")]
    NonPositiveSamplingPeriod,
    #[error("substep count must be at least 1")]
    ZeroSubsteps,
}

/// Physical constants of the TWIP robot.
///
/// The nominal values reproduce the reference discrete-time model used by
/// the whole pipeline (see [`TwipParams::nominal`]).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwipParams<T: Scalar> {
    /// Wheel separation [m]. Unused by the planar dynamics; kept for
    /// completeness of the physical description.
    pub wheel_separation: T,
    /// Distance from the wheel axle to the body center of mass [m].
    pub com_distance: T,
    /// Wheel radius [m].
    pub wheel_radius: T,
    /// Body mass [kg].
    pub body_mass: T,
    /// Mass of each wheel [kg].
    pub wheel_mass: T,
    /// Spin inertia of each wheel about its axle [kg m^2].
    pub wheel_inertia: T,
    /// Gravitational acceleration [m/s^2].
    pub gravity: T,
    /// Gearbox reduction ratio [-].
    pub gear_ratio: T,
    /// Motor torque/back-EMF constant [N m / A]. Zero disables actuation
    /// (useful for unforced-dynamics probes).
    pub motor_constant: T,
    /// Motor coil resistance [Ohm].
    pub coil_resistance: T,
    /// Body pitch-axis inertia about the center of mass [kg m^2].
    pub pitch_inertia: T,
}

/// Lumped coefficients of the equations of motion.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Lumped<T> {
    /// a = m_B * l
    pub a: T,
    /// I_O = I_2 + m_B * l^2
    pub i_o: T,
    /// m_O = m_B + 2 m_W + 2 J / r^2
    pub m_o: T,
    /// Voltage-to-axle-torque gain of the twin geared motors: 2 i_gb K / R_M.
    pub torque_gain: T,
    /// Back-EMF constant seen at the wheel: K i_gb.
    pub back_emf: T,
}

impl<T: Scalar> TwipParams<T> {
    /// Validates the parameter set.
    ///
    /// All geometric and inertial constants must be strictly positive and
    /// the mass matrix must be invertible for every pitch angle, i.e.
    /// `d1(theta) = I_O m_O - a^2 cos^2(theta) > 0`. The minimum over theta
    /// is attained at `cos^2 = 1`, so `I_O m_O > a^2` is checked directly.
    pub fn new(params: TwipParams<T>) -> Result<Self, ModelError> {
        let positive: [(&'static str, T); 10] = [
            ("wheel_separation", params.wheel_separation),
            ("com_distance", params.com_distance),
            ("wheel_radius", params.wheel_radius),
            ("body_mass", params.body_mass),
            ("wheel_mass", params.wheel_mass),
            ("wheel_inertia", params.wheel_inertia),
            ("gravity", params.gravity),
            ("gear_ratio", params.gear_ratio),
            ("coil_resistance", params.coil_resistance),
            ("pitch_inertia", params.pitch_inertia),
        ];
        for (name, value) in positive {
            if !(value > T::zero()) {
                return Err(ModelError::NonPositiveParameter(name));
            }
        }
        if !(params.motor_constant >= T::zero()) {
            return Err(ModelError::NegativeMotorConstant);
        }
        let lumped = params.lumped();
        let d1_min = lumped.i_o * lumped.m_o - lumped.a * lumped.a;
        if !(d1_min > T::zero()) {
            return Err(ModelError::SingularMassMatrix(d1_min.to_f64_lossy()));
        }
        Ok(params)
    }

    /// Nominal parameter set of the reference robot.
    ///
    /// These values make the zero-order-hold discretization at
    /// `Ts = 0.01 s` land on the reference discrete model to better than
    /// 5e-4 relative in every matrix entry, which is what the rest of the
    /// pipeline (gains, invariant sets, Monte Carlo fractions) is anchored
    /// to.
    pub fn nominal() -> Self {
        Self {
            wheel_separation: T::cast(0.10),
            com_distance: T::cast(0.01),
            wheel_radius: T::cast(0.04),
            body_mass: T::cast(0.368),
            wheel_mass: T::cast(0.02),
            wheel_inertia: T::cast(2.25e-5),
            gravity: T::cast(9.81),
            gear_ratio: T::cast(49.86),
            motor_constant: T::cast(1.5e-3),
            coil_resistance: T::cast(12.0),
            pitch_inertia: T::cast(2.175e-4),
        }
    }

    pub(crate) fn lumped(&self) -> Lumped<T> {
        let two = T::cast(2.0);
        let a = self.body_mass * self.com_distance;
        let i_o = self.pitch_inertia + self.body_mass * self.com_distance * self.com_distance;
        let m_o = self.body_mass
            + two * self.wheel_mass
            + two * self.wheel_inertia / (self.wheel_radius * self.wheel_radius);
        let torque_gain = two * self.gear_ratio * self.motor_constant / self.coil_resistance;
        let back_emf = self.motor_constant * self.gear_ratio;
        Lumped {
            a,
            i_o,
            m_o,
            torque_gain,
            back_emf,
        }
    }

    /// `d1(theta)`, the mass-matrix determinant at the given pitch angle.
    pub fn mass_determinant(&self, pitch: T) -> T {
        let l = self.lumped();
        let c = pitch.cos();
        l.i_o * l.m_o - l.a * l.a * c * c
    }
}

/// State of the TWIP: `[x_w, xdot_w, theta, thetadot]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct State<T> {
    /// Wheel-axle position [m].
    pub position: T,
    /// Wheel-axle velocity [m/s].
    pub velocity: T,
    /// Body pitch angle [rad], zero upright.
    pub pitch: T,
    /// Body pitch rate [rad/s].
    pub pitch_rate: T,
}

impl<T: Scalar> State<T> {
    pub fn zero() -> Self {
        Self {
            position: T::zero(),
            velocity: T::zero(),
            pitch: T::zero(),
            pitch_rate: T::zero(),
        }
    }

    pub fn from_vector(v: &Vector4<T>) -> Self {
        Self {
            position: v[0],
            velocity: v[1],
            pitch: v[2],
            pitch_rate: v[3],
        }
    }

    pub fn to_vector(self) -> Vector4<T> {
        Vector4::new(self.position, self.velocity, self.pitch, self.pitch_rate)
    }

    pub fn is_finite(&self) -> bool {
        self.position.is_finite()
            && self.velocity.is_finite()
            && self.pitch.is_finite()
            && self.pitch_rate.is_finite()
    }

    /// True when the state is finite and inside the divergence guard.
    pub fn within_guard(&self) -> bool {
        let lim = T::cast(DIVERGENCE_LIMIT);
        self.is_finite()
            && self.position.abs() <= lim
            && self.velocity.abs() <= lim
            && self.pitch.abs() <= lim
            && self.pitch_rate.abs() <= lim
    }

    pub fn norm(&self) -> T {
        self.to_vector().norm()
    }
}

/// Motor voltage input [V].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Input<T> {
    pub voltage: T,
}

impl<T: Scalar> Input<T> {
    pub fn new(voltage: T) -> Self {
        Self { voltage }
    }

    pub fn zero() -> Self {
        Self { voltage: T::zero() }
    }
}

/// Time derivative of the state, `[xdot_w, xddot_w, thetadot, thetaddot]`.
pub type StateDerivative<T> = Vector4<T>;

/// Discrete-time LTI model `x_{k+1} = A x_k + B u_k` at sampling period `ts`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDiscreteModel<T: Scalar> {
    pub a: Matrix4<T>,
    pub b: Vector4<T>,
    pub ts: T,
}

impl<T: Scalar> LinearDiscreteModel<T> {
    pub fn step(&self, x: &Vector4<T>, u: T) -> Vector4<T> {
        self.a * x + self.b * u
    }
}

/// Right-hand side of the equations of motion.
///
/// The axle torque produced by the two geared motors is
/// `T_axle = (2 i_gb K / R_M) (u - K i_gb (xdot/r - thetadot))`, and the
/// accelerations follow from inverting the 2x2 pitch/translation mass
/// matrix with determinant `d1(theta)`.
pub fn continuous_dynamics<T: Scalar>(
    x: &State<T>,
    u: Input<T>,
    p: &TwipParams<T>,
) -> Result<StateDerivative<T>, ModelError> {
    if !x.is_finite() || !u.voltage.is_finite() {
        return Err(ModelError::NonFiniteInput);
    }
    Ok(dynamics_unchecked(x, u.voltage, p))
}

#[inline]
fn dynamics_unchecked<T: Scalar>(x: &State<T>, u: T, p: &TwipParams<T>) -> StateDerivative<T> {
    let l = p.lumped();
    let (sin, cos) = x.pitch.sin_cos();
    let d1 = l.i_o * l.m_o - l.a * l.a * cos * cos;
    let torque =
        l.torque_gain * (u - l.back_emf * (x.velocity / p.wheel_radius - x.pitch_rate));
    let w2 = x.pitch_rate * x.pitch_rate;
    let accel = (l.a * l.i_o * w2 * sin - l.a * l.a * p.gravity * sin * cos
        + torque * (l.i_o / p.wheel_radius + l.a * cos))
        / d1;
    let pitch_accel = (-l.a * l.a * w2 * sin * cos + l.a * l.m_o * p.gravity * sin
        - torque * (l.m_o + l.a / p.wheel_radius * cos))
        / d1;
    Vector4::new(x.velocity, accel, x.pitch_rate, pitch_accel)
}

/// Analytic Jacobians of [`continuous_dynamics`] at the upright equilibrium
/// `x = 0`, `u = 0`.
pub fn linearize<T: Scalar>(p: &TwipParams<T>) -> (Matrix4<T>, Vector4<T>) {
    let l = p.lumped();
    let r = p.wheel_radius;
    let d1 = l.i_o * l.m_o - l.a * l.a;
    let trans_arm = l.i_o / r + l.a;
    let pitch_arm = l.m_o + l.a / r;
    // dT/du = torque_gain, dT/dv = -torque_gain*back_emf/r,
    // dT/dw = torque_gain*back_emf.
    let dt_dv = -l.torque_gain * l.back_emf / r;
    let dt_dw = l.torque_gain * l.back_emf;

    let mut a_c = Matrix4::zeros();
    a_c[(0, 1)] = T::one();
    a_c[(2, 3)] = T::one();
    a_c[(1, 1)] = trans_arm * dt_dv / d1;
    a_c[(1, 2)] = -l.a * l.a * p.gravity / d1;
    a_c[(1, 3)] = trans_arm * dt_dw / d1;
    a_c[(3, 1)] = -pitch_arm * dt_dv / d1;
    a_c[(3, 2)] = l.a * l.m_o * p.gravity / d1;
    a_c[(3, 3)] = -pitch_arm * dt_dw / d1;

    let mut b_c = Vector4::zeros();
    b_c[1] = trans_arm * l.torque_gain / d1;
    b_c[3] = -pitch_arm * l.torque_gain / d1;

    (a_c, b_c)
}

/// Exact zero-order-hold discretization of `(A_c, B_c)` over `ts`.
///
/// The augmented matrix `[A_c B_c; 0 0]` is exponentiated (Pade with
/// scaling and squaring); the discrete pair is read off its blocks.
pub fn discretize_zoh<T: Scalar>(
    a_c: &Matrix4<T>,
    b_c: &Vector4<T>,
    ts: T,
) -> Result<LinearDiscreteModel<T>, ModelError> {
    if !(ts > T::zero()) {
        return Err(ModelError::NonPositiveSamplingPeriod);
    }
    let mut aug = Matrix5::<T>::zeros();
    for i in 0..4 {
        for j in 0..4 {
            aug[(i, j)] = a_c[(i, j)] * ts;
        }
        aug[(i, 4)] = b_c[i] * ts;
    }
    let exp = aug.exp();
    let mut a = Matrix4::zeros();
    let mut b = Vector4::zeros();
    for i in 0..4 {
        for j in 0..4 {
            a[(i, j)] = exp[(i, j)];
        }
        b[i] = exp[(i, 4)];
    }
    Ok(LinearDiscreteModel { a, b, ts })
}

/// Builds the discrete model for the given parameters and sampling period.
pub fn discretized_model<T: Scalar>(
    p: &TwipParams<T>,
    ts: T,
) -> Result<LinearDiscreteModel<T>, ModelError> {
    let (a_c, b_c) = linearize(p);
    discretize_zoh(&a_c, &b_c, ts)
}

/// Outcome of one integrator step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome<T> {
    Ok(State<T>),
    /// A component left the divergence guard or became non-finite.
    Diverged,
}

impl<T: Scalar> StepOutcome<T> {
    pub fn state(self) -> Option<State<T>> {
        match self {
            StepOutcome::Ok(x) => Some(x),
            StepOutcome::Diverged => None,
        }
    }
}

/// Classical RK4 integration of the nonlinear dynamics over one sampling
/// period with the input held constant (zero-order hold).
///
/// `substeps` equal sub-intervals are taken; non-finite or out-of-guard
/// intermediate states yield [`StepOutcome::Diverged`] rather than an
/// error, matching how the Monte Carlo classifier consumes trajectories.
pub fn step_nonlinear<T: Scalar>(
    x: &State<T>,
    u: Input<T>,
    p: &TwipParams<T>,
    ts: T,
    substeps: usize,
) -> Result<StepOutcome<T>, ModelError> {
    if substeps == 0 {
        return Err(ModelError::ZeroSubsteps);
    }
    if !(ts > T::zero()) {
        return Err(ModelError::NonPositiveSamplingPeriod);
    }
    if !x.within_guard() || !u.voltage.is_finite() {
        return Ok(StepOutcome::Diverged);
    }
    let h = ts / T::cast(substeps as f64);
    let half = h / T::cast(2.0);
    let sixth = h / T::cast(6.0);
    let two = T::cast(2.0);
    let mut v = x.to_vector();
    for _ in 0..substeps {
        let s0 = State::from_vector(&v);
        let k1 = dynamics_unchecked(&s0, u.voltage, p);
        let k2 = dynamics_unchecked(&State::from_vector(&(v + k1 * half)), u.voltage, p);
        let k3 = dynamics_unchecked(&State::from_vector(&(v + k2 * half)), u.voltage, p);
        let k4 = dynamics_unchecked(&State::from_vector(&(v + k3 * h)), u.voltage, p);
        v += (k1 + k2 * two + k3 * two + k4) * sixth;
        let s = State::from_vector(&v);
        if !s.within_guard() {
            return Ok(StepOutcome::Diverged);
        }
    }
    Ok(StepOutcome::Ok(State::from_vector(&v)))
}

/// Total mechanical energy of the pitch/translation subsystem.
///
/// Conserved by the unforced, motor-less model (`u = 0`, `motor_constant = 0`);
/// used as an integrator accuracy probe.
pub fn mechanical_energy<T: Scalar>(x: &State<T>, p: &TwipParams<T>) -> T {
    let l = p.lumped();
    let half = T::cast(0.5);
    let kinetic = half * l.m_o * x.velocity * x.velocity
        + l.a * x.pitch.cos() * x.velocity * x.pitch_rate
        + half * l.i_o * x.pitch_rate * x.pitch_rate;
    let potential = l.a * p.gravity * x.pitch.cos();
    kinetic + potential
}
