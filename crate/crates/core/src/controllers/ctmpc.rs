//! Constraint-tightening (tube) MPC.
//!
//! A disturbance-rejecting feedback contracts the error between the real
//! and nominal trajectories inside a funnel of ellipsoidal cross-sections
//! `F_i = {e : e^T P_tube e <= delta_i^2}` whose radii follow
//! `delta_{i+1} = alpha delta_i + delta_1` from `delta_0 = 0`. The nominal
//! program then runs under constraints tightened by the Pontryagin
//! difference with `F_i`, so every disturbance realization stays feasible.

use nalgebra::{DMatrix, DVector, RowVector4};
use serde::{Deserialize, Serialize};

use crate::geometry::{
    max_robust_positively_invariant, pontryagin_diff_ellipsoid, pontryagin_diff_interval,
    Ellipsoid, FeedbackBound, Interval, Polytope, Segment,
};
use crate::linalg::{eig_sym, solve_dare, solve_discrete_lyapunov, SymmetricMatrix};
use crate::model::{LinearDiscreteModel, State};
use crate::scalar::Scalar;

use super::condensed::{CondensedProblem, HingeDiagnostics, Workspace};
use super::mpc::{finish_output, horizon_compute, to_dynamic, MpcSettings};
use super::shooting::{build_condensed, build_skeleton, HorizonSpec, Skeleton};
use super::{ControllerKind, ControllerPolicy, PolicyOutput, SynthesisError};

/// Tube-specific synthesis knobs, on top of [`MpcSettings`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CtmpcSettings<T> {
    /// Contraction rate `alpha` of the tube, in (0, 1).
    pub contraction: T,
    /// Bound of the additive input disturbance [V].
    pub disturbance_bound: T,
    /// Slack penalty of the tightened program (the nominal MPC uses its
    /// own, typically larger, weight).
    pub slack_weight: T,
}

/// Offline tube synthesis result.
#[derive(Debug, Clone)]
pub struct Tube<T: Scalar> {
    /// Error feedback (convention `u = v + feedback * e`, so
    /// `A + B * feedback` is the contracted error dynamics).
    pub feedback: RowVector4<T>,
    /// Tube shape matrix `P_tube`.
    pub shape: SymmetricMatrix<T>,
    /// Requested contraction rate.
    pub contraction: T,
    /// Largest eigenvalue of the whitened contraction matrix (certified
    /// `<= contraction`).
    pub achieved_contraction: T,
    /// One-step disturbance bound `delta_1`.
    pub delta_one: T,
}

/// Synthesizes the tube for a given contraction rate by a scaled Riccati
/// construction: the DARE gain of `(A/sqrt(alpha), B/sqrt(alpha))` with
/// unit weights contracts the scaled error dynamics, and the Lyapunov
/// solution of the scaled closed loop certifies
/// `(A + B K)^T P (A + B K) <= alpha P` (checked after the fact on the
/// whitened matrix).
pub fn synthesize_tube<T: Scalar>(
    model: &LinearDiscreteModel<T>,
    contraction: T,
    disturbance_bound: T,
) -> Result<Tube<T>, SynthesisError> {
    if !(contraction > T::zero() && contraction < T::one()) {
        return Err(SynthesisError::InvalidContraction(
            contraction.to_f64_lossy(),
        ));
    }
    let sqrt_alpha = contraction.sqrt();
    let (a, b) = to_dynamic(&model.a, &model.b);
    let a_scaled = &a / sqrt_alpha;
    let b_scaled = &b / sqrt_alpha;
    let identity = DMatrix::identity(4, 4);
    let unit = DMatrix::from_element(1, 1, T::one());
    let dare = solve_dare(&a_scaled, &b_scaled, &identity, &unit)?;
    let feedback = RowVector4::from_iterator(dare.gain.iter().map(|g| -*g));

    let a_cl = &a + &b * DMatrix::from_fn(1, 4, |_, j| feedback[j]);
    let a_cl_scaled = &a_cl / sqrt_alpha;
    let shape = solve_discrete_lyapunov(&a_cl_scaled, &identity)?;

    // whitened certificate: lambda_max(L^-1 Acl^T P Acl L^-T) <= alpha
    let l = shape.cholesky_factor().map_err(SynthesisError::Linalg)?;
    let mid = a_cl.transpose() * shape.as_matrix() * &a_cl;
    let l_inv_mid = l
        .clone()
        .lu()
        .solve(&mid)
        .expect("Cholesky factor is invertible");
    let whitened = l
        .lu()
        .solve(&l_inv_mid.transpose())
        .expect("Cholesky factor is invertible");
    let achieved = eig_sym(&SymmetricMatrix::symmetrize(whitened)).values.max();
    if achieved > contraction + T::cast(1e-9) {
        return Err(SynthesisError::ContractionViolated {
            achieved: achieved.to_f64_lossy(),
            alpha: contraction.to_f64_lossy(),
        });
    }

    // delta_1 = max over the two extreme disturbances of |B w|_P
    let mut delta_one = T::zero();
    for sign in [T::one(), -T::one()] {
        let w = DVector::from_iterator(4, model.b.iter().map(|bi| *bi * sign * disturbance_bound));
        let quad = shape.quad_form(&w).max(T::zero()).sqrt();
        delta_one = delta_one.max(quad);
    }

    Ok(Tube {
        feedback,
        shape,
        contraction,
        achieved_contraction: achieved,
        delta_one,
    })
}

/// Funnel radii `delta_0..delta_len` from the recursion
/// `delta_{i+1} = alpha delta_i + delta_1`, `delta_0 = 0`.
pub fn delta_sequence<T: Scalar>(contraction: T, delta_one: T, len: usize) -> Vec<T> {
    let mut deltas = Vec::with_capacity(len + 1);
    deltas.push(T::zero());
    for i in 0..len {
        let next = contraction * deltas[i] + delta_one;
        deltas.push(next);
    }
    deltas
}

/// Constraint-tightening MPC policy.
#[derive(Debug, Clone)]
pub struct CtmpcPolicy<T: Scalar> {
    model: LinearDiscreteModel<T>,
    settings: MpcSettings<T>,
    tube_settings: CtmpcSettings<T>,
    tube: Tube<T>,
    deltas: Vec<T>,
    gain: RowVector4<T>,
    terminal_cost: SymmetricMatrix<T>,
    state_set: Polytope<T>,
    /// Per-stage tightened state offsets (stage 0 untightened).
    stage_offsets: Vec<DVector<T>>,
    /// Per-stage tightened input bounds (half-widths).
    stage_input_bounds: Vec<T>,
    /// Maximal robust positively invariant set before terminal tightening.
    rpi_set: Polytope<T>,
    /// Terminal constraint `X_f^RPI (-) F_N`.
    terminal_set: Polytope<T>,
    condensed: CondensedProblem<T>,
    skeleton: Skeleton<T>,
    workspace: Workspace<T>,
    last_diagnostics: Option<HingeDiagnostics>,
}

impl<T: Scalar> CtmpcPolicy<T> {
    pub fn build(
        model: &LinearDiscreteModel<T>,
        settings: &MpcSettings<T>,
        tube_settings: &CtmpcSettings<T>,
    ) -> Result<Self, SynthesisError> {
        if settings.horizon == 0 {
            return Err(SynthesisError::ZeroHorizon);
        }
        let horizon = settings.horizon;
        let q = settings.q_matrix();
        let (a_dyn, b_dyn) = to_dynamic(&model.a, &model.b);
        let q_mat = DMatrix::from_fn(4, 4, |i, j| q[(i, j)]);
        let r_mat = DMatrix::from_element(1, 1, settings.input_weight);
        let dare = solve_dare(&a_dyn, &b_dyn, &q_mat, &r_mat)?;
        let gain = RowVector4::from_iterator(dare.gain.iter().copied());

        let tube = synthesize_tube(model, tube_settings.contraction, tube_settings.disturbance_bound)?;
        let deltas = delta_sequence(tube_settings.contraction, tube.delta_one, horizon);

        let state_set = settings.bounds.polytope();
        let input_interval = Interval::symmetric(settings.u_max);
        let tube_row = nalgebra::RowDVector::from_iterator(4, tube.feedback.iter().copied());

        let cross_section = |delta: T| -> Ellipsoid<T> {
            Ellipsoid::new(tube.shape.clone(), delta * delta)
                .expect("tube shape is PD and levels are nonnegative")
        };

        let mut stage_offsets = Vec::with_capacity(horizon);
        let mut stage_input_bounds = Vec::with_capacity(horizon);
        for (stage, delta) in deltas.iter().take(horizon).enumerate() {
            let section = cross_section(*delta);
            let tightened = pontryagin_diff_ellipsoid(&state_set, &section);
            stage_offsets.push(tightened.offsets().clone());
            let tightened_input = pontryagin_diff_interval(&input_interval, &tube_row, &section);
            if tightened_input.is_empty() {
                return Err(SynthesisError::InputTightenedAway { stage });
            }
            stage_input_bounds.push(tightened_input.hi);
        }

        // terminal: maximal RPI set under the local LQR feedback for the
        // input-disturbance image, then tightened by the last funnel section
        let a_cl = &a_dyn - &b_dyn * &dare.gain;
        let gain_row = nalgebra::RowDVector::from_iterator(4, dare.gain.iter().copied());
        let disturbance = Segment {
            generator: DVector::from_iterator(
                4,
                model.b.iter().map(|bi| *bi * tube_settings.disturbance_bound),
            ),
        };
        let rpi_set = max_robust_positively_invariant(
            &a_cl,
            &state_set,
            Some(FeedbackBound {
                gain: &gain_row,
                bound: input_interval,
            }),
            &disturbance,
        )?;
        let terminal_section = cross_section(deltas[horizon]);
        let terminal_set = pontryagin_diff_ellipsoid(&rpi_set, &terminal_section);
        if !terminal_set.contains_origin() {
            return Err(SynthesisError::TerminalSetEmpty);
        }
        let terminal_set = terminal_set.prune_redundant(T::cast(1e-9))?;

        let input_lower = DVector::from_iterator(horizon, stage_input_bounds.iter().map(|b| -*b));
        let input_upper = DVector::from_iterator(horizon, stage_input_bounds.iter().copied());
        let terminal_weights = DMatrix::from_fn(4, 4, |i, j| dare.cost.as_matrix()[(i, j)]);
        let spec = HorizonSpec {
            model_a: &model.a,
            model_b: &model.b,
            horizon,
            state_weights: &q,
            input_weight: settings.input_weight,
            terminal_weights: &terminal_weights,
            state_rows: state_set.rows(),
            stage_offsets: &stage_offsets,
            terminal_rows: terminal_set.rows(),
            terminal_offsets: terminal_set.offsets(),
            input_lower: &input_lower,
            input_upper: &input_upper,
            slack_weight: tube_settings.slack_weight,
            per_stage_slack: true,
        };
        let condensed = build_condensed(&spec, gain);
        let skeleton = build_skeleton(&spec);

        Ok(Self {
            model: model.clone(),
            settings: *settings,
            tube_settings: *tube_settings,
            tube,
            deltas,
            gain,
            terminal_cost: dare.cost,
            state_set,
            stage_offsets,
            stage_input_bounds,
            rpi_set,
            terminal_set,
            condensed,
            skeleton,
            workspace: Workspace::default(),
            last_diagnostics: None,
        })
    }

    pub fn settings(&self) -> &MpcSettings<T> {
        &self.settings
    }

    pub fn model(&self) -> &LinearDiscreteModel<T> {
        &self.model
    }

    pub fn tube_settings(&self) -> &CtmpcSettings<T> {
        &self.tube_settings
    }

    pub fn tube(&self) -> &Tube<T> {
        &self.tube
    }

    /// Funnel radii `delta_0..delta_N`.
    pub fn deltas(&self) -> &[T] {
        &self.deltas
    }

    pub fn gain(&self) -> &RowVector4<T> {
        &self.gain
    }

    pub fn terminal_cost(&self) -> &SymmetricMatrix<T> {
        &self.terminal_cost
    }

    pub fn state_set(&self) -> &Polytope<T> {
        &self.state_set
    }

    /// Tightened state offsets per stage (rows as in [`Self::state_set`]).
    pub fn stage_offsets(&self) -> &[DVector<T>] {
        &self.stage_offsets
    }

    /// Tightened input half-widths per stage.
    pub fn stage_input_bounds(&self) -> &[T] {
        &self.stage_input_bounds
    }

    pub fn rpi_set(&self) -> &Polytope<T> {
        &self.rpi_set
    }

    pub fn terminal_set(&self) -> &Polytope<T> {
        &self.terminal_set
    }

    /// Tightened state constraint polytope at the final prediction stage.
    pub fn final_stage_state_set(&self) -> Polytope<T> {
        Polytope::new(
            self.state_set.rows().clone(),
            self.stage_offsets[self.settings.horizon - 1].clone(),
        )
        .expect("tightened rows stay normalized")
    }

    /// Tightened input interval at the final prediction stage.
    pub fn final_stage_input_interval(&self) -> Interval<T> {
        Interval::symmetric(self.stage_input_bounds[self.settings.horizon - 1])
    }

    pub fn skeleton(&self) -> &Skeleton<T> {
        &self.skeleton
    }

    pub fn last_diagnostics(&self) -> Option<HingeDiagnostics> {
        self.last_diagnostics
    }

    /// Full nominal-input plan; the applied input is `v_0` because the
    /// nominal state is pinned to the measurement (`e_0 = 0`).
    pub fn solve_plan(&mut self, x: &State<T>) -> (DVector<T>, super::PolicyStatus) {
        horizon_compute(
            &self.condensed,
            &mut self.workspace,
            &mut self.last_diagnostics,
            x,
        )
    }
}

impl<T: Scalar> ControllerPolicy<T> for CtmpcPolicy<T> {
    fn compute(&mut self, x: &State<T>) -> PolicyOutput<T> {
        let u_max = self.settings.u_max;
        let (plan, status) = self.solve_plan(x);
        finish_output(plan, status, u_max)
    }

    fn reset_warm_start(&mut self) {
        self.workspace = Workspace::default();
        self.last_diagnostics = None;
    }

    fn kind(&self) -> ControllerKind {
        ControllerKind::Ctmpc
    }
}
