//! Linear MPC with slack-softened state and terminal constraints.

use nalgebra::{DMatrix, DVector, Matrix4, RowVector4};
use serde::{Deserialize, Serialize};

use crate::geometry::{max_positively_invariant, FeedbackBound, Interval, Polytope};
use crate::linalg::{solve_dare, SymmetricMatrix};
use crate::model::{Input, LinearDiscreteModel, State};
use crate::scalar::Scalar;

use super::condensed::{CondensedProblem, HingeDiagnostics, Workspace};
use super::shooting::{build_condensed, build_skeleton, HorizonSpec, Skeleton};
use super::{
    ControllerKind, ControllerPolicy, PolicyOutput, PolicyStatus, StateBounds, SynthesisError,
};

/// Knobs of the linear MPC synthesis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MpcSettings<T> {
    pub horizon: usize,
    /// Diagonal entries of the state weight Q.
    pub state_weights: [T; 4],
    pub input_weight: T,
    pub slack_weight: T,
    pub bounds: StateBounds<T>,
    pub u_max: T,
}

impl<T: Scalar> MpcSettings<T> {
    pub(crate) fn q_matrix(&self) -> Matrix4<T> {
        Matrix4::from_diagonal(&nalgebra::Vector4::from_row_slice(&self.state_weights))
    }
}

/// Receding-horizon policy: the finite-horizon program is re-solved at
/// every step and the first optimal input is applied.
#[derive(Debug, Clone)]
pub struct MpcPolicy<T: Scalar> {
    model: LinearDiscreteModel<T>,
    settings: MpcSettings<T>,
    terminal_cost: SymmetricMatrix<T>,
    gain: RowVector4<T>,
    state_set: Polytope<T>,
    input_interval: Interval<T>,
    terminal_set: Polytope<T>,
    condensed: CondensedProblem<T>,
    skeleton: Skeleton<T>,
    workspace: Workspace<T>,
    last_diagnostics: Option<HingeDiagnostics>,
}

impl<T: Scalar> MpcPolicy<T> {
    /// Synthesizes the policy: DARE terminal cost and gain, maximal
    /// positively invariant terminal set under the local LQR feedback,
    /// and the prebuilt program forms.
    pub fn build(
        model: &LinearDiscreteModel<T>,
        settings: &MpcSettings<T>,
    ) -> Result<Self, SynthesisError> {
        if settings.horizon == 0 {
            return Err(SynthesisError::ZeroHorizon);
        }
        let q = settings.q_matrix();
        let (q_dyn, b_dyn) = to_dynamic(&model.a, &model.b);
        let q_mat = DMatrix::from_fn(4, 4, |i, j| q[(i, j)]);
        let r_mat = DMatrix::from_element(1, 1, settings.input_weight);
        let dare = solve_dare(&q_dyn, &b_dyn, &q_mat, &r_mat)?;
        let gain = RowVector4::from_iterator(dare.gain.iter().copied());

        let state_set = settings.bounds.polytope();
        let input_interval = Interval::symmetric(settings.u_max);
        let a_cl = &q_dyn - &b_dyn * &dare.gain;
        let gain_row = nalgebra::RowDVector::from_iterator(4, dare.gain.iter().copied());
        let terminal_set = max_positively_invariant(
            &a_cl,
            &state_set,
            Some(FeedbackBound {
                gain: &gain_row,
                bound: input_interval,
            }),
        )?;

        let horizon = settings.horizon;
        let stage_offsets: Vec<DVector<T>> =
            (0..horizon).map(|_| state_set.offsets().clone()).collect();
        let input_lower = DVector::from_element(horizon, -settings.u_max);
        let input_upper = DVector::from_element(horizon, settings.u_max);
        let terminal_weights =
            DMatrix::from_fn(4, 4, |i, j| dare.cost.as_matrix()[(i, j)]);
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
            slack_weight: settings.slack_weight,
            per_stage_slack: false,
        };
        let condensed = build_condensed(&spec, gain);
        let skeleton = build_skeleton(&spec);

        Ok(Self {
            model: model.clone(),
            settings: *settings,
            terminal_cost: dare.cost,
            gain,
            state_set,
            input_interval,
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

    /// LQR gain shared with the terminal cost (convention `u = -K x`).
    pub fn gain(&self) -> &RowVector4<T> {
        &self.gain
    }

    pub fn terminal_cost(&self) -> &SymmetricMatrix<T> {
        &self.terminal_cost
    }

    pub fn state_set(&self) -> &Polytope<T> {
        &self.state_set
    }

    pub fn input_interval(&self) -> Interval<T> {
        self.input_interval
    }

    pub fn terminal_set(&self) -> &Polytope<T> {
        &self.terminal_set
    }

    /// The multiple-shooting skeleton with its initial-state slot.
    pub fn skeleton(&self) -> &Skeleton<T> {
        &self.skeleton
    }

    pub fn last_diagnostics(&self) -> Option<HingeDiagnostics> {
        self.last_diagnostics
    }

    /// Full horizon solve returning the whole input plan.
    pub fn solve_plan(&mut self, x: &State<T>) -> (DVector<T>, PolicyStatus) {
        horizon_compute(
            &self.condensed,
            &mut self.workspace,
            &mut self.last_diagnostics,
            x,
        )
    }
}

impl<T: Scalar> ControllerPolicy<T> for MpcPolicy<T> {
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
        ControllerKind::Mpc
    }
}

pub(crate) fn to_dynamic<T: Scalar>(
    a: &Matrix4<T>,
    b: &nalgebra::Vector4<T>,
) -> (DMatrix<T>, DMatrix<T>) {
    (
        DMatrix::from_fn(4, 4, |i, j| a[(i, j)]),
        DMatrix::from_fn(4, 1, |i, _| b[i]),
    )
}

pub(crate) fn horizon_compute<T: Scalar>(
    condensed: &CondensedProblem<T>,
    workspace: &mut Workspace<T>,
    diagnostics: &mut Option<HingeDiagnostics>,
    x: &State<T>,
) -> (DVector<T>, PolicyStatus) {
    if !x.within_guard() {
        return (
            DVector::zeros(condensed.n_inputs),
            PolicyStatus::DivergedGuard,
        );
    }
    let solve = condensed.solve(&x.to_vector(), workspace);
    *diagnostics = Some(solve.diagnostics);
    if solve.converged {
        (solve.plan, PolicyStatus::Ok)
    } else {
        (solve.plan, PolicyStatus::Infeasible)
    }
}

pub(crate) fn finish_output<T: Scalar>(
    plan: DVector<T>,
    status: PolicyStatus,
    u_max: T,
) -> PolicyOutput<T> {
    let voltage = match status {
        PolicyStatus::Ok => plan[0].clamp(-u_max, u_max),
        _ => T::zero(),
    };
    PolicyOutput {
        input: Input::new(voltage),
        status,
    }
}
