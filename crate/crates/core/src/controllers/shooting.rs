//! Sparse multiple-shooting form of the receding-horizon problems.
//!
//! States, inputs and slacks are all decision variables; the dynamics are
//! equality constraints and the initial state is pinned by the first four
//! equality rows (the "parameterized initial state" slot). The condensed
//! path in [`super::condensed`] is the partial minimization of exactly
//! this program; the two are cross-checked in tests.

use nalgebra::{DMatrix, DVector, Matrix4, Vector4};

use crate::qp::QpProblem;
use crate::scalar::Scalar;

use super::condensed::SlackGrouping;

/// Shared description of one receding-horizon program.
pub(crate) struct HorizonSpec<'a, T: Scalar> {
    pub model_a: &'a Matrix4<T>,
    pub model_b: &'a Vector4<T>,
    pub horizon: usize,
    pub state_weights: &'a Matrix4<T>,
    pub input_weight: T,
    pub terminal_weights: &'a DMatrix<T>,
    /// Normalized soft-row normals shared by every stage (m_x x 4).
    pub state_rows: &'a DMatrix<T>,
    /// Per-stage offsets, one vector per stage `0..horizon`.
    pub stage_offsets: &'a [DVector<T>],
    pub terminal_rows: &'a DMatrix<T>,
    pub terminal_offsets: &'a DVector<T>,
    /// Per-stage hard input bounds.
    pub input_lower: &'a DVector<T>,
    pub input_upper: &'a DVector<T>,
    pub slack_weight: T,
    /// One scalar slack per stage when true; per-row slacks otherwise.
    pub per_stage_slack: bool,
}

/// The prebuilt QP skeleton with its parameterized initial state.
#[derive(Debug, Clone)]
pub struct Skeleton<T: Scalar> {
    problem: QpProblem<T>,
    horizon: usize,
    n_state_vars: usize,
    n_input_vars: usize,
    n_slack_vars: usize,
}

impl<T: Scalar> Skeleton<T> {
    /// Instantiates the program for a concrete initial state.
    pub fn with_state(&self, x0: &Vector4<T>) -> QpProblem<T> {
        let mut p = self.problem.clone();
        if let Some((_, b)) = p.eq.as_mut() {
            for i in 0..4 {
                b[i] = x0[i];
            }
        }
        p
    }

    pub fn problem(&self) -> &QpProblem<T> {
        &self.problem
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Index of input `u_k` in the decision vector.
    pub fn input_index(&self, k: usize) -> usize {
        self.n_state_vars + k
    }

    pub fn num_variables(&self) -> usize {
        self.n_state_vars + self.n_input_vars + self.n_slack_vars
    }
}

pub(crate) fn build_skeleton<T: Scalar>(spec: &HorizonSpec<'_, T>) -> Skeleton<T> {
    let n = spec.horizon;
    let m_x = spec.state_rows.nrows();
    let m_f = spec.terminal_rows.nrows();
    let n_state_vars = 4 * (n + 1);
    let n_input_vars = n;
    let n_slack_vars = if spec.per_stage_slack {
        n + 1
    } else {
        n * m_x + m_f
    };
    let n_vars = n_state_vars + n_input_vars + n_slack_vars;
    let two = T::cast(2.0);

    // objective 1/2 z^T H z with H = 2 blkdiag(Q.., Q_N, R.., rho I)
    let mut h = DMatrix::<T>::zeros(n_vars, n_vars);
    for k in 0..n {
        for i in 0..4 {
            for j in 0..4 {
                h[(4 * k + i, 4 * k + j)] = two * spec.state_weights[(i, j)];
            }
        }
    }
    for i in 0..4 {
        for j in 0..4 {
            h[(4 * n + i, 4 * n + j)] = two * spec.terminal_weights[(i, j)];
        }
    }
    for k in 0..n {
        let idx = n_state_vars + k;
        h[(idx, idx)] = two * spec.input_weight;
    }
    for s in 0..n_slack_vars {
        let idx = n_state_vars + n_input_vars + s;
        h[(idx, idx)] = two * spec.slack_weight;
    }

    // equalities: x_0 slot, then dynamics
    let n_eq = 4 + 4 * n;
    let mut a_eq = DMatrix::<T>::zeros(n_eq, n_vars);
    let b_eq = DVector::<T>::zeros(n_eq);
    for i in 0..4 {
        a_eq[(i, i)] = T::one();
    }
    for k in 0..n {
        let row0 = 4 + 4 * k;
        for i in 0..4 {
            a_eq[(row0 + i, 4 * (k + 1) + i)] = T::one();
            for j in 0..4 {
                a_eq[(row0 + i, 4 * k + j)] = -spec.model_a[(i, j)];
            }
            a_eq[(row0 + i, n_state_vars + k)] = -spec.model_b[i];
        }
    }

    // inequalities: soft state rows, terminal rows, input bounds,
    // slack nonnegativity
    let n_in = n * m_x + m_f + 2 * n + n_slack_vars;
    let mut a_in = DMatrix::<T>::zeros(n_in, n_vars);
    let mut b_in = DVector::<T>::zeros(n_in);
    let slack0 = n_state_vars + n_input_vars;
    let slack_of = |stage: usize, row: usize| -> usize {
        if spec.per_stage_slack {
            slack0 + stage
        } else if stage < n {
            slack0 + stage * m_x + row
        } else {
            slack0 + n * m_x + row
        }
    };
    let mut cursor = 0;
    for k in 0..n {
        for r in 0..m_x {
            for j in 0..4 {
                a_in[(cursor, 4 * k + j)] = spec.state_rows[(r, j)];
            }
            a_in[(cursor, slack_of(k, r))] = -T::one();
            b_in[cursor] = spec.stage_offsets[k][r];
            cursor += 1;
        }
    }
    for r in 0..m_f {
        for j in 0..4 {
            a_in[(cursor, 4 * n + j)] = spec.terminal_rows[(r, j)];
        }
        a_in[(cursor, slack_of(n, r))] = -T::one();
        b_in[cursor] = spec.terminal_offsets[r];
        cursor += 1;
    }
    for k in 0..n {
        a_in[(cursor, n_state_vars + k)] = T::one();
        b_in[cursor] = spec.input_upper[k];
        cursor += 1;
        a_in[(cursor, n_state_vars + k)] = -T::one();
        b_in[cursor] = -spec.input_lower[k];
        cursor += 1;
    }
    for s in 0..n_slack_vars {
        a_in[(cursor, slack0 + s)] = -T::one();
        b_in[cursor] = T::zero();
        cursor += 1;
    }
    debug_assert_eq!(cursor, n_in);

    Skeleton {
        problem: QpProblem {
            hessian: h,
            linear: DVector::zeros(n_vars),
            eq: Some((a_eq, b_eq)),
            ineq: Some((a_in, b_in)),
        },
        horizon: n,
        n_state_vars,
        n_input_vars,
        n_slack_vars,
    }
}

/// Builds the condensed (state-eliminated, slack-minimized) form of the
/// same program; see [`super::condensed`].
pub(crate) fn build_condensed<T: Scalar>(
    spec: &HorizonSpec<'_, T>,
    gain: nalgebra::RowVector4<T>,
) -> super::condensed::CondensedProblem<T> {
    let n = spec.horizon;
    let m_x = spec.state_rows.nrows();
    let m_f = spec.terminal_rows.nrows();
    let two = T::cast(2.0);

    // prediction matrices for x_1..x_N: X = M x0 + S U
    let mut powers: Vec<Matrix4<T>> = Vec::with_capacity(n + 1);
    powers.push(Matrix4::identity());
    for k in 0..n {
        let next = spec.model_a * powers[k];
        powers.push(next);
    }
    let mut m_map = DMatrix::<T>::zeros(4 * n, 4);
    let mut s_map = DMatrix::<T>::zeros(4 * n, n);
    for k in 1..=n {
        for i in 0..4 {
            for j in 0..4 {
                m_map[(4 * (k - 1) + i, j)] = powers[k][(i, j)];
            }
        }
        for j in 0..k {
            let block = powers[k - 1 - j] * spec.model_b;
            for i in 0..4 {
                s_map[(4 * (k - 1) + i, j)] = block[i];
            }
        }
    }

    // Qbar = diag(Q for x_1..x_{N-1}, Q_N for x_N)
    let mut q_bar = DMatrix::<T>::zeros(4 * n, 4 * n);
    for k in 1..n {
        for i in 0..4 {
            for j in 0..4 {
                q_bar[(4 * (k - 1) + i, 4 * (k - 1) + j)] = spec.state_weights[(i, j)];
            }
        }
    }
    for i in 0..4 {
        for j in 0..4 {
            q_bar[(4 * (n - 1) + i, 4 * (n - 1) + j)] = spec.terminal_weights[(i, j)];
        }
    }

    let st_q = s_map.transpose() * &q_bar;
    let mut hessian = (&st_q * &s_map) * two;
    for k in 0..n {
        hessian[(k, k)] += two * spec.input_weight;
    }
    let f_map = (&st_q * &m_map) * two;

    // soft rows for stages 1..N-1 plus the terminal rows; stage 0 rows do
    // not involve U (their slack contribution is a constant) and are left
    // to the shooting skeleton
    let n_rows = (n - 1) * m_x + m_f;
    let mut rows = DMatrix::<T>::zeros(n_rows, n);
    let mut offset_base = DVector::<T>::zeros(n_rows);
    let mut offset_map = DMatrix::<T>::zeros(n_rows, 4);
    let mut group_of_row = Vec::with_capacity(n_rows);
    let mut cursor = 0;
    for k in 1..n {
        // rows: Lambda (M_k x0 + S_k U) <= b_k
        for r in 0..m_x {
            for j in 0..n {
                let mut acc = T::zero();
                for i in 0..4 {
                    acc += spec.state_rows[(r, i)] * s_map[(4 * (k - 1) + i, j)];
                }
                rows[(cursor, j)] = acc;
            }
            for j in 0..4 {
                let mut acc = T::zero();
                for i in 0..4 {
                    acc += spec.state_rows[(r, i)] * m_map[(4 * (k - 1) + i, j)];
                }
                offset_map[(cursor, j)] = acc;
            }
            offset_base[cursor] = spec.stage_offsets[k][r];
            group_of_row.push(k - 1);
            cursor += 1;
        }
    }
    for r in 0..m_f {
        for j in 0..n {
            let mut acc = T::zero();
            for i in 0..4 {
                acc += spec.terminal_rows[(r, i)] * s_map[(4 * (n - 1) + i, j)];
            }
            rows[(cursor, j)] = acc;
        }
        for j in 0..4 {
            let mut acc = T::zero();
            for i in 0..4 {
                acc += spec.terminal_rows[(r, i)] * m_map[(4 * (n - 1) + i, j)];
            }
            offset_map[(cursor, j)] = acc;
        }
        offset_base[cursor] = spec.terminal_offsets[r];
        group_of_row.push(n - 1);
        cursor += 1;
    }
    debug_assert_eq!(cursor, n_rows);

    let slack = if spec.per_stage_slack {
        SlackGrouping::PerGroup {
            group_of_row,
            n_groups: n,
        }
    } else {
        SlackGrouping::PerRow
    };

    super::condensed::CondensedProblem {
        n_inputs: n,
        hessian,
        f_map,
        rows,
        offset_base,
        offset_map,
        slack,
        rho: spec.slack_weight,
        lower: spec.input_lower.clone(),
        upper: spec.input_upper.clone(),
        gain,
        model_a: *spec.model_a,
        model_b: *spec.model_b,
    }
}
