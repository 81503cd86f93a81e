//! Condensed receding-horizon solve.
//!
//! The finite-horizon problems of the MPC and CTMPC policies share one
//! structure: quadratic stage costs over a nominal prediction, hard input
//! bounds, and softened state/terminal halfspaces. Eliminating the states
//! through the prediction matrices and minimizing the slack variables in
//! closed form (`eps = max(0, violation)`, per row or per stage) turns
//! each solve into a box-constrained minimization of a convex piecewise
//! quadratic in the `N` inputs alone:
//!
//! ```text
//!   F(U) = 1/2 U^T H U + f(x0)^T U + rho * Phi(G U - w(x0)),  lo <= U <= hi
//! ```
//!
//! which a projected Newton iteration with exact piece Hessians solves in
//! a handful of 20x20 factorizations. This is the partial minimization of
//! the multiple-shooting program held in [`super::shooting`]; both paths
//! are cross-checked in the test suite.
//!
//! Two solve paths:
//! * fast path: the pure LQR plan (the unconstrained optimum, because the
//!   terminal cost solves the Riccati equation) is checked against all
//!   constraints and returned when strictly feasible;
//! * otherwise the projected Newton iteration runs, warm-started from the
//!   shifted previous plan with an LQR tail.

use nalgebra::{DMatrix, DVector, Matrix4, RowVector4, Vector4};

use crate::scalar::Scalar;

/// How slack variables attach to the soft rows.
#[derive(Debug, Clone)]
pub(crate) enum SlackGrouping {
    /// One slack per row (vector slacks).
    PerRow,
    /// One shared slack per group; `group_of_row[r]` maps rows to groups.
    PerGroup {
        group_of_row: Vec<usize>,
        n_groups: usize,
    },
}

/// C-matrices of the condensed problem, built once per policy.
#[derive(Debug, Clone)]
pub(crate) struct CondensedProblem<T: Scalar> {
    pub n_inputs: usize,
    /// H (positive definite), in the 1/2-form objective.
    pub hessian: DMatrix<T>,
    /// f(x0) = f_map * x0.
    pub f_map: DMatrix<T>,
    /// Soft rows in input space: G U <= w(x0).
    pub rows: DMatrix<T>,
    /// w(x0) = offset_base - offset_map * x0.
    pub offset_base: DVector<T>,
    pub offset_map: DMatrix<T>,
    pub slack: SlackGrouping,
    pub rho: T,
    /// Per-input hard bounds.
    pub lower: DVector<T>,
    pub upper: DVector<T>,
    /// LQR gain (u = -gain x) whose plan is the unconstrained optimum.
    pub gain: RowVector4<T>,
    pub model_a: Matrix4<T>,
    pub model_b: Vector4<T>,
}

/// Per-instance mutable solve state (warm start across rollout steps).
#[derive(Debug, Clone)]
pub(crate) struct Workspace<T: Scalar> {
    pub previous_plan: Option<DVector<T>>,
}

impl<T: Scalar> Default for Workspace<T> {
    fn default() -> Self {
        Self {
            previous_plan: None,
        }
    }
}

/// Diagnostics of the last horizon solve, exposed for tests and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HingeDiagnostics {
    pub used_fast_path: bool,
    pub newton_iterations: usize,
    pub converged: bool,
}

pub(crate) struct HorizonSolve<T: Scalar> {
    pub plan: DVector<T>,
    pub converged: bool,
    pub diagnostics: HingeDiagnostics,
}

impl<T: Scalar> CondensedProblem<T> {
    /// The LQR plan `u_k = -K x_k` rolled along the nominal model.
    pub fn lqr_plan(&self, x0: &Vector4<T>) -> DVector<T> {
        let mut plan = DVector::zeros(self.n_inputs);
        let mut x = *x0;
        for k in 0..self.n_inputs {
            let u = (-(self.gain * x))[(0, 0)];
            plan[k] = u;
            x = self.model_a * x + self.model_b * u;
        }
        plan
    }

    fn offsets_at(&self, x0: &Vector4<T>) -> DVector<T> {
        let x = DVector::from_column_slice(x0.as_slice());
        &self.offset_base - &self.offset_map * x
    }

    fn linear_at(&self, x0: &Vector4<T>) -> DVector<T> {
        let x = DVector::from_column_slice(x0.as_slice());
        &self.f_map * x
    }

    /// Strict feasibility of a plan against box and soft rows.
    fn plan_strictly_feasible(&self, plan: &DVector<T>, w: &DVector<T>, margin: T) -> bool {
        for k in 0..self.n_inputs {
            if plan[k] < self.lower[k] + margin || plan[k] > self.upper[k] - margin {
                return false;
            }
        }
        let violations = &self.rows * plan - w;
        violations.iter().all(|v| *v <= -margin)
    }

    /// Full horizon solve; see the module docs for the two paths.
    pub fn solve(&self, x0: &Vector4<T>, workspace: &mut Workspace<T>) -> HorizonSolve<T> {
        let w = self.offsets_at(x0);
        let lqr = self.lqr_plan(x0);
        if self.plan_strictly_feasible(&lqr, &w, T::cast(1e-9)) {
            workspace.previous_plan = Some(lqr.clone());
            return HorizonSolve {
                plan: lqr,
                converged: true,
                diagnostics: HingeDiagnostics {
                    used_fast_path: true,
                    newton_iterations: 0,
                    converged: true,
                },
            };
        }

        let f = self.linear_at(x0);
        let start = match workspace.previous_plan.take() {
            Some(prev) => self.shifted_warm_start(&prev, x0),
            None => lqr,
        };
        let (plan, iterations, converged) = self.projected_newton(start, &f, &w);
        workspace.previous_plan = Some(plan.clone());
        HorizonSolve {
            plan: plan.clone(),
            converged,
            diagnostics: HingeDiagnostics {
                used_fast_path: false,
                newton_iterations: iterations,
                converged,
            },
        }
    }

    /// Shifts the previous plan one stage forward and appends an LQR tail
    /// computed at the shifted plan's terminal state.
    pub fn shifted_warm_start(&self, previous: &DVector<T>, x0: &Vector4<T>) -> DVector<T> {
        let n = self.n_inputs;
        let mut shifted = DVector::zeros(n);
        let mut x = *x0;
        for k in 0..n - 1 {
            shifted[k] = previous[k + 1];
            x = self.model_a * x + self.model_b * shifted[k];
        }
        shifted[n - 1] = (-(self.gain * x))[(0, 0)];
        for k in 0..n {
            shifted[k] = shifted[k].clamp(self.lower[k], self.upper[k]);
        }
        shifted
    }

    /// Objective value (without the constant state-cost terms).
    fn objective(&self, u: &DVector<T>, f: &DVector<T>, w: &DVector<T>) -> T {
        let half = T::cast(0.5);
        let quad = (u.transpose() * &self.hessian * u)[(0, 0)] * half + f.dot(u);
        quad + self.rho * self.penalty(&(&self.rows * u - w))
    }

    fn penalty(&self, violations: &DVector<T>) -> T {
        match &self.slack {
            SlackGrouping::PerRow => violations
                .iter()
                .map(|v| {
                    let p = v.max(T::zero());
                    p * p
                })
                .fold(T::zero(), |a, b| a + b),
            SlackGrouping::PerGroup {
                group_of_row,
                n_groups,
            } => {
                let mut worst = vec![T::zero(); *n_groups];
                for (r, v) in violations.iter().enumerate() {
                    let g = group_of_row[r];
                    worst[g] = worst[g].max(*v);
                }
                worst.iter().map(|v| *v * *v).fold(T::zero(), |a, b| a + b)
            }
        }
    }

    /// Rows currently contributing to the penalty, with their violations.
    fn active_rows(&self, violations: &DVector<T>) -> Vec<(usize, T)> {
        match &self.slack {
            SlackGrouping::PerRow => violations
                .iter()
                .enumerate()
                .filter(|(_, v)| **v > T::zero())
                .map(|(r, v)| (r, *v))
                .collect(),
            SlackGrouping::PerGroup {
                group_of_row,
                n_groups,
            } => {
                let mut best: Vec<Option<(usize, T)>> = vec![None; *n_groups];
                for (r, v) in violations.iter().enumerate() {
                    if *v > T::zero() {
                        let g = group_of_row[r];
                        let replace = match best[g] {
                            None => true,
                            Some((_, cur)) => *v > cur,
                        };
                        if replace {
                            best[g] = Some((r, *v));
                        }
                    }
                }
                best.into_iter().flatten().collect()
            }
        }
    }

    fn projected_newton(
        &self,
        mut u: DVector<T>,
        f: &DVector<T>,
        w: &DVector<T>,
    ) -> (DVector<T>, usize, bool) {
        let n = self.n_inputs;
        let two_rho = T::cast(2.0) * self.rho;
        let bound_eps = T::cast(1e-12);
        let mut objective = self.objective(&u, f, w);

        for iteration in 0..200 {
            let violations = &self.rows * &u - w;
            let active = self.active_rows(&violations);

            let mut grad = &self.hessian * &u + f;
            for &(r, v) in &active {
                let row = self.rows.row(r);
                for j in 0..n {
                    grad[j] += two_rho * v * row[j];
                }
            }

            // free set: inside the box, or at a bound with the gradient
            // pointing inward
            let mut free: Vec<usize> = Vec::with_capacity(n);
            let mut kkt = T::zero();
            for k in 0..n {
                let at_lower = u[k] <= self.lower[k] + bound_eps;
                let at_upper = u[k] >= self.upper[k] - bound_eps;
                if at_lower && grad[k] >= T::zero() {
                    continue; // multiplier nonnegative, KKT satisfied
                }
                if at_upper && grad[k] <= T::zero() {
                    continue;
                }
                free.push(k);
                kkt = kkt.max(grad[k].abs());
            }
            let scale = T::one() + f.norm() + self.rho;
            if kkt <= T::cast(1e-12) * scale {
                return (u, iteration, true);
            }

            // Newton system on the free coordinates
            let nf = free.len();
            let mut h = DMatrix::zeros(nf, nf);
            for (i, &ki) in free.iter().enumerate() {
                for (j, &kj) in free.iter().enumerate() {
                    h[(i, j)] = self.hessian[(ki, kj)];
                }
            }
            for &(r, _) in &active {
                let row = self.rows.row(r);
                for (i, &ki) in free.iter().enumerate() {
                    let gi = row[ki];
                    if gi == T::zero() {
                        continue;
                    }
                    for (j, &kj) in free.iter().enumerate() {
                        h[(i, j)] += two_rho * gi * row[kj];
                    }
                }
            }
            let g_free = DVector::from_iterator(nf, free.iter().map(|&k| grad[k]));
            let step_free = match h.clone().cholesky() {
                Some(c) => c.solve(&(-&g_free)),
                None => -g_free.clone() / (T::one() + self.rho),
            };

            // backtracking line search on the exact convex objective
            let mut t = T::one();
            let slope = g_free.dot(&step_free);
            let c1 = T::cast(1e-4);
            let mut accepted = false;
            for _ in 0..45 {
                let mut candidate = u.clone();
                for (i, &k) in free.iter().enumerate() {
                    candidate[k] =
                        (u[k] + t * step_free[i]).clamp(self.lower[k], self.upper[k]);
                }
                let cand_obj = self.objective(&candidate, f, w);
                if cand_obj <= objective + c1 * t * slope || cand_obj < objective {
                    u = candidate;
                    objective = cand_obj;
                    accepted = true;
                    break;
                }
                t *= T::cast(0.5);
            }
            if !accepted {
                // no descent progress left at line-search resolution
                let converged = kkt <= T::cast(1e-8) * scale;
                return (u, iteration, converged);
            }
        }
        (u, 200, false)
    }
}
