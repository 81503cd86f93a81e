//! Dense convex quadratic programming.
//!
//! Solves
//! ```text
//!     minimize   1/2 x^T H x + f^T x
//!     subject to A_eq x  = b_eq
//!                A_in x <= b_in
//! ```
//! with a dual active-set method in the style of Goldfarb and Idnani:
//! start at the unconstrained minimum, repeatedly add the most violated
//! constraint, taking dual steps (and dropping blocking constraints) until
//! primal feasibility. Equalities are installed first and never dropped.
//! The method needs no feasible starting point and certifies
//! infeasibility through dual unboundedness.
//!
//! Factorizations (`J = L^{-T} Q` and the triangular `R` of the QR of
//! `L^{-1} N_W`) are maintained with Givens updates, so adding or dropping
//! a constraint costs `O(n^2)`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("Hessian is not positive definite")]
    HessianNotPd,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite problem data")]
    NonFinite,
}

/// Quadratic program data. `eq` and `ineq` pair a coefficient matrix with
/// its right-hand side.
#[derive(Debug, Clone)]
pub struct QpProblem<T: Scalar> {
    pub hessian: DMatrix<T>,
    pub linear: DVector<T>,
    pub eq: Option<(DMatrix<T>, DVector<T>)>,
    pub ineq: Option<(DMatrix<T>, DVector<T>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    IterationLimit,
}

#[derive(Debug, Clone)]
pub struct QpSolution<T: Scalar> {
    pub primal: DVector<T>,
    pub objective: T,
    pub status: QpStatus,
    pub iterations: usize,
    /// Max of the stationarity, primal-feasibility and complementarity
    /// residuals at the returned iterate.
    pub kkt_residual: T,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Kind {
    Equality,
    Inequality,
}

struct Member<T> {
    /// Row index into the stacked [eq; ineq] constraint list.
    index: usize,
    kind: Kind,
    /// +-1: equalities may be installed with a flipped normal.
    sign: T,
    multiplier: T,
}

/// Solves the QP. `warm_start` is an optional primal guess; constraints
/// active at the guess are preferred when choosing which violated
/// constraint to install next, which shortens the active-set path when
/// the guess is near-optimal.
pub fn solve_qp<T: Scalar>(
    problem: &QpProblem<T>,
    warm_start: Option<&DVector<T>>,
) -> Result<QpSolution<T>, QpError> {
    let n = problem.hessian.nrows();
    if problem.hessian.ncols() != n || problem.linear.len() != n {
        return Err(QpError::DimensionMismatch("Hessian/linear".into()));
    }
    if !problem.hessian.iter().all(|v| v.is_finite())
        || !problem.linear.iter().all(|v| v.is_finite())
    {
        return Err(QpError::NonFinite);
    }
    let sym = (&problem.hessian + problem.hessian.transpose()) * T::cast(0.5);
    let chol = sym.clone().cholesky().ok_or(QpError::HessianNotPd)?;

    // stacked constraints: equalities first
    let (n_eq, a_eq, b_eq) = match &problem.eq {
        Some((a, b)) => {
            if a.ncols() != n || a.nrows() != b.len() {
                return Err(QpError::DimensionMismatch("equalities".into()));
            }
            (a.nrows(), a.clone(), b.clone())
        }
        None => (0, DMatrix::zeros(0, n), DVector::zeros(0)),
    };
    let (n_in, a_in, b_in) = match &problem.ineq {
        Some((a, b)) => {
            if a.ncols() != n || a.nrows() != b.len() {
                return Err(QpError::DimensionMismatch("inequalities".into()));
            }
            (a.nrows(), a.clone(), b.clone())
        }
        None => (0, DMatrix::zeros(0, n), DVector::zeros(0)),
    };
    let m = n_eq + n_in;
    let normal = |idx: usize| -> DVector<T> {
        if idx < n_eq {
            a_eq.row(idx).transpose()
        } else {
            a_in.row(idx - n_eq).transpose()
        }
    };
    let rhs = |idx: usize| -> T {
        if idx < n_eq {
            b_eq[idx]
        } else {
            b_in[idx - n_eq]
        }
    };

    // unconstrained minimum
    let mut x = -chol.solve(&problem.linear);

    // J = L^{-T} initially (Q = I); R is kept in the leading columns.
    let l_inv_t = {
        // invert the lower factor and transpose
        let l = chol.l();
        let mut inv = DMatrix::identity(n, n);
        for col in 0..n {
            let mut v = inv.column(col).clone_owned();
            l.solve_lower_triangular_mut(&mut v);
            inv.set_column(col, &v);
        }
        inv.transpose()
    };
    let mut j = l_inv_t; // n x n
    let mut r = DMatrix::<T>::zeros(n, n);
    let mut working: Vec<Member<T>> = Vec::new();

    let viol_tol = |idx: usize| T::cast(1e-9) * (T::one() + rhs(idx).abs());
    let preferred: Vec<bool> = match warm_start {
        Some(w) if w.len() == n => (0..m)
            .map(|idx| {
                let s = (normal(idx).dot(w) - rhs(idx)).abs();
                s <= T::cast(1e-8) * (T::one() + rhs(idx).abs())
            })
            .collect(),
        _ => vec![false; m],
    };

    let max_iter = 50 * (m + n) + 1000;
    let mut iterations = 0usize;
    let mut status = QpStatus::Optimal;

    // install equalities first, then loop over violated inequalities
    let mut pending_eq: Vec<usize> = (0..n_eq).collect();
    'outer: loop {
        iterations += 1;
        if iterations > max_iter {
            status = QpStatus::IterationLimit;
            break;
        }

        // pick the next constraint to install
        let (p_idx, p_kind, p_sign) = if let Some(idx) = pending_eq.first().copied() {
            let s = normal(idx).dot(&x) - rhs(idx);
            if s.abs() <= viol_tol(idx) && working.iter().any(|w| w.index == idx) {
                pending_eq.remove(0);
                continue;
            }
            let sign = if s >= T::zero() { T::one() } else { -T::one() };
            (idx, Kind::Equality, sign)
        } else {
            // most violated inequality, preferring warm-active ones
            let mut best: Option<(usize, T)> = None;
            let mut best_pref: Option<(usize, T)> = None;
            for idx in n_eq..m {
                if working.iter().any(|w| w.index == idx) {
                    continue;
                }
                let s = normal(idx).dot(&x) - rhs(idx);
                if s > viol_tol(idx) {
                    if preferred[idx] && best_pref.as_ref().map_or(true, |&(_, v)| s > v) {
                        best_pref = Some((idx, s));
                    }
                    if best.as_ref().map_or(true, |&(_, v)| s > v) {
                        best = Some((idx, s));
                    }
                }
            }
            match best_pref.or(best) {
                Some((idx, _)) => (idx, Kind::Inequality, T::one()),
                None => break, // primal feasible: optimal
            }
        };

        let a_p = normal(p_idx) * p_sign;
        let mut accumulated = T::zero();

        // inner loop: take steps until constraint p is satisfied or added
        loop {
            iterations += 1;
            if iterations > max_iter {
                status = QpStatus::IterationLimit;
                break 'outer;
            }
            let q = working.len();
            let d = j.transpose() * &a_p;
            // z = J2 d2 (primal direction), rvec = R^{-1} d1 (dual direction)
            let mut z = DVector::zeros(n);
            for col in q..n {
                let dc = d[col];
                if dc != T::zero() {
                    z.axpy(dc, &j.column(col).clone_owned(), T::one());
                }
            }
            let rvec = if q > 0 {
                let r_view = r.view((0, 0), (q, q)).clone_owned();
                let d1 = d.rows(0, q).clone_owned();
                r_view
                    .solve_upper_triangular(&d1)
                    .unwrap_or_else(|| DVector::zeros(q))
            } else {
                DVector::zeros(0)
            };

            let s_p = a_p.dot(&x) - p_sign * rhs(p_idx);
            if s_p <= viol_tol(p_idx) {
                // satisfied along the way (possible after drops)
                if p_kind == Kind::Equality {
                    if !working.iter().any(|w| w.index == p_idx) && s_p.abs() <= viol_tol(p_idx) {
                        // consistent but dependent equality: record with zero
                        // multiplier so it is not re-examined
                        if add_constraint(&mut j, &mut r, &d, q) {
                            working.push(Member {
                                index: p_idx,
                                kind: Kind::Equality,
                                sign: p_sign,
                                multiplier: accumulated,
                            });
                        }
                        pending_eq.retain(|&i| i != p_idx);
                    }
                }
                break;
            }

            let az = a_p.dot(&z);
            let t2 = if az > T::cast(1e-13) * (T::one() + a_p.norm_squared()) {
                Some(s_p / az)
            } else {
                None
            };
            // blocking constraint among inequality members with r_i > 0
            let mut t1: Option<(T, usize)> = None;
            for (k, member) in working.iter().enumerate() {
                if member.kind == Kind::Inequality && rvec[k] > T::cast(1e-13) {
                    let ratio = member.multiplier / rvec[k];
                    if t1.as_ref().map_or(true, |&(best, _)| ratio < best) {
                        t1 = Some((ratio, k));
                    }
                }
            }

            match (t2, t1) {
                (None, None) => {
                    // no primal progress possible and no dual room: infeasible
                    status = QpStatus::Infeasible;
                    break 'outer;
                }
                (maybe_t2, maybe_t1) => {
                    let full = maybe_t2.unwrap_or_else(|| T::cast(f64::INFINITY));
                    let partial = maybe_t1.map(|(t, _)| t).unwrap_or_else(|| T::cast(f64::INFINITY));
                    let t = full.min(partial);
                    if !t.is_finite() {
                        status = QpStatus::Infeasible;
                        break 'outer;
                    }
                    // dual update
                    for (k, member) in working.iter_mut().enumerate() {
                        member.multiplier -= t * rvec[k];
                    }
                    accumulated += t;
                    // primal update
                    if maybe_t2.is_some() {
                        x.axpy(-t, &z, T::one());
                    }
                    if t == full && maybe_t2.is_some() {
                        // full step: install p
                        let d_new = j.transpose() * &a_p;
                        if add_constraint(&mut j, &mut r, &d_new, q) {
                            working.push(Member {
                                index: p_idx,
                                kind: p_kind,
                                sign: p_sign,
                                multiplier: accumulated,
                            });
                        }
                        if p_kind == Kind::Equality {
                            pending_eq.retain(|&i| i != p_idx);
                        }
                        break;
                    } else {
                        // partial step: drop the blocking constraint
                        let (_, k) = maybe_t1.expect("partial step implies a blocking index");
                        drop_constraint(&mut j, &mut r, &mut working, k);
                    }
                }
            }
        }
    }

    let objective = (x.transpose() * &sym * &x)[(0, 0)] * T::cast(0.5) + problem.linear.dot(&x);
    let kkt_residual = kkt_residual(
        &sym,
        &problem.linear,
        &a_eq,
        &b_eq,
        &a_in,
        &b_in,
        &x,
        &working,
        n_eq,
    );
    Ok(QpSolution {
        primal: x,
        objective,
        status,
        iterations,
        kkt_residual,
    })
}

/// Appends the constraint whose transformed normal is `d` as working
/// column `q`, restoring the QR structure with Givens rotations applied to
/// the columns of `J`. Returns false when the normal is numerically
/// dependent (zero new pivot).
fn add_constraint<T: Scalar>(
    j: &mut DMatrix<T>,
    r: &mut DMatrix<T>,
    d: &DVector<T>,
    q: usize,
) -> bool {
    let n = j.nrows();
    let mut d = d.clone();
    // rotate d[q+1..n] into d[q]
    for row in ((q + 1)..n).rev() {
        let (c, s, rho) = givens(d[row - 1], d[row]);
        d[row - 1] = rho;
        d[row] = T::zero();
        // apply to columns row-1 and row of J
        for i in 0..n {
            let a = j[(i, row - 1)];
            let b = j[(i, row)];
            j[(i, row - 1)] = c * a + s * b;
            j[(i, row)] = -s * a + c * b;
        }
    }
    if d[q].abs() <= T::cast(1e-14) * (T::one() + d.norm()) {
        return false;
    }
    for row in 0..=q {
        r[(row, q)] = d[row];
    }
    true
}

/// Removes working column `k`, shifting later columns left and restoring
/// the triangular structure of `R` with Givens rotations mirrored on `J`.
fn drop_constraint<T: Scalar>(
    j: &mut DMatrix<T>,
    r: &mut DMatrix<T>,
    working: &mut Vec<Member<T>>,
    k: usize,
) {
    let n = j.nrows();
    let q = working.len();
    working.remove(k);
    // shift columns of R left
    for col in k..q - 1 {
        for row in 0..n {
            r[(row, col)] = r[(row, col + 1)];
        }
    }
    for row in 0..n {
        r[(row, q - 1)] = T::zero();
    }
    // eliminate the subdiagonal introduced by the shift
    for col in k..q - 1 {
        let (c, s, rho) = givens(r[(col, col)], r[(col + 1, col)]);
        if s != T::zero() {
            r[(col, col)] = rho;
            r[(col + 1, col)] = T::zero();
            for cc in (col + 1)..q - 1 {
                let a = r[(col, cc)];
                let b = r[(col + 1, cc)];
                r[(col, cc)] = c * a + s * b;
                r[(col + 1, cc)] = -s * a + c * b;
            }
            for i in 0..n {
                let a = j[(i, col)];
                let b = j[(i, col + 1)];
                j[(i, col)] = c * a + s * b;
                j[(i, col + 1)] = -s * a + c * b;
            }
        }
    }
}

/// Givens rotation (c, s, rho) with [c s; -s c]^T [a; b] = [rho; 0].
fn givens<T: Scalar>(a: T, b: T) -> (T, T, T) {
    if b == T::zero() {
        return (T::one(), T::zero(), a);
    }
    let rho = (a * a + b * b).sqrt();
    (a / rho, b / rho, rho)
}

#[allow(clippy::too_many_arguments)]
fn kkt_residual<T: Scalar>(
    h: &DMatrix<T>,
    f: &DVector<T>,
    a_eq: &DMatrix<T>,
    b_eq: &DVector<T>,
    a_in: &DMatrix<T>,
    b_in: &DVector<T>,
    x: &DVector<T>,
    working: &[Member<T>],
    n_eq: usize,
) -> T {
    let n = x.len();
    let mut stationarity = h * x + f;
    for member in working {
        let normal = if member.index < n_eq {
            a_eq.row(member.index).transpose()
        } else {
            a_in.row(member.index - n_eq).transpose()
        };
        stationarity.axpy(member.sign * member.multiplier, &normal, T::one());
    }
    let mut res = T::zero();
    for i in 0..n {
        res = res.max(stationarity[i].abs());
    }
    for i in 0..a_eq.nrows() {
        res = res.max((a_eq.row(i).transpose().dot(x) - b_eq[i]).abs());
    }
    for i in 0..a_in.nrows() {
        let slack = a_in.row(i).transpose().dot(x) - b_in[i];
        res = res.max(slack.max(T::zero()));
        if let Some(member) = working.iter().find(|w| w.index == n_eq + i) {
            res = res.max((member.multiplier * slack).abs());
            res = res.max((-member.multiplier).max(T::zero()));
        }
    }
    res
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn dm(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, data)
    }

    #[test]
    fn scalar_bound_becomes_active() {
        // min u^2 s.t. u >= 1  (as -u <= -1)
        let p = QpProblem {
            hessian: dm(1, 1, &[2.0]),
            linear: DVector::zeros(1),
            eq: None,
            ineq: Some((dm(1, 1, &[-1.0]), DVector::from_vec(vec![-1.0]))),
        };
        let sol = solve_qp(&p, None).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_relative_eq!(sol.primal[0], 1.0, epsilon = 1e-10);
        assert!(sol.kkt_residual <= 1e-6);
    }

    #[test]
    fn projection_onto_hyperplane() {
        // min ||z||^2 s.t. z1 + z2 = 1 -> (0.5, 0.5)
        let p = QpProblem {
            hessian: DMatrix::identity(2, 2) * 2.0,
            linear: DVector::zeros(2),
            eq: Some((dm(1, 2, &[1.0, 1.0]), DVector::from_vec(vec![1.0]))),
            ineq: None,
        };
        let sol = solve_qp(&p, None).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_relative_eq!(sol.primal[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(sol.primal[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn equality_constrained_matches_kkt_oracle() {
        let mut rng = StdRng::seed_from_u64(21);
        for _ in 0..30 {
            let n = rng.gen_range(2..7);
            let p = rng.gen_range(1..n);
            let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let h = &m * m.transpose() + DMatrix::identity(n, n) * 0.5;
            let f = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let a = DMatrix::from_fn(p, n, |_, _| rng.gen_range(-1.0..1.0));
            let b = DVector::from_fn(p, |_, _| rng.gen_range(-1.0..1.0));
            let problem = QpProblem {
                hessian: h.clone(),
                linear: f.clone(),
                eq: Some((a.clone(), b.clone())),
                ineq: None,
            };
            let sol = solve_qp(&problem, None).unwrap();
            assert_eq!(sol.status, QpStatus::Optimal);

            // direct KKT solve: [H A^T; A 0][x; nu] = [-f; b]
            let mut kkt = DMatrix::<f64>::zeros(n + p, n + p);
            kkt.view_mut((0, 0), (n, n)).copy_from(&h);
            kkt.view_mut((0, n), (n, p)).copy_from(&a.transpose());
            kkt.view_mut((n, 0), (p, n)).copy_from(&a);
            let mut rhs = DVector::zeros(n + p);
            rhs.rows_mut(0, n).copy_from(&(-&f));
            rhs.rows_mut(n, p).copy_from(&b);
            let oracle = kkt.lu().solve(&rhs).unwrap();
            for i in 0..n {
                assert!(
                    (sol.primal[i] - oracle[i]).abs() <= 1e-9,
                    "primal mismatch {} vs {}",
                    sol.primal[i],
                    oracle[i]
                );
            }
        }
    }

    #[test]
    fn mixed_constraints_and_kkt_tolerance() {
        let mut rng = StdRng::seed_from_u64(33);
        for _ in 0..30 {
            let n = rng.gen_range(2..8);
            let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let h = &m * m.transpose() + DMatrix::identity(n, n) * 0.3;
            let f = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
            let n_in = rng.gen_range(1..12);
            let a = DMatrix::from_fn(n_in, n, |_, _| rng.gen_range(-1.0..1.0));
            // keep the origin feasible so the problem is solvable
            let b = DVector::from_fn(n_in, |_, _| rng.gen_range(0.05..1.5));
            let problem = QpProblem {
                hessian: h,
                linear: f,
                eq: None,
                ineq: Some((a, b)),
            };
            let sol = solve_qp(&problem, None).unwrap();
            assert_eq!(sol.status, QpStatus::Optimal);
            assert!(sol.kkt_residual <= 1e-6, "kkt {}", sol.kkt_residual);
        }
    }

    #[test]
    fn detects_infeasible_inequalities() {
        // u <= 0 and u >= 1
        let p = QpProblem {
            hessian: dm(1, 1, &[2.0]),
            linear: DVector::zeros(1),
            eq: None,
            ineq: Some((dm(2, 1, &[1.0, -1.0]), DVector::from_vec(vec![0.0, -1.0]))),
        };
        let sol = solve_qp(&p, None).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
    }

    #[test]
    fn detects_inconsistent_equalities() {
        let p = QpProblem {
            hessian: DMatrix::identity(2, 2),
            linear: DVector::zeros(2),
            eq: Some((
                dm(2, 2, &[1.0, 1.0, 1.0, 1.0]),
                DVector::from_vec(vec![1.0, 2.0]),
            )),
            ineq: None,
        };
        let sol = solve_qp(&p, None).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
    }

    #[test]
    fn redundant_equalities_are_accepted() {
        let p = QpProblem {
            hessian: DMatrix::identity(2, 2),
            linear: DVector::from_vec(vec![-1.0, 0.0]),
            eq: Some((
                dm(2, 2, &[1.0, 1.0, 2.0, 2.0]),
                DVector::from_vec(vec![1.0, 2.0]),
            )),
            ineq: None,
        };
        let sol = solve_qp(&p, None).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_relative_eq!(sol.primal[0] + sol.primal[1], 1.0, epsilon = 1e-10);
    }

    #[test]
    fn deterministic_across_repeated_calls() {
        let p = QpProblem {
            hessian: dm(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]),
            linear: DVector::from_vec(vec![-1.0, 2.0, -0.5]),
            eq: Some((dm(1, 3, &[1.0, 1.0, 1.0]), DVector::from_vec(vec![0.5]))),
            ineq: Some((
                dm(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0]),
                DVector::from_vec(vec![0.2, 0.2, 0.2]),
            )),
        };
        let first = solve_qp(&p, None).unwrap();
        for _ in 0..5 {
            let again = solve_qp(&p, None).unwrap();
            assert_eq!(first.status, again.status);
            assert_eq!(first.primal, again.primal);
        }
    }

    #[test]
    fn warm_start_does_not_change_the_answer() {
        let p = QpProblem {
            hessian: dm(2, 2, &[2.0, 0.0, 0.0, 2.0]),
            linear: DVector::from_vec(vec![-2.0, -4.0]),
            eq: None,
            ineq: Some((
                dm(3, 2, &[1.0, 1.0, 1.0, 0.0, 0.0, 1.0]),
                DVector::from_vec(vec![1.0, 0.8, 0.8]),
            )),
        };
        let cold = solve_qp(&p, None).unwrap();
        let warm = solve_qp(&p, Some(&cold.primal)).unwrap();
        assert_eq!(cold.status, QpStatus::Optimal);
        assert!((cold.primal - warm.primal).norm() <= 1e-9);
    }

    #[test]
    fn rejects_indefinite_hessian() {
        let p = QpProblem {
            hessian: dm(2, 2, &[1.0, 0.0, 0.0, -1.0]),
            linear: DVector::zeros(2),
            eq: None,
            ineq: None,
        };
        assert!(matches!(solve_qp(&p, None), Err(QpError::HessianNotPd)));
    }
}
