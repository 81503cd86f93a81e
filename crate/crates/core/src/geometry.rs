//! Polytope and ellipsoid set algebra for constraint handling:
//! halfspace representation, Pontryagin differences, maximal (robust)
//! positively invariant sets, and ellipsoid-in-polytope scaling.
//!
//! Polytopes are stored in halfspace form `{x : R x <= b}` with unit-norm
//! rows. No vertex enumeration is performed anywhere; support functions is
//! all the pipeline needs, computed with a small dense simplex on the dual
//! program (the dual has only `n` equality rows, so its basis stays tiny
//! even for polytopes with hundreds of halfspaces).

use nalgebra::{DMatrix, DVector, RowDVector};
use thiserror::Error;

use crate::linalg::SymmetricMatrix;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("halfspace row {0} is zero")]
    ZeroRow(usize),
    #[error("non-finite set data")]
    NonFinite,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("support function requires a set containing the origin (offset {0} < 0)")]
    SupportNeedsOrigin(f64),
    #[error("invariant set iteration did not converge within {0} iterations")]
    InvariantSetDidNotConverge(usize),
    #[error("invariant set lost the origin (disturbance too large for the constraints)")]
    EmptyInvariantSet,
    #[error("ellipsoid shape must be positive definite")]
    ShapeNotPd,
    #[error("ellipsoid level must be nonnegative")]
    NegativeLevel,
    #[error("origin is not strictly interior to the polytope")]
    OriginNotInterior,
    #[error("simplex failed to terminate (numerical cycling)")]
    SimplexStalled,
}

/// Convergence/redundancy tolerance of the invariant-set iteration.
pub const INVARIANT_SET_TOL: f64 = 1e-9;
/// Iteration cap of the invariant-set computation.
pub const INVARIANT_SET_MAX_ITER: usize = 500;

/// Halfspace polytope `{x : rows * x <= offsets}` with unit-norm rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Polytope<T: Scalar> {
    dim: usize,
    rows: DMatrix<T>,
    offsets: DVector<T>,
}

/// Result of a support-function evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SupportValue<T> {
    Finite(T),
    Unbounded,
}

impl<T: Scalar> SupportValue<T> {
    pub fn finite(self) -> Option<T> {
        match self {
            SupportValue::Finite(v) => Some(v),
            SupportValue::Unbounded => None,
        }
    }

    /// True when the value does not exceed `bound + tol`.
    pub fn at_most(self, bound: T, tol: T) -> bool {
        match self {
            SupportValue::Finite(v) => v <= bound + tol,
            SupportValue::Unbounded => false,
        }
    }
}

impl<T: Scalar> Polytope<T> {
    /// Builds a polytope from raw halfspaces, normalizing every row to
    /// unit Euclidean norm (offsets rescaled accordingly).
    pub fn new(rows: DMatrix<T>, offsets: DVector<T>) -> Result<Self, GeometryError> {
        if rows.nrows() != offsets.len() {
            return Err(GeometryError::DimensionMismatch(format!(
                "{} rows vs {} offsets",
                rows.nrows(),
                offsets.len()
            )));
        }
        if !rows.iter().all(|v| v.is_finite()) || !offsets.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let dim = rows.ncols();
        let mut rows = rows;
        let mut offsets = offsets;
        for i in 0..rows.nrows() {
            let norm = rows.row(i).norm();
            if norm <= T::cast(1e-300) {
                return Err(GeometryError::ZeroRow(i));
            }
            let inv = T::one() / norm;
            for j in 0..dim {
                rows[(i, j)] *= inv;
            }
            offsets[i] *= inv;
        }
        Ok(Self { dim, rows, offsets })
    }

    /// The whole space: a polytope with no halfspaces.
    pub fn unconstrained(dim: usize) -> Self {
        Self {
            dim,
            rows: DMatrix::zeros(0, dim),
            offsets: DVector::zeros(0),
        }
    }

    /// Axis-aligned symmetric bounds `|x_i| <= bound_i`; `None` leaves the
    /// axis unconstrained.
    pub fn symmetric_box(bounds: &[Option<T>]) -> Result<Self, GeometryError> {
        let dim = bounds.len();
        let mut rows = Vec::new();
        let mut offs = Vec::new();
        for (axis, bound) in bounds.iter().enumerate() {
            if let Some(b) = bound {
                let mut plus = vec![T::zero(); dim];
                plus[axis] = T::one();
                let mut minus = vec![T::zero(); dim];
                minus[axis] = -T::one();
                rows.push(plus);
                rows.push(minus);
                offs.push(*b);
                offs.push(*b);
            }
        }
        let m = rows.len();
        let flat: Vec<T> = rows.into_iter().flatten().collect();
        Self::new(
            DMatrix::from_row_slice(m, dim, &flat),
            DVector::from_vec(offs),
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_rows(&self) -> usize {
        self.rows.nrows()
    }

    pub fn rows(&self) -> &DMatrix<T> {
        &self.rows
    }

    pub fn offsets(&self) -> &DVector<T> {
        &self.offsets
    }

    pub fn contains(&self, x: &DVector<T>, tol: T) -> bool {
        for i in 0..self.num_rows() {
            if (self.rows.row(i) * x)[(0, 0)] > self.offsets[i] + tol {
                return false;
            }
        }
        true
    }

    /// A normalized polytope contains the origin iff every offset is
    /// nonnegative. Tightening operations use the loss of the origin as
    /// their emptiness flag.
    pub fn contains_origin(&self) -> bool {
        self.offsets.iter().all(|b| *b >= T::zero())
    }

    /// Intersection, by stacking halfspaces.
    pub fn intersect(&self, other: &Polytope<T>) -> Result<Self, GeometryError> {
        if self.dim != other.dim {
            return Err(GeometryError::DimensionMismatch(
                "intersecting polytopes of different dimension".into(),
            ));
        }
        let m = self.num_rows() + other.num_rows();
        let mut rows = DMatrix::zeros(m, self.dim);
        let mut offs = DVector::zeros(m);
        rows.rows_mut(0, self.num_rows()).copy_from(&self.rows);
        rows.rows_mut(self.num_rows(), other.num_rows())
            .copy_from(&other.rows);
        offs.rows_mut(0, self.num_rows()).copy_from(&self.offsets);
        offs.rows_mut(self.num_rows(), other.num_rows())
            .copy_from(&other.offsets);
        Ok(Self {
            dim: self.dim,
            rows,
            offsets: offs,
        })
    }

    /// Support function `max { c^T x : x in self }`.
    ///
    /// Requires the origin inside the set (all offsets nonnegative); the
    /// invariant-set and pruning routines guarantee this.
    pub fn support(&self, direction: &RowDVector<T>) -> Result<SupportValue<T>, GeometryError> {
        support_lp(&self.rows, &self.offsets, direction)
    }

    /// Removes redundant halfspaces: a row is dropped when its support
    /// over the remaining rows does not exceed its offset by more than
    /// `tol`.
    pub fn prune_redundant(&self, tol: T) -> Result<Self, GeometryError> {
        let mut keep: Vec<usize> = (0..self.num_rows()).collect();
        let mut i = 0;
        while i < keep.len() {
            let candidate = keep[i];
            let others: Vec<usize> = keep
                .iter()
                .copied()
                .filter(|&r| r != candidate)
                .collect();
            let sub_rows = self.rows.select_rows(others.iter());
            let sub_offs = self.offsets.select_rows(others.iter());
            let dir = RowDVector::from_iterator(self.dim, self.rows.row(candidate).iter().copied());
            let sup = support_lp(&sub_rows, &sub_offs, &dir)?;
            if sup.at_most(self.offsets[candidate], tol) {
                keep.remove(i);
            } else {
                i += 1;
            }
        }
        Ok(Self {
            dim: self.dim,
            rows: self.rows.select_rows(keep.iter()),
            offsets: self.offsets.select_rows(keep.iter()),
        })
    }
}

/// Ellipsoid `{x : x^T P x <= level}` with positive definite shape.
///
/// A zero level is allowed and denotes the degenerate singleton `{0}`.
#[derive(Debug, Clone)]
pub struct Ellipsoid<T: Scalar> {
    shape: SymmetricMatrix<T>,
    level: T,
}

impl<T: Scalar> Ellipsoid<T> {
    pub fn new(shape: SymmetricMatrix<T>, level: T) -> Result<Self, GeometryError> {
        if level < T::zero() {
            return Err(GeometryError::NegativeLevel);
        }
        // PD check through Cholesky
        shape
            .cholesky_factor()
            .map_err(|_| GeometryError::ShapeNotPd)?;
        Ok(Self { shape, level })
    }

    pub fn shape(&self) -> &SymmetricMatrix<T> {
        &self.shape
    }

    pub fn level(&self) -> T {
        self.level
    }

    pub fn contains(&self, x: &DVector<T>, tol: T) -> bool {
        self.shape.quad_form(x) <= self.level + tol
    }

    /// Support function `max { a^T x : x^T P x <= level } = sqrt(level a^T P^{-1} a)`.
    pub fn support(&self, direction: &RowDVector<T>) -> T {
        let a = direction.transpose();
        let pinv_a = self.shape.solve_pd(&a).expect("shape is PD by invariant");
        (self.level * a.dot(&pinv_a)).max(T::zero()).sqrt()
    }

    /// Half-width of the image of the ellipsoid under a linear functional
    /// `k`, i.e. `max |k x|` over the set.
    pub fn linear_image_halfwidth(&self, k: &RowDVector<T>) -> T {
        self.support(k)
    }
}

/// Closed interval `[lo, hi]`; `lo > hi` encodes the empty set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval<T> {
    pub lo: T,
    pub hi: T,
}

impl<T: Scalar> Interval<T> {
    pub fn symmetric(halfwidth: T) -> Self {
        Self {
            lo: -halfwidth,
            hi: halfwidth,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.lo > self.hi
    }

    pub fn contains(&self, v: T, tol: T) -> bool {
        v >= self.lo - tol && v <= self.hi + tol
    }

    /// Pontryagin difference with a symmetric interval of the given
    /// half-width: both ends tighten inward.
    pub fn pontryagin_diff(&self, halfwidth: T) -> Self {
        Self {
            lo: self.lo + halfwidth,
            hi: self.hi - halfwidth,
        }
    }
}

/// Segment `{ s * generator : |s| <= 1 }`, a zonotope with one generator.
/// Used to represent input-disturbance images `{B w : |w| <= w_max}`.
#[derive(Debug, Clone)]
pub struct Segment<T: Scalar> {
    pub generator: DVector<T>,
}

impl<T: Scalar> Segment<T> {
    /// Support function: `max_{|s|<=1} a^T (s g) = |a^T g|`.
    pub fn support(&self, direction: &RowDVector<T>) -> T {
        (direction * &self.generator)[(0, 0)].abs()
    }
}

/// Pontryagin difference of a polytope and an ellipsoid: every halfspace
/// offset shrinks by the support of the ellipsoid in the row direction.
/// The result may lose the origin; query [`Polytope::contains_origin`]
/// for the emptiness flag.
pub fn pontryagin_diff_ellipsoid<T: Scalar>(x: &Polytope<T>, e: &Ellipsoid<T>) -> Polytope<T> {
    let mut offsets = x.offsets.clone();
    for i in 0..x.num_rows() {
        let dir = RowDVector::from_iterator(x.dim, x.rows.row(i).iter().copied());
        offsets[i] -= e.support(&dir);
    }
    Polytope {
        dim: x.dim,
        rows: x.rows.clone(),
        offsets,
    }
}

/// Pontryagin difference of an input interval with the image of a tube
/// cross-section under the tube feedback row: `U (-) K E`.
pub fn pontryagin_diff_interval<T: Scalar>(
    u: &Interval<T>,
    k: &RowDVector<T>,
    e: &Ellipsoid<T>,
) -> Interval<T> {
    u.pontryagin_diff(e.linear_image_halfwidth(k))
}

/// Input constraint expressed through a feedback gain: the set
/// `{x : -gain * x in bound}` (convention `u = -gain x`).
#[derive(Debug, Clone)]
pub struct FeedbackBound<'a, T: Scalar> {
    pub gain: &'a RowDVector<T>,
    pub bound: Interval<T>,
}

impl<T: Scalar> FeedbackBound<'_, T> {
    fn halfspaces(&self) -> Result<Polytope<T>, GeometryError> {
        // -K x <= hi  and  K x <= -lo
        let dim = self.gain.len();
        let mut rows = DMatrix::zeros(2, dim);
        for j in 0..dim {
            rows[(0, j)] = -self.gain[j];
            rows[(1, j)] = self.gain[j];
        }
        let offsets = DVector::from_vec(vec![self.bound.hi, -self.bound.lo]);
        Polytope::new(rows, offsets)
    }
}

/// Maximal positively invariant subset of the constraints under
/// `x_{k+1} = A_cl x_k`.
///
/// Pre-set iteration on the halfspace description: starting from
/// `Omega_0 = X  intersect  {x : -K x in U}`, the frontier rows are propagated
/// through `A_cl` and added until every propagated row is redundant
/// (per-row support comparison at tolerance [`INVARIANT_SET_TOL`]). The
/// result is pruned of redundant halfspaces.
pub fn max_positively_invariant<T: Scalar>(
    a_cl: &DMatrix<T>,
    state_set: &Polytope<T>,
    input: Option<FeedbackBound<'_, T>>,
) -> Result<Polytope<T>, GeometryError> {
    invariant_iteration(a_cl, state_set, input, None)
}

/// Maximal robust positively invariant subset of the constraints under
/// `x_{k+1} = A_cl x_k + d`, `d in W` (a segment). Each propagated
/// halfspace offset additionally shrinks by the support of `W`.
pub fn max_robust_positively_invariant<T: Scalar>(
    a_cl: &DMatrix<T>,
    state_set: &Polytope<T>,
    input: Option<FeedbackBound<'_, T>>,
    disturbance: &Segment<T>,
) -> Result<Polytope<T>, GeometryError> {
    invariant_iteration(a_cl, state_set, input, Some(disturbance))
}

fn invariant_iteration<T: Scalar>(
    a_cl: &DMatrix<T>,
    state_set: &Polytope<T>,
    input: Option<FeedbackBound<'_, T>>,
    disturbance: Option<&Segment<T>>,
) -> Result<Polytope<T>, GeometryError> {
    let dim = state_set.dim();
    if a_cl.nrows() != dim || a_cl.ncols() != dim {
        return Err(GeometryError::DimensionMismatch(
            "closed-loop matrix does not match the set dimension".into(),
        ));
    }
    let tol = T::cast(INVARIANT_SET_TOL);
    let mut current = match input {
        Some(fb) => state_set.intersect(&fb.halfspaces()?)?,
        None => state_set.clone(),
    };
    if !current.contains_origin() {
        return Err(GeometryError::EmptyInvariantSet);
    }

    let mut frontier_rows = current.rows.clone();
    let mut frontier_offs = current.offsets.clone();
    for iteration in 0..INVARIANT_SET_MAX_ITER {
        let _ = iteration;
        let mut new_rows: Vec<RowDVector<T>> = Vec::new();
        let mut new_offs: Vec<T> = Vec::new();
        for i in 0..frontier_rows.nrows() {
            let row = RowDVector::from_iterator(dim, frontier_rows.row(i).iter().copied());
            let mut offset = frontier_offs[i];
            if let Some(w) = disturbance {
                offset -= w.support(&row);
            }
            let propagated = &row * a_cl;
            let norm = propagated.norm();
            if norm <= tol {
                // direction collapsed; the halfspace became 0 <= offset
                if offset < -tol {
                    return Err(GeometryError::EmptyInvariantSet);
                }
                continue;
            }
            let propagated = propagated / norm;
            let offset = offset / norm;
            let sup = current.support(&propagated)?;
            if !sup.at_most(offset, tol) {
                if offset < T::zero() {
                    return Err(GeometryError::EmptyInvariantSet);
                }
                new_rows.push(propagated);
                new_offs.push(offset);
            }
        }
        if new_rows.is_empty() {
            return current.prune_redundant(tol);
        }
        let m = new_rows.len();
        let flat: Vec<T> = new_rows.iter().flat_map(|r| r.iter().copied()).collect();
        let add_rows = DMatrix::from_row_slice(m, dim, &flat);
        let add_offs = DVector::from_vec(new_offs);
        let addition = Polytope {
            dim,
            rows: add_rows.clone(),
            offsets: add_offs.clone(),
        };
        current = current.intersect(&addition)?;
        frontier_rows = add_rows;
        frontier_offs = add_offs;
    }
    Err(GeometryError::InvariantSetDidNotConverge(
        INVARIANT_SET_MAX_ITER,
    ))
}

/// Largest `alpha` such that `{x : x^T P x <= alpha}` is contained in the
/// polytope: `alpha* = min_i b_i^2 / (a_i^T P^{-1} a_i)`.
///
/// Returns `None` for an unconstrained polytope (no rows; the level is
/// unbounded). The origin must be strictly interior (`b > 0`).
pub fn max_ellipsoid_level_in_polytope<T: Scalar>(
    shape: &SymmetricMatrix<T>,
    x: &Polytope<T>,
) -> Result<Option<T>, GeometryError> {
    if x.num_rows() == 0 {
        return Ok(None);
    }
    if x.offsets.iter().any(|b| *b <= T::zero()) {
        return Err(GeometryError::OriginNotInterior);
    }
    let mut best: Option<T> = None;
    for i in 0..x.num_rows() {
        let a = x.rows.row(i).transpose();
        let pinv_a = shape.solve_pd(&a).map_err(|_| GeometryError::ShapeNotPd)?;
        let denom = a.dot(&pinv_a);
        if denom <= T::zero() {
            continue;
        }
        let level = x.offsets[i] * x.offsets[i] / denom;
        best = Some(match best {
            Some(b) => b.min(level),
            None => level,
        });
    }
    Ok(best)
}

/// Support function of `{x : rows x <= offsets}` in `direction`, via the
/// dual linear program `min b^T y  s.t.  rows^T y = direction, y >= 0`
/// solved with a two-phase dense simplex (Bland's rule).
///
/// The dual keeps the basis at `n x n` (`n` = state dimension), so the
/// cost per pivot is `O(n * m)` even for polytopes with many rows.
fn support_lp<T: Scalar>(
    rows: &DMatrix<T>,
    offsets: &DVector<T>,
    direction: &RowDVector<T>,
) -> Result<SupportValue<T>, GeometryError> {
    let n = rows.ncols();
    let m = rows.nrows();
    if direction.len() != n {
        return Err(GeometryError::DimensionMismatch(
            "support direction dimension".into(),
        ));
    }
    if let Some(bad) = offsets.iter().find(|b| **b < T::zero()) {
        return Err(GeometryError::SupportNeedsOrigin(bad.to_f64_lossy()));
    }
    if m == 0 {
        // whole space: bounded only in the trivial direction
        return Ok(if direction.norm() <= T::cast(1e-300) {
            SupportValue::Finite(T::zero())
        } else {
            SupportValue::Unbounded
        });
    }

    let eps = T::cast(1e-11);

    // tableau over columns [y_1..y_m | artificials a_1..a_n | rhs]
    // with n equality rows  rows^T y = direction.
    let cols = m + n + 1;
    let mut tab = DMatrix::<T>::zeros(n, cols);
    for i in 0..n {
        for j in 0..m {
            tab[(i, j)] = rows[(j, i)];
        }
        tab[(i, m + i)] = T::one();
        tab[(i, cols - 1)] = direction[i];
        if tab[(i, cols - 1)] < T::zero() {
            for j in 0..cols {
                tab[(i, j)] = -tab[(i, j)];
            }
        }
    }
    let mut basis: Vec<usize> = (m..m + n).collect();

    // phase 1: minimize the sum of artificials
    let phase1_cost = |j: usize| -> T {
        if j >= m {
            T::one()
        } else {
            T::zero()
        }
    };
    simplex_min(&mut tab, &mut basis, &phase1_cost, m + n, eps)?;
    let mut infeas = T::zero();
    for (row, &b) in basis.iter().enumerate() {
        if b >= m {
            infeas += tab[(row, cols - 1)];
        }
    }
    if infeas > T::cast(1e-9) {
        // dual infeasible <=> primal support unbounded
        return Ok(SupportValue::Unbounded);
    }
    // drive any degenerate artificial out of the basis when possible
    for row in 0..n {
        if basis[row] >= m {
            if let Some(j) = (0..m).find(|&j| tab[(row, j)].abs() > eps) {
                pivot(&mut tab, &mut basis, row, j);
            }
        }
    }

    // phase 2: minimize b^T y, ignoring artificial columns
    let offsets_owned: Vec<T> = offsets.iter().copied().collect();
    let phase2_cost = move |j: usize| -> T {
        if j < m {
            offsets_owned[j]
        } else {
            T::cast(1e30) // artificials must never re-enter
        }
    };
    simplex_min(&mut tab, &mut basis, &phase2_cost, m, eps)?;

    let mut value = T::zero();
    for (row, &b) in basis.iter().enumerate() {
        if b < m {
            value += offsets[b] * tab[(row, cols - 1)];
        }
    }
    Ok(SupportValue::Finite(value))
}

/// Primal simplex minimization on an equality tableau with Bland's rule.
/// `active_cols` restricts the entering choice to the first columns.
fn simplex_min<T: Scalar>(
    tab: &mut DMatrix<T>,
    basis: &mut [usize],
    cost: &dyn Fn(usize) -> T,
    active_cols: usize,
    eps: T,
) -> Result<(), GeometryError> {
    let n = tab.nrows();
    let rhs_col = tab.ncols() - 1;
    for _ in 0..50_000 {
        // reduced costs: c_j - c_B^T B^{-1} A_j  (tableau already holds B^{-1} A)
        let mut entering = None;
        for j in 0..active_cols {
            if basis.contains(&j) {
                continue;
            }
            let mut reduced = cost(j);
            for row in 0..n {
                reduced -= cost(basis[row]) * tab[(row, j)];
            }
            if reduced < -eps {
                entering = Some(j);
                break; // Bland: smallest index
            }
        }
        let Some(j) = entering else {
            return Ok(());
        };
        // ratio test
        let mut leaving: Option<usize> = None;
        let mut best_ratio = T::zero();
        for row in 0..n {
            if tab[(row, j)] > eps {
                let ratio = tab[(row, rhs_col)] / tab[(row, j)];
                match leaving {
                    None => {
                        leaving = Some(row);
                        best_ratio = ratio;
                    }
                    Some(cur) => {
                        if ratio < best_ratio - eps
                            || (ratio < best_ratio + eps && basis[row] < basis[cur])
                        {
                            leaving = Some(row);
                            best_ratio = ratio;
                        }
                    }
                }
            }
        }
        let Some(row) = leaving else {
            // cost unbounded below; phase-2 dual cannot be unbounded for
            // nonnegative offsets, so treat as a numerical failure
            return Err(GeometryError::SimplexStalled);
        };
        pivot(tab, basis, row, j);
    }
    Err(GeometryError::SimplexStalled)
}

fn pivot<T: Scalar>(tab: &mut DMatrix<T>, basis: &mut [usize], row: usize, col: usize) {
    let cols = tab.ncols();
    let pivot_val = tab[(row, col)];
    for j in 0..cols {
        tab[(row, j)] /= pivot_val;
    }
    for r in 0..tab.nrows() {
        if r != row {
            let factor = tab[(r, col)];
            if factor != T::zero() {
                for j in 0..cols {
                    let delta = factor * tab[(row, j)];
                    tab[(r, j)] -= delta;
                }
            }
        }
    }
    basis[row] = col;
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn unit_box(dim: usize) -> Polytope<f64> {
        Polytope::symmetric_box(&vec![Some(1.0); dim]).unwrap()
    }

    fn disk(level: f64) -> Ellipsoid<f64> {
        Ellipsoid::new(SymmetricMatrix::identity(2), level).unwrap()
    }

    #[test]
    fn rows_are_normalized_and_scaling_invariant() {
        let rows = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, -7.0]);
        let offs = DVector::from_vec(vec![6.0, 14.0]);
        let p = Polytope::new(rows, offs).unwrap();
        assert_relative_eq!(p.rows()[(0, 0)], 1.0);
        assert_relative_eq!(p.offsets()[0], 2.0);
        assert_relative_eq!(p.offsets()[1], 2.0);

        // scaling any (row, offset) pair leaves set operations unchanged
        let a = Polytope::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, -1.0, 0.5]),
            DVector::from_vec(vec![1.0, 2.0]),
        )
        .unwrap();
        let b = Polytope::new(
            DMatrix::from_row_slice(2, 2, &[10.0, 10.0, -0.5, 0.25]),
            DVector::from_vec(vec![10.0, 1.0]),
        )
        .unwrap();
        let dir = RowDVector::from_row_slice(&[0.3, -0.9]);
        assert_relative_eq!(
            a.support(&dir).unwrap().finite().unwrap(),
            b.support(&dir).unwrap().finite().unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn support_of_unit_box() {
        let p = unit_box(2);
        let dir = RowDVector::from_row_slice(&[1.0, 1.0]);
        assert_relative_eq!(
            p.support(&dir).unwrap().finite().unwrap(),
            2.0,
            epsilon = 1e-10
        );
        let dir = RowDVector::from_row_slice(&[-1.0, 0.3]);
        assert_relative_eq!(
            p.support(&dir).unwrap().finite().unwrap(),
            1.3,
            epsilon = 1e-10
        );
    }

    #[test]
    fn support_detects_unbounded_directions() {
        // slab |x_1| <= 1 in 2D: unbounded along x_2
        let p = Polytope::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, -1.0, 0.0]),
            DVector::from_vec(vec![1.0, 1.0]),
        )
        .unwrap();
        let bounded = RowDVector::from_row_slice(&[1.0, 0.0]);
        assert_eq!(
            p.support(&bounded).unwrap(),
            SupportValue::Finite(1.0)
        );
        let unbounded = RowDVector::from_row_slice(&[0.2, 1.0]);
        assert_eq!(p.support(&unbounded).unwrap(), SupportValue::Unbounded);
    }

    #[test]
    fn pontryagin_with_degenerate_ellipsoid_is_identity() {
        let p = unit_box(2);
        let t = pontryagin_diff_ellipsoid(&p, &disk(0.0));
        assert_relative_eq!(t.offsets(), p.offsets(), epsilon = 1e-14);
    }

    #[test]
    fn unit_box_minus_disk() {
        let p = unit_box(2);
        let t = pontryagin_diff_ellipsoid(&p, &disk(0.04));
        for i in 0..4 {
            assert_relative_eq!(t.offsets()[i], 0.8, epsilon = 1e-12);
        }
        assert!(t.contains_origin());
    }

    #[test]
    fn pontryagin_ellipsoid_membership_matches_sampled_support_oracle() {
        let mut rng = StdRng::seed_from_u64(42);
        for _ in 0..50 {
            // random 2D polytope containing the origin
            let m = rng.gen_range(4..9);
            let mut rows = DMatrix::zeros(m, 2);
            let mut offs = DVector::zeros(m);
            for i in 0..m {
                let ang = rng.gen_range(0.0..std::f64::consts::TAU);
                rows[(i, 0)] = ang.cos();
                rows[(i, 1)] = ang.sin();
                offs[i] = rng.gen_range(0.5..2.0);
            }
            let x = Polytope::new(rows, offs).unwrap();
            // random ellipsoid
            let q = rng.gen_range(0.2..2.0);
            let s = rng.gen_range(0.2..2.0);
            let rot = rng.gen_range(0.0..std::f64::consts::PI);
            let (c, sn) = (rot.cos(), rot.sin());
            let basis = DMatrix::from_row_slice(2, 2, &[c, -sn, sn, c]);
            let shape = &basis * DMatrix::from_diagonal(&nalgebra::dvector![q, s]) * basis.transpose();
            let e = Ellipsoid::new(SymmetricMatrix::symmetrize(shape), rng.gen_range(0.01..0.3))
                .unwrap();
            let t = pontryagin_diff_ellipsoid(&x, &e);

            // oracle: x in X (-) E  iff  Lambda (x + e) <= b for boundary points e
            let chol = e.shape().cholesky_factor().unwrap();
            let linv_t = chol.transpose().try_inverse().unwrap();
            let boundary: Vec<DVector<f64>> = (0..1000)
                .map(|k| {
                    let ang = std::f64::consts::TAU * k as f64 / 1000.0;
                    let y = DVector::from_vec(vec![ang.cos(), ang.sin()]) * e.level().sqrt();
                    &linv_t * y
                })
                .collect();
            for _ in 0..200 {
                let pt = DVector::from_vec(vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]);
                let in_tightened = t.contains(&pt, -1e-6); // strictly inside
                let oracle_all_in = boundary.iter().all(|b| x.contains(&(&pt + b), 1e-6));
                if in_tightened {
                    assert!(oracle_all_in, "tightened member escapes the original set");
                }
                let clearly_out = !t.contains(&pt, 1e-4);
                if oracle_all_in && clearly_out {
                    // boundary sampling of the oracle is 1e-3-grained, so
                    // only flag disagreements beyond that resolution
                    let worst = boundary
                        .iter()
                        .map(|b| {
                            (0..x.num_rows())
                                .map(|i| {
                                    ((x.rows().row(i) * (&pt + b))[(0, 0)] - x.offsets()[i])
                                        .max(0.0)
                                })
                                .fold(0.0f64, f64::max)
                        })
                        .fold(0.0f64, f64::max);
                    assert!(worst <= 1e-2, "oracle and tightened set disagree strongly");
                }
            }
        }
    }

    #[test]
    fn interval_tightening() {
        let u = Interval::symmetric(2.2);
        let t = u.pontryagin_diff(0.5);
        assert_relative_eq!(t.lo, -1.7);
        assert_relative_eq!(t.hi, 1.7);
        assert!(!t.is_empty());
        assert!(u.pontryagin_diff(2.3).is_empty());

        // with K P^{-1} K^T = 1 and delta = 0.5: [-1.7, 1.7]
        let k = RowDVector::from_row_slice(&[1.0, 0.0]);
        let e = Ellipsoid::new(SymmetricMatrix::identity(2), 0.25).unwrap();
        let t = pontryagin_diff_interval(&u, &k, &e);
        assert_relative_eq!(t.lo, -1.7, epsilon = 1e-12);
        assert_relative_eq!(t.hi, 1.7, epsilon = 1e-12);

        // delta = 0 leaves the interval unchanged
        let e0 = Ellipsoid::new(SymmetricMatrix::identity(2), 0.0).unwrap();
        let t0 = pontryagin_diff_interval(&u, &k, &e0);
        assert_eq!(t0, u);
    }

    #[test]
    fn tightened_intervals_shrink_monotonically() {
        let u = Interval::symmetric(2.2);
        let k = RowDVector::from_row_slice(&[0.7, -0.4]);
        let e_shape = SymmetricMatrix::identity(2);
        let alpha = 0.815f64;
        let delta1 = 0.1;
        let mut delta = 0.0;
        let mut last_width = f64::INFINITY;
        for _ in 0..10 {
            let e = Ellipsoid::new(e_shape.clone(), delta * delta).unwrap();
            let t = pontryagin_diff_interval(&u, &k, &e);
            let width = t.hi - t.lo;
            assert!(width <= last_width + 1e-12);
            last_width = width;
            delta = alpha * delta + delta1;
        }
    }

    #[test]
    fn contractive_box_is_its_own_invariant_set() {
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.5]);
        let omega = max_positively_invariant(&a, &unit_box(2), None).unwrap();
        // same set: support in each axis direction is 1
        for dir in [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]] {
            let d = RowDVector::from_row_slice(&dir);
            assert_relative_eq!(
                omega.support(&d).unwrap().finite().unwrap(),
                1.0,
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn unconstrained_problem_terminates_immediately() {
        let a = DMatrix::from_row_slice(2, 2, &[1.5, 0.3, 0.0, 0.5]);
        let omega = max_positively_invariant(&a, &Polytope::unconstrained(2), None).unwrap();
        assert_eq!(omega.num_rows(), 0);
    }

    #[test]
    fn invariant_set_is_idempotent_and_self_consistent() {
        // rotation + contraction
        let th = 0.5f64;
        let a = DMatrix::from_row_slice(2, 2, &[th.cos(), -th.sin(), th.sin(), th.cos()]) * 0.9;
        let box2 = Polytope::symmetric_box(&[Some(1.0), Some(0.6)]).unwrap();
        let omega = max_positively_invariant(&a, &box2, None).unwrap();
        assert!(omega.contains_origin());

        // one more pre-set iteration changes nothing (support comparison)
        for i in 0..omega.num_rows() {
            let row = RowDVector::from_iterator(2, omega.rows().row(i).iter().copied());
            let propagated = &row * &a;
            let sup = omega.support(&(propagated.clone() / propagated.norm())).unwrap();
            assert!(sup.at_most(omega.offsets()[i] / propagated.norm(), 1e-9));
        }

        // sampled self-consistency: members stay members after one step
        let mut rng = StdRng::seed_from_u64(5);
        let mut checked = 0;
        while checked < 10_000 {
            let pt = DVector::from_vec(vec![rng.gen_range(-1.0..1.0), rng.gen_range(-0.6..0.6)]);
            if omega.contains(&pt, 0.0) {
                let next = &a * &pt;
                assert!(omega.contains(&next, 1e-9));
                assert!(box2.contains(&pt, 1e-9));
                checked += 1;
            }
        }
    }

    #[test]
    fn robust_invariant_scalar_example() {
        // a = 0.5, |x| <= 1, |w| <= 0.2: the box itself is robustly invariant
        let a = DMatrix::from_row_slice(1, 1, &[0.5]);
        let x = Polytope::symmetric_box(&[Some(1.0)]).unwrap();
        let w = Segment {
            generator: DVector::from_vec(vec![0.2]),
        };
        let omega = max_robust_positively_invariant(&a, &x, None, &w).unwrap();
        let d = RowDVector::from_row_slice(&[1.0]);
        assert_relative_eq!(
            omega.support(&d).unwrap().finite().unwrap(),
            1.0,
            epsilon = 1e-9
        );
        // one-step robust invariance at the extreme disturbances
        for x0 in [-1.0f64, 1.0] {
            for wv in [-0.2, 0.2] {
                assert!((0.5 * x0 + wv).abs() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn zero_disturbance_reduces_to_nominal() {
        let th = 0.3f64;
        let a = DMatrix::from_row_slice(2, 2, &[th.cos(), -th.sin(), th.sin(), th.cos()]) * 0.92;
        let box2 = Polytope::symmetric_box(&[Some(1.0), Some(1.0)]).unwrap();
        let w0 = Segment {
            generator: DVector::zeros(2),
        };
        let nominal = max_positively_invariant(&a, &box2, None).unwrap();
        let robust = max_robust_positively_invariant(&a, &box2, None, &w0).unwrap();
        // identical support in many directions
        for k in 0..32 {
            let ang = std::f64::consts::TAU * k as f64 / 32.0;
            let d = RowDVector::from_row_slice(&[ang.cos(), ang.sin()]);
            assert_relative_eq!(
                nominal.support(&d).unwrap().finite().unwrap(),
                robust.support(&d).unwrap().finite().unwrap(),
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn oversized_disturbance_empties_the_set() {
        let a = DMatrix::from_row_slice(1, 1, &[0.9]);
        let x = Polytope::symmetric_box(&[Some(1.0)]).unwrap();
        let w = Segment {
            generator: DVector::from_vec(vec![5.0]),
        };
        assert!(matches!(
            max_robust_positively_invariant(&a, &x, None, &w),
            Err(GeometryError::EmptyInvariantSet)
        ));
    }

    #[test]
    fn ellipsoid_level_in_unit_box() {
        let p = unit_box(2);
        let level = max_ellipsoid_level_in_polytope(&SymmetricMatrix::identity(2), &p)
            .unwrap()
            .unwrap();
        assert_relative_eq!(level, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ellipsoid_level_against_single_halfspace() {
        // P = diag(4, 1), halfspace x1 <= 1 -> alpha* = 1 / (1/4) = 4
        let shape =
            SymmetricMatrix::new(DMatrix::from_diagonal(&nalgebra::dvector![4.0, 1.0])).unwrap();
        let p = Polytope::new(
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DVector::from_vec(vec![1.0]),
        )
        .unwrap();
        let level = max_ellipsoid_level_in_polytope(&shape, &p).unwrap().unwrap();
        assert_relative_eq!(level, 4.0, epsilon = 1e-12);

        // KKT check: the maximizer on the active face lies exactly on it
        let a = DVector::from_vec(vec![1.0, 0.0]);
        let pinv_a = shape.solve_pd(&a).unwrap();
        let denom = a.dot(&pinv_a);
        let x_star = &pinv_a * (p.offsets()[0] / denom);
        assert_relative_eq!((p.rows().row(0) * &x_star)[(0, 0)], p.offsets()[0], epsilon = 1e-12);
        assert_relative_eq!(shape.quad_form(&x_star), level, epsilon = 1e-12);
    }

    #[test]
    fn ellipsoid_level_unbounded_and_interior_errors() {
        let shape = SymmetricMatrix::identity(2);
        assert_eq!(
            max_ellipsoid_level_in_polytope(&shape, &Polytope::unconstrained(2)).unwrap(),
            None
        );
        let p = Polytope::new(
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DVector::from_vec(vec![0.0]),
        )
        .unwrap();
        assert!(matches!(
            max_ellipsoid_level_in_polytope(&shape, &p),
            Err(GeometryError::OriginNotInterior)
        ));
    }

    #[test]
    fn level_monotone_under_tightening() {
        let shape = SymmetricMatrix::identity(2);
        let p = unit_box(2);
        let tightened = pontryagin_diff_ellipsoid(&p, &disk(0.04));
        let full = max_ellipsoid_level_in_polytope(&shape, &p).unwrap().unwrap();
        let tight = max_ellipsoid_level_in_polytope(&shape, &tightened)
            .unwrap()
            .unwrap();
        assert!(tight <= full);
    }

    #[test]
    fn pruning_removes_redundant_rows() {
        // unit box plus a slack outer halfspace
        let rows = DMatrix::from_row_slice(
            5,
            2,
            &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0, 1.0, 1.0],
        );
        let offs = DVector::from_vec(vec![1.0, 1.0, 1.0, 1.0, 5.0]);
        let p = Polytope::new(rows, offs).unwrap();
        let pruned = p.prune_redundant(1e-9).unwrap();
        assert_eq!(pruned.num_rows(), 4);
    }

    #[test]
    fn pruning_keeps_one_of_two_duplicates() {
        let rows = DMatrix::from_row_slice(3, 1, &[1.0, 1.0, -1.0]);
        let offs = DVector::from_vec(vec![1.0, 1.0, 1.0]);
        let p = Polytope::new(rows, offs).unwrap();
        let pruned = p.prune_redundant(1e-9).unwrap();
        assert_eq!(pruned.num_rows(), 2);
    }

    #[test]
    fn random_pontryagin_members_translate_back_into_the_set() {
        let mut rng = StdRng::seed_from_u64(77);
        let x = Polytope::symmetric_box(&[Some(1.5), Some(0.8), Some(2.0)]).unwrap();
        let shape = SymmetricMatrix::new(DMatrix::from_diagonal(&nalgebra::dvector![
            2.0, 5.0, 1.0
        ]))
        .unwrap();
        let e: Ellipsoid<f64> = Ellipsoid::new(shape, 0.09).unwrap();
        let t = pontryagin_diff_ellipsoid(&x, &e);
        let chol = e.shape().cholesky_factor().unwrap();
        let linv_t = chol.transpose().try_inverse().unwrap();
        let mut tested = 0;
        while tested < 1000 {
            let pt = DVector::from_vec(vec![
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-0.8..0.8),
                rng.gen_range(-2.0..2.0),
            ]);
            if !t.contains(&pt, 0.0) {
                continue;
            }
            // random point of E (boundary): worst case for translation
            let dir = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0f64)).normalize();
            let e_pt = &linv_t * (dir * e.level().sqrt());
            assert!(x.contains(&(&pt + &e_pt), 1e-9));
            tested += 1;
        }
    }
}
