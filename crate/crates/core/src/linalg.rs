//! Dense solvers shared by controller synthesis and certification:
//! discrete algebraic Riccati equation, discrete Lyapunov equation,
//! symmetric eigendecomposition, and spectral norms.
//!
//! Everything here targets small matrices (n <= ~20); algorithms are
//! chosen for robustness and verifiable residuals, not scale.

use nalgebra::{Complex, DMatrix, DVector};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is not symmetric: max asymmetry {0}")]
    NotSymmetric(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("weight matrix R is not positive definite")]
    InputWeightNotPd,
    #[error("Riccati recursion failed to converge; closed-loop eigenvalue magnitudes {0:?}")]
    RiccatiDiverged(Vec<f64>),
    #[error("Riccati residual {residual} exceeds tolerance {tolerance}")]
    RiccatiResidual { residual: f64, tolerance: f64 },
    #[error("closed loop is not Schur stable: spectral radius {0}")]
    NotSchurStable(f64),
    #[error("Lyapunov operand is not Schur stable: eigenvalue magnitude {0} >= 1")]
    LyapunovUnstable(f64),
    #[error("Lyapunov residual {residual} exceeds tolerance {tolerance}")]
    LyapunovResidual { residual: f64, tolerance: f64 },
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("linear solve failed (singular system)")]
    SingularSystem,
}

/// Residual tolerance of [`solve_dare`], relative to `||P||_F`.
pub const DARE_RESIDUAL_TOL: f64 = 1e-9;
/// Residual tolerance of [`solve_discrete_lyapunov`], relative to `||P||_F`.
pub const LYAPUNOV_RESIDUAL_TOL: f64 = 1e-10;

/// Symmetric matrix with symmetry enforced at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMatrix<T: Scalar>(DMatrix<T>);

impl<T: Scalar> SymmetricMatrix<T> {
    /// Accepts a matrix whose asymmetry `||M - M^T||_inf` is at most
    /// `1e-12 * max(1, ||M||_inf)` and stores its symmetric part.
    pub fn new(m: DMatrix<T>) -> Result<Self, LinalgError> {
        if m.nrows() != m.ncols() {
            return Err(LinalgError::DimensionMismatch(format!(
                "{}x{} is not square",
                m.nrows(),
                m.ncols()
            )));
        }
        let mut scale = T::one();
        let mut asym = T::zero();
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                scale = scale.max(m[(i, j)].abs());
                asym = asym.max((m[(i, j)] - m[(j, i)]).abs());
            }
        }
        if asym > T::cast(1e-12) * scale {
            return Err(LinalgError::NotSymmetric((asym / scale).to_f64_lossy()));
        }
        Ok(Self::symmetrize(m))
    }

    /// Stores `(M + M^T)/2` without an asymmetry check.
    pub fn symmetrize(m: DMatrix<T>) -> Self {
        let half = T::cast(0.5);
        let sym = (&m + m.transpose()) * half;
        Self(sym)
    }

    pub fn identity(n: usize) -> Self {
        Self(DMatrix::identity(n, n))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<T> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<T> {
        self.0
    }

    /// Quadratic form `x^T M x`.
    pub fn quad_form(&self, x: &DVector<T>) -> T {
        (x.transpose() * &self.0 * x)[(0, 0)]
    }

    /// Solves `M y = x` through a Cholesky factorization (requires PD).
    pub fn solve_pd(&self, x: &DVector<T>) -> Result<DVector<T>, LinalgError> {
        let chol = self
            .0
            .clone()
            .cholesky()
            .ok_or(LinalgError::NotPositiveDefinite)?;
        Ok(chol.solve(x))
    }

    /// Lower Cholesky factor `L` with `M = L L^T` (requires PD).
    pub fn cholesky_factor(&self) -> Result<DMatrix<T>, LinalgError> {
        let chol = self
            .0
            .clone()
            .cholesky()
            .ok_or(LinalgError::NotPositiveDefinite)?;
        Ok(chol.l())
    }
}

/// Solution of the discrete algebraic Riccati equation.
#[derive(Debug, Clone)]
pub struct DareSolution<T: Scalar> {
    /// Stabilizing cost matrix `P`.
    pub cost: SymmetricMatrix<T>,
    /// Feedback gain `K = (R + B^T P B)^{-1} B^T P A`, convention `u = -K x`.
    pub gain: DMatrix<T>,
}

/// Solves `P = Q + A^T P A - A^T P B (R + B^T P B)^{-1} B^T P A` by the
/// structured doubling algorithm, then verifies the residual against
/// [`DARE_RESIDUAL_TOL`] and that `A - B K` is Schur stable.
pub fn solve_dare<T: Scalar>(
    a: &DMatrix<T>,
    b: &DMatrix<T>,
    q: &DMatrix<T>,
    r: &DMatrix<T>,
) -> Result<DareSolution<T>, LinalgError> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || q.nrows() != n || q.ncols() != n {
        return Err(LinalgError::DimensionMismatch(
            "A, B, Q dimensions are inconsistent".into(),
        ));
    }
    let m = b.ncols();
    if r.nrows() != m || r.ncols() != m {
        return Err(LinalgError::DimensionMismatch(
            "R dimension does not match the input count".into(),
        ));
    }
    let r_chol = r
        .clone()
        .cholesky()
        .ok_or(LinalgError::InputWeightNotPd)?;

    // SDA-I iteration:
    //   A_{k+1} = A_k (I + G_k H_k)^{-1} A_k
    //   G_{k+1} = G_k + A_k (I + G_k H_k)^{-1} G_k A_k^T
    //   H_{k+1} = H_k + A_k^T H_k (I + G_k H_k)^{-1} A_k
    // with A_0 = A, G_0 = B R^{-1} B^T, H_0 = Q; H_k -> P quadratically.
    let mut a_k = a.clone();
    let mut g_k = b * r_chol.solve(&b.transpose());
    let mut h_k = q.clone();
    let identity = DMatrix::<T>::identity(n, n);
    let mut converged = false;
    for _ in 0..120 {
        let w = &identity + &g_k * &h_k;
        let lu = w.lu();
        let w_inv_a = lu
            .solve(&a_k)
            .ok_or(LinalgError::SingularSystem)?;
        let w_inv_g = lu
            .solve(&g_k)
            .ok_or(LinalgError::SingularSystem)?;
        let a_next = &a_k * &w_inv_a;
        let g_next = &g_k + &a_k * w_inv_g * a_k.transpose();
        let h_next = &h_k + a_k.transpose() * &h_k * &w_inv_a;
        // max-abs norms: Frobenius would overflow while the iterates are
        // still finite on divergent problems
        let step = (&h_next - &h_k).amax();
        let scale = h_next.amax().max(T::one());
        a_k = a_next;
        g_k = (&g_next + g_next.transpose()) * T::cast(0.5);
        h_k = (&h_next + h_next.transpose()) * T::cast(0.5);
        if !h_k.iter().all(|v| v.is_finite()) || !step.is_finite() {
            return Err(LinalgError::RiccatiDiverged(eigen_magnitudes(a)));
        }
        if step <= T::cast(1e-15) * scale {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(LinalgError::RiccatiDiverged(eigen_magnitudes(a)));
    }

    let p = h_k;
    let btpb = r + b.transpose() * &p * b;
    let btpa = b.transpose() * &p * a;
    let gain = btpb
        .clone()
        .cholesky()
        .ok_or(LinalgError::InputWeightNotPd)?
        .solve(&btpa);

    let residual = (q + a.transpose() * &p * a - a.transpose() * &p * b * &gain - &p).norm();
    let tol = T::cast(DARE_RESIDUAL_TOL) * p.norm().max(T::one());
    if !(residual <= tol) {
        return Err(LinalgError::RiccatiResidual {
            residual: residual.to_f64_lossy(),
            tolerance: tol.to_f64_lossy(),
        });
    }
    let closed_loop = a - b * &gain;
    let sr = spectral_radius(&closed_loop);
    if !(sr < T::one()) {
        return Err(LinalgError::NotSchurStable(sr.to_f64_lossy()));
    }
    Ok(DareSolution {
        cost: SymmetricMatrix::symmetrize(p),
        gain,
    })
}

/// Solves `A^T P A - P = -Q` for Schur-stable `A` via the Kronecker
/// vectorization `(I - A^T (x) A^T) vec(P) = vec(Q)`.
pub fn solve_discrete_lyapunov<T: Scalar>(
    a: &DMatrix<T>,
    q: &DMatrix<T>,
) -> Result<SymmetricMatrix<T>, LinalgError> {
    let n = a.nrows();
    if a.ncols() != n || q.nrows() != n || q.ncols() != n {
        return Err(LinalgError::DimensionMismatch(
            "A and Q must be square of equal size".into(),
        ));
    }
    let sr = spectral_radius(a);
    if !(sr < T::one()) {
        return Err(LinalgError::LyapunovUnstable(sr.to_f64_lossy()));
    }
    let at = a.transpose();
    let kron = at.kronecker(&at);
    let system = DMatrix::<T>::identity(n * n, n * n) - kron;
    let rhs = DVector::from_column_slice(q.as_slice());
    let sol = system
        .lu()
        .solve(&rhs)
        .ok_or(LinalgError::SingularSystem)?;
    let p = DMatrix::from_column_slice(n, n, sol.as_slice());
    let p = SymmetricMatrix::symmetrize(p);

    let residual = (a.transpose() * p.as_matrix() * a - p.as_matrix() + q).norm();
    let tol = T::cast(LYAPUNOV_RESIDUAL_TOL) * p.as_matrix().norm().max(T::one());
    if residual > tol {
        return Err(LinalgError::LyapunovResidual {
            residual: residual.to_f64_lossy(),
            tolerance: tol.to_f64_lossy(),
        });
    }
    Ok(p)
}

/// Symmetric eigendecomposition with eigenvalues sorted ascending.
#[derive(Debug, Clone)]
pub struct SymEig<T: Scalar> {
    /// Eigenvalues in ascending order.
    pub values: DVector<T>,
    /// Orthonormal eigenvectors, column `j` paired with `values[j]`.
    pub vectors: DMatrix<T>,
}

pub fn eig_sym<T: Scalar>(s: &SymmetricMatrix<T>) -> SymEig<T> {
    let decomp = s.as_matrix().clone().symmetric_eigen();
    let n = decomp.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        decomp.eigenvalues[i]
            .partial_cmp(&decomp.eigenvalues[j])
            .expect("eigenvalues are finite")
    });
    let values = DVector::from_iterator(n, order.iter().map(|&i| decomp.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &decomp.eigenvectors.column(src));
    }
    SymEig { values, vectors }
}

/// Largest singular value.
pub fn spectral_norm<T: Scalar>(m: &DMatrix<T>) -> T {
    if m.is_empty() {
        return T::zero();
    }
    let svd = m.clone().svd(false, false);
    svd.singular_values.max()
}

/// Largest eigenvalue magnitude.
pub fn spectral_radius<T: Scalar>(m: &DMatrix<T>) -> T {
    match schur_eigenvalues(m) {
        Some(eig) => eig
            .iter()
            .map(|l| (l.re * l.re + l.im * l.im).sqrt())
            .fold(T::zero(), |acc, v| acc.max(v)),
        None => squaring_radius(m),
    }
}

/// Eigenvalues of a general real matrix. When the QR iteration fails to
/// converge (it stalls on some degenerate inputs), the spectral-radius
/// estimate is returned as a single real value.
pub fn eigen_complex<T: Scalar>(m: &DMatrix<T>) -> Vec<Complex<T>> {
    schur_eigenvalues(m).unwrap_or_else(|| vec![Complex::new(squaring_radius(m), T::zero())])
}

/// Eigenvalues through the real Schur form, with a triangular shortcut
/// (the stock QR iteration does not terminate on e.g. the zero matrix)
/// and shifted retries.
fn schur_eigenvalues<T: Scalar>(m: &DMatrix<T>) -> Option<Vec<Complex<T>>> {
    let n = m.nrows();
    if n == 0 {
        return Some(Vec::new());
    }
    let scale = m.amax();
    if scale == T::zero() {
        return Some(vec![Complex::new(T::zero(), T::zero()); n]);
    }
    let tri_tol = T::cast(1e-300);
    let mut upper = true;
    let mut lower = true;
    for i in 0..n {
        for j in 0..n {
            if i > j && m[(i, j)].abs() > tri_tol {
                upper = false;
            }
            if i < j && m[(i, j)].abs() > tri_tol {
                lower = false;
            }
        }
    }
    if upper || lower {
        return Some((0..n).map(|i| Complex::new(m[(i, i)], T::zero())).collect());
    }
    if let Some(s) = m.clone().try_schur(T::cast(1e-13), 100 * (n + 4)) {
        return Some(s.complex_eigenvalues().iter().copied().collect());
    }
    for k in 1..=4u32 {
        let sigma = scale * T::cast(0.37 * f64::from(k));
        let shifted = m + DMatrix::identity(n, n) * sigma;
        if let Some(s) = shifted.try_schur(T::cast(1e-13), 100 * (n + 4)) {
            return Some(
                s.complex_eigenvalues()
                    .iter()
                    .map(|l| Complex::new(l.re - sigma, l.im))
                    .collect(),
            );
        }
    }
    None
}

/// Spectral radius by normalized repeated squaring:
/// `rho(M) = s * lim ||(M/s)^(2^k)||^(1/2^k)`.
fn squaring_radius<T: Scalar>(m: &DMatrix<T>) -> T {
    let scale = m.amax();
    if scale == T::zero() || !scale.is_finite() {
        return scale;
    }
    let mut b = m / scale;
    let mut log_acc = T::zero();
    let mut weight = T::one();
    for _ in 0..24 {
        b = &b * &b;
        weight *= T::cast(0.5);
        let norm = b.amax();
        if norm == T::zero() {
            return T::zero();
        }
        log_acc += weight * norm.ln();
        b /= norm;
    }
    scale * log_acc.exp()
}

fn eigen_magnitudes<T: Scalar>(m: &DMatrix<T>) -> Vec<f64> {
    let mut mags: Vec<f64> = eigen_complex(m)
        .iter()
        .map(|l| (l.re * l.re + l.im * l.im).sqrt().to_f64_lossy())
        .collect();
    mags.sort_by(|x, y| y.partial_cmp(x).expect("finite"));
    mags
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

    /// Fixed-point Riccati iteration, the independent oracle for the
    /// doubling implementation.
    fn dare_iteration_oracle(
        a: &DMatrix<f64>,
        b: &DMatrix<f64>,
        q: &DMatrix<f64>,
        r: &DMatrix<f64>,
    ) -> DMatrix<f64> {
        let mut p = q.clone();
        for _ in 0..20000 {
            let gain = (r + b.transpose() * &p * b)
                .try_inverse()
                .unwrap()
                * (b.transpose() * &p * a);
            let next = q + a.transpose() * &p * a - a.transpose() * &p * b * gain;
            let delta = (&next - &p).norm();
            p = next;
            if delta < 1e-14 * p.norm() {
                break;
            }
        }
        p
    }

    #[test]
    fn scalar_dare_matches_golden_ratio() {
        let one = dm(1, 1, &[1.0]);
        let sol = solve_dare(&one, &one, &one, &one).unwrap();
        let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
        assert_relative_eq!(sol.cost.as_matrix()[(0, 0)], phi, epsilon = 1e-12);
        assert_relative_eq!(sol.gain[(0, 0)], 1.0 / phi, epsilon = 1e-12);
    }

    #[test]
    fn dare_with_zero_dynamics_is_deadbeat() {
        let a = DMatrix::zeros(3, 3);
        let b = dm(3, 1, &[1.0, 0.0, 2.0]);
        let q = DMatrix::from_diagonal(&nalgebra::dvector![1.0, 2.0, 3.0]);
        let r = dm(1, 1, &[0.5]);
        let sol = solve_dare(&a, &b, &q, &r).unwrap();
        assert_relative_eq!(sol.cost.as_matrix(), &q, epsilon = 1e-12);
        assert_relative_eq!(sol.gain.norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn dare_agrees_with_iteration_oracle() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..20 {
            let a = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-0.8..0.8));
            let b = DMatrix::from_fn(3, 1, |_, _| rng.gen_range(-1.0..1.0));
            let q = {
                let m = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
                &m * m.transpose() + DMatrix::identity(3, 3) * 0.1
            };
            let r = dm(1, 1, &[rng.gen_range(0.1..2.0)]);
            let sol = solve_dare(&a, &b, &q, &r).unwrap();
            let oracle = dare_iteration_oracle(&a, &b, &q, &r);
            assert_relative_eq!(sol.cost.as_matrix(), &oracle, max_relative = 1e-8);
        }
    }

    #[test]
    fn dare_residual_and_closed_loop_contract() {
        let a = dm(2, 2, &[1.2, 0.1, 0.0, 0.9]);
        let b = dm(2, 1, &[0.0, 1.0]);
        let q = DMatrix::identity(2, 2);
        let r = dm(1, 1, &[1.0]);
        let sol = solve_dare(&a, &b, &q, &r).unwrap();
        let p = sol.cost.as_matrix();
        let residual = (&q + a.transpose() * p * &a
            - a.transpose() * p * &b * &sol.gain
            - p)
            .norm();
        assert!(residual <= 1e-9 * p.norm());
        let a_cl = &a - &b * &sol.gain;
        assert!(spectral_radius(&a_cl) < 1.0);
        // Lyapunov decrease certificate of the returned pair
        let decrease = a_cl.transpose() * p * &a_cl - p;
        let eig = eig_sym(&SymmetricMatrix::symmetrize(decrease));
        assert!(eig.values.max() < -1e-10 * p.norm());
    }

    #[test]
    fn dare_rejects_unstabilizable_pair() {
        let a = dm(1, 1, &[2.0]);
        let b = dm(1, 1, &[0.0]);
        let q = dm(1, 1, &[1.0]);
        let r = dm(1, 1, &[1.0]);
        let err = solve_dare(&a, &b, &q, &r).unwrap_err();
        match err {
            LinalgError::RiccatiDiverged(mags) => assert!(mags[0] >= 1.0),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn scalar_lyapunov_closed_form() {
        let a = dm(1, 1, &[0.5]);
        let q = dm(1, 1, &[1.0]);
        let p = solve_discrete_lyapunov(&a, &q).unwrap();
        assert_relative_eq!(p.as_matrix()[(0, 0)], 4.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn lyapunov_with_zero_dynamics_returns_q() {
        let a = DMatrix::zeros(2, 2);
        let q = dm(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let p = solve_discrete_lyapunov(&a, &q).unwrap();
        assert_relative_eq!(p.as_matrix(), &q, epsilon = 1e-13);
    }

    #[test]
    fn lyapunov_matches_series_oracle() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..20 {
            let a = DMatrix::from_fn(2, 2, |_, _| rng.gen_range(-0.6..0.6));
            if spectral_radius(&a) >= 0.95 {
                continue;
            }
            let q = {
                let m = DMatrix::from_fn(2, 2, |_, _| rng.gen_range(-1.0..1.0));
                &m * m.transpose() + DMatrix::identity(2, 2) * 0.05
            };
            let p = solve_discrete_lyapunov(&a, &q).unwrap();
            // sum_{k>=0} (A^T)^k Q A^k truncated once terms fall below 1e-14
            let mut series = q.clone();
            let mut term = q.clone();
            for _ in 0..20000 {
                term = a.transpose() * term * &a;
                series += &term;
                if term.norm() < 1e-14 {
                    break;
                }
            }
            assert_relative_eq!(p.as_matrix(), &series, max_relative = 1e-10);
        }
    }

    #[test]
    fn lyapunov_rejects_unstable_operand() {
        let a = dm(1, 1, &[1.0]);
        let q = dm(1, 1, &[1.0]);
        match solve_discrete_lyapunov(&a, &q).unwrap_err() {
            LinalgError::LyapunovUnstable(mag) => assert!(mag >= 1.0),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn eig_of_identity_and_diagonal() {
        let identity: SymmetricMatrix<f64> = SymmetricMatrix::identity(3);
        let e = eig_sym(&identity);
        for v in e.values.iter() {
            assert_relative_eq!(*v, 1.0, epsilon = 1e-14);
        }
        assert_relative_eq!(spectral_norm(identity.as_matrix()), 1.0, epsilon = 1e-12);

        let d = SymmetricMatrix::new(DMatrix::from_diagonal(&nalgebra::dvector![2.0, 3.0, 1.0]))
            .unwrap();
        let e = eig_sym(&d);
        assert_relative_eq!(e.values[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(e.values[1], 2.0, epsilon = 1e-12);
        assert_relative_eq!(e.values[2], 3.0, epsilon = 1e-12);
        assert_relative_eq!(spectral_norm(d.as_matrix()), 3.0, epsilon = 1e-12);
    }

    #[test]
    fn eig_trace_and_reconstruction() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..10 {
            let m = DMatrix::<f64>::from_fn(4, 4, |_, _| rng.gen_range(-2.0..2.0));
            let s = SymmetricMatrix::symmetrize(m);
            let e = eig_sym(&s);
            assert_relative_eq!(e.values.sum(), s.as_matrix().trace(), epsilon = 1e-12);
            let lam = DMatrix::from_diagonal(&e.values);
            let reconstructed = &e.vectors * lam * e.vectors.transpose();
            assert!((reconstructed - s.as_matrix()).norm() <= 1e-9 * s.as_matrix().norm());
            for j in 0..4 {
                let v = e.vectors.column(j);
                let res = (s.as_matrix() * v - v * e.values[j]).norm();
                assert!(res <= 1e-10 * s.as_matrix().norm().max(1.0));
            }
        }
    }

    #[test]
    fn symmetric_constructor_rejects_asymmetry() {
        let m = dm(2, 2, &[1.0, 2.0, 2.1, 1.0]);
        assert!(SymmetricMatrix::new(m).is_err());
        let m = dm(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(SymmetricMatrix::new(m).is_ok());
    }

    #[test]
    fn spectral_radius_of_rotation_scaling() {
        let m = dm(2, 2, &[0.0, 0.9, -0.9, 0.0]);
        assert_relative_eq!(spectral_radius(&m), 0.9, epsilon = 1e-10);
    }
}
