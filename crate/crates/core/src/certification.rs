//! Lyapunov-certified invariant inner approximation of the region of
//! attraction, and admissibility verification for the predictive
//! controllers.
//!
//! For the saturated-LQR closed loop `x+ = A_cl x + g(x)` (with `g`
//! collecting all nonlinear terms), a quadratic Lyapunov function
//! `V(x) = x^T P x` from the discrete Lyapunov equation with `Q = I`
//! decreases whenever `||g(x)|| < gamma ||x||` holds with `gamma` below an
//! explicit bound built from spectral norms. A sampled bisection finds a
//! ball radius `rho` on which the gain condition (and non-saturation of
//! the feedback) holds; the largest sublevel set inside that ball,
//! `{x : x^T P x <= lambda_min(P) rho^2}`, is then invariant and every
//! trajectory entering it converges to the origin.
//!
//! Spectral norms are used throughout (`||.||_2`); the certification
//! report records this convention.

use nalgebra::{DMatrix, DVector, Matrix4, RowVector4, Vector4};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controllers::LqrPolicy;
use crate::geometry::{max_ellipsoid_level_in_polytope, GeometryError, Interval, Polytope};
use crate::linalg::{eig_sym, solve_discrete_lyapunov, spectral_norm, LinalgError, SymmetricMatrix};
use crate::model::{step_nonlinear, LinearDiscreteModel, ModelError, State, StepOutcome, TwipParams};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum CertificationError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("no radius satisfied the gain condition down to the smallest probe")]
    NoValidRadius,
    #[error("gamma must lie strictly below the decrease bound")]
    GammaTooLarge,
}

/// Tunables of the certification stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertificationSettings {
    /// Fraction of the decrease bound used as gamma (strictly below 1).
    pub gamma_margin: f64,
    /// Acceptance threshold of the sampled gain ratio, as a fraction of
    /// gamma.
    pub safety: f64,
    /// Sphere samples per candidate radius (split across four shells).
    pub sphere_samples: usize,
    /// Interior ball samples per candidate radius.
    pub ball_samples: usize,
    /// Bisection iterations over the radius.
    pub bisection_iterations: usize,
    pub seed: u64,
}

impl Default for CertificationSettings {
    fn default() -> Self {
        Self {
            gamma_margin: 0.99,
            safety: 0.95,
            sphere_samples: 100_000,
            ball_samples: 10_000,
            bisection_iterations: 20,
            seed: 7_031,
        }
    }
}

/// The certified set `{x : x^T P x <= level}` together with the constants
/// that produced it.
#[derive(Debug, Clone)]
pub struct CertifiedInvariantSet<T: Scalar> {
    pub lyapunov: SymmetricMatrix<T>,
    pub gamma_bound: T,
    pub gamma: T,
    pub rho_ball: T,
    pub level: T,
    pub lambda_min: T,
    pub lambda_max: T,
    /// Largest `||g(x)||/||x||` seen during the accepting validation pass.
    pub max_observed_ratio: T,
}

impl<T: Scalar> CertifiedInvariantSet<T> {
    pub fn contains(&self, x: &Vector4<T>) -> bool {
        self.value(x) <= self.level
    }

    pub fn value(&self, x: &Vector4<T>) -> T {
        let xd = DVector::from_column_slice(x.as_slice());
        self.lyapunov.quad_form(&xd)
    }
}

/// Saturated-LQR closed loop of the nonlinear model, the object the
/// certificate is about.
#[derive(Debug, Clone)]
pub struct LqrClosedLoop<T: Scalar> {
    pub params: TwipParams<T>,
    pub policy: LqrPolicy<T>,
    pub a_cl: Matrix4<T>,
    pub ts: T,
    pub substeps: usize,
}

impl<T: Scalar> LqrClosedLoop<T> {
    pub fn new(
        params: TwipParams<T>,
        model: &LinearDiscreteModel<T>,
        gain: RowVector4<T>,
        u_max: T,
        substeps: usize,
    ) -> Self {
        let a_cl = model.a - model.b * gain;
        Self {
            params,
            policy: LqrPolicy::new(gain, u_max),
            a_cl,
            ts: model.ts,
            substeps,
        }
    }

    /// One closed-loop step of the nonlinear model.
    pub fn step(&self, x: &State<T>) -> StepOutcome<T> {
        let u = self.policy.feedback(x);
        step_nonlinear(x, crate::model::Input::new(u), &self.params, self.ts, self.substeps)
            .expect("positive ts and substeps")
    }

    /// `g(x) = F(x) - A_cl x`: the nonlinear closed-loop map minus its
    /// linearization. Valid as "all nonlinear terms" only where the
    /// feedback is unsaturated, which the certified ball enforces.
    pub fn remainder(&self, x: &State<T>) -> Option<Vector4<T>> {
        match self.step(x) {
            StepOutcome::Ok(next) => Some(next.to_vector() - self.a_cl * x.to_vector()),
            StepOutcome::Diverged => None,
        }
    }
}

/// Right-hand side of the decrease inequality:
/// `(-||P A_cl|| + sqrt(||P A_cl||^2 + lambda_min(Q) lambda_max(P))) / lambda_max(P)`.
pub fn gamma_bound<T: Scalar>(
    p: &SymmetricMatrix<T>,
    a_cl: &DMatrix<T>,
    q: &SymmetricMatrix<T>,
) -> T {
    let pa = p.as_matrix() * a_cl;
    let pa_norm = spectral_norm(&pa);
    let lam_p = eig_sym(p).values.max();
    let lam_q = eig_sym(q).values.min();
    (-pa_norm + (pa_norm * pa_norm + lam_q * lam_p).sqrt()) / lam_p
}

/// Largest sampled `||g(x)||/||x||` over four spherical shells at radii
/// `{r, r/2, r/4, r/8}` plus interior ball samples. Deterministic for a
/// fixed `(seed, call_tag)` regardless of the worker count.
pub fn sampled_gain_ratio<T: Scalar>(
    loop_: &LqrClosedLoop<T>,
    radius: T,
    settings: &CertificationSettings,
    call_tag: u64,
) -> T {
    const CHUNK: usize = 4096;
    let shell_counts = settings.sphere_samples / 4;
    let mut jobs: Vec<(u64, T, usize, bool)> = Vec::new();
    let mut stream = call_tag.wrapping_mul(1 << 20);
    for (shell, divisor) in [1.0, 2.0, 4.0, 8.0].iter().enumerate() {
        let r = radius / T::cast(*divisor);
        let mut left = if shell == 0 {
            shell_counts + settings.sphere_samples % 4
        } else {
            shell_counts
        };
        while left > 0 {
            let take = left.min(CHUNK);
            jobs.push((stream, r, take, false));
            stream += 1;
            left -= take;
        }
    }
    let mut left = settings.ball_samples;
    while left > 0 {
        let take = left.min(CHUNK);
        jobs.push((stream, radius, take, true));
        stream += 1;
        left -= take;
    }

    jobs.par_iter()
        .map(|&(stream_id, r, count, ball)| {
            let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
            rng.set_stream(stream_id);
            let mut worst = T::zero();
            for _ in 0..count {
                let mut dir = Vector4::<T>::zeros();
                for i in 0..4 {
                    let n: f64 = rng.sample(StandardNormal);
                    dir[i] = T::cast(n);
                }
                let norm = dir.norm();
                if norm <= T::cast(1e-12) {
                    continue;
                }
                let mut scale = r / norm;
                if ball {
                    let u: f64 = rng.gen_range(0.0..1.0);
                    scale *= T::cast(u.powf(0.25));
                }
                let x = State::from_vector(&(dir * scale));
                let nx = x.norm();
                if nx <= T::cast(1e-14) {
                    continue;
                }
                if let Some(g) = loop_.remainder(&x) {
                    worst = worst.max(g.norm() / nx);
                } else {
                    worst = T::cast(f64::INFINITY);
                }
            }
            worst
        })
        .reduce(T::zero, |a, b| a.max(b))
}

/// Bisection search for the largest radius on which the sampled gain
/// ratio stays below `safety * gamma` and the feedback stays unsaturated
/// (`||K|| r <= u_max`). Returns the radius and the ratio observed at the
/// accepted radius.
pub fn find_rho<T: Scalar>(
    loop_: &LqrClosedLoop<T>,
    gamma: T,
    gamma_bound_value: T,
    settings: &CertificationSettings,
) -> Result<(T, T), CertificationError> {
    if !(gamma < gamma_bound_value) {
        return Err(CertificationError::GammaTooLarge);
    }
    let gain_norm = loop_.policy.gain().norm();
    let r_max = loop_.policy.u_max() / gain_norm;
    let threshold = T::cast(settings.safety) * gamma;

    let mut lo = T::zero();
    let mut hi = r_max;
    let mut best: Option<(T, T)> = None;
    for iteration in 0..settings.bisection_iterations {
        let mid = (lo + hi) * T::cast(0.5);
        let ratio = sampled_gain_ratio(loop_, mid, settings, iteration as u64 + 1);
        if ratio <= threshold {
            best = Some((mid, ratio));
            lo = mid;
        } else {
            hi = mid;
        }
    }
    best.ok_or(CertificationError::NoValidRadius)
}

/// Builds the certified invariant set for the saturated-LQR closed loop.
pub fn build_invariant_set<T: Scalar>(
    loop_: &LqrClosedLoop<T>,
    settings: &CertificationSettings,
) -> Result<CertifiedInvariantSet<T>, CertificationError> {
    let a_cl = DMatrix::from_fn(4, 4, |i, j| loop_.a_cl[(i, j)]);
    let identity = SymmetricMatrix::identity(4);
    let p = solve_discrete_lyapunov(&a_cl, identity.as_matrix())?;
    let bound = gamma_bound(&p, &a_cl, &identity);
    let gamma = T::cast(settings.gamma_margin) * bound;
    let (rho, max_ratio) = find_rho(loop_, gamma, bound, settings)?;
    let eig = eig_sym(&p);
    let lambda_min = eig.values.min();
    let lambda_max = eig.values.max();
    let level = lambda_min * rho * rho;
    Ok(CertifiedInvariantSet {
        lyapunov: p,
        gamma_bound: bound,
        gamma,
        rho_ball: rho,
        level,
        lambda_min,
        lambda_max,
        max_observed_ratio: max_ratio,
    })
}

/// Constraint system of one controller for the admissibility check.
pub struct AdmissibilityInputs<'a, T: Scalar> {
    /// State constraint polytope (tightened at the final stage for the
    /// tube controller).
    pub state_set: &'a Polytope<T>,
    /// Feedback gain whose input the policy reproduces inside the set
    /// (the LQR gain, convention `u = -K x`).
    pub gain: &'a RowVector4<T>,
    /// Input bound (tightened at the final stage for the tube controller).
    pub input_bound: Interval<T>,
    /// Terminal constraint polytope.
    pub terminal_set: &'a Polytope<T>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdmissibilityReport {
    /// Largest ellipsoid level contained in the constraint system; `None`
    /// means unconstrained (trivially admissible).
    pub alpha_star: Option<f64>,
    pub level: f64,
    pub admissible: bool,
}

/// Verifies that the certified set lies inside the controller's state,
/// input-preimage and terminal constraints by computing the largest
/// admissible ellipsoid level `alpha*` and comparing it to the certified
/// level.
pub fn check_admissibility<T: Scalar>(
    set: &CertifiedInvariantSet<T>,
    inputs: &AdmissibilityInputs<'_, T>,
) -> Result<AdmissibilityReport, CertificationError> {
    let gain_row = nalgebra::RowDVector::from_iterator(4, inputs.gain.iter().copied());
    let input_preimage = crate::geometry::FeedbackBound {
        gain: &gain_row,
        bound: inputs.input_bound,
    };
    let mut system = inputs.state_set.intersect(&input_preimage_polytope(&input_preimage)?)?;
    system = system.intersect(inputs.terminal_set)?;
    let alpha_star = max_ellipsoid_level_in_polytope(&set.lyapunov, &system)?;
    let admissible = match alpha_star {
        Some(a) => a >= set.level,
        None => true,
    };
    Ok(AdmissibilityReport {
        alpha_star: alpha_star.map(|a| a.to_f64_lossy()),
        level: set.level.to_f64_lossy(),
        admissible,
    })
}

fn input_preimage_polytope<T: Scalar>(
    fb: &crate::geometry::FeedbackBound<'_, T>,
) -> Result<Polytope<T>, GeometryError> {
    // {x : -K x in [lo, hi]} as two halfspaces
    let dim = fb.gain.len();
    let mut rows = DMatrix::zeros(2, dim);
    for j in 0..dim {
        rows[(0, j)] = -fb.gain[j];
        rows[(1, j)] = fb.gain[j];
    }
    let offsets = DVector::from_vec(vec![fb.bound.hi, -fb.bound.lo]);
    Polytope::new(rows, offsets)
}
