//! Serializable artifacts of the synthesis, certification and estimation
//! stages. All numeric payloads are widened to `f64` so the JSON schema
//! does not depend on the scalar type the pipeline ran with.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::certification::{AdmissibilityReport, CertifiedInvariantSet};
use crate::controllers::{CtmpcPolicy, MpcPolicy, Tube};
use crate::geometry::Polytope;
use crate::model::LinearDiscreteModel;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolytopeReport {
    pub rows: Vec<Vec<f64>>,
    pub offsets: Vec<f64>,
}

impl PolytopeReport {
    pub fn from_polytope<T: Scalar>(p: &Polytope<T>) -> Self {
        Self {
            rows: matrix_to_vec(p.rows()),
            offsets: p.offsets().iter().map(|v| v.to_f64_lossy()).collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelReport {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub ts: f64,
}

impl ModelReport {
    pub fn from_model<T: Scalar>(m: &LinearDiscreteModel<T>) -> Self {
        Self {
            a: (0..4)
                .map(|i| (0..4).map(|j| m.a[(i, j)].to_f64_lossy()).collect())
                .collect(),
            b: m.b.iter().map(|v| v.to_f64_lossy()).collect(),
            ts: m.ts.to_f64_lossy(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TubeReport {
    pub feedback: Vec<f64>,
    pub shape: Vec<Vec<f64>>,
    pub contraction: f64,
    pub achieved_contraction: f64,
    pub delta_one: f64,
    pub deltas: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MpcReport {
    pub horizon: usize,
    pub slack_weight: f64,
    pub terminal_cost: Vec<Vec<f64>>,
    pub terminal_set: PolytopeReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CtmpcReport {
    pub horizon: usize,
    pub slack_weight: f64,
    pub contraction: f64,
    pub disturbance_bound: f64,
    pub tube: TubeReport,
    pub rpi_set: PolytopeReport,
    pub terminal_set: PolytopeReport,
    /// Tightened state offsets per stage (rows of the state polytope).
    pub stage_state_offsets: Vec<Vec<f64>>,
    /// Tightened input half-widths per stage.
    pub stage_input_bounds: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthesisReport {
    pub model: ModelReport,
    pub lqr_gain: Vec<f64>,
    pub state_weights: Vec<f64>,
    pub input_weight: f64,
    pub u_max: f64,
    pub mpc: MpcReport,
    pub ctmpc: CtmpcReport,
}

impl SynthesisReport {
    pub fn build<T: Scalar>(
        model: &LinearDiscreteModel<T>,
        mpc: &MpcPolicy<T>,
        ctmpc: &CtmpcPolicy<T>,
    ) -> Self {
        let settings = mpc.settings();
        Self {
            model: ModelReport::from_model(model),
            lqr_gain: mpc.gain().iter().map(|v| v.to_f64_lossy()).collect(),
            state_weights: settings
                .state_weights
                .iter()
                .map(|v| v.to_f64_lossy())
                .collect(),
            input_weight: settings.input_weight.to_f64_lossy(),
            u_max: settings.u_max.to_f64_lossy(),
            mpc: MpcReport {
                horizon: settings.horizon,
                slack_weight: settings.slack_weight.to_f64_lossy(),
                terminal_cost: matrix_to_vec(mpc.terminal_cost().as_matrix()),
                terminal_set: PolytopeReport::from_polytope(mpc.terminal_set()),
            },
            ctmpc: Self::ctmpc_report(ctmpc),
        }
    }

    fn ctmpc_report<T: Scalar>(ctmpc: &CtmpcPolicy<T>) -> CtmpcReport {
        let tube: &Tube<T> = ctmpc.tube();
        CtmpcReport {
            horizon: ctmpc.settings().horizon,
            slack_weight: ctmpc.tube_settings().slack_weight.to_f64_lossy(),
            contraction: ctmpc.tube_settings().contraction.to_f64_lossy(),
            disturbance_bound: ctmpc.tube_settings().disturbance_bound.to_f64_lossy(),
            tube: TubeReport {
                feedback: tube.feedback.iter().map(|v| v.to_f64_lossy()).collect(),
                shape: matrix_to_vec(tube.shape.as_matrix()),
                contraction: tube.contraction.to_f64_lossy(),
                achieved_contraction: tube.achieved_contraction.to_f64_lossy(),
                delta_one: tube.delta_one.to_f64_lossy(),
                deltas: ctmpc.deltas().iter().map(|v| v.to_f64_lossy()).collect(),
            },
            rpi_set: PolytopeReport::from_polytope(ctmpc.rpi_set()),
            terminal_set: PolytopeReport::from_polytope(ctmpc.terminal_set()),
            stage_state_offsets: ctmpc
                .stage_offsets()
                .iter()
                .map(|o| o.iter().map(|v| v.to_f64_lossy()).collect())
                .collect(),
            stage_input_bounds: ctmpc
                .stage_input_bounds()
                .iter()
                .map(|v| v.to_f64_lossy())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertificationReportFile {
    pub lyapunov: Vec<Vec<f64>>,
    pub gamma_bound: f64,
    pub gamma: f64,
    pub rho_ball: f64,
    pub level: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub max_observed_ratio: f64,
    /// Fresh-seed revalidation: samples drawn and the largest ratio seen.
    pub revalidation_samples: usize,
    pub revalidation_max_ratio: f64,
    pub admissibility_mpc: AdmissibilityReport,
    pub admissibility_ctmpc: AdmissibilityReport,
    /// Matrix norm used in the decrease bound.
    pub norm_convention: String,
}

impl CertificationReportFile {
    #[allow(clippy::too_many_arguments)]
    pub fn build<T: Scalar>(
        set: &CertifiedInvariantSet<T>,
        revalidation_samples: usize,
        revalidation_max_ratio: f64,
        admissibility_mpc: AdmissibilityReport,
        admissibility_ctmpc: AdmissibilityReport,
    ) -> Self {
        Self {
            lyapunov: matrix_to_vec(set.lyapunov.as_matrix()),
            gamma_bound: set.gamma_bound.to_f64_lossy(),
            gamma: set.gamma.to_f64_lossy(),
            rho_ball: set.rho_ball.to_f64_lossy(),
            level: set.level.to_f64_lossy(),
            lambda_min: set.lambda_min.to_f64_lossy(),
            lambda_max: set.lambda_max.to_f64_lossy(),
            max_observed_ratio: set.max_observed_ratio.to_f64_lossy(),
            revalidation_samples,
            revalidation_max_ratio,
            admissibility_mpc,
            admissibility_ctmpc,
            norm_convention: "spectral".to_string(),
        }
    }

    /// Reconstructs the certified set from the report payload.
    pub fn to_set(&self) -> CertifiedInvariantSet<f64> {
        let n = self.lyapunov.len();
        let flat: Vec<f64> = self.lyapunov.iter().flatten().copied().collect();
        let p = crate::linalg::SymmetricMatrix::symmetrize(DMatrix::from_row_slice(n, n, &flat));
        CertifiedInvariantSet {
            lyapunov: p,
            gamma_bound: self.gamma_bound,
            gamma: self.gamma,
            rho_ball: self.rho_ball,
            level: self.level,
            lambda_min: self.lambda_min,
            lambda_max: self.lambda_max,
            max_observed_ratio: self.max_observed_ratio,
        }
    }
}

fn matrix_to_vec<T: Scalar>(m: &DMatrix<T>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)].to_f64_lossy()).collect())
        .collect()
}
