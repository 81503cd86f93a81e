//! Monte Carlo estimation of the region of attraction.
//!
//! Initial conditions are sampled uniformly over a box in
//! `(xdot_w, theta, thetadot)` with the axle position fixed to zero, each
//! sample drawn from its own counter-based RNG stream so the sample list
//! is identical regardless of worker count or controller. Each sample is
//! simulated under the nonlinear closed loop; entering the certified
//! invariant set proves convergence and stops the rollout.

use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::certification::CertifiedInvariantSet;
use crate::controllers::{ControllerKind, ControllerPolicy, Policy, PolicyStatus};
use crate::model::{step_nonlinear, Input, State, StepOutcome, TwipParams};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum McError {
    #[error("horizon {horizon} s is not an integral number of steps at ts {ts} s")]
    NonIntegralHorizon { horizon: f64, ts: f64 },
    #[error("sample count must be at least 1")]
    NoSamples,
    #[error("campaign needs at least one controller")]
    NoControllers,
}

/// Campaign configuration. Ranges are in model units; the axle position
/// of every sample is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub n_samples: usize,
    pub horizon_seconds: f64,
    pub ts: f64,
    pub substeps: usize,
    pub seed: u64,
    pub velocity_range: (f64, f64),
    pub pitch_range: (f64, f64),
    pub pitch_rate_range: (f64, f64),
    /// Exploration-only worst-case input disturbance, applied with
    /// alternating sign each step. Excluded from the nominal campaign.
    pub disturbance_injection: Option<f64>,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            n_samples: 5_000,
            horizon_seconds: 20.0,
            ts: 0.01,
            substeps: 1,
            seed: 2_025,
            velocity_range: (-1.0, 1.0),
            pitch_range: (-1.5, 1.5),
            pitch_rate_range: (-1.5, 1.5),
            disturbance_injection: None,
        }
    }
}

impl McConfig {
    pub fn steps(&self) -> Result<usize, McError> {
        if self.n_samples == 0 {
            return Err(McError::NoSamples);
        }
        let raw = self.horizon_seconds / self.ts;
        let rounded = raw.round();
        if (raw - rounded).abs() > 1e-9 || rounded < 1.0 {
            return Err(McError::NonIntegralHorizon {
                horizon: self.horizon_seconds,
                ts: self.ts,
            });
        }
        Ok(rounded as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    CertifiedStable,
    NotCertified,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureReason {
    Infeasible,
    Diverged,
    HorizonExhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub index: usize,
    pub initial_state: [f64; 4],
    pub verdict: Verdict,
    pub entry_step: Option<usize>,
    pub failure: Option<FailureReason>,
    pub wall_time_us: u64,
}

/// Per-controller campaign outcome, results ordered by sample index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControllerCampaign {
    pub controller: ControllerKind,
    pub stable_fraction: f64,
    pub stable_count: usize,
    pub infeasible_count: usize,
    pub diverged_count: usize,
    pub horizon_exhausted_count: usize,
    pub wall_time_s: f64,
    pub results: Vec<SampleResult>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McSummary {
    pub n_samples: usize,
    pub steps: usize,
    pub sample_list_hash: String,
    pub fractions: Vec<(ControllerKind, f64)>,
    /// Binomial standard error of each fraction.
    pub standard_errors: Vec<(ControllerKind, f64)>,
    /// Pairwise per-sample verdict agreement, unit diagonal.
    pub agreement: Vec<Vec<f64>>,
    pub wall_time_s: f64,
}

/// Uniform i.i.d. samples over the configured box. Sample `i` draws from
/// the ChaCha stream keyed by `(seed, i)`, so the list does not depend on
/// scheduling and is shared verbatim by every controller.
pub fn sample_initial_conditions<T: Scalar>(cfg: &McConfig) -> Vec<State<T>> {
    (0..cfg.n_samples)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            let velocity = rng.gen_range(cfg.velocity_range.0..=cfg.velocity_range.1);
            let pitch = rng.gen_range(cfg.pitch_range.0..=cfg.pitch_range.1);
            let pitch_rate = rng.gen_range(cfg.pitch_rate_range.0..=cfg.pitch_rate_range.1);
            State {
                position: T::zero(),
                velocity: T::cast(velocity),
                pitch: T::cast(pitch),
                pitch_rate: T::cast(pitch_rate),
            }
        })
        .collect()
}

/// FNV-1a over the sample bit patterns; stable across runs and builds.
pub fn sample_list_hash<T: Scalar>(samples: &[State<T>]) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |v: f64| {
        for byte in v.to_bits().to_le_bytes() {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for s in samples {
        eat(s.position.to_f64_lossy());
        eat(s.velocity.to_f64_lossy());
        eat(s.pitch.to_f64_lossy());
        eat(s.pitch_rate.to_f64_lossy());
    }
    format!("{hash:016x}")
}

/// Simulates one sample under a policy until it enters the certified set,
/// fails, or exhausts the horizon. Membership is tested for the initial
/// state before the first step.
pub fn rollout<T: Scalar, P: ControllerPolicy<T>>(
    index: usize,
    x0: &State<T>,
    policy: &mut P,
    set: &CertifiedInvariantSet<T>,
    params: &TwipParams<T>,
    cfg: &McConfig,
    steps: usize,
) -> SampleResult {
    let start = Instant::now();
    let ts = T::cast(cfg.ts);
    let initial_state = [
        x0.position.to_f64_lossy(),
        x0.velocity.to_f64_lossy(),
        x0.pitch.to_f64_lossy(),
        x0.pitch_rate.to_f64_lossy(),
    ];
    let finish = |verdict, entry_step, failure, start: Instant| SampleResult {
        index,
        initial_state,
        verdict,
        entry_step,
        failure,
        wall_time_us: start.elapsed().as_micros() as u64,
    };

    let mut x = *x0;
    if set.contains(&x.to_vector()) {
        return finish(Verdict::CertifiedStable, Some(0), None, start);
    }
    for step in 1..=steps {
        let out = policy.compute(&x);
        match out.status {
            PolicyStatus::Ok => {}
            PolicyStatus::Infeasible => {
                return finish(
                    Verdict::NotCertified,
                    None,
                    Some(FailureReason::Infeasible),
                    start,
                )
            }
            PolicyStatus::DivergedGuard => {
                return finish(
                    Verdict::NotCertified,
                    None,
                    Some(FailureReason::Diverged),
                    start,
                )
            }
        }
        let mut voltage = out.input.voltage;
        if let Some(w) = cfg.disturbance_injection {
            let sign = if step % 2 == 0 { 1.0 } else { -1.0 };
            voltage += T::cast(w * sign);
        }
        match step_nonlinear(&x, Input::new(voltage), params, ts, cfg.substeps)
            .expect("valid ts and substeps")
        {
            StepOutcome::Ok(next) => x = next,
            StepOutcome::Diverged => {
                return finish(
                    Verdict::NotCertified,
                    None,
                    Some(FailureReason::Diverged),
                    start,
                )
            }
        }
        if set.contains(&x.to_vector()) {
            return finish(Verdict::CertifiedStable, Some(step), None, start);
        }
    }
    finish(
        Verdict::NotCertified,
        None,
        Some(FailureReason::HorizonExhausted),
        start,
    )
}

/// Full campaign over the configured controllers: identical sample list
/// per controller, rollouts dispatched across the rayon pool, each worker
/// cloning its own policy instance (warm starts are reset per sample).
pub fn run_campaign<T: Scalar>(
    cfg: &McConfig,
    params: &TwipParams<T>,
    set: &CertifiedInvariantSet<T>,
    policies: &[Policy<T>],
) -> Result<(McSummary, Vec<ControllerCampaign>), McError> {
    if policies.is_empty() {
        return Err(McError::NoControllers);
    }
    let steps = cfg.steps()?;
    let samples = sample_initial_conditions::<T>(cfg);
    let hash = sample_list_hash(&samples);
    let campaign_start = Instant::now();

    let mut campaigns = Vec::with_capacity(policies.len());
    for prototype in policies {
        let controller_start = Instant::now();
        let results: Vec<SampleResult> = samples
            .par_iter()
            .enumerate()
            .map_init(
                || prototype.clone(),
                |policy, (i, x0)| {
                    policy.reset_warm_start();
                    rollout(i, x0, policy, set, params, cfg, steps)
                },
            )
            .collect();
        let stable_count = results
            .iter()
            .filter(|r| r.verdict == Verdict::CertifiedStable)
            .count();
        let count_failure = |reason: FailureReason| {
            results.iter().filter(|r| r.failure == Some(reason)).count()
        };
        campaigns.push(ControllerCampaign {
            controller: prototype.kind(),
            stable_fraction: stable_count as f64 / results.len() as f64,
            stable_count,
            infeasible_count: count_failure(FailureReason::Infeasible),
            diverged_count: count_failure(FailureReason::Diverged),
            horizon_exhausted_count: count_failure(FailureReason::HorizonExhausted),
            wall_time_s: controller_start.elapsed().as_secs_f64(),
            results,
        });
    }

    let n = cfg.n_samples as f64;
    let fractions: Vec<(ControllerKind, f64)> = campaigns
        .iter()
        .map(|c| (c.controller, c.stable_fraction))
        .collect();
    let standard_errors = fractions
        .iter()
        .map(|&(k, p)| (k, (p * (1.0 - p) / n).sqrt()))
        .collect();
    let agreement = (0..campaigns.len())
        .map(|i| {
            (0..campaigns.len())
                .map(|j| {
                    let same = campaigns[i]
                        .results
                        .iter()
                        .zip(&campaigns[j].results)
                        .filter(|(a, b)| a.verdict == b.verdict)
                        .count();
                    same as f64 / n
                })
                .collect()
        })
        .collect();

    let summary = McSummary {
        n_samples: cfg.n_samples,
        steps,
        sample_list_hash: hash,
        fractions,
        standard_errors,
        agreement,
        wall_time_s: campaign_start.elapsed().as_secs_f64(),
    };
    Ok((summary, campaigns))
}

/// Writes the per-sample CSV, sorted by sample index, one block per
/// controller. Timing columns are the only nondeterministic fields.
pub fn write_sample_csv<W: std::io::Write>(
    mut out: W,
    campaigns: &[ControllerCampaign],
) -> std::io::Result<()> {
    writeln!(
        out,
        "index,x_w,xdot_w,theta,thetadot,controller,verdict,entry_step,failure,wall_time_us"
    )?;
    for campaign in campaigns {
        for r in &campaign.results {
            let verdict = match r.verdict {
                Verdict::CertifiedStable => "certified-stable",
                Verdict::NotCertified => "not-certified",
            };
            let entry = r
                .entry_step
                .map(|s| s.to_string())
                .unwrap_or_default();
            let failure = match r.failure {
                Some(FailureReason::Infeasible) => "infeasible",
                Some(FailureReason::Diverged) => "diverged",
                Some(FailureReason::HorizonExhausted) => "horizon-exhausted",
                None => "",
            };
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.index,
                r.initial_state[0],
                r.initial_state[1],
                r.initial_state[2],
                r.initial_state[3],
                campaign.controller,
                verdict,
                entry,
                failure,
                r.wall_time_us
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controllers::LqrPolicy;
    use crate::linalg::SymmetricMatrix;
    use nalgebra::RowVector4;

    fn tiny_set(level: f64) -> CertifiedInvariantSet<f64> {
        CertifiedInvariantSet {
            lyapunov: SymmetricMatrix::identity(4),
            gamma_bound: 1.0,
            gamma: 0.9,
            rho_ball: level.sqrt(),
            level,
            lambda_min: 1.0,
            lambda_max: 1.0,
            max_observed_ratio: 0.0,
        }
    }

    #[test]
    fn samples_stay_in_the_box_with_zero_position() {
        let cfg = McConfig {
            n_samples: 2_000,
            ..Default::default()
        };
        let samples = sample_initial_conditions::<f64>(&cfg);
        for s in &samples {
            assert_eq!(s.position, 0.0);
            assert!((-1.0..=1.0).contains(&s.velocity));
            assert!((-1.5..=1.5).contains(&s.pitch));
            assert!((-1.5..=1.5).contains(&s.pitch_rate));
        }
    }

    #[test]
    fn sampling_is_deterministic_and_mean_centered() {
        let cfg = McConfig {
            n_samples: 5_000,
            ..Default::default()
        };
        let a = sample_initial_conditions::<f64>(&cfg);
        let b = sample_initial_conditions::<f64>(&cfg);
        assert_eq!(sample_list_hash(&a), sample_list_hash(&b));
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x, y);
        }
        // CLT bound: mean within 3 sigma of the box center
        let n = cfg.n_samples as f64;
        let mean_v: f64 = a.iter().map(|s| s.velocity).sum::<f64>() / n;
        let mean_p: f64 = a.iter().map(|s| s.pitch).sum::<f64>() / n;
        let mean_r: f64 = a.iter().map(|s| s.pitch_rate).sum::<f64>() / n;
        assert!(mean_v.abs() <= 3.0 * (2.0 / 12f64.sqrt()) / n.sqrt());
        assert!(mean_p.abs() <= 3.0 * (3.0 / 12f64.sqrt()) / n.sqrt());
        assert!(mean_r.abs() <= 3.0 * (3.0 / 12f64.sqrt()) / n.sqrt());
    }

    #[test]
    fn origin_sample_is_stable_at_step_zero() {
        let params = TwipParams::new(TwipParams::nominal()).unwrap();
        let set = tiny_set(1e-4);
        let cfg = McConfig::default();
        let mut policy = LqrPolicy::new(RowVector4::new(-4.291, -8.142, -9.271, -0.574), 2.2);
        let r = rollout(
            0,
            &State::zero(),
            &mut policy,
            &set,
            &params,
            &cfg,
            cfg.steps().unwrap(),
        );
        assert_eq!(r.verdict, Verdict::CertifiedStable);
        assert_eq!(r.entry_step, Some(0));
    }

    #[test]
    fn extreme_corner_fails_under_lqr() {
        let params = TwipParams::new(TwipParams::nominal()).unwrap();
        let set = tiny_set(1e-4);
        let cfg = McConfig::default();
        let mut policy = LqrPolicy::new(RowVector4::new(-4.291, -8.142, -9.271, -0.574), 2.2);
        let x0 = State {
            position: 0.0,
            velocity: 0.0,
            pitch: 1.5,
            pitch_rate: 1.5,
        };
        let r = rollout(
            1,
            &x0,
            &mut policy,
            &set,
            &params,
            &cfg,
            cfg.steps().unwrap(),
        );
        assert_eq!(r.verdict, Verdict::NotCertified);
        assert!(r.failure.is_some());
    }

    #[test]
    fn rejects_non_integral_horizon() {
        let cfg = McConfig {
            horizon_seconds: 20.005,
            ..Default::default()
        };
        assert!(cfg.steps().is_err());
    }

    #[test]
    fn csv_is_deterministic_except_timing() {
        let params = TwipParams::new(TwipParams::nominal()).unwrap();
        let set = tiny_set(1e-4);
        let cfg = McConfig {
            n_samples: 50,
            horizon_seconds: 1.0,
            ..Default::default()
        };
        let policies = vec![Policy::Lqr(LqrPolicy::new(
            RowVector4::new(-4.291, -8.142, -9.271, -0.574),
            2.2,
        ))];
        let strip_timing = |csv: &str| -> String {
            csv.lines()
                .map(|l| l.rsplit_once(',').map(|(head, _)| head.to_string()).unwrap())
                .collect::<Vec<_>>()
                .join("\n")
        };
        let mut first = Vec::new();
        let (_, campaigns) = run_campaign(&cfg, &params, &set, &policies).unwrap();
        write_sample_csv(&mut first, &campaigns).unwrap();
        let mut second = Vec::new();
        let (_, campaigns) = run_campaign(&cfg, &params, &set, &policies).unwrap();
        write_sample_csv(&mut second, &campaigns).unwrap();
        assert_eq!(
            strip_timing(&String::from_utf8(first).unwrap()),
            strip_timing(&String::from_utf8(second).unwrap())
        );
    }

    #[test]
    fn longer_horizon_never_flips_stable_to_unstable() {
        let params = TwipParams::new(TwipParams::nominal()).unwrap();
        let set = tiny_set(4e-4);
        let gain = RowVector4::new(-4.291, -8.142, -9.271, -0.574);
        let cfg_short = McConfig {
            n_samples: 40,
            horizon_seconds: 5.0,
            ..Default::default()
        };
        let cfg_long = McConfig {
            horizon_seconds: 10.0,
            ..cfg_short.clone()
        };
        let samples = sample_initial_conditions::<f64>(&cfg_short);
        for (i, x0) in samples.iter().enumerate() {
            let mut p = LqrPolicy::new(gain, 2.2);
            let short = rollout(i, x0, &mut p, &set, &params, &cfg_short, 500);
            let mut p = LqrPolicy::new(gain, 2.2);
            let long = rollout(i, x0, &mut p, &set, &params, &cfg_long, 1000);
            if short.verdict == Verdict::CertifiedStable {
                assert_eq!(long.verdict, Verdict::CertifiedStable);
                assert_eq!(short.entry_step, long.entry_step);
            }
        }
    }
}
