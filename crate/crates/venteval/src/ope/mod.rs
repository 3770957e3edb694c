//! Off-policy evaluation: per-step weighted importance sampling, fitted
//! Q-evaluation, and matching-based simulation, each with percentile
//! bootstrap intervals, plus the clinical summary table.

pub mod bootstrap;
pub mod fqe;
pub mod pswis;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VentError};
use crate::mdp::{is_aggressive, RewardParams};
use crate::nwe::NweModel;
use crate::policies::Policy;
use crate::propensity::LogisticModel;
use crate::simulator::{batch_simulate, SimStart, Trajectory};

pub use bootstrap::{bootstrap_ci, BootstrapConfig};
pub use fqe::{
    fit_fqe, fqe_estimate, EvalPolicy, FqeChoice, FqeConfig, FqeDataset, FqeModel,
    FqeTransition, FunctionClass, StatePolicy,
};
pub use pswis::{logged_dataset, pswis_estimate, LoggedStep, LoggedTrajectory, RATIO_CLIP};

/// Method-specific extras attached to an estimate; fields are `None` when
/// they do not apply to the method.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OpeDiagnostics {
    /// Smallest per-step effective sample size (PSWIS).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ess_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ess_per_step: Option<Vec<f64>>,
    /// Number of per-step ratios hitting the clip (PSWIS).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fqe_iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fqe_gap: Option<f64>,
    /// Fraction of simulated steps using the nearest-neighbor fallback
    /// (matching).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fallback_rate: Option<f64>,
    /// Episodes whose simulation failed (matching).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_failures: Option<usize>,
}

/// A policy-value estimate with its bootstrap interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpeEstimate {
    pub method: String,
    /// Mean discounted return.
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: f64,
    pub n_episodes: usize,
    pub diagnostics: OpeDiagnostics,
}

/// The clinical summary of a set of (simulated) trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalMetrics {
    /// Share of episodes ending with terminal SpO2 of 95 or above.
    pub pct_terminal_spo2_above_95: f64,
    /// Mean terminal-minus-initial SpO2 among episodes ending below 95;
    /// absent when every episode ends at 95 or above.
    pub mean_delta_spo2_among_below_95: Option<f64>,
    /// Share of steps prescribing an aggressive tidal-volume bin.
    pub pct_steps_vt_aggressive: f64,
    /// Share of steps prescribing an aggressive FiO2 bin.
    pub pct_steps_fio2_aggressive: f64,
}

pub fn compute_clinical_metrics(trajectories: &[Trajectory]) -> Result<ClinicalMetrics> {
    if trajectories.is_empty() {
        return Err(VentError::data("clinical metrics need at least one trajectory"));
    }
    let n = trajectories.len() as f64;
    let mut above = 0usize;
    let mut deltas = Vec::new();
    let mut steps = 0usize;
    let (mut vt_aggr, mut fio2_aggr) = (0usize, 0usize);
    for t in trajectories {
        let first = t.states.first().expect("non-empty trajectory").spo2();
        let last = t.states.last().expect("non-empty trajectory").spo2();
        if last >= 95.0 {
            above += 1;
        } else {
            deltas.push(last - first);
        }
        for &a in &t.actions {
            steps += 1;
            let (vt, fio2) = is_aggressive(a);
            if vt {
                vt_aggr += 1;
            }
            if fio2 {
                fio2_aggr += 1;
            }
        }
    }
    let mean_delta = if deltas.is_empty() {
        None
    } else {
        Some(deltas.iter().sum::<f64>() / deltas.len() as f64)
    };
    Ok(ClinicalMetrics {
        pct_terminal_spo2_above_95: 100.0 * above as f64 / n,
        mean_delta_spo2_among_below_95: mean_delta,
        pct_steps_vt_aggressive: 100.0 * vt_aggr as f64 / steps.max(1) as f64,
        pct_steps_fio2_aggressive: 100.0 * fio2_aggr as f64 / steps.max(1) as f64,
    })
}

/// Matching-based OPE: simulate one counterfactual trajectory per source
/// episode at its true horizon, then average discounted returns. The
/// clinical metrics come from the same trajectories as the value estimate.
pub fn matching_ope(
    policy: &dyn Policy,
    starts: &[SimStart],
    model: &NweModel,
    propensity: &LogisticModel,
    params: &RewardParams,
    seed: u64,
    bootstrap: &BootstrapConfig,
) -> Result<(OpeEstimate, ClinicalMetrics)> {
    let report = batch_simulate(policy, starts, model, propensity, params, seed)?;
    if report.trajectories.is_empty() {
        return Err(VentError::data(format!(
            "matching OPE: all {} simulations failed (first: {})",
            report.failures.len(),
            report.failures.first().map(|f| f.message.as_str()).unwrap_or("none")
        )));
    }
    let returns: Vec<f64> = report
        .trajectories
        .iter()
        .map(|t| t.discounted_return(params.gamma))
        .collect();
    let point = returns.iter().sum::<f64>() / returns.len() as f64;
    let (ci_low, ci_high) = if returns.len() >= 2 {
        bootstrap_ci(&returns, bootstrap)?
    } else {
        (point, point)
    };
    let total_steps: usize = report.trajectories.iter().map(|t| t.diagnostics.n_steps).sum();
    let total_fallbacks: usize =
        report.trajectories.iter().map(|t| t.diagnostics.fallback_steps).sum();

    let estimate = OpeEstimate {
        method: "matching".into(),
        point,
        ci_low,
        ci_high,
        level: bootstrap.level,
        n_episodes: report.trajectories.len(),
        diagnostics: OpeDiagnostics {
            fallback_rate: Some(total_fallbacks as f64 / total_steps.max(1) as f64),
            n_failures: Some(report.failures.len()),
            ..OpeDiagnostics::default()
        },
    };
    let metrics = compute_clinical_metrics(&report.trajectories)?;
    Ok((estimate, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Transition;
    use crate::mdp::{ActionTriple, StateVector};
    use crate::nwe::{fit_nwe, BandwidthSet};
    use crate::policies::PolicyDecision;
    use crate::propensity::{fit_logistic, DEFAULT_L2};
    use crate::schema::{
        FeatureGroups, StateFeature, N_OBSERVABLE, N_TYPE_FEATURES, PROPENSITY_INDEX, STATE_DIM,
    };
    use crate::simulator::SimDiagnostics;

    struct FixedPolicy(ActionTriple);

    impl Policy for FixedPolicy {
        fn decide(&self, _s: &StateVector) -> PolicyDecision {
            PolicyDecision::Deterministic(self.0)
        }
    }

    fn spo2_state(spo2: f64) -> StateVector {
        let mut s = [0.0; STATE_DIM];
        s[StateFeature::SpO2.index()] = spo2;
        s[PROPENSITY_INDEX] = 0.5;
        StateVector(s)
    }

    fn hand_trajectory(id: &str, spo2_path: &[f64], a: ActionTriple) -> Trajectory {
        let states: Vec<StateVector> = spo2_path.iter().map(|&v| spo2_state(v)).collect();
        let n = states.len();
        Trajectory {
            episode_id: id.into(),
            states,
            actions: vec![a; n - 1],
            rewards: vec![0.0; n - 1],
            z: 0.5,
            diagnostics: SimDiagnostics { fallback_steps: 0, n_steps: n - 1, seed: 0 },
        }
    }

    #[test]
    fn hand_built_metrics() {
        let calm = ActionTriple::new(1, 1, 1).unwrap();
        let trajs = vec![
            hand_trajectory("above", &[90.0, 93.0, 96.0], calm),
            hand_trajectory("below", &[88.0, 89.0, 90.0], calm),
        ];
        let m = compute_clinical_metrics(&trajs).unwrap();
        assert_eq!(m.pct_terminal_spo2_above_95, 50.0);
        assert_eq!(m.mean_delta_spo2_among_below_95, Some(2.0));
        assert_eq!(m.pct_steps_vt_aggressive, 0.0);
        assert_eq!(m.pct_steps_fio2_aggressive, 0.0);
    }

    #[test]
    fn aggressive_steps_are_counted() {
        let harsh = ActionTriple::new(7, 1, 7).unwrap(); // both flags
        let vt_only = ActionTriple::new(6, 1, 1).unwrap();
        let mut t = hand_trajectory("x", &[90.0, 91.0, 92.0], harsh);
        t.actions[1] = vt_only;
        let m = compute_clinical_metrics(&[t]).unwrap();
        assert_eq!(m.pct_steps_vt_aggressive, 100.0);
        assert_eq!(m.pct_steps_fio2_aggressive, 50.0);
        // Terminal below 95 and no episode above => percentage 0, delta present.
        assert_eq!(m.pct_terminal_spo2_above_95, 0.0);
        assert_eq!(m.mean_delta_spo2_among_below_95, Some(2.0));
    }

    #[test]
    fn all_above_leaves_delta_absent() {
        let calm = ActionTriple::new(1, 1, 1).unwrap();
        let trajs = vec![hand_trajectory("a", &[96.0, 97.0], calm)];
        let m = compute_clinical_metrics(&trajs).unwrap();
        assert_eq!(m.pct_terminal_spo2_above_95, 100.0);
        assert_eq!(m.mean_delta_spo2_among_below_95, None);
    }

    /// Inert environment: the model maps SpO2 to itself, the policy takes
    /// the minimal action everywhere, so nothing moves and nothing is
    /// aggressive.
    #[test]
    fn inert_environment_matching() {
        let calm = ActionTriple::new(1, 1, 1).unwrap();
        let transitions: Vec<Transition> = (0..200)
            .map(|i| {
                let s = spo2_state(60.0 + 0.15 * i as f64);
                Transition {
                    episode_id: format!("t{i}"),
                    t: 0,
                    s,
                    a: calm,
                    r: 0.0,
                    s_next: s,
                    terminal: true,
                }
            })
            .collect();
        // SpO2 sits in the blood-gas group; a tight bandwidth there keeps
        // the kernel local so the identity map is recovered pointwise.
        let model = fit_nwe(
            &transitions,
            BandwidthSet { h_s_blood: 0.3, ..BandwidthSet::reference() },
            FeatureGroups::default(),
        )
        .unwrap();
        let rows: Vec<([f64; N_TYPE_FEATURES], bool)> = (0..20)
            .map(|i| {
                let mut x = [0.0; N_TYPE_FEATURES];
                x[0] = if i % 2 == 0 { -2.0 } else { 2.0 };
                (x, i % 2 == 1)
            })
            .collect();
        let prop = fit_logistic(&rows, DEFAULT_L2).unwrap();

        let starts: Vec<SimStart> = (0..8)
            .map(|i| {
                let mut obs = [0.0; N_OBSERVABLE];
                obs[StateFeature::SpO2.index()] = 65.0 + i as f64;
                SimStart {
                    episode_id: format!("e{i}"),
                    initial_obs: obs,
                    type_features: [0.0; N_TYPE_FEATURES],
                    horizon: 6,
                }
            })
            .collect();
        let bootstrap = BootstrapConfig { n_resamples: 200, ..Default::default() };
        let (est, metrics) = matching_ope(
            &FixedPolicy(calm),
            &starts,
            &model,
            &prop,
            &RewardParams::default(),
            7,
            &bootstrap,
        )
        .unwrap();
        assert_eq!(est.n_episodes, 8);
        assert_eq!(est.diagnostics.n_failures, Some(0));
        // The kernel average over a finite grid is not an exact identity,
        // so allow a small discretization bias.
        assert!(est.point.abs() < 0.05, "inert env must have ~zero return, got {}", est.point);
        assert_eq!(metrics.pct_steps_vt_aggressive, 0.0);
        assert_eq!(metrics.pct_steps_fio2_aggressive, 0.0);
        assert_eq!(metrics.pct_terminal_spo2_above_95, 0.0);
        // SpO2 barely moves, so every below-95 delta is ~0.
        let delta = metrics.mean_delta_spo2_among_below_95.unwrap();
        assert!(delta.abs() < 0.05, "delta {delta}");
    }
}
