//! Per-step weighted importance sampling.
//!
//! The self-normalized form is used: with cumulative ratios
//! `rho_{1:t} = prod_{u<=t} pi_e(a_u|s_u)/pi_b(a_u|s_u)` and per-step
//! normalizers `w_t = (1/n) sum_i rho^i_{1:t}`, the estimate is
//! `(1/n) sum_i sum_t gamma^(t-1) (rho^i_{1:t}/w_t) r^i_t`. Trajectories
//! shorter than `t` carry their final cumulative ratio forward into `w_t`,
//! which keeps the pi_e = pi_b identity exact at the bit level.

use crate::error::{Result, VentError};
use crate::ingest::Transition;
use crate::mdp::{ActionTriple, StateVector};
use crate::ope::bootstrap::{bootstrap_ci, BootstrapConfig};
use crate::ope::{OpeDiagnostics, OpeEstimate};
use crate::policies::{BcPolicy, Policy};

/// Per-step importance ratios are clipped here; the diagnostic reports
/// how often the clip engaged.
pub const RATIO_CLIP: f64 = 1e3;

/// One logged decision with its (floored) behavior probability.
#[derive(Debug, Clone, PartialEq)]
pub struct LoggedStep {
    pub s: StateVector,
    pub a: ActionTriple,
    pub r: f64,
    pub pi_b: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoggedTrajectory {
    pub episode_id: String,
    pub steps: Vec<LoggedStep>,
}

/// Group transitions into per-episode trajectories and attach behavior
/// probabilities from the cloned policy. The floor keeps every ratio
/// finite, but a probability that is zero *before* flooring means the
/// forest never saw that action anywhere near the state — that is an
/// error, not something to paper over.
pub fn logged_dataset(
    transitions: &[Transition],
    behavior: &BcPolicy,
) -> Result<Vec<LoggedTrajectory>> {
    let mut order: Vec<&str> = Vec::new();
    for t in transitions {
        if order.last() != Some(&t.episode_id.as_str())
            && !order.contains(&t.episode_id.as_str())
        {
            order.push(&t.episode_id);
        }
    }
    let mut out = Vec::with_capacity(order.len());
    for id in order {
        let mut eps: Vec<&Transition> =
            transitions.iter().filter(|t| t.episode_id == id).collect();
        eps.sort_by_key(|t| t.t);
        let mut steps = Vec::with_capacity(eps.len());
        for t in eps {
            let raw = behavior.probs(&t.s)[t.a.index()];
            if raw <= 0.0 {
                return Err(VentError::data(format!(
                    "behavior probability is zero before flooring at episode {}, step {}",
                    t.episode_id, t.t
                )));
            }
            let pi_b = behavior.floored_probs(&t.s)[t.a.index()];
            steps.push(LoggedStep { s: t.s, a: t.a, r: t.r, pi_b });
        }
        out.push(LoggedTrajectory { episode_id: id.to_string(), steps });
    }
    Ok(out)
}

/// Cumulative (carried-forward) ratios per trajectory and the per-step
/// normalizers; also returns the number of clipped step ratios.
fn cumulative_ratios(
    dataset: &[LoggedTrajectory],
    policy: &dyn Policy,
) -> Result<(Vec<Vec<f64>>, Vec<f64>, usize)> {
    let n = dataset.len();
    let t_max = dataset.iter().map(|d| d.steps.len()).max().unwrap_or(0);
    let mut cum = vec![vec![0.0; t_max]; n];
    let mut clip_count = 0;
    for (i, traj) in dataset.iter().enumerate() {
        let mut rho = 1.0;
        for (t, step) in traj.steps.iter().enumerate() {
            if !(step.pi_b > 0.0) {
                return Err(VentError::data(format!(
                    "non-positive behavior probability at episode {}, step {t}",
                    traj.episode_id
                )));
            }
            let mut ratio = policy.decide(&step.s).prob_of(step.a) / step.pi_b;
            if ratio > RATIO_CLIP {
                ratio = RATIO_CLIP;
                clip_count += 1;
            }
            rho *= ratio;
            cum[i][t] = rho;
        }
        // Ended trajectories keep contributing their final cumulative
        // ratio to later normalizers.
        for t in traj.steps.len()..t_max {
            cum[i][t] = rho;
        }
    }
    let w: Vec<f64> = (0..t_max)
        .map(|t| cum.iter().map(|c| c[t]).sum::<f64>() / n as f64)
        .collect();
    Ok((cum, w, clip_count))
}

/// Self-normalized per-step weighted importance sampling estimate with a
/// percentile-bootstrap interval over per-episode contributions (the
/// normalizers stay fixed at their full-sample values during resampling).
pub fn pswis_estimate(
    dataset: &[LoggedTrajectory],
    policy: &dyn Policy,
    gamma: f64,
    bootstrap: &BootstrapConfig,
) -> Result<OpeEstimate> {
    if dataset.is_empty() {
        return Err(VentError::data("PSWIS needs at least one trajectory"));
    }
    let n = dataset.len();
    let (cum, mut w, clip_count) = cumulative_ratios(dataset, policy)?;
    // A step where every cumulative ratio vanished contributes nothing;
    // the normalizer is irrelevant there but must not produce 0/0.
    for wt in &mut w {
        if *wt == 0.0 {
            *wt = 1.0;
        }
    }

    let ess_per_step: Vec<f64> = (0..w.len())
        .map(|t| {
            let sum: f64 = cum.iter().map(|c| c[t]).sum();
            let sum_sq: f64 = cum.iter().map(|c| c[t] * c[t]).sum();
            if sum_sq == 0.0 {
                0.0
            } else {
                sum * sum / sum_sq
            }
        })
        .collect();

    let contributions: Vec<f64> = dataset
        .iter()
        .enumerate()
        .map(|(i, traj)| {
            let mut acc = 0.0;
            let mut disc = 1.0;
            for (t, step) in traj.steps.iter().enumerate() {
                acc += disc * (cum[i][t] / w[t]) * step.r;
                disc *= gamma;
            }
            acc
        })
        .collect();
    let point = contributions.iter().sum::<f64>() / n as f64;

    let (ci_low, ci_high) = if n >= 2 {
        bootstrap_ci(&contributions, bootstrap)?
    } else {
        (point, point)
    };

    Ok(OpeEstimate {
        method: "pswis".into(),
        point,
        ci_low,
        ci_high,
        level: bootstrap.level,
        n_episodes: n,
        diagnostics: OpeDiagnostics {
            ess_min: ess_per_step.iter().copied().reduce(f64::min),
            ess_per_step: Some(ess_per_step),
            clip_count: Some(clip_count),
            ..OpeDiagnostics::default()
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{discounted_return, N_ACTIONS};
    use crate::policies::PolicyDecision;
    use crate::rng::rng_from;
    use crate::schema::STATE_DIM;
    use approx::assert_relative_eq;
    use rand::Rng;

    /// Same fixed distribution at every state.
    struct FixedDist(Vec<f64>);

    impl Policy for FixedDist {
        fn decide(&self, _s: &StateVector) -> PolicyDecision {
            PolicyDecision::Stochastic(self.0.clone())
        }
    }

    fn dist(pairs: &[(usize, f64)]) -> Vec<f64> {
        let mut p = vec![0.0; N_ACTIONS];
        for &(i, v) in pairs {
            p[i] = v;
        }
        p
    }

    fn traj(id: &str, steps: Vec<(usize, f64, f64)>) -> LoggedTrajectory {
        LoggedTrajectory {
            episode_id: id.into(),
            steps: steps
                .into_iter()
                .map(|(a, r, pi_b)| LoggedStep {
                    s: StateVector([0.0; STATE_DIM]),
                    a: ActionTriple::from_index(a).unwrap(),
                    r,
                    pi_b,
                })
                .collect(),
        }
    }

    fn cfg() -> BootstrapConfig {
        BootstrapConfig { n_resamples: 200, ..Default::default() }
    }

    #[test]
    fn identity_policy_recovers_mean_return_exactly() {
        let p = dist(&[(0, 0.5), (1, 0.3), (2, 0.2)]);
        let policy = FixedDist(p.clone());
        let gamma = 0.99;
        let dataset = vec![
            traj("a", vec![(0, 2.0, p[0]), (1, -1.0, p[1]), (2, 0.5, p[2])]),
            traj("b", vec![(1, 1.0, p[1]), (1, 3.0, p[1])]),
            traj("c", vec![(2, -0.25, p[2])]),
        ];
        let est = pswis_estimate(&dataset, &policy, gamma, &cfg()).unwrap();
        let mean_return = dataset
            .iter()
            .map(|d| {
                let rs: Vec<f64> = d.steps.iter().map(|s| s.r).collect();
                discounted_return(&rs, gamma)
            })
            .sum::<f64>()
            / dataset.len() as f64;
        assert_eq!(est.point, mean_return, "identity must be exact to the bit");
        assert_eq!(est.diagnostics.clip_count, Some(0));
        // Every cumulative ratio is exactly 1, so ESS is n at each step.
        for &e in est.diagnostics.ess_per_step.as_ref().unwrap() {
            assert_eq!(e, 3.0);
        }
    }

    #[test]
    fn single_trajectory_self_normalizes() {
        // pi_e differs from pi_b, but with n=1 the normalized weight is 1
        // at every step.
        let policy = FixedDist(dist(&[(0, 0.9), (1, 0.1)]));
        let gamma = 0.95;
        let dataset = vec![traj("only", vec![(0, 1.5, 0.4), (1, -2.0, 0.6), (0, 0.75, 0.4)])];
        let est = pswis_estimate(&dataset, &policy, gamma, &cfg()).unwrap();
        let rs = [1.5, -2.0, 0.75];
        assert_eq!(est.point, discounted_return(&rs, gamma));
        assert_eq!(est.n_episodes, 1);
        assert_eq!(est.ci_low, est.point);
    }

    /// 2-action one-step bandit with known behavior and evaluation
    /// distributions: the estimate must approach the analytic
    /// expectation 0.2*1 + 0.8*3 = 2.6.
    #[test]
    fn bandit_matches_analytic_expectation() {
        let pi_b = [0.7, 0.3];
        let rewards = [1.0, 3.0];
        let policy = FixedDist(dist(&[(0, 0.2), (1, 0.8)]));
        let mut rng = rng_from(2024);
        let dataset: Vec<LoggedTrajectory> = (0..100_000)
            .map(|i| {
                let a = usize::from(rng.gen::<f64>() >= pi_b[0]);
                traj(&format!("b{i}"), vec![(a, rewards[a], pi_b[a])])
            })
            .collect();
        let est = pswis_estimate(&dataset, &policy, 0.99, &cfg()).unwrap();
        assert!(
            (est.point - 2.6).abs() < 1e-2,
            "estimate {} too far from 2.6",
            est.point
        );
        assert!(est.ci_low <= est.point && est.point <= est.ci_high);
    }

    #[test]
    fn estimate_is_order_invariant() {
        let policy = FixedDist(dist(&[(0, 0.6), (1, 0.4)]));
        let mut rng = rng_from(5);
        let mut dataset: Vec<LoggedTrajectory> = (0..50)
            .map(|i| {
                let steps = (0..rng.gen_range(1..6))
                    .map(|_| {
                        let a = rng.gen_range(0..2);
                        (a, rng.gen::<f64>() * 4.0 - 2.0, if a == 0 { 0.55 } else { 0.45 })
                    })
                    .collect();
                traj(&format!("e{i}"), steps)
            })
            .collect();
        let forward = pswis_estimate(&dataset, &policy, 0.99, &cfg()).unwrap();
        dataset.reverse();
        let backward = pswis_estimate(&dataset, &policy, 0.99, &cfg()).unwrap();
        assert_relative_eq!(forward.point, backward.point, epsilon = 1e-12);
    }

    #[test]
    fn normalized_weights_sum_to_n_at_each_step() {
        let policy = FixedDist(dist(&[(0, 0.25), (1, 0.75)]));
        let dataset = vec![
            traj("a", vec![(0, 1.0, 0.5), (1, 2.0, 0.5)]),
            traj("b", vec![(1, 0.5, 0.5)]),
            traj("c", vec![(0, -1.0, 0.5), (0, 0.0, 0.5)]),
        ];
        let (cum, w, _) = cumulative_ratios(&dataset, &policy).unwrap();
        for t in 0..w.len() {
            let total: f64 = cum.iter().map(|c| c[t] / w[t]).sum();
            assert_relative_eq!(total, dataset.len() as f64, epsilon = 1e-9);
        }
    }

    #[test]
    fn extreme_ratios_are_clipped_and_counted() {
        let policy = FixedDist(dist(&[(0, 1.0)]));
        let dataset = vec![
            traj("a", vec![(0, 1.0, 1e-6)]), // raw ratio 1e6
            traj("b", vec![(0, 1.0, 0.5)]),
        ];
        let est = pswis_estimate(&dataset, &policy, 0.99, &cfg()).unwrap();
        assert_eq!(est.diagnostics.clip_count, Some(1));
        // The clipped ratio caps at 1e3, so the weighted term stays finite.
        assert!(est.point.is_finite());
    }

    #[test]
    fn prefloor_zero_probability_is_an_error() {
        use crate::policies::{train_bc, BcConfig};
        let seen = ActionTriple::new(1, 1, 1).unwrap();
        let unseen = ActionTriple::new(7, 4, 7).unwrap();
        let mk = |a: ActionTriple| Transition {
            episode_id: "ep".into(),
            t: 0,
            s: StateVector([0.0; STATE_DIM]),
            a,
            r: 0.0,
            s_next: StateVector([0.0; STATE_DIM]),
            terminal: true,
        };
        let train: Vec<Transition> = (0..20).map(|_| mk(seen)).collect();
        let bc = train_bc(&train, BcConfig { n_trees: 10, ..Default::default() }).unwrap();

        let ok = logged_dataset(&train[..3], &bc).unwrap();
        assert_eq!(ok.len(), 1);
        assert_eq!(ok[0].steps.len(), 3);

        let mut bad = mk(unseen);
        bad.t = 5;
        let err = logged_dataset(&[bad], &bc).unwrap_err().to_string();
        assert!(err.contains("ep") && err.contains('5'), "got: {err}");
    }
}
