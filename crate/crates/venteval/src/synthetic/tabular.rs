//! Small random tabular MDPs with exactly solvable values. Transition
//! probabilities are multiples of 1/8, so a dataset replicating each
//! outcome by its count reproduces the dynamics without sampling error —
//! the oracle pairing for exact fitted-Q checks.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Result, VentError};
use crate::ope::fqe::{FqeDataset, FqeTransition};
use crate::rng::{derive_seed, rng_from};

/// Number of probability atoms per (state, action) row.
pub const N_ATOMS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// p[s][a][s'], each a multiple of 1/8.
    pub p: Vec<Vec<Vec<f64>>>,
    /// r[s][a], deterministic.
    pub r: Vec<Vec<f64>>,
    pub gamma: f64,
}

impl TabularMdp {
    /// A random MDP with 2..=max_states states and 2..=max_actions actions.
    pub fn random(seed: u64, max_states: usize, max_actions: usize, gamma: f64) -> Result<TabularMdp> {
        if max_states < 2 || max_actions < 2 {
            return Err(VentError::invalid("need at least 2 states and 2 actions"));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(VentError::invalid("gamma must lie in [0, 1)"));
        }
        let mut rng = rng_from(seed);
        let n_states = rng.gen_range(2..=max_states);
        let n_actions = rng.gen_range(2..=max_actions);
        let mut p = vec![vec![vec![0.0; n_states]; n_actions]; n_states];
        let mut r = vec![vec![0.0; n_actions]; n_states];
        for s in 0..n_states {
            for a in 0..n_actions {
                for _ in 0..N_ATOMS {
                    let s_next = rng.gen_range(0..n_states);
                    p[s][a][s_next] += 1.0 / N_ATOMS as f64;
                }
                r[s][a] = rng.gen_range(-1.0..1.0);
            }
        }
        Ok(TabularMdp { n_states, n_actions, p, r, gamma })
    }

    pub fn validate(&self) -> Result<()> {
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let total: f64 = self.p[s][a].iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(VentError::invalid(format!(
                        "transition row ({s}, {a}) sums to {total}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Exact policy value per state from the Bellman linear system
    /// (I - gamma P_pi) v = r_pi.
    pub fn dp_policy_value(&self, policy: &[usize]) -> Result<Vec<f64>> {
        self.check_policy(policy)?;
        let n = self.n_states;
        let mut system = DMatrix::<f64>::identity(n, n);
        let mut r_pi = DVector::<f64>::zeros(n);
        for s in 0..n {
            let a = policy[s];
            r_pi[s] = self.r[s][a];
            for s_next in 0..n {
                system[(s, s_next)] -= self.gamma * self.p[s][a][s_next];
            }
        }
        let solution = system
            .lu()
            .solve(&r_pi)
            .ok_or_else(|| VentError::numeric("Bellman system is singular"))?;
        Ok(solution.iter().cloned().collect())
    }

    /// A dataset replicating every (s, a) pair's outcome distribution
    /// exactly: one transition per probability atom, all actions covered,
    /// each state once in the initial distribution.
    pub fn replication_dataset(&self) -> FqeDataset {
        let mut transitions = Vec::new();
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                for s_next in 0..self.n_states {
                    let copies = (self.p[s][a][s_next] * N_ATOMS as f64).round() as usize;
                    for _ in 0..copies {
                        transitions.push(FqeTransition {
                            s: vec![s as f64],
                            a,
                            r: self.r[s][a],
                            s_next: vec![s_next as f64],
                            terminal: false,
                        });
                    }
                }
            }
        }
        FqeDataset {
            transitions,
            initial_states: (0..self.n_states).map(|s| vec![s as f64]).collect(),
            n_actions: self.n_actions,
        }
    }

    /// Monte-Carlo policy value from `start`, truncated at `horizon` steps.
    pub fn mc_policy_value(
        &self,
        policy: &[usize],
        start: usize,
        horizon: usize,
        n_rollouts: usize,
        seed: u64,
    ) -> Result<(f64, f64)> {
        self.check_policy(policy)?;
        if start >= self.n_states {
            return Err(VentError::invalid("start state out of range"));
        }
        let returns: Vec<f64> = (0..n_rollouts)
            .map(|i| {
                let mut rng = rng_from(derive_seed(seed, i as u64));
                let mut s = start;
                let mut total = 0.0;
                let mut disc = 1.0;
                for _ in 0..horizon {
                    let a = policy[s];
                    total += disc * self.r[s][a];
                    disc *= self.gamma;
                    let u: f64 = rng.gen();
                    let mut acc = 0.0;
                    let mut next = self.n_states - 1;
                    for (j, &pj) in self.p[s][a].iter().enumerate() {
                        acc += pj;
                        if u < acc {
                            next = j;
                            break;
                        }
                    }
                    s = next;
                }
                total
            })
            .collect();
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let var = returns.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        Ok((mean, (var / n).sqrt()))
    }

    fn check_policy(&self, policy: &[usize]) -> Result<()> {
        if policy.len() != self.n_states || policy.iter().any(|&a| a >= self.n_actions) {
            return Err(VentError::invalid("policy must map every state to a valid action"));
        }
        Ok(())
    }
}
