//! Policy families: behavior cloning (random forest), conservative
//! Q-improvement (decision-tree Q-learning), and conservative fitted-Q
//! (linear-in-features with a CQL-style penalty).

pub mod bc;
pub mod conservative_q;
pub mod cqi;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VentError};
use crate::mdp::{ActionTriple, StateVector, N_ACTIONS};

pub use bc::{train_bc, BcConfig, BcPolicy};
pub use conservative_q::{
    greedy_action, train_conservative_q, ConservativeQ, CqConfig, CqObjective, CqPenaltyMode,
    TrainReport,
};
pub use cqi::{cqi_act, export_tree_dot, export_tree_text, train_cqi, CqiConfig, CqiTree};

/// What a policy prescribes at one state: either a single action or a full
/// distribution over the 196 triples.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicyDecision {
    Deterministic(ActionTriple),
    /// Probabilities indexed by `ActionTriple::index`, summing to 1.
    Stochastic(Vec<f64>),
}

impl PolicyDecision {
    /// Probability this decision assigns to `a`.
    pub fn prob_of(&self, a: ActionTriple) -> f64 {
        match self {
            PolicyDecision::Deterministic(chosen) => {
                if *chosen == a {
                    1.0
                } else {
                    0.0
                }
            }
            PolicyDecision::Stochastic(p) => p[a.index()],
        }
    }

    /// Draw an action; deterministic decisions ignore the generator.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ActionTriple {
        match self {
            PolicyDecision::Deterministic(a) => *a,
            PolicyDecision::Stochastic(p) => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                for (i, &pi) in p.iter().enumerate() {
                    acc += pi;
                    if u < acc {
                        return ActionTriple::from_index(i).expect("index < 196");
                    }
                }
                // Guard against accumulated rounding at u ~ 1.
                let last = p.iter().rposition(|&pi| pi > 0.0).unwrap_or(N_ACTIONS - 1);
                ActionTriple::from_index(last).expect("index < 196")
            }
        }
    }

    /// The modal action (ties toward the lowest index).
    pub fn greedy(&self) -> ActionTriple {
        match self {
            PolicyDecision::Deterministic(a) => *a,
            PolicyDecision::Stochastic(p) => {
                ActionTriple::from_index(greedy_index(p)).expect("index < 196")
            }
        }
    }
}

/// Index of the largest value, ties toward the lowest index.
pub fn greedy_index(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// A queryable ventilation policy.
pub trait Policy: Send + Sync {
    fn decide(&self, s: &StateVector) -> PolicyDecision;
}

/// Serialization envelope for trained policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyModel {
    Bc(BcPolicy),
    Cqi(CqiTree),
    ConservativeQ(ConservativeQ),
}

impl PolicyModel {
    pub fn as_policy(&self) -> &dyn Policy {
        match self {
            PolicyModel::Bc(p) => p,
            PolicyModel::Cqi(p) => p,
            PolicyModel::ConservativeQ(p) => p,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            PolicyModel::Bc(_) => "bc",
            PolicyModel::Cqi(_) => "cqi",
            PolicyModel::ConservativeQ(_) => "cq",
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| VentError::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<PolicyModel> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| VentError::io(path.display().to_string(), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

impl Policy for PolicyModel {
    fn decide(&self, s: &StateVector) -> PolicyDecision {
        self.as_policy().decide(s)
    }
}

/// Count policy choices over a set of states (the action-distribution
/// figure's underlying data).
pub fn action_distribution(policy: &dyn Policy, states: &[StateVector]) -> Vec<usize> {
    let mut counts = vec![0usize; N_ACTIONS];
    for s in states {
        counts[policy.decide(s).greedy().index()] += 1;
    }
    counts
}
