//! Conservative fitted-Q over discrete actions: per-action linear heads on
//! a standardized state-feature map, trained by iterated Bellman
//! regression with a CQL-style penalty pushing down Q at out-of-data
//! actions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VentError};
use crate::ingest::Transition;
use crate::mdp::{ActionTriple, StateVector, N_ACTIONS};
use crate::policies::{greedy_index, BcPolicy, Policy, PolicyDecision};
use crate::schema::STATE_DIM;

/// Feature-map dimension: the 16 standardized state features plus a bias.
pub const N_FEATURES: usize = STATE_DIM + 1;

const ARMIJO_C: f64 = 1e-4;
const GRAD_TOL: f64 = 1e-9;
const MAX_BACKTRACKS: usize = 60;

/// How the data term of the CQL penalty is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CqPenaltyMode {
    /// Penalize `logsumexp_a Q(s,a) - Q(s, a_data)`.
    DataAction,
    /// Penalize `logsumexp_a Q(s,a) - E_{a~pi_b} Q(s,a)` with the cloned
    /// behavior policy supplying the expectation.
    BehaviorExpectation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CqConfig {
    /// Conservatism weight; 0 recovers plain fitted Q-iteration.
    pub alpha_cql: f64,
    pub gamma: f64,
    /// Outer iterations; Bellman targets are frozen at each epoch start.
    pub epochs: usize,
    /// Gradient steps per epoch (full-batch, Armijo line search).
    pub inner_steps: usize,
    pub penalty: CqPenaltyMode,
    pub seed: u64,
}

impl Default for CqConfig {
    fn default() -> Self {
        CqConfig {
            alpha_cql: 0.25,
            gamma: 0.99,
            epochs: 30,
            inner_steps: 25,
            penalty: CqPenaltyMode::DataAction,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConservativeQ {
    /// One weight vector of length [`N_FEATURES`] per action.
    weights: Vec<Vec<f64>>,
    mean: Vec<f64>,
    std: Vec<f64>,
    config: CqConfig,
}

/// Optimizer trace, one entry per accepted step plus the epoch summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Objective after every accepted line-search step, all epochs
    /// concatenated (monotone within an epoch; jumps when targets
    /// refresh).
    pub step_losses: Vec<f64>,
    /// Objective at the end of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean of `logsumexp_a Q - data term` before training.
    pub cql_gap_start: f64,
    /// Same gap at the final parameters.
    pub cql_gap_end: f64,
    pub accepted_steps: usize,
}

impl ConservativeQ {
    fn features(&self, s: &StateVector) -> [f64; N_FEATURES] {
        let mut phi = [1.0; N_FEATURES];
        for i in 0..STATE_DIM {
            phi[i] = (s.0[i] - self.mean[i]) / self.std[i];
        }
        phi
    }

    /// Q(s, a) for every action.
    pub fn q_values(&self, s: &StateVector) -> Vec<f64> {
        let phi = self.features(s);
        self.weights.iter().map(|w| dot(w, &phi)).collect()
    }

    pub fn alpha_cql(&self) -> f64 {
        self.config.alpha_cql
    }
}

/// Argmax over the 196 actions; ties resolve to the lowest index.
pub fn greedy_action(q: &ConservativeQ, s: &StateVector) -> ActionTriple {
    ActionTriple::from_index(greedy_index(&q.q_values(s))).expect("full action table")
}

impl Policy for ConservativeQ {
    fn decide(&self, s: &StateVector) -> PolicyDecision {
        PolicyDecision::Deterministic(greedy_action(self, s))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// The per-epoch objective: Bellman MSE against frozen targets plus the
/// CQL penalty. Weights are indexed [action][feature].
struct Objective {
    /// Row-major feature matrix, one row per transition.
    phi: Vec<[f64; N_FEATURES]>,
    actions: Vec<usize>,
    targets: Vec<f64>,
    alpha_cql: f64,
    /// Behavior probabilities per row (only in BehaviorExpectation mode).
    behavior_probs: Option<Vec<Vec<f64>>>,
}

/// Per-chunk partial so parallel accumulation keeps a fixed reduction
/// order (chunks are summed sequentially afterwards).
struct Partial {
    loss: f64,
    grad: Vec<f64>,
}

impl Objective {
    fn n(&self) -> usize {
        self.phi.len()
    }

    fn q_row(&self, w: &[Vec<f64>], i: usize) -> Vec<f64> {
        w.iter().map(|wa| dot(wa, &self.phi[i])).collect()
    }

    /// Stable logsumexp and softmax of one row's Q-values.
    fn lse_softmax(q: &[f64]) -> (f64, Vec<f64>) {
        let m = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = q.iter().map(|&v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        (m + z.ln(), exps.iter().map(|&e| e / z).collect())
    }

    fn data_term(&self, i: usize, q: &[f64]) -> f64 {
        match &self.behavior_probs {
            None => q[self.actions[i]],
            Some(probs) => dot(&probs[i], q),
        }
    }

    fn chunk_eval(&self, range: std::ops::Range<usize>, w: &[Vec<f64>], with_grad: bool) -> Partial {
        let n = self.n() as f64;
        let mut loss = 0.0;
        let mut grad = if with_grad { vec![0.0; N_ACTIONS * N_FEATURES] } else { Vec::new() };
        for i in range {
            let phi = &self.phi[i];
            let a = self.actions[i];
            if self.alpha_cql == 0.0 {
                // Penalty skipped entirely: only the data action's head
                // touches this row.
                let resid = dot(&w[a], phi) - self.targets[i];
                loss += resid * resid / n;
                if with_grad {
                    let c = 2.0 * resid / n;
                    for (j, &p) in phi.iter().enumerate() {
                        grad[a * N_FEATURES + j] += c * p;
                    }
                }
                continue;
            }
            let q = self.q_row(w, i);
            let resid = q[a] - self.targets[i];
            let (lse, softmax) = Self::lse_softmax(&q);
            loss += (resid * resid + self.alpha_cql * (lse - self.data_term(i, &q))) / n;
            if with_grad {
                let c_bellman = 2.0 * resid / n;
                for (j, &p) in phi.iter().enumerate() {
                    grad[a * N_FEATURES + j] += c_bellman * p;
                }
                for (b, &pb) in softmax.iter().enumerate() {
                    let mut c = self.alpha_cql * pb / n;
                    match &self.behavior_probs {
                        None => {
                            if b == a {
                                c -= self.alpha_cql / n;
                            }
                        }
                        Some(probs) => c -= self.alpha_cql * probs[i][b] / n,
                    }
                    if c != 0.0 {
                        for (j, &p) in phi.iter().enumerate() {
                            grad[b * N_FEATURES + j] += c * p;
                        }
                    }
                }
            }
        }
        Partial { loss, grad }
    }

    fn eval(&self, w: &[Vec<f64>], with_grad: bool) -> (f64, Vec<f64>) {
        const CHUNK: usize = 512;
        let ranges: Vec<std::ops::Range<usize>> = (0..self.n())
            .step_by(CHUNK)
            .map(|start| start..(start + CHUNK).min(self.n()))
            .collect();
        let partials: Vec<Partial> = ranges
            .into_par_iter()
            .map(|r| self.chunk_eval(r, w, with_grad))
            .collect();
        let mut loss = 0.0;
        let mut grad = if with_grad { vec![0.0; N_ACTIONS * N_FEATURES] } else { Vec::new() };
        for p in partials {
            loss += p.loss;
            for (g, pg) in grad.iter_mut().zip(&p.grad) {
                *g += pg;
            }
        }
        (loss, grad)
    }

    fn loss(&self, w: &[Vec<f64>]) -> f64 {
        self.eval(w, false).0
    }

    /// Mean over rows of `logsumexp_a Q - data term` at the given weights.
    fn cql_gap(&self, w: &[Vec<f64>]) -> f64 {
        let total: f64 = (0..self.n())
            .map(|i| {
                let q = self.q_row(w, i);
                let (lse, _) = Self::lse_softmax(&q);
                lse - self.data_term(i, &q)
            })
            .sum();
        total / self.n() as f64
    }
}

fn standardize_states(transitions: &[Transition]) -> (Vec<f64>, Vec<f64>) {
    let n = transitions.len() as f64;
    let mut mean = vec![0.0; STATE_DIM];
    for t in transitions {
        for (m, v) in mean.iter_mut().zip(&t.s.0) {
            *m += v / n;
        }
    }
    let mut std = vec![0.0; STATE_DIM];
    for t in transitions {
        for (s, (v, m)) in std.iter_mut().zip(t.s.0.iter().zip(&mean)) {
            *s += (v - m) * (v - m) / n;
        }
    }
    for s in &mut std {
        *s = s.sqrt();
        if *s == 0.0 {
            *s = 1.0;
        }
    }
    (mean, std)
}

/// Train the conservative fitted-Q model. `behavior` is consulted only in
/// [`CqPenaltyMode::BehaviorExpectation`]; the default mode takes the data
/// action as the penalty's comparison term.
pub fn train_conservative_q(
    transitions: &[Transition],
    config: CqConfig,
    behavior: Option<&BcPolicy>,
) -> Result<(ConservativeQ, TrainReport)> {
    if transitions.is_empty() {
        return Err(VentError::data("conservative Q needs at least one transition"));
    }
    if !(config.alpha_cql >= 0.0 && config.alpha_cql.is_finite()) {
        return Err(VentError::invalid("alpha_cql must be finite and >= 0"));
    }
    if !(0.0..=1.0).contains(&config.gamma) {
        return Err(VentError::invalid("gamma must lie in [0,1]"));
    }
    if config.epochs == 0 || config.inner_steps == 0 {
        return Err(VentError::invalid("epochs and inner_steps must be positive"));
    }
    if config.penalty == CqPenaltyMode::BehaviorExpectation && behavior.is_none() {
        return Err(VentError::invalid(
            "behavior_expectation penalty requires a behavior policy",
        ));
    }

    let (mean, std) = standardize_states(transitions);
    let mut model = ConservativeQ {
        weights: vec![vec![0.0; N_FEATURES]; N_ACTIONS],
        mean,
        std,
        config,
    };

    let phi: Vec<[f64; N_FEATURES]> = transitions.iter().map(|t| model.features(&t.s)).collect();
    let phi_next: Vec<[f64; N_FEATURES]> =
        transitions.iter().map(|t| model.features(&t.s_next)).collect();
    let actions: Vec<usize> = transitions.iter().map(|t| t.a.index()).collect();
    let behavior_probs = match config.penalty {
        CqPenaltyMode::DataAction => None,
        CqPenaltyMode::BehaviorExpectation => {
            let bc = behavior.expect("checked above");
            Some(transitions.iter().map(|t| bc.floored_probs(&t.s)).collect())
        }
    };

    let mut objective = Objective {
        phi,
        actions,
        targets: vec![0.0; transitions.len()],
        alpha_cql: config.alpha_cql,
        behavior_probs,
    };

    let mut report = TrainReport {
        step_losses: Vec::new(),
        epoch_losses: Vec::new(),
        cql_gap_start: objective.cql_gap(&model.weights),
        cql_gap_end: 0.0,
        accepted_steps: 0,
    };

    for epoch in 0..config.epochs {
        // Freeze Bellman targets at the current weights.
        objective.targets = transitions
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if t.terminal {
                    t.r
                } else {
                    let max_q = model
                        .weights
                        .iter()
                        .map(|w| dot(w, &phi_next[i]))
                        .fold(f64::NEG_INFINITY, f64::max);
                    t.r + config.gamma * max_q
                }
            })
            .collect();

        let (mut loss, mut grad) = objective.eval(&model.weights, true);
        if !loss.is_finite() {
            return Err(VentError::Diverged {
                epoch,
                message: format!(
                    "objective became non-finite; last finite epoch loss {:?}",
                    report.epoch_losses.last()
                ),
            });
        }
        let mut eta = 1.0;
        for _ in 0..config.inner_steps {
            let gnorm2: f64 = grad.iter().map(|g| g * g).sum();
            if gnorm2.sqrt() < GRAD_TOL {
                break;
            }
            let mut accepted = None;
            for _ in 0..MAX_BACKTRACKS {
                let trial: Vec<Vec<f64>> = model
                    .weights
                    .iter()
                    .enumerate()
                    .map(|(a, w)| {
                        w.iter()
                            .enumerate()
                            .map(|(j, v)| v - eta * grad[a * N_FEATURES + j])
                            .collect()
                    })
                    .collect();
                let trial_loss = objective.loss(&trial);
                if trial_loss.is_finite() && trial_loss <= loss - ARMIJO_C * eta * gnorm2 {
                    accepted = Some((trial, trial_loss));
                    break;
                }
                eta *= 0.5;
            }
            let Some((trial, trial_loss)) = accepted else { break };
            model.weights = trial;
            loss = trial_loss;
            report.step_losses.push(loss);
            report.accepted_steps += 1;
            grad = objective.eval(&model.weights, true).1;
            eta = (eta * 2.0).min(1e3);
        }
        report.epoch_losses.push(loss);
    }

    report.cql_gap_end = objective.cql_gap(&model.weights);
    Ok((model, report))
}

/// Snapshot of the first epoch's objective, exposed so external tooling can
/// audit the optimizer: evaluates the penalized loss and its analytic
/// gradient at arbitrary weights.
///
/// Bellman targets are frozen exactly as epoch 0 of
/// [`train_conservative_q`] freezes them — at the zero initialization the
/// max-Q term vanishes, so every target is the immediate reward.
pub struct CqObjective {
    inner: Objective,
}

impl CqObjective {
    /// Build the epoch-0 objective for `transitions` under `config`.
    /// `behavior` is required in [`CqPenaltyMode::BehaviorExpectation`]
    /// and ignored otherwise, mirroring training.
    pub fn new(
        transitions: &[Transition],
        config: &CqConfig,
        behavior: Option<&BcPolicy>,
    ) -> Result<CqObjective> {
        if transitions.is_empty() {
            return Err(VentError::data("conservative Q needs at least one transition"));
        }
        if !(config.alpha_cql >= 0.0 && config.alpha_cql.is_finite()) {
            return Err(VentError::invalid("alpha_cql must be finite and >= 0"));
        }
        if config.penalty == CqPenaltyMode::BehaviorExpectation && behavior.is_none() {
            return Err(VentError::invalid(
                "behavior_expectation penalty requires a behavior policy",
            ));
        }
        let (mean, std) = standardize_states(transitions);
        let probe = ConservativeQ {
            weights: vec![vec![0.0; N_FEATURES]; N_ACTIONS],
            mean,
            std,
            config: *config,
        };
        let behavior_probs = match config.penalty {
            CqPenaltyMode::DataAction => None,
            CqPenaltyMode::BehaviorExpectation => {
                let bc = behavior.expect("checked above");
                Some(transitions.iter().map(|t| bc.floored_probs(&t.s)).collect())
            }
        };
        Ok(CqObjective {
            inner: Objective {
                phi: transitions.iter().map(|t| probe.features(&t.s)).collect(),
                actions: transitions.iter().map(|t| t.a.index()).collect(),
                targets: transitions.iter().map(|t| t.r).collect(),
                alpha_cql: config.alpha_cql,
                behavior_probs,
            },
        })
    }

    /// Objective value at `weights`, indexed `[action][feature]` with
    /// [`N_ACTIONS`] rows of length [`N_FEATURES`].
    pub fn loss(&self, weights: &[Vec<f64>]) -> f64 {
        self.inner.loss(weights)
    }

    /// Objective value and its gradient at `weights`; the gradient is flat,
    /// entry `a * N_FEATURES + j` pairing with `weights[a][j]`.
    pub fn loss_and_grad(&self, weights: &[Vec<f64>]) -> (f64, Vec<f64>) {
        self.inner.eval(weights, true)
    }
}
