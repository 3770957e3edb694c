//! Fitted Q-evaluation: iterate `Q_k <- fit(s, a -> r + gamma * Q_{k-1}(s',
//! pi_e(s')))` on a fixed function class, then read the policy value off
//! the initial states.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VentError};
use crate::ingest::Transition;
use crate::mdp::{StateVector, N_ACTIONS};
use crate::ope::bootstrap::{bootstrap_ci, BootstrapConfig};
use crate::ope::{OpeDiagnostics, OpeEstimate};
use crate::policies::{Policy, PolicyDecision};
use crate::schema::STATE_DIM;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FunctionClass {
    /// Per-action ridge regression on standardized features plus a bias.
    Linear { ridge: f64 },
    /// Exact per-(state, action) means; states must be integer ids in a
    /// single-element feature vector.
    Tabular,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FqeConfig {
    pub gamma: f64,
    pub iters: usize,
    /// Stop once the sup-norm change of the policy values falls below
    /// this.
    pub tol: f64,
    pub class: FunctionClass,
}

impl Default for FqeConfig {
    fn default() -> Self {
        FqeConfig { gamma: 0.99, iters: 200, tol: 1e-9, class: FunctionClass::Linear { ridge: 1e-6 } }
    }
}

/// One transition in the generic (dimension-agnostic) FQE format.
#[derive(Debug, Clone, PartialEq)]
pub struct FqeTransition {
    pub s: Vec<f64>,
    pub a: usize,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FqeDataset {
    pub transitions: Vec<FqeTransition>,
    /// One first state per episode; the estimate averages over these.
    pub initial_states: Vec<Vec<f64>>,
    pub n_actions: usize,
}

impl FqeDataset {
    /// Lift the cohort transitions: full 16-dim states, 196 actions,
    /// first-step states as the initial distribution.
    pub fn from_transitions(transitions: &[Transition]) -> FqeDataset {
        let initial_states = transitions
            .iter()
            .filter(|t| t.t == 0)
            .map(|t| t.s.0.to_vec())
            .collect();
        FqeDataset {
            transitions: transitions
                .iter()
                .map(|t| FqeTransition {
                    s: t.s.0.to_vec(),
                    a: t.a.index(),
                    r: t.r,
                    s_next: t.s_next.0.to_vec(),
                    terminal: t.terminal,
                })
                .collect(),
            initial_states,
            n_actions: N_ACTIONS,
        }
    }

    fn validate(&self) -> Result<usize> {
        if self.transitions.is_empty() {
            return Err(VentError::data("FQE needs at least one transition"));
        }
        if self.initial_states.is_empty() {
            return Err(VentError::data("FQE needs at least one initial state"));
        }
        let dim = self.transitions[0].s.len();
        for t in &self.transitions {
            if t.s.len() != dim || t.s_next.len() != dim {
                return Err(VentError::data("inconsistent FQE state dimensions"));
            }
            if t.a >= self.n_actions {
                return Err(VentError::data(format!(
                    "action id {} out of range (n_actions {})",
                    t.a, self.n_actions
                )));
            }
        }
        if self.initial_states.iter().any(|s| s.len() != dim) {
            return Err(VentError::data("inconsistent FQE initial-state dimension"));
        }
        Ok(dim)
    }
}

/// What the evaluation policy does at a state: a single action or a
/// mixture (used when evaluating stochastic policies such as the clone).
#[derive(Debug, Clone, PartialEq)]
pub enum FqeChoice {
    Action(usize),
    Mixture(Vec<(usize, f64)>),
}

pub trait EvalPolicy {
    fn choose(&self, s: &[f64]) -> FqeChoice;
}

impl<F: Fn(&[f64]) -> FqeChoice> EvalPolicy for F {
    fn choose(&self, s: &[f64]) -> FqeChoice {
        self(s)
    }
}

/// Adapter for the 16-dim cohort policies.
pub struct StatePolicy<'a>(pub &'a dyn Policy);

impl EvalPolicy for StatePolicy<'_> {
    fn choose(&self, s: &[f64]) -> FqeChoice {
        let mut arr = [0.0; STATE_DIM];
        arr.copy_from_slice(s);
        match self.0.decide(&StateVector(arr)) {
            PolicyDecision::Deterministic(a) => FqeChoice::Action(a.index()),
            PolicyDecision::Stochastic(p) => FqeChoice::Mixture(
                p.iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(i, &v)| (i, v)).collect(),
            ),
        }
    }
}

#[derive(Debug, Clone)]
enum Inner {
    Linear { weights: Vec<DVector<f64>>, mean: Vec<f64>, std: Vec<f64> },
    Tabular { q: Vec<Vec<f64>>, n_states: usize },
}

/// The fitted Q-function.
#[derive(Debug, Clone)]
pub struct FqeModel {
    inner: Inner,
    n_actions: usize,
}

impl FqeModel {
    pub fn q_value(&self, s: &[f64], a: usize) -> f64 {
        match &self.inner {
            Inner::Linear { weights, mean, std } => {
                let w = &weights[a];
                let mut total = w[s.len()]; // bias
                for (j, &v) in s.iter().enumerate() {
                    total += w[j] * (v - mean[j]) / std[j];
                }
                total
            }
            Inner::Tabular { q, .. } => q[s[0] as usize][a],
        }
    }

    /// Value of the policy's choice at `s`.
    pub fn policy_value(&self, s: &[f64], choice: &FqeChoice) -> f64 {
        match choice {
            FqeChoice::Action(a) => self.q_value(s, *a),
            FqeChoice::Mixture(parts) => {
                parts.iter().map(|(a, p)| p * self.q_value(s, *a)).sum()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FqeFitInfo {
    pub iterations: usize,
    /// Sup-norm change of next-state policy values in the last iteration.
    pub gap: f64,
}

struct LinearFitter {
    /// Cholesky of (X_a' X_a + ridge I) per action, None when the action
    /// has no data.
    factors: Vec<Option<Cholesky<f64, nalgebra::Dyn>>>,
    /// Standardized design rows per action, with row indices into the
    /// transition list.
    rows: Vec<Vec<usize>>,
    design: Vec<DVector<f64>>,
    dim: usize,
}

impl LinearFitter {
    fn new(data: &FqeDataset, dim: usize, ridge: f64, mean: &[f64], std: &[f64]) -> Self {
        let design: Vec<DVector<f64>> = data
            .transitions
            .iter()
            .map(|t| {
                let mut phi = DVector::zeros(dim + 1);
                for j in 0..dim {
                    phi[j] = (t.s[j] - mean[j]) / std[j];
                }
                phi[dim] = 1.0;
                phi
            })
            .collect();
        let mut rows = vec![Vec::new(); data.n_actions];
        for (i, t) in data.transitions.iter().enumerate() {
            rows[t.a].push(i);
        }
        let factors = rows
            .iter()
            .map(|idx| {
                if idx.is_empty() {
                    return None;
                }
                let mut xtx = DMatrix::from_diagonal_element(dim + 1, dim + 1, ridge);
                for &i in idx {
                    xtx += &design[i] * design[i].transpose();
                }
                Cholesky::new(xtx)
            })
            .collect();
        LinearFitter { factors, rows, design, dim }
    }

    /// Solve the per-action least squares for the given targets.
    fn fit(&self, targets: &[f64], iteration: usize) -> Result<Vec<DVector<f64>>> {
        let mut weights = Vec::with_capacity(self.rows.len());
        for (a, idx) in self.rows.iter().enumerate() {
            if idx.is_empty() {
                // Never-observed action: Q stays identically zero.
                weights.push(DVector::zeros(self.dim + 1));
                continue;
            }
            let factor = self.factors[a].as_ref().ok_or_else(|| {
                VentError::numeric(format!(
                    "FQE regression failed at iteration {iteration}: singular system for action {a}"
                ))
            })?;
            let mut xty = DVector::zeros(self.dim + 1);
            for &i in idx {
                xty += &self.design[i] * targets[i];
            }
            weights.push(factor.solve(&xty));
        }
        Ok(weights)
    }
}

/// Iterate the regression until the policy values stop moving (or `iters`
/// runs out); returns the fitted model and the convergence trace.
pub fn fit_fqe(
    data: &FqeDataset,
    policy: &dyn EvalPolicy,
    cfg: &FqeConfig,
) -> Result<(FqeModel, FqeFitInfo)> {
    let dim = data.validate()?;
    if cfg.iters == 0 {
        return Err(VentError::invalid("FQE needs at least one iteration"));
    }
    if !(0.0..=1.0).contains(&cfg.gamma) {
        return Err(VentError::invalid("gamma must lie in [0,1]"));
    }

    // Choices are policy-dependent but value-independent: compute once.
    let next_choices: Vec<FqeChoice> =
        data.transitions.iter().map(|t| policy.choose(&t.s_next)).collect();

    let mut model = match cfg.class {
        FunctionClass::Linear { .. } => {
            let n = data.transitions.len() as f64;
            let mut mean = vec![0.0; dim];
            for t in &data.transitions {
                for (m, &v) in mean.iter_mut().zip(&t.s) {
                    *m += v / n;
                }
            }
            let mut std = vec![0.0; dim];
            for t in &data.transitions {
                for (sd, (&v, m)) in std.iter_mut().zip(t.s.iter().zip(&mean)) {
                    *sd += (v - m) * (v - m) / n;
                }
            }
            for sd in &mut std {
                *sd = sd.sqrt();
                if *sd == 0.0 {
                    *sd = 1.0;
                }
            }
            FqeModel {
                inner: Inner::Linear {
                    weights: vec![DVector::zeros(dim + 1); data.n_actions],
                    mean,
                    std,
                },
                n_actions: data.n_actions,
            }
        }
        FunctionClass::Tabular => {
            if dim != 1 {
                return Err(VentError::invalid(
                    "tabular FQE expects single-element integer state ids",
                ));
            }
            let mut n_states = 0usize;
            for t in &data.transitions {
                for &v in [t.s[0], t.s_next[0]].iter() {
                    if v < 0.0 || v.fract() != 0.0 {
                        return Err(VentError::data(format!(
                            "tabular FQE state id {v} is not a non-negative integer"
                        )));
                    }
                    n_states = n_states.max(v as usize + 1);
                }
            }
            FqeModel {
                inner: Inner::Tabular { q: vec![vec![0.0; data.n_actions]; n_states], n_states },
                n_actions: data.n_actions,
            }
        }
    };

    let linear_fitter = match cfg.class {
        FunctionClass::Linear { ridge } => {
            let (mean, std) = match &model.inner {
                Inner::Linear { mean, std, .. } => (mean.clone(), std.clone()),
                Inner::Tabular { .. } => unreachable!(),
            };
            Some(LinearFitter::new(data, dim, ridge, &mean, &std))
        }
        FunctionClass::Tabular => None,
    };

    let mut v_next: Vec<f64> = vec![0.0; data.transitions.len()];
    let mut info = FqeFitInfo { iterations: 0, gap: f64::INFINITY };

    for k in 1..=cfg.iters {
        let targets: Vec<f64> = data
            .transitions
            .iter()
            .zip(&v_next)
            .map(|(t, &v)| if t.terminal { t.r } else { t.r + cfg.gamma * v })
            .collect();

        match (&mut model.inner, &linear_fitter) {
            (Inner::Linear { weights, .. }, Some(fitter)) => {
                *weights = fitter.fit(&targets, k)?;
            }
            (Inner::Tabular { q, n_states }, None) => {
                let mut sums = vec![vec![0.0; model.n_actions]; *n_states];
                let mut counts = vec![vec![0usize; model.n_actions]; *n_states];
                for (t, &y) in data.transitions.iter().zip(&targets) {
                    let s = t.s[0] as usize;
                    sums[s][t.a] += y;
                    counts[s][t.a] += 1;
                }
                for s in 0..*n_states {
                    for a in 0..model.n_actions {
                        q[s][a] = if counts[s][a] > 0 {
                            sums[s][a] / counts[s][a] as f64
                        } else {
                            0.0
                        };
                    }
                }
            }
            _ => unreachable!(),
        }

        let mut gap = 0.0f64;
        for (i, t) in data.transitions.iter().enumerate() {
            let v = model.policy_value(&t.s_next, &next_choices[i]);
            gap = gap.max((v - v_next[i]).abs());
            v_next[i] = v;
        }
        info = FqeFitInfo { iterations: k, gap };
        if gap < cfg.tol {
            break;
        }
    }
    Ok((model, info))
}

/// Full FQE estimate: fit, then average Q(s_1, pi_e(s_1)) over episodes
/// with a percentile-bootstrap interval over those per-episode values.
pub fn fqe_estimate(
    data: &FqeDataset,
    policy: &dyn EvalPolicy,
    cfg: &FqeConfig,
    bootstrap: &BootstrapConfig,
) -> Result<OpeEstimate> {
    let (model, info) = fit_fqe(data, policy, cfg)?;
    let values: Vec<f64> = data
        .initial_states
        .iter()
        .map(|s| model.policy_value(s, &policy.choose(s)))
        .collect();
    let point = values.iter().sum::<f64>() / values.len() as f64;
    let (ci_low, ci_high) = if values.len() >= 2 {
        bootstrap_ci(&values, bootstrap)?
    } else {
        (point, point)
    };
    Ok(OpeEstimate {
        method: "fqe".into(),
        point,
        ci_low,
        ci_high,
        level: bootstrap.level,
        n_episodes: values.len(),
        diagnostics: OpeDiagnostics {
            fqe_iterations: Some(info.iterations),
            fqe_gap: Some(info.gap),
            ..OpeDiagnostics::default()
        },
    })
}
