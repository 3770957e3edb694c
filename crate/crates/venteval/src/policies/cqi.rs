//! Conservative Q-improvement: a depth-capped decision tree whose leaves
//! hold per-action Q tables, trained by replayed Q-updates alternating with
//! greedy structural splits.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VentError};
use crate::ingest::Transition;
use crate::mdp::{representative_action, ActionTriple, StateVector, N_ACTIONS};
use crate::policies::greedy_index;
use crate::rng::rng_from;
use crate::schema::{StateFeature, STATE_DIM};

/// Cap on candidate thresholds per feature when a leaf has seen many
/// distinct values; candidates are then taken at quantile positions.
pub const MAX_SPLIT_CANDIDATES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CqiConfig {
    pub max_depth: usize,
    /// Q-update learning rate, in (0,1).
    pub alpha_lr: f64,
    pub gamma: f64,
    /// Minimum visit-weighted max-Q gain required to accept a split.
    pub split_threshold: f64,
    /// Outer passes; each runs `replay_sweeps` Q-update sweeps and then
    /// attempts at most one split.
    pub passes: usize,
    pub replay_sweeps: usize,
    pub seed: u64,
}

impl Default for CqiConfig {
    fn default() -> Self {
        CqiConfig {
            max_depth: 5,
            alpha_lr: 0.05,
            gamma: 0.99,
            split_threshold: 0.01,
            passes: 25,
            replay_sweeps: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum CqiNode {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { q: Vec<f64>, visits: u64, depth: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CqiTree {
    nodes: Vec<CqiNode>,
    config: CqiConfig,
}

impl CqiTree {
    fn leaf_index(&self, s: &[f64; STATE_DIM]) -> usize {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                CqiNode::Leaf { .. } => return i,
                CqiNode::Split { feature, threshold, left, right } => {
                    i = if s[*feature] >= *threshold { *right } else { *left };
                }
            }
        }
    }

    /// Q-table of the leaf that `s` routes to.
    pub fn leaf_q(&self, s: &StateVector) -> &[f64] {
        match &self.nodes[self.leaf_index(&s.0)] {
            CqiNode::Leaf { q, .. } => q,
            CqiNode::Split { .. } => unreachable!(),
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, CqiNode::Leaf { .. })).count()
    }

    pub fn depth(&self) -> usize {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                CqiNode::Leaf { depth, .. } => Some(*depth),
                _ => None,
            })
            .max()
            .unwrap_or(0)
    }
}

/// Greedy action for `s`: argmax of the leaf Q-table, ties to the lowest
/// action index.
pub fn cqi_act(tree: &CqiTree, s: &StateVector) -> ActionTriple {
    let q = tree.leaf_q(s);
    ActionTriple::from_index(greedy_index(q)).expect("q table covers all actions")
}

impl crate::policies::Policy for CqiTree {
    fn decide(&self, s: &StateVector) -> crate::policies::PolicyDecision {
        crate::policies::PolicyDecision::Deterministic(cqi_act(self, s))
    }
}

struct Trainer<'a> {
    transitions: &'a [Transition],
    cfg: CqiConfig,
}

#[derive(Debug, Clone, Copy)]
struct SplitCandidate {
    leaf: usize,
    feature: usize,
    threshold: f64,
    gain: f64,
}

impl SplitCandidate {
    /// Strict total order so parallel scoring cannot change the winner:
    /// higher gain first, then lower leaf / feature / threshold.
    fn better_than(&self, other: &SplitCandidate) -> bool {
        match self.gain.total_cmp(&other.gain) {
            std::cmp::Ordering::Greater => true,
            std::cmp::Ordering::Less => false,
            std::cmp::Ordering::Equal => (self.leaf, self.feature, self.threshold)
                .partial_cmp(&(other.leaf, other.feature, other.threshold))
                .map_or(false, |o| o == std::cmp::Ordering::Less),
        }
    }
}

impl Trainer<'_> {
    fn max_q(q: &[f64]) -> f64 {
        q.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// One in-place Q-update sweep over the transitions in `order`.
    fn sweep(&self, tree: &mut CqiTree, order: &[usize]) {
        let alpha = self.cfg.alpha_lr;
        let gamma = self.cfg.gamma;
        for &i in order {
            let t = &self.transitions[i];
            let next_value = if t.terminal {
                0.0
            } else {
                let j = tree.leaf_index(&t.s_next.0);
                match &tree.nodes[j] {
                    CqiNode::Leaf { q, .. } => Self::max_q(q),
                    CqiNode::Split { .. } => unreachable!(),
                }
            };
            let target = t.r + gamma * next_value;
            let leaf = tree.leaf_index(&t.s.0);
            if let CqiNode::Leaf { q, .. } = &mut tree.nodes[leaf] {
                let a = t.a.index();
                q[a] = (1.0 - alpha) * q[a] + alpha * target;
            }
        }
    }

    /// Candidate thresholds for one feature over the rows routed to a
    /// leaf: midpoints of consecutive distinct values, thinned to quantile
    /// positions when there are more than [`MAX_SPLIT_CANDIDATES`].
    fn candidate_thresholds(&self, rows: &[usize], feature: usize) -> Vec<f64> {
        let mut values: Vec<f64> =
            rows.iter().map(|&i| self.transitions[i].s.0[feature]).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        if values.len() < 2 {
            return Vec::new();
        }
        let midpoints: Vec<f64> =
            values.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        if midpoints.len() <= MAX_SPLIT_CANDIDATES {
            return midpoints;
        }
        let mut picked = Vec::with_capacity(MAX_SPLIT_CANDIDATES);
        for j in 0..MAX_SPLIT_CANDIDATES {
            let pos = j * (midpoints.len() - 1) / (MAX_SPLIT_CANDIDATES - 1);
            picked.push(midpoints[pos]);
        }
        picked.dedup();
        picked
    }

    /// Gain of splitting `leaf` at (feature, threshold): both hypothetical
    /// children inherit the parent Q-table and receive one replay sweep
    /// over the leaf's rows (next-state values frozen from the current
    /// tree), then the visit-weighted max-Q increase over the parent is
    /// returned.
    fn split_gain(
        &self,
        parent_q: &[f64],
        rows: &[usize],
        next_values: &[f64],
        feature: usize,
        threshold: f64,
    ) -> f64 {
        let mut q_left = parent_q.to_vec();
        let mut q_right = parent_q.to_vec();
        let (mut n_left, mut n_right) = (0u64, 0u64);
        let alpha = self.cfg.alpha_lr;
        let gamma = self.cfg.gamma;
        for &i in rows {
            let t = &self.transitions[i];
            let target = t.r + gamma * next_values[i];
            let q = if t.s.0[feature] >= threshold {
                n_right += 1;
                &mut q_right
            } else {
                n_left += 1;
                &mut q_left
            };
            let a = t.a.index();
            q[a] = (1.0 - alpha) * q[a] + alpha * target;
        }
        if n_left == 0 || n_right == 0 {
            return f64::NEG_INFINITY;
        }
        let weighted = (n_left as f64 * Self::max_q(&q_left)
            + n_right as f64 * Self::max_q(&q_right))
            / (n_left + n_right) as f64;
        weighted - Self::max_q(parent_q)
    }

    fn best_split(&self, tree: &CqiTree, order: &[usize]) -> Option<SplitCandidate> {
        // Rows per leaf, in the current sweep order.
        let mut rows_by_leaf: Vec<Vec<usize>> = vec![Vec::new(); tree.nodes.len()];
        for &i in order {
            rows_by_leaf[tree.leaf_index(&self.transitions[i].s.0)].push(i);
        }
        // Next-state values, frozen once per pass.
        let next_values: Vec<f64> = self
            .transitions
            .iter()
            .map(|t| {
                if t.terminal {
                    0.0
                } else {
                    match &tree.nodes[tree.leaf_index(&t.s_next.0)] {
                        CqiNode::Leaf { q, .. } => Self::max_q(q),
                        CqiNode::Split { .. } => unreachable!(),
                    }
                }
            })
            .collect();

        let mut jobs: Vec<(usize, &[f64], &[usize], usize)> = Vec::new();
        for (leaf, node) in tree.nodes.iter().enumerate() {
            let CqiNode::Leaf { q, depth, .. } = node else { continue };
            if *depth >= self.cfg.max_depth || rows_by_leaf[leaf].len() < 2 {
                continue;
            }
            for feature in 0..STATE_DIM {
                jobs.push((leaf, q, &rows_by_leaf[leaf], feature));
            }
        }
        jobs.into_par_iter()
            .filter_map(|(leaf, q, rows, feature)| {
                let mut best: Option<SplitCandidate> = None;
                for threshold in self.candidate_thresholds(rows, feature) {
                    let gain = self.split_gain(q, rows, &next_values, feature, threshold);
                    let cand = SplitCandidate { leaf, feature, threshold, gain };
                    if best.map_or(true, |b| cand.better_than(&b)) {
                        best = Some(cand);
                    }
                }
                best
            })
            .reduce_with(|a, b| if a.better_than(&b) { a } else { b })
    }
}

/// Train a CQI tree on the transition set. Deterministic for a fixed
/// (data, config) pair: every shuffle derives from `config.seed`.
pub fn train_cqi(transitions: &[Transition], config: CqiConfig) -> Result<CqiTree> {
    if transitions.is_empty() {
        return Err(VentError::data("CQI needs at least one transition"));
    }
    if !(config.alpha_lr > 0.0 && config.alpha_lr < 1.0) {
        return Err(VentError::invalid("alpha_lr must lie in (0,1)"));
    }
    if !(0.0..=1.0).contains(&config.gamma) {
        return Err(VentError::invalid("gamma must lie in [0,1]"));
    }
    if config.passes == 0 || config.replay_sweeps == 0 {
        return Err(VentError::invalid("passes and replay_sweeps must be positive"));
    }

    let trainer = Trainer { transitions, cfg: config };
    let mut tree = CqiTree {
        nodes: vec![CqiNode::Leaf { q: vec![0.0; N_ACTIONS], visits: 0, depth: 0 }],
        config,
    };
    let mut rng = rng_from(config.seed);
    let mut order: Vec<usize> = (0..transitions.len()).collect();
    let mut splitting = true;

    for _pass in 0..config.passes {
        for _ in 0..config.replay_sweeps {
            order.shuffle(&mut rng);
            trainer.sweep(&mut tree, &order);
        }
        if splitting {
            match trainer.best_split(&tree, &order) {
                Some(c) if c.gain > config.split_threshold => {
                    let (q, depth) = match &tree.nodes[c.leaf] {
                        CqiNode::Leaf { q, depth, .. } => (q.clone(), *depth),
                        CqiNode::Split { .. } => unreachable!(),
                    };
                    let left = tree.nodes.len();
                    tree.nodes.push(CqiNode::Leaf { q: q.clone(), visits: 0, depth: depth + 1 });
                    let right = tree.nodes.len();
                    tree.nodes.push(CqiNode::Leaf { q, visits: 0, depth: depth + 1 });
                    tree.nodes[c.leaf] = CqiNode::Split {
                        feature: c.feature,
                        threshold: c.threshold,
                        left,
                        right,
                    };
                }
                // No candidate clears the threshold: the structure is
                // final, keep polishing Q-values.
                _ => splitting = false,
            }
        }
    }

    // Final visit counts from a last deterministic assignment.
    let mut visits_by_leaf = vec![0u64; tree.nodes.len()];
    for t in transitions {
        visits_by_leaf[tree.leaf_index(&t.s.0)] += 1;
    }
    for (i, node) in tree.nodes.iter_mut().enumerate() {
        if let CqiNode::Leaf { visits, .. } = node {
            *visits = visits_by_leaf[i];
        }
    }
    Ok(tree)
}

fn leaf_label(q: &[f64]) -> String {
    let a = ActionTriple::from_index(greedy_index(q)).expect("full q table");
    let (vt, peep, fio2) = representative_action(a);
    format!("Vt_set: {vt:.1} / PEEP: {peep:.1} / FiO2: {fio2:.2}")
}

/// One line per node: internal nodes show the feature name and threshold,
/// leaves show the greedy action's representative settings.
pub fn export_tree_text(tree: &CqiTree) -> String {
    let mut out = String::new();
    for (i, node) in tree.nodes.iter().enumerate() {
        match node {
            CqiNode::Split { feature, threshold, left, right } => {
                out.push_str(&format!(
                    "node {i}: if {} >= {threshold} then node {right} else node {left}\n",
                    StateFeature::ALL[*feature].name()
                ));
            }
            CqiNode::Leaf { q, visits, .. } => {
                out.push_str(&format!("node {i}: leaf (visits {visits}) {}\n", leaf_label(q)));
            }
        }
    }
    out
}

/// Graph description of the tree in DOT format.
pub fn export_tree_dot(tree: &CqiTree) -> String {
    let mut out = String::from("digraph cqi {\n  node [shape=box];\n");
    for (i, node) in tree.nodes.iter().enumerate() {
        match node {
            CqiNode::Split { feature, threshold, left, right } => {
                out.push_str(&format!(
                    "  n{i} [label=\"{} >= {threshold}\"];\n",
                    StateFeature::ALL[*feature].name()
                ));
                out.push_str(&format!("  n{i} -> n{left} [label=\"no\"];\n"));
                out.push_str(&format!("  n{i} -> n{right} [label=\"yes\"];\n"));
            }
            CqiNode::Leaf { q, visits, .. } => {
                let label = leaf_label(q).replace(" / ", "\\n");
                out.push_str(&format!("  n{i} [label=\"{label}\\nvisits {visits}\"];\n"));
            }
        }
    }
    out.push_str("}\n");
    out
}
