//! Behavior cloning: a seeded random-forest classifier from states to the
//! observed action triples.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VentError};
use crate::ingest::Transition;
use crate::mdp::{ActionTriple, StateVector, N_ACTIONS};
use crate::policies::{Policy, PolicyDecision};
use crate::rng::{derive_seed, rng_from};
use crate::schema::STATE_DIM;
use rand::Rng;

/// Probability floor applied when the forest serves as the behavior policy
/// for importance ratios.
pub const PROB_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BcConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    /// Features sampled per split (defaults to sqrt of the state dim).
    pub mtry: usize,
    pub seed: u64,
}

impl Default for BcConfig {
    fn default() -> Self {
        BcConfig { n_trees: 100, max_depth: 12, mtry: 4, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum TreeNode {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { class: u16 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Tree {
    nodes: Vec<TreeNode>,
}

impl Tree {
    fn classify(&self, s: &[f64]) -> u16 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Leaf { class } => return *class,
                TreeNode::Split { feature, threshold, left, right } => {
                    i = if s[*feature] >= *threshold { *right } else { *left };
                }
            }
        }
    }
}

/// The fitted forest. Class `c` corresponds to action index
/// `classes[c]`; only triples observed in training are predictable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcPolicy {
    config: BcConfig,
    classes: Vec<u16>,
    trees: Vec<Tree>,
}

struct TreeBuilder<'a> {
    xs: &'a [[f64; STATE_DIM]],
    ys: &'a [u16],
    n_classes: usize,
    max_depth: usize,
    mtry: usize,
}

impl TreeBuilder<'_> {
    fn majority(&self, idx: &[usize]) -> u16 {
        let mut counts = vec![0usize; self.n_classes];
        for &i in idx {
            counts[self.ys[i] as usize] += 1;
        }
        let mut best = 0;
        for (c, &n) in counts.iter().enumerate() {
            if n > counts[best] {
                best = c;
            }
        }
        best as u16
    }

    fn is_pure(&self, idx: &[usize]) -> bool {
        idx.windows(2).all(|w| self.ys[w[0]] == self.ys[w[1]])
    }

    /// Best (threshold, gini impurity) for one feature over the node's
    /// samples, scanning split points between distinct consecutive values
    /// with incremental class-count sums.
    fn best_split_on(&self, idx: &mut [usize], feature: usize) -> Option<(f64, f64)> {
        idx.sort_by(|&a, &b| self.xs[a][feature].total_cmp(&self.xs[b][feature]));
        let n = idx.len();
        let mut right_counts = vec![0u32; self.n_classes];
        for &i in idx.iter() {
            right_counts[self.ys[i] as usize] += 1;
        }
        let mut left_counts = vec![0u32; self.n_classes];
        let mut sum_sq_left = 0.0f64;
        let mut sum_sq_right: f64 =
            right_counts.iter().map(|&c| (c as f64) * (c as f64)).sum();

        let mut best: Option<(f64, f64)> = None;
        for pos in 0..n - 1 {
            let c = self.ys[idx[pos]] as usize;
            let lc = left_counts[c] as f64;
            let rc = right_counts[c] as f64;
            sum_sq_left += 2.0 * lc + 1.0;
            sum_sq_right -= 2.0 * rc - 1.0;
            left_counts[c] += 1;
            right_counts[c] -= 1;

            let v_lo = self.xs[idx[pos]][feature];
            let v_hi = self.xs[idx[pos + 1]][feature];
            if v_lo == v_hi {
                continue;
            }
            let n_l = (pos + 1) as f64;
            let n_r = (n - pos - 1) as f64;
            let gini = (n_l - sum_sq_left / n_l + n_r - sum_sq_right / n_r) / n as f64;
            let threshold = 0.5 * (v_lo + v_hi);
            if best.map_or(true, |(_, g)| gini < g) {
                best = Some((threshold, gini));
            }
        }
        best
    }

    fn build(&self, nodes: &mut Vec<TreeNode>, idx: &mut [usize], depth: usize, rng: &mut impl Rng) -> usize {
        if depth >= self.max_depth || idx.len() < 2 || self.is_pure(idx) {
            let class = self.majority(idx);
            nodes.push(TreeNode::Leaf { class });
            return nodes.len() - 1;
        }

        // Sample mtry distinct candidate features.
        let mut features: Vec<usize> = (0..STATE_DIM).collect();
        for k in 0..self.mtry.min(STATE_DIM) {
            let j = rng.gen_range(k..STATE_DIM);
            features.swap(k, j);
        }
        let mut best: Option<(usize, f64, f64)> = None;
        for &f in &features[..self.mtry.min(STATE_DIM)] {
            if let Some((threshold, gini)) = self.best_split_on(idx, f) {
                if best.map_or(true, |(_, _, g)| gini < g) {
                    best = Some((f, threshold, gini));
                }
            }
        }
        let Some((feature, threshold, _)) = best else {
            let class = self.majority(idx);
            nodes.push(TreeNode::Leaf { class });
            return nodes.len() - 1;
        };

        let split_at = stable_partition(idx, |&i| self.xs[i][feature] < threshold);
        let (left_idx, right_idx) = idx.split_at_mut(split_at);
        let slot = nodes.len();
        nodes.push(TreeNode::Leaf { class: 0 }); // placeholder
        let left = self.build(nodes, left_idx, depth + 1, rng);
        let right = self.build(nodes, right_idx, depth + 1, rng);
        nodes[slot] = TreeNode::Split { feature, threshold, left, right };
        slot
    }
}

/// Stable partition: moves elements satisfying `pred` to the front,
/// preserving relative order on both sides; returns the boundary.
fn stable_partition<T: Copy>(slice: &mut [T], pred: impl Fn(&T) -> bool) -> usize {
    let hits: Vec<T> = slice.iter().copied().filter(|v| pred(v)).collect();
    let misses: Vec<T> = slice.iter().copied().filter(|v| !pred(v)).collect();
    let k = hits.len();
    slice[..k].copy_from_slice(&hits);
    slice[k..].copy_from_slice(&misses);
    k
}

/// Fit the forest on (state, action) pairs from the transitions.
pub fn train_bc(transitions: &[Transition], config: BcConfig) -> Result<BcPolicy> {
    if transitions.is_empty() {
        return Err(VentError::data("behavior cloning needs at least one transition"));
    }
    if config.n_trees == 0 || config.mtry == 0 {
        return Err(VentError::invalid("n_trees and mtry must be positive"));
    }

    let mut classes: Vec<u16> = transitions.iter().map(|t| t.a.index() as u16).collect();
    classes.sort_unstable();
    classes.dedup();
    let class_of = {
        let mut map = [u16::MAX; N_ACTIONS];
        for (c, &a) in classes.iter().enumerate() {
            map[a as usize] = c as u16;
        }
        map
    };

    let xs: Vec<[f64; STATE_DIM]> = transitions.iter().map(|t| t.s.0).collect();
    let ys: Vec<u16> = transitions.iter().map(|t| class_of[t.a.index()]).collect();
    let builder = TreeBuilder {
        xs: &xs,
        ys: &ys,
        n_classes: classes.len(),
        max_depth: config.max_depth,
        mtry: config.mtry,
    };

    let n = xs.len();
    let trees: Vec<Tree> = (0..config.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng_from(derive_seed(config.seed, t as u64));
            // Bootstrap resample of the training rows.
            let mut idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
            let mut nodes = Vec::new();
            builder.build(&mut nodes, &mut idx, 0, &mut rng);
            Tree { nodes }
        })
        .collect();

    Ok(BcPolicy { config, classes, trees })
}

impl BcPolicy {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn observed_actions(&self) -> impl Iterator<Item = ActionTriple> + '_ {
        self.classes.iter().map(|&a| ActionTriple::from_index(a as usize).expect("stored index"))
    }

    /// Vote-share probabilities over all 196 actions (zero for triples
    /// never observed in training).
    pub fn probs(&self, s: &StateVector) -> Vec<f64> {
        let mut votes = vec![0u32; self.classes.len()];
        for tree in &self.trees {
            votes[tree.classify(&s.0) as usize] += 1;
        }
        let mut p = vec![0.0; N_ACTIONS];
        let n = self.trees.len() as f64;
        for (c, &v) in votes.iter().enumerate() {
            p[self.classes[c] as usize] = v as f64 / n;
        }
        p
    }

    /// Floor-clipped, renormalized probabilities for use as the behavior
    /// policy in importance ratios (keeps every ratio finite).
    pub fn floored_probs(&self, s: &StateVector) -> Vec<f64> {
        let mut p = self.probs(s);
        for v in &mut p {
            *v = v.max(PROB_FLOOR);
        }
        let total: f64 = p.iter().sum();
        for v in &mut p {
            *v /= total;
        }
        p
    }

    /// View of this forest with floored probabilities, for use as a
    /// behavior policy.
    pub fn as_behavior(&self) -> FlooredBc<'_> {
        FlooredBc { inner: self }
    }
}

impl Policy for BcPolicy {
    fn decide(&self, s: &StateVector) -> PolicyDecision {
        PolicyDecision::Stochastic(self.probs(s))
    }
}

/// A [`BcPolicy`] serving as the behavior policy: same forest, floored
/// probabilities.
pub struct FlooredBc<'a> {
    inner: &'a BcPolicy,
}

impl Policy for FlooredBc<'_> {
    fn decide(&self, s: &StateVector) -> PolicyDecision {
        PolicyDecision::Stochastic(self.inner.floored_probs(s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::standard_normal;
    use crate::schema::PROPENSITY_INDEX;
    use approx::assert_relative_eq;

    fn state(fill: f64) -> StateVector {
        let mut s = [fill; STATE_DIM];
        s[PROPENSITY_INDEX] = 0.5;
        StateVector(s)
    }

    fn transition(s: StateVector, a: ActionTriple) -> Transition {
        Transition {
            episode_id: "e".into(),
            t: 0,
            s,
            a,
            r: 0.0,
            s_next: s,
            terminal: false,
        }
    }

    #[test]
    fn pure_mapping_is_learned() {
        let a1 = ActionTriple::new(2, 1, 3).unwrap();
        let a2 = ActionTriple::new(5, 3, 6).unwrap();
        let mut data = Vec::new();
        for _ in 0..30 {
            data.push(transition(state(0.0), a1));
            data.push(transition(state(10.0), a2));
        }
        let bc = train_bc(&data, BcConfig { n_trees: 25, ..Default::default() }).unwrap();
        assert!(bc.probs(&state(0.0))[a1.index()] > 0.9);
        assert!(bc.probs(&state(10.0))[a2.index()] > 0.9);
        assert_eq!(bc.n_classes(), 2);
    }

    #[test]
    fn probabilities_normalize() {
        let mut rng = rng_from(4);
        let data: Vec<Transition> = (0..200)
            .map(|_| {
                let mut s = [0.0; STATE_DIM];
                for v in &mut s {
                    *v = standard_normal(&mut rng);
                }
                let a = ActionTriple::from_index(rng.gen_range(0..N_ACTIONS)).unwrap();
                transition(StateVector(s), a)
            })
            .collect();
        let bc = train_bc(&data, BcConfig { n_trees: 40, ..Default::default() }).unwrap();
        for _ in 0..10 {
            let mut s = [0.0; STATE_DIM];
            for v in &mut s {
                *v = standard_normal(&mut rng);
            }
            let s = StateVector(s);
            let raw: f64 = bc.probs(&s).iter().sum();
            assert_relative_eq!(raw, 1.0, epsilon = 1e-12);
            let floored = bc.floored_probs(&s);
            assert_relative_eq!(floored.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            assert!(floored.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn beats_majority_baseline_on_stochastic_cohort() {
        // Two clusters with different modal actions; the generating policy
        // is stochastic so the majority class is an imperfect baseline.
        let a_major = ActionTriple::new(1, 1, 1).unwrap();
        let a_minor = ActionTriple::new(4, 2, 4).unwrap();
        let mut rng = rng_from(77);
        let mut data = Vec::new();
        for i in 0..400 {
            let center = if i % 2 == 0 { -3.0 } else { 3.0 };
            let mut s = [0.0; STATE_DIM];
            for v in &mut s {
                *v = center + 0.5 * standard_normal(&mut rng);
            }
            // Cluster at -3 mostly picks a_major (80%), cluster at +3
            // mostly a_minor (60%), so the global majority is a_major.
            let p_major = if center < 0.0 { 0.8 } else { 0.4 };
            let a = if rng.gen::<f64>() < p_major { a_major } else { a_minor };
            data.push(transition(StateVector(s), a));
        }
        let bc = train_bc(&data, BcConfig::default()).unwrap();

        let majority_hits = data
            .iter()
            .filter(|t| t.a == a_major)
            .count()
            .max(data.iter().filter(|t| t.a == a_minor).count());
        let forest_hits = data
            .iter()
            .filter(|t| {
                let probs = bc.probs(&t.s);
                let pred = probs
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                pred == t.a.index()
            })
            .count();
        assert!(
            forest_hits > majority_hits,
            "forest {forest_hits} <= majority {majority_hits}"
        );
    }

    #[test]
    fn training_is_reproducible() {
        let mut rng = rng_from(9);
        let data: Vec<Transition> = (0..100)
            .map(|_| {
                let mut s = [0.0; STATE_DIM];
                for v in &mut s {
                    *v = standard_normal(&mut rng);
                }
                transition(StateVector(s), ActionTriple::from_index(rng.gen_range(0..8)).unwrap())
            })
            .collect();
        let cfg = BcConfig { n_trees: 30, seed: 5, ..Default::default() };
        let bc1 = train_bc(&data, cfg).unwrap();
        let bc2 = train_bc(&data, cfg).unwrap();
        assert_eq!(bc1, bc2);
        assert!(train_bc(&[], cfg).is_err());
    }
}
