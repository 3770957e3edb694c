//! Matching-based transition model: a Nadaraya-Watson estimator with an
//! Epanechnikov kernel and separate bandwidths per clinical feature group,
//! action, and propensity score. Memory-based: fitting just standardizes
//! and stores the training transitions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VentError};
use crate::ingest::Transition;
use crate::mdp::{ActionTriple, StateVector};
use crate::rng::rng_from;
use crate::schema::{FeatureGroups, N_OBSERVABLE, TARGET_DIM, TARGET_SPO2};
use rand::seq::SliceRandom;

/// Predictions with total kernel mass below this fall back to the nearest
/// neighbor.
pub const EPS_MASS: f64 = 1e-10;
/// CV score assigned to a grid point that produces all-fallback
/// predictions on some fold.
pub const PENALTY_ERROR: f64 = 1e12;

/// Epanechnikov kernel: 0.75(1 - u^2) on |u| < 1, zero outside.
pub fn epanechnikov(u: f64) -> f64 {
    (0.75 * (1.0 - u * u)).max(0.0)
}

/// Kernel bandwidths per distance space, plus the denominator
/// regularization constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandwidthSet {
    pub h_s_hemo: f64,
    pub h_s_resp: f64,
    pub h_s_blood: f64,
    pub h_s_misc: f64,
    pub h_a: f64,
    pub h_z: f64,
    pub lambda: f64,
}

impl BandwidthSet {
    /// The cross-validated selection reported for the source cohort:
    /// (3.036, 2.8, 2.532, 2.032, 1.0, 1.5) with lambda = 1e-3.
    pub fn reference() -> BandwidthSet {
        BandwidthSet {
            h_s_hemo: 3.036,
            h_s_resp: 2.8,
            h_s_blood: 2.532,
            h_s_misc: 2.032,
            h_a: 1.0,
            h_z: 1.5,
            lambda: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let hs = [self.h_s_hemo, self.h_s_resp, self.h_s_blood, self.h_s_misc, self.h_a, self.h_z];
        if hs.iter().any(|&h| !(h > 0.0) || !h.is_finite()) {
            return Err(VentError::invalid("bandwidths must be positive and finite"));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(VentError::invalid("lambda must be non-negative and finite"));
        }
        Ok(())
    }

    fn state_bandwidths(&self) -> [f64; 4] {
        [self.h_s_hemo, self.h_s_resp, self.h_s_blood, self.h_s_misc]
    }
}

/// Candidate values per bandwidth dimension for cross-validated selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthGrid {
    pub h_s_hemo: Vec<f64>,
    pub h_s_resp: Vec<f64>,
    pub h_s_blood: Vec<f64>,
    pub h_s_misc: Vec<f64>,
    pub h_a: Vec<f64>,
    pub h_z: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl Default for BandwidthGrid {
    /// The full hyperparameter grid (2916 points).
    fn default() -> Self {
        BandwidthGrid {
            h_s_hemo: vec![2.036, 2.536, 3.036],
            h_s_resp: vec![1.8, 2.3, 2.8],
            h_s_blood: vec![1.532, 2.032, 2.532],
            h_s_misc: vec![1.532, 2.032, 2.532],
            h_a: vec![1.0, 1.5, 2.0],
            h_z: vec![0.5, 1.0, 1.5, 2.0],
            lambda: vec![1e-2, 1e-3, 1e-4],
        }
    }
}

impl BandwidthGrid {
    /// Enumerate all grid points in lexicographic order of the field lists.
    pub fn points(&self) -> Vec<BandwidthSet> {
        let mut out = Vec::new();
        for &h_s_hemo in &self.h_s_hemo {
            for &h_s_resp in &self.h_s_resp {
                for &h_s_blood in &self.h_s_blood {
                    for &h_s_misc in &self.h_s_misc {
                        for &h_a in &self.h_a {
                            for &h_z in &self.h_z {
                                for &lambda in &self.lambda {
                                    out.push(BandwidthSet {
                                        h_s_hemo,
                                        h_s_resp,
                                        h_s_blood,
                                        h_s_misc,
                                        h_a,
                                        h_z,
                                        lambda,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Per-feature mean and standard deviation (std floored to 1 for constant
/// features, which then standardize to zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    fn fit(rows: impl Iterator<Item = Vec<f64>> + Clone, dim: usize) -> Standardizer {
        let mut mean = vec![0.0; dim];
        let mut n = 0usize;
        for row in rows.clone() {
            for j in 0..dim {
                mean[j] += row[j];
            }
            n += 1;
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; dim];
        for row in rows {
            for j in 0..dim {
                var[j] += (row[j] - mean[j]).powi(2);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n as f64).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter().enumerate().map(|(j, v)| (v - self.mean[j]) / self.std[j]).collect()
    }

    fn invert_one(&self, j: usize, v: f64) -> f64 {
        v * self.std[j] + self.mean[j]
    }
}

/// One stored training transition in model space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sample {
    s_std: Vec<f64>,
    a: [f64; 3],
    z: f64,
    y_std: Vec<f64>,
}

/// Prediction side information.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictDiagnostics {
    /// Total kernel mass before regularization.
    pub mass: f64,
    /// Number of training transitions with nonzero weight.
    pub n_effective: usize,
    /// True when the nearest-neighbor fallback produced the prediction.
    pub fallback: bool,
}

/// The fitted model: standardization statistics plus the stored training
/// set. Immutable after fit; predictions are read-only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NweModel {
    pub state_stats: Standardizer,
    pub target_stats: Standardizer,
    pub bandwidths: BandwidthSet,
    pub groups: FeatureGroups,
    samples: Vec<Sample>,
}

fn action_coords(a: ActionTriple) -> [f64; 3] {
    [a.vt_bin as f64, a.peep_bin as f64, a.fio2_bin as f64]
}

fn euclid_subset(a: &[f64], b: &[f64], idx: &[usize]) -> f64 {
    idx.iter().map(|&i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}

fn euclid3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}

/// Fit the estimator: standardize states and targets on the training
/// transitions and store them.
pub fn fit_nwe(
    transitions: &[Transition],
    bandwidths: BandwidthSet,
    groups: FeatureGroups,
) -> Result<NweModel> {
    if transitions.is_empty() {
        return Err(VentError::data("cannot fit transition model on zero transitions"));
    }
    bandwidths.validate()?;
    groups.validate()?;

    let state_stats = Standardizer::fit(
        transitions.iter().map(|t| t.s.0[..N_OBSERVABLE].to_vec()),
        N_OBSERVABLE,
    );
    let target_stats =
        Standardizer::fit(transitions.iter().map(|t| t.target().to_vec()), TARGET_DIM);

    let samples = transitions
        .iter()
        .map(|t| Sample {
            s_std: state_stats.apply(&t.s.0[..N_OBSERVABLE]),
            a: action_coords(t.a),
            z: t.z(),
            y_std: target_stats.apply(&t.target()),
        })
        .collect();

    Ok(NweModel { state_stats, target_stats, bandwidths, groups, samples })
}

impl NweModel {
    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    /// Kernel weight of one stored sample against a standardized query.
    /// Returns zero as soon as any factor's distance leaves its bandwidth.
    fn weight(&self, sample: &Sample, s_std: &[f64], a: &[f64; 3], z: f64) -> f64 {
        let hs = self.bandwidths.state_bandwidths();
        let mut w = 1.0;
        for (group, h) in self.groups.as_slices().into_iter().zip(hs) {
            let k = epanechnikov(euclid_subset(&sample.s_std, s_std, group) / h);
            if k == 0.0 {
                return 0.0;
            }
            w *= k;
        }
        let ka = epanechnikov(euclid3(&sample.a, a) / self.bandwidths.h_a);
        if ka == 0.0 {
            return 0.0;
        }
        let kz = epanechnikov((sample.z - z).abs() / self.bandwidths.h_z);
        if kz == 0.0 {
            return 0.0;
        }
        w * ka * kz
    }

    /// Sum of all six per-space distances; the fallback neighbor minimizes
    /// this.
    fn total_distance(&self, sample: &Sample, s_std: &[f64], a: &[f64; 3], z: f64) -> f64 {
        let mut d = 0.0;
        for group in self.groups.as_slices() {
            d += euclid_subset(&sample.s_std, s_std, group);
        }
        d + euclid3(&sample.a, a) + (sample.z - z).abs()
    }

    /// Predict the 13-dimensional next-state target (12 dynamic features
    /// plus propensity score) for a query `(s, a, z)`. The query's static
    /// features are ignored; callers re-attach them unchanged.
    pub fn predict_next_state(
        &self,
        s: &StateVector,
        a: ActionTriple,
        z: f64,
    ) -> Result<([f64; TARGET_DIM], PredictDiagnostics)> {
        if s.0.iter().any(|v| !v.is_finite()) || !z.is_finite() {
            return Err(VentError::numeric("non-finite transition-model query"));
        }
        let s_std = self.state_stats.apply(&s.0[..N_OBSERVABLE]);
        let a = action_coords(a);

        let mut acc = vec![0.0; TARGET_DIM];
        let mut mass = 0.0;
        let mut n_effective = 0;
        for sample in &self.samples {
            let w = self.weight(sample, &s_std, &a, z);
            if w > 0.0 {
                n_effective += 1;
                mass += w;
                for j in 0..TARGET_DIM {
                    acc[j] += w * sample.y_std[j];
                }
            }
        }

        let (y_std, fallback) = if mass < EPS_MASS {
            // No support: use the single nearest stored transition under
            // the summed group distances.
            let nearest = self
                .samples
                .iter()
                .enumerate()
                .map(|(i, sample)| (i, self.total_distance(sample, &s_std, &a, z)))
                .min_by(|(_, da), (_, db)| da.total_cmp(db))
                .map(|(i, _)| i)
                .expect("fit guarantees at least one sample");
            (self.samples[nearest].y_std.clone(), true)
        } else {
            let denom = mass + self.bandwidths.lambda;
            (acc.into_iter().map(|v| v / denom).collect::<Vec<f64>>(), false)
        };

        let mut y = [0.0; TARGET_DIM];
        for j in 0..TARGET_DIM {
            y[j] = self.target_stats.invert_one(j, y_std[j]);
        }
        y[TARGET_SPO2] = y[TARGET_SPO2].clamp(0.0, 100.0);

        Ok((y, PredictDiagnostics { mass, n_effective, fallback }))
    }
}

/// One scored grid point from cross-validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvScore {
    pub bandwidths: BandwidthSet,
    /// Mean absolute SpO2 prediction error over validation transitions
    /// (or the penalty constant for all-fallback folds).
    pub mae_spo2: f64,
    pub n_fallback: usize,
}

/// Cross-validation outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub selected: BandwidthSet,
    pub k_folds: usize,
    pub seed: u64,
    pub scores: Vec<CvScore>,
}

struct Fold {
    model: NweModel,
    /// (standardized query state, action coords, z, true raw SpO2).
    val: Vec<(Vec<f64>, [f64; 3], f64, f64)>,
}

/// Pick the grid point minimizing cross-validated SpO2 mean absolute
/// error. Folds are split by episode so no episode straddles a fold
/// boundary; grid points are scored in parallel but reported in grid
/// order.
pub fn select_bandwidths(
    transitions: &[Transition],
    grid: &BandwidthGrid,
    k_folds: usize,
    seed: u64,
) -> Result<CvReport> {
    let points = grid.points();
    if points.is_empty() {
        return Err(VentError::invalid("bandwidth grid is empty"));
    }
    if k_folds < 2 {
        return Err(VentError::invalid("cross-validation needs k_folds >= 2"));
    }

    // Deterministic episode-level fold assignment.
    let mut episode_ids: Vec<&str> = transitions.iter().map(|t| t.episode_id.as_str()).collect();
    episode_ids.sort_unstable();
    episode_ids.dedup();
    if episode_ids.len() < k_folds {
        return Err(VentError::data(format!(
            "{} episodes cannot fill {k_folds} folds",
            episode_ids.len()
        )));
    }
    let mut rng = rng_from(seed);
    let mut shuffled = episode_ids.clone();
    shuffled.shuffle(&mut rng);
    let fold_of = |id: &str| -> usize {
        shuffled.iter().position(|e| *e == id).expect("episode listed") % k_folds
    };

    // The stored samples and standardizers do not depend on the
    // bandwidths, so each fold's model is fit once and re-scored per grid
    // point by swapping the bandwidth set.
    let mut folds = Vec::with_capacity(k_folds);
    for f in 0..k_folds {
        let train: Vec<Transition> = transitions
            .iter()
            .filter(|t| fold_of(&t.episode_id) != f)
            .cloned()
            .collect();
        if train.is_empty() {
            return Err(VentError::data(format!("fold {f} has an empty training split")));
        }
        let model = fit_nwe(&train, BandwidthSet::reference(), FeatureGroups::default())?;
        let val = transitions
            .iter()
            .filter(|t| fold_of(&t.episode_id) == f)
            .map(|t| {
                (
                    model.state_stats.apply(&t.s.0[..N_OBSERVABLE]),
                    action_coords(t.a),
                    t.z(),
                    t.target()[TARGET_SPO2],
                )
            })
            .collect();
        folds.push(Fold { model, val });
    }

    let scores: Vec<CvScore> = points
        .par_iter()
        .map(|bw| score_point(*bw, &folds))
        .collect();

    let best = scores
        .iter()
        .min_by(|a, b| a.mae_spo2.total_cmp(&b.mae_spo2))
        .expect("grid non-empty");

    Ok(CvReport {
        selected: best.bandwidths,
        k_folds,
        seed,
        scores,
    })
}

fn score_point(bw: BandwidthSet, folds: &[Fold]) -> CvScore {
    let mut abs_err_sum = 0.0;
    let mut n_val = 0usize;
    let mut n_fallback = 0usize;
    let mut penalized = false;

    for fold in folds {
        let mut model_bw = fold.model.clone();
        model_bw.bandwidths = bw;
        let mut fold_fallbacks = 0usize;
        for (s_std, a, z, spo2_true) in &fold.val {
            let mut acc = 0.0;
            let mut mass = 0.0;
            for sample in &model_bw.samples {
                let w = model_bw.weight(sample, s_std, a, *z);
                if w > 0.0 {
                    mass += w;
                    acc += w * sample.y_std[TARGET_SPO2];
                }
            }
            let pred_std = if mass < EPS_MASS {
                fold_fallbacks += 1;
                let nearest = model_bw
                    .samples
                    .iter()
                    .map(|sample| {
                        (sample, model_bw.total_distance(sample, s_std, a, *z))
                    })
                    .min_by(|(_, da), (_, db)| da.total_cmp(db))
                    .map(|(sample, _)| sample.y_std[TARGET_SPO2])
                    .expect("non-empty fold");
                nearest
            } else {
                acc / (mass + bw.lambda)
            };
            let pred = model_bw
                .target_stats
                .invert_one(TARGET_SPO2, pred_std)
                .clamp(0.0, 100.0);
            abs_err_sum += (pred - spo2_true).abs();
            n_val += 1;
        }
        if !fold.val.is_empty() && fold_fallbacks == fold.val.len() {
            penalized = true;
        }
        n_fallback += fold_fallbacks;
    }

    let mae_spo2 = if penalized {
        log::warn!("bandwidth point {bw:?} produced an all-fallback fold; penalized");
        PENALTY_ERROR
    } else {
        abs_err_sum / n_val as f64
    };
    CvScore { bandwidths: bw, mae_spo2, n_fallback }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::standard_normal;
    use crate::schema::{StateFeature, PROPENSITY_INDEX, STATE_DIM, TARGET_STATE_INDICES};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn transition(
        id: &str,
        s_obs: [f64; N_OBSERVABLE],
        a: ActionTriple,
        z: f64,
        y: [f64; TARGET_DIM],
    ) -> Transition {
        let mut s = [0.0; STATE_DIM];
        s[..N_OBSERVABLE].copy_from_slice(&s_obs);
        s[PROPENSITY_INDEX] = z;
        let mut s_next = s;
        for (k, &i) in TARGET_STATE_INDICES.iter().enumerate() {
            s_next[i] = y[k];
        }
        // Keep the stored z consistent with the target's final component.
        s_next[PROPENSITY_INDEX] = z;
        Transition {
            episode_id: id.to_string(),
            t: 0,
            s: StateVector(s),
            a,
            r: 0.0,
            s_next: StateVector(s_next),
            terminal: false,
        }
    }

    fn random_transition(rng: &mut impl Rng, id: &str) -> Transition {
        let mut s_obs = [0.0; N_OBSERVABLE];
        for v in &mut s_obs {
            *v = 10.0 * standard_normal(rng);
        }
        let a = ActionTriple::from_index(rng.gen_range(0..crate::mdp::N_ACTIONS)).unwrap();
        let z = rng.gen_range(0.05..0.95);
        let mut y = [0.0; TARGET_DIM];
        for v in &mut y {
            *v = 5.0 * standard_normal(rng);
        }
        y[TARGET_DIM - 1] = z;
        transition(id, s_obs, a, z, y)
    }

    /// Independent brute-force evaluation of the estimator formula: full
    /// kernel product over every sample, no early exits or shortcuts.
    fn brute_force_predict(
        train: &[Transition],
        bw: &BandwidthSet,
        s: &StateVector,
        a: ActionTriple,
        z: f64,
    ) -> [f64; TARGET_DIM] {
        let n = train.len() as f64;
        let mut mean = vec![0.0; N_OBSERVABLE];
        let mut std = vec![0.0; N_OBSERVABLE];
        for j in 0..N_OBSERVABLE {
            mean[j] = train.iter().map(|t| t.s.0[j]).sum::<f64>() / n;
            let var = train.iter().map(|t| (t.s.0[j] - mean[j]).powi(2)).sum::<f64>() / n;
            std[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        let mut ty_mean = vec![0.0; TARGET_DIM];
        let mut ty_std = vec![0.0; TARGET_DIM];
        for j in 0..TARGET_DIM {
            ty_mean[j] = train.iter().map(|t| t.target()[j]).sum::<f64>() / n;
            let var =
                train.iter().map(|t| (t.target()[j] - ty_mean[j]).powi(2)).sum::<f64>() / n;
            ty_std[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        let std_state = |x: &[f64]| -> Vec<f64> {
            (0..N_OBSERVABLE).map(|j| (x[j] - mean[j]) / std[j]).collect()
        };
        let groups = FeatureGroups::default();
        let q = std_state(&s.0[..N_OBSERVABLE]);
        let qa = [a.vt_bin as f64, a.peep_bin as f64, a.fio2_bin as f64];

        let mut acc = vec![0.0; TARGET_DIM];
        let mut mass = 0.0;
        for t in train {
            let ts = std_state(&t.s.0[..N_OBSERVABLE]);
            let ta = [t.a.vt_bin as f64, t.a.peep_bin as f64, t.a.fio2_bin as f64];
            let d = |idx: &[usize]| -> f64 {
                idx.iter().map(|&i| (ts[i] - q[i]).powi(2)).sum::<f64>().sqrt()
            };
            let w = epanechnikov(d(&groups.hemodynamic) / bw.h_s_hemo)
                * epanechnikov(d(&groups.respiratory) / bw.h_s_resp)
                * epanechnikov(d(&groups.blood_gas) / bw.h_s_blood)
                * epanechnikov(d(&groups.miscellaneous) / bw.h_s_misc)
                * epanechnikov(
                    (0..3).map(|i| (ta[i] - qa[i]).powi(2)).sum::<f64>().sqrt() / bw.h_a,
                )
                * epanechnikov((t.z() - z).abs() / bw.h_z);
            mass += w;
            for j in 0..TARGET_DIM {
                acc[j] += w * (t.target()[j] - ty_mean[j]) / ty_std[j];
            }
        }
        let mut out = [0.0; TARGET_DIM];
        for j in 0..TARGET_DIM {
            out[j] = acc[j] / (mass + bw.lambda) * ty_std[j] + ty_mean[j];
        }
        out[TARGET_SPO2] = out[TARGET_SPO2].clamp(0.0, 100.0);
        out
    }

    #[test]
    fn fit_stores_and_standardizes() {
        let mut rng = rng_from(5);
        let train: Vec<Transition> =
            (0..40).map(|i| random_transition(&mut rng, &format!("e{i}"))).collect();
        let model = fit_nwe(&train, BandwidthSet::reference(), FeatureGroups::default()).unwrap();
        assert_eq!(model.n_samples(), 40);
        for j in 0..N_OBSERVABLE {
            let vals: Vec<f64> = model.samples.iter().map(|s| s.s_std[j]).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert_relative_eq!(m, 0.0, epsilon = 1e-12);
            assert_relative_eq!(v.sqrt(), 1.0, epsilon = 1e-9);
        }
        assert!(fit_nwe(&[], BandwidthSet::reference(), FeatureGroups::default()).is_err());
    }

    #[test]
    fn single_neighbor_returns_its_target() {
        let s_obs = [1.0; N_OBSERVABLE];
        let a = ActionTriple::new(2, 2, 2).unwrap();
        let mut y = [0.0; TARGET_DIM];
        for (j, v) in y.iter_mut().enumerate() {
            *v = j as f64 + 40.0;
        }
        // The helper pins the final target component to z.
        y[TARGET_DIM - 1] = 0.5;
        let train = vec![transition("e0", s_obs, a, 0.5, y)];
        let mut bw = BandwidthSet::reference();
        bw.lambda = 0.0;
        let model = fit_nwe(&train, bw, FeatureGroups::default()).unwrap();
        let mut s = [0.0; STATE_DIM];
        s[..N_OBSERVABLE].copy_from_slice(&s_obs);
        let (pred, diag) = model.predict_next_state(&StateVector(s), a, 0.5).unwrap();
        assert!(!diag.fallback);
        assert_eq!(diag.n_effective, 1);
        for j in 0..TARGET_DIM {
            assert_relative_eq!(pred[j], y[j], epsilon = 1e-12);
        }
    }

    #[test]
    fn equidistant_pair_averages() {
        // Symmetric about the query in heart rate only.
        let mut lo = [1.0; N_OBSERVABLE];
        let mut hi = [1.0; N_OBSERVABLE];
        lo[StateFeature::HeartRate.index()] = -1.0;
        hi[StateFeature::HeartRate.index()] = 3.0;
        let a = ActionTriple::new(1, 1, 1).unwrap();
        let mut y_lo = [10.0; TARGET_DIM];
        let mut y_hi = [30.0; TARGET_DIM];
        y_lo[TARGET_DIM - 1] = 0.5;
        y_hi[TARGET_DIM - 1] = 0.5;
        let train = vec![
            transition("e0", lo, a, 0.5, y_lo),
            transition("e1", hi, a, 0.5, y_hi),
        ];
        let mut bw = BandwidthSet::reference();
        bw.lambda = 0.0;
        let model = fit_nwe(&train, bw, FeatureGroups::default()).unwrap();
        let mut s = [1.0; STATE_DIM];
        s[PROPENSITY_INDEX] = 0.5;
        let (pred, diag) = model.predict_next_state(&StateVector(s), a, 0.5).unwrap();
        assert_eq!(diag.n_effective, 2);
        for j in 0..TARGET_DIM - 1 {
            assert_relative_eq!(pred[j], 20.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn matches_brute_force_formula() {
        let mut rng = rng_from(99);
        for case in 0..30 {
            let n = rng.gen_range(5..=50);
            let train: Vec<Transition> = (0..n)
                .map(|i| random_transition(&mut rng, &format!("c{case}e{i}")))
                .collect();
            let bw = BandwidthSet {
                h_s_hemo: rng.gen_range(0.5..4.0),
                h_s_resp: rng.gen_range(0.5..4.0),
                h_s_blood: rng.gen_range(0.5..4.0),
                h_s_misc: rng.gen_range(0.5..4.0),
                h_a: rng.gen_range(0.5..4.0),
                h_z: rng.gen_range(0.5..4.0),
                lambda: *[0.0, 1e-3, 1e-2].get(case % 3).unwrap(),
            };
            let model = fit_nwe(&train, bw, FeatureGroups::default()).unwrap();
            for _ in 0..5 {
                let probe = random_transition(&mut rng, "q");
                let (pred, diag) =
                    model.predict_next_state(&probe.s, probe.a, probe.z()).unwrap();
                if diag.fallback {
                    continue;
                }
                let oracle = brute_force_predict(&train, &bw, &probe.s, probe.a, probe.z());
                for j in 0..TARGET_DIM {
                    assert_relative_eq!(pred[j], oracle[j], max_relative = 1e-12, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn convex_combination_bound_when_unregularized() {
        let mut rng = rng_from(123);
        let train: Vec<Transition> = (0..60)
            .map(|i| random_transition(&mut rng, &format!("e{i}")))
            .collect();
        let mut bw = BandwidthSet::reference();
        bw.lambda = 0.0;
        // Wide bandwidths so queries have support.
        bw.h_s_hemo = 20.0;
        bw.h_s_resp = 20.0;
        bw.h_s_blood = 20.0;
        bw.h_s_misc = 20.0;
        bw.h_a = 20.0;
        bw.h_z = 20.0;
        let model = fit_nwe(&train, bw, FeatureGroups::default()).unwrap();
        for _ in 0..10 {
            let probe = random_transition(&mut rng, "q");
            let (pred, diag) = model.predict_next_state(&probe.s, probe.a, probe.z()).unwrap();
            assert!(diag.mass > 0.0);
            for j in 0..TARGET_DIM {
                // SpO2 is clamped afterwards, so skip its bound check when
                // clamping could bite.
                if j == TARGET_SPO2 {
                    continue;
                }
                let lo = train.iter().map(|t| t.target()[j]).fold(f64::INFINITY, f64::min);
                let hi = train.iter().map(|t| t.target()[j]).fold(f64::NEG_INFINITY, f64::max);
                assert!(pred[j] >= lo - 1e-9 && pred[j] <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn fallback_returns_nearest_neighbor() {
        let mut near = [0.0; N_OBSERVABLE];
        near[0] = 100.0;
        let mut far = [0.0; N_OBSERVABLE];
        far[0] = 200.0;
        let a = ActionTriple::new(1, 1, 1).unwrap();
        let mut y_near = [1.0; TARGET_DIM];
        let mut y_far = [2.0; TARGET_DIM];
        y_near[TARGET_DIM - 1] = 0.5;
        y_far[TARGET_DIM - 1] = 0.5;
        let train = vec![
            transition("e0", near, a, 0.5, y_near),
            transition("e1", far, a, 0.5, y_far),
        ];
        let mut bw = BandwidthSet::reference();
        // Tiny state bandwidth: the query at feature 0 = 120 has no support.
        bw.h_s_misc = 1e-3;
        let model = fit_nwe(&train, bw, FeatureGroups::default()).unwrap();
        let mut s = [0.0; STATE_DIM];
        s[0] = 120.0;
        s[PROPENSITY_INDEX] = 0.5;
        let (pred, diag) = model.predict_next_state(&StateVector(s), a, 0.5).unwrap();
        assert!(diag.fallback);
        assert_eq!(diag.n_effective, 0);
        // 120 is closer to 100 than to 200.
        assert_relative_eq!(pred[0], 1.0);
        assert!(model
            .predict_next_state(&StateVector([f64::NAN; STATE_DIM]), a, 0.5)
            .is_err());
    }

    #[test]
    fn permutation_invariance() {
        let mut rng = rng_from(17);
        let train: Vec<Transition> =
            (0..30).map(|i| random_transition(&mut rng, &format!("e{i}"))).collect();
        let mut reversed = train.clone();
        reversed.reverse();
        let bw = BandwidthSet::reference();
        let m1 = fit_nwe(&train, bw, FeatureGroups::default()).unwrap();
        let m2 = fit_nwe(&reversed, bw, FeatureGroups::default()).unwrap();
        let probe = random_transition(&mut rng, "q");
        let (p1, _) = m1.predict_next_state(&probe.s, probe.a, probe.z()).unwrap();
        let (p2, _) = m2.predict_next_state(&probe.s, probe.a, probe.z()).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn default_grid_enumerates_full_size() {
        let grid = BandwidthGrid::default();
        let points = grid.points();
        assert_eq!(points.len(), 3 * 3 * 3 * 3 * 3 * 4 * 3);
        assert_eq!(points[0].h_s_hemo, 2.036);
        assert_eq!(points.last().unwrap().lambda, 1e-4);
        // The reference selection is on the grid.
        assert!(points.iter().any(|p| *p == BandwidthSet::reference()));
    }

    #[test]
    fn singleton_grid_is_returned() {
        let mut rng = rng_from(31);
        let train: Vec<Transition> =
            (0..40).map(|i| random_transition(&mut rng, &format!("e{}", i % 8))).collect();
        let one = BandwidthSet::reference();
        let grid = BandwidthGrid {
            h_s_hemo: vec![one.h_s_hemo],
            h_s_resp: vec![one.h_s_resp],
            h_s_blood: vec![one.h_s_blood],
            h_s_misc: vec![one.h_s_misc],
            h_a: vec![one.h_a],
            h_z: vec![one.h_z],
            lambda: vec![one.lambda],
        };
        let report = select_bandwidths(&train, &grid, 4, 9).unwrap();
        assert_eq!(report.selected, one);
        assert_eq!(report.scores.len(), 1);
    }

    /// Smooth 1-dimensional dynamics: a mid-sized bandwidth should beat
    /// both a tiny (variance-dominated) and a huge (bias-dominated) one.
    #[test]
    fn cv_picks_interior_bandwidth_on_smooth_dynamics() {
        let mut rng = rng_from(2024);
        let a = ActionTriple::new(1, 1, 1).unwrap();
        let train: Vec<Transition> = (0..240)
            .map(|i| {
                let x: f64 = rng.gen_range(-3.0..3.0);
                let mut s_obs = [0.0; N_OBSERVABLE];
                s_obs[StateFeature::HeartRate.index()] = x;
                let mut y = [0.0; TARGET_DIM];
                // SpO2 responds smoothly to heart rate; the noise level is
                // high enough that single-neighbor prediction is poor.
                y[TARGET_SPO2] = 90.0 + 5.0 * (x * 1.2).sin() + 2.0 * standard_normal(&mut rng);
                y[TARGET_DIM - 1] = 0.5;
                transition(&format!("e{}", i % 40), s_obs, a, 0.5, y)
            })
            .collect();
        let grid = BandwidthGrid {
            h_s_hemo: vec![0.02, 0.5, 50.0],
            h_s_resp: vec![2.0],
            h_s_blood: vec![2.0],
            h_s_misc: vec![2.0],
            h_a: vec![1.5],
            h_z: vec![1.5],
            lambda: vec![1e-3],
        };
        let report = select_bandwidths(&train, &grid, 5, 7).unwrap();
        assert_eq!(report.selected.h_s_hemo, 0.5, "scores: {:?}", report.scores);
    }

    #[test]
    fn cv_rejects_bad_configs() {
        let mut rng = rng_from(1);
        let train: Vec<Transition> =
            (0..10).map(|i| random_transition(&mut rng, &format!("e{i}"))).collect();
        let grid = BandwidthGrid::default();
        assert!(select_bandwidths(&train, &grid, 1, 0).is_err());
        let empty = BandwidthGrid { h_s_hemo: vec![], ..grid.clone() };
        assert!(select_bandwidths(&train, &empty, 2, 0).is_err());
        assert!(select_bandwidths(&train, &grid, 11, 0).is_err());
    }
}
