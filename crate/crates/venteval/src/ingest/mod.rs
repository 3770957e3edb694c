//! Cohort ingestion: raw episode parsing, winsorization, gap filling, KNN
//! imputation, exclusion rules, sepsis flagging, and transition building.

pub mod csvio;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VentError};
use crate::mdp::{self, ActionTriple, RewardParams, StateVector};
use crate::propensity::LogisticModel;
use crate::schema::{
    StepVar, TypeFeature, DYNAMIC_STATE_VARS, MAX_STEPS, N_STEP_VARS, N_TYPE_FEATURES,
    PROPENSITY_INDEX, SETTING_VARS, STATE_DIM, TARGET_DIM, TARGET_STATE_INDICES,
};

/// ICD-9 codes treated as sepsis-associated (dotted form).
pub const SEPSIS_ICD9_CODES: [&str; 47] = [
    "024", "036.3", "038.0", "038.2", "038.3", "038.40", "038.41", "038.42", "038.43", "038.44",
    "038.49", "038.8", "038.9", "098.89", "360.00", "519.01", "522.4", "528.3", "567.22", "599.0",
    "614.9", "630", "632", "634", "635", "636", "637", "638", "639", "659.3", "670.2", "670.3",
    "672.00", "682.9", "771.3", "771.81", "771.89", "785.52", "791", "995.91", "995.92", "995.94",
    "996.64", "998.02", "998.59", "999.31", "999.39",
];

/// Longest run of consecutive missing steps that forward/backward filling
/// is allowed to bridge.
pub const MAX_FILL_GAP: usize = 5;
/// An episode is excluded when any ventilator setting needs more than this
/// fraction of its steps imputed.
pub const MAX_IMPUTED_FRACTION: f64 = 0.5;
/// Winsorization percentile (low side; high side is the complement).
pub const WINSOR_PCT: f64 = 0.003;
/// Default neighbor count for KNN imputation.
pub const DEFAULT_KNN_K: usize = 5;

/// Time-invariant episode fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticFields {
    /// 1 = male, 0 = female (coding follows the source extract).
    pub sex: f64,
    pub sepsis: bool,
    pub weight_kg: f64,
    pub age_years: f64,
    pub mortality_90d: bool,
    pub icu_readmission: bool,
}

/// One per-step row; `None` marks a missing measurement.
pub type StepRow = [Option<f64>; N_STEP_VARS];

/// An episode as parsed from disk, before any cleaning.
#[derive(Debug, Clone, PartialEq)]
pub struct RawEpisode {
    pub episode_id: String,
    pub statics: StaticFields,
    pub steps: Vec<StepRow>,
}

/// A fully-cleaned episode: no missing values, at most 18 steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode_id: String,
    pub statics: StaticFields,
    pub steps: Vec<Vec<f64>>,
    /// Fraction of steps imputed (fill or KNN) per ventilator setting.
    pub imputed_fraction: BTreeMap<String, f64>,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn value(&self, t: usize, var: StepVar) -> f64 {
        self.steps[t][var.index()]
    }

    /// The propensity-model inputs, taken from the first step and statics.
    pub fn type_features(&self) -> [f64; N_TYPE_FEATURES] {
        let mut x = [0.0; N_TYPE_FEATURES];
        for (i, f) in TypeFeature::ALL.iter().enumerate() {
            x[i] = match f.step_var() {
                Some(v) => self.value(0, v),
                None => match f {
                    TypeFeature::Sex => self.statics.sex,
                    TypeFeature::IcuReadmission => {
                        if self.statics.icu_readmission {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    _ => unreachable!("non-static type feature without step var"),
                },
            };
        }
        x
    }

    /// Assemble the 16-dim state at step `t` with propensity score `z`.
    pub fn state_at(&self, t: usize, z: f64) -> StateVector {
        let mut s = [0.0; STATE_DIM];
        s[0] = if self.statics.sepsis { 1.0 } else { 0.0 };
        s[1] = self.statics.weight_kg;
        s[2] = self.statics.age_years;
        for (k, var) in DYNAMIC_STATE_VARS.iter().enumerate() {
            s[3 + k] = self.value(t, *var);
        }
        s[PROPENSITY_INDEX] = z;
        StateVector(s)
    }

    /// Raw ventilator settings at step `t`.
    pub fn settings_at(&self, t: usize) -> (f64, f64, f64) {
        (
            self.value(t, StepVar::VtSet),
            self.value(t, StepVar::Peep),
            self.value(t, StepVar::FiO2),
        )
    }
}

/// Per-feature winsorization clip bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinsorLimits {
    pub bounds: BTreeMap<String, (f64, f64)>,
}

impl WinsorLimits {
    pub fn clip(&self, var: StepVar, value: f64) -> f64 {
        match self.bounds.get(var.name()) {
            Some(&(lo, hi)) => value.clamp(lo, hi),
            None => value,
        }
    }
}

/// One MDP training tuple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub episode_id: String,
    /// 0-based step index of `s` within its episode.
    pub t: usize,
    pub s: StateVector,
    pub a: ActionTriple,
    pub r: f64,
    pub s_next: StateVector,
    /// True when `s_next` is the episode's final state.
    pub terminal: bool,
}

impl Transition {
    pub fn z(&self) -> f64 {
        self.s.propensity()
    }

    /// Regression target: next state with the three static features removed
    /// (12 dynamic observables + propensity score).
    pub fn target(&self) -> [f64; TARGET_DIM] {
        let mut y = [0.0; TARGET_DIM];
        for (k, &i) in TARGET_STATE_INDICES.iter().enumerate() {
            y[k] = self.s_next.0[i];
        }
        y
    }
}

/// Bring an ICD-9 code to canonical dotted form: trim, uppercase, and
/// insert the dot after the third character when absent.
pub fn normalize_icd9(code: &str) -> String {
    let c = code.trim().to_ascii_uppercase();
    if c.contains('.') || c.len() <= 3 {
        c
    } else {
        format!("{}.{}", &c[..3], &c[3..])
    }
}

/// True when any code in the list is sepsis-associated.
pub fn flag_sepsis(codes: &[String]) -> bool {
    codes
        .iter()
        .any(|c| SEPSIS_ICD9_CODES.contains(&normalize_icd9(c).as_str()))
}

/// Linear-interpolation empirical quantile of `sorted` at probability `p`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    if sorted.len() == 1 {
        return sorted[0];
    }
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= sorted.len() {
        sorted[sorted.len() - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

/// Fit per-feature clip bounds at the 0.3 / 99.7 percentiles of the
/// observed values in `train`.
pub fn fit_winsor(train: &[RawEpisode]) -> Result<WinsorLimits> {
    let mut bounds = BTreeMap::new();
    for var in StepVar::ALL {
        let mut values: Vec<f64> = train
            .iter()
            .flat_map(|ep| ep.steps.iter().filter_map(|row| row[var.index()]))
            .collect();
        if values.is_empty() {
            return Err(VentError::FeatureAllMissing { feature: var.name().to_string() });
        }
        values.sort_by(|a, b| a.total_cmp(b));
        let lo = quantile_sorted(&values, WINSOR_PCT);
        let hi = quantile_sorted(&values, 1.0 - WINSOR_PCT);
        bounds.insert(var.name().to_string(), (lo, hi));
    }
    Ok(WinsorLimits { bounds })
}

/// Clip every observed value into the fitted bounds; missing cells are
/// left untouched.
pub fn apply_winsor(ep: &RawEpisode, limits: &WinsorLimits) -> RawEpisode {
    let mut out = ep.clone();
    for row in &mut out.steps {
        for var in StepVar::ALL {
            if let Some(v) = row[var.index()] {
                row[var.index()] = Some(limits.clip(var, v));
            }
        }
    }
    out
}

/// Forward-then-backward fill of missing runs no longer than `max_gap`
/// steps. Gap length is measured on the original missingness pattern;
/// longer runs are left for KNN imputation.
pub fn fill_series(values: &[Option<f64>], max_gap: usize) -> Vec<Option<f64>> {
    let mut out = values.to_vec();
    let n = values.len();
    let mut i = 0;
    while i < n {
        if values[i].is_some() {
            i += 1;
            continue;
        }
        let start = i;
        while i < n && values[i].is_none() {
            i += 1;
        }
        let gap = i - start;
        if gap > max_gap {
            continue;
        }
        // Forward fill from the left neighbor, else backward fill from the
        // right neighbor (covers leading gaps).
        let fill = if start > 0 { values[start - 1] } else { values.get(i).copied().flatten() };
        if let Some(v) = fill {
            for cell in &mut out[start..start + gap] {
                *cell = Some(v);
            }
        }
    }
    out
}

/// A donor row for KNN imputation.
#[derive(Debug, Clone)]
struct RefRow {
    episode_id: String,
    step: usize,
    values: StepRow,
}

/// Reference set for KNN imputation: post-winsor, post-fill rows from the
/// cohort, plus z-scoring statistics per feature.
#[derive(Debug, Clone)]
pub struct ImputationRef {
    rows: Vec<RefRow>,
    // Distances use differences of z-scores, so the centering constant
    // cancels and only the scale is kept.
    std: [f64; N_STEP_VARS],
}

impl ImputationRef {
    /// Build from winsorized episodes; each episode's series are gap-filled
    /// before its rows are added.
    pub fn build(episodes: &[RawEpisode]) -> ImputationRef {
        let mut rows = Vec::new();
        for ep in episodes {
            let filled = fill_episode(ep);
            for (t, row) in filled.into_iter().enumerate() {
                rows.push(RefRow { episode_id: ep.episode_id.clone(), step: t, values: row });
            }
        }
        let mut std = [0.0; N_STEP_VARS];
        for j in 0..N_STEP_VARS {
            let obs: Vec<f64> = rows.iter().filter_map(|r| r.values[j]).collect();
            if obs.is_empty() {
                continue;
            }
            let m = obs.iter().sum::<f64>() / obs.len() as f64;
            let var = obs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / obs.len() as f64;
            std[j] = var.sqrt();
        }
        ImputationRef { rows, std }
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    /// Euclidean distance over z-scored features observed in both rows.
    /// Returns `None` when the rows share no observed feature.
    fn distance(&self, a: &StepRow, b: &StepRow) -> Option<f64> {
        let mut sum = 0.0;
        let mut any = false;
        for j in 0..N_STEP_VARS {
            if let (Some(x), Some(y)) = (a[j], b[j]) {
                any = true;
                if self.std[j] > 0.0 {
                    let d = (x - y) / self.std[j];
                    sum += d * d;
                }
            }
        }
        any.then(|| sum.sqrt())
    }

    /// Mean of the target feature over the k nearest donors that observe it.
    fn impute(
        &self,
        recipient: &StepRow,
        var: StepVar,
        episode_id: &str,
        step: usize,
        k: usize,
    ) -> Result<f64> {
        let j = var.index();
        let mut candidates: Vec<(f64, f64)> = Vec::new();
        for row in &self.rows {
            if row.episode_id == episode_id && row.step == step {
                continue;
            }
            let Some(value) = row.values[j] else { continue };
            if let Some(d) = self.distance(recipient, &row.values) {
                candidates.push((d, value));
            }
        }
        if candidates.is_empty() {
            return Err(VentError::data(format!(
                "no imputation donors observe {} (episode {episode_id}, step {step})",
                var.name()
            )));
        }
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0));
        let take = k.min(candidates.len());
        Ok(candidates[..take].iter().map(|(_, v)| v).sum::<f64>() / take as f64)
    }
}

fn fill_episode(ep: &RawEpisode) -> Vec<StepRow> {
    let t_len = ep.steps.len();
    let mut filled = ep.steps.clone();
    for var in StepVar::ALL {
        let series: Vec<Option<f64>> = ep.steps.iter().map(|r| r[var.index()]).collect();
        let out = fill_series(&series, MAX_FILL_GAP);
        for t in 0..t_len {
            filled[t][var.index()] = out[t];
        }
    }
    filled
}

/// Result of cleaning one episode.
#[derive(Debug, Clone, PartialEq)]
pub enum ImputeOutcome {
    Kept(EpisodeRecord),
    Excluded { episode_id: String, reason: String },
}

/// Check the exclusion rules on raw missingness alone: too-short episodes
/// and ventilator settings needing more than 50% imputation. Returns the
/// reason to exclude, if any. Assumes the episode is already truncated.
pub fn exclusion_reason(ep: &RawEpisode) -> Option<String> {
    let t_len = ep.steps.len();
    if t_len < 2 {
        return Some(format!("{} steps; transitions need at least 2", t_len));
    }
    for var in SETTING_VARS {
        let missing = ep.steps.iter().filter(|r| r[var.index()].is_none()).count();
        let frac = missing as f64 / t_len as f64;
        if frac > MAX_IMPUTED_FRACTION {
            return Some(format!(
                "{} requires {:.0}% imputed steps (limit 50%)",
                var.name(),
                frac * 100.0
            ));
        }
    }
    None
}

/// Clean one winsorized episode: gap-fill, KNN-impute the remainder, and
/// apply the exclusion rules. The episode is truncated to 18 steps first.
pub fn impute_episode(
    ep: &RawEpisode,
    neighbors: &ImputationRef,
    k: usize,
) -> Result<ImputeOutcome> {
    if k == 0 {
        return Err(VentError::invalid("knn imputation needs k >= 1"));
    }
    let mut ep = ep.clone();
    ep.steps.truncate(MAX_STEPS);
    if let Some(reason) = exclusion_reason(&ep) {
        return Ok(ImputeOutcome::Excluded { episode_id: ep.episode_id, reason });
    }
    let t_len = ep.steps.len();

    // Every missing cell ends up imputed one way or the other, so the
    // imputed fraction per setting is just its raw missingness.
    let mut imputed_fraction = BTreeMap::new();
    for var in SETTING_VARS {
        let missing = ep.steps.iter().filter(|r| r[var.index()].is_none()).count();
        imputed_fraction.insert(var.name().to_string(), missing as f64 / t_len as f64);
    }

    let filled = fill_episode(&ep);
    let mut steps: Vec<Vec<f64>> = Vec::with_capacity(t_len);
    for (t, row) in filled.iter().enumerate() {
        let mut out = vec![0.0; N_STEP_VARS];
        for var in StepVar::ALL {
            let j = var.index();
            out[j] = match row[j] {
                Some(v) => v,
                None => {
                    if neighbors.n_rows() == 0 {
                        return Err(VentError::data(format!(
                            "episode {} step {t} var {} missing with empty reference set",
                            ep.episode_id,
                            var.name()
                        )));
                    }
                    neighbors.impute(row, var, &ep.episode_id, t, k)?
                }
            };
        }
        steps.push(out);
    }

    Ok(ImputeOutcome::Kept(EpisodeRecord {
        episode_id: ep.episode_id,
        statics: ep.statics,
        steps,
        imputed_fraction,
    }))
}

/// Summary of a cohort-cleaning run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CohortReport {
    pub n_input: usize,
    pub n_kept: usize,
    pub excluded: Vec<(String, String)>,
}

/// Run the full preprocessing pipeline over a cohort: truncate, exclude,
/// fit winsor limits on the survivors, clip, fill, and KNN-impute.
pub fn preprocess_cohort(
    raw: &[RawEpisode],
    k: usize,
) -> Result<(Vec<EpisodeRecord>, WinsorLimits, CohortReport)> {
    let mut report = CohortReport { n_input: raw.len(), ..Default::default() };

    // Exclusions depend only on the missingness pattern, so they are
    // decided before winsor limits are fitted on the surviving episodes.
    let mut survivors: Vec<RawEpisode> = Vec::new();
    for ep in raw {
        let mut ep = ep.clone();
        ep.steps.truncate(MAX_STEPS);
        match exclusion_reason(&ep) {
            Some(reason) => {
                log::warn!("excluding episode {}: {}", ep.episode_id, reason);
                report.excluded.push((ep.episode_id.clone(), reason));
            }
            None => survivors.push(ep),
        }
    }
    if survivors.is_empty() {
        return Err(VentError::data("no episodes survive exclusion"));
    }

    let limits = fit_winsor(&survivors)?;
    let winsorized: Vec<RawEpisode> =
        survivors.iter().map(|ep| apply_winsor(ep, &limits)).collect();
    let neighbors = ImputationRef::build(&winsorized);

    let mut kept = Vec::with_capacity(winsorized.len());
    for ep in &winsorized {
        match impute_episode(ep, &neighbors, k)? {
            ImputeOutcome::Kept(rec) => kept.push(rec),
            ImputeOutcome::Excluded { episode_id, reason } => {
                // Unreachable in practice: exclusion was already decided on
                // the same missingness pattern.
                report.excluded.push((episode_id, reason));
            }
        }
    }
    report.n_kept = kept.len();
    Ok((kept, limits, report))
}

/// Build MDP transitions from cleaned episodes. Each episode contributes
/// T-1 transitions sharing a single propensity score computed from its
/// first step.
pub fn build_transitions(
    episodes: &[EpisodeRecord],
    params: &RewardParams,
    propensity: &LogisticModel,
) -> Result<Vec<Transition>> {
    let mut out = Vec::new();
    for ep in episodes {
        if ep.len() < 2 {
            log::warn!("skipping episode {}: fewer than 2 steps", ep.episode_id);
            continue;
        }
        let z = propensity.predict(&ep.type_features())?;
        let t_len = ep.len();
        for t in 0..t_len - 1 {
            let s = ep.state_at(t, z);
            let s_next = ep.state_at(t + 1, z);
            let (vt, peep, fio2) = ep.settings_at(t);
            let a = mdp::discretize_action(vt, peep, fio2)?;
            let r = mdp::reward(&s, &s_next, a, params);
            out.push(Transition {
                episode_id: ep.episode_id.clone(),
                t,
                s,
                a,
                r,
                s_next,
                terminal: t + 2 == t_len,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn blank_statics() -> StaticFields {
        StaticFields {
            sex: 1.0,
            sepsis: false,
            weight_kg: 70.0,
            age_years: 60.0,
            mortality_90d: false,
            icu_readmission: false,
        }
    }

    fn episode_with_series(id: &str, var: StepVar, series: &[Option<f64>]) -> RawEpisode {
        let steps = series
            .iter()
            .map(|v| {
                let mut row: StepRow = [Some(1.0); N_STEP_VARS];
                row[var.index()] = *v;
                row
            })
            .collect();
        RawEpisode { episode_id: id.to_string(), statics: blank_statics(), steps }
    }

    #[test]
    fn sepsis_flagging_matches_code_list() {
        assert!(flag_sepsis(&["038.9".to_string()]));
        assert!(!flag_sepsis(&[]));
        assert!(!flag_sepsis(&["410.1".to_string()]));
        // Normalization: undotted and whitespace-padded codes still match.
        assert!(flag_sepsis(&["0389".to_string()]));
        assert!(flag_sepsis(&[" 995.92 ".to_string()]));
        assert!(flag_sepsis(&["99592".to_string()]));
        assert!(flag_sepsis(&["791".to_string()]));
        assert_eq!(SEPSIS_ICD9_CODES.len(), 47);
    }

    #[test]
    fn quantile_linear_interpolation() {
        let values: Vec<f64> = (1..=1000).map(|v| v as f64).collect();
        // h = 999 * 0.997 = 996.003 between the order statistics 997 and 998.
        assert_relative_eq!(quantile_sorted(&values, 0.997), 997.003, max_relative = 1e-12);
        assert_relative_eq!(quantile_sorted(&values, 0.003), 3.997, max_relative = 1e-12);
        assert_relative_eq!(quantile_sorted(&[5.0], 0.9), 5.0);
    }

    #[test]
    fn winsor_clips_to_percentiles() {
        let series: Vec<Option<f64>> = (1..=1000).map(|v| Some(v as f64)).collect();
        let ep = episode_with_series("e1", StepVar::HeartRate, &series);
        let limits = fit_winsor(std::slice::from_ref(&ep)).unwrap();
        let &(lo, hi) = limits.bounds.get("heart_rate").unwrap();
        assert_relative_eq!(lo, 3.997, max_relative = 1e-12);
        assert_relative_eq!(hi, 997.003, max_relative = 1e-12);
        let clipped = apply_winsor(&ep, &limits);
        assert_relative_eq!(clipped.steps[999][StepVar::HeartRate.index()].unwrap(), 997.003);
        // Idempotent and identity inside the bounds.
        let twice = apply_winsor(&clipped, &limits);
        assert_eq!(twice, clipped);
        assert_relative_eq!(clipped.steps[499][StepVar::HeartRate.index()].unwrap(), 500.0);
        // Constant columns collapse to a degenerate interval.
        let &(clo, chi) = limits.bounds.get("spo2").unwrap();
        assert_eq!((clo, chi), (1.0, 1.0));
    }

    #[test]
    fn winsor_errors_on_all_missing_feature() {
        let ep = episode_with_series("e1", StepVar::Gcs, &[None, None, None]);
        let mut ep = ep;
        for row in &mut ep.steps {
            row[StepVar::Gcs.index()] = None;
        }
        let err = fit_winsor(std::slice::from_ref(&ep)).unwrap_err();
        assert!(err.to_string().contains("gcs"), "{err}");
    }

    #[test]
    fn fill_bridges_short_gaps_only() {
        // Observed at steps 1 and 7 (1-based): the 5-step interior gap fills
        // forward from the left neighbor.
        let series =
            vec![Some(10.0), None, None, None, None, None, Some(20.0)];
        let filled = fill_series(&series, MAX_FILL_GAP);
        assert_eq!(
            filled,
            vec![Some(10.0); 6]
                .into_iter()
                .chain([Some(20.0)])
                .collect::<Vec<_>>()
        );
        // A 6-step gap stays missing.
        let series =
            vec![Some(10.0), None, None, None, None, None, None, Some(20.0)];
        let filled = fill_series(&series, MAX_FILL_GAP);
        assert_eq!(filled[1..7], vec![None; 6]);
        // Leading gaps fill backward.
        let series = vec![None, None, Some(4.0)];
        assert_eq!(fill_series(&series, MAX_FILL_GAP), vec![Some(4.0); 3]);
        // All-missing series stays missing.
        let series = vec![None, None];
        assert_eq!(fill_series(&series, MAX_FILL_GAP), vec![None, None]);
    }

    #[test]
    fn exclusion_on_setting_imputation_over_half() {
        // 6 of 10 Vt_set steps missing -> excluded.
        let mut series = vec![Some(6.0); 10];
        for cell in series.iter_mut().take(6) {
            *cell = None;
        }
        let ep = episode_with_series("e1", StepVar::VtSet, &series);
        let neighbors = ImputationRef::build(std::slice::from_ref(&ep));
        match impute_episode(&ep, &neighbors, DEFAULT_KNN_K).unwrap() {
            ImputeOutcome::Excluded { episode_id, reason } => {
                assert_eq!(episode_id, "e1");
                assert!(reason.contains("vt_set"), "{reason}");
            }
            other => panic!("expected exclusion, got {other:?}"),
        }
        // Exactly 50% is kept ("more than 50%" excludes).
        let mut series = vec![Some(6.0); 10];
        for cell in series.iter_mut().take(5) {
            *cell = None;
        }
        let ep = episode_with_series("e2", StepVar::VtSet, &series);
        let neighbors = ImputationRef::build(std::slice::from_ref(&ep));
        match impute_episode(&ep, &neighbors, DEFAULT_KNN_K).unwrap() {
            ImputeOutcome::Kept(rec) => {
                assert_relative_eq!(rec.imputed_fraction["vt_set"], 0.5);
            }
            other => panic!("expected kept, got {other:?}"),
        }
    }

    #[test]
    fn fully_observed_episode_passes_through() {
        let series = vec![Some(6.0), Some(6.5), Some(7.0)];
        let ep = episode_with_series("e1", StepVar::VtSet, &series);
        let neighbors = ImputationRef::build(std::slice::from_ref(&ep));
        match impute_episode(&ep, &neighbors, DEFAULT_KNN_K).unwrap() {
            ImputeOutcome::Kept(rec) => {
                assert_eq!(rec.len(), 3);
                assert!(rec.imputed_fraction.values().all(|&f| f == 0.0));
                assert_relative_eq!(rec.value(1, StepVar::VtSet), 6.5);
            }
            other => panic!("expected kept, got {other:?}"),
        }
    }

    #[test]
    fn knn_imputes_from_nearest_donor_rows() {
        // Recipient episode: heart_rate missing everywhere (gap of 7 > 5, so
        // fills cannot bridge it); all other features constant 1.0.
        let recipient =
            episode_with_series("r", StepVar::HeartRate, &[None; 7].to_vec());
        // Donor episode: rows identical to the recipient except heart_rate
        // observed at 80, plus one far-away row (spo2 shifted) at 200.
        let mut donor = episode_with_series("d", StepVar::HeartRate, &[
            Some(80.0),
            Some(80.0),
            Some(80.0),
            Some(80.0),
            Some(80.0),
            Some(200.0),
            Some(80.0),
        ]);
        donor.steps[5][StepVar::SpO2.index()] = Some(50.0);
        let neighbors = ImputationRef::build(&[recipient.clone(), donor]);
        match impute_episode(&recipient, &neighbors, 5).unwrap() {
            ImputeOutcome::Kept(rec) => {
                // The far row differs in spo2, so the 5 nearest donors are
                // all at 80.
                for t in 0..7 {
                    assert_relative_eq!(rec.value(t, StepVar::HeartRate), 80.0);
                }
            }
            other => panic!("expected kept, got {other:?}"),
        }
    }

    #[test]
    fn knn_rejects_degenerate_requests() {
        let series = vec![None, Some(5.0), None, None, None, None, None, None];
        let ep = episode_with_series("e1", StepVar::HeartRate, &series);
        let neighbors = ImputationRef::build(&[]);
        assert!(impute_episode(&ep, &neighbors, 0).is_err());
        assert!(impute_episode(&ep, &neighbors, 5).is_err());
    }

    #[test]
    fn truncation_to_eighteen_steps() {
        let series: Vec<Option<f64>> = (0..25).map(|v| Some(v as f64)).collect();
        let ep = episode_with_series("e1", StepVar::VtSet, &series);
        let neighbors = ImputationRef::build(std::slice::from_ref(&ep));
        match impute_episode(&ep, &neighbors, DEFAULT_KNN_K).unwrap() {
            ImputeOutcome::Kept(rec) => assert_eq!(rec.len(), MAX_STEPS),
            other => panic!("expected kept, got {other:?}"),
        }
    }
}
