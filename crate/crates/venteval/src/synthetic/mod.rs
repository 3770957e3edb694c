//! A small ventilation-flavored environment with known linear-Gaussian
//! dynamics, a stochastic behavior policy, and a latent severity type that
//! confounds treatment and outcome. Known ground truth makes it the oracle
//! for the quantitative tests; nothing here is calibrated to real data.

pub mod tabular;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VentError};
use crate::ingest::{RawEpisode, StaticFields};
use crate::mdp::{
    self, ActionTriple, RewardParams, StateVector, FIO2_EDGES, PEEP_EDGES, VT_EDGES,
};
use crate::policies::Policy;
use crate::propensity::LogisticModel;
use crate::rng::{derive_seed, rng_from, standard_normal};
use crate::schema::{
    StepVar, TypeFeature, MAX_STEPS, N_STEP_VARS, N_TYPE_FEATURES, PROPENSITY_INDEX, STATE_DIM,
};

/// The action subset the behavior policy mixes over: low/high tidal volume,
/// low/high PEEP, low/high FiO2. The high Vt and FiO2 bins fall in the
/// aggressive ranges, so penalty effects are observable.
pub const BEHAVIOR_SUPPORT: [ActionTriple; 8] = [
    ActionTriple { vt_bin: 3, peep_bin: 1, fio2_bin: 2 },
    ActionTriple { vt_bin: 3, peep_bin: 1, fio2_bin: 5 },
    ActionTriple { vt_bin: 3, peep_bin: 2, fio2_bin: 2 },
    ActionTriple { vt_bin: 3, peep_bin: 2, fio2_bin: 5 },
    ActionTriple { vt_bin: 6, peep_bin: 1, fio2_bin: 2 },
    ActionTriple { vt_bin: 6, peep_bin: 1, fio2_bin: 5 },
    ActionTriple { vt_bin: 6, peep_bin: 2, fio2_bin: 2 },
    ActionTriple { vt_bin: 6, peep_bin: 2, fio2_bin: 5 },
];

/// Uniform horizon distribution (number of recorded steps per episode),
/// inclusive on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HorizonDist {
    pub min: usize,
    pub max: usize,
}

impl Default for HorizonDist {
    fn default() -> Self {
        HorizonDist { min: 4, max: MAX_STEPS }
    }
}

impl HorizonDist {
    pub fn validate(&self) -> Result<()> {
        if self.min < 2 || self.min > self.max || self.max > MAX_STEPS {
            return Err(VentError::invalid(format!(
                "horizon distribution must satisfy 2 <= min <= max <= {MAX_STEPS}, got [{}, {}]",
                self.min, self.max
            )));
        }
        Ok(())
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        rng.gen_range(self.min..=self.max)
    }
}

/// One dynamic state variable's law: an AR(1) pulled toward a
/// severity-dependent mean, plus linear responses to the raw ventilator
/// settings. Written out, s' = ar * s + b . a + c(u) + noise, where c(u)
/// places the steady state under the average support action at the
/// severity mean.
#[derive(Debug, Clone, Copy)]
struct VarLaw {
    ar: f64,
    mean_mild: f64,
    mean_severe: f64,
    noise_sd: f64,
    b_vt: f64,
    b_peep: f64,
    /// FiO2 response per severity type; the severe response is blunted for
    /// SpO2, which is the outcome half of the confounding.
    b_fio2_mild: f64,
    b_fio2_severe: f64,
}

impl VarLaw {
    const fn plain(ar: f64, mean_mild: f64, mean_severe: f64, noise_sd: f64) -> VarLaw {
        VarLaw {
            ar,
            mean_mild,
            mean_severe,
            noise_sd,
            b_vt: 0.0,
            b_peep: 0.0,
            b_fio2_mild: 0.0,
            b_fio2_severe: 0.0,
        }
    }

    fn mean(&self, severe: bool) -> f64 {
        if severe {
            self.mean_severe
        } else {
            self.mean_mild
        }
    }

    fn b_fio2(&self, severe: bool) -> f64 {
        if severe {
            self.b_fio2_severe
        } else {
            self.b_fio2_mild
        }
    }

    /// Intercept making the steady state under the mean support action
    /// equal the severity mean.
    fn intercept(&self, severe: bool, mean_action: (f64, f64, f64)) -> f64 {
        (1.0 - self.ar) * self.mean(severe)
            - (self.b_vt * mean_action.0
                + self.b_peep * mean_action.1
                + self.b_fio2(severe) * mean_action.2)
    }
}

/// Laws for the 12 dynamic state variables, in `DYNAMIC_STATE_VARS` order.
/// SpO2 improves with FiO2 and (mildly) tidal volume; PaO2 follows FiO2;
/// MAP rises with PEEP. Severity enters the state only through SpO2 — a
/// modest drift and a blunted FiO2 response — with enough process noise
/// that the two types overlap in state space. A sharper in-state
/// separation would let the kernel infer the latent type directly and
/// leave the propensity score nothing to contribute.
const DYNAMIC_LAWS: [VarLaw; 12] = [
    VarLaw::plain(0.85, 84.0, 84.0, 2.5), // heart rate
    VarLaw::plain(0.85, 18.0, 18.0, 1.2), // respiratory rate
    VarLaw {
        ar: 0.85,
        mean_mild: 90.0,
        mean_severe: 87.0,
        noise_sd: 1.3,
        b_vt: 0.12,
        b_peep: 0.0,
        b_fio2_mild: 2.2,
        b_fio2_severe: 0.3,
    }, // SpO2
    VarLaw::plain(0.85, 200.0, 200.0, 8.0), // P/F ratio
    VarLaw {
        ar: 0.8,
        mean_mild: 6.3,
        mean_severe: 6.3,
        noise_sd: 0.4,
        b_vt: 0.25,
        b_peep: 0.0,
        b_fio2_mild: 0.0,
        b_fio2_severe: 0.0,
    }, // spontaneous Vt
    VarLaw {
        ar: 0.85,
        mean_mild: 72.0,
        mean_severe: 72.0,
        noise_sd: 2.5,
        b_vt: 0.0,
        b_peep: 0.3,
        b_fio2_mild: 0.0,
        b_fio2_severe: 0.0,
    }, // MAP
    VarLaw::plain(0.85, 42.0, 42.0, 1.5), // PaCO2
    VarLaw::plain(0.85, 108.0, 108.0, 3.5), // systolic BP
    VarLaw::plain(0.85, 62.0, 62.0, 2.5), // diastolic BP
    VarLaw::plain(0.95, 1800.0, 1800.0, 120.0), // cumulative fluid balance
    VarLaw {
        ar: 0.8,
        mean_mild: 88.0,
        mean_severe: 88.0,
        noise_sd: 4.0,
        b_vt: 0.0,
        b_peep: 0.0,
        b_fio2_mild: 40.0,
        b_fio2_severe: 40.0,
    }, // PaO2
    VarLaw::plain(0.85, 10.0, 10.0, 0.8), // GCS
];

const SPO2_POS: usize = 2;

/// Laws for the 8 time-dependent variables outside the state vector
/// (`StepVar` order 12..19). These are the severity proxies the propensity
/// model sees; their first-step values separate the two types sharply.
const TYPE_LAWS: [VarLaw; 8] = [
    VarLaw::plain(0.7, 85.0, 70.0, 3.5),  // mean BP
    VarLaw::plain(0.7, 37.0, 38.6, 0.25), // temperature
    VarLaw::plain(0.7, 0.7, 1.15, 0.05),  // shock index
    VarLaw::plain(0.7, 120.0, 55.0, 12.0), // urine output
    VarLaw::plain(0.7, 80.0, 170.0, 18.0), // total IV fluids
    VarLaw::plain(0.7, 1.4, 3.2, 0.3),    // SIRS
    VarLaw::plain(0.7, 4.0, 10.5, 0.8),   // SOFA
    VarLaw::plain(0.7, 5.0, 9.5, 0.7),    // oxygenation index
];

/// 90-day mortality rates by severity; the gap is what makes the fitted
/// propensity score an informative severity proxy.
const MORTALITY_MILD: f64 = 0.05;
const MORTALITY_SEVERE: f64 = 0.85;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticEnv {
    pub seed: u64,
    /// Probability an episode draws the severe latent type.
    pub p_severe: f64,
    /// Scales every Gaussian jitter (dynamics noise, initial spread,
    /// static covariates). Zero gives fully deterministic paths.
    pub noise_scale: f64,
    pub horizons: HorizonDist,
}

impl Default for SyntheticEnv {
    fn default() -> Self {
        SyntheticEnv { seed: 0, p_severe: 0.35, noise_scale: 1.0, horizons: HorizonDist::default() }
    }
}

impl SyntheticEnv {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_severe) {
            return Err(VentError::invalid("p_severe must lie in [0, 1]"));
        }
        if !self.noise_scale.is_finite() || self.noise_scale < 0.0 {
            return Err(VentError::invalid("noise_scale must be finite and non-negative"));
        }
        self.horizons.validate()?;
        for law in DYNAMIC_LAWS.iter().chain(TYPE_LAWS.iter()) {
            debug_assert!(law.ar.abs() < 1.0, "dynamics must be stable");
        }
        Ok(())
    }
}

/// Mean representative settings over the behavior support; the dynamics
/// intercepts are anchored here.
fn mean_support_action() -> (f64, f64, f64) {
    let mut sum = (0.0, 0.0, 0.0);
    for a in BEHAVIOR_SUPPORT {
        let (v, p, f) = mdp::representative_action(a);
        sum = (sum.0 + v, sum.1 + p, sum.2 + f);
    }
    let n = BEHAVIOR_SUPPORT.len() as f64;
    (sum.0 / n, sum.1 / n, sum.2 / n)
}

fn clamp_var(pos: usize, value: f64) -> f64 {
    match pos {
        SPO2_POS => value.clamp(0.0, 100.0),
        11 => value.clamp(3.0, 15.0), // GCS
        9 => value,                   // fluid balance may run negative
        _ => value.max(0.0),
    }
}

/// Behavior scoring: severity is the dominant driver toward the high-FiO2
/// half of the support, with a mild hypoxia response on top; the Vt and
/// PEEP choices are severity-neutral. Concentrating the assignment signal
/// in one coordinate is deliberate: the treatment must carry information
/// about the latent type that the state alone does not, and spreading it
/// over coordinates with opposite-leaning marginals would dilute it.
fn behavior_scores(spo2: f64, severe: bool) -> [f64; 8] {
    let need = ((95.0 - spo2) / 10.0).clamp(0.0, 2.0);
    let sev = if severe { 1.0 } else { 0.0 };
    let w_fio2 = 0.2 * need + 3.0 * sev - 1.2;
    let w_vt = 0.1 * need - 0.1;
    let w_peep = -0.1;
    let mut scores = [0.0; 8];
    for (i, a) in BEHAVIOR_SUPPORT.iter().enumerate() {
        let high_vt = if a.vt_bin == 6 { 1.0 } else { 0.0 };
        let high_peep = if a.peep_bin == 2 { 1.0 } else { 0.0 };
        let high_fio2 = if a.fio2_bin == 5 { 1.0 } else { 0.0 };
        scores[i] = w_vt * high_vt + w_peep * high_peep + w_fio2 * high_fio2;
    }
    scores
}

/// Softmax sample over the support. Always has full support: every score
/// is finite, so every probability is strictly positive.
fn sample_behavior<R: Rng>(rng: &mut R, spo2: f64, severe: bool) -> ActionTriple {
    let scores = behavior_scores(spo2, severe);
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u: f64 = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u < 0.0 {
            return BEHAVIOR_SUPPORT[i];
        }
    }
    BEHAVIOR_SUPPORT[BEHAVIOR_SUPPORT.len() - 1]
}

fn bin_interval(bin: u8, edges: &[f64], floor: f64, cap: f64) -> (f64, f64) {
    let lo = if bin == 1 { floor } else { edges[bin as usize - 2] };
    let hi = if (bin as usize) <= edges.len() { edges[bin as usize - 1] } else { cap };
    (lo, hi)
}

/// Raw settings drawn uniformly inside the chosen bins, so discretization
/// recovers the bin and the mean raw value is the bin midpoint.
fn raw_settings<R: Rng>(rng: &mut R, a: ActionTriple) -> (f64, f64, f64) {
    let (vt_lo, vt_hi) = bin_interval(a.vt_bin, &VT_EDGES, 3.0, 12.5);
    let (pe_lo, pe_hi) = bin_interval(a.peep_bin, &PEEP_EDGES, 4.0, 18.0);
    let (fi_lo, fi_hi) = bin_interval(a.fio2_bin, &FIO2_EDGES, 0.3, 1.0);
    (
        rng.gen_range(vt_lo..vt_hi),
        rng.gen_range(pe_lo..pe_hi),
        rng.gen_range(fi_lo..fi_hi),
    )
}

fn sample_statics<R: Rng>(rng: &mut R, env: &SyntheticEnv, severe: bool) -> StaticFields {
    let p_mort = if severe { MORTALITY_SEVERE } else { MORTALITY_MILD };
    StaticFields {
        sex: if rng.gen::<f64>() < 0.55 { 1.0 } else { 0.0 },
        sepsis: rng.gen::<f64>() < 0.25,
        weight_kg: (80.0 + 12.0 * env.noise_scale * standard_normal(rng)).clamp(40.0, 140.0),
        age_years: (62.0 + 14.0 * env.noise_scale * standard_normal(rng)).clamp(18.0, 95.0),
        mortality_90d: rng.gen::<f64>() < p_mort,
        icu_readmission: rng.gen::<f64>() < 0.12,
    }
}

fn initial_values<R: Rng>(rng: &mut R, laws: &[VarLaw], severe: bool, noise: f64) -> Vec<f64> {
    laws.iter()
        .map(|law| law.mean(severe) + 2.0 * law.noise_sd * noise * standard_normal(rng))
        .collect()
}

fn advance<R: Rng>(
    rng: &mut R,
    laws: &[VarLaw],
    values: &mut [f64],
    raw_action: (f64, f64, f64),
    severe: bool,
    noise: f64,
    mean_action: (f64, f64, f64),
    clamp: bool,
) {
    for (pos, law) in laws.iter().enumerate() {
        let drive = law.b_vt * raw_action.0
            + law.b_peep * raw_action.1
            + law.b_fio2(severe) * raw_action.2;
        let mut next = law.ar * values[pos]
            + drive
            + law.intercept(severe, mean_action)
            + law.noise_sd * noise * standard_normal(rng);
        if clamp {
            next = clamp_var(pos, next);
        }
        values[pos] = next;
    }
}

fn sample_episode(env: &SyntheticEnv, idx: usize) -> RawEpisode {
    let mut rng = rng_from(derive_seed(env.seed, idx as u64));
    let severe = rng.gen::<f64>() < env.p_severe;
    let statics = sample_statics(&mut rng, env, severe);
    let horizon = env.horizons.sample(&mut rng);
    let mean_action = mean_support_action();

    let mut dynamic = initial_values(&mut rng, &DYNAMIC_LAWS, severe, env.noise_scale);
    dynamic[SPO2_POS] = dynamic[SPO2_POS].clamp(0.0, 100.0);
    let mut type_vars = initial_values(&mut rng, &TYPE_LAWS, severe, env.noise_scale);

    let mut steps = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let a = sample_behavior(&mut rng, dynamic[SPO2_POS], severe);
        let raw = raw_settings(&mut rng, a);

        let mut row = [None; N_STEP_VARS];
        for (pos, &v) in dynamic.iter().enumerate() {
            row[pos] = Some(v);
        }
        for (k, &v) in type_vars.iter().enumerate() {
            row[12 + k] = Some(v);
        }
        row[StepVar::VtSet.index()] = Some(raw.0);
        row[StepVar::Peep.index()] = Some(raw.1);
        row[StepVar::FiO2.index()] = Some(raw.2);
        steps.push(row);

        advance(&mut rng, &DYNAMIC_LAWS, &mut dynamic, raw, severe, env.noise_scale, mean_action, true);
        advance(&mut rng, &TYPE_LAWS, &mut type_vars, raw, severe, env.noise_scale, mean_action, false);
    }

    RawEpisode { episode_id: format!("synth{}-{idx:05}", env.seed), statics, steps }
}

/// Draw a cohort of fully-observed episodes under the behavior policy,
/// with raw (continuous) ventilator settings. Episodes are independent
/// with derived seeds, so the cohort is reproducible and order-stable.
pub fn sample_cohort(
    env: &SyntheticEnv,
    n_episodes: usize,
    horizons: HorizonDist,
) -> Result<Vec<RawEpisode>> {
    env.validate()?;
    horizons.validate()?;
    if n_episodes == 0 {
        return Err(VentError::invalid("n_episodes must be at least 1"));
    }
    let env = SyntheticEnv { horizons, ..*env };
    Ok((0..n_episodes).into_par_iter().map(|i| sample_episode(&env, i)).collect())
}

/// A Monte-Carlo estimate of a policy's value under the true dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleValue {
    pub value: f64,
    /// Standard error of the rollout mean.
    pub se: f64,
    pub n_rollouts: usize,
}

fn rollout_return(
    env: &SyntheticEnv,
    policy: &dyn Policy,
    propensity: Option<&LogisticModel>,
    params: &RewardParams,
    seed: u64,
) -> Result<f64> {
    let mut rng = rng_from(seed);
    let severe = rng.gen::<f64>() < env.p_severe;
    let statics = sample_statics(&mut rng, env, severe);
    let horizon = env.horizons.sample(&mut rng);
    let mean_action = mean_support_action();

    let mut dynamic = initial_values(&mut rng, &DYNAMIC_LAWS, severe, env.noise_scale);
    dynamic[SPO2_POS] = dynamic[SPO2_POS].clamp(0.0, 100.0);
    let type_vars = initial_values(&mut rng, &TYPE_LAWS, severe, env.noise_scale);

    // The propensity model sees the same inputs it would on a logged
    // episode: first-step proxies plus the two static indicators.
    let mut x = [0.0; N_TYPE_FEATURES];
    for (i, f) in TypeFeature::ALL.iter().enumerate() {
        x[i] = match f {
            TypeFeature::MeanBp => type_vars[0],
            TypeFeature::Temperature => type_vars[1],
            TypeFeature::ShockIndex => type_vars[2],
            TypeFeature::UrineOutput => type_vars[3],
            TypeFeature::TotalIvFluids => type_vars[4],
            TypeFeature::Sirs => type_vars[5],
            TypeFeature::Sofa => type_vars[6],
            TypeFeature::OxygenationIndex => type_vars[7],
            TypeFeature::Sex => statics.sex,
            TypeFeature::IcuReadmission => {
                if statics.icu_readmission {
                    1.0
                } else {
                    0.0
                }
            }
        };
    }
    let z = match propensity {
        Some(model) => model.predict(&x)?,
        None => 0.5,
    };

    let assemble = |dynamic: &[f64]| {
        let mut s = [0.0; STATE_DIM];
        s[0] = if statics.sepsis { 1.0 } else { 0.0 };
        s[1] = statics.weight_kg;
        s[2] = statics.age_years;
        s[3..15].copy_from_slice(dynamic);
        s[PROPENSITY_INDEX] = z;
        StateVector(s)
    };

    let mut total = 0.0;
    let mut disc = 1.0;
    let mut state = assemble(&dynamic);
    for _ in 0..horizon - 1 {
        let a = policy.decide(&state).sample(&mut rng);
        // Executing a binned action in the true environment means applying
        // its representative setting.
        let raw = mdp::representative_action(a);
        advance(&mut rng, &DYNAMIC_LAWS, &mut dynamic, raw, severe, env.noise_scale, mean_action, true);
        let next = assemble(&dynamic);
        total += disc * mdp::reward(&state, &next, a, params);
        disc *= params.gamma;
        state = next;
    }
    Ok(total)
}

/// Monte-Carlo policy value under the true dynamics, with its standard
/// error. Rollouts use derived seeds, so the result is reproducible and
/// independent of scheduling.
pub fn true_policy_value(
    env: &SyntheticEnv,
    policy: &dyn Policy,
    propensity: Option<&LogisticModel>,
    params: &RewardParams,
    n_rollouts: usize,
    seed: u64,
) -> Result<OracleValue> {
    env.validate()?;
    params.validate()?;
    if n_rollouts == 0 {
        return Err(VentError::invalid("n_rollouts must be at least 1"));
    }
    let returns: Vec<f64> = (0..n_rollouts)
        .into_par_iter()
        .map(|i| rollout_return(env, policy, propensity, params, derive_seed(seed, i as u64)))
        .collect::<Result<_>>()?;
    let n = returns.len() as f64;
    let value = returns.iter().sum::<f64>() / n;
    let se = if returns.len() < 2 {
        0.0
    } else {
        let var = returns.iter().map(|r| (r - value).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    };
    Ok(OracleValue { value, se, n_rollouts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::csvio::records_from_raw;
    use crate::ingest::{build_transitions, Transition};
    use crate::nwe::{fit_nwe, BandwidthSet, NweModel};
    use crate::policies::PolicyDecision;
    use crate::propensity::{fit_logistic, DEFAULT_L2};
    use crate::schema::FeatureGroups;

    struct FixedPolicy(ActionTriple);

    impl Policy for FixedPolicy {
        fn decide(&self, _s: &StateVector) -> PolicyDecision {
            PolicyDecision::Deterministic(self.0)
        }
    }

    #[test]
    fn cohort_shapes_and_caps() {
        let env = SyntheticEnv::default();
        let cohort = sample_cohort(&env, 100, env.horizons).unwrap();
        assert_eq!(cohort.len(), 100);
        for ep in &cohort {
            assert!(ep.steps.len() >= 4 && ep.steps.len() <= MAX_STEPS);
            for row in &ep.steps {
                assert!(row.iter().all(|v| v.is_some()), "synthetic rows are fully observed");
                let spo2 = row[StepVar::SpO2.index()].unwrap();
                assert!((0.0..=100.0).contains(&spo2), "SpO2 out of range: {spo2}");
                let a = mdp::discretize_action(
                    row[StepVar::VtSet.index()].unwrap(),
                    row[StepVar::Peep.index()].unwrap(),
                    row[StepVar::FiO2.index()].unwrap(),
                )
                .unwrap();
                assert!(BEHAVIOR_SUPPORT.contains(&a), "action {a:?} outside support");
            }
        }
    }

    #[test]
    fn same_seed_same_cohort() {
        let env = SyntheticEnv { seed: 42, ..Default::default() };
        let a = sample_cohort(&env, 25, env.horizons).unwrap();
        let b = sample_cohort(&env, 25, env.horizons).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn behavior_covers_all_support_actions() {
        let env = SyntheticEnv { seed: 3, ..Default::default() };
        let cohort = sample_cohort(&env, 300, env.horizons).unwrap();
        let mut seen = [false; 8];
        for ep in &cohort {
            for row in &ep.steps {
                let a = mdp::discretize_action(
                    row[StepVar::VtSet.index()].unwrap(),
                    row[StepVar::Peep.index()].unwrap(),
                    row[StepVar::FiO2.index()].unwrap(),
                )
                .unwrap();
                let pos = BEHAVIOR_SUPPORT.iter().position(|&s| s == a).unwrap();
                seen[pos] = true;
            }
        }
        assert!(seen.iter().all(|&s| s), "support not fully covered: {seen:?}");
    }

    #[test]
    fn severity_shifts_proxies_and_treatment() {
        let mild_env = SyntheticEnv { seed: 11, p_severe: 0.0, ..Default::default() };
        let severe_env = SyntheticEnv { seed: 11, p_severe: 1.0, ..Default::default() };
        let mild = sample_cohort(&mild_env, 150, mild_env.horizons).unwrap();
        let severe = sample_cohort(&severe_env, 150, severe_env.horizons).unwrap();

        let first_sofa = |cohort: &[RawEpisode]| {
            cohort.iter().map(|ep| ep.steps[0][StepVar::Sofa.index()].unwrap()).sum::<f64>()
                / cohort.len() as f64
        };
        assert!(
            first_sofa(&severe) - first_sofa(&mild) > 4.0,
            "SOFA should separate severities"
        );

        let high_fio2_rate = |cohort: &[RawEpisode]| {
            let mut hits = 0usize;
            let mut total = 0usize;
            for ep in cohort {
                for row in &ep.steps {
                    total += 1;
                    if row[StepVar::FiO2.index()].unwrap() >= 0.65 {
                        hits += 1;
                    }
                }
            }
            hits as f64 / total as f64
        };
        assert!(
            high_fio2_rate(&severe) > high_fio2_rate(&mild) + 0.2,
            "severe patients should receive high FiO2 far more often"
        );

        let mortality = |cohort: &[RawEpisode]| {
            cohort.iter().filter(|ep| ep.statics.mortality_90d).count() as f64
                / cohort.len() as f64
        };
        assert!(mortality(&severe) > 0.7 && mortality(&mild) < 0.2);
    }

    #[test]
    fn gamma_zero_noise_free_value_is_the_first_reward() {
        let env = SyntheticEnv {
            seed: 5,
            p_severe: 0.0,
            noise_scale: 0.0,
            horizons: HorizonDist { min: 6, max: 6 },
        };
        let a = ActionTriple::new(6, 1, 5).unwrap();
        let params = RewardParams { gamma: 0.0, ..RewardParams::default() };
        let oracle = true_policy_value(&env, &FixedPolicy(a), None, &params, 50, 9).unwrap();
        assert_eq!(oracle.se, 0.0, "noise-free rollouts are identical");

        // Replay the single discounted step by hand: with gamma = 0 only the
        // first reward counts.
        let mean_action = mean_support_action();
        let spo2_0: f64 = 90.0;
        let law = &DYNAMIC_LAWS[SPO2_POS];
        let raw = mdp::representative_action(a);
        let spo2_1 = law.ar * spo2_0
            + law.b_vt * raw.0
            + law.b_fio2(false) * raw.2
            + law.intercept(false, mean_action);
        let mut r0 = spo2_1 - spo2_0; // both sides below the cap
        r0 -= params.alpha + params.beta; // Vt bin 6 and FiO2 bin 5 are both aggressive
        assert!((oracle.value - r0).abs() < 1e-12, "value {} vs r0 {}", oracle.value, r0);
    }

    #[test]
    fn doubling_rollouts_shrinks_se_by_root_two() {
        let env = SyntheticEnv::default();
        let a = ActionTriple::new(3, 1, 2).unwrap();
        let params = RewardParams::default();
        let small = true_policy_value(&env, &FixedPolicy(a), None, &params, 2000, 4).unwrap();
        let large = true_policy_value(&env, &FixedPolicy(a), None, &params, 4000, 4).unwrap();
        let ratio = small.se / large.se;
        assert!(
            (1.30..=1.53).contains(&ratio),
            "SE ratio {ratio} should be near sqrt(2)"
        );
    }

    #[test]
    fn oracle_is_deterministic() {
        let env = SyntheticEnv::default();
        let a = ActionTriple::new(3, 2, 5).unwrap();
        let params = RewardParams::default();
        let one = true_policy_value(&env, &FixedPolicy(a), None, &params, 500, 7).unwrap();
        let two = true_policy_value(&env, &FixedPolicy(a), None, &params, 500, 7).unwrap();
        assert_eq!(one, two);
    }

    /// Fit the transition model on a synthetic cohort, optionally replacing
    /// the fitted propensity score with a constant (the "no z" ablation).
    fn fitted_world(
        env: &SyntheticEnv,
        n_train: usize,
        with_z: bool,
    ) -> (NweModel, LogisticModel, Vec<Transition>) {
        let cohort = sample_cohort(env, n_train, env.horizons).unwrap();
        let records = records_from_raw(cohort).unwrap();
        let rows: Vec<([f64; N_TYPE_FEATURES], bool)> = records
            .iter()
            .map(|r| (r.type_features(), r.statics.mortality_90d))
            .collect();
        let propensity = if with_z {
            fit_logistic(&rows, DEFAULT_L2).unwrap()
        } else {
            // All-zero features with balanced labels drive every weight and
            // the intercept to zero: the model predicts 1/2 everywhere.
            let flat: Vec<([f64; N_TYPE_FEATURES], bool)> =
                (0..40).map(|i| ([0.0; N_TYPE_FEATURES], i % 2 == 0)).collect();
            fit_logistic(&flat, DEFAULT_L2).unwrap()
        };
        let transitions =
            build_transitions(&records, &RewardParams::default(), &propensity).unwrap();
        // Tighter bandwidths on the informative coordinates (SpO2 and z)
        // keep the shared smoothing bias from drowning the effect under
        // test; the noise-only groups can stay wide.
        let bandwidths =
            BandwidthSet { h_s_blood: 0.8, h_z: 0.8, ..BandwidthSet::reference() };
        let model = fit_nwe(&transitions, bandwidths, FeatureGroups::default()).unwrap();
        (model, propensity, transitions)
    }

    /// The confounding regression: the latent severity drives both the
    /// logged actions and the SpO2 drift, and the propensity score is its
    /// only observable proxy. Removing z from the kernel must therefore
    /// increase the bias of matching-based evaluation. The numeric ranges
    /// were frozen from this configuration's first run.
    #[test]
    fn removing_z_increases_matching_bias() {
        use crate::ope::{matching_ope, BootstrapConfig};
        use crate::simulator::SimStart;

        let env = SyntheticEnv { seed: 17, ..Default::default() };
        let eval_env = SyntheticEnv { seed: 18, ..env };
        let target = FixedPolicy(ActionTriple::new(3, 1, 5).unwrap());
        let params = RewardParams::default();

        let truth = true_policy_value(&env, &target, None, &params, 4000, 99).unwrap();

        let eval = sample_cohort(&eval_env, 100, eval_env.horizons).unwrap();
        let starts: Vec<SimStart> =
            records_from_raw(eval).unwrap().iter().map(SimStart::from_record).collect();
        let bootstrap = BootstrapConfig { n_resamples: 200, ..Default::default() };

        let mut bias = [0.0; 2];
        for (slot, with_z) in [(0, true), (1, false)] {
            let (model, propensity, _) = fitted_world(&env, 400, with_z);
            let (est, _) = matching_ope(
                &target,
                &starts,
                &model,
                &propensity,
                &params,
                23,
                &bootstrap,
            )
            .unwrap();
            bias[slot] = (est.point - truth.value).abs();
        }
        assert!(
            bias[1] > 1.3 * bias[0],
            "dropping z must clearly increase bias: with={} without={}",
            bias[0],
            bias[1]
        );
        // Expected ranges frozen from this seeded configuration's first
        // run (0.52 and 1.13), with margins for benign refactors.
        assert!(bias[0] < 0.85, "with-z bias {} drifted out of range", bias[0]);
        assert!(
            (0.7..2.2).contains(&bias[1]),
            "without-z bias {} drifted out of range",
            bias[1]
        );
    }
}
