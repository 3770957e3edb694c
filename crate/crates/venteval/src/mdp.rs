//! Decision-process primitives: the state vector, the discretized action
//! space, and the SpO2-delta reward with aggressiveness penalties.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VentError};
use crate::schema::{StateFeature, PROPENSITY_INDEX, STATE_DIM};

/// Number of Vt_set bins.
pub const N_VT_BINS: u8 = 7;
/// Number of PEEP bins.
pub const N_PEEP_BINS: u8 = 4;
/// Number of FiO2 bins.
pub const N_FIO2_BINS: u8 = 7;
/// Total number of discrete actions (7 x 4 x 7).
pub const N_ACTIONS: usize = 196;

/// Inner bin edges for Vt_set in mL/kg ideal body weight. Bin k (1-based)
/// covers [edge_{k-1}, edge_k) with edge_0 = 0 and the last bin unbounded.
pub const VT_EDGES: [f64; 6] = [3.9, 5.37, 6.55, 7.74, 9.12, 11.11];
/// Inner bin edges for PEEP in cmH2O.
pub const PEEP_EDGES: [f64; 3] = [7.0, 11.0, 16.0];
/// Inner bin edges for FiO2 (fraction of inspired oxygen); the last bin is
/// the closed interval [0.89, 1].
pub const FIO2_EDGES: [f64; 6] = [0.36, 0.45, 0.55, 0.65, 0.76, 0.89];

/// Vt_set bins at or above this index are considered aggressive.
pub const VT_AGGRESSIVE_MIN_BIN: u8 = 6;
/// FiO2 bins at or above this index are considered aggressive.
pub const FIO2_AGGRESSIVE_MIN_BIN: u8 = 4;

/// Patient state: 15 observable features plus the propensity score, in the
/// canonical order of [`StateFeature`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateVector(pub [f64; STATE_DIM]);

impl StateVector {
    pub fn get(&self, f: StateFeature) -> f64 {
        self.0[f.index()]
    }

    pub fn set(&mut self, f: StateFeature, v: f64) {
        self.0[f.index()] = v;
    }

    pub fn spo2(&self) -> f64 {
        self.0[StateFeature::SpO2.index()]
    }

    pub fn propensity(&self) -> f64 {
        self.0[PROPENSITY_INDEX]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// A discretized ventilator setting: 1-based bin indices per coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionTriple {
    pub vt_bin: u8,
    pub peep_bin: u8,
    pub fio2_bin: u8,
}

impl ActionTriple {
    pub fn new(vt_bin: u8, peep_bin: u8, fio2_bin: u8) -> Result<ActionTriple> {
        let a = ActionTriple { vt_bin, peep_bin, fio2_bin };
        if a.is_valid() {
            Ok(a)
        } else {
            Err(VentError::invalid(format!(
                "action bins ({vt_bin}, {peep_bin}, {fio2_bin}) out of range 1..=7 x 1..=4 x 1..=7"
            )))
        }
    }

    pub fn is_valid(&self) -> bool {
        (1..=N_VT_BINS).contains(&self.vt_bin)
            && (1..=N_PEEP_BINS).contains(&self.peep_bin)
            && (1..=N_FIO2_BINS).contains(&self.fio2_bin)
    }

    /// Flattened index in 0..196, Vt-major then PEEP then FiO2.
    pub fn index(&self) -> usize {
        (self.vt_bin as usize - 1) * (N_PEEP_BINS as usize * N_FIO2_BINS as usize)
            + (self.peep_bin as usize - 1) * N_FIO2_BINS as usize
            + (self.fio2_bin as usize - 1)
    }

    pub fn from_index(idx: usize) -> Result<ActionTriple> {
        if idx >= N_ACTIONS {
            return Err(VentError::invalid(format!(
                "action index {idx} out of range 0..{N_ACTIONS}"
            )));
        }
        let per_vt = N_PEEP_BINS as usize * N_FIO2_BINS as usize;
        Ok(ActionTriple {
            vt_bin: (idx / per_vt) as u8 + 1,
            peep_bin: ((idx % per_vt) / N_FIO2_BINS as usize) as u8 + 1,
            fio2_bin: (idx % N_FIO2_BINS as usize) as u8 + 1,
        })
    }

    /// All 196 actions in index order.
    pub fn all() -> impl Iterator<Item = ActionTriple> {
        (0..N_ACTIONS).map(|i| ActionTriple::from_index(i).expect("index in range"))
    }
}

/// Reward weights and discounting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardParams {
    /// Penalty weight for aggressive tidal volume.
    pub alpha: f64,
    /// Penalty weight for aggressive FiO2.
    pub beta: f64,
    /// SpO2 level at which the improvement incentive switches off.
    pub spo2_cap: f64,
    /// Discount factor.
    pub gamma: f64,
}

impl RewardParams {
    pub fn new(alpha: f64, beta: f64) -> RewardParams {
        RewardParams { alpha, beta, spo2_cap: 95.0, gamma: 0.99 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(VentError::invalid("penalty weights must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(VentError::invalid("gamma must lie in [0, 1]"));
        }
        Ok(())
    }
}

impl Default for RewardParams {
    /// The selected penalty weights: alpha = 0.375, beta = 0.75.
    fn default() -> Self {
        RewardParams::new(0.375, 0.75)
    }
}

fn bin_of(value: f64, edges: &[f64]) -> u8 {
    let mut bin = 1u8;
    for &e in edges {
        if value >= e {
            bin += 1;
        } else {
            break;
        }
    }
    bin
}

/// Map raw ventilator settings to their bins. Intervals are left-closed,
/// right-open; the top Vt/PEEP bins are unbounded and the top FiO2 bin is
/// closed at 1.
pub fn discretize_action(vt_raw: f64, peep_raw: f64, fio2_raw: f64) -> Result<ActionTriple> {
    if vt_raw < 0.0 || peep_raw < 0.0 || fio2_raw < 0.0 {
        return Err(VentError::invalid(format!(
            "ventilator settings must be non-negative, got ({vt_raw}, {peep_raw}, {fio2_raw})"
        )));
    }
    if fio2_raw > 1.0 {
        return Err(VentError::invalid(format!("fio2 {fio2_raw} exceeds 1")));
    }
    Ok(ActionTriple {
        vt_bin: bin_of(vt_raw, &VT_EDGES),
        peep_bin: bin_of(peep_raw, &PEEP_EDGES),
        fio2_bin: bin_of(fio2_raw, &FIO2_EDGES),
    })
}

fn representative_of(bin: u8, edges: &[f64], upper: Option<f64>) -> f64 {
    let lo = if bin == 1 { 0.0 } else { edges[bin as usize - 2] };
    let hi = if (bin as usize) <= edges.len() { Some(edges[bin as usize - 1]) } else { upper };
    match hi {
        // Midpoint of a finite bin.
        Some(hi) => 0.5 * (lo + hi),
        // Unbounded top bin: a nominal interior point just above the edge.
        None => lo * 1.1,
    }
}

/// Map a discrete action back to a canonical continuous setting inside each
/// bin: the midpoint for finite bins, lower edge x 1.1 for the unbounded
/// top bins.
pub fn representative_action(a: ActionTriple) -> (f64, f64, f64) {
    (
        representative_of(a.vt_bin, &VT_EDGES, None),
        representative_of(a.peep_bin, &PEEP_EDGES, None),
        representative_of(a.fio2_bin, &FIO2_EDGES, Some(1.0)),
    )
}

/// Whether each coordinate of the action falls in its aggressive range
/// (Vt bin >= 6, FiO2 bin >= 4).
pub fn is_aggressive(a: ActionTriple) -> (bool, bool) {
    (a.vt_bin >= VT_AGGRESSIVE_MIN_BIN, a.fio2_bin >= FIO2_AGGRESSIVE_MIN_BIN)
}

fn interval_of(bin: u8, edges: &[f64], top: Option<f64>) -> String {
    let lo = if bin == 1 { 0.0 } else { edges[bin as usize - 2] };
    if (bin as usize) <= edges.len() {
        format!("[{lo}, {})", edges[bin as usize - 1])
    } else {
        match top {
            Some(hi) => format!("[{lo}, {hi}]"),
            None => format!("[{lo}, inf)"),
        }
    }
}

/// Human-readable discretization table, generated from the edge constants
/// so it can never drift from the code that bins actions.
pub fn bins_table() -> String {
    let mut rows = vec![vec![
        "bin".to_string(),
        "vt_set (ml/kg)".to_string(),
        "peep (cmH2O)".to_string(),
        "fio2 (fraction)".to_string(),
    ]];
    for bin in 1..=N_VT_BINS {
        rows.push(vec![
            bin.to_string(),
            interval_of(bin, &VT_EDGES, None),
            if bin <= N_PEEP_BINS { interval_of(bin, &PEEP_EDGES, None) } else { "-".into() },
            interval_of(bin, &FIO2_EDGES, Some(1.0)),
        ]);
    }
    let widths: Vec<usize> = (0..4)
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        for (c, cell) in row.iter().enumerate() {
            out.push_str(cell);
            if c + 1 < row.len() {
                for _ in 0..widths[c] - cell.len() + 2 {
                    out.push(' ');
                }
            }
        }
        out.push('\n');
    }
    out
}

/// One-step reward: SpO2 improvement (zeroed once either side reaches the
/// cap) minus penalties for aggressive settings.
pub fn reward(s_t: &StateVector, s_next: &StateVector, a: ActionTriple, p: &RewardParams) -> f64 {
    let r_spo = if s_t.spo2() < p.spo2_cap && s_next.spo2() < p.spo2_cap {
        s_next.spo2() - s_t.spo2()
    } else {
        0.0
    };
    let (vt_aggr, fio2_aggr) = is_aggressive(a);
    let mut r = r_spo;
    if vt_aggr {
        r -= p.alpha;
    }
    if fio2_aggr {
        r -= p.beta;
    }
    r
}

/// Discounted return with the first reward undiscounted:
/// sum_t gamma^(t-1) r_t.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    let mut acc = 0.0;
    let mut disc = 1.0;
    for &r in rewards {
        acc += disc * r;
        disc *= gamma;
    }
    acc
}
