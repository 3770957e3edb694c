//! Variable catalogs: the state-vector layout, the per-step CSV variables,
//! the propensity "type" features, and the kernel feature grouping.
//!
//! Everything downstream (ingest, transition model, policies, exports)
//! indexes into these catalogs, so ordering here is part of the on-disk
//! format and must not change without bumping the format version.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VentError};

/// Dimension of the full state vector: 15 observable features plus the
/// propensity score.
pub const STATE_DIM: usize = 16;
/// Observable features (everything except the propensity score).
pub const N_OBSERVABLE: usize = 15;
/// Static features occupy the first three slots and never change within an
/// episode: sepsis, weight, age.
pub const N_STATIC: usize = 3;
/// Next-state prediction target: the state vector with the three static
/// features removed (12 dynamic observables + propensity score).
pub const TARGET_DIM: usize = STATE_DIM - N_STATIC;
/// Index of the propensity score within the state vector.
pub const PROPENSITY_INDEX: usize = 15;
/// Episodes are truncated to this many 4-hour steps (72 hours).
pub const MAX_STEPS: usize = 18;

/// Components of the 16-dimensional state vector, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StateFeature {
    Sepsis = 0,
    Weight = 1,
    Age = 2,
    HeartRate = 3,
    RespRate = 4,
    SpO2 = 5,
    PfRatio = 6,
    SpontVt = 7,
    /// Mean airway pressure.
    Map = 8,
    PaCO2 = 9,
    SysBp = 10,
    DiaBp = 11,
    CumFluidBalance = 12,
    PaO2 = 13,
    Gcs = 14,
    Propensity = 15,
}

impl StateFeature {
    pub const ALL: [StateFeature; STATE_DIM] = [
        StateFeature::Sepsis,
        StateFeature::Weight,
        StateFeature::Age,
        StateFeature::HeartRate,
        StateFeature::RespRate,
        StateFeature::SpO2,
        StateFeature::PfRatio,
        StateFeature::SpontVt,
        StateFeature::Map,
        StateFeature::PaCO2,
        StateFeature::SysBp,
        StateFeature::DiaBp,
        StateFeature::CumFluidBalance,
        StateFeature::PaO2,
        StateFeature::Gcs,
        StateFeature::Propensity,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            StateFeature::Sepsis => "sepsis",
            StateFeature::Weight => "weight",
            StateFeature::Age => "age",
            StateFeature::HeartRate => "heart_rate",
            StateFeature::RespRate => "resp_rate",
            StateFeature::SpO2 => "spo2",
            StateFeature::PfRatio => "pf_ratio",
            StateFeature::SpontVt => "spont_vt",
            StateFeature::Map => "map",
            StateFeature::PaCO2 => "paco2",
            StateFeature::SysBp => "sys_bp",
            StateFeature::DiaBp => "dia_bp",
            StateFeature::CumFluidBalance => "cum_fluid_balance",
            StateFeature::PaO2 => "pao2",
            StateFeature::Gcs => "gcs",
            StateFeature::Propensity => "z",
        }
    }
}

/// State indices of the three static features (removed from prediction
/// targets and carried forward by the simulator).
pub const STATIC_STATE_INDICES: [usize; N_STATIC] = [0, 1, 2];

/// State indices covered by the prediction target, in target order:
/// the 12 dynamic observables followed by the propensity score.
pub const TARGET_STATE_INDICES: [usize; TARGET_DIM] =
    [3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15];

/// Position of SpO2 within the prediction target.
pub const TARGET_SPO2: usize = 2;

/// Per-step CSV variables: 20 time-dependent measurements plus the three
/// raw ventilator settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepVar {
    // Dynamic state features (same order as the state vector slice 3..15).
    HeartRate = 0,
    RespRate = 1,
    SpO2 = 2,
    PfRatio = 3,
    SpontVt = 4,
    Map = 5,
    PaCO2 = 6,
    SysBp = 7,
    DiaBp = 8,
    CumFluidBalance = 9,
    PaO2 = 10,
    Gcs = 11,
    // Remaining time-dependent variables (propensity "type" inputs).
    MeanBp = 12,
    Temperature = 13,
    ShockIndex = 14,
    UrineOutput = 15,
    TotalIvFluids = 16,
    Sirs = 17,
    Sofa = 18,
    OxygenationIndex = 19,
    // Raw ventilator settings.
    VtSet = 20,
    Peep = 21,
    FiO2 = 22,
}

pub const N_STEP_VARS: usize = 23;
/// Step variables that are ventilator settings (the action parameters).
pub const SETTING_VARS: [StepVar; 3] = [StepVar::VtSet, StepVar::Peep, StepVar::FiO2];

impl StepVar {
    pub const ALL: [StepVar; N_STEP_VARS] = [
        StepVar::HeartRate,
        StepVar::RespRate,
        StepVar::SpO2,
        StepVar::PfRatio,
        StepVar::SpontVt,
        StepVar::Map,
        StepVar::PaCO2,
        StepVar::SysBp,
        StepVar::DiaBp,
        StepVar::CumFluidBalance,
        StepVar::PaO2,
        StepVar::Gcs,
        StepVar::MeanBp,
        StepVar::Temperature,
        StepVar::ShockIndex,
        StepVar::UrineOutput,
        StepVar::TotalIvFluids,
        StepVar::Sirs,
        StepVar::Sofa,
        StepVar::OxygenationIndex,
        StepVar::VtSet,
        StepVar::Peep,
        StepVar::FiO2,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            StepVar::HeartRate => "heart_rate",
            StepVar::RespRate => "resp_rate",
            StepVar::SpO2 => "spo2",
            StepVar::PfRatio => "pf_ratio",
            StepVar::SpontVt => "spont_vt",
            StepVar::Map => "map",
            StepVar::PaCO2 => "paco2",
            StepVar::SysBp => "sys_bp",
            StepVar::DiaBp => "dia_bp",
            StepVar::CumFluidBalance => "cum_fluid_balance",
            StepVar::PaO2 => "pao2",
            StepVar::Gcs => "gcs",
            StepVar::MeanBp => "mean_bp",
            StepVar::Temperature => "temperature",
            StepVar::ShockIndex => "shock_index",
            StepVar::UrineOutput => "urine_output",
            StepVar::TotalIvFluids => "total_iv_fluids",
            StepVar::Sirs => "sirs",
            StepVar::Sofa => "sofa",
            StepVar::OxygenationIndex => "oxygenation_index",
            StepVar::VtSet => "vt_set",
            StepVar::Peep => "peep",
            StepVar::FiO2 => "fio2",
        }
    }

    pub fn from_name(name: &str) -> Option<StepVar> {
        StepVar::ALL.iter().copied().find(|v| v.name() == name)
    }

    pub fn is_setting(self) -> bool {
        SETTING_VARS.contains(&self)
    }
}

/// The 12 step variables that feed the dynamic part of the state vector,
/// in state order (state index = position + 3).
pub const DYNAMIC_STATE_VARS: [StepVar; 12] = [
    StepVar::HeartRate,
    StepVar::RespRate,
    StepVar::SpO2,
    StepVar::PfRatio,
    StepVar::SpontVt,
    StepVar::Map,
    StepVar::PaCO2,
    StepVar::SysBp,
    StepVar::DiaBp,
    StepVar::CumFluidBalance,
    StepVar::PaO2,
    StepVar::Gcs,
];

/// Inputs to the propensity ("type") logistic model, taken at the initial
/// time step. `None` in the step slot means the value comes from the static
/// record instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TypeFeature {
    Sofa,
    Sirs,
    ShockIndex,
    TotalIvFluids,
    UrineOutput,
    MeanBp,
    Sex,
    IcuReadmission,
    Temperature,
    OxygenationIndex,
}

pub const N_TYPE_FEATURES: usize = 10;

impl TypeFeature {
    pub const ALL: [TypeFeature; N_TYPE_FEATURES] = [
        TypeFeature::Sofa,
        TypeFeature::Sirs,
        TypeFeature::ShockIndex,
        TypeFeature::TotalIvFluids,
        TypeFeature::UrineOutput,
        TypeFeature::MeanBp,
        TypeFeature::Sex,
        TypeFeature::IcuReadmission,
        TypeFeature::Temperature,
        TypeFeature::OxygenationIndex,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TypeFeature::Sofa => "sofa",
            TypeFeature::Sirs => "sirs",
            TypeFeature::ShockIndex => "shock_index",
            TypeFeature::TotalIvFluids => "total_iv_fluids",
            TypeFeature::UrineOutput => "urine_output",
            TypeFeature::MeanBp => "mean_bp",
            TypeFeature::Sex => "sex",
            TypeFeature::IcuReadmission => "icu_readmission",
            TypeFeature::Temperature => "temperature",
            TypeFeature::OxygenationIndex => "oxygenation_index",
        }
    }

    /// Step variable backing this feature, or `None` for static fields.
    pub fn step_var(self) -> Option<StepVar> {
        match self {
            TypeFeature::Sofa => Some(StepVar::Sofa),
            TypeFeature::Sirs => Some(StepVar::Sirs),
            TypeFeature::ShockIndex => Some(StepVar::ShockIndex),
            TypeFeature::TotalIvFluids => Some(StepVar::TotalIvFluids),
            TypeFeature::UrineOutput => Some(StepVar::UrineOutput),
            TypeFeature::MeanBp => Some(StepVar::MeanBp),
            TypeFeature::Temperature => Some(StepVar::Temperature),
            TypeFeature::OxygenationIndex => Some(StepVar::OxygenationIndex),
            TypeFeature::Sex | TypeFeature::IcuReadmission => None,
        }
    }
}

/// Clinically oriented grouping of the 15 observable state features used by
/// the kernel transition model. Each group carries its own bandwidth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGroups {
    pub respiratory: Vec<usize>,
    pub hemodynamic: Vec<usize>,
    pub blood_gas: Vec<usize>,
    pub miscellaneous: Vec<usize>,
}

impl Default for FeatureGroups {
    fn default() -> Self {
        FeatureGroups {
            respiratory: vec![
                StateFeature::RespRate.index(),
                StateFeature::SpontVt.index(),
                StateFeature::PfRatio.index(),
                StateFeature::Map.index(),
            ],
            hemodynamic: vec![
                StateFeature::HeartRate.index(),
                StateFeature::SysBp.index(),
                StateFeature::DiaBp.index(),
            ],
            blood_gas: vec![
                StateFeature::SpO2.index(),
                StateFeature::PaCO2.index(),
                StateFeature::PaO2.index(),
            ],
            miscellaneous: vec![
                StateFeature::Sepsis.index(),
                StateFeature::Weight.index(),
                StateFeature::Age.index(),
                StateFeature::Gcs.index(),
                StateFeature::CumFluidBalance.index(),
            ],
        }
    }
}

impl FeatureGroups {
    /// Groups in bandwidth order: hemodynamic, respiratory, blood gas,
    /// miscellaneous.
    pub fn as_slices(&self) -> [&[usize]; 4] {
        [
            &self.hemodynamic,
            &self.respiratory,
            &self.blood_gas,
            &self.miscellaneous,
        ]
    }

    /// Groups must be disjoint and cover exactly the 15 observable features.
    pub fn validate(&self) -> Result<()> {
        let mut seen = [false; STATE_DIM];
        for group in self.as_slices() {
            for &i in group {
                if i >= N_OBSERVABLE {
                    return Err(VentError::invalid(format!(
                        "feature group index {i} out of range (observables are 0..{N_OBSERVABLE})"
                    )));
                }
                if seen[i] {
                    return Err(VentError::invalid(format!(
                        "feature group index {i} appears in more than one group"
                    )));
                }
                seen[i] = true;
            }
        }
        if seen[..N_OBSERVABLE].iter().all(|&s| s) {
            Ok(())
        } else {
            let missing: Vec<usize> = (0..N_OBSERVABLE).filter(|&i| !seen[i]).collect();
            Err(VentError::invalid(format!(
                "feature groups do not cover observable indices {missing:?}"
            )))
        }
    }
}
