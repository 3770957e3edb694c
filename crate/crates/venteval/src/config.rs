//! Run configuration (flat key=value files, overridable by flags) and the
//! manifest written alongside every command's outputs. Manifests record
//! input hashes, the effective config hash, the seed, and tool versions —
//! enough to reproduce any artifact byte for byte. Nothing time-dependent
//! goes in.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, VentError};
use crate::nwe::BandwidthSet;
use crate::rng::fnv1a64;

/// Every tunable the pipeline commands consume. File values are overridden
/// by explicit command-line flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data_dir: Option<PathBuf>,
    pub model_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,

    // Reward.
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,

    // Transition-model bandwidths.
    pub bandwidths: BandwidthSet,

    // Policy hyperparameters.
    pub max_depth: usize,
    pub alpha_lr: f64,
    pub alpha_cql: f64,
    pub epochs: usize,

    // Off-policy evaluation.
    pub method: String,
    pub n_resamples: usize,
    pub level: f64,

    // Preprocessing and synthetic-cohort settings.
    pub knn_k: usize,
    pub n_episodes: usize,
    pub n_rollouts: usize,
    pub folds: usize,
    pub horizon_min: usize,
    pub horizon_max: usize,
    pub p_severe: f64,
    pub noise_scale: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_dir: None,
            model_dir: None,
            out_dir: None,
            seed: None,
            alpha: 0.375,
            beta: 0.75,
            gamma: 0.99,
            bandwidths: BandwidthSet::reference(),
            max_depth: 5,
            alpha_lr: 0.05,
            alpha_cql: 0.25,
            epochs: 30,
            method: "matching".into(),
            n_resamples: 1000,
            level: 0.95,
            knn_k: 5,
            n_episodes: 500,
            n_rollouts: 10000,
            folds: 5,
            horizon_min: 4,
            horizon_max: 18,
            p_severe: 0.35,
            noise_scale: 1.0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| VentError::invalid(format!("config key `{key}`: cannot parse `{value}`")))
}

impl RunConfig {
    /// Parse a flat key=value file. Blank lines and `#` comments are
    /// ignored; unknown keys are errors so typos do not silently fall
    /// back to defaults.
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| VentError::io(path.display().to_string(), e))?;
        let mut config = RunConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                VentError::invalid(format!(
                    "{}:{}: expected key=value, got `{line}`",
                    path.display(),
                    lineno + 1
                ))
            })?;
            config.set(key.trim(), value.trim())?;
        }
        Ok(config)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "model_dir" => self.model_dir = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            "seed" => self.seed = Some(parse_num(key, value)?),
            "alpha" => self.alpha = parse_num(key, value)?,
            "beta" => self.beta = parse_num(key, value)?,
            "gamma" => self.gamma = parse_num(key, value)?,
            "h_s_hemo" => self.bandwidths.h_s_hemo = parse_num(key, value)?,
            "h_s_resp" => self.bandwidths.h_s_resp = parse_num(key, value)?,
            "h_s_blood" => self.bandwidths.h_s_blood = parse_num(key, value)?,
            "h_s_misc" => self.bandwidths.h_s_misc = parse_num(key, value)?,
            "h_a" => self.bandwidths.h_a = parse_num(key, value)?,
            "h_z" => self.bandwidths.h_z = parse_num(key, value)?,
            "lambda" => self.bandwidths.lambda = parse_num(key, value)?,
            "max_depth" => self.max_depth = parse_num(key, value)?,
            "alpha_lr" => self.alpha_lr = parse_num(key, value)?,
            "alpha_cql" => self.alpha_cql = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "method" => self.method = value.to_string(),
            "n_resamples" => self.n_resamples = parse_num(key, value)?,
            "level" => self.level = parse_num(key, value)?,
            "knn_k" => self.knn_k = parse_num(key, value)?,
            "n_episodes" => self.n_episodes = parse_num(key, value)?,
            "n_rollouts" => self.n_rollouts = parse_num(key, value)?,
            "folds" => self.folds = parse_num(key, value)?,
            "horizon_min" => self.horizon_min = parse_num(key, value)?,
            "horizon_max" => self.horizon_max = parse_num(key, value)?,
            "p_severe" => self.p_severe = parse_num(key, value)?,
            "noise_scale" => self.noise_scale = parse_num(key, value)?,
            other => {
                return Err(VentError::invalid(format!("unknown config key `{other}`")));
            }
        }
        Ok(())
    }

    /// Canonical serialization: sorted key=value lines with full float
    /// precision. Two configs hash alike exactly when every effective
    /// setting matches.
    pub fn canonical(&self) -> String {
        let path = |p: &Option<PathBuf>| {
            p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
        };
        let pairs: Vec<(&str, String)> = vec![
            ("alpha", self.alpha.to_string()),
            ("alpha_cql", self.alpha_cql.to_string()),
            ("alpha_lr", self.alpha_lr.to_string()),
            ("beta", self.beta.to_string()),
            ("data_dir", path(&self.data_dir)),
            ("epochs", self.epochs.to_string()),
            ("folds", self.folds.to_string()),
            ("gamma", self.gamma.to_string()),
            ("h_a", self.bandwidths.h_a.to_string()),
            ("h_s_blood", self.bandwidths.h_s_blood.to_string()),
            ("h_s_hemo", self.bandwidths.h_s_hemo.to_string()),
            ("h_s_misc", self.bandwidths.h_s_misc.to_string()),
            ("h_s_resp", self.bandwidths.h_s_resp.to_string()),
            ("h_z", self.bandwidths.h_z.to_string()),
            ("horizon_max", self.horizon_max.to_string()),
            ("horizon_min", self.horizon_min.to_string()),
            ("knn_k", self.knn_k.to_string()),
            ("lambda", self.bandwidths.lambda.to_string()),
            ("level", self.level.to_string()),
            ("max_depth", self.max_depth.to_string()),
            ("method", self.method.clone()),
            ("model_dir", path(&self.model_dir)),
            ("n_episodes", self.n_episodes.to_string()),
            ("n_resamples", self.n_resamples.to_string()),
            ("n_rollouts", self.n_rollouts.to_string()),
            ("noise_scale", self.noise_scale.to_string()),
            ("out_dir", path(&self.out_dir)),
            ("p_severe", self.p_severe.to_string()),
            ("seed", self.seed.map(|s| s.to_string()).unwrap_or_default()),
        ];
        let mut out = String::new();
        for (k, v) in pairs {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    pub fn hash(&self) -> String {
        format!("{:016x}", fnv1a64(self.canonical().as_bytes()))
    }
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).map_err(|e| VentError::io(path.display().to_string(), e))?;
    Ok(format!("{:016x}", fnv1a64(&bytes)))
}

/// What a command consumed and produced. Written alongside the outputs as
/// `manifest_<command>.json`; deliberately free of timestamps and host
/// details so a rerun yields identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub versions: BTreeMap<String, String>,
    /// Input path -> content hash.
    pub inputs: BTreeMap<String, String>,
    /// Output path -> content hash, filled after the files are written.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig) -> Manifest {
        let mut versions = BTreeMap::new();
        versions.insert("venteval".into(), env!("CARGO_PKG_VERSION").into());
        Manifest {
            command: command.to_string(),
            config_hash: config.hash(),
            seed: config.seed,
            versions,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), hash_file(path)?);
        Ok(())
    }

    /// Record a whole cohort directory (its two CSV files) as inputs.
    pub fn add_input_dir(&mut self, dir: &Path) -> Result<()> {
        for file in [crate::ingest::csvio::STATIC_CSV, crate::ingest::csvio::STEPS_CSV] {
            let path = dir.join(file);
            if path.exists() {
                self.add_input(&path)?;
            }
        }
        Ok(())
    }

    /// Record a written cohort directory (its two CSV files) as outputs.
    pub fn add_output_dir(&mut self, dir: &Path) -> Result<()> {
        for file in [crate::ingest::csvio::STATIC_CSV, crate::ingest::csvio::STEPS_CSV] {
            let path = dir.join(file);
            if path.exists() {
                self.add_output(&path)?;
            }
        }
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) -> Result<()> {
        self.outputs.insert(path.display().to_string(), hash_file(path)?);
        Ok(())
    }

    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let name = format!("manifest_{}.json", self.command.replace(' ', "_"));
        let path = out_dir.join(name);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).map_err(|e| VentError::io(path.display().to_string(), e))?;
        Ok(path)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| VentError::io(parent.display().to_string(), e))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| VentError::io(path.display().to_string(), e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| VentError::io(path.display().to_string(), e))?;
    Ok(serde_json::from_str(&text)?)
}
