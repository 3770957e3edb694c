//! Percentile bootstrap over per-episode statistics.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VentError};
use crate::ingest::quantile_sorted;
use crate::rng::{derive_seed, rng_from};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub n_resamples: usize,
    /// Nominal coverage of the interval, e.g. 0.95.
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig { n_resamples: 1000, level: 0.95, seed: 0 }
    }
}

/// Percentile interval for the mean of `stats`, resampling whole episodes.
/// Each resample draws its generator from (seed, resample index), so the
/// parallel computation is bit-identical to a serial one.
pub fn bootstrap_ci(stats: &[f64], cfg: &BootstrapConfig) -> Result<(f64, f64)> {
    if stats.len() < 2 {
        return Err(VentError::data(format!(
            "bootstrap needs at least 2 episode statistics, got {}",
            stats.len()
        )));
    }
    if cfg.n_resamples < 100 {
        return Err(VentError::invalid("bootstrap needs at least 100 resamples"));
    }
    if !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(VentError::invalid("bootstrap level must lie in (0,1)"));
    }
    if stats.iter().any(|v| !v.is_finite()) {
        return Err(VentError::numeric("non-finite episode statistic in bootstrap input"));
    }

    let n = stats.len();
    let mut means: Vec<f64> = (0..cfg.n_resamples)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng_from(derive_seed(cfg.seed, b as u64));
            let mut total = 0.0;
            for _ in 0..n {
                total += stats[rng.gen_range(0..n)];
            }
            total / n as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - cfg.level) / 2.0;
    Ok((quantile_sorted(&means, tail), quantile_sorted(&means, 1.0 - tail)))
}
