//! Propensity scoring: an L2-regularized logistic regression fitted on the
//! ten "type" features at the initial time step, predicting 90-day
//! mortality. The predicted probability is the per-episode scalar z.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VentError};
use crate::schema::N_TYPE_FEATURES;

/// Default L2 weight (selected offline by cross-validated log-loss).
pub const DEFAULT_L2: f64 = 1e-4;
/// Optimization stops when the gradient sup-norm falls below this.
pub const GRAD_TOL: f64 = 1e-8;
const MAX_ITERS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMeta {
    pub n_rows: usize,
    pub n_iters: usize,
    pub final_loss: f64,
    pub grad_norm: f64,
}

/// Fitted logistic model; weights live in z-scored feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub l2: f64,
    pub meta: FitMeta,
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable log(1 + e^t).
fn log1p_exp(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

struct Standardized {
    x: DMatrix<f64>,
    mean: Vec<f64>,
    std: Vec<f64>,
}

/// Z-score columns; constant columns get std 1 so they standardize to zero
/// and stay inert under the L2 penalty.
fn standardize(rows: &[[f64; N_TYPE_FEATURES]]) -> Standardized {
    let n = rows.len();
    let d = N_TYPE_FEATURES;
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for j in 0..d {
        let m = rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let var = rows.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n as f64;
        mean[j] = m;
        std[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
    }
    let x = DMatrix::from_fn(n, d, |i, j| (rows[i][j] - mean[j]) / std[j]);
    Standardized { x, mean, std }
}

/// Penalized negative log-likelihood (intercept unpenalized), averaged
/// over rows.
fn loss(x: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>, b: f64, l2: f64) -> f64 {
    let n = x.nrows() as f64;
    let eta = x * w;
    let mut nll = 0.0;
    for i in 0..x.nrows() {
        let t = eta[i] + b;
        nll += log1p_exp(t) - y[i] * t;
    }
    nll / n + 0.5 * l2 * w.dot(w)
}

/// Fit by damped Newton iterations with backtracking line search.
pub fn fit_logistic(rows: &[([f64; N_TYPE_FEATURES], bool)], l2: f64) -> Result<LogisticModel> {
    if rows.len() < 2 {
        return Err(VentError::data("logistic fit needs at least 2 rows"));
    }
    if l2 < 0.0 {
        return Err(VentError::invalid("l2 must be non-negative"));
    }
    let n_pos = rows.iter().filter(|(_, y)| *y).count();
    if n_pos == 0 || n_pos == rows.len() {
        return Err(VentError::data("logistic fit needs both outcome classes present"));
    }
    let features: Vec<[f64; N_TYPE_FEATURES]> = rows.iter().map(|(x, _)| *x).collect();
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(VentError::data("non-finite feature in logistic fit"));
    }
    let Standardized { x, mean, std } = standardize(&features);
    let y = DVector::from_iterator(
        rows.len(),
        rows.iter().map(|(_, y)| if *y { 1.0 } else { 0.0 }),
    );

    let n = rows.len();
    let d = N_TYPE_FEATURES;
    let mut w = DVector::zeros(d);
    let mut b = 0.0;
    let mut cur_loss = loss(&x, &y, &w, b, l2);
    let mut n_iters = 0;
    let mut grad_norm = f64::INFINITY;

    for iter in 0..MAX_ITERS {
        n_iters = iter;
        // Gradient over [w; b].
        let eta = &x * &w;
        let p = DVector::from_fn(n, |i, _| sigmoid(eta[i] + b));
        let resid = &p - &y;
        let mut g = DVector::zeros(d + 1);
        let gw = x.transpose() * &resid / n as f64 + &w * l2;
        for j in 0..d {
            g[j] = gw[j];
        }
        g[d] = resid.sum() / n as f64;
        grad_norm = g.amax();
        if grad_norm <= GRAD_TOL {
            break;
        }

        // Hessian with a small ridge floor so the Cholesky never fails on
        // degenerate data.
        let s = DVector::from_fn(n, |i, _| p[i] * (1.0 - p[i]));
        let mut h = DMatrix::zeros(d + 1, d + 1);
        let xs = DMatrix::from_fn(n, d, |i, j| x[(i, j)] * s[i]);
        let hw = x.transpose() * &xs / n as f64;
        for a in 0..d {
            for c in 0..d {
                h[(a, c)] = hw[(a, c)];
            }
            h[(a, a)] += l2;
            let cross = xs.column(a).sum() / n as f64;
            h[(a, d)] = cross;
            h[(d, a)] = cross;
        }
        h[(d, d)] = s.sum() / n as f64;
        for a in 0..=d {
            h[(a, a)] += 1e-10;
        }

        let step = match h.clone().cholesky() {
            Some(ch) => ch.solve(&(-&g)),
            None => -&g,
        };

        // Backtracking on the Armijo condition.
        let dir_dot = g.dot(&step);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..50 {
            let w_new = &w + &step.rows(0, d) * t;
            let b_new = b + t * step[d];
            let l_new = loss(&x, &y, &w_new, b_new, l2);
            if l_new <= cur_loss + 1e-4 * t * dir_dot {
                w = w_new;
                b = b_new;
                cur_loss = l_new;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }

    Ok(LogisticModel {
        weights: w.iter().copied().collect(),
        intercept: b,
        mean,
        std,
        l2,
        meta: FitMeta { n_rows: n, n_iters, final_loss: cur_loss, grad_norm },
    })
}

impl LogisticModel {
    /// Propensity score for one feature vector: sigmoid of the
    /// standardized linear predictor.
    pub fn predict(&self, x: &[f64; N_TYPE_FEATURES]) -> Result<f64> {
        let mut t = self.intercept;
        for j in 0..N_TYPE_FEATURES {
            if !x[j].is_finite() {
                return Err(VentError::data(format!(
                    "non-finite type feature at index {j}"
                )));
            }
            t += self.weights[j] * (x[j] - self.mean[j]) / self.std[j];
        }
        Ok(sigmoid(t))
    }
}

/// Area under the ROC curve by the Mann-Whitney statistic: the fraction
/// of (positive, negative) pairs the score orders correctly, with ties
/// counting 1/2. Needs both classes present.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(VentError::invalid("roc_auc: scores and labels differ in length"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(VentError::data("roc_auc: non-finite score"));
    }
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(VentError::data("roc_auc needs both classes present"));
    }
    // Midranks over the pooled sample, then the rank-sum formula; O(n log n)
    // instead of comparing every pair.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut rank = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share the midrank.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            rank[k] = mid;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 =
        labels.iter().zip(&rank).filter(|(&y, _)| y).map(|(_, r)| r).sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}
