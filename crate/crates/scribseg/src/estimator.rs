//! EM estimation of the class mixture ratio vector over unlabeled
//! pixels: posterior adaptation (E-step), responsibility averaging
//! (M-step), and the surrogate marginal log-likelihood that certifies
//! monotone progress.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scribblegen::ScribbleStats;

/// Labeled class frequencies are floored at this value before division,
/// guarding against near-zero background frequencies pre-occlusion.
pub const FREQ_FLOOR: f64 = 1e-6;

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 100;

/// Predicted posteriors of the unlabeled pixels plus the empirical
/// labeled class frequencies.
#[derive(Debug, Clone)]
pub struct PosteriorBatch {
    /// Row-major n_u x m predicted posteriors, each row on the simplex.
    pub posteriors: Vec<f64>,
    pub m: usize,
    /// Empirical class frequency on labeled pixels (floored on use).
    pub labeled_frequency: Vec<f64>,
}

impl PosteriorBatch {
    pub fn new(posteriors: Vec<f64>, m: usize, labeled_frequency: Vec<f64>) -> Result<Self> {
        if m == 0 || !posteriors.len().is_multiple_of(m) || labeled_frequency.len() != m {
            return Err(Error::ShapeMismatch);
        }
        for (i, row) in posteriors.chunks_exact(m).enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < 0.0) {
                return Err(Error::InvalidSimplex { index: i });
            }
        }
        Ok(Self {
            posteriors,
            m,
            labeled_frequency,
        })
    }

    pub fn n_unlabeled(&self) -> usize {
        self.posteriors.len() / self.m
    }

    fn floored_frequency(&self) -> Vec<f64> {
        self.labeled_frequency
            .iter()
            .map(|&f| f.max(FREQ_FLOOR))
            .collect()
    }
}

/// Estimated mixture ratio with its EM trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiEstimate {
    pub pi: Vec<f64>,
    pub iterations: usize,
    /// Surrogate log-likelihood after each iteration (index 0 is the
    /// likelihood of the initial pi).
    pub trace: Vec<f64>,
    pub converged: bool,
}

/// pi^0 from labeled class frequencies: pi_k = n_l^k / n_l. Every class
/// must have at least one labeled pixel.
pub fn init_pi(stats: &ScribbleStats) -> Result<Vec<f64>> {
    let total = stats.total_labeled();
    if let Some(k) = stats.labeled_per_class.iter().position(|&n| n == 0) {
        return Err(Error::ClassUnobserved { class: k });
    }
    Ok(stats
        .labeled_per_class
        .iter()
        .map(|&n| n as f64 / total as f64)
        .collect())
}

/// E-step: adapted posterior
/// p_u(c_k|x_i) = pi_k p_l(c_k|x_i)/p_l(c_k) / sum_j pi_j p_l(c_j|x_i)/p_l(c_j).
pub fn adapt_posterior(batch: &PosteriorBatch, pi: &[f64]) -> Result<Vec<f64>> {
    let m = batch.m;
    let freq = batch.floored_frequency();
    let ratio: Vec<f64> = pi.iter().zip(&freq).map(|(&p, &f)| p / f).collect();
    let mut out = vec![0.0; batch.posteriors.len()];
    for (i, row) in batch.posteriors.chunks_exact(m).enumerate() {
        let denom: f64 = row.iter().zip(&ratio).map(|(&p, &r)| p * r).sum();
        if denom <= 0.0 {
            return Err(Error::DegeneratePosterior { index: i });
        }
        for k in 0..m {
            out[i * m + k] = row[k] * ratio[k] / denom;
        }
    }
    Ok(out)
}

/// M-step: average the adapted responsibilities over unlabeled pixels.
pub fn em_step(batch: &PosteriorBatch, pi: &[f64]) -> Result<Vec<f64>> {
    let adapted = adapt_posterior(batch, pi)?;
    let m = batch.m;
    let n_u = batch.n_unlabeled();
    let mut next = vec![0.0; m];
    for row in adapted.chunks_exact(m) {
        for k in 0..m {
            next[k] += row[k];
        }
    }
    for v in &mut next {
        *v /= n_u as f64;
    }
    Ok(next)
}

/// Surrogate marginal log-likelihood
/// l(pi) = sum_i log sum_k pi_k p_l(c_k|x_i)/p_l(c_k).
pub fn surrogate_log_likelihood(batch: &PosteriorBatch, pi: &[f64]) -> f64 {
    let freq = batch.floored_frequency();
    let ratio: Vec<f64> = pi.iter().zip(&freq).map(|(&p, &f)| p / f).collect();
    batch
        .posteriors
        .chunks_exact(batch.m)
        .map(|row| {
            row.iter()
                .zip(&ratio)
                .map(|(&p, &r)| p * r)
                .sum::<f64>()
                .max(1e-300)
                .ln()
        })
        .sum()
}

/// Iterate the EM steps until the L-inf change drops below `tol` or
/// `max_iter` is reached. The trace records the surrogate
/// log-likelihood per iteration and is non-decreasing within 1e-9.
pub fn estimate_pi(
    batch: &PosteriorBatch,
    pi0: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<PiEstimate> {
    assert!(tol > 0.0, "tolerance must be positive");
    let mut pi = pi0.to_vec();
    let mut trace = vec![surrogate_log_likelihood(batch, &pi)];
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..max_iter {
        let next = em_step(batch, &pi)?;
        iterations += 1;
        let delta = pi
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        pi = next;
        trace.push(surrogate_log_likelihood(batch, &pi));
        if delta < tol {
            converged = true;
            break;
        }
    }
    Ok(PiEstimate {
        pi,
        iterations,
        trace,
        converged,
    })
}
