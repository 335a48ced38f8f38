//! Diagonal Gaussian action distributions.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `0.5 * ln(2π)`
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Per-state diagonal Gaussian over actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianHead {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl GaussianHead {
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if mean.len() != log_std.len() {
            return Err(Error::Config(format!(
                "gaussian head: mean has {} dims, log_std has {}",
                mean.len(),
                log_std.len()
            )));
        }
        Ok(Self { mean, log_std })
    }

    /// Unit-variance-per-dimension head centred at `mean`.
    pub fn standard(mean: Vec<f64>) -> Self {
        let log_std = vec![0.0; mean.len()];
        Self { mean, log_std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_prob(&self, action: &[f64]) -> Result<f64> {
        check_dim("log_prob", self.dim(), action.len())?;
        Ok(log_prob_row(&self.mean, &self.log_std, action))
    }

    pub fn entropy(&self) -> f64 {
        entropy_of(&self.log_std)
    }

    /// `a = μ + σ ⊙ z`, `z ~ N(0, I)` drawn from `rng`.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_std)
            .map(|(&m, &ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

fn check_dim(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Config(format!("{what}: expected {expected} dims, got {got}")));
    }
    Ok(())
}

/// `Σ_k −(a_k−μ_k)²/(2σ_k²) − log σ_k − ½ log 2π`
#[inline]
pub fn log_prob_row(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    let mut lp = 0.0;
    for k in 0..mean.len() {
        let z = (action[k] - mean[k]) * (-log_std[k]).exp();
        lp -= 0.5 * z * z + log_std[k] + HALF_LN_2PI;
    }
    lp
}

/// Writes `d log π / dμ` into `d_mean` and adds `d log π / d log σ` scaled by
/// `scale` into `d_log_std`; `d_mean` is scaled the same way.
#[inline]
pub fn log_prob_grad_row(
    mean: &[f64],
    log_std: &[f64],
    action: &[f64],
    scale: f64,
    d_mean: &mut [f64],
    d_log_std: &mut [f64],
) {
    for k in 0..mean.len() {
        let inv_var = (-2.0 * log_std[k]).exp();
        let diff = action[k] - mean[k];
        d_mean[k] += scale * diff * inv_var;
        d_log_std[k] += scale * (diff * diff * inv_var - 1.0);
    }
}

/// `Σ_k ½ log(2πe σ_k²)`
pub fn entropy_of(log_std: &[f64]) -> f64 {
    log_std.iter().map(|ls| HALF_LN_2PI + 0.5 + ls).sum()
}

/// Forward KL(p ‖ q) between diagonal Gaussians, in nats.
pub fn kl_gaussian(p: &GaussianHead, q: &GaussianHead) -> Result<f64> {
    check_dim("kl_gaussian", p.dim(), q.dim())?;
    Ok(kl_rows(&p.mean, &p.log_std, &q.mean, &q.log_std))
}

#[inline]
pub fn kl_rows(p_mean: &[f64], p_log_std: &[f64], q_mean: &[f64], q_log_std: &[f64]) -> f64 {
    let mut kl = 0.0;
    for k in 0..p_mean.len() {
        let var_ratio = (2.0 * (p_log_std[k] - q_log_std[k])).exp();
        let dm = (p_mean[k] - q_mean[k]) * (-q_log_std[k]).exp();
        kl += q_log_std[k] - p_log_std[k] + 0.5 * (var_ratio + dm * dm) - 0.5;
    }
    kl.max(0.0)
}
