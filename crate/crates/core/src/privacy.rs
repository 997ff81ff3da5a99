//! Gaussian-mechanism calibration and composition rules.

use alloc::format;
use alloc::string::String;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// An `(epsilon, eta)` differential-privacy budget.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub eta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, eta: f64) -> Result<Self> {
        let b = PrivacyBudget { epsilon, eta };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(invalid(format!("epsilon must be positive and finite, got {}", self.epsilon)));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(invalid(format!("eta must lie in (0, 1), got {}", self.eta)));
        }
        Ok(())
    }

    /// `ln(1/eta)`
    pub fn log_inv_eta(&self) -> f64 {
        -libm::log(self.eta)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Gaussian,
    Subsampled,
    Parallel,
}

/// Result of a calibration, suitable for printing as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub mechanism: Mechanism,
    pub sensitivity: Option<f64>,
    /// Per-step noise variance (absent for pure composition queries).
    pub sigma_sq: Option<f64>,
    pub composition: String,
    pub budget: PrivacyBudget,
    pub steps: Option<usize>,
    pub batch: Option<usize>,
    pub n: Option<usize>,
    /// Whether the subsampling regime condition holds.
    pub regime_ok: Option<bool>,
}

/// Gaussian mechanism variance `2 s^2 ln(1/eta) / eps^2` for sensitivity `s`.
pub fn gaussian_sigma(sensitivity: f64, epsilon: f64, eta: f64) -> Result<f64> {
    let b = PrivacyBudget::new(epsilon, eta)?;
    if !(sensitivity >= 0.0 && sensitivity.is_finite()) {
        return Err(invalid(format!("sensitivity must be nonnegative, got {sensitivity}")));
    }
    Ok(2.0 * sensitivity * sensitivity * b.log_inv_eta() / (epsilon * epsilon))
}

/// Budget of mechanisms applied to disjoint parts of the data: the
/// coordinatewise maximum.
pub fn parallel_composition(budgets: &[PrivacyBudget]) -> Result<PrivacyBudget> {
    let first = budgets.first().ok_or_else(|| invalid("parallel composition needs at least one budget"))?;
    let mut out = *first;
    for b in budgets {
        b.validate()?;
        out.epsilon = out.epsilon.max(b.epsilon);
        out.eta = out.eta.max(b.eta);
    }
    Ok(out)
}

/// Noise scale for `steps` adaptive Gaussian steps, each on a uniformly
/// random subset of size `batch` out of `n` points.
///
/// Returns `(sigma, regime_ok)` with
/// `sigma = sqrt(2 K ln(1/eta)) s m / (n eps)` and
/// `regime_ok = eps < c1 K (m/n)^2`. The regime flag is reported, never
/// enforced.
pub fn subsampled_composition_sigma(
    steps: usize,
    sensitivity: f64,
    batch: usize,
    n: usize,
    epsilon: f64,
    eta: f64,
    c1: f64,
) -> Result<(f64, bool)> {
    let b = PrivacyBudget::new(epsilon, eta)?;
    if steps == 0 {
        return Err(invalid("composition needs at least one step"));
    }
    if batch == 0 || batch > n {
        return Err(invalid(format!("batch size must satisfy 1 <= m <= n, got m = {batch}, n = {n}")));
    }
    if !(sensitivity >= 0.0 && sensitivity.is_finite()) {
        return Err(invalid(format!("sensitivity must be nonnegative, got {sensitivity}")));
    }
    if !(c1 > 0.0) {
        return Err(invalid("regime constant c1 must be positive"));
    }
    let k = steps as f64;
    let q = batch as f64 / n as f64;
    let sigma = libm::sqrt(2.0 * k * b.log_inv_eta()) * sensitivity * q / epsilon;
    Ok((sigma, epsilon < c1 * k * q * q))
}
