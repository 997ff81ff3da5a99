//! The s-step extragradient operator and its fixed point.
//!
//! `R_0 = P(u)`, `R_{s+1} = P(u - gamma F(R_s))` where `P` is projection
//! onto the feasible set. For `gamma L < 1` the recursion contracts toward
//! the unique fixed point `R = P(u - gamma F(R))`.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{invalid, precondition, Error, Result};
use crate::geometry::FeasibleSet;
use crate::linalg::dist;
use crate::problems::Operator;

/// Default residual tolerance for [`eg_fixed_point`].
pub const DEFAULT_TOL: f64 = 1e-10;
/// Iteration cap for [`eg_fixed_point`].
pub const MAX_ITERATIONS: usize = 1_000_000;

fn step<F: Operator + ?Sized>(f: &F, set: &FeasibleSet, gamma: f64, u: &[f64], r: &[f64]) -> Vec<f64> {
    let g = f.eval(r);
    let mut p: Vec<f64> = u.iter().zip(&g).map(|(ui, gi)| ui - gamma * gi).collect();
    set.project_in_place(&mut p);
    p
}

/// `R_s(gamma F; u)`.
pub fn eg_iterate<F: Operator + ?Sized>(f: &F, set: &FeasibleSet, gamma: f64, u: &[f64], s: usize) -> Result<Vec<f64>> {
    if !(gamma >= 0.0) {
        return Err(invalid(format!("stepsize must be nonnegative, got {gamma}")));
    }
    let mut r = set.project(u)?;
    for _ in 0..s {
        r = step(f, set, gamma, u, &r);
    }
    Ok(r)
}

/// Fixed point `R(gamma F; u)` to residual `tol`.
///
/// `lipschitz` is the Lipschitz constant of `F`. Iteration stops once the
/// increment is at most `tol (1 - gamma L) / (gamma L)`, which bounds both
/// the residual and the distance to the fixed point by `tol`.
pub fn eg_fixed_point<F: Operator + ?Sized>(
    f: &F,
    set: &FeasibleSet,
    gamma: f64,
    lipschitz: f64,
    u: &[f64],
    tol: f64,
) -> Result<Vec<f64>> {
    if !(gamma >= 0.0) || !(lipschitz >= 0.0) {
        return Err(invalid("stepsize and Lipschitz constant must be nonnegative"));
    }
    if !(tol > 0.0) {
        return Err(invalid("tolerance must be positive"));
    }
    let q = gamma * lipschitz;
    if q >= 1.0 {
        return Err(precondition(format!("fixed point needs gamma L < 1, got {q}")));
    }
    let mut r = set.project(u)?;
    if q == 0.0 {
        // the map is constant in R: one step lands on the fixed point
        return Ok(step(f, set, gamma, u, &r));
    }
    let threshold = tol * (1.0 - q) / q;
    for _ in 0..MAX_ITERATIONS {
        let next = step(f, set, gamma, u, &r);
        let inc = dist(&next, &r);
        r = next;
        if inc <= threshold {
            return Ok(r);
        }
    }
    Err(Error::SolverFailure(format!(
        "extragradient fixed point did not reach tolerance {tol} within {MAX_ITERATIONS} iterations (gamma L = {q})"
    )))
}
