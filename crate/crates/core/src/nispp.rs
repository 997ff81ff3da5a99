//! Noisy inexact stochastic proximal point.
//!
//! Iteration `k` draws a batch `B_{k+1}`, computes a certified
//! `nu`-approximate solution `u_{k+1}` of the regularized problem with
//! operator `F_B(.) + lambda_k (. - w_k)`, and perturbs it,
//! `w_{k+1} = u_{k+1} + xi_{k+1}`. The perturbed points are not projected;
//! the output is the projection of their `gamma`-weighted average.
//!
//! The regularized subproblems are solved by operator extrapolation (OE),
//! a linearly convergent method for strongly monotone operators.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, precondition, Error, Result};
use crate::geometry::FeasibleSet;
use crate::linalg::{axpy, dot};
use crate::nseg::SamplingMode;
use crate::privacy::PrivacyBudget;
use crate::problems::{Constants, Dataset, Operator, ProblemInstance};
use crate::rng;
use crate::schedule::Schedule;

/// Operator extrapolation on `F_k = F_base + lambda (. - w_k)`.
///
/// Starts from `z_0 = z_1 = w_k` and iterates
/// `z_{t+1} = P(z_t - [F_k(z_t) + (F_k(z_t) - F_k(z_{t-1}))/kappa] / (2(L + lambda)))`
/// with `kappa = lambda/(L + lambda) + 1`. The solver keeps its state so a
/// caller can continue iterating after a failed certificate.
pub struct OeSolver<'a, F: Operator + ?Sized> {
    base: &'a F,
    set: &'a FeasibleSet,
    anchor: Vec<f64>,
    lambda: f64,
    step: f64,
    inv_kappa: f64,
    z: Vec<f64>,
    fz: Vec<f64>,
    fz_prev: Vec<f64>,
    iterations: usize,
}

impl<'a, F: Operator + ?Sized> OeSolver<'a, F> {
    pub fn new(base: &'a F, set: &'a FeasibleSet, anchor: &[f64], lambda: f64, lipschitz: f64) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(invalid(format!("regularization must be positive, got {lambda}")));
        }
        if !(lipschitz >= 0.0) {
            return Err(invalid("Lipschitz constant must be nonnegative"));
        }
        if anchor.len() != set.dim() {
            return Err(invalid("anchor point has the wrong dimension"));
        }
        let mu = lipschitz + lambda;
        let kappa = lambda / mu + 1.0;
        let mut s = OeSolver {
            base,
            set,
            anchor: anchor.to_vec(),
            lambda,
            step: 1.0 / (2.0 * mu),
            inv_kappa: 1.0 / kappa,
            z: anchor.to_vec(),
            fz: Vec::new(),
            fz_prev: Vec::new(),
            iterations: 0,
        };
        s.fz = s.regularized(&s.z);
        s.fz_prev = s.fz.clone();
        Ok(s)
    }

    fn regularized(&self, z: &[f64]) -> Vec<f64> {
        let mut g = self.base.eval(z);
        for ((gi, zi), wi) in g.iter_mut().zip(z).zip(&self.anchor) {
            *gi += self.lambda * (zi - wi);
        }
        g
    }

    /// Runs `steps` more iterations.
    pub fn advance(&mut self, steps: usize) {
        for _ in 0..steps {
            let mut next: Vec<f64> = self
                .z
                .iter()
                .zip(self.fz.iter().zip(&self.fz_prev))
                .map(|(zi, (f, fp))| zi - self.step * (f + self.inv_kappa * (f - fp)))
                .collect();
            self.set.project_in_place(&mut next);
            let f_next = self.regularized(&next);
            self.fz_prev = core::mem::replace(&mut self.fz, f_next);
            self.z = next;
            self.iterations += 1;
        }
    }

    /// Current iterate.
    pub fn point(&self) -> &[f64] {
        &self.z
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }
}

/// Last OE iterate after `t_inner` iterations started from `z_0 = z_1 = w_k`.
pub fn oe_solve<F: Operator + ?Sized>(
    base: &F,
    anchor: &[f64],
    lambda: f64,
    lipschitz: f64,
    set: &FeasibleSet,
    t_inner: usize,
) -> Result<Vec<f64>> {
    if t_inner == 0 {
        return Err(invalid("at least one inner iteration is required"));
    }
    let mut s = OeSolver::new(base, set, anchor, lambda, lipschitz)?;
    s.advance(t_inner);
    Ok(s.z)
}

/// OE iterations sufficient for accuracy `nu` by the linear rate:
/// `ceil(2 kappa ln((L D^2 + M D + 2 lambda D^2) / nu))`, at least 1.
pub fn oe_iteration_count(lipschitz: f64, lambda: f64, m: f64, d: f64, nu: f64) -> usize {
    let kappa = lambda / (lipschitz + lambda) + 1.0;
    let arg = (lipschitz * d * d + m * d + 2.0 * lambda * d * d) / nu;
    let t = libm::ceil(2.0 * kappa * libm::log(arg));
    if t.is_finite() && t >= 1.0 {
        t as usize
    } else {
        1
    }
}

/// Certified accuracy of an approximate regularized solution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxCertificate {
    /// `max_w <g, u - w>` with `g = F(u) + lambda (u - w_k)`.
    pub nu_actual: f64,
    pub inner_iterations: usize,
}

/// Exact accuracy `<g, u> - min_W <g, w>` of `u` for the regularized problem
/// of `op` anchored at `anchor`.
pub fn certify_prox<F: Operator + ?Sized>(
    op: &F,
    set: &FeasibleSet,
    u: &[f64],
    anchor: &[f64],
    lambda: f64,
) -> Result<f64> {
    if u.len() != set.dim() || anchor.len() != set.dim() {
        return Err(invalid("certificate arguments have the wrong dimension"));
    }
    let tol = 1e-9 * (1.0 + set.max_norm());
    if set.dist(u)? > tol {
        return Err(invalid("certificate point is not feasible"));
    }
    let mut g = op.eval(u);
    for ((gi, ui), wi) in g.iter_mut().zip(u).zip(anchor) {
        *gi += lambda * (ui - wi);
    }
    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
    let (_, sup) = set.support_max_unchecked(&neg);
    Ok((dot(&g, u) + sup).max(0.0))
}

/// [`certify_prox`] for the batch operator of `batch` (indices into `data`).
pub fn certify_prox_solution(
    instance: &ProblemInstance,
    data: &Dataset,
    batch: &[usize],
    u: &[f64],
    anchor: &[f64],
    lambda: f64,
) -> Result<ProxCertificate> {
    let op = instance.operator(data.batch_payload(batch)?);
    let nu_actual = certify_prox(&op, &instance.set, u, anchor, lambda)?;
    Ok(ProxCertificate { nu_actual, inner_iterations: 0 })
}

/// Inner-solver budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerControls {
    /// First certification point; the linear-rate count when absent.
    #[serde(default)]
    pub initial_iterations: Option<usize>,
    /// The budget doubles until it reaches this multiple of the first
    /// certification point.
    #[serde(default = "default_growth")]
    pub max_growth: usize,
}

fn default_growth() -> usize {
    4
}

impl Default for InnerControls {
    fn default() -> Self {
        InnerControls { initial_iterations: None, max_growth: default_growth() }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NisppConfig {
    /// `K`; the method runs outer steps `k = 0, ..., K`.
    pub iterations: usize,
    /// Averaging weights `gamma_k`.
    pub weights: Schedule<f64>,
    /// Regularization strengths `lambda_k`.
    pub regularization: Schedule<f64>,
    pub batch_size: usize,
    /// Subproblem accuracy `nu`.
    pub accuracy: f64,
    /// Noise variances `sigma_{k+1}^2`.
    pub noise_variances: Schedule<f64>,
    pub sampling_mode: SamplingMode,
    pub seed: u64,
    #[serde(default)]
    pub inner: InnerControls,
    #[serde(default)]
    pub start: Option<Vec<f64>>,
    #[serde(default = "default_true")]
    pub record: bool,
}

impl NisppConfig {
    pub fn steps(&self) -> usize {
        self.iterations + 1
    }

    pub fn validate(&self, instance: &ProblemInstance, n: usize) -> Result<()> {
        let k = self.steps();
        self.weights.check_len(k, "weight")?;
        self.regularization.check_len(k, "regularization")?;
        self.noise_variances.check_len(k, "noise variance")?;
        if !self.weights.all(k, |g| g > 0.0 && g.is_finite()) {
            return Err(invalid("weights must be positive and finite"));
        }
        if !self.regularization.all(k, |l| l > 0.0 && l.is_finite()) {
            return Err(invalid("regularization must be positive and finite"));
        }
        if !self.noise_variances.all(k, |s| s >= 0.0 && s.is_finite()) {
            return Err(invalid("noise variances must be finite and nonnegative"));
        }
        if !(self.accuracy >= 0.0 && self.accuracy.is_finite()) {
            return Err(invalid("accuracy must be finite and nonnegative"));
        }
        if self.batch_size == 0 || self.batch_size > n {
            return Err(invalid(format!("batch size must satisfy 1 <= B <= n = {n}")));
        }
        let product = self.weights.at(0) * self.regularization.at(0);
        if (0..k).any(|j| {
            let p = self.weights.at(j) * self.regularization.at(j);
            (p - product).abs() > 1e-12 * product
        }) {
            return Err(precondition("gamma_k lambda_k must be constant across iterations"));
        }
        match self.sampling_mode {
            SamplingMode::DisjointSinglePass => {
                if k * self.batch_size > n {
                    return Err(invalid(format!(
                        "single-pass schedule needs {} datapoints, dataset has {n}",
                        k * self.batch_size
                    )));
                }
            }
            SamplingMode::WithReplacement => {}
            SamplingMode::FullBatch => {
                return Err(invalid("proximal point sampling is disjoint_single_pass or with_replacement"));
            }
        }
        if self.inner.max_growth == 0 {
            return Err(invalid("inner growth factor must be at least 1"));
        }
        if let Some(s) = &self.start {
            if s.len() != instance.dim() {
                return Err(invalid("start point has the wrong dimension"));
            }
        }
        Ok(())
    }

    /// Whether `nu <= 2 M^2 / (lambda_k B^2)` holds at every step, the
    /// hypothesis of the update-sensitivity bound.
    pub fn satisfies_sensitivity_hypothesis(&self, m: f64) -> bool {
        let b = self.batch_size as f64;
        self.regularization.all(self.steps(), |l| self.accuracy <= 2.0 * m * m / (l * b * b) * (1.0 + 1e-12))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NisppStep {
    pub batch: Vec<usize>,
    pub u: Vec<f64>,
    /// `u + noise`, not projected.
    pub w: Vec<f64>,
    pub noise: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NisppTrajectory {
    pub start: Vec<f64>,
    /// Per-step records (empty unless recording was requested).
    pub steps: Vec<NisppStep>,
    /// One certificate per outer step, always kept.
    pub certificates: Vec<ProxCertificate>,
    /// Weighted average of the perturbed points before projection.
    pub average: Vec<f64>,
    pub output: Vec<f64>,
}

/// Runs the method on `data`.
///
/// Sampling and noise come from streams of `cfg.seed`; runs on neighboring
/// datasets with the same configuration share every draw.
pub fn nispp_run(instance: &ProblemInstance, data: &Dataset, cfg: &NisppConfig) -> Result<NisppTrajectory> {
    cfg.validate(instance, data.n())?;
    instance.check_payload(&data.points()[0])?;
    let d = instance.dim();
    let set = &instance.set;
    let Constants { m, l, d: diam } = instance.constants;
    let start = match &cfg.start {
        Some(s) => set.project(s)?,
        None => set.project(&vec![0.0; d])?,
    };
    let mut sampling = rng::stream(cfg.seed, rng::SAMPLING);
    let mut noise_rng = rng::stream(cfg.seed, rng::NOISE_FIRST);
    let n = data.n();
    let b = cfg.batch_size;

    let mut w = start.clone();
    let mut acc = vec![0.0; d];
    let mut weight_sum = 0.0;
    let mut steps = Vec::new();
    let mut certificates = Vec::with_capacity(cfg.steps());
    for k in 0..cfg.steps() {
        let batch: Vec<usize> = match cfg.sampling_mode {
            SamplingMode::DisjointSinglePass => (k * b..(k + 1) * b).collect(),
            _ => rand::seq::index::sample(&mut sampling, n, b).into_vec(),
        };
        let op = instance.operator(data.batch_payload(&batch)?);
        let lambda = cfg.regularization.at(k);
        let (u, cert) = prox_step(&op, set, &w, lambda, l, m, diam, cfg.accuracy, &cfg.inner).map_err(|e| match e {
            Error::SolverFailure(msg) => Error::SolverFailure(format!("outer step {k}: {msg}")),
            other => other,
        })?;
        certificates.push(cert);
        let sigma = libm::sqrt(cfg.noise_variances.at(k));
        let noise: Vec<f64> = rng::standard_normal_vec(&mut noise_rng, d).into_iter().map(|z| sigma * z).collect();
        let w_next: Vec<f64> = u.iter().zip(&noise).map(|(a, b)| a + b).collect();
        let gamma = cfg.weights.at(k);
        axpy(gamma, &w_next, &mut acc);
        weight_sum += gamma;
        if cfg.record {
            steps.push(NisppStep { batch, u, w: w_next.clone(), noise });
        }
        w = w_next;
    }
    let average: Vec<f64> = acc.iter().map(|v| v / weight_sum).collect();
    let output = set.project(&average)?;
    Ok(NisppTrajectory { start, steps, certificates, average, output })
}

/// One certified proximal step from `anchor`.
///
/// Runs OE for the linear-rate count (or the configured count), certifies,
/// and doubles the budget up to `inner.max_growth` times the first count
/// before giving up.
#[allow(clippy::too_many_arguments)]
pub fn prox_step<F: Operator + ?Sized>(
    op: &F,
    set: &FeasibleSet,
    anchor: &[f64],
    lambda: f64,
    lipschitz: f64,
    m: f64,
    diam: f64,
    nu: f64,
    inner: &InnerControls,
) -> Result<(Vec<f64>, ProxCertificate)> {
    let first = inner
        .initial_iterations
        .unwrap_or_else(|| oe_iteration_count(lipschitz, lambda, m, diam, nu.max(f64::MIN_POSITIVE)))
        .max(1);
    let mut solver = OeSolver::new(op, set, anchor, lambda, lipschitz)?;
    let mut budget = first;
    let mut last;
    loop {
        solver.advance(budget - solver.iterations());
        last = certify_prox(op, set, solver.point(), anchor, lambda)?;
        if last <= nu {
            let cert = ProxCertificate { nu_actual: last, inner_iterations: solver.iterations() };
            return Ok((solver.point().to_vec(), cert));
        }
        if budget >= first * inner.max_growth {
            break;
        }
        budget = (budget * 2).min(first * inner.max_growth);
    }
    Err(Error::SolverFailure(format!(
        "inner solver reached accuracy {last:e} > target {nu:e} after {} iterations",
        solver.iterations()
    )))
}

/// Update sensitivity `4 M / (lambda B)`; requires `nu <= 2 M^2/(lambda B^2)`.
pub fn nispp_sensitivity_bound(m: f64, lambda: f64, batch: usize, nu: f64) -> Result<f64> {
    if batch == 0 || !(lambda > 0.0) {
        return Err(invalid("need lambda > 0 and B >= 1"));
    }
    let b = batch as f64;
    if nu > 2.0 * m * m / (lambda * b * b) * (1.0 + 1e-12) {
        return Err(precondition(format!(
            "accuracy {nu} exceeds 2 M^2/(lambda B^2) = {}",
            2.0 * m * m / (lambda * b * b)
        )));
    }
    Ok(4.0 * m / (lambda * b))
}

/// Noise variance `32 M^2 ln(1/eta) / (lambda^2 B^2 eps^2)`.
pub fn nispp_noise_for_privacy(m: f64, lambda: f64, batch: usize, epsilon: f64, eta: f64) -> Result<f64> {
    let budget = PrivacyBudget::new(epsilon, eta)?;
    if batch == 0 || !(lambda > 0.0) {
        return Err(invalid("need lambda > 0 and B >= 1"));
    }
    let b = batch as f64;
    Ok(32.0 * m * m * budget.log_inv_eta() / (lambda * lambda * b * b * epsilon * epsilon))
}

fn privacy_root(dim: usize, budget: Option<&PrivacyBudget>) -> Result<f64> {
    match budget {
        Some(b) => {
            b.validate()?;
            Ok(libm::sqrt(dim as f64 * b.log_inv_eta()) / b.epsilon)
        }
        None => Ok(0.0),
    }
}

/// Largest `b` with `b^3 <= n`.
fn icbrt(n: usize) -> usize {
    let mut b = libm::cbrt(n as f64) as usize;
    while (b + 1).pow(3) <= n {
        b += 1;
    }
    while b > 0 && b.pow(3) > n {
        b -= 1;
    }
    b
}

/// Single-pass policy: `B = floor(n^(1/3))`, `K = floor(n/B) - 1`,
/// `gamma_k = 1`, `lambda_0 = max(M/D, L) max(n^(1/3), sqrt(d ln(1/eta))/eps)`,
/// `nu = 2 M^2/(lambda_0 B^2)`, noise from [`nispp_noise_for_privacy`].
pub fn nispp_single_pass_policy(
    n: usize,
    dim: usize,
    budget: Option<&PrivacyBudget>,
    c: Constants,
) -> Result<NisppConfig> {
    if n < 8 {
        return Err(invalid("single-pass policy needs n >= 8"));
    }
    let b = icbrt(n).max(1);
    let k = (n / b).saturating_sub(1);
    if k < 1 {
        return Err(invalid(format!("n = {n} leaves no outer iteration for batch size {b}")));
    }
    let lambda = (c.m / c.d).max(c.l) * libm::cbrt(n as f64).max(privacy_root(dim, budget)?);
    let bf = b as f64;
    let nu = 2.0 * c.m * c.m / (lambda * bf * bf);
    let sigma_sq = match budget {
        Some(bud) => nispp_noise_for_privacy(c.m, lambda, b, bud.epsilon, bud.eta)?,
        None => 0.0,
    };
    Ok(NisppConfig {
        iterations: k,
        weights: Schedule::Constant(1.0),
        regularization: Schedule::Constant(lambda),
        batch_size: b,
        accuracy: nu,
        noise_variances: Schedule::Constant(sigma_sq),
        sampling_mode: SamplingMode::DisjointSinglePass,
        seed: 0,
        inner: InnerControls::default(),
        start: None,
        record: true,
    })
}

/// Multipass policy with random batches: `gamma_k = 1`,
/// `lambda_0 = max(M/D, L) max(sqrt(n), sqrt(d ln(1/eta))/eps)`,
/// `B = floor(sqrt(n))`, `K = n`, `nu = M^2/(lambda_0 n^2)`,
/// `sigma = 8 M sqrt(ln(1/eta)) / (B lambda_0 eps)`.
pub fn nispp_multipass_policy(
    n: usize,
    dim: usize,
    budget: Option<&PrivacyBudget>,
    c: Constants,
) -> Result<NisppConfig> {
    if n < 4 {
        return Err(invalid("multipass policy needs n >= 4"));
    }
    let b = n.isqrt().max(1);
    let nf = n as f64;
    let lambda = (c.m / c.d).max(c.l) * libm::sqrt(nf).max(privacy_root(dim, budget)?);
    let nu = c.m * c.m / (lambda * nf * nf);
    let sigma_sq = match budget {
        Some(bud) => {
            let s = 8.0 * c.m * libm::sqrt(bud.log_inv_eta()) / (b as f64 * lambda * bud.epsilon);
            s * s
        }
        None => 0.0,
    };
    Ok(NisppConfig {
        iterations: n,
        weights: Schedule::Constant(1.0),
        regularization: Schedule::Constant(lambda),
        batch_size: b,
        accuracy: nu,
        noise_variances: Schedule::Constant(sigma_sq),
        sampling_mode: SamplingMode::WithReplacement,
        seed: 0,
        inner: InnerControls::default(),
        start: None,
        record: true,
    })
}

/// Expected-gap bound `nu + Z_0/Gamma + M sqrt(d sum gamma_k^2 sigma_{k+1}^2)/Gamma`
/// with `Z_0 = (3/2) gamma_0 lambda_0 D^2 + (4M^2 + 3L^2 D^2)/(gamma_0 lambda_0) sum gamma_k^2
/// + (5/2) gamma_0 lambda_0 d sum sigma_{k+1}^2`; all sums run over `k = 0..=K`.
pub fn nispp_error_bound(cfg: &NisppConfig, m: f64, l: f64, d_diam: f64, dim: usize) -> Result<f64> {
    let k = cfg.steps();
    let gl = cfg.weights.at(0) * cfg.regularization.at(0);
    if (0..k).any(|j| (cfg.weights.at(j) * cfg.regularization.at(j) - gl).abs() > 1e-12 * gl) {
        return Err(precondition("gamma_k lambda_k must be constant across iterations"));
    }
    let gamma_sum: f64 = cfg.weights.iter(k).sum();
    let gamma_sq: f64 = cfg.weights.iter(k).map(|g| g * g).sum();
    let sigma_sum: f64 = cfg.noise_variances.iter(k).sum();
    let weighted: f64 = (0..k).map(|j| cfg.weights.at(j) * cfg.weights.at(j) * cfg.noise_variances.at(j)).sum();
    let dimf = dim as f64;
    let z0 = 1.5 * gl * d_diam * d_diam
        + (4.0 * m * m + 3.0 * l * l * d_diam * d_diam) / gl * gamma_sq
        + 2.5 * gl * dimf * sigma_sum;
    Ok(cfg.accuracy + z0 / gamma_sum + m * libm::sqrt(weighted * dimf) / gamma_sum)
}
