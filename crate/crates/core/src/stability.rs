//! Coupled-trajectory stability laboratory.
//!
//! A coupled run executes a solver on a dataset and on a neighbor that
//! differs in one entry, with every random draw shared. The per-trajectory
//! drift recursions of both methods are evaluated along the recorded runs
//! and compared with the measured distances.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::eg_operator::{eg_fixed_point, DEFAULT_TOL};
use crate::error::{invalid, precondition, Result};
use crate::gap::mean_and_se;
use crate::linalg::{dist, norm};
use crate::nispp::{nispp_run, prox_step, InnerControls, NisppConfig};
use crate::nseg::{nseg_run, NsegConfig, SamplingMode};
use crate::problems::{make_neighbor, sample_dataset, DataDistribution, Datapoint, Dataset, ProblemInstance};
use crate::rng;

/// Relative slack used when comparing a measured distance with a bound.
pub const BOUND_SLACK: f64 = 1e-9;
/// Largest `gamma L` and dimension for which fixed-point diagnostics are computed.
pub const FIXED_POINT_MAX_GAMMA_L: f64 = 0.95;
pub const FIXED_POINT_MAX_DIM: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Nseg,
    Nispp,
}

/// Configuration of either solver.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "solver", content = "config", rename_all = "snake_case")]
pub enum SolverConfig {
    Nseg(NsegConfig),
    Nispp(NisppConfig),
}

impl SolverConfig {
    pub fn kind(&self) -> SolverKind {
        match self {
            SolverConfig::Nseg(_) => SolverKind::Nseg,
            SolverConfig::Nispp(_) => SolverKind::Nispp,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        match &mut c {
            SolverConfig::Nseg(x) => x.seed = seed,
            SolverConfig::Nispp(x) => x.seed = seed,
        }
        c
    }

    pub fn with_record(&self, record: bool) -> Self {
        let mut c = self.clone();
        match &mut c {
            SolverConfig::Nseg(x) => x.record = record,
            SolverConfig::Nispp(x) => x.record = record,
        }
        c
    }

    /// Output point of one run.
    pub fn run(&self, instance: &ProblemInstance, data: &Dataset) -> Result<Vec<f64>> {
        match self {
            SolverConfig::Nseg(c) => Ok(nseg_run(instance, data, c)?.output),
            SolverConfig::Nispp(c) => Ok(nispp_run(instance, data, c)?.output),
        }
    }
}

/// Per-step quantities entering the drift bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "solver", rename_all = "snake_case")]
pub enum Diagnostics {
    Nispp {
        /// `||F_B(u_{k+1}) - F_{B'}(u_{k+1})||` along the first run.
        a: Vec<f64>,
        /// Larger of the two certified accuracies at each step.
        nu: Vec<f64>,
        lambda: Vec<f64>,
        weights: Vec<f64>,
        /// First step whose batches differ.
        first_differing: Option<usize>,
    },
    Nseg {
        stepsizes: Vec<f64>,
        /// Operator-difference majorants `Delta_{1,t}`, `Delta_{2,t}`.
        delta_first: Vec<f64>,
        delta_second: Vec<f64>,
        /// Fixed-point evaluations of `M~_{1,t}`, `M~_{2,t}` when computed.
        m_tilde: Option<Vec<(f64, f64)>>,
        /// `(||xi_1||, ||xi_2||)` per step.
        noise_norms: Vec<(f64, f64)>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoupledRunReport {
    pub solver: SolverKind,
    pub index: usize,
    /// `||u_k - u'_k||` after every step.
    pub deltas: Vec<f64>,
    /// `||w_t - z_t||` of the extrapolation points (NSEG only).
    pub extrapolation_deltas: Vec<f64>,
    pub output_distance: f64,
    /// Identical batch indices and noise in both runs.
    pub shared_randomness: bool,
    pub diagnostics: Diagnostics,
}

/// Bound values along a coupled run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerRunBound {
    /// Bound on `deltas[k]`.
    pub steps: Vec<f64>,
    /// Bound on `extrapolation_deltas[t]` (NSEG only).
    pub extrapolation: Vec<f64>,
    pub output: f64,
}

impl PerRunBound {
    /// Number of measured quantities exceeding their bound.
    pub fn violations(&self, report: &CoupledRunReport) -> usize {
        let over = |x: f64, b: f64| x > b + BOUND_SLACK * (1.0 + b);
        let mut v = report.deltas.iter().zip(&self.steps).filter(|(x, b)| over(**x, **b)).count();
        v += report.extrapolation_deltas.iter().zip(&self.extrapolation).filter(|(x, b)| over(**x, **b)).count();
        if over(report.output_distance, self.output) {
            v += 1;
        }
        v
    }
}

/// Runs `cfg` on `data` and on `data` with entry `index` replaced by
/// `replacement`, sharing all randomness, and records the drift.
pub fn coupled_run(
    cfg: &SolverConfig,
    instance: &ProblemInstance,
    data: &Dataset,
    index: usize,
    replacement: Datapoint,
) -> Result<CoupledRunReport> {
    let neighbor = make_neighbor(data, index, replacement)?;
    let differs = data.points()[index] != neighbor.points()[index];
    match cfg {
        SolverConfig::Nseg(c) => coupled_nseg(c, instance, data, &neighbor, index, differs),
        SolverConfig::Nispp(c) => coupled_nispp(c, instance, data, &neighbor, index, differs),
    }
}

fn coupled_nispp(
    cfg: &NisppConfig,
    instance: &ProblemInstance,
    data: &Dataset,
    neighbor: &Dataset,
    index: usize,
    differs: bool,
) -> Result<CoupledRunReport> {
    let mut c = cfg.clone();
    c.record = true;
    let r1 = nispp_run(instance, data, &c)?;
    let r2 = nispp_run(instance, neighbor, &c)?;
    let shared = r1.steps.iter().zip(&r2.steps).all(|(a, b)| a.batch == b.batch && a.noise == b.noise);
    let m = instance.constants.m;
    let mut a = Vec::with_capacity(r1.steps.len());
    let mut first = None;
    for (k, s) in r1.steps.iter().enumerate() {
        let hit = differs && s.batch.contains(&index);
        if hit && first.is_none() {
            first = Some(k);
        }
        let ak = if hit {
            let f = data.batch_payload(&s.batch)?.apply(m, &s.u);
            let g = neighbor.batch_payload(&s.batch)?.apply(m, &s.u);
            dist(&f, &g)
        } else {
            0.0
        };
        a.push(ak);
    }
    let nu = r1.certificates.iter().zip(&r2.certificates).map(|(x, y)| x.nu_actual.max(y.nu_actual)).collect();
    let k = c.steps();
    Ok(CoupledRunReport {
        solver: SolverKind::Nispp,
        index,
        deltas: r1.steps.iter().zip(&r2.steps).map(|(x, y)| dist(&x.u, &y.u)).collect(),
        extrapolation_deltas: Vec::new(),
        output_distance: dist(&r1.output, &r2.output),
        shared_randomness: shared,
        diagnostics: Diagnostics::Nispp {
            a,
            nu,
            lambda: c.regularization.iter(k).collect(),
            weights: c.weights.iter(k).collect(),
            first_differing: first,
        },
    })
}

/// Drift bound `delta_{j+1} <= sum_{k=i}^{j} 2 a_{k+1}/lambda_k + sqrt(4 nu_k/lambda_k)`
/// with `i` the first differing step (zero before it), and the induced bound
/// on the distance of the projected weighted averages.
pub fn nispp_per_run_bound(report: &CoupledRunReport) -> Result<PerRunBound> {
    let Diagnostics::Nispp { a, nu, lambda, weights, first_differing } = &report.diagnostics else {
        return Err(invalid("report does not come from a proximal-point run"));
    };
    let mut steps = Vec::with_capacity(a.len());
    let mut acc = 0.0;
    for k in 0..a.len() {
        if first_differing.is_some_and(|i| k >= i) {
            acc += 2.0 * a[k] / lambda[k] + libm::sqrt(4.0 * nu[k] / lambda[k]);
        }
        steps.push(acc);
    }
    let total: f64 = weights.iter().sum();
    let output = weights.iter().zip(&steps).map(|(g, b)| g * b).sum::<f64>() / total;
    Ok(PerRunBound { steps, extrapolation: Vec::new(), output })
}

fn slot_count(batch: &[usize], index: usize, mode: SamplingMode, n: usize) -> (f64, f64) {
    match mode {
        SamplingMode::FullBatch => (1.0, n as f64),
        _ => (batch.iter().filter(|&&i| i == index).count() as f64, batch.len() as f64),
    }
}

fn coupled_nseg(
    cfg: &NsegConfig,
    instance: &ProblemInstance,
    data: &Dataset,
    neighbor: &Dataset,
    index: usize,
    differs: bool,
) -> Result<CoupledRunReport> {
    let mut c = cfg.clone();
    c.record = true;
    let r1 = nseg_run(instance, data, &c)?;
    let r2 = nseg_run(instance, neighbor, &c)?;
    let shared = r1.steps.iter().zip(&r2.steps).all(|(a, b)| {
        a.batch_first == b.batch_first
            && a.batch_second == b.batch_second
            && a.noise_first == b.noise_first
            && a.noise_second == b.noise_second
    });
    let m = instance.constants.m;
    let l = instance.constants.l;
    let n = data.n();
    let t_max = c.iterations;
    let stepsizes: Vec<f64> = c.stepsizes.iter(t_max).collect();
    let mut delta_first = Vec::with_capacity(t_max);
    let mut delta_second = Vec::with_capacity(t_max);
    for s in &r1.steps {
        let (c1, b1) = slot_count(&s.batch_first, index, c.sampling_mode, n);
        let (c2, b2) = slot_count(&s.batch_second, index, c.sampling_mode, n);
        let f = if differs { 2.0 * m } else { 0.0 };
        delta_first.push(f * c1 / b1);
        delta_second.push(f * c2 / b2);
    }
    let noise_norms = r1.steps.iter().map(|s| (norm(&s.noise_first), norm(&s.noise_second))).collect();
    let max_gl = stepsizes.iter().fold(0.0f64, |acc, g| acc.max(g * l));
    let m_tilde = if l == 0.0 {
        // the M~ terms enter multiplied by L
        Some(vec![(0.0, 0.0); t_max])
    } else if max_gl < FIXED_POINT_MAX_GAMMA_L && instance.dim() <= FIXED_POINT_MAX_DIM {
        let mut out = Vec::with_capacity(t_max);
        for (t, &g) in stepsizes.iter().enumerate() {
            let u_prev = if t == 0 { &r1.start } else { &r1.steps[t - 1].u };
            let v_prev = if t == 0 { &r2.start } else { &r2.steps[t - 1].u };
            let s = &r1.steps[t];
            let pay1 = slot_payload(data, &s.batch_first, c.sampling_mode)?;
            let pay2 = slot_payload(data, &s.batch_second, c.sampling_mode)?;
            let op1 = instance.operator(pay1).with_shift(s.noise_first.clone());
            let op2 = instance.operator(pay2).with_shift(s.noise_second.clone());
            let mt = |p: &[f64]| -> Result<f64> {
                let r1p = eg_fixed_point(&op1, &instance.set, g, l, p, DEFAULT_TOL)?;
                let r2p = eg_fixed_point(&op2, &instance.set, g, l, p, DEFAULT_TOL)?;
                use crate::problems::Operator;
                // fixed points are accurate to DEFAULT_TOL; pad by the induced operator error
                Ok(dist(&op1.eval(&r1p), &op2.eval(&r2p)) + 2.0 * l * DEFAULT_TOL)
            };
            out.push((mt(u_prev)?, mt(v_prev)?));
        }
        Some(out)
    } else {
        None
    };
    Ok(CoupledRunReport {
        solver: SolverKind::Nseg,
        index,
        deltas: r1.steps.iter().zip(&r2.steps).map(|(x, y)| dist(&x.u, &y.u)).collect(),
        extrapolation_deltas: r1.steps.iter().zip(&r2.steps).map(|(x, y)| dist(&x.w, &y.w)).collect(),
        output_distance: dist(&r1.output, &r2.output),
        shared_randomness: shared,
        diagnostics: Diagnostics::Nseg { stepsizes, delta_first, delta_second, m_tilde, noise_norms },
    })
}

fn slot_payload(data: &Dataset, batch: &[usize], mode: SamplingMode) -> Result<Datapoint> {
    match mode {
        SamplingMode::FullBatch => Ok(data.mean_payload()),
        _ => data.batch_payload(batch),
    }
}

/// Drift bounds of the extragradient recursion along a coupled run:
///
/// ```text
/// ||u_t - v_t|| <= sum_{s<=t} ([M~_1 + M~_2 + 2LD] L g_s^2 + L Delta_1 g_s^2 + Delta_2 g_s)
/// ||w_t - z_t|| <= (bound at t-1) + 2 L D g_t + Delta_1 g_t
/// ```
///
/// `Delta_{i,s}` are the almost-sure majorants `2M count/B` of the operator
/// differences. `M~` terms come from the fixed-point diagnostics when
/// `use_fixed_point` is set and they were computed, otherwise from the
/// majorant `2(M + ||xi_1|| + ||xi_2||)`. The output bound is the weighted
/// average of the extrapolation bounds.
pub fn nseg_per_run_bound(
    report: &CoupledRunReport,
    m: f64,
    l: f64,
    d: f64,
    use_fixed_point: bool,
) -> Result<PerRunBound> {
    let Diagnostics::Nseg { stepsizes, delta_first, delta_second, m_tilde, noise_norms } = &report.diagnostics else {
        return Err(invalid("report does not come from an extragradient run"));
    };
    let measured = if use_fixed_point { m_tilde.as_ref() } else { None };
    let mut steps = Vec::with_capacity(stepsizes.len());
    let mut extrapolation = Vec::with_capacity(stepsizes.len());
    let mut acc = 0.0;
    for (t, &g) in stepsizes.iter().enumerate() {
        extrapolation.push(acc + 2.0 * l * d * g + delta_first[t] * g);
        let (m1, m2) = match measured {
            Some(v) => v[t],
            None => {
                let maj = 2.0 * (m + noise_norms[t].0 + noise_norms[t].1);
                (maj, maj)
            }
        };
        acc += (m1 + m2 + 2.0 * l * d) * l * g * g + l * delta_first[t] * g * g + delta_second[t] * g;
        steps.push(acc);
    }
    let total: f64 = stepsizes.iter().sum();
    let output = if total > 0.0 {
        stepsizes.iter().zip(&extrapolation).map(|(g, b)| g * b).sum::<f64>() / total
    } else {
        extrapolation.iter().fold(0.0, |a: f64, b| a.max(*b))
    };
    Ok(PerRunBound { steps, extrapolation, output })
}

/// Monte-Carlo statistics of the output distance over coupled trials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UasEstimate {
    pub mean: f64,
    pub standard_error: f64,
    pub max: f64,
    pub trials: usize,
}

pub fn summarize_uas(distances: &[f64]) -> UasEstimate {
    let (mean, se) = mean_and_se(distances);
    UasEstimate {
        mean,
        standard_error: se,
        max: distances.iter().fold(0.0, |a: f64, b| a.max(*b)),
        trials: distances.len(),
    }
}

/// Dataset, differing index, replacement point and solver seed of trial `trial`.
pub fn trial_setup(
    dist: &DataDistribution,
    n: usize,
    seed: u64,
    trial: usize,
) -> Result<(Dataset, usize, Datapoint, u64)> {
    let ts = rng::derive_seed(seed, trial as u64);
    let data = sample_dataset(dist, n, rng::derive_seed(ts, 0))?;
    let mut r = rng::stream(ts, rng::TRIAL);
    let index = r.random_range(0..n);
    let replacement = dist.sample_point(&mut r);
    Ok((data, index, replacement, rng::derive_seed(ts, 1)))
}

/// Output distance of one coupled trial (no trajectory recording).
pub fn uas_trial(
    cfg: &SolverConfig,
    instance: &ProblemInstance,
    dist: &DataDistribution,
    n: usize,
    seed: u64,
    trial: usize,
) -> Result<f64> {
    let (data, index, replacement, solver_seed) = trial_setup(dist, n, seed, trial)?;
    let neighbor = make_neighbor(&data, index, replacement)?;
    let c = cfg.with_seed(solver_seed).with_record(false);
    Ok(dist_of(&c.run(instance, &data)?, &c.run(instance, &neighbor)?))
}

fn dist_of(a: &[f64], b: &[f64]) -> f64 {
    dist(a, b)
}

/// Full coupled report of trial `trial`.
pub fn coupled_trial(
    cfg: &SolverConfig,
    instance: &ProblemInstance,
    dist: &DataDistribution,
    n: usize,
    seed: u64,
    trial: usize,
) -> Result<CoupledRunReport> {
    let (data, index, replacement, solver_seed) = trial_setup(dist, n, seed, trial)?;
    coupled_run(&cfg.with_seed(solver_seed), instance, &data, index, replacement)
}

/// Monte-Carlo estimate of the uniform argument stability over random
/// datasets, differing indices and replacement points.
pub fn uas_estimate(
    cfg: &SolverConfig,
    instance: &ProblemInstance,
    dist: &DataDistribution,
    n: usize,
    trials: usize,
    seed: u64,
) -> Result<UasEstimate> {
    if trials < 10 {
        return Err(invalid("stability estimation needs at least 10 trials"));
    }
    let mut d = Vec::with_capacity(trials);
    for t in 0..trials {
        d.push(uas_trial(cfg, instance, dist, n, seed, t)?);
    }
    Ok(summarize_uas(&d))
}

/// Expected stability bound of extragradient with sampling, per step
/// `[4M + 2LD + 4 sqrt(d) sigma_t] L g_t^2 + (2ML/n) g_t^2 + (2M/n) g_t`,
/// plus `(1/T) sum_t (2ML/n + 2LD) g_t`.
pub fn nseg_uas_expectation_bound(cfg: &NsegConfig, m: f64, l: f64, d: f64, dim: usize, n: usize) -> f64 {
    let t = cfg.iterations;
    let nf = n as f64;
    let sd = libm::sqrt(dim as f64);
    let mut sum = 0.0;
    let mut tail = 0.0;
    for s in 0..t {
        let g = cfg.stepsizes.at(s);
        let sigma = libm::sqrt(cfg.noise_variances.at(s));
        sum += (4.0 * m + 2.0 * l * d + 4.0 * sd * sigma) * l * g * g + 2.0 * m * l / nf * g * g + 2.0 * m / nf * g;
        tail += (2.0 * m * l / nf + 2.0 * l * d) * g;
    }
    sum + tail / t as f64
}

/// Expected stability bound of proximal point with random batches,
/// `sum_k 4M/(n lambda_k) + sqrt(4 nu/lambda_k)`: the drift term `2 a_k/lambda_k`
/// with `E[a_k] <= 2M/n`.
pub fn nispp_uas_expectation_bound(cfg: &NisppConfig, m: f64, n: usize) -> f64 {
    cfg.regularization
        .iter(cfg.steps())
        .map(|lam| 4.0 * m / (n as f64 * lam) + libm::sqrt(4.0 * cfg.accuracy / lam))
        .sum()
}

/// High-probability stability bound `4MK/(lambda n) + K sqrt(4 nu/lambda)`
/// for constant `lambda`, holding with probability `1 - n exp(-KB/(4n))`.
pub fn nispp_high_probability_bound(m: f64, lambda: f64, nu: f64, k: usize, n: usize) -> f64 {
    let kf = k as f64;
    4.0 * m * kf / (lambda * n as f64) + kf * libm::sqrt(4.0 * nu / lambda)
}

/// Whether `K B >= 4 n ln(n trials)`, the regime in which the high-probability
/// bound should hold simultaneously over `trials` trials.
pub fn nispp_high_probability_regime(k: usize, batch: usize, n: usize, trials: usize) -> bool {
    (k * batch) as f64 >= 4.0 * n as f64 * libm::log((n * trials) as f64)
}

/// Outcome of repeated neighboring-batch proximal solves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub trials: usize,
    pub violations: usize,
    /// `4M/(lambda B)`
    pub bound: f64,
    pub max_distance: f64,
    /// Largest `distance / (bound + slack)` observed.
    pub max_ratio: f64,
}

/// Solves the regularized subproblem at `anchor` for random batches of size
/// `batch` and for their neighbors, and checks
/// `||u - u'|| <= 4M/(lambda B) + sqrt(nu_1/lambda) + sqrt(nu_2/lambda)`
/// where `sqrt(nu_i/lambda)` bounds the distance of a certified solution
/// to the exact one.
#[allow(clippy::too_many_arguments)]
pub fn prox_sensitivity_check(
    instance: &ProblemInstance,
    dist_law: &DataDistribution,
    anchor: &[f64],
    lambda: f64,
    batch: usize,
    nu: f64,
    trials: usize,
    seed: u64,
) -> Result<SensitivityReport> {
    let m = instance.constants.m;
    let bf = batch as f64;
    if batch == 0 || !(lambda > 0.0) {
        return Err(invalid("need lambda > 0 and B >= 1"));
    }
    if nu > 2.0 * m * m / (lambda * bf * bf) * (1.0 + 1e-12) {
        return Err(invalid(format!("accuracy {nu} violates nu <= 2 M^2/(lambda B^2)")));
    }
    if anchor.len() != instance.dim() {
        return Err(invalid("anchor has the wrong dimension"));
    }
    if trials == 0 {
        return Err(precondition("at least one trial is required"));
    }
    let bound = 4.0 * m / (lambda * bf);
    let (l, diam) = (instance.constants.l, instance.constants.d);
    let inner = InnerControls::default();
    let mut violations = 0;
    let mut max_distance = 0.0f64;
    let mut max_ratio = 0.0f64;
    for t in 0..trials {
        let (data, index, replacement, _) = trial_setup(dist_law, batch, seed, t)?;
        let neighbor = make_neighbor(&data, index, replacement)?;
        let op1 = instance.operator(data.mean_payload());
        let op2 = instance.operator(neighbor.mean_payload());
        let (u1, c1) = prox_step(&op1, &instance.set, anchor, lambda, l, m, diam, nu, &inner)?;
        let (u2, c2) = prox_step(&op2, &instance.set, anchor, lambda, l, m, diam, nu, &inner)?;
        let slack = libm::sqrt(c1.nu_actual / lambda) + libm::sqrt(c2.nu_actual / lambda);
        let d = dist(&u1, &u2);
        let limit = bound + slack;
        if d > limit + BOUND_SLACK * (1.0 + limit) {
            violations += 1;
        }
        max_distance = max_distance.max(d);
        max_ratio = max_ratio.max(d / limit);
    }
    Ok(SensitivityReport { trials, violations, bound, max_distance, max_ratio })
}
