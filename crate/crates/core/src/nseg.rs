//! Noisy stochastic extragradient.
//!
//! Each iteration takes an extrapolation step and an update step with
//! independent noisy batch operators,
//!
//! ```text
//! w_t = P(u_{t-1} - gamma_t F_{1,t}(u_{t-1}))
//! u_t = P(u_{t-1} - gamma_t F_{2,t}(w_t))
//! ```
//!
//! with `F_{i,t} = F_{batch} + xi`, `xi ~ N(0, sigma_t^2 I)`, and returns the
//! stepsize-weighted average of the extrapolation points `w_t`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, precondition, Result};
use crate::linalg::axpy;
use crate::privacy::PrivacyBudget;
use crate::problems::{Constants, Datapoint, Dataset, ProblemInstance};
use crate::rng;
use crate::schedule::Schedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Fresh consecutive slices of the dataset for every oracle call.
    DisjointSinglePass,
    /// Indices drawn uniformly with replacement for every oracle call.
    WithReplacement,
    /// The whole dataset for every oracle call.
    FullBatch,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NsegConfig {
    pub iterations: usize,
    pub stepsizes: Schedule<f64>,
    pub batch_sizes: Schedule<usize>,
    /// Per-coordinate noise variances `sigma_t^2`.
    pub noise_variances: Schedule<f64>,
    pub sampling_mode: SamplingMode,
    pub seed: u64,
    /// Starting point; the projection of the origin when absent.
    #[serde(default)]
    pub start: Option<Vec<f64>>,
    /// Keep per-step iterates, batch draws and noise.
    #[serde(default = "default_true")]
    pub record: bool,
}

impl NsegConfig {
    /// Checks the schedule against an instance and a dataset size.
    pub fn validate(&self, instance: &ProblemInstance, n: usize) -> Result<()> {
        let t = self.iterations;
        if t == 0 {
            return Err(invalid("at least one iteration is required"));
        }
        self.stepsizes.check_len(t, "stepsize")?;
        self.batch_sizes.check_len(t, "batch size")?;
        self.noise_variances.check_len(t, "noise variance")?;
        if !self.stepsizes.all(t, |g| g >= 0.0 && g.is_finite()) {
            return Err(invalid("stepsizes must be finite and nonnegative"));
        }
        if !self.noise_variances.all(t, |s| s >= 0.0 && s.is_finite()) {
            return Err(invalid("noise variances must be finite and nonnegative"));
        }
        if !self.batch_sizes.all(t, |b| b >= 1) {
            return Err(invalid("batch sizes must be at least 1"));
        }
        let l = instance.constants.l;
        if l > 0.0 {
            let cap = max_stepsize(l);
            if let Some(g) = self.stepsizes.iter(t).find(|&g| g > cap * (1.0 + 1e-12)) {
                return Err(precondition(format!("stepsize {g} exceeds 1/(sqrt(3) L) = {cap}")));
            }
        }
        if self.sampling_mode == SamplingMode::DisjointSinglePass {
            let used: usize = 2 * self.batch_sizes.iter(t).sum::<usize>();
            if used > n {
                return Err(invalid(format!("single-pass schedule needs {used} datapoints, dataset has {n}")));
            }
        }
        if let Some(s) = &self.start {
            if s.len() != instance.dim() {
                return Err(invalid("start point has the wrong dimension"));
            }
        }
        Ok(())
    }
}

/// Largest stepsize allowed by the convergence analysis, `1/(sqrt(3) L)`.
pub fn max_stepsize(lipschitz: f64) -> f64 {
    1.0 / (libm::sqrt(3.0) * lipschitz)
}

/// One recorded iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NsegStep {
    pub u: Vec<f64>,
    pub w: Vec<f64>,
    /// Batch indices of the extrapolation call (empty in full-batch mode).
    pub batch_first: Vec<usize>,
    /// Batch indices of the update call (empty in full-batch mode).
    pub batch_second: Vec<usize>,
    pub noise_first: Vec<f64>,
    pub noise_second: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NsegTrajectory {
    pub start: Vec<f64>,
    /// Per-step records (empty unless recording was requested).
    pub steps: Vec<NsegStep>,
    pub output: Vec<f64>,
    pub final_u: Vec<f64>,
}

struct Sampler<'a> {
    data: &'a Dataset,
    mode: SamplingMode,
    full: Option<Datapoint>,
    offset: usize,
    rng: rng::StreamRng,
}

impl<'a> Sampler<'a> {
    fn new(data: &'a Dataset, mode: SamplingMode, seed: u64) -> Self {
        let full = (mode == SamplingMode::FullBatch).then(|| data.mean_payload());
        Sampler { data, mode, full, offset: 0, rng: rng::stream(seed, rng::SAMPLING) }
    }

    fn draw(&mut self, b: usize) -> (Vec<usize>, Datapoint) {
        match self.mode {
            SamplingMode::FullBatch => (Vec::new(), self.full.clone().expect("full-batch payload")),
            SamplingMode::DisjointSinglePass => {
                let idx: Vec<usize> = (self.offset..self.offset + b).collect();
                self.offset += b;
                let p = self.data.batch_payload(&idx).expect("validated batch");
                (idx, p)
            }
            SamplingMode::WithReplacement => {
                let n = self.data.n();
                let idx: Vec<usize> = (0..b).map(|_| self.rng.random_range(0..n)).collect();
                let p = self.data.batch_payload(&idx).expect("validated batch");
                (idx, p)
            }
        }
    }
}

/// Runs the method on `data`.
///
/// All randomness comes from streams of `cfg.seed`, so two runs with the
/// same configuration on neighboring datasets share every index and noise
/// draw.
pub fn nseg_run(instance: &ProblemInstance, data: &Dataset, cfg: &NsegConfig) -> Result<NsegTrajectory> {
    cfg.validate(instance, data.n())?;
    instance.check_payload(&data.points()[0])?;
    let d = instance.dim();
    let set = &instance.set;
    let m = instance.constants.m;
    let start = match &cfg.start {
        Some(s) => set.project(s)?,
        None => set.project(&vec![0.0; d])?,
    };
    let mut sampler = Sampler::new(data, cfg.sampling_mode, cfg.seed);
    let mut noise1 = rng::stream(cfg.seed, rng::NOISE_FIRST);
    let mut noise2 = rng::stream(cfg.seed, rng::NOISE_SECOND);

    let mut u = start.clone();
    let mut acc = vec![0.0; d];
    let mut w_sum = vec![0.0; d];
    let mut gamma_sum = 0.0;
    let mut steps = Vec::new();
    for t in 0..cfg.iterations {
        let gamma = cfg.stepsizes.at(t);
        let b = cfg.batch_sizes.at(t);
        let sigma = libm::sqrt(cfg.noise_variances.at(t));

        let (idx1, p1) = sampler.draw(b);
        let xi1: Vec<f64> = rng::standard_normal_vec(&mut noise1, d).into_iter().map(|z| sigma * z).collect();
        let mut g1 = p1.apply(m, &u);
        axpy(1.0, &xi1, &mut g1);
        let mut w: Vec<f64> = u.iter().zip(&g1).map(|(ui, gi)| ui - gamma * gi).collect();
        set.project_in_place(&mut w);

        let (idx2, p2) = sampler.draw(b);
        let xi2: Vec<f64> = rng::standard_normal_vec(&mut noise2, d).into_iter().map(|z| sigma * z).collect();
        let mut g2 = p2.apply(m, &w);
        axpy(1.0, &xi2, &mut g2);
        let mut next: Vec<f64> = u.iter().zip(&g2).map(|(ui, gi)| ui - gamma * gi).collect();
        set.project_in_place(&mut next);
        u = next;

        axpy(gamma, &w, &mut acc);
        axpy(1.0, &w, &mut w_sum);
        gamma_sum += gamma;
        if cfg.record {
            steps.push(NsegStep {
                u: u.clone(),
                w,
                batch_first: idx1,
                batch_second: idx2,
                noise_first: xi1,
                noise_second: xi2,
            });
        }
    }
    let output = if gamma_sum > 0.0 {
        acc.iter().map(|v| v / gamma_sum).collect()
    } else {
        // all weights zero: every w_t equals the projected start
        w_sum.iter().map(|v| v / cfg.iterations as f64).collect()
    };
    Ok(NsegTrajectory { start, steps, output, final_u: u })
}

/// Noise variance `8 M^2 ln(1/eta) / (B^2 eps^2)` making every iteration
/// `(eps, eta)`-private for batch size `B`.
pub fn nseg_noise_for_privacy(m: f64, batch: usize, epsilon: f64, eta: f64) -> Result<f64> {
    let budget = PrivacyBudget::new(epsilon, eta)?;
    if batch == 0 {
        return Err(invalid("batch size must be at least 1"));
    }
    let b = batch as f64;
    Ok(8.0 * m * m * budget.log_inv_eta() / (b * b * epsilon * epsilon))
}

fn clip_stepsize(gamma: f64, lipschitz: f64) -> f64 {
    if lipschitz > 0.0 && gamma > max_stepsize(lipschitz) {
        log::warn!("stepsize {gamma} clipped to 1/(sqrt(3) L) = {}", max_stepsize(lipschitz));
        max_stepsize(lipschitz)
    } else {
        gamma
    }
}

/// `d ln(1/eta) / eps^2`, or zero without a privacy requirement.
fn privacy_load(dim: usize, budget: Option<&PrivacyBudget>) -> Result<f64> {
    match budget {
        Some(b) => {
            b.validate()?;
            Ok(dim as f64 * b.log_inv_eta() / (b.epsilon * b.epsilon))
        }
        None => Ok(0.0),
    }
}

/// Single-pass policy with disjoint batches.
///
/// `B = max(1, floor(min(sqrt(d ln(1/eta))/eps, n)))`, `T = floor(n/(2B))`,
/// constant `gamma = D / (M sqrt(7 T (1 + 8 d ln(1/eta)/(B^2 eps^2))))`
/// clipped to `1/(sqrt(3) L)`, and the per-step privacy noise. Without a
/// budget the batch size is 1 and no noise is added.
pub fn nseg_single_pass_policy(
    n: usize,
    dim: usize,
    budget: Option<&PrivacyBudget>,
    c: Constants,
) -> Result<NsegConfig> {
    if n < 2 {
        return Err(invalid("single-pass policy needs n >= 2"));
    }
    let load = privacy_load(dim, budget)?;
    let b = (libm::floor(libm::sqrt(load).min(n as f64)) as usize).max(1);
    let t = n / (2 * b);
    if t < 1 {
        return Err(invalid(format!("n = {n} is too small for batch size {b}: no iteration fits")));
    }
    let bf = b as f64;
    let gamma = c.d / (c.m * libm::sqrt(7.0 * t as f64 * (1.0 + 8.0 * load / (bf * bf))));
    let sigma_sq = match budget {
        Some(bud) => nseg_noise_for_privacy(c.m, b, bud.epsilon, bud.eta)?,
        None => 0.0,
    };
    Ok(NsegConfig {
        iterations: t,
        stepsizes: Schedule::Constant(clip_stepsize(gamma, c.l)),
        batch_sizes: Schedule::Constant(b),
        noise_variances: Schedule::Constant(sigma_sq),
        sampling_mode: SamplingMode::DisjointSinglePass,
        seed: 0,
        start: None,
        record: true,
    })
}

/// Multipass policy sampling single points with replacement.
///
/// `gamma = min(D/M, 1/L) / (n max(sqrt(n), sqrt(d ln(1/eta))/eps))`,
/// `sigma^2 = 8 M^2 ln(1/eta)/eps^2`, `T = n^2`, batch size 1.
pub fn nseg_multipass_policy(n: usize, dim: usize, budget: Option<&PrivacyBudget>, c: Constants) -> Result<NsegConfig> {
    if n == 0 {
        return Err(invalid("multipass policy needs n >= 1"));
    }
    let load = privacy_load(dim, budget)?;
    let nf = n as f64;
    let base = if c.l > 0.0 { (c.d / c.m).min(1.0 / c.l) } else { c.d / c.m };
    let gamma = base / (nf * libm::sqrt(nf).max(libm::sqrt(load)));
    let sigma_sq = match budget {
        Some(bud) => nseg_noise_for_privacy(c.m, 1, bud.epsilon, bud.eta)?,
        None => 0.0,
    };
    Ok(NsegConfig {
        iterations: n * n,
        stepsizes: Schedule::Constant(clip_stepsize(gamma, c.l)),
        batch_sizes: Schedule::Constant(1),
        noise_variances: Schedule::Constant(sigma_sq),
        sampling_mode: SamplingMode::WithReplacement,
        seed: 0,
        start: None,
        record: true,
    })
}

/// Expected-gap bound `K_0(T) / Gamma_T` with
/// `K_0(T) = D^2 + 7 sum_t gamma_t^2 (M^2/2 + d sigma_t^2)`.
pub fn nseg_error_bound(cfg: &NsegConfig, m: f64, _l: f64, d_diam: f64, dim: usize) -> Result<f64> {
    let t = cfg.iterations;
    let gamma_sum: f64 = cfg.stepsizes.iter(t).sum();
    if !(gamma_sum > 0.0) {
        return Err(invalid("stepsizes sum to zero"));
    }
    let tail: f64 = (0..t)
        .map(|s| {
            let g = cfg.stepsizes.at(s);
            g * g * (0.5 * m * m + dim as f64 * cfg.noise_variances.at(s))
        })
        .sum();
    Ok((d_diam * d_diam + 7.0 * tail) / gamma_sum)
}
