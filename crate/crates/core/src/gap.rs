//! Strong, weak and empirical gap functionals.
//!
//! Three evaluation tiers exist: an exact closed form (constant operators),
//! the exact saddle-point gap used as a labeled surrogate for the VI gap of
//! bilinear problems, and a grid oracle for ambient dimension at most 3.
//! Anything else is refused rather than approximated.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, unsupported, Result};
use crate::geometry::FeasibleSet;
use crate::linalg::{axpy, dot};
use crate::problems::{DataDistribution, Datapoint, Dataset, Family, ProblemInstance};
use crate::rng;

/// Largest ambient dimension accepted by the grid oracle.
pub const GRID_MAX_DIM: usize = 3;
/// Grid resolution used when the grid tier is selected automatically.
pub const DEFAULT_GRID_RESOLUTION: usize = 201;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapTier {
    ClosedForm,
    /// Saddle-point gap reported in place of the VI gap (an upper bound on it).
    SaddleSurrogate,
    /// Maximum over a feasible grid (a lower bound on the supremum).
    GridOracle,
}

/// Which operator the gap is measured against.
#[derive(Clone, Copy, Debug)]
pub enum OperatorSource<'a> {
    Dataset(&'a Dataset),
    Population,
    Payload(&'a Datapoint),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapValue {
    pub value: f64,
    pub tier: GapTier,
}

fn resolve(instance: &ProblemInstance, source: OperatorSource<'_>) -> Result<Datapoint> {
    let p = match source {
        OperatorSource::Dataset(d) => d.mean_payload(),
        OperatorSource::Population => instance.population_payload()?.clone(),
        OperatorSource::Payload(p) => p.clone(),
    };
    instance.check_payload(&p)?;
    Ok(p)
}

fn check_feasible(set: &FeasibleSet, u: &[f64]) -> Result<()> {
    if u.len() != set.dim() {
        return Err(invalid(format!("point has dimension {}, expected {}", u.len(), set.dim())));
    }
    if set.dist(u)? > 1e-9 * (1.0 + set.max_norm()) {
        return Err(invalid("gap point is not feasible"));
    }
    Ok(())
}

/// `sup_w <F(w), u - w>` for the selected operator.
pub fn strong_vi_gap(instance: &ProblemInstance, source: OperatorSource<'_>, u: &[f64]) -> Result<GapValue> {
    check_feasible(&instance.set, u)?;
    let payload = resolve(instance, source)?;
    match instance.family {
        Family::ConstantOp => {
            let g = payload.apply(instance.constants.m, u);
            Ok(GapValue { value: linear_gap(&instance.set, &g, u), tier: GapTier::ClosedForm })
        }
        Family::BilinearSp => {
            let (x, y) = instance.split(u)?;
            let value = sp_gap_of_payload(instance, &payload, x, y)?;
            Ok(GapValue { value, tier: GapTier::SaddleSurrogate })
        }
        Family::QuadraticVi => {
            if instance.dim() > GRID_MAX_DIM {
                return Err(unsupported(format!(
                    "no gap evaluator for this family in dimension {} (grid oracle needs <= {GRID_MAX_DIM})",
                    instance.dim()
                )));
            }
            let value = grid_max(instance, &payload, u, DEFAULT_GRID_RESOLUTION)?;
            Ok(GapValue { value, tier: GapTier::GridOracle })
        }
    }
}

/// `<g, u> + max_w <-g, w>` for a constant operator `g`.
fn linear_gap(set: &FeasibleSet, g: &[f64], u: &[f64]) -> f64 {
    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
    dot(g, u) + set.support_max_unchecked(&neg).1
}

/// `sup_{x', y'} f(x, y') - f(x', y)` for a bilinear instance.
pub fn strong_sp_gap(instance: &ProblemInstance, source: OperatorSource<'_>, x: &[f64], y: &[f64]) -> Result<f64> {
    if instance.family != Family::BilinearSp {
        return Err(unsupported("saddle-point gap requires the bilinear family"));
    }
    let mut u = x.to_vec();
    u.extend_from_slice(y);
    check_feasible(&instance.set, &u)?;
    let payload = resolve(instance, source)?;
    sp_gap_of_payload(instance, &payload, x, y)
}

fn sp_gap_of_payload(instance: &ProblemInstance, payload: &Datapoint, x: &[f64], y: &[f64]) -> Result<f64> {
    let Datapoint::BilinearSp { matrix, a, b } = payload else {
        return Err(unsupported("saddle-point gap requires a bilinear payload"));
    };
    let FeasibleSet::Product { factors } = &instance.set else {
        return Err(invalid("bilinear instance without a product set"));
    };
    let (xs, ys) = (&factors[0], &factors[1]);
    let mut gy = matrix.tmul_vec(x);
    axpy(1.0, b, &mut gy);
    let upper = dot(a, x) + ys.support_max_unchecked(&gy).1;
    let mut gx = matrix.mul_vec(y);
    axpy(1.0, a, &mut gx);
    let neg: Vec<f64> = gx.iter().map(|v| -v).collect();
    let lower = dot(b, y) - xs.support_max_unchecked(&neg).1;
    Ok(upper - lower)
}

/// Uniform feasible grid with `resolution` points per axis.
///
/// Balls and boxes use the bounding-box lattice (ball points outside the
/// ball are dropped); simplices use the barycentric lattice with
/// denominator `resolution - 1`. Resolution 1 is the single center point.
/// Refining `r -> 2r - 1` yields a superset.
pub fn feasible_grid(set: &FeasibleSet, resolution: usize) -> Result<Vec<Vec<f64>>> {
    if resolution == 0 {
        return Err(invalid("grid resolution must be at least 1"));
    }
    if set.dim() > GRID_MAX_DIM {
        return Err(unsupported(format!("grid oracle supports ambient dimension <= {GRID_MAX_DIM}")));
    }
    Ok(grid_points(set, resolution))
}

fn lattice(lower: &[f64], upper: &[f64], res: usize) -> Vec<Vec<f64>> {
    let mut pts: Vec<Vec<f64>> = vec![Vec::new()];
    for (l, u) in lower.iter().zip(upper) {
        let axis: Vec<f64> = if res == 1 {
            vec![0.5 * (l + u)]
        } else {
            (0..res).map(|i| l + (u - l) * i as f64 / (res - 1) as f64).collect()
        };
        pts = pts
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push(*v);
                    q
                })
            })
            .collect();
    }
    pts
}

fn compositions(total: usize, parts: usize) -> Vec<Vec<usize>> {
    if parts == 1 {
        return vec![vec![total]];
    }
    let mut out = Vec::new();
    for first in 0..=total {
        for mut rest in compositions(total - first, parts - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

fn grid_points(set: &FeasibleSet, res: usize) -> Vec<Vec<f64>> {
    match set {
        FeasibleSet::Ball { center, radius } => {
            let lower: Vec<f64> = center.iter().map(|c| c - radius).collect();
            let upper: Vec<f64> = center.iter().map(|c| c + radius).collect();
            lattice(&lower, &upper, res)
                .into_iter()
                .filter(|p| crate::linalg::dist(p, center) <= radius * (1.0 + 1e-12))
                .collect()
        }
        FeasibleSet::Box { lower, upper } => lattice(lower, upper, res),
        FeasibleSet::Simplex { dim, scale } => {
            if res == 1 {
                return vec![set.center()];
            }
            let den = (res - 1) as f64;
            compositions(res - 1, *dim)
                .into_iter()
                .map(|c| c.into_iter().map(|k| scale * k as f64 / den).collect())
                .collect()
        }
        FeasibleSet::Product { factors } => {
            let mut pts: Vec<Vec<f64>> = vec![Vec::new()];
            for f in factors {
                let fp = grid_points(f, res);
                pts = pts
                    .into_iter()
                    .flat_map(|p| {
                        fp.iter().map(move |q| {
                            let mut r = p.clone();
                            r.extend_from_slice(q);
                            r
                        })
                    })
                    .collect();
            }
            pts
        }
    }
}

/// Largest lattice spacing of [`feasible_grid`] at this resolution.
pub fn grid_spacing(set: &FeasibleSet, resolution: usize) -> f64 {
    if resolution <= 1 {
        return set.diameter();
    }
    let r = (resolution - 1) as f64;
    match set {
        FeasibleSet::Ball { radius, .. } => 2.0 * radius / r,
        FeasibleSet::Box { lower, upper } => lower.iter().zip(upper).map(|(l, u)| (u - l) / r).fold(0.0, f64::max),
        FeasibleSet::Simplex { scale, .. } => scale * core::f64::consts::SQRT_2 / r,
        FeasibleSet::Product { factors } => factors.iter().map(|f| grid_spacing(f, resolution)).fold(0.0, f64::max),
    }
}

fn grid_max(instance: &ProblemInstance, payload: &Datapoint, u: &[f64], res: usize) -> Result<f64> {
    let m = instance.constants.m;
    let pts = feasible_grid(&instance.set, res)?;
    let mut best = f64::NEG_INFINITY;
    for w in &pts {
        let f = payload.apply(m, w);
        let v: f64 = f.iter().zip(u.iter().zip(w)).map(|(fi, (ui, wi))| fi * (ui - wi)).sum();
        best = best.max(v);
    }
    Ok(best)
}

/// `max_{w in grid} <F(w), u - w>`, a lower bound on the strong VI gap.
///
/// For a constant operator `g` on a ball in dimension `d` the shortfall is at
/// most `sqrt(d) * spacing * ||g||` (at most `2 * spacing * ||g||` for
/// `d <= 3`); in general it is at most the Lipschitz constant of the
/// integrand times the covering radius of the grid.
pub fn brute_force_gap_oracle(
    instance: &ProblemInstance,
    source: OperatorSource<'_>,
    u: &[f64],
    resolution: usize,
) -> Result<f64> {
    if instance.dim() > GRID_MAX_DIM {
        return Err(unsupported(format!("grid oracle supports ambient dimension <= {GRID_MAX_DIM}")));
    }
    if u.len() != instance.dim() {
        return Err(invalid("point has the wrong dimension"));
    }
    let payload = resolve(instance, source)?;
    grid_max(instance, &payload, u, resolution)
}

/// Strong gap against `source`: the VI gap, or the saddle-point gap for
/// bilinear problems.
pub fn strong_gap(instance: &ProblemInstance, source: OperatorSource<'_>, u: &[f64]) -> Result<GapValue> {
    strong_vi_gap(instance, source, u)
}

/// Per-replica gap measurements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicaGap {
    pub output: Vec<f64>,
    /// Strong gap against the replica's own dataset.
    pub empirical_gap: f64,
    /// Strong gap against the population operator.
    pub population_gap: f64,
}

pub fn evaluate_replica(instance: &ProblemInstance, data: &Dataset, output: Vec<f64>) -> Result<ReplicaGap> {
    let empirical_gap = strong_gap(instance, OperatorSource::Dataset(data), &output)?.value;
    let population_gap = strong_gap(instance, OperatorSource::Population, &output)?.value;
    Ok(ReplicaGap { output, empirical_gap, population_gap })
}

/// Monte-Carlo weak-gap estimate with its standard error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakGapEstimate {
    pub estimate: f64,
    /// Jackknife standard error of the gap at the mean output.
    pub standard_error: f64,
    pub replicas: usize,
    pub mean_empirical_gap: f64,
    pub empirical_gap_se: f64,
    pub mean_population_gap: f64,
    pub population_gap_se: f64,
    pub mean_output: Vec<f64>,
}

/// Mean and standard error of the mean.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, libm::sqrt(var / n))
}

/// Weak gap from replica outputs.
///
/// The gap integrand is affine in the algorithm output for every built-in
/// family, so the expectation over datasets moves onto the output: the
/// estimate is the population strong gap at the mean output. The standard
/// error is the jackknife over leave-one-out means.
pub fn summarize_replicas(instance: &ProblemInstance, replicas: &[ReplicaGap]) -> Result<WeakGapEstimate> {
    let r = replicas.len();
    if r < 2 {
        return Err(invalid("weak-gap estimation needs at least 2 replicas"));
    }
    let d = instance.dim();
    let mut total = vec![0.0; d];
    for rep in replicas {
        axpy(1.0, &rep.output, &mut total);
    }
    let rf = r as f64;
    let mean: Vec<f64> = total.iter().map(|v| v / rf).collect();
    let estimate = strong_gap(instance, OperatorSource::Population, &mean)?.value;
    let mut loo = Vec::with_capacity(r);
    for rep in replicas {
        let m: Vec<f64> = total.iter().zip(&rep.output).map(|(t, o)| (t - o) / (rf - 1.0)).collect();
        loo.push(strong_gap(instance, OperatorSource::Population, &m)?.value);
    }
    let loo_mean = loo.iter().sum::<f64>() / rf;
    let jack = libm::sqrt((rf - 1.0) / rf * loo.iter().map(|g| (g - loo_mean) * (g - loo_mean)).sum::<f64>());
    let emp: Vec<f64> = replicas.iter().map(|x| x.empirical_gap).collect();
    let pop: Vec<f64> = replicas.iter().map(|x| x.population_gap).collect();
    let (me, se_e) = mean_and_se(&emp);
    let (mp, se_p) = mean_and_se(&pop);
    Ok(WeakGapEstimate {
        estimate,
        standard_error: jack,
        replicas: r,
        mean_empirical_gap: me,
        empirical_gap_se: se_e,
        mean_population_gap: mp,
        population_gap_se: se_p,
        mean_output: mean,
    })
}

/// `(dataset seed, solver seed)` of replica `r`.
pub fn replica_seeds(seed: u64, r: usize) -> (u64, u64) {
    (rng::derive_seed(seed, 2 * r as u64), rng::derive_seed(seed, 2 * r as u64 + 1))
}

/// Runs `algorithm(dataset, solver_seed)` on `replicas` independent datasets
/// of size `n` and estimates the weak gap.
pub fn weak_gap_estimate<A>(
    instance: &ProblemInstance,
    dist: &DataDistribution,
    mut algorithm: A,
    n: usize,
    replicas: usize,
    seed: u64,
) -> Result<WeakGapEstimate>
where
    A: FnMut(&Dataset, u64) -> Result<Vec<f64>>,
{
    if replicas < 2 {
        return Err(invalid("weak-gap estimation needs at least 2 replicas"));
    }
    let mut reps = Vec::with_capacity(replicas);
    for r in 0..replicas {
        let (ds, ss) = replica_seeds(seed, r);
        let data = crate::problems::sample_dataset(dist, n, ds)?;
        let out = algorithm(&data, ss)?;
        reps.push(evaluate_replica(instance, &data, out)?);
    }
    summarize_replicas(instance, &reps)
}

/// Outcome of the stability-implies-generalization check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationReport {
    pub weak_gap: f64,
    pub weak_gap_se: f64,
    pub mean_empirical_gap: f64,
    pub empirical_gap_se: f64,
    pub uas: f64,
    pub uas_se: f64,
    /// `M` for operator problems, `sqrt(2) M` for saddle problems (the
    /// bound `M (delta_x + delta_y)` with `delta_x + delta_y <= sqrt(2) delta`).
    pub lipschitz_factor: f64,
    pub bound: f64,
    pub combined_se: f64,
    pub pass: bool,
}

/// Checks `weak <= mean empirical + factor * delta + 3 * combined SE`.
pub fn generalization_from_parts(
    instance: &ProblemInstance,
    weak: &WeakGapEstimate,
    uas_mean: f64,
    uas_se: f64,
) -> GeneralizationReport {
    let m = instance.constants.m;
    let factor = if instance.family == Family::BilinearSp { core::f64::consts::SQRT_2 * m } else { m };
    let bound = weak.mean_empirical_gap + factor * uas_mean;
    let combined = libm::sqrt(
        weak.standard_error * weak.standard_error
            + weak.empirical_gap_se * weak.empirical_gap_se
            + (factor * uas_se) * (factor * uas_se),
    );
    GeneralizationReport {
        weak_gap: weak.estimate,
        weak_gap_se: weak.standard_error,
        mean_empirical_gap: weak.mean_empirical_gap,
        empirical_gap_se: weak.empirical_gap_se,
        uas: uas_mean,
        uas_se,
        lipschitz_factor: factor,
        bound,
        combined_se: combined,
        pass: weak.estimate <= bound + 3.0 * combined,
    }
}

/// Weak gap of `algorithm` versus its mean empirical gap plus the
/// stability term, using a supplied UAS estimate `(mean, se)`.
pub fn generalization_check<A>(
    instance: &ProblemInstance,
    dist: &DataDistribution,
    algorithm: A,
    n: usize,
    replicas: usize,
    uas: (f64, f64),
    seed: u64,
) -> Result<GeneralizationReport>
where
    A: FnMut(&Dataset, u64) -> Result<Vec<f64>>,
{
    let weak = weak_gap_estimate(instance, dist, algorithm, n, replicas, seed)?;
    Ok(generalization_from_parts(instance, &weak, uas.0, uas.1))
}
