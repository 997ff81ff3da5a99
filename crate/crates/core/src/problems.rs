//! Per-datapoint operator families, datasets and sampling laws.
//!
//! Every family is affine in its datapoint payload, so batch and population
//! operators are the operators of the averaged payload.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, unsupported, Result};
use crate::geometry::FeasibleSet;
use crate::linalg::{axpy, dot, norm, Matrix};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// `f(x, y) = x^T A y + a^T x + b^T y` over a product `X x Y`.
    BilinearSp,
    /// `F(w) = M beta` with `beta` in `{-1/sqrt(d), 1/sqrt(d)}^d`.
    ConstantOp,
    /// `F(w) = Q w + c` with positive semidefinite symmetric part of `Q`.
    QuadraticVi,
}

/// One datapoint (or an averaged payload).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Datapoint {
    BilinearSp {
        #[serde(rename = "A")]
        matrix: Matrix,
        a: Vec<f64>,
        b: Vec<f64>,
    },
    ConstantOp {
        beta: Vec<f64>,
    },
    QuadraticVi {
        #[serde(rename = "Q")]
        q: Matrix,
        c: Vec<f64>,
    },
}

impl Datapoint {
    pub fn family(&self) -> Family {
        match self {
            Datapoint::BilinearSp { .. } => Family::BilinearSp,
            Datapoint::ConstantOp { .. } => Family::ConstantOp,
            Datapoint::QuadraticVi { .. } => Family::QuadraticVi,
        }
    }

    /// Ambient dimension of the operator's domain.
    pub fn dim(&self) -> usize {
        match self {
            Datapoint::BilinearSp { matrix, .. } => matrix.rows() + matrix.cols(),
            Datapoint::ConstantOp { beta } => beta.len(),
            Datapoint::QuadraticVi { c, .. } => c.len(),
        }
    }

    fn same_shape(&self, other: &Datapoint) -> bool {
        match (self, other) {
            (Datapoint::BilinearSp { matrix: m1, .. }, Datapoint::BilinearSp { matrix: m2, .. }) => {
                m1.rows() == m2.rows() && m1.cols() == m2.cols()
            }
            (Datapoint::ConstantOp { beta: b1 }, Datapoint::ConstantOp { beta: b2 }) => b1.len() == b2.len(),
            (Datapoint::QuadraticVi { c: c1, .. }, Datapoint::QuadraticVi { c: c2, .. }) => c1.len() == c2.len(),
            _ => false,
        }
    }

    fn zero_like(&self) -> Datapoint {
        match self {
            Datapoint::BilinearSp { matrix, a, b } => Datapoint::BilinearSp {
                matrix: Matrix::zeros(matrix.rows(), matrix.cols()),
                a: vec![0.0; a.len()],
                b: vec![0.0; b.len()],
            },
            Datapoint::ConstantOp { beta } => Datapoint::ConstantOp { beta: vec![0.0; beta.len()] },
            Datapoint::QuadraticVi { q, c } => {
                Datapoint::QuadraticVi { q: Matrix::zeros(q.rows(), q.cols()), c: vec![0.0; c.len()] }
            }
        }
    }

    fn add_scaled(&mut self, other: &Datapoint, s: f64) {
        match (self, other) {
            (Datapoint::BilinearSp { matrix, a, b }, Datapoint::BilinearSp { matrix: m2, a: a2, b: b2 }) => {
                matrix.add_assign_scaled(m2, s);
                axpy(s, a2, a);
                axpy(s, b2, b);
            }
            (Datapoint::ConstantOp { beta }, Datapoint::ConstantOp { beta: b2 }) => axpy(s, b2, beta),
            (Datapoint::QuadraticVi { q, c }, Datapoint::QuadraticVi { q: q2, c: c2 }) => {
                q.add_assign_scaled(q2, s);
                axpy(s, c2, c);
            }
            _ => unreachable!("payload shapes are checked by the caller"),
        }
    }

    /// Arithmetic mean of payloads.
    pub fn mean<'a>(points: impl IntoIterator<Item = &'a Datapoint>) -> Result<Datapoint> {
        let mut iter = points.into_iter();
        let first = iter.next().ok_or_else(|| invalid("empty batch"))?;
        let mut acc = first.clone();
        let mut count = 1usize;
        for p in iter {
            if !first.same_shape(p) {
                return Err(invalid("batch mixes families or dimensions"));
            }
            acc.add_scaled(p, 1.0);
            count += 1;
        }
        if count > 1 {
            let mut out = acc.zero_like();
            out.add_scaled(&acc, 1.0 / count as f64);
            acc = out;
        }
        Ok(acc)
    }

    /// `F(w)` for this payload; `m` is the instance's scale for the
    /// constant family. `w` must have dimension `self.dim()`.
    pub fn apply(&self, m: f64, w: &[f64]) -> Vec<f64> {
        match self {
            Datapoint::BilinearSp { matrix, a, b } => {
                let (x, y) = w.split_at(matrix.rows());
                let mut out = matrix.mul_vec(y);
                axpy(1.0, a, &mut out);
                let mut gy = matrix.tmul_vec(x);
                axpy(1.0, b, &mut gy);
                out.extend(gy.iter().map(|v| -v));
                out
            }
            Datapoint::ConstantOp { beta } => beta.iter().map(|v| m * v).collect(),
            Datapoint::QuadraticVi { q, c } => {
                let mut out = q.mul_vec(w);
                axpy(1.0, c, &mut out);
                out
            }
        }
    }

    /// `x^T A y + a^T x + b^T y`; bilinear payloads only.
    pub fn saddle_value(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        match self {
            Datapoint::BilinearSp { matrix, a, b } => {
                if x.len() != matrix.rows() || y.len() != matrix.cols() {
                    return Err(invalid("saddle arguments do not match the payload dimensions"));
                }
                Ok(dot(x, &matrix.mul_vec(y)) + dot(a, x) + dot(b, y))
            }
            _ => Err(unsupported("saddle value is defined only for the bilinear family")),
        }
    }
}

/// Operator constants: bound `M`, Lipschitz constant `L`, diameter `D`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    #[serde(rename = "M")]
    pub m: f64,
    #[serde(rename = "L")]
    pub l: f64,
    #[serde(rename = "D")]
    pub d: f64,
}

/// An ordered, immutable collection of datapoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    points: Vec<Datapoint>,
}

impl Dataset {
    pub fn new(points: Vec<Datapoint>) -> Result<Self> {
        let first = points.first().ok_or_else(|| invalid("dataset must be nonempty"))?;
        if points.iter().any(|p| !first.same_shape(p)) {
            return Err(invalid("dataset mixes families or dimensions"));
        }
        Ok(Dataset { points })
    }

    pub fn n(&self) -> usize {
        self.points.len()
    }

    pub fn points(&self) -> &[Datapoint] {
        &self.points
    }

    pub fn get(&self, i: usize) -> Option<&Datapoint> {
        self.points.get(i)
    }

    /// Mean payload of the whole dataset.
    pub fn mean_payload(&self) -> Datapoint {
        Datapoint::mean(&self.points).expect("dataset is nonempty")
    }

    /// Mean payload of the points at `indices` (repetitions counted).
    pub fn batch_payload(&self, indices: &[usize]) -> Result<Datapoint> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.n()) {
            return Err(invalid(format!("batch index {i} out of range for n = {}", self.n())));
        }
        Datapoint::mean(indices.iter().map(|&i| &self.points[i]))
    }
}

/// Copy of `data` with entry `i` replaced by `replacement`.
pub fn make_neighbor(data: &Dataset, i: usize, replacement: Datapoint) -> Result<Dataset> {
    if i >= data.n() {
        return Err(invalid(format!("index {i} out of range for n = {}", data.n())));
    }
    if !data.points[0].same_shape(&replacement) {
        return Err(invalid("replacement point does not match the dataset family"));
    }
    let mut points = data.points.clone();
    points[i] = replacement;
    Ok(Dataset { points })
}

/// Sampling law of the datapoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DataDistribution {
    /// Independent coordinates equal to `+1/sqrt(d)` with probability
    /// `p_plus` and `-1/sqrt(d)` otherwise.
    ConstantOp { dim: usize, p_plus: f64 },
    /// Mean payload plus independent uniform perturbations of the given
    /// half-widths; matrices whose spectral norm exceeds `lipschitz_cap`
    /// are rescaled onto it.
    BilinearSp {
        #[serde(rename = "A")]
        matrix: Matrix,
        a: Vec<f64>,
        b: Vec<f64>,
        matrix_half_width: f64,
        vector_half_width: f64,
        lipschitz_cap: f64,
    },
    /// Fixed `Q`, uniformly perturbed `c`.
    QuadraticVi {
        #[serde(rename = "Q")]
        q: Matrix,
        c: Vec<f64>,
        c_half_width: f64,
    },
}

impl DataDistribution {
    pub fn family(&self) -> Family {
        match self {
            DataDistribution::BilinearSp { .. } => Family::BilinearSp,
            DataDistribution::ConstantOp { .. } => Family::ConstantOp,
            DataDistribution::QuadraticVi { .. } => Family::QuadraticVi,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DataDistribution::ConstantOp { dim, p_plus } => {
                if *dim == 0 || !(0.0..=1.0).contains(p_plus) {
                    return Err(invalid("constant-operator law needs dim >= 1 and p_plus in [0, 1]"));
                }
            }
            DataDistribution::BilinearSp { matrix, a, b, matrix_half_width, vector_half_width, lipschitz_cap } => {
                if a.len() != matrix.rows() || b.len() != matrix.cols() {
                    return Err(invalid("bilinear law: vector lengths must match the matrix shape"));
                }
                if !(*matrix_half_width >= 0.0 && *vector_half_width >= 0.0 && *lipschitz_cap >= 0.0) {
                    return Err(invalid("bilinear law: half-widths and cap must be nonnegative"));
                }
            }
            DataDistribution::QuadraticVi { q, c, c_half_width } => {
                if q.rows() != q.cols() || q.rows() != c.len() || !(*c_half_width >= 0.0) {
                    return Err(invalid("quadratic law: Q must be square and match c"));
                }
                if !q.symmetric_part().is_psd(1e-12) {
                    return Err(invalid("quadratic law: symmetric part of Q must be positive semidefinite"));
                }
            }
        }
        Ok(())
    }

    /// Mean payload of the law.
    pub fn mean_payload(&self) -> Datapoint {
        match self {
            DataDistribution::ConstantOp { dim, p_plus } => {
                let v = (2.0 * p_plus - 1.0) / libm::sqrt(*dim as f64);
                Datapoint::ConstantOp { beta: vec![v; *dim] }
            }
            DataDistribution::BilinearSp { matrix, a, b, .. } => {
                Datapoint::BilinearSp { matrix: matrix.clone(), a: a.clone(), b: b.clone() }
            }
            DataDistribution::QuadraticVi { q, c, .. } => Datapoint::QuadraticVi { q: q.clone(), c: c.clone() },
        }
    }

    /// One draw from the law.
    pub fn sample_point<R: Rng + ?Sized>(&self, rng: &mut R) -> Datapoint {
        match self {
            DataDistribution::ConstantOp { dim, p_plus } => {
                let v = 1.0 / libm::sqrt(*dim as f64);
                let beta = (0..*dim).map(|_| if rng.random::<f64>() < *p_plus { v } else { -v }).collect();
                Datapoint::ConstantOp { beta }
            }
            DataDistribution::BilinearSp { matrix, a, b, matrix_half_width, vector_half_width, lipschitz_cap } => {
                let mut m = Matrix::from_fn(matrix.rows(), matrix.cols(), |i, j| {
                    matrix.get(i, j) + uniform(rng, *matrix_half_width)
                });
                let a = a.iter().map(|v| v + uniform(rng, *vector_half_width)).collect();
                let b = b.iter().map(|v| v + uniform(rng, *vector_half_width)).collect();
                let op = m.op_norm();
                if op > *lipschitz_cap {
                    m = m.scaled(lipschitz_cap / op);
                }
                Datapoint::BilinearSp { matrix: m, a, b }
            }
            DataDistribution::QuadraticVi { q, c, c_half_width } => {
                let c = c.iter().map(|v| v + uniform(rng, *c_half_width)).collect();
                Datapoint::QuadraticVi { q: q.clone(), c }
            }
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, h: f64) -> f64 {
    if h > 0.0 {
        rng.random_range(-h..=h)
    } else {
        0.0
    }
}

/// `n` i.i.d. draws; deterministic in `(dist, n, seed)`.
pub fn sample_dataset(dist: &DataDistribution, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(invalid("dataset size must be at least 1"));
    }
    let mut rng = rng::stream(seed, rng::DATA);
    Dataset::new((0..n).map(|_| dist.sample_point(&mut rng)).collect())
}

/// A problem family on a feasible set, with its operator constants and
/// (optionally) its population law.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemInstance {
    pub family: Family,
    pub set: FeasibleSet,
    pub constants: Constants,
    #[serde(default)]
    pub population: Option<Datapoint>,
    #[serde(default)]
    pub distribution: Option<DataDistribution>,
}

impl ProblemInstance {
    /// Constant operators `M beta` on a centered ball.
    pub fn constant_op(dim: usize, radius: f64, m: f64, p_plus: f64) -> Result<Self> {
        if !(m > 0.0) {
            return Err(invalid("operator bound M must be positive"));
        }
        let set = FeasibleSet::centered_ball(dim, radius)?;
        let dist = DataDistribution::ConstantOp { dim, p_plus };
        dist.validate()?;
        let inst = ProblemInstance {
            family: Family::ConstantOp,
            constants: Constants { m, l: 0.0, d: set.diameter() },
            set,
            population: Some(dist.mean_payload()),
            distribution: Some(dist),
        };
        Ok(inst)
    }

    /// Bilinear saddle problems over `x_set x y_set` with the given mean
    /// payload and perturbation half-widths. `L` is declared as the mean
    /// spectral norm plus the Frobenius radius of the matrix perturbation,
    /// so the sampling-time rescaling never triggers.
    pub fn bilinear(
        x_set: FeasibleSet,
        y_set: FeasibleSet,
        matrix: Matrix,
        a: Vec<f64>,
        b: Vec<f64>,
        matrix_half_width: f64,
        vector_half_width: f64,
    ) -> Result<Self> {
        if matrix.rows() != x_set.dim() || matrix.cols() != y_set.dim() {
            return Err(invalid("matrix shape must be dim(X) x dim(Y)"));
        }
        let (d1, d2) = (matrix.rows() as f64, matrix.cols() as f64);
        let lipschitz = matrix.op_norm() + matrix_half_width * libm::sqrt(d1 * d2);
        let dist = DataDistribution::BilinearSp {
            matrix,
            a,
            b,
            matrix_half_width,
            vector_half_width,
            lipschitz_cap: lipschitz,
        };
        dist.validate()?;
        let m = bilinear_operator_bound(&dist, &x_set, &y_set);
        let set = FeasibleSet::product(vec![x_set, y_set])?;
        Ok(ProblemInstance {
            family: Family::BilinearSp,
            constants: Constants { m, l: lipschitz, d: set.diameter() },
            set,
            population: Some(dist.mean_payload()),
            distribution: Some(dist),
        })
    }

    /// The 2x2 matching-pennies game on probability simplices, optionally
    /// with perturbed payoffs.
    pub fn matching_pennies(matrix_half_width: f64, vector_half_width: f64) -> Result<Self> {
        let a = Matrix::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]])?;
        Self::bilinear(
            FeasibleSet::simplex(2, 1.0)?,
            FeasibleSet::simplex(2, 1.0)?,
            a,
            vec![0.0; 2],
            vec![0.0; 2],
            matrix_half_width,
            vector_half_width,
        )
    }

    /// Affine monotone operators `Q w + c` with a fixed `Q`.
    pub fn quadratic(set: FeasibleSet, q: Matrix, c: Vec<f64>, c_half_width: f64) -> Result<Self> {
        if q.rows() != set.dim() {
            return Err(invalid("Q must match the set dimension"));
        }
        let dist = DataDistribution::QuadraticVi { q, c, c_half_width };
        dist.validate()?;
        let (lipschitz, m) = match &dist {
            DataDistribution::QuadraticVi { q, c, c_half_width } => {
                let l = q.op_norm();
                let c_bound = libm::sqrt(c.iter().map(|v| libm::pow(v.abs() + c_half_width, 2.0)).sum());
                (l, l * set.max_norm() + c_bound)
            }
            _ => unreachable!(),
        };
        Ok(ProblemInstance {
            family: Family::QuadraticVi,
            constants: Constants { m, l: lipschitz, d: set.diameter() },
            set,
            population: Some(dist.mean_payload()),
            distribution: Some(dist),
        })
    }

    /// Structural checks: dimensions, family agreement, constants.
    pub fn validate(&self) -> Result<()> {
        self.set.validate()?;
        let Constants { m, l, d } = self.constants;
        if !(m >= 0.0 && l >= 0.0 && d > 0.0) || !(m.is_finite() && l.is_finite() && d.is_finite()) {
            return Err(invalid("constants must satisfy M >= 0, L >= 0, D > 0"));
        }
        if let Some(p) = &self.population {
            self.check_payload(p)?;
        }
        if let Some(dist) = &self.distribution {
            dist.validate()?;
            if dist.family() != self.family {
                return Err(invalid("distribution family does not match the instance family"));
            }
            self.check_payload(&dist.mean_payload())?;
        }
        if self.family == Family::BilinearSp && self.set.block_dims().len() != 2 {
            return Err(invalid("bilinear instances need a product of two sets"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.set.dim()
    }

    pub fn check_payload(&self, p: &Datapoint) -> Result<()> {
        if p.family() != self.family {
            return Err(invalid("datapoint family does not match the instance"));
        }
        if p.dim() != self.dim() {
            return Err(invalid(format!(
                "datapoint dimension {} does not match the set dimension {}",
                p.dim(),
                self.dim()
            )));
        }
        if let (Datapoint::BilinearSp { matrix, .. }, FeasibleSet::Product { factors }) = (p, &self.set) {
            if factors.len() != 2 || factors[0].dim() != matrix.rows() {
                return Err(invalid("bilinear payload does not match the product blocks"));
            }
        }
        Ok(())
    }

    fn check_point(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.dim() {
            return Err(invalid(format!("point has dimension {}, expected {}", w.len(), self.dim())));
        }
        Ok(())
    }

    pub fn eval_datapoint_operator(&self, point: &Datapoint, w: &[f64]) -> Result<Vec<f64>> {
        self.check_payload(point)?;
        self.check_point(w)?;
        Ok(point.apply(self.constants.m, w))
    }

    /// Operator of the batch mean.
    pub fn eval_batch_operator(&self, batch: &[Datapoint], w: &[f64]) -> Result<Vec<f64>> {
        let mean = Datapoint::mean(batch)?;
        self.eval_datapoint_operator(&mean, w)
    }

    pub fn population_payload(&self) -> Result<&Datapoint> {
        self.population.as_ref().ok_or_else(|| unsupported("instance has no population law"))
    }

    pub fn eval_population_operator(&self, w: &[f64]) -> Result<Vec<f64>> {
        let p = self.population_payload()?;
        self.eval_datapoint_operator(p, w)
    }

    /// Saddle function of a payload (single point, batch mean or population mean).
    pub fn eval_saddle(&self, payload: &Datapoint, x: &[f64], y: &[f64]) -> Result<f64> {
        if self.family != Family::BilinearSp {
            return Err(unsupported("saddle value requires the bilinear family"));
        }
        self.check_payload(payload)?;
        payload.saddle_value(x, y)
    }

    /// Operator of a payload as a callable object.
    pub fn operator(&self, payload: Datapoint) -> PayloadOperator {
        PayloadOperator { payload, m: self.constants.m, shift: None }
    }

    /// Splits a point of a two-block product into its blocks.
    pub fn split<'a>(&self, w: &'a [f64]) -> Result<(&'a [f64], &'a [f64])> {
        let dims = self.set.block_dims();
        if dims.len() != 2 || w.len() != self.dim() {
            return Err(invalid("point does not split into two blocks"));
        }
        Ok(w.split_at(dims[0]))
    }

    /// Draws from the instance's law.
    pub fn distribution(&self) -> Result<&DataDistribution> {
        self.distribution.as_ref().ok_or_else(|| unsupported("instance has no sampling law"))
    }
}

/// Largest operator norm over the product, certified from entrywise
/// payload bounds: vertex enumeration when a block is a simplex, spectral
/// norm times the block's radius otherwise.
fn bilinear_operator_bound(dist: &DataDistribution, x_set: &FeasibleSet, y_set: &FeasibleSet) -> f64 {
    let DataDistribution::BilinearSp { matrix, a, b, matrix_half_width, vector_half_width, lipschitz_cap } = dist
    else {
        return f64::NAN;
    };
    let abs_a = Matrix::from_fn(matrix.rows(), matrix.cols(), |i, j| matrix.get(i, j).abs() + matrix_half_width);
    let abs_av: Vec<f64> = a.iter().map(|v| v.abs() + vector_half_width).collect();
    let abs_bv: Vec<f64> = b.iter().map(|v| v.abs() + vector_half_width).collect();
    // bound on ||A y + a|| over y in Y
    let bx = block_bound(&abs_a, &abs_av, y_set, *lipschitz_cap);
    // bound on ||A^T x + b|| over x in X
    let bx_t = block_bound(&abs_a.transpose(), &abs_bv, x_set, *lipschitz_cap);
    libm::sqrt(bx * bx + bx_t * bx_t)
}

fn block_bound(abs_m: &Matrix, abs_v: &[f64], set: &FeasibleSet, spectral: f64) -> f64 {
    match set {
        FeasibleSet::Simplex { dim, scale } => (0..*dim)
            .map(|j| libm::sqrt((0..abs_m.rows()).map(|i| libm::pow(scale * abs_m.get(i, j) + abs_v[i], 2.0)).sum()))
            .fold(0.0, f64::max),
        other => spectral * other.max_norm() + norm(abs_v),
    }
}

/// Monotone operator interface used by the solvers and diagnostics.
pub trait Operator {
    fn eval(&self, w: &[f64]) -> Vec<f64>;
}

impl<F: Fn(&[f64]) -> Vec<f64>> Operator for F {
    fn eval(&self, w: &[f64]) -> Vec<f64> {
        self(w)
    }
}

/// `F_payload(w) + shift`.
#[derive(Clone, Debug)]
pub struct PayloadOperator {
    payload: Datapoint,
    m: f64,
    shift: Option<Vec<f64>>,
}

impl PayloadOperator {
    pub fn with_shift(mut self, shift: Vec<f64>) -> Self {
        self.shift = Some(shift);
        self
    }

    pub fn payload(&self) -> &Datapoint {
        &self.payload
    }
}

impl Operator for PayloadOperator {
    fn eval(&self, w: &[f64]) -> Vec<f64> {
        let mut out = self.payload.apply(self.m, w);
        if let Some(s) = &self.shift {
            axpy(1.0, s, &mut out);
        }
        out
    }
}
