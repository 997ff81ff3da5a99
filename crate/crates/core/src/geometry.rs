//! Compact convex feasible sets with exact Euclidean oracles.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{dist as point_dist, dot, norm};

/// A nonempty compact convex set.
///
/// Serialized as a tagged union on the field `type`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum FeasibleSet {
    Ball {
        center: Vec<f64>,
        radius: f64,
    },
    Box {
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
    /// `{x : x >= 0, sum x = scale}`
    Simplex {
        dim: usize,
        scale: f64,
    },
    Product {
        factors: Vec<FeasibleSet>,
    },
}

impl FeasibleSet {
    pub fn ball(center: Vec<f64>, radius: f64) -> Result<Self> {
        let s = FeasibleSet::Ball { center, radius };
        s.validate()?;
        Ok(s)
    }

    pub fn centered_ball(dim: usize, radius: f64) -> Result<Self> {
        Self::ball(vec![0.0; dim], radius)
    }

    pub fn boxed(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let s = FeasibleSet::Box { lower, upper };
        s.validate()?;
        Ok(s)
    }

    pub fn simplex(dim: usize, scale: f64) -> Result<Self> {
        let s = FeasibleSet::Simplex { dim, scale };
        s.validate()?;
        Ok(s)
    }

    pub fn product(factors: Vec<FeasibleSet>) -> Result<Self> {
        let s = FeasibleSet::Product { factors };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            FeasibleSet::Ball { center, radius } => {
                if center.is_empty() {
                    return Err(invalid("ball center must be nonempty"));
                }
                if !(*radius > 0.0 && radius.is_finite()) || !center.iter().all(|c| c.is_finite()) {
                    return Err(invalid(format!("ball radius must be positive and finite, got {radius}")));
                }
            }
            FeasibleSet::Box { lower, upper } => {
                if lower.is_empty() || lower.len() != upper.len() {
                    return Err(invalid("box bounds must be nonempty and of equal length"));
                }
                if lower.iter().zip(upper).any(|(l, u)| !(l <= u) || !l.is_finite() || !u.is_finite()) {
                    return Err(invalid("box requires finite lower[i] <= upper[i]"));
                }
                if lower == upper {
                    return Err(invalid("box must have positive diameter"));
                }
            }
            FeasibleSet::Simplex { dim, scale } => {
                if *dim < 2 {
                    return Err(invalid("simplex dimension must be at least 2"));
                }
                if !(*scale > 0.0 && scale.is_finite()) {
                    return Err(invalid(format!("simplex scale must be positive, got {scale}")));
                }
            }
            FeasibleSet::Product { factors } => {
                if factors.is_empty() {
                    return Err(invalid("product needs at least one factor"));
                }
                for f in factors {
                    f.validate()?;
                }
            }
        }
        Ok(())
    }

    /// Ambient dimension.
    pub fn dim(&self) -> usize {
        match self {
            FeasibleSet::Ball { center, .. } => center.len(),
            FeasibleSet::Box { lower, .. } => lower.len(),
            FeasibleSet::Simplex { dim, .. } => *dim,
            FeasibleSet::Product { factors } => factors.iter().map(|f| f.dim()).sum(),
        }
    }

    fn check_dim(&self, p: &[f64]) -> Result<()> {
        if p.len() != self.dim() {
            return Err(invalid(format!("expected a vector of dimension {}, got {}", self.dim(), p.len())));
        }
        Ok(())
    }

    /// Factor dimensions of a product (a single entry for other sets).
    pub fn block_dims(&self) -> Vec<usize> {
        match self {
            FeasibleSet::Product { factors } => factors.iter().map(|f| f.dim()).collect(),
            other => vec![other.dim()],
        }
    }

    /// Euclidean projection.
    pub fn project(&self, p: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(p)?;
        let mut out = p.to_vec();
        self.project_in_place(&mut out);
        Ok(out)
    }

    /// Projection without the dimension check; `p` must have the ambient dimension.
    pub fn project_in_place(&self, p: &mut [f64]) {
        match self {
            FeasibleSet::Ball { center, radius } => {
                let r = point_dist(p, center);
                if r > *radius {
                    let s = radius / r;
                    for (x, c) in p.iter_mut().zip(center) {
                        *x = c + (*x - c) * s;
                    }
                }
            }
            FeasibleSet::Box { lower, upper } => {
                for ((x, l), u) in p.iter_mut().zip(lower).zip(upper) {
                    *x = x.clamp(*l, *u);
                }
            }
            FeasibleSet::Simplex { scale, .. } => project_simplex(p, *scale),
            FeasibleSet::Product { factors } => {
                let mut rest = p;
                for f in factors {
                    let (head, tail) = rest.split_at_mut(f.dim());
                    f.project_in_place(head);
                    rest = tail;
                }
            }
        }
    }

    /// Maximizer and maximum of `<g, w>` over the set.
    ///
    /// For a ball and `g = 0` the center is returned.
    pub fn support_max(&self, g: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_dim(g)?;
        Ok(self.support_max_unchecked(g))
    }

    pub(crate) fn support_max_unchecked(&self, g: &[f64]) -> (Vec<f64>, f64) {
        match self {
            FeasibleSet::Ball { center, radius } => {
                let ng = norm(g);
                if ng == 0.0 {
                    return (center.clone(), 0.0);
                }
                let point: Vec<f64> = center.iter().zip(g).map(|(c, gi)| c + radius * gi / ng).collect();
                (point, dot(g, center) + radius * ng)
            }
            FeasibleSet::Box { lower, upper } => {
                let point: Vec<f64> = g
                    .iter()
                    .zip(lower.iter().zip(upper))
                    .map(|(gi, (l, u))| if *gi >= 0.0 { *u } else { *l })
                    .collect();
                let value = dot(g, &point);
                (point, value)
            }
            FeasibleSet::Simplex { dim, scale } => {
                let mut best = 0;
                for i in 1..*dim {
                    if g[i] > g[best] {
                        best = i;
                    }
                }
                let mut point = vec![0.0; *dim];
                point[best] = *scale;
                (point, scale * g[best])
            }
            FeasibleSet::Product { factors } => {
                let mut point = Vec::with_capacity(g.len());
                let mut value = 0.0;
                let mut off = 0;
                for f in factors {
                    let (p, v) = f.support_max_unchecked(&g[off..off + f.dim()]);
                    point.extend_from_slice(&p);
                    value += v;
                    off += f.dim();
                }
                (point, value)
            }
        }
    }

    /// Euclidean diameter.
    pub fn diameter(&self) -> f64 {
        match self {
            FeasibleSet::Ball { radius, .. } => 2.0 * radius,
            FeasibleSet::Box { lower, upper } => point_dist(lower, upper),
            FeasibleSet::Simplex { scale, .. } => scale * core::f64::consts::SQRT_2,
            FeasibleSet::Product { factors } => libm::sqrt(factors.iter().map(|f| f.diameter() * f.diameter()).sum()),
        }
    }

    /// Distance from `p` to the set.
    pub fn dist(&self, p: &[f64]) -> Result<f64> {
        let q = self.project(p)?;
        Ok(point_dist(p, &q))
    }

    /// Membership up to an absolute tolerance on the distance.
    pub fn contains(&self, p: &[f64], tol: f64) -> bool {
        match self.dist(p) {
            Ok(d) => d <= tol,
            Err(_) => false,
        }
    }

    /// Largest Euclidean norm of a point of the set.
    pub fn max_norm(&self) -> f64 {
        match self {
            FeasibleSet::Ball { center, radius } => norm(center) + radius,
            FeasibleSet::Box { lower, upper } => {
                libm::sqrt(lower.iter().zip(upper).map(|(l, u)| (l * l).max(u * u)).sum())
            }
            FeasibleSet::Simplex { scale, .. } => *scale,
            FeasibleSet::Product { factors } => libm::sqrt(factors.iter().map(|f| f.max_norm() * f.max_norm()).sum()),
        }
    }

    /// A canonical interior (relative-interior) point: ball center, box
    /// midpoint, simplex barycenter.
    pub fn center(&self) -> Vec<f64> {
        match self {
            FeasibleSet::Ball { center, .. } => center.clone(),
            FeasibleSet::Box { lower, upper } => lower.iter().zip(upper).map(|(l, u)| 0.5 * (l + u)).collect(),
            FeasibleSet::Simplex { dim, scale } => vec![scale / *dim as f64; *dim],
            FeasibleSet::Product { factors } => factors.iter().flat_map(|f| f.center()).collect(),
        }
    }
}

/// Sort-and-threshold projection onto `{x >= 0, sum x = scale}`.
fn project_simplex(p: &mut [f64], scale: f64) {
    let mut sorted = p.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, v) in sorted.iter().enumerate() {
        cumsum += v;
        let t = (cumsum - scale) / (j + 1) as f64;
        if v - t > 0.0 {
            theta = t;
        }
    }
    for x in p.iter_mut() {
        *x = (*x - theta).max(0.0);
    }
}
