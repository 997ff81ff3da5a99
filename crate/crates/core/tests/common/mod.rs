#![allow(dead_code)]

use dpvi_core::FeasibleSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

pub fn assert_vec_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn random_vec<R: Rng>(r: &mut R, d: usize, h: f64) -> Vec<f64> {
    (0..d).map(|_| r.random_range(-h..h)).collect()
}

/// A random set of ambient dimension `d` (products need `d >= 2`).
pub fn random_set<R: Rng>(r: &mut R, d: usize) -> FeasibleSet {
    let kind = if d >= 4 { r.random_range(0..4) } else { r.random_range(0..3) };
    match kind {
        0 => FeasibleSet::ball(random_vec(r, d, 1.0), r.random_range(0.2..2.0)).unwrap(),
        1 => {
            let lo = random_vec(r, d, 1.0);
            let hi = lo.iter().map(|l| l + r.random_range(0.0..2.0)).collect();
            FeasibleSet::boxed(lo, hi).unwrap()
        }
        2 if d >= 2 => FeasibleSet::simplex(d, r.random_range(0.3..3.0)).unwrap(),
        2 => FeasibleSet::centered_ball(d, 1.0).unwrap(),
        _ => {
            let k = r.random_range(2..=d - 2);
            FeasibleSet::product(vec![random_set(r, k), random_set(r, d - k)]).unwrap()
        }
    }
}

/// Random point of a set (not uniform).
pub fn random_feasible<R: Rng>(r: &mut R, set: &FeasibleSet) -> Vec<f64> {
    match set {
        FeasibleSet::Ball { center, radius } => {
            let v = random_vec(r, center.len(), 1.0);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            let s = radius * r.random::<f64>().sqrt() / n;
            center.iter().zip(&v).map(|(c, x)| c + s * x).collect()
        }
        FeasibleSet::Box { lower, upper } => {
            lower.iter().zip(upper).map(|(l, u)| l + (u - l) * r.random::<f64>()).collect()
        }
        FeasibleSet::Simplex { dim, scale } => {
            let e: Vec<f64> = (0..*dim).map(|_| -r.random::<f64>().max(1e-300).ln()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|x| scale * x / s).collect()
        }
        FeasibleSet::Product { factors } => factors.iter().flat_map(|f| random_feasible(r, f)).collect(),
    }
}

/// Euclidean projection by exhaustive enumeration of active sets: every
/// candidate satisfying the stationarity equations for some active set is
/// formed, and the nearest feasible candidate wins.
pub fn projection_oracle(set: &FeasibleSet, p: &[f64]) -> Vec<f64> {
    match set {
        FeasibleSet::Ball { center, radius } => {
            let r = dist(p, center);
            if r <= *radius {
                p.to_vec()
            } else {
                center.iter().zip(p).map(|(c, x)| c + radius * (x - c) / r).collect()
            }
        }
        FeasibleSet::Box { lower, upper } => {
            let d = p.len();
            let mut best: Option<(f64, Vec<f64>)> = None;
            for code in 0..3usize.pow(d as u32) {
                let mut c = code;
                let mut x = Vec::with_capacity(d);
                for i in 0..d {
                    x.push(match c % 3 {
                        0 => p[i],
                        1 => lower[i],
                        _ => upper[i],
                    });
                    c /= 3;
                }
                if x.iter().zip(lower.iter().zip(upper)).all(|(v, (l, u))| *v >= *l && *v <= *u) {
                    let dd = dist(&x, p);
                    if best.as_ref().is_none_or(|(b, _)| dd < *b) {
                        best = Some((dd, x));
                    }
                }
            }
            best.unwrap().1
        }
        FeasibleSet::Simplex { dim, scale } => {
            let d = *dim;
            let mut best: Option<(f64, Vec<f64>)> = None;
            for mask in 1..(1usize << d) {
                let support: Vec<usize> = (0..d).filter(|i| mask >> i & 1 == 1).collect();
                let tau = (scale - support.iter().map(|&i| p[i]).sum::<f64>()) / support.len() as f64;
                let mut x = vec![0.0; d];
                for &i in &support {
                    x[i] = p[i] + tau;
                }
                if x.iter().all(|v| *v >= -1e-15) {
                    let dd = dist(&x, p);
                    if best.as_ref().is_none_or(|(b, _)| dd < *b) {
                        best = Some((dd, x));
                    }
                }
            }
            best.unwrap().1
        }
        FeasibleSet::Product { factors } => {
            let mut out = Vec::new();
            let mut off = 0;
            for f in factors {
                let k = f.dim();
                out.extend(projection_oracle(f, &p[off..off + k]));
                off += k;
            }
            out
        }
    }
}
