//! Differentially private solvers for stochastic monotone variational
//! inequalities and convex-concave saddle-point problems.
//!
//! The crate is `no_std` (it needs `alloc`). It provides the noisy
//! stochastic extragradient method ([`nseg`]), the noisy inexact stochastic
//! proximal point method ([`nispp`]) with its operator-extrapolation inner
//! solver, Gaussian-mechanism calibration ([`privacy`]), gap evaluation
//! ([`gap`]) and a coupled-run stability laboratory ([`stability`]).
#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod eg_operator;
pub mod error;
pub mod gap;
pub mod geometry;
pub mod linalg;
pub mod nispp;
pub mod nseg;
pub mod privacy;
pub mod problems;
pub mod rng;
pub mod schedule;
pub mod stability;

pub use error::{Error, Result};
pub use geometry::FeasibleSet;
pub use problems::{Constants, DataDistribution, Datapoint, Dataset, Family, Operator, ProblemInstance};
