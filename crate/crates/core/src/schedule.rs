//! Per-step parameter schedules.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// A value per step, either constant or listed explicitly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Schedule<T> {
    Constant(T),
    PerStep(Vec<T>),
}

impl<T: Copy> Schedule<T> {
    /// Value at zero-based step `t`. Explicit lists must cover `t`.
    pub fn at(&self, t: usize) -> T {
        match self {
            Schedule::Constant(v) => *v,
            Schedule::PerStep(v) => v[t],
        }
    }

    /// Checks that an explicit list has exactly `len` entries.
    pub fn check_len(&self, len: usize, what: &str) -> Result<()> {
        match self {
            Schedule::PerStep(v) if v.len() != len => {
                Err(invalid(alloc::format!("{what} schedule has {} entries, expected {len}", v.len())))
            }
            _ => Ok(()),
        }
    }

    pub fn iter(&self, len: usize) -> impl Iterator<Item = T> + '_ {
        (0..len).map(move |t| self.at(t))
    }

    pub fn all(&self, len: usize, pred: impl Fn(T) -> bool) -> bool {
        self.iter(len).all(pred)
    }
}
