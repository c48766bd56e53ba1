//! Uniform time grid shared by simulation, flows and the backward solver.

use crate::{MfgError, Result};
use serde::{Deserialize, Serialize};

/// Uniform grid `0 = t_0 < t_1 < ... < t_M = T`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t_end: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t_end: f64, steps: usize) -> Result<Self> {
        if !(t_end > 0.0) {
            return Err(MfgError::InvalidParameter(format!(
                "horizon must be positive, got {t_end}"
            )));
        }
        if steps == 0 {
            return Err(MfgError::InvalidParameter("steps must be positive".into()));
        }
        Ok(TimeGrid { t_end, steps })
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        self.t_end / self.steps as f64
    }

    #[inline]
    pub fn time(&self, j: usize) -> f64 {
        j as f64 * self.dt()
    }

    /// Number of grid nodes, `steps + 1`.
    #[inline]
    pub fn len(&self) -> usize {
        self.steps + 1
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    /// Index of the last grid node with `t_j <= t` (clamped to the grid).
    pub fn floor_index(&self, t: f64) -> usize {
        if t <= 0.0 {
            return 0;
        }
        let j = (t / self.dt()).floor() as usize;
        j.min(self.steps)
    }
}
