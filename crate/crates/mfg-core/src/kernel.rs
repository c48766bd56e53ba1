//! Smoothing kernels and the smoothed absorption-loss functional.
//!
//! Absorption removes mass from the population in jumps; the model spreads
//! each loss over a window of length `epsilon` by convolving the loss
//! trajectory `L` with a compactly supported smooth kernel `k`:
//!
//! ```text
//! smoothed_loss(t)  = ∫_0^t k(t - s) L_s ds
//! its derivative    = k(0) L_t + ∫_0^t k'(t - s) L_s ds
//! ```
//!
//! The derivative is what enters every drift evaluation, so the kernel is
//! constructed once (normalization cached) and evaluated millions of times.

use crate::grid::TimeGrid;
use crate::quadrature::{adaptive_integral, gl8_integral};
use crate::{MfgError, Result};

/// Bump kernel `k(u) = exp(-1/(eps-u)) / c` on `[0, eps)`, zero elsewhere.
///
/// `c` is chosen so that the kernel integrates to one. The kernel is smooth
/// in the interior and all one-sided derivatives vanish at `u = eps`.
/// Immutable after construction; safe to share across threads.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothingKernel {
    epsilon: f64,
    norm: f64,
}

/// Construct the bump kernel with support width `epsilon`.
pub fn bump_kernel(epsilon: f64) -> Result<SmoothingKernel> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(MfgError::InvalidParameter(format!(
            "kernel support width must be positive, got {epsilon}"
        )));
    }
    // c = ∫_0^eps exp(-1/(eps-u)) du = ∫_0^eps exp(-1/v) dv
    let norm = adaptive_integral(&|v: f64| (-1.0 / v).exp(), 0.0, epsilon, 1e-15);
    Ok(SmoothingKernel { epsilon, norm })
}

impl SmoothingKernel {
    #[inline]
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Normalization constant `c`.
    #[inline]
    pub fn normalization(&self) -> f64 {
        self.norm
    }

    /// `k(u)`.
    #[inline]
    pub fn eval(&self, u: f64) -> f64 {
        if u < 0.0 || u >= self.epsilon {
            0.0
        } else {
            (-1.0 / (self.epsilon - u)).exp() / self.norm
        }
    }

    /// `k'(u)`; analytic for the bump: `k'(u) = -k(u) / (eps-u)^2`.
    #[inline]
    pub fn deriv(&self, u: f64) -> f64 {
        if u < 0.0 || u >= self.epsilon {
            0.0
        } else {
            let d = self.epsilon - u;
            -self.eval(u) / (d * d)
        }
    }

    /// `k(0)`, the instantaneous loading of a fresh loss.
    #[inline]
    pub fn k0(&self) -> f64 {
        self.eval(0.0)
    }

    /// `∫_0^eps |k'(u)| du`. The bump is non-increasing on its support, so
    /// this equals `k(0)`.
    pub fn deriv_l1(&self) -> f64 {
        self.k0()
    }

    /// Upper bound for `|smoothed_loss_derivative|` over loss values in
    /// `[0, 1]`: `k(0) + ∫|k'|`.
    pub fn derivative_bound(&self) -> f64 {
        self.k0() + self.deriv_l1()
    }

    /// `∫ k(u) du` over `[a, b] ∩ [0, eps]`, by composite 8-node
    /// Gauss–Legendre panels no wider than `eps / 16`.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        let lo = a.max(0.0);
        let hi = b.min(self.epsilon);
        if lo >= hi {
            return 0.0;
        }
        let panels = ((hi - lo) / (self.epsilon / 16.0)).ceil().max(1.0) as usize;
        let h = (hi - lo) / panels as f64;
        let mut acc = 0.0;
        for p in 0..panels {
            let x0 = lo + p as f64 * h;
            acc += gl8_integral(&|u| self.eval(u), x0, x0 + h);
        }
        acc
    }
}

/// Right-continuous step function on a time grid: value on `[t_j, t_{j+1})`
/// is `values[j]`, and `values[steps]` is the value at `T`.
#[derive(Clone, Debug)]
pub struct StepFunction {
    pub grid: TimeGrid,
    pub values: Vec<f64>,
}

impl StepFunction {
    pub fn new(grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(MfgError::InvalidParameter(format!(
                "step function needs {} values, got {}",
                grid.len(),
                values.len()
            )));
        }
        Ok(StepFunction { grid, values })
    }

    pub fn constant(grid: TimeGrid, value: f64) -> Self {
        StepFunction {
            grid,
            values: vec![value; grid.len()],
        }
    }

    #[inline]
    pub fn value_at(&self, t: f64) -> f64 {
        self.values[self.grid.floor_index(t)]
    }
}

fn check_time(grid: &TimeGrid, t: f64) -> Result<()> {
    if t < 0.0 || t > grid.t_end + 1e-12 {
        return Err(MfgError::Domain(format!(
            "time {t} outside [0, {}]",
            grid.t_end
        )));
    }
    Ok(())
}

/// `∫_0^t k(t-s) L_s ds`, computed piecewise-exactly on the grid cells.
///
/// Only the window `s ∈ [t - eps, t]` contributes.
pub fn smoothed_loss(loss: &StepFunction, kernel: &SmoothingKernel, t: f64) -> Result<f64> {
    check_time(&loss.grid, t)?;
    let dt = loss.grid.dt();
    let window_lo = (t - kernel.epsilon()).max(0.0);
    let first_cell = loss.grid.floor_index(window_lo).min(loss.grid.steps);
    let mut acc = 0.0;
    for j in first_cell..loss.grid.steps {
        let a = loss.grid.time(j);
        if a >= t {
            break;
        }
        let b = (a + dt).min(t);
        // s in [a, b] maps to u = t - s in [t - b, t - a]
        acc += loss.values[j] * kernel.integral(t - b, t - a);
    }
    Ok(acc)
}

/// `d/dt smoothed_loss = k(0) L_t + ∫_0^t k'(t-s) L_s ds`.
///
/// The `k'` integral of a step function telescopes exactly:
/// `∫_a^b k'(t-s) ds = k(t-a) - k(t-b)`, so no quadrature is involved.
pub fn smoothed_loss_derivative(
    loss: &StepFunction,
    kernel: &SmoothingKernel,
    t: f64,
) -> Result<f64> {
    check_time(&loss.grid, t)?;
    let dt = loss.grid.dt();
    let window_lo = (t - kernel.epsilon()).max(0.0);
    let first_cell = loss.grid.floor_index(window_lo).min(loss.grid.steps);
    let mut acc = kernel.k0() * loss.value_at(t);
    for j in first_cell..loss.grid.steps {
        let a = loss.grid.time(j);
        if a >= t {
            break;
        }
        let b = (a + dt).min(t);
        acc += loss.values[j] * (kernel.eval(t - a) - kernel.eval(t - b));
    }
    Ok(acc)
}

/// Derivative trajectory evaluated at every grid node. This is the quantity
/// the drift consumes; computing it per atom once keeps drift calls cheap.
pub fn smoothed_loss_derivative_trajectory(
    loss: &StepFunction,
    kernel: &SmoothingKernel,
) -> Vec<f64> {
    (0..loss.grid.len())
        .map(|j| {
            smoothed_loss_derivative(loss, kernel, loss.grid.time(j))
                .expect("grid node inside horizon")
        })
        .collect()
}

/// Smoothed loss with the trajectory extended by its initial value before
/// time zero: `∫ k(u) L_{t-u} du` over the whole window, with `L_s := L_0`
/// for `s < 0`.
///
/// The plain convolution ramps up from zero over the first kernel window
/// even when `L` is constant; the warm variant removes that start-up
/// transient, so the smoothed loss of a constant trajectory is the constant
/// itself and its derivative responds only to changes after time zero.
pub fn smoothed_loss_warm(loss: &StepFunction, kernel: &SmoothingKernel, t: f64) -> Result<f64> {
    let plain = smoothed_loss(loss, kernel, t)?;
    // remaining kernel mass beyond the observed window carries L_0
    Ok(plain + loss.values[0] * kernel.integral(t, kernel.epsilon()))
}

/// Derivative of [`smoothed_loss_warm`]. For a right-continuous step
/// trajectory it reduces exactly to the drop sum
/// `sum_{0 < t_i <= t} k(t - t_i) (L_i - L_{i-1})`,
/// which is bounded by `k(0)` times the total variation in the window.
pub fn smoothed_loss_derivative_warm(
    loss: &StepFunction,
    kernel: &SmoothingKernel,
    t: f64,
) -> Result<f64> {
    check_time(&loss.grid, t)?;
    let window_lo = (t - kernel.epsilon()).max(0.0);
    let first = loss.grid.floor_index(window_lo).min(loss.grid.steps);
    let mut acc = 0.0;
    for i in first.max(1)..=loss.grid.floor_index(t) {
        let ti = loss.grid.time(i);
        if ti > t {
            break;
        }
        acc += kernel.eval(t - ti) * (loss.values[i] - loss.values[i - 1]);
    }
    Ok(acc)
}

/// Warm derivative at every grid node; used by the drift environments.
pub fn smoothed_loss_derivative_warm_trajectory(
    loss: &StepFunction,
    kernel: &SmoothingKernel,
) -> Vec<f64> {
    (0..loss.grid.len())
        .map(|j| {
            smoothed_loss_derivative_warm(loss, kernel, loss.grid.time(j))
                .expect("grid node inside horizon")
        })
        .collect()
}
