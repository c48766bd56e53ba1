//! Scenario coefficients and Euler–Maruyama simulation of absorbed paths.
//!
//! A [`StateModel`] bundles the drift `b = b1(t,x,m) + b2(t) a`, the bounded
//! Lipschitz observable `h` through which the population enters the drift,
//! the loss loading `eta(t)`, constant full-rank diffusion matrices for the
//! idiosyncratic and common noise, the running cost `f`, the terminal payoff
//! `G`, the open domain whose exit absorbs an agent, and the compact control
//! box. The effective drift seen by a simulated agent is
//!
//! ```text
//! b~(t, x, a) = b1(t,x,<h,mu_t>) + b2(t) a + eta(t) * d/dt smoothed_loss(t)
//! ```
//!
//! where the smoothed-loss derivative is computed from the per-atom mass
//! trajectory of the population flow (see [`AtomEnv`]).
//!
//! Absorption is monitored at grid points: the first node outside the domain
//! freezes the path. An optional Brownian-bridge correction estimates
//! between-node crossings of box faces.

use crate::grid::TimeGrid;
use crate::kernel::{bump_kernel, SmoothingKernel, StepFunction};
use crate::rng::{substream, tag};
use crate::{MfgError, Result};
use nalgebra::DMatrix;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// A realization of the common noise on the fine grid, stored as increments
/// (`steps * dim`, step-major). Shared by reference between paths that live
/// on the same realization.
#[derive(Clone, Debug, PartialEq)]
pub struct CommonPath {
    pub dim: usize,
    pub increments: Vec<f64>,
}

impl CommonPath {
    pub fn zeros(grid: &TimeGrid, dim: usize) -> Self {
        CommonPath {
            dim,
            increments: vec![0.0; grid.steps * dim],
        }
    }

    #[inline]
    pub fn increment(&self, j: usize) -> &[f64] {
        &self.increments[j * self.dim..(j + 1) * self.dim]
    }

    /// Path values at grid nodes (cumulative sums from zero).
    pub fn values(&self, grid: &TimeGrid) -> Vec<f64> {
        let mut out = vec![0.0; (grid.steps + 1) * self.dim];
        for j in 0..grid.steps {
            for c in 0..self.dim {
                out[(j + 1) * self.dim + c] =
                    out[j * self.dim + c] + self.increments[j * self.dim + c];
            }
        }
        out
    }
}

/// How the common noise is supplied to a batch of simulated paths.
#[derive(Clone)]
pub enum W0Mode {
    /// Each path draws its own unconditional realization.
    Fresh,
    /// All paths share one realization.
    Shared(Arc<CommonPath>),
    /// Path `i` uses the `i`-th realization (conditional draws).
    PerPath(Vec<Arc<CommonPath>>),
}

/// Open box domain; `None` bounds are unbounded sides. Membership is strict,
/// matching an open set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Domain {
    pub lower: Vec<Option<f64>>,
    pub upper: Vec<Option<f64>>,
}

impl Domain {
    pub fn positive_orthant(dim: usize) -> Self {
        Domain {
            lower: vec![Some(0.0); dim],
            upper: vec![None; dim],
        }
    }

    pub fn centered_box(dim: usize, half_width: f64) -> Self {
        Domain {
            lower: vec![Some(-half_width); dim],
            upper: vec![Some(half_width); dim],
        }
    }

    #[inline]
    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().enumerate().all(|(i, &xi)| {
            self.lower[i].map_or(true, |l| xi > l) && self.upper[i].map_or(true, |u| xi < u)
        })
    }
}

/// Compact product-of-intervals control set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ControlBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ControlBox {
    pub fn interval(lo: f64, hi: f64) -> Self {
        ControlBox {
            lower: vec![lo],
            upper: vec![hi],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, a: &[f64]) -> bool {
        a.len() == self.lower.len()
            && a.iter()
                .enumerate()
                .all(|(i, &ai)| ai >= self.lower[i] - 1e-12 && ai <= self.upper[i] + 1e-12)
    }

    pub fn project(&self, a: &mut [f64]) {
        for (i, ai) in a.iter_mut().enumerate() {
            *ai = ai.clamp(self.lower[i], self.upper[i]);
        }
    }
}

pub type DriftFn = Arc<dyn Fn(f64, &[f64], f64, &mut [f64]) + Send + Sync>;
pub type ObservableFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type LoadingFn = Arc<dyn Fn(f64, &mut [f64]) + Send + Sync>;
pub type TerminalFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
pub type CostFn = Arc<dyn Fn(f64, &[f64], f64, &[f64]) -> f64 + Send + Sync>;
pub type InitSampler = Arc<dyn Fn(&mut dyn RngCore, &mut [f64]) + Send + Sync>;

/// Control loading `b2(t)`, a `dim x control_dim` matrix.
#[derive(Clone)]
pub enum ControlLoading {
    Constant(DMatrix<f64>),
    TimeVarying(Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>),
}

impl ControlLoading {
    pub fn at(&self, t: f64) -> DMatrix<f64> {
        match self {
            ControlLoading::Constant(m) => m.clone(),
            ControlLoading::TimeVarying(f) => f(t),
        }
    }

    /// Add `b2(t) a` into `out` without cloning in the constant case.
    pub fn add_control(&self, t: f64, a: &[f64], out: &mut [f64]) {
        match self {
            ControlLoading::Constant(m) => mat_vec_add(m, a, out),
            ControlLoading::TimeVarying(f) => mat_vec_add(&f(t), a, out),
        }
    }
}

/// Running cost `f(t, x, m, a)`, strictly concave in `a`.
#[derive(Clone)]
pub enum RunningCost {
    /// `-weight * |a|^2`; admits the closed-form Hamiltonian maximizer.
    Quadratic { weight: f64 },
    Custom(CostFn),
}

impl RunningCost {
    pub fn eval(&self, t: f64, x: &[f64], m: f64, a: &[f64]) -> f64 {
        match self {
            RunningCost::Quadratic { weight } => -weight * a.iter().map(|ai| ai * ai).sum::<f64>(),
            RunningCost::Custom(f) => f(t, x, m, a),
        }
    }
}

/// Declared bounds on the coefficients, used for validation and for the
/// Girsanov exponent bound.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ModelBounds {
    /// Bound on `|b1(t,x,m)|`.
    pub b1: f64,
    /// Operator-norm bound on `b2(t)`.
    pub b2: f64,
    /// Bound on `|h|`.
    pub h: f64,
    /// Bound on `|eta(t)|`.
    pub eta: f64,
    /// Bound on `|f|` over the control box.
    pub f: f64,
    /// Bound on `|G|` over the domain closure.
    pub g: f64,
}

#[inline]
pub(crate) fn mat_vec_add(m: &DMatrix<f64>, v: &[f64], out: &mut [f64]) {
    for r in 0..out.len() {
        let mut acc = 0.0;
        for (c, vc) in v.iter().enumerate() {
            acc += m[(r, c)] * vc;
        }
        out[r] += acc;
    }
}

#[inline]
pub(crate) fn mat_vec(m: &DMatrix<f64>, v: &[f64], out: &mut [f64]) {
    out.fill(0.0);
    mat_vec_add(m, v, out);
}

/// Full scenario definition. Immutable after construction; closures must be
/// pure, which makes the model safe to share across worker threads.
#[derive(Clone)]
pub struct StateModel {
    pub dim: usize,
    pub control_dim: usize,
    pub grid: TimeGrid,
    /// `b1(t, x, m)` written into the output slice.
    pub drift_base: DriftFn,
    /// `b2(t)`.
    pub control_loading: ControlLoading,
    /// Observable `h` pairing the flow into the drift.
    pub observable: ObservableFn,
    /// Loss loading `eta(t)` written into the output slice.
    pub boundary_loading: LoadingFn,
    pub sigma: DMatrix<f64>,
    pub sigma0: DMatrix<f64>,
    pub running_cost: RunningCost,
    /// Terminal payoff `G(tau, x)`.
    pub terminal_payoff: TerminalFn,
    pub domain: Domain,
    pub control_box: ControlBox,
    pub initial_sampler: InitSampler,
    pub kernel: SmoothingKernel,
    pub bounds: ModelBounds,
}

impl StateModel {
    pub fn sigma_inverse(&self) -> Result<DMatrix<f64>> {
        self.sigma
            .clone()
            .try_inverse()
            .ok_or_else(|| MfgError::InvalidParameter("sigma is singular".into()))
    }

    /// Largest singular value of `sigma^-1`, i.e. `1 / smallest sv of sigma`.
    pub fn sigma_inv_norm(&self) -> Result<f64> {
        let svs = self.sigma.clone().svd(false, false).singular_values;
        let min = svs.iter().cloned().fold(f64::INFINITY, f64::min);
        if min <= 0.0 || !min.is_finite() {
            return Err(MfgError::InvalidParameter("sigma is singular".into()));
        }
        Ok(1.0 / min)
    }

    /// Upper bound for `|sigma^-1 b~|` over all admissible arguments; the
    /// Girsanov exponent constant.
    pub fn girsanov_bound(&self) -> Result<f64> {
        let a_norm = self
            .control_box
            .lower
            .iter()
            .zip(&self.control_box.upper)
            .map(|(l, u)| l.abs().max(u.abs()).powi(2))
            .sum::<f64>()
            .sqrt();
        // warm convolution: |loss'| <= k(0) times the mass dropped in the
        // window, and the drop is at most one
        let sup_b = self.bounds.b1 + self.bounds.b2 * a_norm + self.bounds.eta * self.kernel.k0();
        Ok(self.sigma_inv_norm()? * sup_b)
    }

    /// Check the declared bounds by sampling random arguments. `x` is drawn
    /// uniformly in `[-radius, radius]^d` (projected on the domain closure
    /// for `G`), `m` in `[-h_bound, h_bound]`, `a` in the control box.
    pub fn check_bounds(&self, samples: usize, radius: f64, seed: u64) -> Result<()> {
        let mut rng = substream(seed, tag::BOUNDS, 0);
        let mut x = vec![0.0; self.dim];
        let mut buf = vec![0.0; self.dim];
        let mut a = vec![0.0; self.control_dim];
        for _ in 0..samples {
            let t: f64 = rng.random_range(0.0..=self.grid.t_end);
            for xi in x.iter_mut() {
                *xi = rng.random_range(-radius..=radius);
            }
            let m: f64 = rng.random_range(-self.bounds.h..=self.bounds.h);
            for (i, ai) in a.iter_mut().enumerate() {
                *ai = rng.random_range(self.control_box.lower[i]..=self.control_box.upper[i]);
            }
            (self.drift_base)(t, &x, m, &mut buf);
            let b1_norm = buf.iter().map(|v| v * v).sum::<f64>().sqrt();
            if b1_norm > self.bounds.b1 + 1e-9 {
                return Err(MfgError::InvalidParameter(format!(
                    "drift bound violated: |b1| = {b1_norm} > {}",
                    self.bounds.b1
                )));
            }
            let h = (self.observable)(&x);
            if h.abs() > self.bounds.h + 1e-9 {
                return Err(MfgError::InvalidParameter(format!(
                    "observable bound violated: |h| = {} > {}",
                    h.abs(),
                    self.bounds.h
                )));
            }
            (self.boundary_loading)(t, &mut buf);
            let eta_norm = buf.iter().map(|v| v * v).sum::<f64>().sqrt();
            if eta_norm > self.bounds.eta + 1e-9 {
                return Err(MfgError::InvalidParameter(format!(
                    "loss loading bound violated: |eta| = {eta_norm} > {}",
                    self.bounds.eta
                )));
            }
            let f = self.running_cost.eval(t, &x, m, &a);
            if f.abs() > self.bounds.f + 1e-9 {
                return Err(MfgError::InvalidParameter(format!(
                    "running cost bound violated: |f| = {} > {}",
                    f.abs(),
                    self.bounds.f
                )));
            }
            let mut xd = x.clone();
            for (i, xi) in xd.iter_mut().enumerate() {
                if let Some(l) = self.domain.lower[i] {
                    *xi = xi.max(l);
                }
                if let Some(u) = self.domain.upper[i] {
                    *xi = xi.min(u);
                }
            }
            let g = (self.terminal_payoff)(t, &xd);
            if g.abs() > self.bounds.g + 1e-9 {
                return Err(MfgError::InvalidParameter(format!(
                    "terminal payoff bound violated: |G| = {} > {}",
                    g.abs(),
                    self.bounds.g
                )));
            }
        }
        let cond_check = |m: &DMatrix<f64>, name: &str| -> Result<()> {
            let svs = m.clone().svd(false, false).singular_values;
            let max = svs.iter().cloned().fold(0.0, f64::max);
            let min = svs.iter().cloned().fold(f64::INFINITY, f64::min);
            if !(min > 0.0) || !(max / min).is_finite() {
                return Err(MfgError::InvalidParameter(format!(
                    "{name} is rank deficient"
                )));
            }
            Ok(())
        };
        cond_check(&self.sigma, "sigma")?;
        cond_check(&self.sigma0, "sigma0")?;
        Ok(())
    }
}

/// Per-atom view of a flow: exactly the trajectories the drift consumes.
///
/// `loss_deriv[j]` is the derivative of the smoothed mass trajectory at grid
/// node `j`, precomputed once so drift calls stay cheap.
#[derive(Clone, Debug)]
pub struct AtomEnv {
    pub grid: TimeGrid,
    /// `<1, mu_t>` at grid nodes.
    pub mass: Vec<f64>,
    /// `<h, mu_t>` at grid nodes.
    pub h_pair: Vec<f64>,
    /// Smoothed-loss derivative at grid nodes.
    pub loss_deriv: Vec<f64>,
}

impl AtomEnv {
    /// Build from mass and `h` pairings. The smoothed-loss derivative uses
    /// the warm convolution (mass held at its initial value before time
    /// zero), so it reacts to absorption only, not to the window start-up.
    pub fn from_trajectories(
        kernel: &SmoothingKernel,
        grid: TimeGrid,
        mass: Vec<f64>,
        h_pair: Vec<f64>,
    ) -> Result<Self> {
        let loss = StepFunction::new(grid, mass.clone())?;
        let loss_deriv = crate::kernel::smoothed_loss_derivative_warm_trajectory(&loss, kernel);
        Ok(AtomEnv {
            grid,
            mass,
            h_pair,
            loss_deriv,
        })
    }

    /// Constant-mass environment (its smoothed-loss derivative vanishes).
    pub fn constant(kernel: &SmoothingKernel, grid: TimeGrid, mass: f64, h_pair: f64) -> Self {
        AtomEnv::from_trajectories(
            kernel,
            grid,
            vec![mass; grid.len()],
            vec![h_pair; grid.len()],
        )
        .expect("constant trajectories fit the grid")
    }
}

/// Effective drift `b~ = b1 + b2 a + eta * loss'` at grid node `j`.
pub fn drift_tilde(
    model: &StateModel,
    j: usize,
    x: &[f64],
    env: &AtomEnv,
    a: &[f64],
    out: &mut [f64],
) -> Result<()> {
    if !model.control_box.contains(a) {
        return Err(MfgError::InvalidControl(a.to_vec()));
    }
    drift_tilde_raw(model, j, x, env, a, out);
    Ok(())
}

#[inline]
pub(crate) fn drift_tilde_raw(
    model: &StateModel,
    j: usize,
    x: &[f64],
    env: &AtomEnv,
    a: &[f64],
    out: &mut [f64],
) {
    let t = model.grid.time(j);
    (model.drift_base)(t, x, env.h_pair[j], out);
    model.control_loading.add_control(t, a, out);
    let ld = env.loss_deriv[j];
    if ld != 0.0 {
        let mut eta = [0.0; 8];
        let eta = &mut eta[..model.dim];
        (model.boundary_loading)(t, eta);
        for (o, e) in out.iter_mut().zip(eta.iter()) {
            *o += e * ld;
        }
    }
}

/// One simulated agent: state values at grid nodes, recorded idiosyncratic
/// increments, a shared reference to its common-noise realization, the exit
/// index and the control trace.
#[derive(Clone, Debug)]
pub struct ParticlePath {
    pub dim: usize,
    pub control_dim: usize,
    /// `(steps + 1) * dim`; frozen at the exit value after absorption.
    pub values: Vec<f64>,
    /// Idiosyncratic Brownian increments, `steps * dim`.
    pub dw: Vec<f64>,
    pub w0: Arc<CommonPath>,
    /// Grid index of the exit; `steps` when the path never leaves the domain.
    pub exit_idx: usize,
    pub absorbed: bool,
    /// `steps * control_dim`; empty for uncontrolled reference paths.
    pub controls: Vec<f64>,
}

impl ParticlePath {
    #[inline]
    pub fn state(&self, j: usize) -> &[f64] {
        &self.values[j * self.dim..(j + 1) * self.dim]
    }

    /// Alive at node `j` means not yet absorbed there; paths that never exit
    /// count as alive at every node including `T`.
    #[inline]
    pub fn alive_at(&self, j: usize) -> bool {
        !self.absorbed || j < self.exit_idx
    }

    pub fn exit_time(&self, grid: &TimeGrid) -> f64 {
        grid.time(self.exit_idx)
    }

    pub fn exit_state(&self) -> &[f64] {
        self.state(self.exit_idx)
    }

    pub fn control(&self, j: usize) -> &[f64] {
        &self.controls[j * self.control_dim..(j + 1) * self.control_dim]
    }
}

/// First grid node outside the domain, with the convention that a path never
/// leaving the domain exits at `T`.
pub fn first_exit(values: &[f64], dim: usize, domain: &Domain, grid: &TimeGrid) -> (usize, bool) {
    for j in 0..=grid.steps {
        if !domain.contains(&values[j * dim..(j + 1) * dim]) {
            return (j, true);
        }
    }
    (grid.steps, false)
}

/// Evaluation context handed to control policies.
pub struct ControlCtx<'a> {
    pub path_idx: usize,
    pub step: usize,
    pub time: f64,
    /// Quantizer cells of the coarse common-noise increments observed so far
    /// (empty when the simulation carries no noise grid).
    pub w0_cells_prefix: &'a [i64],
}

/// Feedback rule used during simulation. Implementations must return values
/// inside the control box.
pub trait ControlPolicy: Send + Sync {
    fn control(&self, ctx: &ControlCtx, x: &[f64], out: &mut [f64]);
}

/// Constant control.
pub struct ConstantPolicy(pub Vec<f64>);

impl ControlPolicy for ConstantPolicy {
    fn control(&self, _ctx: &ControlCtx, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.0);
    }
}

/// Uniform draws in a sub-box, constant per path or redrawn every step.
pub struct RandomizedBoxPolicy {
    pub seed: u64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub per_step: bool,
}

impl ControlPolicy for RandomizedBoxPolicy {
    fn control(&self, ctx: &ControlCtx, _x: &[f64], out: &mut [f64]) {
        let idx = if self.per_step {
            ((ctx.path_idx as u64) << 20) | ctx.step as u64
        } else {
            ctx.path_idx as u64
        };
        let mut rng = substream(self.seed, tag::POLICY, idx);
        for (i, o) in out.iter_mut().enumerate() {
            *o = if self.upper[i] > self.lower[i] {
                rng.random_range(self.lower[i]..=self.upper[i])
            } else {
                self.lower[i]
            };
        }
    }
}

/// Simulation options.
#[derive(Clone, Debug, Default)]
pub struct SimOptions {
    /// Brownian-bridge correction for between-node crossings of finite box
    /// faces. Off by default; discrete monitoring is the documented scheme.
    pub bridge_correction: bool,
    /// Noise-grid spec used to expose coarse-cell prefixes to policies.
    pub ctx_grid: Option<crate::noise_grid::GridSpec>,
}

fn w0_cells_for(w0: &CommonPath, grid: &TimeGrid, spec: &crate::noise_grid::GridSpec) -> Vec<i64> {
    let coarse = crate::noise_grid::coarse_increments(w0, grid, spec.n_coarse);
    crate::noise_grid::discretize_increments(&coarse, w0.dim, spec).signature
}

#[allow(clippy::too_many_arguments)]
fn advance_one_path(
    model: &StateModel,
    env: Option<&AtomEnv>,
    policy: Option<&dyn ControlPolicy>,
    w0: Arc<CommonPath>,
    path_idx: usize,
    seed: u64,
    opts: &SimOptions,
) -> Result<ParticlePath> {
    let grid = &model.grid;
    let d = model.dim;
    let k = model.control_dim;
    let dt = grid.dt();
    let sq_dt = dt.sqrt();
    let steps = grid.steps;

    let mut init_rng = substream(seed, tag::INIT, path_idx as u64);
    let mut idio_rng = substream(seed, tag::IDIO, path_idx as u64);

    let mut values = vec![0.0; (steps + 1) * d];
    let mut dw = vec![0.0; steps * d];
    let controlled = policy.is_some();
    let mut controls = if controlled {
        vec![0.0; steps * k]
    } else {
        Vec::new()
    };

    (model.initial_sampler)(&mut init_rng, &mut values[0..d]);

    let cells = opts
        .ctx_grid
        .as_ref()
        .map(|spec| (w0_cells_for(&w0, grid, spec), spec.clone()));

    // Per-axis Gaussian step variance, for the bridge correction.
    let axis_var: Vec<f64> = (0..d)
        .map(|r| {
            (0..d)
                .map(|c| model.sigma[(r, c)].powi(2) + model.sigma0[(r, c)].powi(2))
                .sum::<f64>()
        })
        .collect();

    let mut exit_idx = steps;
    let mut absorbed = false;
    if !model.domain.contains(&values[0..d]) {
        exit_idx = 0;
        absorbed = true;
    }

    let mut drift = vec![0.0; d];
    let mut a = vec![0.0; k];
    let mut x_now = vec![0.0; d];
    for j in 0..steps {
        if absorbed {
            let frozen: Vec<f64> = values[exit_idx * d..(exit_idx + 1) * d].to_vec();
            values[(j + 1) * d..(j + 2) * d].copy_from_slice(&frozen);
            continue;
        }
        let t = grid.time(j);
        x_now.copy_from_slice(&values[j * d..(j + 1) * d]);
        if controlled {
            let prefix_len = cells
                .as_ref()
                .map(|(_, spec)| {
                    let comps = spec.quantized_components(d).len();
                    let done = j * spec.n_coarse / steps;
                    done * comps
                })
                .unwrap_or(0);
            let empty: [i64; 0] = [];
            let ctx = ControlCtx {
                path_idx,
                step: j,
                time: t,
                w0_cells_prefix: cells
                    .as_ref()
                    .map(|(sig, _)| &sig[..prefix_len])
                    .unwrap_or(&empty),
            };
            let policy = policy.expect("controlled simulation has a policy");
            policy.control(&ctx, &x_now, &mut a);
            model.control_box.project(&mut a);
            controls[j * k..(j + 1) * k].copy_from_slice(&a);
            let env = env.expect("controlled simulation has an environment");
            drift_tilde_raw(model, j, &x_now, env, &a, &mut drift);
        } else {
            drift.fill(0.0);
        }
        for c in 0..d {
            let z: f64 = idio_rng.sample(StandardNormal);
            dw[j * d + c] = sq_dt * z;
        }
        let dw0_j = w0.increment(j);
        {
            let (prev, rest) = values.split_at_mut((j + 1) * d);
            let x_prev = &prev[j * d..(j + 1) * d];
            let x_next = &mut rest[0..d];
            for c in 0..d {
                x_next[c] = x_prev[c] + drift[c] * dt;
            }
            mat_vec_add(&model.sigma, &dw[j * d..(j + 1) * d], x_next);
            mat_vec_add(&model.sigma0, dw0_j, x_next);
            for &v in x_next.iter() {
                if !v.is_finite() || v.abs() > 1e10 {
                    return Err(MfgError::NumericalBlowup { step: j + 1 });
                }
            }
        }
        let x_next = &values[(j + 1) * d..(j + 2) * d];
        if !model.domain.contains(x_next) {
            exit_idx = j + 1;
            absorbed = true;
            continue;
        }
        if opts.bridge_correction {
            // Crossing probability of each finite face between nodes.
            let mut p_stay = 1.0;
            for c in 0..d {
                if axis_var[c] <= 0.0 {
                    continue;
                }
                if let Some(l) = model.domain.lower[c] {
                    let (da, db) = (x_now[c] - l, x_next[c] - l);
                    p_stay *= 1.0 - (-2.0 * da * db / (axis_var[c] * dt)).exp();
                }
                if let Some(u) = model.domain.upper[c] {
                    let (da, db) = (u - x_now[c], u - x_next[c]);
                    p_stay *= 1.0 - (-2.0 * da * db / (axis_var[c] * dt)).exp();
                }
            }
            let u: f64 = idio_rng.random_range(0.0..1.0);
            if u > p_stay {
                exit_idx = j + 1;
                absorbed = true;
                continue;
            }
        }
    }

    Ok(ParticlePath {
        dim: d,
        control_dim: k,
        values,
        dw,
        w0,
        exit_idx,
        absorbed,
        controls,
    })
}

fn resolve_w0(model: &StateModel, mode: &W0Mode, seed: u64, path_idx: usize) -> Arc<CommonPath> {
    match mode {
        W0Mode::Fresh => {
            let mut rng = substream(seed, tag::COMMON, path_idx as u64);
            Arc::new(crate::noise_grid::fresh_common_path(
                &model.grid,
                model.dim,
                &mut rng,
            ))
        }
        W0Mode::Shared(p) => p.clone(),
        W0Mode::PerPath(v) => v[path_idx].clone(),
    }
}

/// Simulate controlled absorbed paths against a frozen flow environment.
///
/// Euler–Maruyama: `X_{j+1} = X_j + b~(t_j, X_j, a_j) dt + sigma dW + sigma0 dW0`,
/// absorption monitored at grid points. The same `(seed, path index)` always
/// reproduces the same path regardless of thread count.
pub fn simulate_paths(
    model: &StateModel,
    env: &AtomEnv,
    policy: &dyn ControlPolicy,
    w0: &W0Mode,
    n_paths: usize,
    seed: u64,
    opts: &SimOptions,
) -> Result<Vec<ParticlePath>> {
    let results = crate::parallel::map_indexed(n_paths, |i| {
        let w0_i = resolve_w0(model, w0, seed, i);
        advance_one_path(model, Some(env), Some(policy), w0_i, i, seed, opts)
    });
    results.into_iter().collect()
}

/// Simulate the driftless reference dynamics `X = xi + sigma W + sigma0 W0`
/// used by the weak-formulation solver; absorption is still monitored.
pub fn simulate_uncontrolled(
    model: &StateModel,
    w0: &W0Mode,
    n_paths: usize,
    seed: u64,
    opts: &SimOptions,
) -> Result<Vec<ParticlePath>> {
    let results = crate::parallel::map_indexed(n_paths, |i| {
        let w0_i = resolve_w0(model, w0, seed, i);
        advance_one_path(model, None, None, w0_i, i, seed, opts)
    });
    results.into_iter().collect()
}

/// Realized payoff of one path: running cost while alive plus the terminal
/// payoff at the exit.
pub fn payoff_sample(model: &StateModel, path: &ParticlePath, env: &AtomEnv) -> Result<f64> {
    if path.controls.is_empty() {
        return Err(MfgError::Domain(
            "payoff requires a control trace; path was simulated uncontrolled".into(),
        ));
    }
    let dt = model.grid.dt();
    let last = if path.absorbed {
        path.exit_idx
    } else {
        model.grid.steps
    };
    let mut acc = 0.0;
    for j in 0..last {
        let t = model.grid.time(j);
        acc += model
            .running_cost
            .eval(t, path.state(j), env.h_pair[j], path.control(j))
            * dt;
    }
    let tau = path.exit_time(&model.grid);
    acc += (model.terminal_payoff)(tau, path.exit_state());
    Ok(acc)
}

/// Parameters of the bank-run scenario.
///
/// State `(S, Y)`: bank asset value and depositor trust. The agent runs when
/// `Y` hits zero, the bank defaults when `S` hits zero; both absorb. The
/// payoff is the covered part of the deposit, `min(e^{r tau} D0, S_tau)`.
/// Small secondary diffusion entries (`sigma_s_idio`, `sigma_y_common`) keep
/// both diffusion matrices full rank as the model requires.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankrunParams {
    pub t_end: f64,
    pub m_steps: usize,
    pub s0: f64,
    pub y0: f64,
    /// Half-width of the uniform jitter around `s0` in the initial law.
    pub s0_jitter: f64,
    pub y0_jitter: f64,
    /// Initial deposit `D0`.
    pub deposit: f64,
    /// Interest rate `r`.
    pub rate: f64,
    /// Asset drift.
    pub mu_drift: f64,
    /// Common volatility of `S`.
    pub sigma0_s: f64,
    /// Idiosyncratic volatility of `S` (perceived value noise).
    pub sigma_s_idio: f64,
    /// Idiosyncratic volatility of `Y`.
    pub sigma_y: f64,
    /// Common volatility of `Y`.
    pub sigma_y_common: f64,
    /// Threshold in the trust drift.
    pub trust_threshold: f64,
    /// Amplitude of the bounded trust response.
    pub gamma_scale: f64,
    /// Length scale of the trust response.
    pub gamma_slope: f64,
    /// Sensitivity of trust to the remaining population.
    pub lambda: f64,
    pub control_min: f64,
    pub control_max: f64,
    /// Weight of the quadratic effort cost.
    pub control_cost: f64,
    /// Smoothing window of the loss kernel.
    pub epsilon: f64,
    pub bridge_correction: bool,
}

impl Default for BankrunParams {
    fn default() -> Self {
        BankrunParams {
            t_end: 1.0,
            m_steps: 100,
            s0: 1.2,
            y0: 0.5,
            s0_jitter: 0.1,
            y0_jitter: 0.1,
            deposit: 0.6,
            rate: 0.05,
            mu_drift: 0.02,
            sigma0_s: 0.15,
            sigma_s_idio: 0.25,
            sigma_y: 0.5,
            sigma_y_common: 0.05,
            trust_threshold: 1.0,
            gamma_scale: 0.2,
            gamma_slope: 0.5,
            lambda: 0.2,
            control_min: -0.3,
            control_max: 0.3,
            control_cost: 0.5,
            epsilon: 0.25,
            bridge_correction: false,
        }
    }
}

/// Build the bank-run [`StateModel`] from its parameters.
pub fn bankrun_model(p: &BankrunParams) -> Result<StateModel> {
    let positives = [
        ("t_end", p.t_end),
        ("s0", p.s0),
        ("y0", p.y0),
        ("deposit", p.deposit),
        ("rate", p.rate),
        ("sigma0_s", p.sigma0_s),
        ("sigma_s_idio", p.sigma_s_idio),
        ("sigma_y", p.sigma_y),
        ("sigma_y_common", p.sigma_y_common),
        ("gamma_slope", p.gamma_slope),
        ("control_cost", p.control_cost),
        ("epsilon", p.epsilon),
    ];
    for (name, v) in positives {
        if !(v > 0.0) || !v.is_finite() {
            return Err(MfgError::InvalidParameter(format!(
                "{name} must be positive, got {v}"
            )));
        }
    }
    for (name, v) in [
        ("s0_jitter", p.s0_jitter),
        ("y0_jitter", p.y0_jitter),
        ("lambda", p.lambda),
        ("gamma_scale", p.gamma_scale),
    ] {
        if v < 0.0 || !v.is_finite() {
            return Err(MfgError::InvalidParameter(format!(
                "{name} must be non-negative, got {v}"
            )));
        }
    }
    if p.s0_jitter >= p.s0 || p.y0_jitter >= p.y0 {
        return Err(MfgError::InvalidParameter(
            "initial jitter must keep samples inside the domain".into(),
        ));
    }
    if p.control_min > p.control_max {
        return Err(MfgError::InvalidParameter(
            "control_min must not exceed control_max".into(),
        ));
    }
    let grid = TimeGrid::new(p.t_end, p.m_steps)?;
    let kernel = bump_kernel(p.epsilon)?;

    let (mu, gamma0, gslope, thr, lambda) = (
        p.mu_drift,
        p.gamma_scale,
        p.gamma_slope,
        p.trust_threshold,
        p.lambda,
    );
    let drift_base: DriftFn = Arc::new(move |_t, x, m, out: &mut [f64]| {
        out[0] = mu;
        out[1] = gamma0 * ((x[0] - thr) / gslope).tanh() - lambda * m;
    });
    let control_loading = ControlLoading::Constant(DMatrix::from_row_slice(2, 1, &[0.0, 1.0]));
    let observable: ObservableFn = Arc::new(|_x| 1.0);
    let rate = p.rate;
    let boundary_loading: LoadingFn = Arc::new(move |t, out: &mut [f64]| {
        out[0] = (rate * t).exp();
        out[1] = 0.0;
    });
    let sigma = DMatrix::from_row_slice(2, 2, &[p.sigma_s_idio, 0.0, 0.0, p.sigma_y]);
    let sigma0 = DMatrix::from_row_slice(2, 2, &[p.sigma0_s, 0.0, 0.0, p.sigma_y_common]);
    let deposit = p.deposit;
    let terminal_payoff: TerminalFn =
        Arc::new(move |tau, x| ((rate * tau).exp() * deposit).min(x[0]));
    let (s0, y0, sj, yj) = (p.s0, p.y0, p.s0_jitter, p.y0_jitter);
    let initial_sampler: InitSampler = Arc::new(move |rng: &mut dyn RngCore, out: &mut [f64]| {
        out[0] = s0 + sj * rng.random_range(-1.0..=1.0);
        out[1] = y0 + yj * rng.random_range(-1.0..=1.0);
    });

    let a_max = p.control_min.abs().max(p.control_max.abs());
    let bounds = ModelBounds {
        b1: (mu * mu + (gamma0 + lambda) * (gamma0 + lambda)).sqrt() + 1e-9,
        b2: 1.0,
        h: 1.0,
        eta: (rate * p.t_end).exp() + 1e-9,
        f: p.control_cost * a_max * a_max + 1e-9,
        g: (rate * p.t_end).exp() * deposit + 1e-9,
    };

    Ok(StateModel {
        dim: 2,
        control_dim: 1,
        grid,
        drift_base,
        control_loading,
        observable,
        boundary_loading,
        sigma,
        sigma0,
        running_cost: RunningCost::Quadratic {
            weight: p.control_cost,
        },
        terminal_payoff,
        domain: Domain::positive_orthant(2),
        control_box: ControlBox::interval(p.control_min, p.control_max),
        initial_sampler,
        kernel,
        bounds,
    })
}
