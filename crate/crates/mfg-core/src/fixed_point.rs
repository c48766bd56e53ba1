//! Damped fixed-point iteration on flows of conditional sub-probabilities.
//!
//! One evaluation of the flow map does, independently per common-noise atom:
//!
//! 1. draw common-noise realizations conditionally on the atom and simulate
//!    uncontrolled reference paths on them;
//! 2. solve the backward equation with the maximized-Hamiltonian driver
//!    against the frozen input flow and extract the feedback policy;
//! 3. push the optimally controlled law forward — either by direct controlled
//!    simulation with common random numbers (default), or by reweighting the
//!    uncontrolled paths with the Girsanov density (validation mode);
//! 4. rebuild the per-atom empirical flow.
//!
//! The iteration mixes the output into the current flow with weight `rho` and
//! stops when the fixed-point residual (battery distance between input and
//! output) falls below the tolerance. Existence theory gives no contraction
//! rate, so non-convergence at the iteration cap is reported honestly via a
//! flag instead of an error. Common random numbers are reused across
//! iterations so the residual measures flow change, not Monte Carlo noise;
//! the admissible tolerance is floored by the distance between two
//! independent-seed evaluations of the map at the same flow.

use crate::bsde::{solve_bsde, BsdeOptions, Driver, FeedbackPolicy};
use crate::dynamics::{
    simulate_paths, simulate_uncontrolled, AtomEnv, ControlCtx, ControlPolicy, ParticlePath,
    SimOptions, StateModel, W0Mode,
};
use crate::measure_flow::{empirical_flow, Battery, FlowBuildOptions, SubProbabilityFlow};
use crate::noise_grid::{bridge_fine_path, CommonNoiseGrid};
use crate::rng::{derive_seed, substream, tag};
use crate::stats::mean_se;
use crate::{MfgError, Result};
use serde::Serialize;
use std::sync::Arc;

/// Exponential change-of-measure density along one uncontrolled path:
/// `exp(sum v_j . dW_j - 1/2 sum |v_j|^2 dt)` with `v = sigma^-1 b~` evaluated
/// along the path under the given policy, accumulated while the path is
/// alive.
pub fn girsanov_density(
    model: &StateModel,
    env: &AtomEnv,
    path: &ParticlePath,
    policy: &dyn ControlPolicy,
    path_idx: usize,
) -> Result<f64> {
    let sigma_inv = model.sigma_inverse()?;
    Ok(girsanov_density_with(
        model, env, path, policy, path_idx, &sigma_inv,
    ))
}

fn girsanov_density_with(
    model: &StateModel,
    env: &AtomEnv,
    path: &ParticlePath,
    policy: &dyn ControlPolicy,
    path_idx: usize,
    sigma_inv: &nalgebra::DMatrix<f64>,
) -> f64 {
    let d = model.dim;
    let dt = model.grid.dt();
    let mut log_density = 0.0;
    let mut a = vec![0.0; model.control_dim];
    let mut btilde = vec![0.0; d];
    let mut v = vec![0.0; d];
    let empty: [i64; 0] = [];
    for j in 0..model.grid.steps {
        if !path.alive_at(j) {
            break;
        }
        let x = path.state(j);
        let ctx = ControlCtx {
            path_idx,
            step: j,
            time: model.grid.time(j),
            w0_cells_prefix: &empty,
        };
        policy.control(&ctx, x, &mut a);
        model.control_box.project(&mut a);
        crate::dynamics::drift_tilde_raw(model, j, x, env, &a, &mut btilde);
        crate::dynamics::mat_vec(sigma_inv, &btilde, &mut v);
        let dw = &path.dw[j * d..(j + 1) * d];
        let mut dot = 0.0;
        let mut sq = 0.0;
        for c in 0..d {
            dot += v[c] * dw[c];
            sq += v[c] * v[c];
        }
        log_density += dot - 0.5 * sq * dt;
    }
    log_density.exp()
}

/// Densities of a whole batch (inverse computed once).
pub fn girsanov_densities(
    model: &StateModel,
    env: &AtomEnv,
    paths: &[ParticlePath],
    policy: &dyn ControlPolicy,
) -> Result<Vec<f64>> {
    let sigma_inv = model.sigma_inverse()?;
    Ok(paths
        .iter()
        .enumerate()
        .map(|(i, p)| girsanov_density_with(model, env, p, policy, i, &sigma_inv))
        .collect())
}

/// Per-atom density diagnostics.
#[derive(Clone, Debug, Serialize)]
pub struct DensityStats {
    pub atom: usize,
    pub mean: f64,
    pub se: f64,
    pub second_moment: f64,
}

/// Estimator used for the forward half of the flow map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum PhiMode {
    /// Simulate the controlled dynamics directly (default).
    Direct,
    /// Reweight the uncontrolled paths by the Girsanov density.
    Girsanov,
}

/// Output of one evaluation of the flow map.
pub struct PhiOutput {
    pub flow: SubProbabilityFlow,
    pub policies: Vec<FeedbackPolicy>,
    pub density: Vec<DensityStats>,
    /// Per-atom value estimates at time zero.
    pub y0: Vec<(f64, f64)>,
}

/// One iterate of the equilibrium computation.
#[derive(Clone)]
pub struct EquilibriumIterate {
    pub iteration: usize,
    pub flow: SubProbabilityFlow,
    /// Per-atom optimal feedback policies from the last map evaluation.
    pub policies: Vec<FeedbackPolicy>,
    /// Fixed-point residual `d(Phi(flow), flow)`.
    pub residual: f64,
    pub density: Vec<DensityStats>,
    pub converged: bool,
}

/// Tolerance setting for the fixed-point residual.
#[derive(Clone, Copy, Debug, Serialize)]
pub enum TolSetting {
    /// Absolute residual tolerance; refused when below the measured noise
    /// floor.
    Fixed(f64),
    /// `factor` times the measured noise floor.
    AutoFactor(f64),
}

#[derive(Clone, Debug)]
pub struct SolveOptions {
    /// Particles per atom.
    pub n_paths: usize,
    /// Mixing weight of the map output per iteration, in (0, 1].
    pub damping: f64,
    pub tol: TolSetting,
    pub max_iter: usize,
    pub mode: PhiMode,
    pub basis_degree: usize,
    /// Clamp radius of the default test battery.
    pub battery_radius: f64,
    pub sim: SimOptions,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            n_paths: 5000,
            damping: 0.5,
            tol: TolSetting::AutoFactor(1.5),
            max_iter: 25,
            mode: PhiMode::Direct,
            basis_degree: 2,
            battery_radius: 3.0,
            sim: SimOptions::default(),
        }
    }
}

/// Per-iteration record of the solve.
#[derive(Clone, Debug, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub residual: f64,
    pub density: Vec<DensityStats>,
    pub y0: Vec<(f64, f64)>,
    /// Wall time of the map evaluation; excluded from deterministic exports.
    pub wall_ms: u128,
}

/// Full convergence history.
#[derive(Clone, Debug, Serialize)]
pub struct History {
    pub noise_floor: f64,
    pub tol: f64,
    pub records: Vec<IterationRecord>,
}

pub fn default_battery_for(model: &StateModel, radius: f64) -> Battery {
    Battery::default_battery(model.observable.clone(), model.dim, radius)
}

/// Conditional common-noise draws for every particle of one atom.
fn conditional_w0(
    model: &StateModel,
    grid: &CommonNoiseGrid,
    atom: usize,
    n_paths: usize,
    seed: u64,
) -> W0Mode {
    let paths: Vec<_> = crate::parallel::map_indexed(n_paths, |i| {
        let mut rng = substream(seed, tag::BRIDGE, i as u64);
        let coarse = grid.sample_conditional_coarse(atom, &mut rng);
        Arc::new(bridge_fine_path(
            &coarse,
            model.dim,
            &model.grid,
            grid.spec.n_coarse,
            &mut rng,
        ))
    });
    W0Mode::PerPath(paths)
}

/// Flow of the uncontrolled reference dynamics, conditioned per atom; the
/// starting point of the iteration.
pub fn initial_flow(
    model: &StateModel,
    grid: &CommonNoiseGrid,
    battery: &Battery,
    n_paths: usize,
    seed: u64,
    sim: &SimOptions,
) -> Result<SubProbabilityFlow> {
    let per_atom: Vec<Result<SubProbabilityFlow>> =
        crate::parallel::map_indexed(grid.n_atoms(), |atom| {
            let atom_seed = derive_seed(seed, tag::W0_SAMPLE, atom as u64);
            let w0 = conditional_w0(model, grid, atom, n_paths, atom_seed);
            let paths = simulate_uncontrolled(model, &w0, n_paths, atom_seed, sim)?;
            empirical_flow(
                &paths,
                model.grid,
                &[atom],
                &vec![atom; n_paths],
                battery,
                &FlowBuildOptions::default(),
            )
        });
    let per_atom: Vec<SubProbabilityFlow> = per_atom.into_iter().collect::<Result<_>>()?;
    SubProbabilityFlow::concat(per_atom)
}

/// One evaluation of the flow map at the frozen input flow.
pub fn phi_step(
    model: &Arc<StateModel>,
    grid: &CommonNoiseGrid,
    flow: &SubProbabilityFlow,
    battery: &Battery,
    opts: &SolveOptions,
    seed: u64,
) -> Result<PhiOutput> {
    type AtomOut = (SubProbabilityFlow, FeedbackPolicy, DensityStats, (f64, f64));
    let results: Vec<Result<AtomOut>> = crate::parallel::map_indexed(grid.n_atoms(), |atom| {
        let atom_seed = derive_seed(seed, tag::W0_SAMPLE, atom as u64);
        let env = Arc::new(flow.atom_env(&model.kernel, atom)?);
        let w0 = conditional_w0(model, grid, atom, opts.n_paths, atom_seed);
        let uncontrolled = simulate_uncontrolled(model, &w0, opts.n_paths, atom_seed, &opts.sim)?;
        let solution = solve_bsde(
            model,
            &env,
            &uncontrolled,
            &Driver::MaximizedHamiltonian,
            &BsdeOptions {
                basis_degree: opts.basis_degree,
                ..BsdeOptions::default()
            },
        )
        .map_err(|e| attach_atom(e, atom))?;
        let y0 = (solution.y0, solution.y0_se);
        let policy = FeedbackPolicy::new(model.clone(), env.clone(), Arc::new(solution))?;

        let weights = girsanov_densities(model, &env, &uncontrolled, &policy)?;
        let (mean, se) = mean_se(&weights);
        let m2 = weights.iter().map(|w| w * w).sum::<f64>() / weights.len() as f64;
        let density = DensityStats {
            atom,
            mean,
            se,
            second_moment: m2,
        };

        let atom_flow = match opts.mode {
            PhiMode::Direct => {
                // same substream indices as the uncontrolled batch: common
                // random numbers couple the two laws
                let controlled =
                    simulate_paths(model, &env, &policy, &w0, opts.n_paths, atom_seed, &opts.sim)?;
                empirical_flow(
                    &controlled,
                    model.grid,
                    &[atom],
                    &vec![atom; opts.n_paths],
                    battery,
                    &FlowBuildOptions::default(),
                )?
            }
            PhiMode::Girsanov => empirical_flow(
                &uncontrolled,
                model.grid,
                &[atom],
                &vec![atom; opts.n_paths],
                battery,
                &FlowBuildOptions {
                    weights: Some(weights),
                    retain_clouds: false,
                },
            )?,
        };
        Ok((atom_flow, policy, density, y0))
    });
    let mut flows = Vec::with_capacity(grid.n_atoms());
    let mut policies = Vec::with_capacity(grid.n_atoms());
    let mut density = Vec::with_capacity(grid.n_atoms());
    let mut y0 = Vec::with_capacity(grid.n_atoms());
    for r in results {
        let (f, p, ds, y) = r?;
        flows.push(f);
        policies.push(p);
        density.push(ds);
        y0.push(y);
    }
    Ok(PhiOutput {
        flow: SubProbabilityFlow::concat(flows)?,
        policies,
        density,
        y0,
    })
}

fn attach_atom(e: MfgError, atom: usize) -> MfgError {
    match e {
        MfgError::BasisDegeneracy { step, rank, dim } => MfgError::Validation {
            field: format!("atom {atom}"),
            message: format!("basis degeneracy at step {step} (rank {rank} < {dim})"),
        },
        MfgError::UnderSampled { step, alive, dim } => MfgError::Validation {
            field: format!("atom {atom}"),
            message: format!("under-sampled regression at step {step} ({alive} alive < {dim})"),
        },
        other => other,
    }
}

/// Measure the Monte Carlo noise floor of the residual: the battery distance
/// between two independent-seed evaluations of the map at the same flow.
pub fn measure_noise_floor(
    model: &Arc<StateModel>,
    grid: &CommonNoiseGrid,
    flow: &SubProbabilityFlow,
    battery: &Battery,
    opts: &SolveOptions,
    seed: u64,
) -> Result<f64> {
    let a = phi_step(model, grid, flow, battery, opts, derive_seed(seed, tag::FLOOR_A, 0))?;
    let b = phi_step(model, grid, flow, battery, opts, derive_seed(seed, tag::FLOOR_B, 0))?;
    a.flow.flow_distance(&b.flow)
}

/// Iterate the damped flow map to an approximate equilibrium.
///
/// Returns the final iterate (flagged `converged` or not) and the residual
/// history. Identical configuration and seed reproduce the history exactly.
pub fn solve_equilibrium(
    model: &Arc<StateModel>,
    grid: &CommonNoiseGrid,
    opts: &SolveOptions,
    seed: u64,
) -> Result<(EquilibriumIterate, History)> {
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(MfgError::validation(
            "fixed_point.damping",
            format!("damping must lie in (0, 1], got {}", opts.damping),
        ));
    }
    if opts.max_iter == 0 {
        return Err(MfgError::validation(
            "fixed_point.max_iter",
            "at least one iteration is required",
        ));
    }
    let battery = default_battery_for(model, opts.battery_radius);
    let mut flow = initial_flow(
        model,
        grid,
        &battery,
        opts.n_paths,
        derive_seed(seed, tag::INIT, 0),
        &opts.sim,
    )?;
    let noise_floor = measure_noise_floor(model, grid, &flow, &battery, opts, seed)?;
    let tol = match opts.tol {
        TolSetting::Fixed(t) => {
            if t < noise_floor {
                return Err(MfgError::validation(
                    "fixed_point.tol",
                    format!(
                        "tolerance {t} is below the measured Monte Carlo noise floor \
                         {noise_floor:.6}; residuals cannot resolve flow changes this small"
                    ),
                ));
            }
            t
        }
        TolSetting::AutoFactor(f) => f * noise_floor,
    };

    // common random numbers: the same map seed is reused every iteration
    let phi_seed = derive_seed(seed, tag::EVAL, 0);
    let mut records = Vec::new();
    let mut best: Option<EquilibriumIterate> = None;
    for iteration in 0..opts.max_iter {
        let start = std::time::Instant::now();
        let out = phi_step(model, grid, &flow, &battery, opts, phi_seed)?;
        let residual = out.flow.flow_distance(&flow)?;
        records.push(IterationRecord {
            iteration,
            residual,
            density: out.density.clone(),
            y0: out.y0.clone(),
            wall_ms: start.elapsed().as_millis(),
        });
        let candidate = EquilibriumIterate {
            iteration,
            flow: flow.clone(),
            policies: out.policies,
            residual,
            density: out.density,
            converged: residual < tol,
        };
        let improved = best
            .as_ref()
            .map(|b| candidate.residual < b.residual)
            .unwrap_or(true);
        if improved {
            best = Some(candidate.clone());
        }
        if candidate.converged {
            return Ok((
                candidate,
                History {
                    noise_floor,
                    tol,
                    records,
                },
            ));
        }
        flow = flow.mix(&out.flow, opts.damping)?;
    }
    // not converged: return the best iterate, honestly flagged
    let best = best.expect("at least one iteration ran");
    Ok((
        best,
        History {
            noise_floor,
            tol,
            records,
        },
    ))
}
