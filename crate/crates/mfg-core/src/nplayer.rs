//! Finite-N games and epsilon-Nash gap estimation for the mean-field policy.
//!
//! The coupled simulation advances all players on one shared common-noise
//! realization; at every step the drift of each alive player reads the
//! empirical sub-distribution of the survivors (mass and `h` pairing) and the
//! smoothed-loss derivative of the empirical mass trajectory.
//!
//! The *approximate* game replaces the empirical flow in the drift by its
//! conditional expectation given the players' own noises and the quantized
//! common noise; that conditional flow is estimated by nested Monte Carlo:
//! rerun the whole system on auxiliary common-noise draws resampled within
//! the quantizer cells of the realized path, sharing all idiosyncratic
//! randomness, and average the empirical flows.
//!
//! The best-response gap freezes one repetition's realized environment (the
//! other players' empirical flow and the common-noise path), solves the
//! single-agent backward equation against it, and compares the resimulated
//! deviation value with the mean-field policy's value under common random
//! numbers. This probes one strong deviation rather than all admissible
//! ones, so the reported gap is a lower bound on the true Nash gap; freezing
//! also ignores the deviator's own 1/N impact on the empirical flow.

use crate::bsde::{policy_value, solve_bsde, BsdeOptions, Driver, FeedbackPolicy};
use crate::dynamics::{
    simulate_uncontrolled, AtomEnv, CommonPath, ControlCtx, ControlPolicy, ParticlePath,
    SimOptions, StateModel, W0Mode,
};
use crate::measure_flow::SubProbabilityFlow;
use crate::noise_grid::{
    bridge_fine_path, coarse_increments, discretize_increments, fresh_common_path,
    resample_within_cells, CommonNoiseGrid, GridSpec,
};
use crate::rng::{derive_seed, substream, tag};
use crate::stats::{bootstrap_ci_mean, mean_se};
use crate::{MfgError, Result};
use serde::Serialize;
use std::sync::Arc;

/// Trace of a flow argument fed to the drift: mass and `h` pairing per node.
#[derive(Clone, Debug, Serialize)]
pub struct FlowTrace {
    pub mass: Vec<f64>,
    pub h_pair: Vec<f64>,
}

/// One realization of the N-player game.
pub struct GameRun {
    pub n_players: usize,
    pub seed: u64,
    pub paths: Vec<ParticlePath>,
    pub payoffs: Vec<f64>,
    /// Empirical flow of the survivors.
    pub empirical: FlowTrace,
    /// Conditional flow used by the drift in the approximate game.
    pub rho: Option<FlowTrace>,
}

/// Mean-field policy lifted to the game: among atoms whose cell signature is
/// consistent with the common-noise cells observed so far, controls are
/// averaged with the atoms' prior probabilities (posterior-mean control).
pub struct AtomAdaptivePolicy {
    pub grid: Arc<CommonNoiseGrid>,
    pub policies: Vec<FeedbackPolicy>,
    pub probabilities: Vec<f64>,
}

impl AtomAdaptivePolicy {
    pub fn from_equilibrium(
        grid: Arc<CommonNoiseGrid>,
        policies: Vec<FeedbackPolicy>,
    ) -> Result<Self> {
        if policies.len() != grid.n_atoms() {
            return Err(MfgError::InvalidParameter(
                "one policy per atom required".into(),
            ));
        }
        let probabilities = grid.atoms().iter().map(|a| a.probability).collect();
        Ok(AtomAdaptivePolicy {
            grid,
            policies,
            probabilities,
        })
    }
}

impl ControlPolicy for AtomAdaptivePolicy {
    fn control(&self, ctx: &ControlCtx, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let prefix = ctx.w0_cells_prefix;
        let mut total = 0.0;
        let mut buf = [0.0f64; 8];
        let buf = &mut buf[..out.len()];
        for (k, policy) in self.policies.iter().enumerate() {
            let sig = &self.grid.atoms()[k].signature;
            if prefix.len() <= sig.len() && &sig[..prefix.len()] != prefix {
                continue;
            }
            let w = self.probabilities[k];
            policy.control(ctx, x, buf);
            for (o, b) in out.iter_mut().zip(buf.iter()) {
                *o += w * b;
            }
            total += w;
        }
        if total > 0.0 {
            for o in out.iter_mut() {
                *o /= total;
            }
        } else {
            // unseen cell pattern: fall back to the prior-weighted average
            for (k, policy) in self.policies.iter().enumerate() {
                let w = self.probabilities[k];
                policy.control(ctx, x, buf);
                for (o, b) in out.iter_mut().zip(buf.iter()) {
                    *o += w * b;
                }
            }
        }
    }
}

/// What the drift consumes during a game.
enum DriftSource<'a> {
    /// Self-consistent: the game's own empirical flow, updated per step.
    Own,
    /// A frozen flow trace (the approximate game).
    Fixed(&'a AtomEnv),
}

#[allow(clippy::too_many_arguments)]
fn run_game_engine(
    model: &StateModel,
    policies: &[Arc<dyn ControlPolicy>],
    n: usize,
    seed: u64,
    w0: Arc<CommonPath>,
    drift_source: DriftSource,
    ctx_spec: Option<&GridSpec>,
) -> Result<GameRun> {
    if n == 0 {
        return Err(MfgError::InvalidParameter("need at least one player".into()));
    }
    if policies.len() != n {
        return Err(MfgError::InvalidParameter(format!(
            "{} policies for {n} players",
            policies.len()
        )));
    }
    let grid = &model.grid;
    let d = model.dim;
    let k = model.control_dim;
    let steps = grid.steps;
    let dt = grid.dt();
    let sq_dt = dt.sqrt();

    let mut values = vec![0.0; n * (steps + 1) * d];
    let mut dw = vec![0.0; n * steps * d];
    let mut controls = vec![0.0; n * steps * k];
    let mut exit_idx = vec![steps; n];
    let mut absorbed = vec![false; n];
    let mut idio: Vec<_> = (0..n)
        .map(|i| substream(seed, tag::IDIO, i as u64))
        .collect();
    for i in 0..n {
        let mut init = substream(seed, tag::INIT, i as u64);
        (model.initial_sampler)(&mut init, &mut values[i * (steps + 1) * d..][..d]);
        if !model.domain.contains(&values[i * (steps + 1) * d..][..d]) {
            exit_idx[i] = 0;
            absorbed[i] = true;
        }
    }

    let cells = ctx_spec.map(|spec| {
        let coarse = coarse_increments(&w0, grid, spec.n_coarse);
        (
            discretize_increments(&coarse, d, spec).signature,
            spec.clone(),
        )
    });

    let mut mass_trace = vec![0.0; steps + 1];
    let mut h_trace = vec![0.0; steps + 1];
    let mut drift = vec![0.0; d];
    let mut a = vec![0.0; k];
    let mut eta = vec![0.0; d];
    let nf = n as f64;

    for j in 0..=steps {
        // empirical flow of the survivors at t_j
        let mut alive = 0usize;
        let mut h_sum = 0.0;
        for i in 0..n {
            let alive_i = !absorbed[i] || j < exit_idx[i];
            if alive_i {
                alive += 1;
                h_sum += (model.observable)(&values[(i * (steps + 1) + j) * d..][..d]);
            }
        }
        mass_trace[j] = alive as f64 / nf;
        h_trace[j] = h_sum / nf;
        if j == steps {
            break;
        }
        let t = grid.time(j);
        // smoothed-loss derivative of the chosen mass trajectory (warm
        // convolution: drop sum over the kernel window)
        let (m_arg, ld) = match &drift_source {
            DriftSource::Own => {
                let mut loss_deriv = 0.0;
                let window = model.kernel.epsilon();
                let first = grid.floor_index((t - window).max(0.0));
                for i in first.max(1)..=j {
                    let ti = grid.time(i);
                    loss_deriv += model.kernel.eval(t - ti) * (mass_trace[i] - mass_trace[i - 1]);
                }
                (h_trace[j], loss_deriv)
            }
            DriftSource::Fixed(env) => (env.h_pair[j], env.loss_deriv[j]),
        };
        (model.boundary_loading)(t, &mut eta);

        let prefix_len = cells
            .as_ref()
            .map(|(_, spec)| {
                let comps = spec.quantized_components(d).len();
                (j * spec.n_coarse / steps) * comps
            })
            .unwrap_or(0);
        let empty: [i64; 0] = [];
        let dw0_j = w0.increment(j);
        for i in 0..n {
            let base = (i * (steps + 1) + j) * d;
            if absorbed[i] && j >= exit_idx[i] {
                let frozen_base = (i * (steps + 1) + exit_idx[i]) * d;
                for c in 0..d {
                    values[base + d + c] = values[frozen_base + c];
                }
                continue;
            }
            let x_now: &[f64] = &values[base..base + d];
            let ctx = ControlCtx {
                path_idx: i,
                step: j,
                time: t,
                w0_cells_prefix: cells
                    .as_ref()
                    .map(|(sig, _)| &sig[..prefix_len])
                    .unwrap_or(&empty),
            };
            policies[i].control(&ctx, x_now, &mut a);
            model.control_box.project(&mut a);
            controls[(i * steps + j) * k..(i * steps + j + 1) * k].copy_from_slice(&a);
            (model.drift_base)(t, x_now, m_arg, &mut drift);
            model.control_loading.add_control(t, &a, &mut drift);
            if ld != 0.0 {
                for (dr, e) in drift.iter_mut().zip(&eta) {
                    *dr += e * ld;
                }
            }
            for c in 0..d {
                let z: f64 = rand::Rng::sample(&mut idio[i], rand_distr::StandardNormal);
                dw[(i * steps + j) * d + c] = sq_dt * z;
            }
            let mut blowup = false;
            {
                let (head, tail) = values.split_at_mut(base + d);
                let x_prev = &head[base..base + d];
                let x_next = &mut tail[..d];
                for c in 0..d {
                    x_next[c] = x_prev[c] + drift[c] * dt;
                }
                crate::dynamics::mat_vec_add(
                    &model.sigma,
                    &dw[(i * steps + j) * d..(i * steps + j + 1) * d],
                    x_next,
                );
                crate::dynamics::mat_vec_add(&model.sigma0, dw0_j, x_next);
                for &v in x_next.iter() {
                    if !v.is_finite() || v.abs() > 1e10 {
                        blowup = true;
                    }
                }
            }
            if blowup {
                return Err(MfgError::NumericalBlowup { step: j + 1 });
            }
            if !model.domain.contains(&values[base + d..base + 2 * d]) {
                exit_idx[i] = j + 1;
                absorbed[i] = true;
            }
        }
    }

    // per-player payoffs against the flow the drift consumed
    let m_for_cost: Vec<f64> = match &drift_source {
        DriftSource::Own => h_trace.clone(),
        DriftSource::Fixed(env) => env.h_pair.clone(),
    };
    let mut paths = Vec::with_capacity(n);
    let mut payoffs = Vec::with_capacity(n);
    for i in 0..n {
        let path = ParticlePath {
            dim: d,
            control_dim: k,
            values: values[i * (steps + 1) * d..(i + 1) * (steps + 1) * d].to_vec(),
            dw: dw[i * steps * d..(i + 1) * steps * d].to_vec(),
            w0: w0.clone(),
            exit_idx: exit_idx[i],
            absorbed: absorbed[i],
            controls: controls[i * steps * k..(i + 1) * steps * k].to_vec(),
        };
        let last = if path.absorbed { path.exit_idx } else { steps };
        let mut acc = 0.0;
        for j in 0..last {
            acc += model
                .running_cost
                .eval(grid.time(j), path.state(j), m_for_cost[j], path.control(j))
                * dt;
        }
        acc += (model.terminal_payoff)(path.exit_time(grid), path.exit_state());
        payoffs.push(acc);
        paths.push(path);
    }
    Ok(GameRun {
        n_players: n,
        seed,
        paths,
        payoffs,
        empirical: FlowTrace {
            mass: mass_trace,
            h_pair: h_trace,
        },
        rho: None,
    })
}

/// Coupled N-player simulation on one shared common-noise realization. Each
/// alive player's drift reads the empirical flow of the survivors.
pub fn simulate_game(
    model: &StateModel,
    policies: &[Arc<dyn ControlPolicy>],
    n: usize,
    seed: u64,
    ctx_spec: Option<&GridSpec>,
) -> Result<GameRun> {
    let mut rng = substream(seed, tag::COMMON, 0);
    let w0 = Arc::new(fresh_common_path(&model.grid, model.dim, &mut rng));
    run_game_engine(model, policies, n, seed, w0, DriftSource::Own, ctx_spec)
}

/// Conditional flow estimate by nested Monte Carlo: rerun the coupled game
/// on `inner_batch` common-noise draws resampled within the quantizer cells
/// of `w0`, sharing all idiosyncratic noise, and average the empirical flows.
#[allow(clippy::too_many_arguments)]
pub fn conditional_flow_trace(
    model: &StateModel,
    policies: &[Arc<dyn ControlPolicy>],
    n: usize,
    seed: u64,
    w0: &CommonPath,
    spec: &GridSpec,
    inner_batch: usize,
    ctx_spec: Option<&GridSpec>,
) -> Result<FlowTrace> {
    if inner_batch == 0 {
        return Err(MfgError::InvalidParameter(
            "inner batch must be positive".into(),
        ));
    }
    let coarse = coarse_increments(w0, &model.grid, spec.n_coarse);
    let runs: Vec<Result<FlowTrace>> = crate::parallel::map_indexed(inner_batch, |b| {
        let mut rng = substream(derive_seed(seed, tag::INNER, b as u64), tag::BRIDGE, 0);
        let redraw = resample_within_cells(&coarse, model.dim, spec, model.grid.t_end, &mut rng);
        let w0_b = Arc::new(bridge_fine_path(
            &redraw,
            model.dim,
            &model.grid,
            spec.n_coarse,
            &mut rng,
        ));
        let run = run_game_engine(model, policies, n, seed, w0_b, DriftSource::Own, ctx_spec)?;
        Ok(run.empirical)
    });
    let nodes = model.grid.len();
    let mut mass = vec![0.0; nodes];
    let mut h_pair = vec![0.0; nodes];
    for r in runs {
        let trace = r?;
        for j in 0..nodes {
            mass[j] += trace.mass[j] / inner_batch as f64;
            h_pair[j] += trace.h_pair[j] / inner_batch as f64;
        }
    }
    Ok(FlowTrace { mass, h_pair })
}

/// Approximate game: like [`simulate_game`] but the drift consumes the
/// conditional flow given the players' noises and the quantized common
/// noise, estimated by [`conditional_flow_trace`].
#[allow(clippy::too_many_arguments)]
pub fn simulate_approx_game(
    model: &StateModel,
    policies: &[Arc<dyn ControlPolicy>],
    n: usize,
    spec: &GridSpec,
    inner_batch: usize,
    seed: u64,
    ctx_spec: Option<&GridSpec>,
) -> Result<GameRun> {
    let mut rng = substream(seed, tag::COMMON, 0);
    let w0 = Arc::new(fresh_common_path(&model.grid, model.dim, &mut rng));
    let rho = conditional_flow_trace(model, policies, n, seed, &w0, spec, inner_batch, ctx_spec)?;
    let env = AtomEnv::from_trajectories(
        &model.kernel,
        model.grid,
        rho.mass.clone(),
        rho.h_pair.clone(),
    )?;
    let mut run = run_game_engine(
        model,
        policies,
        n,
        seed,
        w0,
        DriftSource::Fixed(&env),
        ctx_spec,
    )?;
    run.rho = Some(rho);
    Ok(run)
}

/// Mean absolute gap between the conditional and the empirical `h` pairing,
/// per quantization level, averaged over repetitions. The coupled plain game
/// provides the empirical flow; the conditional flow is estimated around the
/// same realization.
#[allow(clippy::too_many_arguments)]
pub fn discretization_gap(
    model: &StateModel,
    policies: &[Arc<dyn ControlPolicy>],
    n: usize,
    levels: &[u32],
    reps: usize,
    inner_batch: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut gaps = vec![0.0; levels.len()];
    for (li, &level) in levels.iter().enumerate() {
        let spec = GridSpec::paper_level(level);
        spec.validate(model.dim, model.grid.steps)?;
        let rep_gaps: Vec<Result<f64>> = crate::parallel::map_indexed(reps, |r| {
            let seed_r = derive_seed(seed, tag::GAME, r as u64);
            let run = simulate_game(model, policies, n, seed_r, None)?;
            let rho = conditional_flow_trace(
                model,
                policies,
                n,
                seed_r,
                &run.paths[0].w0,
                &spec,
                inner_batch,
                None,
            )?;
            let nodes = model.grid.len();
            let gap = (0..nodes)
                .map(|j| (rho.h_pair[j] - run.empirical.h_pair[j]).abs())
                .sum::<f64>()
                / nodes as f64;
            Ok(gap)
        });
        let rep_gaps: Vec<f64> = rep_gaps.into_iter().collect::<Result<_>>()?;
        gaps[li] = rep_gaps.iter().sum::<f64>() / reps as f64;
    }
    Ok(gaps)
}

/// Options of the best-response study.
#[derive(Clone, Debug)]
pub struct GapOptions {
    pub reps: usize,
    /// Training paths of the deviator's backward solve.
    pub br_paths: usize,
    /// Resimulation paths per value estimate.
    pub eval_paths: usize,
    pub basis_degree: usize,
    pub bootstrap_resamples: usize,
}

impl Default for GapOptions {
    fn default() -> Self {
        GapOptions {
            reps: 16,
            br_paths: 3000,
            eval_paths: 2000,
            basis_degree: 2,
            bootstrap_resamples: 1000,
        }
    }
}

/// Best-response gap estimate.
#[derive(Clone, Debug, Serialize)]
pub struct GapEstimate {
    pub n_players: usize,
    pub reps: usize,
    /// Mean of (deviation value - equilibrium value) over repetitions.
    pub raw_mean: f64,
    /// Raw mean clipped below at zero.
    pub clipped_mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub per_rep: Vec<f64>,
    /// The estimator probes one strong deviation, so it bounds the true gap
    /// from below; freezing the opponents' flow ignores the deviator's own
    /// 1/N feedback.
    pub lower_bound_note: String,
}

/// Estimate the benefit of a unilateral deviation from the mean-field policy.
///
/// Per repetition: play the game with everyone on the mean-field policy,
/// freeze the realized environment of `player` (opponents' empirical flow
/// and the common-noise path), solve the deviator's backward equation
/// against it, and resimulate both the deviation policy and the mean-field
/// policy on that frozen environment with common random numbers.
#[allow(clippy::too_many_arguments)]
pub fn best_response_gap(
    model: &Arc<StateModel>,
    grid: &Arc<CommonNoiseGrid>,
    equilibrium_policies: &[FeedbackPolicy],
    n: usize,
    player: usize,
    opts: &GapOptions,
    seed: u64,
) -> Result<GapEstimate> {
    if player >= n {
        return Err(MfgError::InvalidParameter(format!(
            "player index {player} out of range for {n} players"
        )));
    }
    let shared: Arc<dyn ControlPolicy> = Arc::new(AtomAdaptivePolicy::from_equilibrium(
        grid.clone(),
        equilibrium_policies.to_vec(),
    )?);
    let policies: Vec<Arc<dyn ControlPolicy>> = vec![shared.clone(); n];
    let ctx_spec = grid.spec.clone();
    let per_rep: Vec<Result<f64>> = crate::parallel::map_indexed(opts.reps, |r| {
        let seed_r = derive_seed(seed, tag::GAME, r as u64);
        let run = simulate_game(model, &policies, n, seed_r, Some(&ctx_spec))?;
        //的 opponents' empirical flow, excluding the deviator
        let nodes = model.grid.len();
        let mut mass = vec![0.0; nodes];
        let mut h_pair = vec![0.0; nodes];
        let denom = (n - 1).max(1) as f64;
        for (i, path) in run.paths.iter().enumerate() {
            if i == player {
                continue;
            }
            for j in 0..nodes {
                if path.alive_at(j) {
                    mass[j] += 1.0 / denom;
                    h_pair[j] += (model.observable)(path.state(j)) / denom;
                }
            }
        }
        let env = Arc::new(AtomEnv::from_trajectories(
            &model.kernel,
            model.grid,
            mass,
            h_pair,
        )?);
        let w0 = W0Mode::Shared(run.paths[player].w0.clone());
        let br_seed = derive_seed(seed_r, tag::BR, 0);
        let sim = SimOptions {
            ctx_grid: Some(ctx_spec.clone()),
            ..SimOptions::default()
        };
        let training = simulate_uncontrolled(model, &w0, opts.br_paths, br_seed, &sim)?;
        let solution = solve_bsde(
            model,
            &env,
            &training,
            &Driver::MaximizedHamiltonian,
            &BsdeOptions {
                basis_degree: opts.basis_degree,
                ..BsdeOptions::default()
            },
        )?;
        let br_policy = FeedbackPolicy::new(model.clone(), env.clone(), Arc::new(solution))?;
        let eval_seed = derive_seed(seed_r, tag::EVAL, 0);
        let (v_dev, _) = policy_value(model, &env, &br_policy, &w0, opts.eval_paths, eval_seed, &sim)?;
        let (v_eq, _) = policy_value(
            model,
            &env,
            shared.as_ref(),
            &w0,
            opts.eval_paths,
            eval_seed,
            &sim,
        )?;
        Ok(v_dev - v_eq)
    });
    let per_rep: Vec<f64> = per_rep.into_iter().collect::<Result<_>>()?;
    let (raw_mean, _) = mean_se(&per_rep);
    let (ci_low, ci_high) = bootstrap_ci_mean(
        &per_rep,
        opts.bootstrap_resamples,
        0.95,
        derive_seed(seed, tag::BOOTSTRAP, 0),
    );
    Ok(GapEstimate {
        n_players: n,
        reps: opts.reps,
        raw_mean,
        clipped_mean: raw_mean.max(0.0),
        ci_low,
        ci_high,
        per_rep,
        lower_bound_note:
            "single best-response probe: lower bound on the true gap; frozen opponents ignore \
             the deviator's 1/N feedback"
                .to_string(),
    })
}

/// Equilibrium flow restricted to the atoms, exported for reuse.
pub fn equilibrium_flow_csv(flow: &SubProbabilityFlow) -> Result<String> {
    let mut buf = Vec::new();
    flow.write_csv(&mut buf)
        .map_err(|e| MfgError::Validation {
            field: "flow_csv".into(),
            message: e.to_string(),
        })?;
    String::from_utf8(buf).map_err(|e| MfgError::Validation {
        field: "flow_csv".into(),
        message: e.to_string(),
    })
}
