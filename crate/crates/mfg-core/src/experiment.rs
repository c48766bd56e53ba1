//! Experiment configuration, pipeline stages and file exports.
//!
//! A run is described by one [`ExperimentConfig`]; the pipeline discovers the
//! common-noise atoms, solves the equilibrium, optionally runs the
//! best-response gap study, and writes plot-ready tabular artifacts plus a
//! manifest. Outputs are byte-deterministic for a fixed config and seed:
//! wall-clock timings go to a separate `timings.csv` that is excluded from
//! reproducibility comparisons.
//!
//! Files written into the output directory:
//!
//! * `atoms.csv` — atom table: id, probability, count, cells, representative.
//! * `equilibrium_flow.csv` — per (atom, time) mass and battery pairings.
//! * `history.csv` — per (iteration, atom) residual and density diagnostics.
//! * `bsde_solutions.json` — per-atom value estimates and regression dumps.
//! * `results.json` — gap study (written by the `gap`/`both` stages).
//! * `paths.csv` — controlled path dump (only with `dump_paths`).
//! * `manifest.json` — resolved config, its hash, seeds, stages, outputs.
//! * `timings.csv` — wall-clock stage timings (not reproducible).

use crate::bsde::BsdeSolution;
use crate::dynamics::{bankrun_model, simulate_paths, BankrunParams, SimOptions, StateModel};
use crate::fixed_point::{
    solve_equilibrium, EquilibriumIterate, History, PhiMode, SolveOptions, TolSetting,
};
use crate::measure_flow::SubProbabilityFlow;
use crate::noise_grid::{coarse_increments, fresh_common_path, CommonNoiseGrid, GridSpec};
use crate::nplayer::{best_response_gap, GapEstimate, GapOptions};
use crate::rng::{derive_seed, substream, tag};
use crate::{MfgError, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSettings {
    /// Number of coarse common-noise observation intervals.
    pub n_time: usize,
    /// Quantizer level (cell width `4^-n_quant`, clamp `4^n_quant`).
    pub n_quant: u32,
    /// Noise components that are quantized; omit for all.
    pub quantized_components: Option<Vec<usize>>,
    /// Size of the generating sample for atom discovery.
    pub w0_sample: usize,
    /// Atoms below this occupancy merge into their nearest neighbour.
    pub min_atom_occupancy: usize,
}

impl Default for GridSettings {
    fn default() -> Self {
        GridSettings {
            n_time: 2,
            n_quant: 1,
            quantized_components: Some(vec![0]),
            w0_sample: 8192,
            min_atom_occupancy: 50,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BsdeSettings {
    pub basis_degree: usize,
}

impl Default for BsdeSettings {
    fn default() -> Self {
        BsdeSettings { basis_degree: 2 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixedPointSettings {
    pub particles_per_atom: usize,
    /// Mixing weight of the map output per iteration, in (0, 1].
    pub damping: f64,
    /// Absolute residual tolerance; omit to use `tol_auto_factor` times the
    /// measured noise floor.
    pub tol: Option<f64>,
    pub tol_auto_factor: f64,
    pub max_iter: usize,
    /// Clamp radius of the default test battery.
    pub battery_radius: f64,
}

impl Default for FixedPointSettings {
    fn default() -> Self {
        FixedPointSettings {
            particles_per_atom: 5000,
            damping: 0.5,
            tol: None,
            tol_auto_factor: 1.5,
            max_iter: 25,
            battery_radius: 3.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NPlayerSettings {
    pub n_values: Vec<usize>,
    pub reps: usize,
    pub br_paths: usize,
    pub eval_paths: usize,
    /// Inner batch of the nested conditional-flow estimator.
    pub inner_batch: usize,
    /// Index of the deviating player in the gap study.
    pub player: usize,
}

impl Default for NPlayerSettings {
    fn default() -> Self {
        NPlayerSettings {
            n_values: vec![64, 256, 512],
            reps: 16,
            br_paths: 3000,
            eval_paths: 2000,
            inner_batch: 32,
            player: 0,
        }
    }
}

/// Full experiment description; `Default` is the shipped bank-run scenario.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: String,
    pub seed: u64,
    pub bankrun: BankrunParams,
    pub grid: GridSettings,
    pub bsde: BsdeSettings,
    pub fixed_point: FixedPointSettings,
    pub nplayer: NPlayerSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenario: "bankrun".to_string(),
            seed: 42,
            bankrun: BankrunParams::default(),
            grid: GridSettings::default(),
            bsde: BsdeSettings::default(),
            fixed_point: FixedPointSettings::default(),
            nplayer: NPlayerSettings::default(),
        }
    }
}

/// Pipeline stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Equilibrium,
    Gap,
    Both,
}

/// Per-run switches not part of the numeric configuration.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub dump_paths: bool,
}

pub fn validate(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.scenario != "bankrun" {
        return Err(MfgError::validation(
            "scenario",
            format!("unknown scenario `{}`; available: bankrun", cfg.scenario),
        ));
    }
    let positive = [
        ("grid.n_time", cfg.grid.n_time),
        ("grid.w0_sample", cfg.grid.w0_sample),
        ("grid.min_atom_occupancy", cfg.grid.min_atom_occupancy),
        ("bsde.basis_degree", cfg.bsde.basis_degree),
        ("fixed_point.particles_per_atom", cfg.fixed_point.particles_per_atom),
        ("fixed_point.max_iter", cfg.fixed_point.max_iter),
        ("nplayer.reps", cfg.nplayer.reps),
        ("nplayer.br_paths", cfg.nplayer.br_paths),
        ("nplayer.eval_paths", cfg.nplayer.eval_paths),
        ("nplayer.inner_batch", cfg.nplayer.inner_batch),
    ];
    for (field, v) in positive {
        if v == 0 {
            return Err(MfgError::validation(field, "must be positive"));
        }
    }
    if !(cfg.fixed_point.damping > 0.0 && cfg.fixed_point.damping <= 1.0) {
        return Err(MfgError::validation(
            "fixed_point.damping",
            format!("must lie in (0, 1], got {}", cfg.fixed_point.damping),
        ));
    }
    if let Some(t) = cfg.fixed_point.tol {
        if !(t > 0.0) {
            return Err(MfgError::validation("fixed_point.tol", "must be positive"));
        }
    }
    if !(cfg.fixed_point.tol_auto_factor >= 1.0) {
        return Err(MfgError::validation(
            "fixed_point.tol_auto_factor",
            "must be at least 1 (tolerances below the noise floor are unattainable)",
        ));
    }
    if cfg.nplayer.n_values.is_empty() {
        return Err(MfgError::validation("nplayer.n_values", "must not be empty"));
    }
    if cfg
        .nplayer
        .n_values
        .iter()
        .any(|&n| cfg.nplayer.player >= n)
    {
        return Err(MfgError::validation(
            "nplayer.player",
            "deviating player index must be below every N",
        ));
    }
    if cfg.bankrun.m_steps % cfg.grid.n_time != 0 {
        return Err(MfgError::validation(
            "grid.n_time",
            format!(
                "must divide the fine grid ({} steps)",
                cfg.bankrun.m_steps
            ),
        ));
    }
    let model = bankrun_model(&cfg.bankrun)?;
    let spec = grid_spec(cfg);
    spec.validate(model.dim, model.grid.steps)?;
    Ok(())
}

pub fn grid_spec(cfg: &ExperimentConfig) -> GridSpec {
    GridSpec {
        n_coarse: cfg.grid.n_time,
        n_quant: cfg.grid.n_quant,
        quantized: cfg.grid.quantized_components.clone(),
    }
}

pub fn build_model(cfg: &ExperimentConfig) -> Result<Arc<StateModel>> {
    let model = bankrun_model(&cfg.bankrun)?;
    // sampled boundedness checks of the declared constants
    model.check_bounds(10_000, cfg.fixed_point.battery_radius, cfg.seed)?;
    Ok(Arc::new(model))
}

/// Discover the common-noise atoms from a fresh generating sample.
pub fn build_grid(cfg: &ExperimentConfig, model: &StateModel) -> Result<CommonNoiseGrid> {
    let spec = grid_spec(cfg);
    let sample: Vec<Vec<f64>> = crate::parallel::map_indexed(cfg.grid.w0_sample, |i| {
        let mut rng = substream(cfg.seed, tag::W0_SAMPLE, i as u64);
        let fine = fresh_common_path(&model.grid, model.dim, &mut rng);
        coarse_increments(&fine, &model.grid, spec.n_coarse)
    });
    CommonNoiseGrid::conditional_atoms(
        &sample,
        model.dim,
        model.grid.t_end,
        &spec,
        cfg.grid.min_atom_occupancy,
    )
}

pub fn solve_options(cfg: &ExperimentConfig) -> SolveOptions {
    SolveOptions {
        n_paths: cfg.fixed_point.particles_per_atom,
        damping: cfg.fixed_point.damping,
        tol: match cfg.fixed_point.tol {
            Some(t) => TolSetting::Fixed(t),
            None => TolSetting::AutoFactor(cfg.fixed_point.tol_auto_factor),
        },
        max_iter: cfg.fixed_point.max_iter,
        mode: PhiMode::Direct,
        basis_degree: cfg.bsde.basis_degree,
        battery_radius: cfg.fixed_point.battery_radius,
        sim: SimOptions {
            bridge_correction: cfg.bankrun.bridge_correction,
            ctx_grid: None,
        },
    }
}

/// Gap study results for one run.
#[derive(Clone, Debug, Serialize)]
pub struct GapStudy {
    pub seed: u64,
    pub player: usize,
    pub reps: usize,
    pub estimates: Vec<GapEstimate>,
}

/// Deterministic part of the manifest.
#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub version: String,
    pub scenario: String,
    pub seed: u64,
    pub config_sha256: String,
    pub stage: Stage,
    pub outputs: Vec<String>,
    pub atoms: usize,
    pub merged_members: usize,
    pub noise_floor: Option<f64>,
    pub tol: Option<f64>,
    pub converged: Option<bool>,
    pub final_residual: Option<f64>,
    pub config: ExperimentConfig,
}

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let canonical = serde_json::to_string(cfg).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::create_dir_all(dir).map_err(|e| MfgError::Validation {
        field: "out".into(),
        message: format!("cannot create output directory: {e}"),
    })?;
    std::fs::write(&path, bytes).map_err(|e| MfgError::Validation {
        field: name.to_string(),
        message: format!("cannot write: {e}"),
    })?;
    Ok(path)
}

fn atoms_csv(grid: &CommonNoiseGrid) -> String {
    let mut out = String::from("atom,probability,count,cells,representative\n");
    for a in grid.atoms() {
        let cells = a
            .signature
            .iter()
            .map(|m| m.to_string())
            .collect::<Vec<_>>()
            .join(";");
        let rep = a
            .representative
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(";");
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            a.id, a.probability, a.count, cells, rep
        ));
    }
    out
}

fn history_csv(history: &History) -> String {
    let mut out =
        String::from("iteration,residual,atom,density_mean,density_se,density_m2,y0,y0_se\n");
    for rec in &history.records {
        for (ds, y0) in rec.density.iter().zip(&rec.y0) {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                rec.iteration, rec.residual, ds.atom, ds.mean, ds.se, ds.second_moment, y0.0, y0.1
            ));
        }
    }
    out
}

fn timings_csv(history: &History, stage_ms: &[(String, u128)]) -> String {
    let mut out = String::from("kind,key,wall_ms\n");
    for rec in &history.records {
        out.push_str(&format!("iteration,{},{}\n", rec.iteration, rec.wall_ms));
    }
    for (k, ms) in stage_ms {
        out.push_str(&format!("stage,{k},{ms}\n"));
    }
    out
}

#[derive(Serialize)]
struct SolutionDump<'a> {
    atom: usize,
    y0: f64,
    y0_se: f64,
    bound_violation_fraction: f64,
    solution: &'a BsdeSolution,
}

fn flow_csv(flow: &SubProbabilityFlow) -> Result<String> {
    let mut buf = Vec::new();
    flow.write_csv(&mut buf).map_err(|e| MfgError::Validation {
        field: "equilibrium_flow.csv".into(),
        message: e.to_string(),
    })?;
    String::from_utf8(buf).map_err(|e| MfgError::Validation {
        field: "equilibrium_flow.csv".into(),
        message: e.to_string(),
    })
}

fn paths_csv(
    model: &Arc<StateModel>,
    grid: &CommonNoiseGrid,
    iterate: &EquilibriumIterate,
    seed: u64,
) -> Result<String> {
    let mut out = String::from("atom,path,time_index,time,alive");
    for c in 0..model.dim {
        out.push_str(&format!(",x{c}"));
    }
    for c in 0..model.control_dim {
        out.push_str(&format!(",a{c}"));
    }
    out.push('\n');
    let per_atom = 16usize;
    for (atom, policy) in iterate.policies.iter().enumerate() {
        let env = iterate.flow.atom_env(&model.kernel, atom)?;
        let mut rng = substream(derive_seed(seed, tag::EVAL, atom as u64), tag::BRIDGE, 0);
        let w0: Vec<_> = (0..per_atom)
            .map(|_| {
                let coarse = grid.sample_conditional_coarse(atom, &mut rng);
                Arc::new(crate::noise_grid::bridge_fine_path(
                    &coarse,
                    model.dim,
                    &model.grid,
                    grid.spec.n_coarse,
                    &mut rng,
                ))
            })
            .collect();
        let paths = simulate_paths(
            model,
            &env,
            policy,
            &crate::dynamics::W0Mode::PerPath(w0),
            per_atom,
            derive_seed(seed, tag::EVAL, atom as u64),
            &SimOptions::default(),
        )?;
        for (pi, path) in paths.iter().enumerate() {
            for j in 0..=model.grid.steps {
                out.push_str(&format!(
                    "{atom},{pi},{j},{},{}",
                    model.grid.time(j),
                    u8::from(path.alive_at(j))
                ));
                for c in 0..model.dim {
                    out.push_str(&format!(",{}", path.state(j)[c]));
                }
                for c in 0..model.control_dim {
                    let a = if j < model.grid.steps {
                        path.control(j)[c]
                    } else {
                        0.0
                    };
                    out.push_str(&format!(",{a}"));
                }
                out.push('\n');
            }
        }
    }
    Ok(out)
}

/// Execute the pipeline and write all artifacts into `out_dir`.
pub fn run(
    cfg: &ExperimentConfig,
    stage: Stage,
    out_dir: &Path,
    opts: &RunOptions,
) -> Result<Manifest> {
    validate(cfg)?;
    let model = build_model(cfg)?;
    let t_grid = std::time::Instant::now();
    let grid = Arc::new(build_grid(cfg, &model)?);
    let mut stage_ms = vec![("grid_discovery".to_string(), t_grid.elapsed().as_millis())];
    let mut outputs = vec!["atoms.csv".to_string()];
    write_file(out_dir, "atoms.csv", atoms_csv(&grid).as_bytes())?;

    let t_eq = std::time::Instant::now();
    let (iterate, history) = solve_equilibrium(&model, &grid, &solve_options(cfg), cfg.seed)?;
    stage_ms.push(("equilibrium".to_string(), t_eq.elapsed().as_millis()));

    write_file(
        out_dir,
        "equilibrium_flow.csv",
        flow_csv(&iterate.flow)?.as_bytes(),
    )?;
    write_file(out_dir, "history.csv", history_csv(&history).as_bytes())?;
    outputs.push("equilibrium_flow.csv".to_string());
    outputs.push("history.csv".to_string());

    let dumps: Vec<SolutionDump> = iterate
        .policies
        .iter()
        .enumerate()
        .map(|(atom, p)| SolutionDump {
            atom,
            y0: p.solution.y0,
            y0_se: p.solution.y0_se,
            bound_violation_fraction: p.solution.bound_violation_fraction,
            solution: &p.solution,
        })
        .collect();
    let solutions_json =
        serde_json::to_string_pretty(&dumps).map_err(|e| MfgError::Validation {
            field: "bsde_solutions.json".into(),
            message: e.to_string(),
        })?;
    write_file(out_dir, "bsde_solutions.json", solutions_json.as_bytes())?;
    outputs.push("bsde_solutions.json".to_string());

    if opts.dump_paths {
        let csv = paths_csv(&model, &grid, &iterate, cfg.seed)?;
        write_file(out_dir, "paths.csv", csv.as_bytes())?;
        outputs.push("paths.csv".to_string());
    }

    if matches!(stage, Stage::Gap | Stage::Both) {
        let t_gap = std::time::Instant::now();
        let gap_opts = GapOptions {
            reps: cfg.nplayer.reps,
            br_paths: cfg.nplayer.br_paths,
            eval_paths: cfg.nplayer.eval_paths,
            basis_degree: cfg.bsde.basis_degree,
            bootstrap_resamples: 1000,
        };
        let estimates: Vec<GapEstimate> = cfg
            .nplayer
            .n_values
            .iter()
            .map(|&n| {
                best_response_gap(
                    &model,
                    &grid,
                    &iterate.policies,
                    n,
                    cfg.nplayer.player,
                    &gap_opts,
                    derive_seed(cfg.seed, tag::GAME, n as u64),
                )
            })
            .collect::<Result<_>>()?;
        let study = GapStudy {
            seed: cfg.seed,
            player: cfg.nplayer.player,
            reps: cfg.nplayer.reps,
            estimates,
        };
        let json = serde_json::to_string_pretty(&study).map_err(|e| MfgError::Validation {
            field: "results.json".into(),
            message: e.to_string(),
        })?;
        write_file(out_dir, "results.json", json.as_bytes())?;
        outputs.push("results.json".to_string());
        stage_ms.push(("gap_study".to_string(), t_gap.elapsed().as_millis()));
    }

    write_file(
        out_dir,
        "timings.csv",
        timings_csv(&history, &stage_ms).as_bytes(),
    )?;

    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        scenario: cfg.scenario.clone(),
        seed: cfg.seed,
        config_sha256: config_hash(cfg),
        stage,
        outputs,
        atoms: grid.n_atoms(),
        merged_members: grid.merged_members,
        noise_floor: Some(history.noise_floor),
        tol: Some(history.tol),
        converged: Some(iterate.converged),
        final_residual: Some(iterate.residual),
        config: cfg.clone(),
    };
    let manifest_json =
        serde_json::to_string_pretty(&manifest).map_err(|e| MfgError::Validation {
            field: "manifest.json".into(),
            message: e.to_string(),
        })?;
    let mut bytes = manifest_json.into_bytes();
    bytes.push(b'\n');
    let mut f = std::fs::File::create(out_dir.join("manifest.json")).map_err(|e| {
        MfgError::Validation {
            field: "manifest.json".into(),
            message: e.to_string(),
        }
    })?;
    f.write_all(&bytes).map_err(|e| MfgError::Validation {
        field: "manifest.json".into(),
        message: e.to_string(),
    })?;
    Ok(manifest)
}

/// Extract the embedded config when the given JSON value is a manifest.
pub fn config_from_manifest_json(text: &str) -> Option<ExperimentConfig> {
    let v: serde_json::Value = serde_json::from_str(text).ok()?;
    let cfg = v.get("config")?;
    serde_json::from_value(cfg.clone()).ok()
}
