//! Random flows of sub-probabilities represented by weighted particle clouds.
//!
//! For each atom of the common-noise grid and each grid time, the flow holds
//! the surviving particles and their weights; the total weight is the mass
//! `<1, mu_t> <= 1` and absorption only ever removes mass. Flows are paired
//! against a fixed *battery* of bounded Lipschitz test functions (always
//! containing the constant one and the scenario observable `h`); pairings are
//! precomputed at construction so that iteration, distances and exports never
//! need to touch particles again. Distances between flows are the maximum
//! pairing discrepancy over atoms, times and battery members — a cheap
//! surrogate metric that separates exactly the statistics the drift consumes.
//!
//! Flows are immutable snapshots: construction is single-writer, reads are
//! freely concurrent.

use crate::dynamics::{AtomEnv, ObservableFn, ParticlePath};
use crate::grid::TimeGrid;
use crate::kernel::SmoothingKernel;
use crate::{MfgError, Result};
use std::io::Write;
use std::sync::Arc;

pub type TestFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Named battery of bounded test functions; must contain `one` and `h`.
#[derive(Clone)]
pub struct Battery {
    entries: Vec<(String, TestFn)>,
}

impl Battery {
    pub fn new(entries: Vec<(String, TestFn)>) -> Result<Self> {
        for required in ["one", "h"] {
            if !entries.iter().any(|(n, _)| n == required) {
                return Err(MfgError::InvalidParameter(format!(
                    "battery must contain `{required}`"
                )));
            }
        }
        Ok(Battery { entries })
    }

    /// Default battery: constant one, the scenario observable, and one
    /// clamped-linear function per coordinate `x -> clamp(x_i, -r, r) / r`.
    pub fn default_battery(h: ObservableFn, dim: usize, radius: f64) -> Battery {
        let mut entries: Vec<(String, TestFn)> = vec![
            ("one".to_string(), Arc::new(|_x: &[f64]| 1.0) as TestFn),
            ("h".to_string(), Arc::new(move |x: &[f64]| h(x)) as TestFn),
        ];
        for c in 0..dim {
            let name = format!("clamp{c}");
            entries.push((
                name,
                Arc::new(move |x: &[f64]| x[c].clamp(-radius, radius) / radius) as TestFn,
            ));
        }
        Battery { entries }
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn entries(&self) -> &[(String, TestFn)] {
        &self.entries
    }
}

/// One particle retained in a cloud.
#[derive(Clone, Debug)]
pub struct CloudParticle {
    /// States at all grid nodes, `(steps + 1) * dim`.
    pub values: Vec<f64>,
    pub exit_idx: usize,
    pub absorbed: bool,
    pub weight: f64,
}

impl CloudParticle {
    #[inline]
    pub fn alive_at(&self, j: usize) -> bool {
        !self.absorbed || j < self.exit_idx
    }
}

/// All particles of one atom.
#[derive(Clone, Debug)]
pub struct AtomCloud {
    pub dim: usize,
    pub particles: Vec<CloudParticle>,
}

impl AtomCloud {
    /// `<f, mu_{t_j}>` by direct summation over surviving particles.
    pub fn pair_at(&self, f: &dyn Fn(&[f64]) -> f64, j: usize) -> f64 {
        let d = self.dim;
        self.particles
            .iter()
            .filter(|p| p.alive_at(j))
            .map(|p| p.weight * f(&p.values[j * d..(j + 1) * d]))
            .sum()
    }
}

/// Per-atom, per-time sub-probability flow in summary form, with optional
/// retained particle clouds.
#[derive(Clone)]
pub struct SubProbabilityFlow {
    pub grid: TimeGrid,
    pub atom_ids: Vec<usize>,
    battery_names: Vec<String>,
    /// `pairings[b][atom_pos * (steps + 1) + j]`
    pairings: Vec<Vec<f64>>,
    clouds: Option<Vec<AtomCloud>>,
}

/// Options for building an empirical flow.
pub struct FlowBuildOptions {
    /// Per-path weights (e.g. change-of-measure densities), self-normalized
    /// within each atom; `None` gives every path of an atom equal weight.
    pub weights: Option<Vec<f64>>,
    /// Keep the particle clouds (needed for `pair` with arbitrary functions
    /// and exact cloud mixing; summaries suffice for everything else).
    pub retain_clouds: bool,
}

impl Default for FlowBuildOptions {
    fn default() -> Self {
        FlowBuildOptions {
            weights: None,
            retain_clouds: false,
        }
    }
}

/// Build the per-atom empirical flow of a batch of simulated paths.
///
/// Within atom `k` the flow at node `j` is the weighted empirical measure of
/// the paths assigned to `k` that are still alive at `j`; with unit weights
/// this is `1/N_k` times the surviving count.
pub fn empirical_flow(
    paths: &[ParticlePath],
    grid: TimeGrid,
    atom_ids: &[usize],
    assignment: &[usize],
    battery: &Battery,
    opts: &FlowBuildOptions,
) -> Result<SubProbabilityFlow> {
    if paths.len() != assignment.len() {
        return Err(MfgError::InvalidParameter(
            "one atom assignment per path required".into(),
        ));
    }
    if let Some(w) = &opts.weights {
        if w.len() != paths.len() {
            return Err(MfgError::InvalidParameter(
                "one weight per path required".into(),
            ));
        }
        if w.iter().any(|&x| !(x > 0.0)) {
            return Err(MfgError::InvalidParameter(
                "path weights must be strictly positive".into(),
            ));
        }
    }
    let mut atom_ids = atom_ids.to_vec();
    atom_ids.sort_unstable();
    atom_ids.dedup();
    let nodes = grid.len();
    let dim = paths.first().map(|p| p.dim).unwrap_or(0);

    let mut clouds: Vec<AtomCloud> = atom_ids
        .iter()
        .map(|_| AtomCloud {
            dim,
            particles: Vec::new(),
        })
        .collect();
    for (i, path) in paths.iter().enumerate() {
        let atom = assignment[i];
        let pos = atom_ids
            .binary_search(&atom)
            .map_err(|_| MfgError::InvalidParameter(format!("path assigned to unknown atom {atom}")))?;
        clouds[pos].particles.push(CloudParticle {
            values: path.values.clone(),
            exit_idx: path.exit_idx,
            absorbed: path.absorbed,
            weight: opts.weights.as_ref().map(|w| w[i]).unwrap_or(1.0),
        });
    }
    for (pos, cloud) in clouds.iter_mut().enumerate() {
        if cloud.particles.is_empty() {
            return Err(MfgError::DegenerateAtom {
                atom: atom_ids[pos],
            });
        }
        let total: f64 = cloud.particles.iter().map(|p| p.weight).sum();
        for p in cloud.particles.iter_mut() {
            p.weight /= total;
        }
    }

    let battery_names = battery.names();
    let mut pairings = vec![vec![0.0; atom_ids.len() * nodes]; battery.entries().len()];
    for (b, (_name, f)) in battery.entries().iter().enumerate() {
        for (pos, cloud) in clouds.iter().enumerate() {
            for j in 0..nodes {
                pairings[b][pos * nodes + j] = cloud.pair_at(f.as_ref(), j);
            }
        }
    }

    Ok(SubProbabilityFlow {
        grid,
        atom_ids,
        battery_names,
        pairings,
        clouds: if opts.retain_clouds { Some(clouds) } else { None },
    })
}

impl SubProbabilityFlow {
    fn battery_pos(&self, name: &str) -> Result<usize> {
        self.battery_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| {
                MfgError::InvalidParameter(format!("battery function `{name}` not in flow"))
            })
    }

    pub fn atom_pos(&self, atom_id: usize) -> Result<usize> {
        self.atom_ids
            .binary_search(&atom_id)
            .map_err(|_| MfgError::InvalidParameter(format!("atom {atom_id} not in flow")))
    }

    pub fn battery_names(&self) -> &[String] {
        &self.battery_names
    }

    pub fn has_clouds(&self) -> bool {
        self.clouds.is_some()
    }

    pub fn cloud(&self, atom_id: usize) -> Result<&AtomCloud> {
        let pos = self.atom_pos(atom_id)?;
        self.clouds
            .as_ref()
            .map(|c| &c[pos])
            .ok_or_else(|| MfgError::InvalidParameter("flow does not retain clouds".into()))
    }

    /// Stored pairing trajectory of one battery function on one atom.
    pub fn pair_battery_trajectory(&self, name: &str, atom_id: usize) -> Result<&[f64]> {
        let b = self.battery_pos(name)?;
        let pos = self.atom_pos(atom_id)?;
        let nodes = self.grid.len();
        Ok(&self.pairings[b][pos * nodes..(pos + 1) * nodes])
    }

    pub fn pair_battery(&self, name: &str, atom_id: usize, j: usize) -> Result<f64> {
        Ok(self.pair_battery_trajectory(name, atom_id)?[j])
    }

    /// `<1, mu_t>` on an atom.
    pub fn mass(&self, atom_id: usize, j: usize) -> Result<f64> {
        self.pair_battery("one", atom_id, j)
    }

    /// Pair an arbitrary function against the cloud (requires retained
    /// particles).
    pub fn pair(&self, f: &dyn Fn(&[f64]) -> f64, atom_id: usize, j: usize) -> Result<f64> {
        Ok(self.cloud(atom_id)?.pair_at(f, j))
    }

    /// Per-atom drift environment: mass and `h` pairings plus the
    /// smoothed-loss derivative.
    pub fn atom_env(&self, kernel: &SmoothingKernel, atom_id: usize) -> Result<AtomEnv> {
        let mass = self.pair_battery_trajectory("one", atom_id)?.to_vec();
        let h_pair = self.pair_battery_trajectory("h", atom_id)?.to_vec();
        AtomEnv::from_trajectories(kernel, self.grid, mass, h_pair)
    }

    fn check_compatible(&self, other: &SubProbabilityFlow) -> Result<()> {
        if self.grid != other.grid {
            return Err(MfgError::IncompatibleFlows("time grids differ".into()));
        }
        if self.atom_ids != other.atom_ids {
            return Err(MfgError::IncompatibleFlows("atom sets differ".into()));
        }
        if self.battery_names != other.battery_names {
            return Err(MfgError::IncompatibleFlows("batteries differ".into()));
        }
        Ok(())
    }

    /// Max pairing discrepancy over battery members, atoms and grid times.
    pub fn flow_distance(&self, other: &SubProbabilityFlow) -> Result<f64> {
        self.check_compatible(other)?;
        let mut worst = 0.0f64;
        for (pa, pb) in self.pairings.iter().zip(&other.pairings) {
            for (a, b) in pa.iter().zip(pb) {
                worst = worst.max((a - b).abs());
            }
        }
        Ok(worst)
    }

    /// Damped mixture: pairings `(1 - rho) self + rho other`; clouds are the
    /// weighted union when both operands retain them.
    pub fn mix(&self, other: &SubProbabilityFlow, rho: f64) -> Result<SubProbabilityFlow> {
        self.check_compatible(other)?;
        if !(0.0..=1.0).contains(&rho) {
            return Err(MfgError::InvalidParameter(format!(
                "mixing weight must lie in [0, 1], got {rho}"
            )));
        }
        let pairings = self
            .pairings
            .iter()
            .zip(&other.pairings)
            .map(|(pa, pb)| {
                pa.iter()
                    .zip(pb)
                    .map(|(a, b)| (1.0 - rho) * a + rho * b)
                    .collect()
            })
            .collect();
        let clouds = match (&self.clouds, &other.clouds) {
            (Some(ca), Some(cb)) => Some(
                ca.iter()
                    .zip(cb)
                    .map(|(a, b)| {
                        let mut particles: Vec<CloudParticle> = a
                            .particles
                            .iter()
                            .map(|p| CloudParticle {
                                weight: p.weight * (1.0 - rho),
                                ..p.clone()
                            })
                            .collect();
                        particles.extend(b.particles.iter().map(|p| CloudParticle {
                            weight: p.weight * rho,
                            ..p.clone()
                        }));
                        AtomCloud {
                            dim: a.dim,
                            particles,
                        }
                    })
                    .collect(),
            ),
            _ => None,
        };
        Ok(SubProbabilityFlow {
            grid: self.grid,
            atom_ids: self.atom_ids.clone(),
            battery_names: self.battery_names.clone(),
            pairings,
            clouds,
        })
    }

    /// Combine flows over disjoint atom sets into one flow (same grid and
    /// battery required). Atoms end up sorted by id.
    pub fn concat(parts: Vec<SubProbabilityFlow>) -> Result<SubProbabilityFlow> {
        let first = parts
            .first()
            .ok_or_else(|| MfgError::InvalidParameter("no flows to combine".into()))?;
        let grid = first.grid;
        let battery_names = first.battery_names.clone();
        let nodes = grid.len();
        let mut tagged: Vec<(usize, usize, usize)> = Vec::new(); // (atom, part, pos)
        for (pi, part) in parts.iter().enumerate() {
            if part.grid != grid || part.battery_names != battery_names {
                return Err(MfgError::IncompatibleFlows(
                    "parts use different grids or batteries".into(),
                ));
            }
            for (pos, &atom) in part.atom_ids.iter().enumerate() {
                tagged.push((atom, pi, pos));
            }
        }
        tagged.sort_unstable();
        if tagged.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(MfgError::IncompatibleFlows(
                "parts share an atom id".into(),
            ));
        }
        let atom_ids: Vec<usize> = tagged.iter().map(|t| t.0).collect();
        let retain_clouds = parts.iter().all(|p| p.clouds.is_some());
        let mut pairings = vec![vec![0.0; atom_ids.len() * nodes]; battery_names.len()];
        let mut clouds = if retain_clouds { Some(Vec::new()) } else { None };
        for (slot, &(_, pi, pos)) in tagged.iter().enumerate() {
            for b in 0..battery_names.len() {
                pairings[b][slot * nodes..(slot + 1) * nodes]
                    .copy_from_slice(&parts[pi].pairings[b][pos * nodes..(pos + 1) * nodes]);
            }
            if let Some(cl) = clouds.as_mut() {
                cl.push(parts[pi].clouds.as_ref().expect("checked")[pos].clone());
            }
        }
        Ok(SubProbabilityFlow {
            grid,
            atom_ids,
            battery_names,
            pairings,
            clouds,
        })
    }

    /// CSV export: one row per (atom, time) with the mass and all battery
    /// pairings. Columns: `atom,time_index,time,<battery names...>`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        write!(w, "atom,time_index,time")?;
        for name in &self.battery_names {
            write!(w, ",{name}")?;
        }
        writeln!(w)?;
        let nodes = self.grid.len();
        for (pos, atom) in self.atom_ids.iter().enumerate() {
            for j in 0..nodes {
                write!(w, "{atom},{j},{}", self.grid.time(j))?;
                for b in 0..self.battery_names.len() {
                    write!(w, ",{}", self.pairings[b][pos * nodes + j])?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}
