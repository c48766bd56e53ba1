//! Quantization of the common noise into a finite family of atoms.
//!
//! The common Brownian motion is observed at a coarse grid of times and each
//! increment is projected on a dyadic lattice (cell width `4^-n`, clamped at
//! `±4^n`). The tuple of visited cells identifies an *atom*: one event of the
//! finite sigma-algebra generated by the quantized path. Atoms are discovered
//! empirically from a generating sample; cells occupied by fewer members than
//! a minimum occupancy are merged into the nearest retained atom.
//!
//! The time resolution (number of coarse intervals) and the quantizer level
//! are independent knobs; `paper_level(n)` couples them back to the schedule
//! `2^n` intervals with resolution `4^-n`. An optional component mask limits
//! quantization to selected noise components so that desk-scale runs do not
//! pay a combinatorial atom count for components that barely matter.

use crate::dynamics::CommonPath;
use crate::grid::TimeGrid;
use crate::{MfgError, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use std::collections::BTreeMap;

/// Discretization parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Number of coarse observation intervals on `[0, T]`.
    pub n_coarse: usize,
    /// Quantizer level: cell width `4^-n_quant`, clamp at `4^n_quant`.
    pub n_quant: u32,
    /// Indices of the noise components that are quantized; `None` = all.
    pub quantized: Option<Vec<usize>>,
}

impl GridSpec {
    /// Coupled schedule: `2^n` coarse intervals at quantizer level `n`.
    pub fn paper_level(n: u32) -> Self {
        GridSpec {
            n_coarse: 1usize << n,
            n_quant: n,
            quantized: None,
        }
    }

    /// Single-atom grid: conditions on nothing.
    pub fn trivial() -> Self {
        GridSpec {
            n_coarse: 1,
            n_quant: 0,
            quantized: Some(vec![]),
        }
    }

    pub fn quantized_components(&self, dim: usize) -> Vec<usize> {
        match &self.quantized {
            Some(v) => v.clone(),
            None => (0..dim).collect(),
        }
    }

    pub fn coarse_dt(&self, t_end: f64) -> f64 {
        t_end / self.n_coarse as f64
    }

    pub fn validate(&self, dim: usize, fine_steps: usize) -> Result<()> {
        if self.n_coarse == 0 {
            return Err(MfgError::InvalidParameter(
                "n_coarse must be positive".into(),
            ));
        }
        if fine_steps % self.n_coarse != 0 {
            return Err(MfgError::InvalidParameter(format!(
                "fine grid ({fine_steps} steps) must refine the {} coarse intervals",
                self.n_coarse
            )));
        }
        if let Some(q) = &self.quantized {
            if q.iter().any(|&c| c >= dim) {
                return Err(MfgError::InvalidParameter(
                    "quantized component index out of range".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Quantizer cell of a scalar: `clamp(floor(4^n x), -16^n, 16^n)`.
///
/// The clamped indices coincide with the saturation values `±4^n`.
#[inline]
pub fn cell_index(x: f64, n_quant: u32) -> i64 {
    let scale = 4f64.powi(n_quant as i32);
    let bound = (scale * scale) as i64;
    let m = (scale * x).floor();
    (m as i64).clamp(-bound, bound)
}

/// Left edge of the cell, which is also the projection value.
#[inline]
pub fn cell_value(m: i64, n_quant: u32) -> f64 {
    m as f64 * 4f64.powi(-(n_quant as i32))
}

/// Cell bounds `[lo, hi)`; clamp cells extend to infinity.
pub fn cell_bounds(m: i64, n_quant: u32) -> (f64, f64) {
    let scale = 4f64.powi(n_quant as i32);
    let q = 1.0 / scale;
    let bound = (scale * scale) as i64;
    if m >= bound {
        (scale, f64::INFINITY)
    } else if m <= -bound {
        (f64::NEG_INFINITY, -scale + q)
    } else {
        (m as f64 * q, (m + 1) as f64 * q)
    }
}

/// Componentwise projection `x -> 4^-n floor(4^n x)`, saturated at `±4^n`.
pub fn project(x: &[f64], n_quant: u32) -> Vec<f64> {
    x.iter()
        .map(|&xi| cell_value(cell_index(xi, n_quant), n_quant))
        .collect()
}

/// A quantized coarse path: cell signature plus representative values.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedPath {
    /// Cell indices, one per (coarse step, quantized component).
    pub signature: Vec<i64>,
    /// Representative path values at coarse nodes, `(n_coarse + 1) * dim`;
    /// unquantized components are reported as zero.
    pub values: Vec<f64>,
}

/// Quantize a coarse increment record (`n_coarse * dim`, step-major) by
/// projecting the increments and accumulating from zero.
pub fn discretize_increments(coarse_incr: &[f64], dim: usize, spec: &GridSpec) -> QuantizedPath {
    let comps = spec.quantized_components(dim);
    let mut signature = Vec::with_capacity(spec.n_coarse * comps.len());
    let mut values = vec![0.0; (spec.n_coarse + 1) * dim];
    for i in 0..spec.n_coarse {
        for &c in comps.iter() {
            let m = cell_index(coarse_incr[i * dim + c], spec.n_quant);
            signature.push(m);
            values[(i + 1) * dim + c] = values[i * dim + c] + cell_value(m, spec.n_quant);
        }
    }
    QuantizedPath { signature, values }
}

/// One atom of the finite sigma-algebra.
#[derive(Clone, Debug)]
pub struct AtomInfo {
    pub id: usize,
    /// Cell signature of the founding member (merged atoms keep theirs).
    pub signature: Vec<i64>,
    pub count: usize,
    pub probability: f64,
    /// Representative quantized path values, `(n_coarse + 1) * dim`.
    pub representative: Vec<f64>,
    /// Coarse increments of the generating-sample members; used for
    /// conditional redraws.
    pool: Vec<Vec<f64>>,
}

impl AtomInfo {
    pub fn pool_size(&self) -> usize {
        self.pool.len()
    }
}

/// The frozen finite sigma-algebra: atom table plus assignment map.
///
/// Construction is single-writer; lookups afterwards are read-only.
#[derive(Clone, Debug)]
pub struct CommonNoiseGrid {
    pub spec: GridSpec,
    pub dim: usize,
    pub t_end: f64,
    pub total_sample: usize,
    /// Number of generating members that were merged into another atom.
    pub merged_members: usize,
    atoms: Vec<AtomInfo>,
    assignment: BTreeMap<Vec<i64>, usize>,
}

fn rep_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

impl CommonNoiseGrid {
    /// Build the atom table from a sample of coarse increment records.
    ///
    /// Atoms are registered in order of first sight; cells occupied by fewer
    /// than `min_occupancy` members are merged into the nearest retained atom
    /// (distance between representative paths). Every retained atom ends up
    /// with `probability > 0`.
    pub fn conditional_atoms(
        sample: &[Vec<f64>],
        dim: usize,
        t_end: f64,
        spec: &GridSpec,
        min_occupancy: usize,
    ) -> Result<Self> {
        if sample.is_empty() {
            return Err(MfgError::UnderResolvedGrid(
                "empty generating sample".into(),
            ));
        }
        // First-sight registration.
        let mut order: Vec<Vec<i64>> = Vec::new();
        let mut raw: BTreeMap<Vec<i64>, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
        for (i, incr) in sample.iter().enumerate() {
            let q = discretize_increments(incr, dim, spec);
            match raw.get_mut(&q.signature) {
                Some((members, _)) => members.push(i),
                None => {
                    order.push(q.signature.clone());
                    raw.insert(q.signature, (vec![i], q.values));
                }
            }
        }
        let retained: Vec<&Vec<i64>> = order
            .iter()
            .filter(|sig| raw[*sig].0.len() >= min_occupancy)
            .collect();
        if retained.is_empty() {
            return Err(MfgError::UnderResolvedGrid(format!(
                "no cell reaches the minimum occupancy {min_occupancy} with {} samples",
                sample.len()
            )));
        }
        let mut atoms: Vec<AtomInfo> = retained
            .iter()
            .enumerate()
            .map(|(id, sig)| {
                let (members, values) = &raw[*sig];
                AtomInfo {
                    id,
                    signature: (*sig).clone(),
                    count: members.len(),
                    probability: 0.0,
                    representative: values.clone(),
                    pool: members.iter().map(|&i| sample[i].clone()).collect(),
                }
            })
            .collect();
        let mut assignment: BTreeMap<Vec<i64>, usize> = retained
            .iter()
            .enumerate()
            .map(|(id, sig)| ((*sig).clone(), id))
            .collect();
        // Merge the tail into nearest retained representatives.
        let mut merged_members = 0usize;
        for sig in order.iter() {
            if assignment.contains_key(sig) {
                continue;
            }
            let (members, values) = &raw[sig];
            let nearest = atoms
                .iter()
                .map(|a| rep_distance(&a.representative, values))
                .enumerate()
                .min_by(|a, b| a.1.partial_cmp(&b.1).expect("finite distance"))
                .map(|(i, _)| i)
                .expect("at least one retained atom");
            atoms[nearest].count += members.len();
            merged_members += members.len();
            for &i in members {
                atoms[nearest].pool.push(sample[i].clone());
            }
            assignment.insert(sig.clone(), nearest);
        }
        let total = sample.len();
        for a in &mut atoms {
            a.probability = a.count as f64 / total as f64;
        }
        Ok(CommonNoiseGrid {
            spec: spec.clone(),
            dim,
            t_end,
            total_sample: total,
            merged_members,
            atoms,
            assignment,
        })
    }

    pub fn atoms(&self) -> &[AtomInfo] {
        &self.atoms
    }

    pub fn n_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn atom_ids(&self) -> Vec<usize> {
        (0..self.atoms.len()).collect()
    }

    /// Quantize a coarse increment record and return `(atom id, V path)`.
    /// Cell tuples unseen during construction map to the nearest retained
    /// atom, consistent with the merge rule.
    pub fn discretize(&self, coarse_incr: &[f64]) -> (usize, Vec<f64>) {
        let q = discretize_increments(coarse_incr, self.dim, &self.spec);
        let id = match self.assignment.get(&q.signature) {
            Some(&id) => id,
            None => self
                .atoms
                .iter()
                .map(|a| rep_distance(&a.representative, &q.values))
                .enumerate()
                .min_by(|a, b| a.1.partial_cmp(&b.1).expect("finite distance"))
                .map(|(i, _)| i)
                .expect("non-empty atom table"),
        };
        (id, q.values)
    }

    /// Draw coarse increments from the conditional law given the atom: a pool
    /// member pins the cell pattern, the within-cell values are redrawn as
    /// truncated Gaussians and unquantized components are drawn fresh.
    pub fn sample_conditional_coarse<R: Rng + ?Sized>(&self, atom: usize, rng: &mut R) -> Vec<f64> {
        let a = &self.atoms[atom];
        let member = &a.pool[rng.random_range(0..a.pool.len())];
        resample_within_cells(member, self.dim, &self.spec, self.t_end, rng)
    }
}

fn unit_normal() -> &'static Normal {
    static NORMAL: std::sync::OnceLock<Normal> = std::sync::OnceLock::new();
    NORMAL.get_or_init(|| Normal::new(0.0, 1.0).expect("unit normal"))
}

fn std_normal_cdf(x: f64) -> f64 {
    unit_normal().cdf(x)
}

/// Sample `N(0, sd^2)` conditioned on `[lo, hi)` by inverse-CDF.
pub fn truncated_normal<R: Rng + ?Sized>(sd: f64, lo: f64, hi: f64, rng: &mut R) -> f64 {
    let plo = if lo.is_finite() {
        std_normal_cdf(lo / sd)
    } else {
        0.0
    };
    let phi = if hi.is_finite() {
        std_normal_cdf(hi / sd)
    } else {
        1.0
    };
    let u: f64 = rng.random_range(0.0..1.0);
    let p = (plo + u * (phi - plo)).clamp(1e-15, 1.0 - 1e-15);
    let x = sd * unit_normal().inverse_cdf(p);
    // Round-trip through the quantile can escape a narrow cell in the
    // extreme tails; clamp back.
    if hi.is_finite() && x >= hi {
        hi - 1e-12 * sd.max(1.0)
    } else if lo.is_finite() && x < lo {
        lo
    } else {
        x
    }
}

/// Redraw coarse increments conditionally on the cells visited by `incr`:
/// quantized components get truncated Gaussians within their cells,
/// unquantized components get fresh Gaussians.
pub fn resample_within_cells<R: Rng + ?Sized>(
    incr: &[f64],
    dim: usize,
    spec: &GridSpec,
    t_end: f64,
    rng: &mut R,
) -> Vec<f64> {
    let comps = spec.quantized_components(dim);
    let sd = spec.coarse_dt(t_end).sqrt();
    let mut out = vec![0.0; spec.n_coarse * dim];
    for i in 0..spec.n_coarse {
        for c in 0..dim {
            let v = if comps.contains(&c) {
                let m = cell_index(incr[i * dim + c], spec.n_quant);
                let (lo, hi) = cell_bounds(m, spec.n_quant);
                truncated_normal(sd, lo, hi, rng)
            } else {
                let z: f64 = rng.sample(StandardNormal);
                sd * z
            };
            out[i * dim + c] = v;
        }
    }
    out
}

/// Fresh fine-grid common path: iid Gaussian increments.
pub fn fresh_common_path<R: Rng + ?Sized>(grid: &TimeGrid, dim: usize, rng: &mut R) -> CommonPath {
    let sd = grid.dt().sqrt();
    let increments = (0..grid.steps * dim)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            sd * z
        })
        .collect();
    CommonPath { dim, increments }
}

/// Coarse increments (`n_coarse * dim`) of a fine path by block sums.
pub fn coarse_increments(path: &CommonPath, grid: &TimeGrid, n_coarse: usize) -> Vec<f64> {
    let per = grid.steps / n_coarse;
    let d = path.dim;
    let mut out = vec![0.0; n_coarse * d];
    for i in 0..n_coarse {
        for j in 0..per {
            for c in 0..d {
                out[i * d + c] += path.increments[((i * per + j) * d) + c];
            }
        }
    }
    out
}

/// Fill a fine path whose coarse block sums equal `coarse_incr`, via
/// sequential Brownian-bridge sampling inside each coarse interval.
pub fn bridge_fine_path<R: Rng + ?Sized>(
    coarse_incr: &[f64],
    dim: usize,
    grid: &TimeGrid,
    n_coarse: usize,
    rng: &mut R,
) -> CommonPath {
    let per = grid.steps / n_coarse;
    let dt = grid.dt();
    let mut increments = vec![0.0; grid.steps * dim];
    for i in 0..n_coarse {
        for c in 0..dim {
            let mut remaining_sum = coarse_incr[i * dim + c];
            let mut remaining = per;
            for j in 0..per {
                let dw = if remaining == 1 {
                    remaining_sum
                } else {
                    let mean = remaining_sum / remaining as f64;
                    let var = dt * (remaining as f64 - 1.0) / remaining as f64;
                    let z: f64 = rng.sample(StandardNormal);
                    mean + var.sqrt() * z
                };
                increments[((i * per + j) * dim) + c] = dw;
                remaining_sum -= dw;
                remaining -= 1;
            }
        }
    }
    CommonPath { dim, increments }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, tag};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn projection_hand_values() {
        assert_eq!(project(&[0.0], 1), vec![0.0]);
        assert_eq!(project(&[0.3], 1), vec![0.25]);
        assert_eq!(project(&[17.0], 1), vec![4.0]);
        assert_eq!(project(&[-17.0], 1), vec![-4.0]);
    }

    #[test]
    fn quantized_path_hand_values() {
        // increments (0.3, -0.6) in 1-d at level 1 -> v = (0, 0.25, -0.5)
        let spec = GridSpec {
            n_coarse: 2,
            n_quant: 1,
            quantized: None,
        };
        let q = discretize_increments(&[0.3, -0.6], 1, &spec);
        assert_eq!(q.values, vec![0.0, 0.25, -0.5]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn projection_idempotent_and_tight(x in -3.9f64..3.9, n in 0u32..3) {
            let p = project(&[x], n)[0];
            prop_assert_eq!(project(&[p], n)[0], p);
            // the quantization-error bound holds inside the clamp range
            if x.abs() <= 4f64.powi(n as i32) {
                prop_assert!((p - x).abs() <= 4f64.powi(-(n as i32)) + 1e-12);
            }
        }

        #[test]
        fn truncated_normal_stays_in_cell(m in -15i64..=15, u in 0u64..1000) {
            let mut rng = substream(u, tag::BRIDGE, 0);
            let (lo, hi) = cell_bounds(m, 1);
            let x = truncated_normal(0.7, lo, hi, &mut rng);
            prop_assert!(x >= lo && x < hi + 1e-9, "{} not in [{},{})", x, lo, hi);
        }
    }

    #[test]
    fn accumulated_quantization_error_bound() {
        // |v_i - w_i| <= i * 4^-n componentwise while the path stays within
        // the clamp range.
        let spec = GridSpec {
            n_coarse: 8,
            n_quant: 1,
            quantized: None,
        };
        let mut rng = substream(11, tag::W0_SAMPLE, 0);
        for _ in 0..200 {
            let incr: Vec<f64> = (0..8)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    0.35 * z
                })
                .collect();
            let sup = incr
                .iter()
                .scan(0.0, |acc, dx| {
                    *acc += dx;
                    Some(acc.abs())
                })
                .fold(0.0f64, f64::max);
            if sup > 4.0 - 1.0 {
                continue;
            }
            let q = discretize_increments(&incr, 1, &spec);
            let mut w = 0.0;
            for i in 1..=8 {
                w += incr[i - 1];
                let bound = i as f64 * 0.25 + 1e-12;
                assert!((q.values[i] - w).abs() <= bound);
            }
        }
    }

    fn gaussian_sample(n: usize, steps: usize, sd: f64, seed: u64) -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| {
                let mut rng = substream(seed, tag::W0_SAMPLE, i as u64);
                (0..steps)
                    .map(|_| {
                        let z: f64 = rng.sample(StandardNormal);
                        sd * z
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn single_path_gives_single_atom() {
        let spec = GridSpec {
            n_coarse: 2,
            n_quant: 1,
            quantized: None,
        };
        let sample = vec![vec![0.1, -0.2]];
        let grid = CommonNoiseGrid::conditional_atoms(&sample, 1, 1.0, &spec, 1).unwrap();
        assert_eq!(grid.n_atoms(), 1);
        assert_abs_diff_eq!(grid.atoms()[0].probability, 1.0);
    }

    #[test]
    fn atom_probabilities_match_gaussian_cell_masses() {
        // 1-d, 2 coarse steps, level 1: P(atom) = product of cell masses.
        let spec = GridSpec {
            n_coarse: 2,
            n_quant: 1,
            quantized: None,
        };
        let t_end = 1.0;
        let sd = spec.coarse_dt(t_end).sqrt();
        let n = 10_000;
        let sample = gaussian_sample(n, 2, sd, 42);
        let grid = CommonNoiseGrid::conditional_atoms(&sample, 1, t_end, &spec, 1).unwrap();
        let mut checked = 0;
        for atom in grid.atoms() {
            if atom.count < 100 {
                continue;
            }
            let mut p_theory = 1.0;
            for step in 0..2 {
                let m = atom.signature[step];
                let (lo, hi) = cell_bounds(m, 1);
                let plo = if lo.is_finite() { std_normal_cdf(lo / sd) } else { 0.0 };
                let phi = if hi.is_finite() { std_normal_cdf(hi / sd) } else { 1.0 };
                p_theory *= phi - plo;
            }
            let se = (p_theory * (1.0 - p_theory) / n as f64).sqrt();
            assert!(
                (atom.probability - p_theory).abs() <= 3.0 * se,
                "atom {:?}: empirical {} vs theory {}",
                atom.signature,
                atom.probability,
                p_theory
            );
            checked += 1;
        }
        assert!(checked >= 4, "only {checked} atoms large enough to check");
    }

    #[test]
    fn mirrored_sample_has_mirrored_atom_counts() {
        // For a sample closed under negation the counts of cell tuple m and
        // its mirror -1-m agree exactly (the floor asymmetry maps cells to
        // cells away from lattice points).
        let spec = GridSpec {
            n_coarse: 2,
            n_quant: 1,
            quantized: None,
        };
        let half = gaussian_sample(3000, 2, 0.7, 7);
        let mut sample = half.clone();
        sample.extend(
            half.iter()
                .map(|v| v.iter().map(|x| -x).collect::<Vec<f64>>()),
        );
        let grid = CommonNoiseGrid::conditional_atoms(&sample, 1, 1.0, &spec, 1).unwrap();
        for atom in grid.atoms() {
            let mirror: Vec<i64> = atom.signature.iter().map(|m| -1 - m).collect();
            let twin = grid.atoms().iter().find(|a| a.signature == mirror);
            let twin_count = twin.map(|a| a.count).unwrap_or(0);
            assert_eq!(atom.count, twin_count, "cells {:?}", atom.signature);
        }
    }

    #[test]
    fn under_resolved_sample_is_an_error() {
        let spec = GridSpec {
            n_coarse: 2,
            n_quant: 2,
            quantized: None,
        };
        let sample = gaussian_sample(20, 2, 0.7, 3);
        let got = CommonNoiseGrid::conditional_atoms(&sample, 1, 1.0, &spec, 15);
        assert!(matches!(got, Err(MfgError::UnderResolvedGrid(_))));
    }

    #[test]
    fn merging_preserves_total_mass_and_positivity() {
        let spec = GridSpec {
            n_coarse: 2,
            n_quant: 1,
            quantized: None,
        };
        let sample = gaussian_sample(2000, 2, 0.7, 9);
        let grid = CommonNoiseGrid::conditional_atoms(&sample, 1, 1.0, &spec, 50).unwrap();
        let total: f64 = grid.atoms().iter().map(|a| a.probability).sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        for a in grid.atoms() {
            assert!(a.probability > 0.0);
            assert!(a.count >= 50);
        }
    }

    #[test]
    fn assignment_depends_only_on_coarse_increments() {
        let spec = GridSpec {
            n_coarse: 2,
            n_quant: 1,
            quantized: None,
        };
        let grid_t = TimeGrid::new(1.0, 10).unwrap();
        let sample = gaussian_sample(2000, 2, 0.7, 9);
        let grid = CommonNoiseGrid::conditional_atoms(&sample, 1, 1.0, &spec, 20).unwrap();
        let coarse = vec![0.31, -0.12];
        let mut rng = substream(5, tag::BRIDGE, 1);
        let fine_a = bridge_fine_path(&coarse, 1, &grid_t, 2, &mut rng);
        let fine_b = bridge_fine_path(&coarse, 1, &grid_t, 2, &mut rng);
        let ca = coarse_increments(&fine_a, &grid_t, 2);
        let cb = coarse_increments(&fine_b, &grid_t, 2);
        assert_eq!(grid.discretize(&ca).0, grid.discretize(&cb).0);
    }

    #[test]
    fn bridge_reproduces_coarse_sums() {
        let grid_t = TimeGrid::new(2.0, 40).unwrap();
        let coarse = vec![0.5, -1.0, 0.25, 0.0, 1.5, -0.5, 0.125, 0.0];
        let mut rng = substream(17, tag::BRIDGE, 0);
        let fine = bridge_fine_path(&coarse, 2, &grid_t, 4, &mut rng);
        let back = coarse_increments(&fine, &grid_t, 4);
        for (a, b) in coarse.iter().zip(&back) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn conditional_resample_preserves_cells() {
        let spec = GridSpec {
            n_coarse: 3,
            n_quant: 1,
            quantized: Some(vec![0]),
        };
        let incr = vec![0.3, -0.9, -0.6, 0.2, 1.1, 0.05];
        let mut rng = substream(23, tag::INNER, 2);
        for _ in 0..50 {
            let redraw = resample_within_cells(&incr, 2, &spec, 1.0, &mut rng);
            for i in 0..3 {
                assert_eq!(
                    cell_index(redraw[i * 2], 1),
                    cell_index(incr[i * 2], 1),
                    "quantized component must stay in its cell"
                );
            }
        }
    }

    #[test]
    fn pool_redraws_follow_conditional_cells() {
        let spec = GridSpec {
            n_coarse: 2,
            n_quant: 1,
            quantized: None,
        };
        let sample = gaussian_sample(2000, 2, 0.7, 31);
        let grid = CommonNoiseGrid::conditional_atoms(&sample, 1, 1.0, &spec, 30).unwrap();
        let mut rng = substream(3, tag::INNER, 0);
        for atom in 0..grid.n_atoms() {
            let pool_cells: std::collections::BTreeSet<Vec<i64>> = grid.atoms()[atom]
                .pool
                .iter()
                .map(|m| discretize_increments(m, 1, &spec).signature)
                .collect();
            for _ in 0..20 {
                let draw = grid.sample_conditional_coarse(atom, &mut rng);
                let sig = discretize_increments(&draw, 1, &spec).signature;
                assert!(pool_cells.contains(&sig));
            }
        }
    }
}
