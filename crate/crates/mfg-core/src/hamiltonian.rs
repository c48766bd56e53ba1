//! Control Hamiltonian and its maximizer over the compact control box.
//!
//! `H(t, x, m, z, a) = f(t, x, m, a) + z . sigma^-1 b~(t, x, m, a)`. With the
//! drift affine in the control and `f` strictly concave in `a`, the maximizer
//! is unique; for the quadratic cost `-c |a|^2` it is available in closed
//! form, `clamp(b2(t)^T sigma^-T z / (2c))`. Other concave costs fall back to
//! golden-section search (scalar controls) or projected gradient ascent.
//!
//! All functions here are pure in their arguments and freely concurrent.

use crate::dynamics::{mat_vec, AtomEnv, ControlLoading, RunningCost, StateModel};
use crate::{MfgError, Result};
use nalgebra::DMatrix;

/// How the maximizer is computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaximizerMode {
    /// Pick per cost shape: closed form for quadratic, numeric otherwise.
    Auto,
    ClosedFormQuadratic,
    Numeric1d,
    ProjectedAscent,
}

/// Precomputed pieces of the Hamiltonian.
#[derive(Clone, Debug)]
pub struct HamiltonianSpec {
    pub sigma_inv: DMatrix<f64>,
    pub sigma_inv_t: DMatrix<f64>,
    pub mode: MaximizerMode,
}

impl HamiltonianSpec {
    pub fn new(model: &StateModel) -> Result<Self> {
        Self::with_mode(model, MaximizerMode::Auto)
    }

    pub fn with_mode(model: &StateModel, mode: MaximizerMode) -> Result<Self> {
        if model.dim > 8 || model.control_dim > 8 {
            return Err(MfgError::InvalidParameter(
                "state and control dimensions above 8 are not supported".into(),
            ));
        }
        let sigma_inv = model.sigma_inverse()?;
        // sigma sigma^-1 = identity within 1e-12
        let eye = &model.sigma * &sigma_inv;
        for r in 0..model.dim {
            for c in 0..model.dim {
                let expect = if r == c { 1.0 } else { 0.0 };
                if (eye[(r, c)] - expect).abs() > 1e-12 {
                    return Err(MfgError::InvalidParameter(
                        "sigma inverse fails the identity check".into(),
                    ));
                }
            }
        }
        let sigma_inv_t = sigma_inv.transpose();
        Ok(HamiltonianSpec {
            sigma_inv,
            sigma_inv_t,
            mode,
        })
    }

    fn effective_mode(&self, model: &StateModel) -> MaximizerMode {
        match self.mode {
            MaximizerMode::Auto => match (&model.running_cost, model.control_dim) {
                (RunningCost::Quadratic { .. }, _) => MaximizerMode::ClosedFormQuadratic,
                (_, 1) => MaximizerMode::Numeric1d,
                _ => MaximizerMode::ProjectedAscent,
            },
            m => m,
        }
    }
}

/// Decomposition `H(a) = f(a) + affine + lin . a` at a fixed `(t_j, x, z)`.
/// Stack buffers: states up to dimension 8, controls up to dimension 8.
struct HamAtPoint<'m> {
    model: &'m StateModel,
    t: f64,
    x: &'m [f64],
    m_pair: f64,
    /// `sigma^-T z . (b1 + eta loss')`
    affine: f64,
    /// `b2^T sigma^-T z`
    lin: [f64; 8],
}

impl<'m> HamAtPoint<'m> {
    fn new(
        spec: &HamiltonianSpec,
        model: &'m StateModel,
        j: usize,
        x: &'m [f64],
        env: &AtomEnv,
        z: &[f64],
    ) -> Self {
        let d = model.dim;
        let t = model.grid.time(j);
        let m_pair = env.h_pair[j];
        let mut w = [0.0; 8];
        mat_vec(&spec.sigma_inv_t, z, &mut w[..d]);
        // drift with zero control = b1 + eta loss'
        let zero_a = [0.0; 8];
        let mut base = [0.0; 8];
        crate::dynamics::drift_tilde_raw(
            model,
            j,
            x,
            env,
            &zero_a[..model.control_dim],
            &mut base[..d],
        );
        let affine = w[..d].iter().zip(&base[..d]).map(|(a, b)| a * b).sum();
        let mut lin = [0.0; 8];
        match &model.control_loading {
            ControlLoading::Constant(b2) => bt_vec(b2, &w[..d], &mut lin[..model.control_dim]),
            ControlLoading::TimeVarying(f) => {
                bt_vec(&f(t), &w[..d], &mut lin[..model.control_dim])
            }
        }
        HamAtPoint {
            model,
            t,
            x,
            m_pair,
            affine,
            lin,
        }
    }

    #[inline]
    fn eval(&self, a: &[f64]) -> f64 {
        self.model.running_cost.eval(self.t, self.x, self.m_pair, a)
            + self.affine
            + self.lin.iter().zip(a).map(|(l, ai)| l * ai).sum::<f64>()
    }
}

#[inline]
fn bt_vec(b2: &DMatrix<f64>, w: &[f64], out: &mut [f64]) {
    for (k, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (r, wr) in w.iter().enumerate() {
            acc += b2[(r, k)] * wr;
        }
        *o = acc;
    }
}

/// `H(t_j, x, m, z, a)`.
pub fn hamiltonian(
    spec: &HamiltonianSpec,
    model: &StateModel,
    j: usize,
    x: &[f64],
    env: &AtomEnv,
    z: &[f64],
    a: &[f64],
) -> Result<f64> {
    if !model.control_box.contains(a) {
        return Err(MfgError::InvalidControl(a.to_vec()));
    }
    Ok(HamAtPoint::new(spec, model, j, x, env, z).eval(a))
}

/// Maximize `H` over the control box; returns the maximizer and the value.
pub fn maximize(
    spec: &HamiltonianSpec,
    model: &StateModel,
    j: usize,
    x: &[f64],
    env: &AtomEnv,
    z: &[f64],
) -> Result<(Vec<f64>, f64)> {
    let mut a = vec![0.0; model.control_dim];
    let h = maximize_into(spec, model, j, x, env, z, &mut a)?;
    Ok((a, h))
}

/// Buffer variant of [`maximize`]; this is the BSDE driver hot path.
pub fn maximize_into(
    spec: &HamiltonianSpec,
    model: &StateModel,
    j: usize,
    x: &[f64],
    env: &AtomEnv,
    z: &[f64],
    a_out: &mut [f64],
) -> Result<f64> {
    let point = HamAtPoint::new(spec, model, j, x, env, z);
    match spec.effective_mode(model) {
        MaximizerMode::ClosedFormQuadratic => {
            let weight = match &model.running_cost {
                RunningCost::Quadratic { weight } => *weight,
                _ => {
                    return Err(MfgError::MaximizationFailure(
                        "closed form requires a quadratic cost".into(),
                    ))
                }
            };
            for (k, o) in a_out.iter_mut().enumerate() {
                *o = point.lin[k] / (2.0 * weight);
            }
            model.control_box.project(a_out);
            Ok(point.eval(a_out))
        }
        MaximizerMode::Numeric1d => {
            let (a, h) = golden_section(&point, model)?;
            a_out[0] = a;
            Ok(h)
        }
        MaximizerMode::ProjectedAscent => projected_ascent(&point, model, a_out),
        MaximizerMode::Auto => unreachable!("resolved by effective_mode"),
    }
}

/// Coarse scan plus golden-section refinement for scalar controls.
fn golden_section(point: &HamAtPoint, model: &StateModel) -> Result<(f64, f64)> {
    let lo = model.control_box.lower[0];
    let hi = model.control_box.upper[0];
    if hi <= lo {
        return Ok((lo, point.eval(&[lo])));
    }
    const SCAN: usize = 17;
    let mut best = (lo, f64::NEG_INFINITY);
    let mut values = [0.0f64; SCAN];
    for (i, v) in values.iter_mut().enumerate() {
        let a = lo + (hi - lo) * i as f64 / (SCAN - 1) as f64;
        let h = point.eval(&[a]);
        if !h.is_finite() {
            return Err(MfgError::MaximizationFailure(format!(
                "non-finite Hamiltonian at control {a}"
            )));
        }
        *v = h;
        if h > best.1 {
            best = (a, h);
        }
    }
    let idx = values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite values"))
        .map(|(i, _)| i)
        .expect("non-empty scan");
    let step = (hi - lo) / (SCAN - 1) as f64;
    let mut a = (lo + step * idx as f64 - step).max(lo);
    let mut b = (lo + step * idx as f64 + step).min(hi);
    let inv_phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (point.eval(&[c]), point.eval(&[d]));
    while (b - a).abs() > 1e-10 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = point.eval(&[c]);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = point.eval(&[d]);
        }
    }
    let a_star = 0.5 * (a + b);
    let h_star = point.eval(&[a_star]);
    if h_star + 1e-9 < best.1 {
        // a concave H cannot do worse after refinement than on the scan
        return Err(MfgError::MaximizationFailure(
            "refinement lost the scan maximum; cost is not concave".into(),
        ));
    }
    Ok((a_star, h_star.max(best.1)))
}

/// Projected gradient ascent with Armijo backtracking for vector controls.
fn projected_ascent(point: &HamAtPoint, model: &StateModel, a_out: &mut [f64]) -> Result<f64> {
    let k = model.control_dim;
    let boxx = &model.control_box;
    for (i, o) in a_out.iter_mut().enumerate() {
        *o = 0.5 * (boxx.lower[i] + boxx.upper[i]);
    }
    let mut grad = vec![0.0; k];
    let mut trial = vec![0.0; k];
    let mut value = point.eval(a_out);
    if !value.is_finite() {
        return Err(MfgError::MaximizationFailure(
            "non-finite Hamiltonian at the box center".into(),
        ));
    }
    let h = 1e-6;
    for _ in 0..200 {
        for i in 0..k {
            let mut ap = a_out.to_vec();
            let mut am = a_out.to_vec();
            ap[i] = (ap[i] + h).min(boxx.upper[i]);
            am[i] = (am[i] - h).max(boxx.lower[i]);
            let denom = ap[i] - am[i];
            grad[i] = if denom > 0.0 {
                (point.eval(&ap) - point.eval(&am)) / denom
            } else {
                0.0
            };
        }
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm < 1e-12 {
            break;
        }
        let mut step = 1.0;
        let mut improved = false;
        while step > 1e-12 {
            for i in 0..k {
                trial[i] = a_out[i] + step * grad[i];
            }
            boxx.project(&mut trial);
            let v = point.eval(&trial);
            if v > value + 1e-4 * step * gnorm * gnorm {
                a_out.copy_from_slice(&trial);
                value = v;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Ok(value)
}
