//! Single-integrator UAV plants, LQR gain, covariance bookkeeping, the
//! deterministic hold map, local safe mode and the admissible domain.

use nalgebra::{DVector, Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub position: Vector3<f64>,
    pub sigma_proc: Matrix3<f64>,
    pub sigma_meas: Matrix3<f64>,
}

/// Zero-mean Gaussian draw with covariance `cov` (PSD; semidefinite allowed).
pub fn gaussian3<R: Rng + ?Sized>(cov: &Matrix3<f64>, rng: &mut R) -> Vector3<f64> {
    let z = Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
    match cov.cholesky() {
        Some(ch) => ch.l() * z,
        None => {
            // semidefinite: fall back to a symmetric square root
            let eig = cov.symmetric_eigen();
            let d = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
            eig.eigenvectors * Matrix3::from_diagonal(&d) * eig.eigenvectors.transpose() * z
        }
    }
}

pub fn step_plant<R: Rng + ?Sized>(state: &PlantState, command: &Vector3<f64>, t_s: f64, rng: &mut R) -> PlantState {
    let w = gaussian3(&state.sigma_proc, rng);
    PlantState { position: state.position + command * t_s + w, ..state.clone() }
}

/// Diagonal LQR gain for `A = I`, `B = t_s I` from per-axis weights, by
/// iterating the scalar Riccati recursion to a fixed point.
pub fn lqr_gain(t_s: f64, q: [f64; 3], r: [f64; 3]) -> Result<Matrix3<f64>> {
    let mut k = [0.0; 3];
    for i in 0..3 {
        if q[i] <= 0.0 || r[i] <= 0.0 {
            return Err(Error::Config("LQR weights must be positive".into()));
        }
        let mut p = q[i];
        for _ in 0..100_000 {
            let next = q[i] + p - p * p * t_s * t_s / (r[i] + t_s * t_s * p);
            let done = (next - p).abs() <= 1e-10 * next.abs();
            p = next;
            if done {
                break;
            }
        }
        k[i] = t_s * p / (r[i] + t_s * t_s * p);
    }
    let gain = Matrix3::from_diagonal(&Vector3::from(k));
    check_stabilizing(&gain, t_s)?;
    Ok(gain)
}

/// Spectral radius of `I - t_s K` must be below one.
pub fn check_stabilizing(k: &Matrix3<f64>, t_s: f64) -> Result<()> {
    let m = Matrix3::identity() - k * t_s;
    let rho = m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
    if rho < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("gain not stabilizing (spectral radius {rho})")))
    }
}

pub fn lqr_command(estimate: &Vector3<f64>, reference: &Vector3<f64>, k: &Matrix3<f64>) -> Vector3<f64> {
    -(k * (estimate - reference))
}

/// Trace recursion: a fresh sample resets to the delayed-sample floor,
/// otherwise uncertainty grows by one step of process noise.
pub fn covariance_step(
    sigma_trace: f64,
    uplink_success: bool,
    h_ul: usize,
    sigma_proc_tr: f64,
    sigma_meas_tr: f64,
) -> f64 {
    if uplink_success {
        sigma_meas_tr + h_ul as f64 * sigma_proc_tr
    } else {
        sigma_trace + sigma_proc_tr
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Nominal,
    SafeMode,
}

/// Controller-side Lyapunov coordinate of one loop.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopState {
    /// Lifted error: current error followed by `H` delayed copies.
    pub z: DVector<f64>,
    pub v: f64,
    pub sigma: f64,
    pub c: usize,
    pub mode: Mode,
    pub last_sample_age: usize,
}

impl LoopState {
    /// Coordinate-only state (no lifted buffer), used by admission tests.
    pub fn from_coords(v: f64, sigma: f64, c: usize) -> Self {
        LoopState { z: DVector::zeros(0), v, sigma, c, mode: Mode::Nominal, last_sample_age: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafeDomain {
    pub v_max: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

pub fn in_admissible_domain(zeta: &LoopState, domain: &SafeDomain) -> bool {
    (0.0..=domain.v_max).contains(&zeta.v) && (domain.sigma_min..=domain.sigma_max).contains(&zeta.sigma)
}

pub fn augmented_w(zeta: &LoopState, lambda_sigma: f64) -> f64 {
    zeta.v + lambda_sigma * zeta.sigma
}

pub fn hold_map(zeta: &LoopState, alpha_hold: f64, sigma_proc_tr: f64) -> LoopState {
    LoopState { v: alpha_hold * zeta.v, sigma: zeta.sigma + sigma_proc_tr, c: zeta.c + 1, ..zeta.clone() }
}

pub fn hold_admissible(zeta: &LoopState, domain: &SafeDomain, alpha_hold: f64, sigma_proc_tr: f64) -> bool {
    in_admissible_domain(&hold_map(zeta, alpha_hold, sigma_proc_tr), domain)
}

/// Deterministic local fallback law on the `(V, tr Σ)` coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafeMode {
    pub domain: SafeDomain,
    pub v_floor: f64,
    pub contraction: f64,
    pub sigma_proc_tr: f64,
    pub lambda_sigma: f64,
}

impl SafeMode {
    /// The map itself, defined on all of `V ≥ 0`.
    pub fn apply(&self, zeta: &LoopState) -> LoopState {
        let v = zeta.v.min((self.contraction * zeta.v).max(self.v_floor));
        let sigma = (zeta.sigma + self.sigma_proc_tr).clamp(self.domain.sigma_min, self.domain.sigma_max);
        LoopState { v, sigma, c: zeta.c + 1, mode: Mode::SafeMode, ..zeta.clone() }
    }

    /// `W(f(ζ)) - W(ζ)` without a domain check.
    pub fn drift(&self, zeta: &LoopState) -> f64 {
        augmented_w(&self.apply(zeta), self.lambda_sigma) - augmented_w(zeta, self.lambda_sigma)
    }
}

pub fn safe_mode_step(zeta: &LoopState, law: &SafeMode) -> Result<(LoopState, f64)> {
    if !in_admissible_domain(zeta, &law.domain) {
        return Err(Error::OutsideDomain);
    }
    Ok((law.apply(zeta), law.drift(zeta)))
}

/// Bidirectional success while in safe mode: back to nominal, counter cleared.
pub fn synchronize(zeta: &mut LoopState) {
    zeta.mode = Mode::Nominal;
    zeta.c = 0;
}

pub fn swarm_rmse(positions: &[Vector3<f64>], references: &[Vector3<f64>]) -> Result<f64> {
    if positions.len() != references.len() || positions.is_empty() {
        return Err(Error::Shape(format!("{} positions vs {} references", positions.len(), references.len())));
    }
    let sq: f64 = positions.iter().zip(references).map(|(p, r)| (p - r).norm_squared()).sum();
    Ok((sq / positions.len() as f64).sqrt())
}
