//! Offline certification of the delay-buffered loop: lifted matrices for the
//! four delivery outcomes and for failure runs, the common Lyapunov matrix,
//! and the contraction-factor tables used online.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, Matrix3};
use serde::{Deserialize, Serialize};

use crate::cert::TimingTriple;
use crate::error::{Error, Result};
use crate::lmi;

/// Delivery outcome of one bidirectional opportunity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Both,
    UlOnly,
    DlOnly,
    Neither,
}

impl Outcome {
    pub const ALL: [Outcome; 4] = [Outcome::Both, Outcome::UlOnly, Outcome::DlOnly, Outcome::Neither];

    pub fn from_flags(ul: bool, dl: bool) -> Self {
        match (ul, dl) {
            (true, true) => Outcome::Both,
            (true, false) => Outcome::UlOnly,
            (false, true) => Outcome::DlOnly,
            (false, false) => Outcome::Neither,
        }
    }
}

fn is_diagonal(m: &Matrix3<f64>) -> bool {
    (0..3).all(|i| (0..3).all(|j| i == j || m[(i, j)] == 0.0))
}

/// Top block-row `A` plus half of `-BK` at each of the two columns, the
/// remaining rows a pure shift. Feedback is summed per column before being
/// added so that coinciding columns give exactly `-BK`.
fn lifted(cols: [usize; 2], depth: usize, a: &Matrix3<f64>, bk: &Matrix3<f64>) -> DMatrix<f64> {
    let n = 3 * (depth + 1);
    let mut m = DMatrix::zeros(n, n);
    let mut fb: Vec<Matrix3<f64>> = vec![Matrix3::zeros(); depth + 1];
    for c in cols {
        fb[c] -= bk * 0.5;
    }
    for (c, f) in fb.iter().enumerate() {
        let blk = if c == 0 { a + f } else { *f };
        m.view_mut((0, 3 * c), (3, 3)).copy_from(&blk);
    }
    for r in 1..=depth {
        m.view_mut((3 * r, 3 * (r - 1)), (3, 3)).fill_with_identity();
    }
    m
}

pub fn build_lifted_matrix(
    outcome: Outcome,
    h_ul: usize,
    h_dl: usize,
    depth: usize,
    a: &Matrix3<f64>,
    bk: &Matrix3<f64>,
) -> Result<DMatrix<f64>> {
    if h_ul > depth || h_dl > depth {
        return Err(Error::IndexOutOfRange(format!("delays ({h_ul}, {h_dl}) exceed buffer depth {depth}")));
    }
    let cols = match outcome {
        Outcome::Both => [h_ul, h_dl],
        Outcome::UlOnly => [h_ul, depth],
        Outcome::DlOnly => [depth, h_dl],
        Outcome::Neither => [depth, depth],
    };
    Ok(lifted(cols, depth, a, bk))
}

/// Growth after `j` consecutive failures: feedback at the staled columns.
pub fn build_run_matrix(
    j: usize,
    h_ul: usize,
    h_dl: usize,
    depth: usize,
    a: &Matrix3<f64>,
    bk: &Matrix3<f64>,
) -> Result<DMatrix<f64>> {
    if j == 0 {
        return Err(Error::IndexOutOfRange("run length must be at least 1".into()));
    }
    if h_ul > depth || h_dl > depth {
        return Err(Error::IndexOutOfRange(format!("delays ({h_ul}, {h_dl}) exceed buffer depth {depth}")));
    }
    let j = j.min(depth.max(1));
    Ok(lifted([(h_ul + j).min(depth), (h_dl + j).min(depth)], depth, a, bk))
}

/// `λ_max(X^{-1/2} MᵀXM X^{-1/2})`, through the Cholesky factor of `X`.
pub fn mode_factor_raw(m: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<f64> {
    let ch = x.clone().cholesky().ok_or(Error::NotPositiveDefinite)?;
    let l = ch.l();
    let g = m.transpose() * x * m;
    // L⁻¹ G L⁻ᵀ
    let li_g = l.solve_lower_triangular(&g).ok_or(Error::NotPositiveDefinite)?;
    let s = l.solve_lower_triangular(&li_g.transpose()).ok_or(Error::NotPositiveDefinite)?;
    let s = (&s + s.transpose()) * 0.5;
    Ok(s.symmetric_eigen().eigenvalues.max())
}

/// Per-opportunity outcome factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeFactors {
    pub alpha_11: f64,
    pub alpha_10: f64,
    pub alpha_01: f64,
    pub alpha_00: f64,
}

impl ModeFactors {
    pub fn ordered(&self) -> bool {
        self.alpha_11 <= self.alpha_10
            && self.alpha_10 <= self.alpha_00
            && self.alpha_11 <= self.alpha_01
            && self.alpha_01 <= self.alpha_00
    }
}

/// Worst case over the joint-success mass, evaluated at its two endpoints.
pub fn per_opportunity_envelope(m: &ModeFactors, rho_ul: f64, rho_dl: f64) -> f64 {
    let e = |b: f64| {
        b * m.alpha_11
            + (rho_ul - b) * m.alpha_10
            + (rho_dl - b) * m.alpha_01
            + (1.0 - rho_ul - rho_dl + b) * m.alpha_00
    };
    let lo = (rho_ul + rho_dl - 1.0).max(0.0);
    let hi = rho_ul.min(rho_dl);
    e(lo).max(e(hi))
}

/// Factors certified for one `(h_ul, h_dl)` pair under a shared LKF matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeTable {
    pub h_ul: usize,
    pub h_dl: usize,
    pub depth: usize,
    pub epsilon: f64,
    pub alpha_modes: ModeFactors,
    /// `α_(1) .. α_(H)`; longer runs reuse the last entry.
    pub alpha_runs: Vec<f64>,
    pub alpha_hold: f64,
}

impl EnvelopeTable {
    /// `α_(j)`, with `α_(0) = 1` and saturation beyond the buffer depth.
    pub fn run_factor(&self, j: usize) -> f64 {
        if j == 0 {
            1.0
        } else {
            self.alpha_runs[j.min(self.alpha_runs.len()) - 1]
        }
    }

    pub fn cycle_envelope(&self, rho_ul: f64, rho_dl: f64, c: usize, g: usize) -> Result<f64> {
        if c >= g {
            return Err(Error::CounterOverflow { c, g });
        }
        Ok(per_opportunity_envelope(&self.alpha_modes, rho_ul, rho_dl).max(self.run_factor(c + 1)))
    }
}

/// Common Lyapunov matrix for a delay grid and the plant it certifies.
#[derive(Debug, Clone)]
pub struct Lkf {
    pub x: DMatrix<f64>,
    pub epsilon: f64,
    pub depth: usize,
    pub h_ul_max: usize,
    pub h_dl_max: usize,
    pub a: Matrix3<f64>,
    pub bk: Matrix3<f64>,
}

fn success_family(
    h_ul_max: usize,
    h_dl_max: usize,
    depth: usize,
    a: &Matrix3<f64>,
    bk: &Matrix3<f64>,
) -> Vec<DMatrix<f64>> {
    let mut v = Vec::new();
    for hu in 0..=h_ul_max {
        for hd in 0..=h_dl_max {
            v.push(lifted([hu, hd], depth, a, bk));
        }
    }
    v
}

impl Lkf {
    /// Constraint residuals `(max λ_max(MᵀXM - X + εI), λ_min(X))`.
    pub fn residuals(&self) -> (f64, f64) {
        let mats = success_family(self.h_ul_max, self.h_dl_max, self.depth, &self.a, &self.bk);
        (lmi::lyapunov_residual(&self.x, &mats, self.epsilon), lmi::lambda_min(&self.x))
    }

    pub fn v(&self, z: &nalgebra::DVector<f64>) -> f64 {
        (z.transpose() * &self.x * z)[(0, 0)]
    }
}

/// Residual slack accepted by the post-hoc verification.
pub const RESIDUAL_SLACK: f64 = 1e-8;

/// Solves for the common Lyapunov matrix on the grid `[0..h_ul_max]×[0..h_dl_max]`.
/// The buffer depth is one column beyond the grid so that the stale
/// column never coincides with a certified delay.
pub fn solve_lkf(h_ul_max: usize, h_dl_max: usize, epsilon: f64, a: &Matrix3<f64>, bk: &Matrix3<f64>) -> Result<Lkf> {
    if epsilon <= 0.0 {
        return Err(Error::Config("epsilon must be positive".into()));
    }
    let depth = h_ul_max.max(h_dl_max) + 1;
    let n = 3 * (depth + 1);
    let x = if is_diagonal(a) && is_diagonal(bk) {
        // decoupled axes: solve each scalar system and interleave
        let mut x = DMatrix::zeros(n, n);
        for axis in 0..3 {
            let sa = Matrix3::from_diagonal_element(a[(axis, axis)]);
            let sb = Matrix3::from_diagonal_element(bk[(axis, axis)]);
            let mats: Vec<DMatrix<f64>> = success_family(h_ul_max, h_dl_max, depth, &sa, &sb)
                .into_iter()
                .map(|m| DMatrix::from_fn(depth + 1, depth + 1, |r, c| m[(3 * r, 3 * c)]))
                .collect();
            let xi = lmi::common_lyapunov(&mats, epsilon)?;
            for p in 0..=depth {
                for q in 0..=depth {
                    x[(3 * p + axis, 3 * q + axis)] = xi[(p, q)];
                }
            }
        }
        x
    } else {
        lmi::common_lyapunov(&success_family(h_ul_max, h_dl_max, depth, a, bk), epsilon)?
    };
    let lkf = Lkf { x, epsilon, depth, h_ul_max, h_dl_max, a: *a, bk: *bk };
    let (res, lmin) = lkf.residuals();
    if res > RESIDUAL_SLACK || lmin < epsilon - 1e-10 {
        return Err(Error::Infeasible(format!("verification failed: residual {res:.3e}, λ_min {lmin:.3e}")));
    }
    Ok(lkf)
}

/// Saturated failure-run growth at the maximum admissible delay.
pub fn hold_growth_factor(x: &DMatrix<f64>, depth: usize, a: &Matrix3<f64>, bk: &Matrix3<f64>) -> Result<f64> {
    mode_factor_raw(&build_run_matrix(depth.max(1), depth, depth, depth, a, bk)?, x)
}

/// Grid maxima of every outcome and run factor for delays up to `(h_ul, h_dl)`.
pub fn certified_factors(lkf: &Lkf, h_ul: usize, h_dl: usize) -> Result<(ModeFactors, Vec<f64>)> {
    if h_ul > lkf.h_ul_max || h_dl > lkf.h_dl_max {
        return Err(Error::IndexOutOfRange(format!(
            "delays ({h_ul}, {h_dl}) outside the certified grid ({}, {})",
            lkf.h_ul_max, lkf.h_dl_max
        )));
    }
    let mut f = [0.0f64; 4];
    let mut runs = vec![0.0f64; lkf.depth];
    for hu in 0..=h_ul {
        for hd in 0..=h_dl {
            for (slot, o) in f.iter_mut().zip(Outcome::ALL) {
                let m = build_lifted_matrix(o, hu, hd, lkf.depth, &lkf.a, &lkf.bk)?;
                *slot = slot.max(mode_factor_raw(&m, &lkf.x)?);
            }
            for (j, r) in runs.iter_mut().enumerate() {
                let m = build_run_matrix(j + 1, hu, hd, lkf.depth, &lkf.a, &lkf.bk)?;
                *r = r.max(mode_factor_raw(&m, &lkf.x)?);
            }
        }
    }
    Ok((ModeFactors { alpha_11: f[0], alpha_10: f[1], alpha_01: f[2], alpha_00: f[3] }, runs))
}

/// Offline certifier: the LKF plus a cache of tables keyed by delay pair.
#[derive(Debug)]
pub struct Certifier {
    pub lkf: Lkf,
    pub alpha_hold: f64,
    cache: Mutex<HashMap<(usize, usize), Arc<EnvelopeTable>>>,
}

impl Certifier {
    pub fn new(lkf: Lkf) -> Result<Self> {
        let alpha_hold = hold_growth_factor(&lkf.x, lkf.depth, &lkf.a, &lkf.bk)?;
        Ok(Certifier { lkf, alpha_hold, cache: Mutex::new(HashMap::new()) })
    }

    pub fn build(h_max: usize, epsilon: f64, a: &Matrix3<f64>, bk: &Matrix3<f64>) -> Result<Self> {
        Self::new(solve_lkf(h_max, h_max, epsilon, a, bk)?)
    }

    pub fn covers(&self, t: &TimingTriple) -> bool {
        t.h_ul <= self.lkf.h_ul_max && t.h_dl <= self.lkf.h_dl_max
    }

    pub fn table(&self, h_ul: usize, h_dl: usize) -> Result<Arc<EnvelopeTable>> {
        if let Some(t) = self.cache.lock().unwrap().get(&(h_ul, h_dl)) {
            return Ok(t.clone());
        }
        let (alpha_modes, alpha_runs) = certified_factors(&self.lkf, h_ul, h_dl)?;
        let t = Arc::new(EnvelopeTable {
            h_ul,
            h_dl,
            depth: self.lkf.depth,
            epsilon: self.lkf.epsilon,
            alpha_modes,
            alpha_runs,
            alpha_hold: self.alpha_hold,
        });
        self.cache.lock().unwrap().insert((h_ul, h_dl), t.clone());
        Ok(t)
    }

    /// Every table on the grid, in `(h_ul, h_dl)` order.
    pub fn all_tables(&self) -> Result<Vec<Arc<EnvelopeTable>>> {
        let mut v = Vec::new();
        for hu in 0..=self.lkf.h_ul_max {
            for hd in 0..=self.lkf.h_dl_max {
                v.push(self.table(hu, hd)?);
            }
        }
        Ok(v)
    }

    pub fn export(&self) -> Result<TableExport> {
        let x = &self.lkf.x;
        Ok(TableExport {
            epsilon: self.lkf.epsilon,
            depth: self.lkf.depth,
            h_ul_max: self.lkf.h_ul_max,
            h_dl_max: self.lkf.h_dl_max,
            alpha_hold: self.alpha_hold,
            x_matrix: (0..x.nrows()).map(|r| x.row(r).iter().copied().collect()).collect(),
            tables: self.all_tables()?.iter().map(|t| (**t).clone()).collect(),
        })
    }
}

/// Serialized form of a certifier.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableExport {
    pub epsilon: f64,
    pub depth: usize,
    pub h_ul_max: usize,
    pub h_dl_max: usize,
    pub alpha_hold: f64,
    pub x_matrix: Vec<Vec<f64>>,
    pub tables: Vec<EnvelopeTable>,
}
