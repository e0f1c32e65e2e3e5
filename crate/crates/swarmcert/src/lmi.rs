//! Small log-barrier solver for linear matrix inequalities with a symmetric
//! matrix variable, and the common-Lyapunov feasibility problem built on it.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Affine block `C + Σ_k y_k A_k` that must stay positive definite.
struct Block {
    c: DMatrix<f64>,
    a: Vec<DMatrix<f64>>,
}

impl Block {
    fn eval(&self, y: &[f64]) -> DMatrix<f64> {
        let mut f = self.c.clone();
        for (ak, &yk) in self.a.iter().zip(y) {
            if yk != 0.0 {
                f += ak * yk;
            }
        }
        f
    }

    fn dim(&self) -> usize {
        self.c.nrows()
    }
}

fn log_det_pd(f: DMatrix<f64>) -> Option<f64> {
    let ch = f.cholesky()?;
    Some(2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

fn barrier_value(blocks: &[Block], obj: &[f64], tau: f64, y: &[f64]) -> Option<f64> {
    let mut v = tau * obj.iter().zip(y).map(|(c, y)| c * y).sum::<f64>();
    for b in blocks {
        v -= log_det_pd(b.eval(y))?;
    }
    Some(v)
}

/// Newton direction and decrement for `τ cᵀy - Σ log det F_j(y)`.
fn newton_step(blocks: &[Block], obj: &[f64], tau: f64, y: &[f64]) -> Option<(DVector<f64>, f64)> {
    let m = y.len();
    let mut grad = DVector::from_iterator(m, obj.iter().map(|c| tau * c));
    let mut hess = DMatrix::<f64>::zeros(m, m);
    for b in blocks {
        let w = b.eval(y).cholesky()?.inverse();
        let wa: Vec<DMatrix<f64>> = b.a.iter().map(|ak| &w * ak).collect();
        for k in 0..m {
            grad[k] -= wa[k].trace();
            let wkt = wa[k].transpose();
            for l in k..m {
                let h = wkt.dot(&wa[l]);
                hess[(k, l)] += h;
                if l != k {
                    hess[(l, k)] += h;
                }
            }
        }
    }
    let scale = hess.diagonal().amax().max(1e-300);
    let mut reg = 0.0;
    for _ in 0..8 {
        let mut h = hess.clone();
        for i in 0..m {
            h[(i, i)] += reg;
        }
        if let Some(ch) = h.cholesky() {
            let dy = -ch.solve(&grad);
            let dec = -grad.dot(&dy);
            return Some((dy, dec));
        }
        reg = if reg == 0.0 { 1e-14 * scale } else { reg * 100.0 };
    }
    None
}

/// Stop reason reported by [`barrier_minimize`].
enum Exit {
    Converged,
    Early,
}

/// Path-following minimisation of `cᵀy` over the interior of the blocks.
/// `early` is polled after every Newton step.
fn barrier_minimize(
    blocks: &[Block],
    obj: &[f64],
    y0: Vec<f64>,
    gap_tol: f64,
    early: &dyn Fn(&[f64]) -> bool,
) -> Result<(Vec<f64>, Exit)> {
    let total_dim: usize = blocks.iter().map(Block::dim).sum();
    let mut y = y0;
    if barrier_value(blocks, obj, 1.0, &y).is_none() {
        return Err(Error::Infeasible("barrier start is not strictly feasible".into()));
    }
    let mut tau = 1.0;
    for _outer in 0..80 {
        for _inner in 0..200 {
            let Some((dy, dec)) = newton_step(blocks, obj, tau, &y) else {
                return Err(Error::Infeasible("singular barrier Hessian".into()));
            };
            if dec / 2.0 <= 1e-10 {
                break;
            }
            let f0 = barrier_value(blocks, obj, tau, &y).unwrap();
            let mut s = 1.0;
            let mut moved = false;
            for _ in 0..60 {
                let trial: Vec<f64> = y.iter().zip(dy.iter()).map(|(a, d)| a + s * d).collect();
                if let Some(f1) = barrier_value(blocks, obj, tau, &trial) {
                    if f1 <= f0 - 0.25 * s * dec {
                        y = trial;
                        moved = true;
                        break;
                    }
                }
                s *= 0.5;
            }
            if early(&y) {
                return Ok((y, Exit::Early));
            }
            if !moved {
                break;
            }
        }
        if total_dim as f64 / tau < gap_tol {
            return Ok((y, Exit::Converged));
        }
        tau *= 20.0;
    }
    Ok((y, Exit::Converged))
}

/// Basis of symmetric `n × n` matrices: `E_ii` and `E_ij + E_ji`.
fn sym_basis(n: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in i..n {
            v.push((i, j));
        }
    }
    v
}

fn basis_matrix(n: usize, (i, j): (usize, usize)) -> DMatrix<f64> {
    let mut e = DMatrix::zeros(n, n);
    e[(i, j)] = 1.0;
    e[(j, i)] = 1.0;
    e
}

fn sym_from(n: usize, basis: &[(usize, usize)], y: &[f64]) -> DMatrix<f64> {
    let mut x = DMatrix::zeros(n, n);
    for (&(i, j), &v) in basis.iter().zip(y) {
        x[(i, j)] = v;
        x[(j, i)] = v;
    }
    x
}

fn to_coords(x: &DMatrix<f64>, basis: &[(usize, usize)]) -> Vec<f64> {
    basis.iter().map(|&(i, j)| x[(i, j)]).collect()
}

/// `X - MᵀXM` applied to a basis element.
fn decrease_map(m: &DMatrix<f64>, e: &DMatrix<f64>) -> DMatrix<f64> {
    e - m.transpose() * e * m
}

pub fn lambda_min(x: &DMatrix<f64>) -> f64 {
    x.clone().symmetric_eigen().eigenvalues.min()
}

pub fn lambda_max(x: &DMatrix<f64>) -> f64 {
    x.clone().symmetric_eigen().eigenvalues.max()
}

fn symmetrize(x: &DMatrix<f64>) -> DMatrix<f64> {
    (x + x.transpose()) * 0.5
}

/// Worst residual `max_M λ_max(MᵀXM - X + εI)`.
pub fn lyapunov_residual(x: &DMatrix<f64>, mats: &[DMatrix<f64>], epsilon: f64) -> f64 {
    let n = x.nrows();
    mats.iter()
        .map(|m| lambda_max(&symmetrize(&(m.transpose() * x * m - x + DMatrix::identity(n, n) * epsilon))))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Minimum-trace `X ⪰ εI` with `MᵀXM - X ⪯ -εI` for every `M` in `mats`.
pub fn common_lyapunov(mats: &[DMatrix<f64>], epsilon: f64) -> Result<DMatrix<f64>> {
    if epsilon <= 0.0 {
        return Err(Error::Config("epsilon must be positive".into()));
    }
    let n = mats.first().map(|m| m.nrows()).ok_or_else(|| Error::Config("empty matrix family".into()))?;
    let basis = sym_basis(n);
    let m = basis.len();
    let eye = DMatrix::<f64>::identity(n, n);
    let es: Vec<DMatrix<f64>> = basis.iter().map(|&p| basis_matrix(n, p)).collect();

    // Phase 1: minimise a slack t with X - MᵀXM + tI ≻ 0 and I ⪯ X ⪯ κI.
    let kappa = 1e6;
    let mut blocks = Vec::new();
    for mm in mats {
        let mut a: Vec<DMatrix<f64>> = es.iter().map(|e| decrease_map(mm, e)).collect();
        a.push(eye.clone());
        blocks.push(Block { c: DMatrix::zeros(n, n), a });
    }
    let mut lower: Vec<DMatrix<f64>> = es.clone();
    lower.push(DMatrix::zeros(n, n));
    blocks.push(Block { c: -eye.clone(), a: lower });
    let mut upper: Vec<DMatrix<f64>> = es.iter().map(|e| -e).collect();
    upper.push(DMatrix::zeros(n, n));
    blocks.push(Block { c: eye.clone() * kappa, a: upper });

    let x0 = eye.clone() * 2.0;
    let worst = mats.iter().map(|mm| lambda_max(&symmetrize(&(mm.transpose() * &x0 * mm - &x0)))).fold(0.0, f64::max);
    let mut y0 = to_coords(&x0, &basis);
    y0.push(worst + 1.0);
    let mut obj = vec![0.0; m];
    obj.push(1.0);
    let strictly = |y: &[f64]| {
        if y[m] >= 0.0 {
            return false;
        }
        let x = sym_from(n, &basis, &y[..m]);
        mats.iter().all(|mm| lambda_min(&symmetrize(&(&x - mm.transpose() * &x * mm))) > 0.0)
    };
    let (y1, exit) = barrier_minimize(&blocks, &obj, y0, 1e-10, &strictly)?;
    if !matches!(exit, Exit::Early) && !strictly(&y1) {
        return Err(Error::Infeasible(format!("no strict common decrease (best slack {:.3e})", y1[m])));
    }
    let x1 = sym_from(n, &basis, &y1[..m]);

    // Rescale so both constraints hold with margin 2ε.
    let margin = mats
        .iter()
        .map(|mm| lambda_min(&symmetrize(&(&x1 - mm.transpose() * &x1 * mm))))
        .fold(lambda_min(&x1), f64::min);
    let x1 = x1 * (2.0 * epsilon / margin);

    // Phase 2: minimise tr X inside the ε-shifted constraints.
    let mut blocks = Vec::new();
    for mm in mats {
        let a = es.iter().map(|e| decrease_map(mm, e)).collect();
        blocks.push(Block { c: -eye.clone() * epsilon, a });
    }
    blocks.push(Block { c: -eye.clone() * epsilon, a: es.clone() });
    let obj: Vec<f64> = basis.iter().map(|&(i, j)| if i == j { 1.0 } else { 0.0 }).collect();
    let gap = 1e-9 * x1.trace();
    let (y2, _) = barrier_minimize(&blocks, &obj, to_coords(&x1, &basis), gap, &|_| false)?;
    Ok(sym_from(n, &basis, &y2))
}
