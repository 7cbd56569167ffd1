//! Least-squares Monte Carlo backward sweep shared by the cost BSDE and the
//! adjoint BSDEs.
//!
//! Conditional expectations at step `i` are projections onto polynomials in
//! the standardized `(X[i], X1[i])` (optionally `X2[i]`). Normal equations
//! are accumulated in fixed row blocks and combined in block order so the
//! result does not depend on the thread count.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::smdde::TrajectoryBundle;
use crate::stats::MeanAcc;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionBasis {
    /// Total polynomial degree.
    pub degree: usize,
    /// Ridge weight added to the normalized Gram matrix.
    pub ridge: f64,
    /// Admit `x2` as a regressor (diagnostics only).
    pub include_x2: bool,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        Self { degree: 3, ridge: 1e-10, include_x2: false }
    }
}

impl RegressionBasis {
    pub fn new(degree: usize, ridge: f64) -> Result<Self> {
        if degree == 0 {
            return Err(Error::Config("basis degree must be at least 1".into()));
        }
        if !(ridge >= 0.0) {
            return Err(Error::Config("ridge weight must be non-negative".into()));
        }
        Ok(Self { degree, ridge, include_x2: false })
    }
}

/// How the regression target of `Y[i]` is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scheme {
    /// Project `Y[i+1]`.
    #[default]
    OneStep,
    /// Project the realized cost-to-go `Y[N] + sum_{j>i} f_j dt`.
    MultiStep,
}

/// Exponents of all monomials of total degree `<= d` in `v` variables.
fn monomials(v: usize, d: usize) -> Vec<Vec<u32>> {
    let mut out = vec![vec![0u32; v]];
    if v == 0 {
        return out;
    }
    for total in 1..=d {
        let mut cur = vec![0u32; v];
        fn rec(k: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
            if k + 1 == cur.len() {
                cur[k] = left;
                out.push(cur.clone());
                return;
            }
            for e in (0..=left).rev() {
                cur[k] = e;
                rec(k + 1, left - e, cur, out);
            }
        }
        rec(0, total as u32, &mut cur, &mut out);
    }
    out
}

const ROW_BLOCK: usize = 4096;

/// Projection onto the basis at one time step.
pub struct StepDesign {
    n: usize,
    k: usize,
    rows: Vec<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    /// Ridge actually used (after escalation).
    pub ridge: f64,
}

impl StepDesign {
    /// Build the design from raw regressors (one `Vec` per variable).
    pub fn new(vars: &[Vec<f64>], basis: &RegressionBasis, warnings: &mut Vec<String>) -> Result<Self> {
        let n = vars.first().map_or(0, |v| v.len());
        if n == 0 {
            return Err(Error::Config("regression needs at least one path".into()));
        }
        // Standardize and drop (numerically) constant regressors.
        let mut zs: Vec<Vec<f64>> = Vec::new();
        for v in vars {
            let a: MeanAcc = v.iter().cloned().collect();
            let sd = a.variance().sqrt();
            if sd > 1e-12 * (1.0 + a.mean().abs()) {
                zs.push(v.iter().map(|x| (x - a.mean()) / sd).collect());
            }
        }
        let mons = monomials(zs.len(), basis.degree);
        let k = mons.len();
        let mut rows = vec![0.0; n * k];
        rows.par_chunks_mut(k).enumerate().for_each(|(p, row)| {
            for (j, e) in mons.iter().enumerate() {
                let mut v = 1.0;
                for (z, &ex) in zs.iter().zip(e) {
                    v *= z[p].powi(ex as i32);
                }
                row[j] = v;
            }
        });
        let gram_parts: Vec<Vec<f64>> = rows
            .par_chunks(ROW_BLOCK * k)
            .map(|blk| {
                let mut g = vec![0.0; k * k];
                for row in blk.chunks_exact(k) {
                    for a in 0..k {
                        let ra = row[a];
                        for b in a..k {
                            g[a * k + b] += ra * row[b];
                        }
                    }
                }
                g
            })
            .collect();
        let mut gram = DMatrix::<f64>::zeros(k, k);
        for g in gram_parts {
            for a in 0..k {
                for b in a..k {
                    gram[(a, b)] += g[a * k + b];
                }
            }
        }
        for a in 0..k {
            for b in a..k {
                let v = gram[(a, b)] / n as f64;
                gram[(a, b)] = v;
                gram[(b, a)] = v;
            }
        }
        let mut ridge = basis.ridge;
        for attempt in 0..8 {
            let mut g = gram.clone();
            // The intercept (column 0) is left unpenalized.
            for a in 1..k {
                g[(a, a)] += ridge;
            }
            if let Some(chol) = g.cholesky() {
                return Ok(Self { n, k, rows, chol, ridge });
            }
            ridge = if ridge == 0.0 { 1e-12 } else { ridge * 10.0 };
            warnings.push(format!("rank-deficient design (attempt {attempt}); ridge raised to {ridge:e}"));
        }
        Err(Error::Numerical("regression design could not be regularized".into()))
    }

    pub fn n_features(&self) -> usize {
        self.k
    }

    /// Fitted values of the projection of `target`.
    pub fn fit(&self, target: &[f64]) -> Vec<f64> {
        let k = self.k;
        let parts: Vec<Vec<f64>> = self
            .rows
            .par_chunks(ROW_BLOCK * k)
            .zip(target.par_chunks(ROW_BLOCK))
            .map(|(blk, tg)| {
                let mut r = vec![0.0; k];
                for (row, y) in blk.chunks_exact(k).zip(tg) {
                    for a in 0..k {
                        r[a] += row[a] * y;
                    }
                }
                r
            })
            .collect();
        let mut rhs = DVector::<f64>::zeros(k);
        for r in parts {
            for a in 0..k {
                rhs[a] += r[a];
            }
        }
        rhs /= self.n as f64;
        let beta = self.chol.solve(&rhs);
        let mut out = vec![0.0; self.n];
        out.par_iter_mut().enumerate().for_each(|(p, o)| {
            let row = &self.rows[p * k..(p + 1) * k];
            *o = row.iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
        });
        out
    }
}

/// Regressors at one step of a bundle.
pub fn step_regressors<T: Scalar>(b: &TrajectoryBundle<T>, step: usize, basis: &RegressionBasis) -> Vec<Vec<f64>> {
    let st = b.stride();
    let col = |f: &[T]| (0..b.n_paths).map(|p| f[p * st + step].as_f64()).collect::<Vec<f64>>();
    let mut v = vec![col(&b.x), col(&b.x1)];
    if basis.include_x2 {
        v.push(col(&b.x2));
    }
    v
}

/// Maximum number of jointly solved components.
pub const MAX_DIM: usize = 4;

/// A system of backward equations `-dY = F dt - Z dW` on a bundle.
pub struct BackwardProblem<'a> {
    pub dim: usize,
    /// Terminal values, `terminal[p * dim + d]`.
    pub terminal: Vec<f64>,
    /// Driver `F(step, path, y, z, out)`.
    pub driver: &'a (dyn Fn(usize, usize, &[f64], &[f64], &mut [f64]) + Sync),
}

/// Output of [`solve_backward`], path-major per component.
#[derive(Debug, Clone)]
pub struct BackwardPaths {
    pub dim: usize,
    pub stride: usize,
    pub y: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    /// `Y(s)` per component (path mean at step 0).
    pub y0: Vec<f64>,
    /// Standard error per component of the realized cost-to-go, the target
    /// whose mean `y0` estimates.
    pub se: Vec<f64>,
    pub warnings: Vec<String>,
}

impl BackwardPaths {
    #[inline]
    pub fn y(&self, d: usize, path: usize, step: usize) -> f64 {
        self.y[d][path * self.stride + step]
    }
    #[inline]
    pub fn z(&self, d: usize, path: usize, step: usize) -> f64 {
        self.z[d][path * self.stride + step]
    }
}

/// Backward LSMC sweep with one Picard iteration per step.
pub fn solve_backward<T: Scalar>(
    b: &TrajectoryBundle<T>,
    prob: &BackwardProblem<'_>,
    basis: &RegressionBasis,
    scheme: Scheme,
) -> Result<BackwardPaths> {
    let dim = prob.dim;
    if dim == 0 || dim > MAX_DIM {
        return Err(Error::Config(format!("backward system dimension {dim} unsupported")));
    }
    let np = b.n_paths;
    if prob.terminal.len() != np * dim {
        return Err(Error::Config("terminal array has the wrong length".into()));
    }
    let n = b.grid.n_steps();
    let st = n + 1;
    let dt = b.grid.dt().as_f64();
    let mut y = vec![vec![0.0; np * st]; dim];
    let mut z = vec![vec![0.0; np * st]; dim];
    for p in 0..np {
        for d in 0..dim {
            y[d][p * st + n] = prob.terminal[p * dim + d];
        }
    }
    // Realized cost-to-go: multi-step target and standard error.
    let mut acc = prob.terminal.clone();
    let mut warnings = Vec::new();

    for i in (0..n).rev() {
        let design = StepDesign::new(&step_regressors(b, i, basis), basis, &mut warnings)?;
        let mut ey = Vec::with_capacity(dim);
        let mut ez = Vec::with_capacity(dim);
        for d in 0..dim {
            let next: Vec<f64> = (0..np).map(|p| y[d][p * st + i + 1]).collect();
            let e_next = design.fit(&next);
            // Centering the Z target removes the constant part of Y[i+1],
            // which only adds noise to E[Y dW].
            let zt: Vec<f64> = (0..np)
                .map(|p| (next[p] - e_next[p]) * b.dw(p, i).as_f64() / dt)
                .collect();
            ez.push(design.fit(&zt));
            ey.push(match scheme {
                Scheme::OneStep => e_next,
                Scheme::MultiStep => {
                    design.fit(&(0..np).map(|p| acc[p * dim + d]).collect::<Vec<f64>>())
                }
            });
        }
        let step_vals: Vec<([f64; MAX_DIM], [f64; MAX_DIM], [f64; MAX_DIM])> = (0..np)
            .into_par_iter()
            .map(|p| {
                let mut e = [0.0; MAX_DIM];
                let mut zz = [0.0; MAX_DIM];
                for d in 0..dim {
                    e[d] = ey[d][p];
                    zz[d] = ez[d][p];
                }
                let mut f = [0.0; MAX_DIM];
                (prob.driver)(i, p, &e[..dim], &zz[..dim], &mut f[..dim]);
                let mut yv = [0.0; MAX_DIM];
                for d in 0..dim {
                    yv[d] = e[d] + f[d] * dt;
                }
                (yv, zz, f)
            })
            .collect();
        for (p, (yv, zz, f)) in step_vals.into_iter().enumerate() {
            for d in 0..dim {
                y[d][p * st + i] = yv[d];
                z[d][p * st + i] = zz[d];
                acc[p * dim + d] += f[d] * dt;
            }
        }
    }
    if n > 0 {
        for d in 0..dim {
            for p in 0..np {
                z[d][p * st + n] = z[d][p * st + n - 1];
            }
        }
    }
    let mut y0 = Vec::with_capacity(dim);
    let mut se = Vec::with_capacity(dim);
    for d in 0..dim {
        let a: MeanAcc = (0..np).map(|p| y[d][p * st]).collect();
        let r: MeanAcc = (0..np).map(|p| acc[p * dim + d]).collect();
        y0.push(a.mean());
        se.push(r.std_error());
    }
    warnings.dedup();
    Ok(BackwardPaths { dim, stride: st, y, z, y0, se, warnings })
}
