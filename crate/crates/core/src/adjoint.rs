//! Adjoint processes, the transformed adjoints and the sufficient
//! maximum-principle checker.

use nalgebra::{DMatrix, DVector};

use crate::coeffs::{Coefficients, Point};
use crate::control::ControlDomain;
use crate::error::{Error, Result};
use crate::hamiltonian::{eval_h, eval_h_grad, AdjointVector, DelayedState};
use crate::lsmc::{solve_backward, BackwardProblem, RegressionBasis, Scheme};
use crate::noise::NoiseSource;
use crate::scalar::{c, Scalar};
use crate::smdde::TrajectoryBundle;

/// Adjoint paths on the bundle grid, path-major with the bundle stride.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointBundle<T> {
    pub stride: usize,
    pub gamma: Vec<T>,
    pub p1: Vec<T>,
    pub p2: Vec<T>,
    pub p3: Vec<T>,
    pub q1: Vec<T>,
    pub q2: Vec<T>,
    pub p_tilde: Vec<T>,
    pub p_check: Vec<T>,
    pub q_tilde: Vec<T>,
    pub q_check: Vec<T>,
    /// `sup |p3|` over paths and steps.
    pub p3_max: f64,
    /// `(p1(s), p2(s))` path means and their standard errors.
    pub p_start: [f64; 2],
    pub p_start_se: [f64; 2],
    pub warnings: Vec<String>,
}

impl<T: Scalar> AdjointBundle<T> {
    pub fn vector(&self, path: usize, step: usize) -> AdjointVector<T> {
        let k = path * self.stride + step;
        AdjointVector {
            gamma: self.gamma[k],
            p1: self.p1[k],
            p2: self.p2[k],
            p3: self.p3[k],
            q1: self.q1[k],
            q2: self.q2[k],
        }
    }

    #[inline]
    pub fn p_tilde(&self, path: usize, step: usize) -> T {
        self.p_tilde[path * self.stride + step]
    }
}

fn solved_yz<T: Scalar>(b: &TrajectoryBundle<T>) -> Result<(&[T], &[T])> {
    match (&b.y, &b.z) {
        (Some(y), Some(z)) => Ok((y, z)),
        _ => Err(Error::Config("bundle must be solved backward before computing adjoints".into())),
    }
}

/// `d gamma = gamma f_y dt + gamma f_z dW`, `gamma(s) = 1`.
///
/// Forward Euler; a step that takes `gamma` to zero or below aborts, since
/// the transformed adjoints divide by it.
pub fn solve_gamma<T: Scalar>(b: &TrajectoryBundle<T>, co: &dyn Coefficients<T>) -> Result<Vec<T>> {
    let (y, z) = solved_yz(b)?;
    let n = b.grid.n_steps();
    let st = b.stride();
    let dt = b.grid.dt();
    let mut g = vec![T::zero(); b.n_paths * st];
    for p in 0..b.n_paths {
        let mut v = T::one();
        g[p * st] = v;
        for i in 0..n {
            let k = p * st + i;
            let fg = co.f_grad(&b.point(p, i), y[k], z[k]);
            v += v * (fg.y * dt + fg.z * b.dw(p, i));
            if !(v > T::zero()) || !v.is_finite() {
                return Err(Error::GammaCollapse { path: p, step: i + 1 });
            }
            g[k + 1] = v;
        }
    }
    Ok(g)
}

/// `(p1, p2, q1, q2)` from `-dp1 = H_x dt - q1 dW`, `-dp2 = H_x1 dt - q2 dW`.
#[allow(clippy::type_complexity)]
pub fn solve_adjoint_p<T: Scalar>(
    b: &TrajectoryBundle<T>,
    gamma: &[T],
    co: &dyn Coefficients<T>,
    basis: &RegressionBasis,
    scheme: Scheme,
) -> Result<([Vec<T>; 4], [f64; 2], [f64; 2], Vec<String>)> {
    let (y, z) = solved_yz(b)?;
    let n = b.grid.n_steps();
    let st = b.stride();
    let delta = b.grid.delay();
    let mut terminal = Vec::with_capacity(2 * b.n_paths);
    for p in 0..b.n_paths {
        let k = p * st + n;
        let (px, px1) = co.phi_grad(b.x[k], b.x1[k]);
        terminal.push((-px * gamma[k]).as_f64());
        terminal.push((-px1 * gamma[k]).as_f64());
    }
    let driver = |i: usize, p: usize, yy: &[f64], zz: &[f64], out: &mut [f64]| {
        let k = p * st + i;
        let adj = AdjointVector {
            gamma: gamma[k],
            p1: c(yy[0]),
            p2: c(yy[1]),
            p3: T::zero(),
            q1: c(zz[0]),
            q2: c(zz[1]),
        };
        let g = eval_h_grad(b.grid.time(i), &b.state(p, i), y[k], z[k], b.u[k], &adj, co, delta);
        out[0] = g.x.as_f64();
        out[1] = g.x1.as_f64();
    };
    let out = solve_backward(b, &BackwardProblem { dim: 2, terminal, driver: &driver }, basis, scheme)?;
    let cast = |v: &Vec<f64>| v.iter().map(|x| c::<T>(*x)).collect::<Vec<T>>();
    Ok((
        [cast(&out.y[0]), cast(&out.y[1]), cast(&out.z[0]), cast(&out.z[1])],
        [out.y0[0], out.y0[1]],
        [out.se[0], out.se[1]],
        out.warnings,
    ))
}

/// Direct solution of the transformed pair `(p-tilde, q-tilde)`, `(p-check, q-check)`.
///
/// Returns `[p_tilde, p_check, q_tilde, q_check]`, the start values and their
/// standard errors.
#[allow(clippy::type_complexity)]
pub fn solve_transformed<T: Scalar>(
    b: &TrajectoryBundle<T>,
    co: &dyn Coefficients<T>,
    basis: &RegressionBasis,
    scheme: Scheme,
) -> Result<([Vec<T>; 4], [f64; 2], [f64; 2])> {
    let (y, z) = solved_yz(b)?;
    let n = b.grid.n_steps();
    let st = b.stride();
    let lam = co.lambda().as_f64();
    let mut terminal = Vec::with_capacity(2 * b.n_paths);
    for p in 0..b.n_paths {
        let k = p * st + n;
        let (px, px1) = co.phi_grad(b.x[k], b.x1[k]);
        terminal.push(-px.as_f64());
        terminal.push(-px1.as_f64());
    }
    // dP = F dt + Q dW  <=>  -dP = (-F) dt - Q dW.
    let driver = |i: usize, p: usize, yy: &[f64], zz: &[f64], out: &mut [f64]| {
        let k = p * st + i;
        let pt = b.point(p, i);
        let bg = co.b_grad(&pt);
        let sg = co.sigma_grad(&pt);
        let fg = co.f_grad(&pt, y[k], z[k]);
        let (bx, bx1) = (bg.x.as_f64(), bg.x1.as_f64());
        let (sx, sx1) = (sg.x.as_f64(), sg.x1.as_f64());
        let (fx, fx1, fy, fz) = (fg.x.as_f64(), fg.x1.as_f64(), fg.y.as_f64(), fg.z.as_f64());
        let (pt_, pc) = (yy[0], yy[1]);
        let (qt, qc) = (zz[0], zz[1]);
        let f1 = fx - pt_ * (bx + fy + sx * fz) - qt * (sx + fz) - pc;
        let f2 = pc * (lam - fy) - qc * fz + fx1 - pt_ * (bx1 + fz * sx1) - qt * sx1;
        out[0] = -f1;
        out[1] = -f2;
    };
    let out = solve_backward(b, &BackwardProblem { dim: 2, terminal, driver: &driver }, basis, scheme)?;
    let cast = |v: &Vec<f64>| v.iter().map(|x| c::<T>(*x)).collect::<Vec<T>>();
    Ok((
        [cast(&out.y[0]), cast(&out.y[1]), cast(&out.z[0]), cast(&out.z[1])],
        [out.y0[0], out.y0[1]],
        [out.se[0], out.se[1]],
    ))
}

/// `p3(t) = int_t^T H_x2(r) dr` by a backward Riemann sum, plus `sup |p3|`.
#[allow(clippy::too_many_arguments)]
pub fn compute_p3_pathwise<T: Scalar>(
    b: &TrajectoryBundle<T>,
    gamma: &[T],
    p1: &[T],
    p2: &[T],
    q1: &[T],
    co: &dyn Coefficients<T>,
) -> Result<(Vec<T>, f64)> {
    let (y, z) = solved_yz(b)?;
    let n = b.grid.n_steps();
    let st = b.stride();
    let dt = b.grid.dt();
    let delta = b.grid.delay();
    let mut p3 = vec![T::zero(); b.n_paths * st];
    let mut worst = 0.0f64;
    for p in 0..b.n_paths {
        let mut acc = T::zero();
        for i in (0..n).rev() {
            let k = p * st + i;
            let adj = AdjointVector {
                gamma: gamma[k],
                p1: p1[k],
                p2: p2[k],
                p3: T::zero(),
                q1: q1[k],
                q2: T::zero(),
            };
            let g = eval_h_grad(b.grid.time(i), &b.state(p, i), y[k], z[k], b.u[k], &adj, co, delta);
            acc += g.x2 * dt;
            p3[k] = acc;
            worst = worst.max(acc.as_f64().abs());
        }
    }
    Ok((p3, worst))
}

/// Full adjoint system along a solved bundle.
pub fn solve_adjoints<T: Scalar>(
    b: &TrajectoryBundle<T>,
    co: &dyn Coefficients<T>,
    basis: &RegressionBasis,
    scheme: Scheme,
) -> Result<AdjointBundle<T>> {
    let (y, z) = solved_yz(b)?;
    let gamma = solve_gamma(b, co)?;
    let ([p1, p2, q1, q2], p_start, p_start_se, warnings) = solve_adjoint_p(b, &gamma, co, basis, scheme)?;
    let (p3, p3_max) = compute_p3_pathwise(b, &gamma, &p1, &p2, &q1, co)?;
    let st = b.stride();
    let len = b.n_paths * st;
    let (mut pt, mut pc, mut qt, mut qc) =
        (vec![T::zero(); len], vec![T::zero(); len], vec![T::zero(); len], vec![T::zero(); len]);
    for p in 0..b.n_paths {
        for i in 0..st {
            let k = p * st + i;
            let fz = co.f_grad(&b.point(p, i), y[k], z[k]).z;
            pt[k] = p1[k] / gamma[k];
            pc[k] = p2[k] / gamma[k];
            qt[k] = q1[k] / gamma[k] - pt[k] * fz;
            qc[k] = q2[k] / gamma[k] - pc[k] * fz;
        }
    }
    Ok(AdjointBundle {
        stride: st,
        gamma,
        p1,
        p2,
        p3,
        q1,
        q2,
        p_tilde: pt,
        p_check: pc,
        q_tilde: qt,
        q_check: qc,
        p3_max,
        p_start,
        p_start_se,
        warnings,
    })
}

/// Sampling and tolerance settings of [`check_sufficient_mp`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpConfig {
    pub convexity_pairs: usize,
    pub time_samples: usize,
    /// Paths used for the variational inequality (from the front of the bundle).
    pub paths: usize,
    /// Variational tolerance relative to `max |H_u|`.
    pub rel_tol: f64,
    /// `p3 = 0` tolerance in units of `dt`.
    pub p3_tol_dt: f64,
    pub seed: u64,
}

impl Default for MpConfig {
    fn default() -> Self {
        Self { convexity_pairs: 10_000, time_samples: 10, paths: 2000, rel_tol: 1e-3, p3_tol_dt: 10.0, seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpReport {
    pub convexity_ok: bool,
    pub convexity_worst: f64,
    pub convexity_witness: Option<String>,
    pub phi_linear_ok: bool,
    pub phi_m: f64,
    pub phi_n: f64,
    pub phi_residual: f64,
    pub p3_zero_ok: bool,
    pub p3_max: f64,
    pub p3_tol: f64,
    pub variational_ok: bool,
    pub variational_worst: f64,
    pub hu_scale: f64,
    pub variational_witness: Option<String>,
}

impl MpReport {
    pub fn verdict(&self) -> bool {
        self.convexity_ok && self.phi_linear_ok && self.p3_zero_ok && self.variational_ok
    }
}

/// Check the four conditions of the sufficient maximum principle along a
/// candidate control stored in the bundle.
pub fn check_sufficient_mp<T: Scalar>(
    b: &TrajectoryBundle<T>,
    adj: &AdjointBundle<T>,
    co: &dyn Coefficients<T>,
    domain: &ControlDomain<T>,
    cfg: &MpConfig,
) -> Result<MpReport> {
    let (y, z) = solved_yz(b)?;
    let n = b.grid.n_steps();
    let st = b.stride();
    let delta = b.grid.delay();
    let noise = NoiseSource::new(cfg.seed);

    // (a) Midpoint convexity of H in (x, x1, x2, y, z, u) at frozen adjoints.
    let mut rs = noise.uniform_stream(1);
    let mut convexity_worst = f64::NEG_INFINITY;
    let mut convexity_witness = None;
    let per_time = cfg.convexity_pairs.div_ceil(cfg.time_samples.max(1));
    let (lo, hi) = (domain.lower().as_f64(), domain.upper().as_f64());
    for ts in 0..cfg.time_samples.max(1) {
        let i = if n == 0 { 0 } else { (ts * n) / cfg.time_samples.max(1) };
        let t = b.grid.time(i);
        for _ in 0..per_time {
            let p = rs.index(b.n_paths);
            let k = p * st + i;
            let a = adj.vector(p, i);
            let base = [b.x[k].as_f64(), b.x1[k].as_f64(), b.x2[k].as_f64(), y[k].as_f64(), z[k].as_f64()];
            let draw = |rs: &mut crate::noise::UniformStream| {
                let mut v = [0.0; 6];
                for j in 0..5 {
                    v[j] = base[j] + rs.range(-2.0, 2.0);
                }
                v[5] = rs.range(lo, hi);
                v
            };
            let (va, vb) = (draw(&mut rs), draw(&mut rs));
            let h = |v: &[f64; 6]| {
                eval_h(t, &DelayedState::new(c(v[0]), c(v[1]), c(v[2])), c(v[3]), c(v[4]), c(v[5]), &a, co, delta)
                    .as_f64()
            };
            let mut vm = [0.0; 6];
            for j in 0..6 {
                vm[j] = 0.5 * (va[j] + vb[j]);
            }
            let (ha, hb, hm) = (h(&va), h(&vb), h(&vm));
            let gap = hm - 0.5 * (ha + hb);
            let scale = 1e-9 * (1.0 + ha.abs().max(hb.abs()));
            if gap - scale > convexity_worst {
                convexity_worst = gap - scale;
                if gap > scale {
                    convexity_witness = Some(format!("t={t} a={va:?} b={vb:?} gap={gap:e}"));
                }
            }
        }
    }
    let convexity_ok = convexity_worst <= 0.0;

    // (b) Terminal cost linear: least squares on c + M x + N x1.
    let mut rows = Vec::new();
    let mut vals = Vec::new();
    for _ in 0..400 {
        let (x, x1) = (rs.range(-3.0, 3.0), rs.range(-3.0, 3.0));
        rows.extend_from_slice(&[1.0, x, x1]);
        vals.push(co.phi(c(x), c(x1)).as_f64());
    }
    let a = DMatrix::from_row_slice(vals.len(), 3, &rows);
    let v = DVector::from_vec(vals.clone());
    let beta = (a.transpose() * &a)
        .cholesky()
        .map(|ch| ch.solve(&(a.transpose() * &v)))
        .ok_or_else(|| Error::Numerical("terminal-cost fit is singular".into()))?;
    let resid = &a * &beta - &v;
    let phi_residual = resid.amax();
    let phi_scale = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let phi_linear_ok = phi_residual <= 1e-9 * (1.0 + phi_scale);

    // (c) p3 = 0.
    let p3_tol = cfg.p3_tol_dt * b.grid.dt().as_f64();
    let p3_zero_ok = adj.p3_max <= p3_tol;

    // (d) H_u (u* - u) <= tol for u in U_disc along sampled paths and times.
    let us = domain.points();
    let mut variational_worst = f64::NEG_INFINITY;
    let mut hu_scale = 0.0f64;
    let mut variational_witness = None;
    for p in 0..cfg.paths.min(b.n_paths) {
        for i in 0..n {
            let k = p * st + i;
            let t = b.grid.time(i);
            let a = adj.vector(p, i);
            let st_ = b.state(p, i);
            let ustar = b.u[k];
            let hu = eval_h_grad(t, &st_, y[k], z[k], ustar, &a, co, delta).u.as_f64();
            for &u in &us {
                let hu_u = eval_h_grad(t, &st_, y[k], z[k], u, &a, co, delta).u.as_f64();
                hu_scale = hu_scale.max(hu_u.abs());
                let v = hu * (ustar - u).as_f64();
                if v > variational_worst {
                    variational_worst = v;
                    variational_witness = Some(format!("path={p} t={t} u*={ustar} u={u} H_u={hu:e}"));
                }
            }
        }
    }
    let variational_ok = variational_worst <= cfg.rel_tol * hu_scale;

    Ok(MpReport {
        convexity_ok,
        convexity_worst,
        convexity_witness,
        phi_linear_ok,
        phi_m: beta[1],
        phi_n: beta[2],
        phi_residual,
        p3_zero_ok,
        p3_max: adj.p3_max,
        p3_tol,
        variational_ok,
        variational_worst,
        hu_scale,
        variational_witness,
    })
}

/// `H_u` at a bundle point, used by reports.
pub fn hamiltonian_u<T: Scalar>(
    b: &TrajectoryBundle<T>,
    adj: &AdjointBundle<T>,
    co: &dyn Coefficients<T>,
    path: usize,
    step: usize,
    u: T,
) -> Result<T> {
    let (y, z) = solved_yz(b)?;
    let k = path * b.stride() + step;
    let pt = Point { u, ..b.point(path, step) };
    let st = DelayedState::new(pt.x, pt.x1, pt.x2);
    Ok(eval_h_grad(pt.t, &st, y[k], z[k], u, &adj.vector(path, step), co, b.grid.delay()).u)
}
