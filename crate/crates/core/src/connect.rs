//! Checks linking the adjoints, the grid value function and candidate
//! controls: the super-jet inclusion, the verification statistic and the
//! Girsanov reduction.

use std::io::Write;

use crate::adjoint::AdjointBundle;
use crate::coeffs::{Coefficients, DriverGrad, Point, StateGrad};
use crate::control::ControlDomain;
use crate::error::{Error, Result};
use crate::hamiltonian::{eval_g, GArgs, GVariant, LinearDriver};
use crate::hjb::{
    interior_nodes, is_smooth, jet_membership, viscosity_residual, Candidate, GridValueFunction, Side,
};
use crate::scalar::Scalar;
use crate::smdde::TrajectoryBundle;
use crate::stats::{median, MeanAcc};

/// Coefficients with the drift shifted by `sigma g(t)` and the `z`-part of a
/// linear driver removed.
pub struct GirsanovShifted<'a, T> {
    pub inner: &'a dyn Coefficients<T>,
    pub driver: LinearDriver<T>,
}

impl<T: Scalar> Coefficients<T> for GirsanovShifted<'_, T> {
    fn name(&self) -> String {
        format!("{}+girsanov", self.inner.name())
    }
    fn lambda(&self) -> T {
        self.inner.lambda()
    }
    fn b(&self, p: &Point<T>) -> T {
        self.inner.b(p) + self.inner.sigma(p) * self.driver.loading(p.t)
    }
    fn sigma(&self, p: &Point<T>) -> T {
        self.inner.sigma(p)
    }
    fn f(&self, p: &Point<T>, y: T, _z: T) -> T {
        self.inner.f(p, y, T::zero())
    }
    fn phi(&self, x: T, x1: T) -> T {
        self.inner.phi(x, x1)
    }
    fn b_grad(&self, p: &Point<T>) -> StateGrad<T> {
        let g = self.driver.loading(p.t);
        let (b, s) = (self.inner.b_grad(p), self.inner.sigma_grad(p));
        StateGrad { x: b.x + g * s.x, x1: b.x1 + g * s.x1, x2: b.x2 + g * s.x2, u: b.u + g * s.u }
    }
    fn sigma_grad(&self, p: &Point<T>) -> StateGrad<T> {
        self.inner.sigma_grad(p)
    }
    fn f_grad(&self, p: &Point<T>, y: T, _z: T) -> DriverGrad<T> {
        DriverGrad { z: T::zero(), ..self.inner.f_grad(p, y, T::zero()) }
    }
    fn phi_grad(&self, x: T, x1: T) -> (T, T) {
        self.inner.phi_grad(x, x1)
    }
    fn phi_xx(&self, x: T, x1: T) -> T {
        self.inner.phi_xx(x, x1)
    }
    fn driver_lipschitz(&self) -> Option<T> {
        Some(self.driver.sup_rate())
    }
    fn linear_driver(&self, t: T) -> Option<(T, T)> {
        Some((self.driver.rate(t), T::zero()))
    }
    fn girsanov_loading(&self, t: T) -> Option<T> {
        Some(self.driver.loading(t))
    }
}

/// Read the linear driver of `co` at the grid times; fails when the split is
/// unavailable, time-varying beyond the grid, or unbounded.
pub fn girsanov_reduce<'a, T: Scalar>(
    co: &'a dyn Coefficients<T>,
    times: &[T],
) -> Result<GirsanovShifted<'a, T>> {
    if times.is_empty() {
        return Err(Error::Config("need at least one time".into()));
    }
    let mut knots = Vec::with_capacity(times.len());
    let mut rate = Vec::with_capacity(times.len());
    let mut loading = Vec::with_capacity(times.len());
    for &t in times {
        let (r, g) = co.linear_driver(t).ok_or_else(|| {
            Error::Inapplicable(format!("driver of '{}' has no deterministic linear (y, z) part", co.name()))
        })?;
        if !r.is_finite() || !g.is_finite() {
            return Err(Error::Inapplicable("driver loading is unbounded".into()));
        }
        knots.push(t);
        rate.push(r);
        loading.push(g);
    }
    Ok(GirsanovShifted { inner: co, driver: LinearDriver::piecewise(knots, rate, loading)? })
}

/// `exp(sum g dW - 1/2 sum g^2 dt)` per path of a bundle simulated under the
/// original measure.
pub fn girsanov_weights<T: Scalar>(bundle: &TrajectoryBundle<T>, driver: &LinearDriver<T>) -> Vec<f64> {
    let n = bundle.grid.n_steps();
    let dt = bundle.grid.dt().as_f64();
    (0..bundle.n_paths)
        .map(|p| {
            let mut e = 0.0;
            for i in 0..n {
                let g = driver.loading(bundle.grid.time(i)).as_f64();
                e += g * bundle.dw(p, i).as_f64() - 0.5 * g * g * dt;
            }
            e.exp()
        })
        .collect()
}

/// Sampling and tolerance settings of [`check_duality_inclusion`].
#[derive(Debug, Clone, PartialEq)]
pub struct DualityConfig {
    pub steps: Vec<usize>,
    pub paths: usize,
    /// Added to the adjoint candidate (0 for the real check).
    pub shift: f64,
    pub radius: usize,
    pub tol: f64,
    /// `max |p3|` allowed, in units of `dt`.
    pub p3_tol_dt: f64,
    /// Central fraction of each grid axis used for statistics.
    pub core_frac: f64,
    /// Records with `t` beyond `T - t_margin` are excluded from the median.
    pub t_margin: f64,
}

impl Default for DualityConfig {
    fn default() -> Self {
        Self {
            steps: Vec::new(),
            paths: 200,
            shift: 0.0,
            radius: 2,
            tol: 0.25,
            p3_tol_dt: 10.0,
            core_frac: 0.8,
            t_margin: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualityRecord {
    pub t: f64,
    pub path: usize,
    pub x: f64,
    pub x1: f64,
    pub p_tilde: f64,
    pub v_x: f64,
    pub rel_err: f64,
    pub smooth: bool,
    pub super_ok: bool,
    /// Sub-side membership of the same slope; at smooth points this is the
    /// equality half of the inclusion.
    pub sub_ok: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualityReport {
    pub applicable: bool,
    pub p3_max: f64,
    pub records: Vec<DualityRecord>,
    /// Sampled points outside the grid core.
    pub skipped: usize,
    pub coverage: f64,
    pub super_fraction: f64,
    pub sub_fraction_smooth: f64,
    pub median_rel_err: f64,
}

impl DualityReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,path,x,x1,p_tilde,v_x,rel_err,smooth,super_ok,sub_ok")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{}",
                r.t, r.path, r.x, r.x1, r.p_tilde, r.v_x, r.rel_err, r.smooth as u8, r.super_ok as u8, r.sub_ok as u8
            )?;
        }
        Ok(())
    }
}

/// Super-jet inclusion of `p-tilde` and the smooth-point identity with `V_x`.
pub fn check_duality_inclusion<T: Scalar>(
    vf: &GridValueFunction<T>,
    bundle: &TrajectoryBundle<T>,
    adj: &AdjointBundle<T>,
    cfg: &DualityConfig,
) -> Result<DualityReport> {
    let p3_tol = cfg.p3_tol_dt * bundle.grid.dt().as_f64();
    let mut rep = DualityReport {
        applicable: adj.p3_max <= p3_tol,
        p3_max: adj.p3_max,
        records: Vec::new(),
        skipped: 0,
        coverage: 0.0,
        super_fraction: 0.0,
        sub_fraction_smooth: 0.0,
        median_rel_err: f64::NAN,
    };
    if !rep.applicable {
        return Ok(rep);
    }
    let horizon = bundle.grid.horizon().as_f64();
    let dx = vf.cfg.dx();
    for &i in &cfg.steps {
        if i >= bundle.grid.n_steps() {
            return Err(Error::Config(format!("sample step {i} is not before T")));
        }
        let t = bundle.grid.time(i);
        for p in 0..cfg.paths.min(bundle.n_paths) {
            let s = bundle.state(p, i);
            if !vf.in_core(s.x, s.x1, cfg.core_frac) || !vf.is_interior(s.x, s.x1) {
                rep.skipped += 1;
                continue;
            }
            let jet = vf.extract_jet(t, s.x, s.x1)?;
            let pt = adj.p_tilde(p, i).as_f64() + cfg.shift;
            let cand = Candidate::Slope(T::from_f64(pt).unwrap_or_else(T::zero));
            let sup = jet_membership(vf, t, s.x, s.x1, cand, Side::Super, cfg.radius, cfg.tol)?;
            let sub = jet_membership(vf, t, s.x, s.x1, cand, Side::Sub, cfg.radius, cfg.tol)?;
            let vx = jet.p.as_f64();
            rep.records.push(DualityRecord {
                t: t.as_f64(),
                path: p,
                x: s.x.as_f64(),
                x1: s.x1.as_f64(),
                p_tilde: pt,
                v_x: vx,
                rel_err: (pt - vx).abs() / (1.0 + vx.abs()),
                smooth: is_smooth(&jet, dx),
                super_ok: sup.pass,
                sub_ok: sub.pass,
            });
        }
    }
    let n = rep.records.len();
    rep.coverage = if n + rep.skipped == 0 { 0.0 } else { n as f64 / (n + rep.skipped) as f64 };
    if n > 0 {
        rep.super_fraction = rep.records.iter().filter(|r| r.super_ok).count() as f64 / n as f64;
        let smooth: Vec<&DualityRecord> = rep.records.iter().filter(|r| r.smooth).collect();
        if !smooth.is_empty() {
            rep.sub_fraction_smooth = smooth.iter().filter(|r| r.sub_ok).count() as f64 / smooth.len() as f64;
        }
        let errs: Vec<f64> = smooth
            .iter()
            .filter(|r| r.t <= horizon - cfg.t_margin + 1e-12)
            .map(|r| r.rel_err)
            .collect();
        rep.median_rel_err = median(&errs);
    }
    Ok(rep)
}

/// Settings of [`verify_optimality`].
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyConfig {
    /// Paths of the candidate bundle used for the statistic.
    pub paths: usize,
    pub radius: usize,
    pub membership_tol: f64,
    pub membership_fraction: f64,
    /// Allowance on `|J - V|` for grid error.
    pub grid_budget: f64,
    /// Viscosity residuals are measured on every `residual_every`-th stored slice.
    pub residual_every: usize,
    pub core_frac: f64,
    pub min_coverage: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            paths: 2000,
            radius: 2,
            membership_tol: 0.5,
            membership_fraction: 0.95,
            grid_budget: 5e-2,
            residual_every: 10,
            core_frac: 0.8,
            min_coverage: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    /// `E int [Theta - G-tilde(u*)] dt` and its standard error.
    pub statistic: f64,
    pub statistic_se: f64,
    /// Discretization allowance on the statistic: `(T - s)` times the largest
    /// viscosity residual of the grid solution.
    pub disc_budget: f64,
    pub membership_fraction: f64,
    pub coverage: f64,
    pub j: f64,
    pub j_se: f64,
    pub v: f64,
    pub gap: f64,
    pub gap_ok: bool,
    /// Fraction of sampled times where the per-time mean integrand exceeds
    /// its own allowance; reported only.
    pub pointwise_warn_fraction: f64,
    pub verdict: bool,
}

/// Verification statistic along a candidate bundle, with jets read off the grid.
///
/// `j` is `(J, SE)` of the candidate, typically `-Y(s)` from the LSMC solve.
#[allow(clippy::too_many_arguments)]
pub fn verify_optimality<T: Scalar>(
    vf: &GridValueFunction<T>,
    co: &dyn Coefficients<T>,
    driver: &LinearDriver<T>,
    domain: &ControlDomain<T>,
    bundle: &TrajectoryBundle<T>,
    j: (f64, f64),
    cfg: &VerifyConfig,
) -> Result<VerificationReport> {
    if driver.sup_loading() != T::zero() {
        return Err(Error::Inapplicable(
            "driver has a z-loading; use the Girsanov-reduced instance or reformulate".into(),
        ));
    }
    if vf.variant != GVariant::Reduced {
        return Err(Error::Config("verification needs a grid solved with the reduced variant".into()));
    }
    let n = bundle.grid.n_steps();
    let dt = bundle.grid.dt().as_f64();
    let delta = bundle.grid.delay();
    let np = cfg.paths.min(bundle.n_paths);
    let mut acc = MeanAcc::default();
    let mut per_time = vec![MeanAcc::default(); n];
    let (mut used, mut total, mut members) = (0usize, 0usize, 0usize);
    for p in 0..np {
        let mut sum = 0.0;
        for i in 0..n {
            total += 1;
            let pt = bundle.point(p, i);
            if !vf.in_core(pt.x, pt.x1, cfg.core_frac) || !vf.is_interior(pt.x, pt.x1) {
                continue;
            }
            used += 1;
            let jet = vf.extract_jet(pt.t, pt.x, pt.x1)?;
            let v = vf.local_value(pt.t, pt.x, pt.x1)?;
            let args = GArgs { k: -v, p: -jet.p, r: -jet.pp, q: -jet.q };
            let g = eval_g(GVariant::Reduced, &pt, &args, co, delta, Some(driver))?;
            let integrand = (jet.theta - g).as_f64();
            sum += integrand * dt;
            per_time[i].push(integrand);
            let m = jet_membership(vf, pt.t, pt.x, pt.x1, Candidate::Full(jet), Side::Super, cfg.radius, cfg.membership_tol)?;
            if m.pass {
                members += 1;
            }
        }
        acc.push(sum);
    }
    let coverage = if total == 0 { 0.0 } else { used as f64 / total as f64 };
    if coverage < cfg.min_coverage {
        return Err(Error::Boundary(format!(
            "only {:.1}% of trajectory points lie inside the grid core",
            100.0 * coverage
        )));
    }

    let nodes = interior_nodes(vf, cfg.core_frac, cfg.residual_every);
    let res = viscosity_residual(vf, co, Some(driver), domain, &nodes)?;
    let span = (vf.cfg.horizon - vf.cfg.s).as_f64();
    let worst_res = res.max_sub.max(res.max_super);
    let disc_budget = span * worst_res;

    let x0 = bundle.history.x();
    let x10 = bundle.history.x1(co.lambda(), bundle.grid.dt());
    let v = vf.interp_value(bundle.grid.s(), x0, x10).as_f64();
    let gap = j.0 - v;
    let gap_ok = gap.abs() <= 3.0 * j.1 + cfg.grid_budget;

    let statistic = acc.mean();
    let statistic_se = acc.std_error();
    let membership_fraction = if used == 0 { 0.0 } else { members as f64 / used as f64 };
    let warn = per_time
        .iter()
        .filter(|a| a.count() > 0 && a.mean() > worst_res + 3.0 * a.std_error())
        .count();
    let verdict = statistic <= 3.0 * statistic_se + disc_budget && membership_fraction >= cfg.membership_fraction;
    Ok(VerificationReport {
        statistic,
        statistic_se,
        disc_budget,
        membership_fraction,
        coverage,
        j: j.0,
        j_se: j.1,
        v,
        gap,
        gap_ok,
        pointwise_warn_fraction: warn as f64 / n.max(1) as f64,
        verdict,
    })
}
