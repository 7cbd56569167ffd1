//! Explicit monotone finite-difference solver for the delay-reduced HJB
//! equation on an `(x, x1)` grid, with jets and viscosity checks.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;

use crate::coeffs::{Coefficients, Point};
use crate::control::{ControlDomain, ControlPolicy};
use crate::error::{Error, Result};
use crate::hamiltonian::{
    effective_drift, eval_g_unchecked, g_from_parts, k_slope, transport, DelayedState, GArgs, GVariant, LinearDriver,
};
use crate::scalar::{c, Scalar};

/// Which time slices of `V` are kept in memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Storage {
    All,
    /// Keep slices `i` and `i + 1` for every multiple `i` of the stride, and `T`.
    Stride(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HjbGridConfig<T> {
    pub x_min: T,
    pub x_max: T,
    pub nx: usize,
    pub x1_min: T,
    pub x1_max: T,
    pub nx1: usize,
    pub s: T,
    pub horizon: T,
    pub n_slices: usize,
    /// Discrete delay; enters only the transport term.
    pub delay: T,
    pub storage: Storage,
}

impl<T: Scalar> HjbGridConfig<T> {
    fn validate(&self) -> Result<()> {
        if self.nx < 5 || self.nx1 < 2 {
            return Err(Error::Config("grid needs nx >= 5 and nx1 >= 2".into()));
        }
        if !(self.x_max > self.x_min) || !(self.x1_max > self.x1_min) {
            return Err(Error::Config("grid extents are empty".into()));
        }
        if !(self.horizon > self.s) || self.n_slices == 0 {
            return Err(Error::Config("need T > s and at least one time slice".into()));
        }
        if let Storage::Stride(0) = self.storage {
            return Err(Error::Config("storage stride must be positive".into()));
        }
        Ok(())
    }

    pub fn dx(&self) -> T {
        (self.x_max - self.x_min) / c((self.nx - 1) as f64)
    }
    pub fn dx1(&self) -> T {
        (self.x1_max - self.x1_min) / c((self.nx1 - 1) as f64)
    }
    pub fn dt(&self) -> T {
        (self.horizon - self.s) / c(self.n_slices as f64)
    }

    fn keeps(&self, i: usize) -> bool {
        match self.storage {
            Storage::All => true,
            Storage::Stride(k) => i % k == 0 || (i > 0 && (i - 1) % k == 0) || i == self.n_slices,
        }
    }

    /// Largest stable `dt` for the given rate `sup (sigma^2/dx^2 + |drift|/dx + |tr|/dx1 + |f_y|)`.
    pub fn required_dt(rate: f64) -> f64 {
        1.0 / rate
    }
}

/// `(Theta, p, q, P)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Jet<T> {
    pub theta: T,
    pub p: T,
    pub q: T,
    pub pp: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slice<T> {
    pub v: Vec<T>,
    pub u_star: Vec<T>,
}

/// Solution on the grid; `v[j * nx1 + k]` is `V(t_i, x_j, x1_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridValueFunction<T> {
    pub cfg: HjbGridConfig<T>,
    pub variant: GVariant,
    pub slices: BTreeMap<usize, Slice<T>>,
    /// Worst deviation of the pre-solve x2 gate.
    pub x2_gate_worst: f64,
    /// Worst x2 deviation re-measured with numerical jets after the solve.
    pub x2_audit_worst: f64,
    /// Largest `dt * rate` seen by the stability check.
    pub cfl: f64,
    pub warnings: Vec<String>,
}

impl<T: Scalar> GridValueFunction<T> {
    #[inline]
    pub fn x(&self, j: usize) -> T {
        self.cfg.x_min + self.cfg.dx() * c(j as f64)
    }
    #[inline]
    pub fn x1(&self, k: usize) -> T {
        self.cfg.x1_min + self.cfg.dx1() * c(k as f64)
    }
    #[inline]
    pub fn time(&self, i: usize) -> T {
        self.cfg.s + self.cfg.dt() * c(i as f64)
    }
    #[inline]
    fn at(&self, j: usize, k: usize) -> usize {
        j * self.cfg.nx1 + k
    }

    pub fn slice(&self, i: usize) -> Option<&Slice<T>> {
        self.slices.get(&i)
    }

    pub fn value(&self, i: usize, j: usize, k: usize) -> Option<T> {
        self.slices.get(&i).map(|s| s.v[self.at(j, k)])
    }

    /// Start index of the stored pair `(i, i + 1)` closest to `t`.
    pub fn pair_index(&self, t: T) -> usize {
        let n = self.cfg.n_slices;
        let r = ((t - self.cfg.s) / self.cfg.dt()).as_f64().floor().clamp(0.0, (n - 1) as f64) as usize;
        if self.slices.contains_key(&r) && self.slices.contains_key(&(r + 1)) {
            return r;
        }
        let mut best = 0;
        let mut bd = usize::MAX;
        for &i in self.slices.keys() {
            if i < n && self.slices.contains_key(&(i + 1)) {
                let d = i.abs_diff(r);
                if d < bd {
                    bd = d;
                    best = i;
                }
            }
        }
        best
    }

    /// Stored slice closest to `t`.
    pub fn nearest_slice(&self, t: T) -> usize {
        let r = ((t - self.cfg.s) / self.cfg.dt()).as_f64().round().clamp(0.0, self.cfg.n_slices as f64) as usize;
        if self.slices.contains_key(&r) {
            return r;
        }
        *self.slices.keys().min_by_key(|i| i.abs_diff(r)).expect("terminal slice always stored")
    }

    /// Fractional cell coordinates, clamped to the grid.
    fn cell(&self, x: T, x1: T) -> (usize, f64, usize, f64) {
        let fx = ((x - self.cfg.x_min) / self.cfg.dx()).as_f64().clamp(0.0, (self.cfg.nx - 1) as f64);
        let fk = ((x1 - self.cfg.x1_min) / self.cfg.dx1()).as_f64().clamp(0.0, (self.cfg.nx1 - 1) as f64);
        let j = (fx.floor() as usize).min(self.cfg.nx - 2);
        let k = (fk.floor() as usize).min(self.cfg.nx1 - 2);
        (j, fx - j as f64, k, fk - k as f64)
    }

    fn bilinear(&self, field: &[T], x: T, x1: T) -> T {
        let (j, wx, k, wk) = self.cell(x, x1);
        let g = |a: usize, b: usize| field[self.at(a, b)].as_f64();
        let v = (1.0 - wx) * ((1.0 - wk) * g(j, k) + wk * g(j, k + 1))
            + wx * ((1.0 - wk) * g(j + 1, k) + wk * g(j + 1, k + 1));
        c(v)
    }

    /// Bilinear interpolation of `V` on the nearest stored slice.
    pub fn interp_value(&self, t: T, x: T, x1: T) -> T {
        let i = self.nearest_slice(t);
        self.bilinear(&self.slices[&i].v, x, x1)
    }

    /// Bilinear interpolation of the argmax control on the nearest stored slice.
    pub fn interp_control(&self, t: T, x: T, x1: T) -> T {
        let i = self.nearest_slice(t);
        self.bilinear(&self.slices[&i].u_star, x, x1)
    }

    pub fn contains(&self, x: T, x1: T) -> bool {
        x > self.x(0) && x < self.x(self.cfg.nx - 1) && x1 >= self.x1(0) && x1 <= self.x1(self.cfg.nx1 - 1)
    }

    /// `x` strictly between the second and the second-to-last node.
    pub fn is_interior(&self, x: T, x1: T) -> bool {
        x >= self.x(1) && x <= self.x(self.cfg.nx - 2) && x1 >= self.x1(0) && x1 <= self.x1(self.cfg.nx1 - 1)
    }

    /// Inside the central `frac` of each axis.
    pub fn in_core(&self, x: T, x1: T, frac: f64) -> bool {
        let cut = |v: T, lo: T, hi: T| {
            let (v, lo, hi) = (v.as_f64(), lo.as_f64(), hi.as_f64());
            let m = 0.5 * (1.0 - frac) * (hi - lo);
            v >= lo + m && v <= hi - m
        };
        cut(x, self.cfg.x_min, self.cfg.x_max) && cut(x1, self.cfg.x1_min, self.cfg.x1_max)
    }

    /// Node jet at slice `i` (which must have `i + 1` stored); also returns
    /// `(V_x1x1, V_xx1)` for the local quadratic model.
    fn node_jet(&self, i: usize, j: usize, k: usize) -> (Jet<T>, T, T) {
        let v = &self.slices[&i].v;
        let vn = &self.slices[&(i + 1)].v;
        let (dx, dx1, dt) = (self.cfg.dx(), self.cfg.dx1(), self.cfg.dt());
        let two = T::two();
        let g = |a: usize, b: usize| v[self.at(a, b)];
        let theta = (vn[self.at(j, k)] - g(j, k)) / dt;
        let p = (g(j + 1, k) - g(j - 1, k)) / (two * dx);
        let pp = (g(j + 1, k) - two * g(j, k) + g(j - 1, k)) / (dx * dx);
        let nk = self.cfg.nx1;
        let (q, qq, cross) = if k > 0 && k + 1 < nk {
            let q = (g(j, k + 1) - g(j, k - 1)) / (two * dx1);
            let qq = (g(j, k + 1) - two * g(j, k) + g(j, k - 1)) / (dx1 * dx1);
            let cr = (g(j + 1, k + 1) - g(j + 1, k - 1) - g(j - 1, k + 1) + g(j - 1, k - 1)) / (c::<T>(4.0) * dx * dx1);
            (q, qq, cr)
        } else if k == 0 {
            let q = (g(j, 1) - g(j, 0)) / dx1;
            let cr = (g(j + 1, 1) - g(j + 1, 0) - g(j - 1, 1) + g(j - 1, 0)) / (two * dx * dx1);
            (q, T::zero(), cr)
        } else {
            let q = (g(j, k) - g(j, k - 1)) / dx1;
            let cr = (g(j + 1, k) - g(j + 1, k - 1) - g(j - 1, k) + g(j - 1, k - 1)) / (two * dx * dx1);
            (q, T::zero(), cr)
        };
        (Jet { theta, p, q, pp }, qq, cross)
    }

    fn check_point(&self, x: T, x1: T) -> Result<()> {
        if !self.is_interior(x, x1) {
            return Err(Error::Boundary(format!("point ({x}, {x1}) is not interior to the grid")));
        }
        Ok(())
    }

    /// Jet at an arbitrary interior point: node jets blended bilinearly.
    pub fn extract_jet(&self, t: T, x: T, x1: T) -> Result<Jet<T>> {
        self.check_point(x, x1)?;
        let i = self.pair_index(t);
        let (j, wx, k, wk) = self.cell(x, x1);
        // Keep the x stencil away from the outer nodes.
        let (j, wx) = if j == 0 { (1, 0.0) } else { (j, wx) };
        let (j, wx) = if j + 1 >= self.cfg.nx - 1 { (self.cfg.nx - 3, 1.0) } else { (j, wx) };
        let mut acc = [0.0f64; 4];
        for (a, wa) in [(j, 1.0 - wx), (j + 1, wx)] {
            for (b, wb) in [(k, 1.0 - wk), (k + 1, wk)] {
                let w = wa * wb;
                if w == 0.0 {
                    continue;
                }
                let (jt, _, _) = self.node_jet(i, a, b);
                acc[0] += w * jt.theta.as_f64();
                acc[1] += w * jt.p.as_f64();
                acc[2] += w * jt.q.as_f64();
                acc[3] += w * jt.pp.as_f64();
            }
        }
        Ok(Jet { theta: c(acc[0]), p: c(acc[1]), q: c(acc[2]), pp: c(acc[3]) })
    }

    /// `V` at an interior point from the local quadratic model at the
    /// nearest node of the jet slice.
    pub fn local_value(&self, t: T, x: T, x1: T) -> Result<T> {
        self.check_point(x, x1)?;
        let i = self.pair_index(t);
        let (j0, k0) = self.nearest_node(x, x1);
        let (jt, qq, cr) = self.node_jet(i, j0, k0);
        let dx = x - self.x(j0);
        let dk = x1 - self.x1(k0);
        let v0 = self.slices[&i].v[self.at(j0, k0)];
        Ok(v0 + jt.p * dx + jt.q * dk + T::half() * (jt.pp * dx * dx + qq * dk * dk) + cr * dx * dk)
    }

    fn nearest_node(&self, x: T, x1: T) -> (usize, usize) {
        let j = ((x - self.cfg.x_min) / self.cfg.dx()).as_f64().round().clamp(1.0, (self.cfg.nx - 2) as f64) as usize;
        let k = ((x1 - self.cfg.x1_min) / self.cfg.dx1()).as_f64().round().clamp(0.0, (self.cfg.nx1 - 1) as f64) as usize;
        (j, k)
    }

    /// Dump stored slices (every `every`-th of them) as `t,x,x1,V,u_star`.
    pub fn write_csv<W: Write>(&self, mut w: W, every: usize) -> std::io::Result<()> {
        writeln!(w, "t,x,x1,V,u_star")?;
        for (n, (&i, sl)) in self.slices.iter().enumerate() {
            if n % every.max(1) != 0 && i != self.cfg.n_slices {
                continue;
            }
            let t = self.time(i).as_f64();
            for j in 0..self.cfg.nx {
                for k in 0..self.cfg.nx1 {
                    let a = self.at(j, k);
                    writeln!(
                        w,
                        "{},{},{},{},{}",
                        t,
                        self.x(j).as_f64(),
                        self.x1(k).as_f64(),
                        sl.v[a].as_f64(),
                        sl.u_star[a].as_f64()
                    )?;
                }
            }
        }
        Ok(())
    }
}

/// Probe point of the x2 gate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct X2Probe<T> {
    pub t: T,
    pub x: T,
    pub x1: T,
    pub args: GArgs<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct X2Check {
    pub pass: bool,
    pub worst: f64,
    pub witness: Option<String>,
}

fn sup_g<T: Scalar>(
    variant: GVariant,
    pt: Point<T>,
    args: &GArgs<T>,
    co: &dyn Coefficients<T>,
    delta: T,
    driver: Option<&LinearDriver<T>>,
    us: &[T],
) -> T {
    us.iter()
        .map(|&u| eval_g_unchecked(variant, &Point { u, ..pt }, args, co, delta, driver))
        .fold(T::neg_infinity(), T::max)
}

fn require_driver<T: Scalar>(variant: GVariant, driver: Option<&LinearDriver<T>>) -> Result<()> {
    if variant.needs_driver() && driver.is_none() {
        return Err(Error::Config(format!("{variant:?} requires a linear driver")));
    }
    Ok(())
}

/// `sup_u G` evaluated at `x2 in {-scale, 0, scale}`; passes iff the largest
/// deviation from the `x2 = 0` value is within `1e-9 (1 + |G|)` everywhere.
#[allow(clippy::too_many_arguments)]
pub fn check_x2_independence<T: Scalar>(
    co: &dyn Coefficients<T>,
    driver: Option<&LinearDriver<T>>,
    domain: &ControlDomain<T>,
    variant: GVariant,
    delta: T,
    probes: &[X2Probe<T>],
    scale: T,
) -> Result<X2Check> {
    require_driver(variant, driver)?;
    let us = domain.points();
    let mut worst = 0.0f64;
    let mut pass = true;
    let mut witness = None;
    for pr in probes {
        let at = |x2: T| {
            let pt = Point { t: pr.t, x: pr.x, x1: pr.x1, x2, u: T::zero() };
            sup_g(variant, pt, &pr.args, co, delta, driver, &us).as_f64()
        };
        let g0 = at(T::zero());
        for x2 in [-scale, scale] {
            let d = (at(x2) - g0).abs();
            let rel = d / (1.0 + g0.abs());
            if rel > worst {
                worst = rel;
            }
            if d > 1e-9 * (1.0 + g0.abs()) {
                pass = false;
                if witness.is_none() {
                    witness = Some(format!("t={} x={} x1={} x2={} deviation={d:e}", pr.t, pr.x, pr.x1, x2));
                }
            }
        }
    }
    Ok(X2Check { pass, worst, witness })
}

/// Maximum of `sigma^2/dx^2 + |drift|/dx + |tr|/dx1 + |f_y|` over nodes,
/// controls and the times `s`, mid, `T`, with jets of the terminal data.
fn stability_rate<T: Scalar>(
    co: &dyn Coefficients<T>,
    driver: Option<&LinearDriver<T>>,
    us: &[T],
    cfg: &HjbGridConfig<T>,
    variant: GVariant,
) -> f64 {
    let (dx, dx1) = (cfg.dx(), cfg.dx1());
    let lam = co.lambda();
    let mid = T::half() * (cfg.s + cfg.horizon);
    let mut rate = 0.0f64;
    for t in [cfg.s, mid, cfg.horizon] {
        for j in 0..cfg.nx {
            let x = cfg.x_min + dx * c(j as f64);
            for k in 0..cfg.nx1 {
                let x1 = cfg.x1_min + dx1 * c(k as f64);
                let (px, _) = co.phi_grad(x, x1);
                let args = GArgs { k: co.phi(x, x1), p: px, r: T::zero(), q: T::zero() };
                let tr = transport(x, x1, T::zero(), lam, cfg.delay).abs().as_f64();
                for &u in us {
                    let pt = Point { t, x, x1, x2: T::zero(), u };
                    let sg = co.sigma(&pt).as_f64();
                    let bd = effective_drift(variant, &pt, &args, co, driver).abs().as_f64();
                    let fy = k_slope(variant, &pt, &args, co, driver).abs().as_f64();
                    let r = sg * sg / (dx * dx).as_f64() + bd / dx.as_f64() + tr / dx1.as_f64() + fy;
                    rate = rate.max(r);
                }
            }
        }
    }
    rate
}

/// Pick the upwinded `(V_x, V_x1)` at node `(j, k)`.
#[inline]
#[allow(clippy::too_many_arguments)]
fn upwind<T: Scalar>(v: &[T], nx1: usize, j: usize, k: usize, bdir: T, tdir: T, dx: T, dx1: T) -> (T, T) {
    let at = |a: usize, b: usize| v[a * nx1 + b];
    let vx = if bdir > T::zero() {
        (at(j + 1, k) - at(j, k)) / dx
    } else {
        (at(j, k) - at(j - 1, k)) / dx
    };
    let vq = if k == 0 {
        (at(j, 1) - at(j, 0)) / dx1
    } else if k + 1 == nx1 {
        (at(j, k) - at(j, k - 1)) / dx1
    } else if tdir > T::zero() {
        (at(j, k + 1) - at(j, k)) / dx1
    } else {
        (at(j, k) - at(j, k - 1)) / dx1
    };
    (vx, vq)
}

/// Central `(V_x, V_xx, V_x1)` at node `(j, k)` with one-sided fallbacks.
#[inline]
fn central<T: Scalar>(v: &[T], nx: usize, nx1: usize, j: usize, k: usize, dx: T, dx1: T) -> (T, T, T) {
    let at = |a: usize, b: usize| v[a * nx1 + b];
    let jj = j.clamp(1, nx - 2);
    let two = T::two();
    let vx = (at(jj + 1, k) - at(jj - 1, k)) / (two * dx);
    let vxx = (at(jj + 1, k) - two * at(jj, k) + at(jj - 1, k)) / (dx * dx);
    let vq = if k == 0 {
        (at(j, 1) - at(j, 0)) / dx1
    } else if k + 1 == nx1 {
        (at(j, k) - at(j, k - 1)) / dx1
    } else {
        (at(j, k + 1) - at(j, k - 1)) / (two * dx1)
    };
    (vx, vxx, vq)
}

/// Argmax of `u -> G` over the discrete set with a parabolic vertex refinement.
fn refine_argmax<T: Scalar>(us: &[T], gs: &[T], domain: &ControlDomain<T>) -> T {
    let mut m = 0;
    for (i, g) in gs.iter().enumerate() {
        if *g > gs[m] {
            m = i;
        }
    }
    if m == 0 || m + 1 == us.len() {
        return us[m];
    }
    let (gl, g0, gr) = (gs[m - 1].as_f64(), gs[m].as_f64(), gs[m + 1].as_f64());
    let den = gl - 2.0 * g0 + gr;
    if den >= 0.0 {
        return us[m];
    }
    let h = (us[m + 1] - us[m]).as_f64();
    let off = 0.5 * h * (gl - gr) / den;
    domain.clamp(us[m] + c(off.clamp(-h, h)))
}

/// Argmax control of one slice from central jets.
#[allow(clippy::too_many_arguments)]
fn argmax_slice<T: Scalar>(
    v: &[T],
    t: T,
    cfg: &HjbGridConfig<T>,
    co: &dyn Coefficients<T>,
    driver: Option<&LinearDriver<T>>,
    domain: &ControlDomain<T>,
    us: &[T],
    variant: GVariant,
) -> Vec<T> {
    let (nx, nx1) = (cfg.nx, cfg.nx1);
    let (dx, dx1) = (cfg.dx(), cfg.dx1());
    let mut out = vec![T::zero(); nx * nx1];
    out.par_chunks_mut(nx1).enumerate().for_each_init(
        || vec![T::zero(); us.len()],
        |gs, (j, row)| {
            let x = cfg.x_min + dx * c(j as f64);
            for (k, o) in row.iter_mut().enumerate() {
                let x1 = cfg.x1_min + dx1 * c(k as f64);
                let (vx, vxx, vq) = central(v, nx, nx1, j, k, dx, dx1);
                let args = GArgs { k: -v[j * nx1 + k], p: -vx, r: -vxx, q: -vq };
                for (g, &u) in gs.iter_mut().zip(us) {
                    let pt = Point { t, x, x1, x2: T::zero(), u };
                    *g = eval_g_unchecked(variant, &pt, &args, co, cfg.delay, driver);
                }
                *o = refine_argmax(us, gs, domain);
            }
        },
    );
    out
}

/// Backward explicit stepping `V(t - dt) = V(t) - dt sup_u G(-V, -V_x, -V_xx, -V_x1)`.
pub fn solve_hjb<T: Scalar>(
    co: &dyn Coefficients<T>,
    driver: Option<&LinearDriver<T>>,
    domain: &ControlDomain<T>,
    cfg: &HjbGridConfig<T>,
    variant: GVariant,
) -> Result<GridValueFunction<T>> {
    cfg.validate()?;
    require_driver(variant, driver)?;
    let us = domain.points();
    let (nx, nx1, n) = (cfg.nx, cfg.nx1, cfg.n_slices);
    let (dx, dx1, dt) = (cfg.dx(), cfg.dx1(), cfg.dt());
    let lam = co.lambda();

    let rate = stability_rate(co, driver, &us, cfg, variant);
    let cfl = rate * dt.as_f64();
    if cfl > 1.0 + 1e-12 {
        let need = HjbGridConfig::<T>::required_dt(rate);
        let span = (cfg.horizon - cfg.s).as_f64();
        return Err(Error::Config(format!(
            "CFL violated: dt_pde = {} gives {cfl:.4} > 1; need dt_pde <= {need:.6e} (n_slices >= {})",
            dt,
            (span / need).ceil()
        )));
    }

    // x2 gate on terminal jets.
    let scale = cfg.x_max.abs().max(cfg.x_min.abs());
    let mut probes = Vec::new();
    let mid = T::half() * (cfg.s + cfg.horizon);
    let sj = (nx / 10).max(1);
    let sk = (nx1 / 10).max(1);
    for t in [cfg.s, mid, cfg.horizon] {
        for j in (0..nx).step_by(sj) {
            for k in (0..nx1).step_by(sk) {
                let x = cfg.x_min + dx * c(j as f64);
                let x1 = cfg.x1_min + dx1 * c(k as f64);
                let (px, pq) = co.phi_grad(x, x1);
                let args = GArgs { k: co.phi(x, x1), p: px, r: co.phi_xx(x, x1), q: pq };
                probes.push(X2Probe { t, x, x1, args });
            }
        }
    }
    let gate = check_x2_independence(co, driver, domain, variant, cfg.delay, &probes, scale)?;
    if !gate.pass {
        return Err(Error::Hypothesis(format!(
            "sup_u G depends on x2 (worst relative deviation {:e}): {}",
            gate.worst,
            gate.witness.unwrap_or_default()
        )));
    }

    let mut v = vec![T::zero(); nx * nx1];
    for j in 0..nx {
        for k in 0..nx1 {
            v[j * nx1 + k] = -co.phi(cfg.x_min + dx * c(j as f64), cfg.x1_min + dx1 * c(k as f64));
        }
    }
    let mut slices = BTreeMap::new();
    let t_end = cfg.horizon;
    slices.insert(n, Slice { u_star: argmax_slice(&v, t_end, cfg, co, driver, domain, &us, variant), v: v.clone() });

    let mut next = vec![T::zero(); nx * nx1];
    for i in (0..n).rev() {
        // G is frozen at the later time of the step.
        let t = cfg.s + dt * c((i + 1) as f64);
        // A driver linear in z has a state-free z-slope; skip f_grad then.
        let z_slope = co.linear_driver(t).map(|(_, g)| g);
        let cur = &v;
        next.par_chunks_mut(nx1).enumerate().for_each(|(j, row)| {
            if j == 0 || j + 1 == nx {
                return;
            }
            let x = cfg.x_min + dx * c(j as f64);
            for (k, o) in row.iter_mut().enumerate() {
                let x1 = cfg.x1_min + dx1 * c(k as f64);
                let (vx_c, vxx, _) = central(cur, nx, nx1, j, k, dx, dx1);
                let vc = cur[j * nx1 + k];
                let tr = transport(x, x1, T::zero(), lam, cfg.delay);
                let (vx_f, vq_f) = upwind(cur, nx1, j, k, T::one(), T::one(), dx, dx1);
                let (vx_b, vq_b) = upwind(cur, nx1, j, k, -T::one(), -T::one(), dx, dx1);
                let vq = if tr > T::zero() { vq_f } else { vq_b };
                let dl = driver.map_or(T::zero(), |d| d.loading(t));
                let mut best = T::neg_infinity();
                for &u in &us {
                    let pt = Point { t, x, x1, x2: T::zero(), u };
                    let (b, sig) = (co.b(&pt), co.sigma(&pt));
                    let bdir = match variant {
                        GVariant::Standard => {
                            let fz = z_slope.unwrap_or_else(|| co.f_grad(&pt, -vc, -vx_c * sig).z);
                            b + sig * fz
                        }
                        GVariant::Girsanov => b + sig * dl,
                        GVariant::Reduced => b,
                    };
                    let vx = if bdir > T::zero() { vx_f } else { vx_b };
                    let args = GArgs { k: -vc, p: -vx, r: -vxx, q: -vq };
                    let g = g_from_parts(variant, &pt, &args, b, sig, tr, co, driver);
                    if g > best {
                        best = g;
                    }
                }
                *o = vc - dt * best;
            }
        });
        // Quadratic extrapolation onto the outer x nodes.
        let three = c::<T>(3.0);
        for k in 0..nx1 {
            let l = nx - 1;
            let g = |a: usize| next[a * nx1 + k];
            let (lo, hi) = (
                three * g(1) - three * g(2) + g(3),
                three * g(l - 1) - three * g(l - 2) + g(l - 3),
            );
            next[k] = lo;
            next[l * nx1 + k] = hi;
        }
        if let Some(e) = next.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite value at slice {i}, node {e}")));
        }
        std::mem::swap(&mut v, &mut next);
        if cfg.keeps(i) {
            let ti = cfg.s + dt * c(i as f64);
            let u_star = argmax_slice(&v, ti, cfg, co, driver, domain, &us, variant);
            slices.insert(i, Slice { v: v.clone(), u_star });
        }
    }

    let mut vf = GridValueFunction {
        cfg: *cfg,
        variant,
        slices,
        x2_gate_worst: gate.worst,
        x2_audit_worst: 0.0,
        cfl,
        warnings: Vec::new(),
    };
    vf.x2_audit_worst = x2_audit(&vf, co, driver, domain, scale)?;
    if vf.x2_audit_worst > 1e-9 {
        vf.warnings.push(format!(
            "x2 audit with numerical jets found relative deviation {:e}",
            vf.x2_audit_worst
        ));
    }
    Ok(vf)
}

/// Re-run the x2 gate with numerical jets at a coarse subset of nodes.
fn x2_audit<T: Scalar>(
    vf: &GridValueFunction<T>,
    co: &dyn Coefficients<T>,
    driver: Option<&LinearDriver<T>>,
    domain: &ControlDomain<T>,
    scale: T,
) -> Result<f64> {
    let cfg = &vf.cfg;
    let (nx, nx1) = (cfg.nx, cfg.nx1);
    let mut probes = Vec::new();
    let picks: Vec<usize> = {
        let keys: Vec<usize> = vf.slices.keys().copied().collect();
        let step = (keys.len() / 4).max(1);
        keys.into_iter().step_by(step).collect()
    };
    for i in picks {
        let v = &vf.slices[&i].v;
        for j in (1..nx - 1).step_by((nx / 8).max(1)) {
            for k in (0..nx1).step_by((nx1 / 8).max(1)) {
                let (vx, vxx, vq) = central(v, nx, nx1, j, k, cfg.dx(), cfg.dx1());
                probes.push(X2Probe {
                    t: vf.time(i),
                    x: vf.x(j),
                    x1: vf.x1(k),
                    args: GArgs { k: -v[j * nx1 + k], p: -vx, r: -vxx, q: -vq },
                });
            }
        }
    }
    Ok(check_x2_independence(co, driver, domain, vf.variant, cfg.delay, &probes, scale)?.worst)
}

/// Candidate for [`jet_membership`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Candidate<T> {
    /// Full `(Theta, p, q, P)` in the parabolic super/sub-jet.
    Full(Jet<T>),
    /// First-order x-slope only.
    Slope(T),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Super,
    Sub,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Membership {
    pub pass: bool,
    /// Largest normalized violation; `<= tol` means member.
    pub worst: f64,
    pub n_checked: usize,
}

/// Test a candidate against the one-sided Taylor inequality over grid
/// neighbors within `radius` cells.
pub fn jet_membership<T: Scalar>(
    vf: &GridValueFunction<T>,
    t: T,
    x: T,
    x1: T,
    candidate: Candidate<T>,
    side: Side,
    radius: usize,
    tol: f64,
) -> Result<Membership> {
    if radius < 1 {
        return Err(Error::Config("membership radius must be at least one cell".into()));
    }
    vf.check_point(x, x1)?;
    let sign = match side {
        Side::Super => 1.0,
        Side::Sub => -1.0,
    };
    let mut worst = f64::NEG_INFINITY;
    let mut n_checked = 0;
    match candidate {
        Candidate::Slope(p) => {
            let i = vf.nearest_slice(t);
            let v = &vf.slices[&i].v;
            let v0 = vf.bilinear(v, x, x1).as_f64();
            let dx = vf.cfg.dx().as_f64();
            let (lo, hi) = (vf.x(0).as_f64(), vf.x(vf.cfg.nx - 1).as_f64());
            for r in 1..=radius {
                for dir in [-1.0, 1.0] {
                    let h = dir * r as f64 * dx;
                    let xp = x.as_f64() + h;
                    if xp < lo || xp > hi {
                        continue;
                    }
                    let vp = vf.bilinear(v, c(xp), x1).as_f64();
                    let res = sign * (vp - v0 - p.as_f64() * h) / h.abs();
                    worst = worst.max(res);
                    n_checked += 1;
                }
            }
        }
        Candidate::Full(jet) => {
            let i = vf.pair_index(t);
            let v0 = vf.local_value(t, x, x1)?.as_f64();
            let (j0, k0) = vf.nearest_node(x, x1);
            let ti = vf.time(i).as_f64();
            for ii in [i, i + 1] {
                let v = &vf.slices[&ii].v;
                let ds = vf.time(ii).as_f64() - ti;
                for j in j0.saturating_sub(radius)..=(j0 + radius).min(vf.cfg.nx - 1) {
                    for k in k0.saturating_sub(radius)..=(k0 + radius).min(vf.cfg.nx1 - 1) {
                        let dxv = vf.x(j).as_f64() - x.as_f64();
                        let dkv = vf.x1(k).as_f64() - x1.as_f64();
                        let rho = ds.abs() + dxv * dxv + dkv * dkv;
                        if rho < 1e-14 {
                            continue;
                        }
                        let model = v0
                            + jet.theta.as_f64() * ds
                            + jet.p.as_f64() * dxv
                            + 0.5 * jet.pp.as_f64() * dxv * dxv
                            + jet.q.as_f64() * dkv;
                        let res = sign * (v[vf.at(j, k)].as_f64() - model) / rho;
                        worst = worst.max(res);
                        n_checked += 1;
                    }
                }
            }
        }
    }
    if n_checked == 0 {
        return Err(Error::Boundary("empty membership neighborhood".into()));
    }
    Ok(Membership { pass: worst <= tol, worst, n_checked })
}

/// Curvature test separating smooth points from kinks: `|P| <= 0.25 / dx`.
pub fn is_smooth<T: Scalar>(jet: &Jet<T>, dx: T) -> bool {
    jet.pp.abs().as_f64() <= 0.25 / dx.as_f64()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ViscosityResidual {
    /// Largest positive part of `-Theta + sup_u G`.
    pub max_sub: f64,
    /// Largest negative part, as a magnitude.
    pub max_super: f64,
    pub n_points: usize,
}

/// `-Theta + sup_u G(-V, -p, -P, -q)` at the given interior points.
pub fn viscosity_residual<T: Scalar>(
    vf: &GridValueFunction<T>,
    co: &dyn Coefficients<T>,
    driver: Option<&LinearDriver<T>>,
    domain: &ControlDomain<T>,
    points: &[(T, T, T)],
) -> Result<ViscosityResidual> {
    require_driver(vf.variant, driver)?;
    let us = domain.points();
    let mut out = ViscosityResidual::default();
    for &(t, x, x1) in points {
        let jet = vf.extract_jet(t, x, x1)?;
        let v = vf.local_value(t, x, x1)?;
        let ti = vf.time(vf.pair_index(t));
        let pt = Point { t: ti, x, x1, x2: T::zero(), u: T::zero() };
        let args = GArgs { k: -v, p: -jet.p, r: -jet.pp, q: -jet.q };
        let r = (-jet.theta + sup_g(vf.variant, pt, &args, co, vf.cfg.delay, driver, &us)).as_f64();
        out.max_sub = out.max_sub.max(r);
        out.max_super = out.max_super.max(-r);
        out.n_points += 1;
    }
    Ok(out)
}

/// Interior nodes of every `every`-th stored jet slice, restricted to the
/// central `frac` of each axis.
pub fn interior_nodes<T: Scalar>(vf: &GridValueFunction<T>, frac: f64, every: usize) -> Vec<(T, T, T)> {
    let n = vf.cfg.n_slices;
    let mut out = Vec::new();
    let starts: Vec<usize> =
        vf.slices.keys().copied().filter(|&i| i < n && vf.slices.contains_key(&(i + 1))).collect();
    for (m, i) in starts.into_iter().enumerate() {
        if m % every.max(1) != 0 {
            continue;
        }
        for j in 1..vf.cfg.nx - 1 {
            for k in 0..vf.cfg.nx1 {
                let (x, x1) = (vf.x(j), vf.x1(k));
                if vf.in_core(x, x1, frac) {
                    out.push((vf.time(i), x, x1));
                }
            }
        }
    }
    out
}

/// Feedback control read from the grid argmax.
pub struct GridFeedback<'a, T> {
    pub vf: &'a GridValueFunction<T>,
    pub domain: ControlDomain<T>,
}

impl<T: Scalar> ControlPolicy<T> for GridFeedback<'_, T> {
    fn control(&self, _: usize, _: usize, t: T, s: &DelayedState<T>) -> T {
        self.domain.clamp(self.vf.interp_control(t, s.x, s.x1))
    }
}
