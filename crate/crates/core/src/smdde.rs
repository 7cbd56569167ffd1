//! Euler-Maruyama simulation of the mixed-delay forward equation, the coupled
//! comparison harness and the moment-bound harness.

use std::io::Write;

use rayon::prelude::*;

use crate::coeffs::{Coefficients, Point};
use crate::control::{ConstantControl, ControlPolicy};
use crate::error::{Error, Result};
use crate::grid::{HistoryPath, TimeGrid, X1Slider};
use crate::hamiltonian::DelayedState;
use crate::noise::NoiseSource;
use crate::scalar::{c, Scalar};
use crate::stats::MeanAcc;

/// Paths beyond this magnitude are treated as diverged.
pub const DIVERGENCE_CAP: f64 = 1e12;

/// Monte Carlo paths on a shared grid, stored path-major.
///
/// Per-step arrays hold `n_steps + 1` values per path; `dw` holds `n_steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBundle<T> {
    pub grid: TimeGrid<T>,
    pub n_paths: usize,
    pub history: HistoryPath<T>,
    pub x: Vec<T>,
    pub x1: Vec<T>,
    pub x2: Vec<T>,
    pub u: Vec<T>,
    pub dw: Vec<T>,
    pub y: Option<Vec<T>>,
    pub z: Option<Vec<T>>,
    /// `true` when the paths were generated by a drift-shifted (measure-changed) bundle.
    pub shifted_measure: bool,
}

impl<T: Scalar> TrajectoryBundle<T> {
    #[inline]
    pub fn stride(&self) -> usize {
        self.grid.n_steps() + 1
    }

    #[inline]
    pub fn idx(&self, path: usize, step: usize) -> usize {
        path * self.stride() + step
    }

    #[inline]
    pub fn state(&self, path: usize, step: usize) -> DelayedState<T> {
        let k = self.idx(path, step);
        DelayedState { x: self.x[k], x1: self.x1[k], x2: self.x2[k] }
    }

    #[inline]
    pub fn point(&self, path: usize, step: usize) -> Point<T> {
        let k = self.idx(path, step);
        Point {
            t: self.grid.time(step),
            x: self.x[k],
            x1: self.x1[k],
            x2: self.x2[k],
            u: self.u[k],
        }
    }

    #[inline]
    pub fn dw(&self, path: usize, step: usize) -> T {
        self.dw[path * self.grid.n_steps() + step]
    }

    /// `X` at a possibly negative index; negative indices read the history.
    pub fn x_signed(&self, path: usize, i: isize) -> T {
        if i < 0 {
            let m = self.grid.delay_steps() as isize;
            self.history.samples()[(m + i) as usize]
        } else {
            self.x[self.idx(path, i as usize)]
        }
    }

    /// Values of a path-major field at one step, in path order.
    pub fn column(&self, field: &[T], step: usize) -> Vec<T> {
        let st = self.stride();
        (0..self.n_paths).map(|p| field[p * st + step]).collect()
    }

    /// Paths restricted to the first `keep` of them.
    pub fn truncated(&self, keep: usize) -> Self {
        let keep = keep.min(self.n_paths);
        let st = self.stride();
        let n = self.grid.n_steps();
        let cut = |v: &Vec<T>| v[..keep * st].to_vec();
        Self {
            grid: self.grid,
            n_paths: keep,
            history: self.history.clone(),
            x: cut(&self.x),
            x1: cut(&self.x1),
            x2: cut(&self.x2),
            u: cut(&self.u),
            dw: self.dw[..keep * n].to_vec(),
            y: self.y.as_ref().map(cut),
            z: self.z.as_ref().map(cut),
            shifted_measure: self.shifted_measure,
        }
    }

    /// Dump the first `paths` paths as `path,step,t,X,X1,X2`.
    pub fn write_csv<W: Write>(&self, mut w: W, paths: usize) -> std::io::Result<()> {
        writeln!(w, "path,step,t,X,X1,X2")?;
        for p in 0..paths.min(self.n_paths) {
            for i in 0..self.stride() {
                let k = self.idx(p, i);
                writeln!(
                    w,
                    "{p},{i},{},{},{},{}",
                    self.grid.time(i).as_f64(),
                    self.x[k].as_f64(),
                    self.x1[k].as_f64(),
                    self.x2[k].as_f64()
                )?;
            }
        }
        Ok(())
    }
}

/// One-path Euler-Maruyama kernel.
///
/// `xs` has length `m + n_steps + 1` with `xs[m + i] = X[i]`; entries up to and
/// including `start` must be filled by the caller. Outputs are written for
/// steps `start..=n_steps`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_path<T: Scalar>(
    co: &dyn Coefficients<T>,
    ctl: &dyn ControlPolicy<T>,
    grid: &TimeGrid<T>,
    path: usize,
    start: usize,
    x1_start: Option<T>,
    dw: &[T],
    xs: &mut [T],
    out_x1: &mut [T],
    out_u: &mut [T],
) -> Result<()> {
    let m = grid.delay_steps();
    let n = grid.n_steps();
    let dt = grid.dt();
    let cap = c::<T>(DIVERGENCE_CAP);
    let mut slider = X1Slider::new(co.lambda(), dt, m);
    // Replay the slider from the last absolute anchor so that a run started
    // mid-path reproduces the base run bit for bit on unchanged inputs.
    let a = start - start % m;
    let mut x1 = slider.anchor(&xs[a..=a + m]);
    for i in a..start {
        x1 = slider.advance(xs[i], xs[i + 1], xs[m + i + 1]);
    }
    if let Some(v) = x1_start {
        x1 = v;
    }
    for i in start..=n {
        let t = grid.time(i);
        let st = DelayedState { x: xs[m + i], x1, x2: xs[i] };
        let u = ctl.control(path, i, t, &st);
        out_x1[i] = x1;
        out_u[i] = u;
        if i == n {
            break;
        }
        let p = st.at(t, u);
        let xn = st.x + co.b(&p) * dt + co.sigma(&p) * dw[i];
        if !xn.is_finite() || xn.abs() > cap {
            return Err(Error::Divergence { path, step: i + 1, value: xn.as_f64() });
        }
        xs[m + i + 1] = xn;
        x1 = if (i + 1) % m == 0 {
            slider.anchor(&xs[i + 1..=i + 1 + m])
        } else {
            slider.advance(xs[i], xs[i + 1], xn)
        };
    }
    Ok(())
}

/// Simulate from caller-supplied increments (`n_paths * n_steps`, path-major).
pub fn simulate_from_increments<T: Scalar>(
    co: &dyn Coefficients<T>,
    history: &HistoryPath<T>,
    control: &dyn ControlPolicy<T>,
    grid: &TimeGrid<T>,
    dw: Vec<T>,
    n_paths: usize,
) -> Result<TrajectoryBundle<T>> {
    history.check_grid(grid)?;
    let n = grid.n_steps();
    if dw.len() != n_paths * n {
        return Err(Error::Config("increment array has the wrong length".into()));
    }
    let m = grid.delay_steps();
    let st = n + 1;
    let mut x = vec![T::zero(); n_paths * st];
    let mut x1 = vec![T::zero(); n_paths * st];
    let mut x2 = vec![T::zero(); n_paths * st];
    let mut u = vec![T::zero(); n_paths * st];
    let hist = history.samples();

    let results: Vec<Result<()>> = (
        x.par_chunks_mut(st),
        x1.par_chunks_mut(st),
        x2.par_chunks_mut(st),
        u.par_chunks_mut(st),
        dw.par_chunks(n.max(1)),
    )
        .into_par_iter()
        .enumerate()
        .map_init(
            || vec![T::zero(); m + n + 1],
            |xs, (path, (px, px1, px2, pu, pdw))| {
                xs[..=m].copy_from_slice(hist);
                run_path(co, control, grid, path, 0, None, pdw, xs, px1, pu)?;
                px.copy_from_slice(&xs[m..]);
                px2.copy_from_slice(&xs[..=n]);
                Ok(())
            },
        )
        .collect();
    if let Some(e) = results.into_iter().find_map(|r| r.err()) {
        return Err(e);
    }
    Ok(TrajectoryBundle {
        grid: *grid,
        n_paths,
        history: history.clone(),
        x,
        x1,
        x2,
        u,
        dw,
        y: None,
        z: None,
        shifted_measure: co.girsanov_loading(grid.s()).is_some(),
    })
}

/// Increments for paths `0..n_paths` of `noise`.
pub fn draw_increments<T: Scalar>(noise: &NoiseSource, grid: &TimeGrid<T>, n_paths: usize) -> Vec<T> {
    let n = grid.n_steps();
    let mut dw = vec![T::zero(); n_paths * n];
    if n > 0 {
        dw.par_chunks_mut(n)
            .enumerate()
            .for_each(|(p, row)| noise.fill_increments(p, grid.dt(), row));
    }
    dw
}

/// Euler-Maruyama simulation of `n_paths` paths.
pub fn simulate_smdde<T: Scalar>(
    co: &dyn Coefficients<T>,
    history: &HistoryPath<T>,
    control: &dyn ControlPolicy<T>,
    grid: &TimeGrid<T>,
    noise: &NoiseSource,
    n_paths: usize,
) -> Result<TrajectoryBundle<T>> {
    history.check_grid(grid)?;
    let dw = draw_increments(noise, grid, n_paths);
    simulate_from_increments(co, history, control, grid, dw, n_paths)
}

/// Outcome of a coupled two-system run.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub n_paths: usize,
    pub tol: f64,
    /// Hypothesis failures found at sampled points; empty when all hold.
    pub hypothesis_violations: Vec<String>,
    /// Fraction of paths with `X1 < X2 - tol`, per grid step.
    pub violation_fraction: Vec<f64>,
    /// Paths violating at some step.
    pub violating_paths: usize,
    /// Largest `X2 - X1` seen (negative when strictly ordered everywhere).
    pub worst_gap: f64,
}

impl ComparisonReport {
    pub fn hypotheses_ok(&self) -> bool {
        self.hypothesis_violations.is_empty()
    }

    pub fn max_fraction(&self) -> f64 {
        self.violation_fraction.iter().cloned().fold(0.0, f64::max)
    }
}

const HYPOTHESIS_SAMPLES: usize = 2000;

fn check_comparison_hypotheses<T: Scalar>(
    co1: &dyn Coefficients<T>,
    co2: &dyn Coefficients<T>,
    h1: &HistoryPath<T>,
    h2: &HistoryPath<T>,
    grid: &TimeGrid<T>,
    noise: &NoiseSource,
) -> Vec<String> {
    let mut out = Vec::new();
    if h1.samples().iter().zip(h2.samples()).any(|(a, b)| a < b) {
        out.push("initial segments are not ordered".into());
    }
    let mut rs = noise.derive(0xC0_4D).uniform_stream(0);
    let (t0, t1) = (grid.s().as_f64(), grid.horizon().as_f64());
    let mut seen = [false; 5];
    for _ in 0..HYPOTHESIS_SAMPLES {
        let p = Point::new(
            c::<T>(rs.range(t0, t1.max(t0 + 1e-12))),
            c(rs.range(-3.0, 3.0)),
            c(rs.range(-3.0, 3.0)),
            c(rs.range(-3.0, 3.0)),
            T::zero(),
        );
        let (b1, b2) = (co1.b(&p).as_f64(), co2.b(&p).as_f64());
        let (s1, s2) = (co1.sigma(&p).as_f64(), co2.sigma(&p).as_f64());
        let g1 = co1.b_grad(&p);
        let (sg1, sg2) = (co1.sigma_grad(&p), co2.sigma_grad(&p));
        let checks = [
            (b1 < b2 - 1e-12 * (1.0 + b2.abs()), format!("b1 < b2 at {p:?}")),
            (g1.x2 < T::zero(), format!("b1 decreasing in x2 at {p:?}")),
            ((s1 - s2).abs() > 1e-12 * (1.0 + s1.abs()), format!("sigma1 != sigma2 at {p:?}")),
            (
                co1.b_grad(&p).x1 != T::zero() || co2.b_grad(&p).x1 != T::zero(),
                "drift depends on x1".to_string(),
            ),
            (
                sg1.x1 != T::zero() || sg1.x2 != T::zero() || sg2.x1 != T::zero() || sg2.x2 != T::zero(),
                "volatility depends on a delay term".to_string(),
            ),
        ];
        for (k, (bad, msg)) in checks.into_iter().enumerate() {
            if bad && !seen[k] {
                seen[k] = true;
                out.push(msg);
            }
        }
    }
    out
}

const BLOCK: usize = 1024;

/// Simulate two systems on identical increments and measure ordering violations.
///
/// Paths are streamed in blocks; the first `keep` paths of each system are
/// returned as bundles.
#[allow(clippy::too_many_arguments)]
pub fn simulate_coupled_pair<T: Scalar>(
    co1: &dyn Coefficients<T>,
    co2: &dyn Coefficients<T>,
    h1: &HistoryPath<T>,
    h2: &HistoryPath<T>,
    grid: &TimeGrid<T>,
    noise: &NoiseSource,
    n_paths: usize,
    tol: f64,
    keep: usize,
) -> Result<(TrajectoryBundle<T>, TrajectoryBundle<T>, ComparisonReport)> {
    h1.check_grid(grid)?;
    h2.check_grid(grid)?;
    let hypothesis_violations = check_comparison_hypotheses(co1, co2, h1, h2, grid, noise);
    let n = grid.n_steps();
    let m = grid.delay_steps();
    let ctl = ConstantControl(T::zero());
    let n_blocks = n_paths.div_ceil(BLOCK);

    let partial: Vec<Result<(Vec<u64>, usize, f64)>> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let mut counts = vec![0u64; n + 1];
            let mut bad_paths = 0usize;
            let mut worst = f64::NEG_INFINITY;
            let mut dw = vec![T::zero(); n];
            let mut xa = vec![T::zero(); m + n + 1];
            let mut xb = vec![T::zero(); m + n + 1];
            let mut s1 = vec![T::zero(); n + 1];
            let mut s2 = vec![T::zero(); n + 1];
            for path in b * BLOCK..((b + 1) * BLOCK).min(n_paths) {
                noise.fill_increments(path, grid.dt(), &mut dw);
                xa[..=m].copy_from_slice(h1.samples());
                xb[..=m].copy_from_slice(h2.samples());
                run_path(co1, &ctl, grid, path, 0, None, &dw, &mut xa, &mut s1, &mut s2)?;
                run_path(co2, &ctl, grid, path, 0, None, &dw, &mut xb, &mut s1, &mut s2)?;
                let mut any = false;
                for i in 0..=n {
                    let gap = (xb[m + i] - xa[m + i]).as_f64();
                    worst = worst.max(gap);
                    if gap > tol {
                        counts[i] += 1;
                        any = true;
                    }
                }
                bad_paths += any as usize;
            }
            Ok((counts, bad_paths, worst))
        })
        .collect();

    let mut counts = vec![0u64; n + 1];
    let mut violating_paths = 0;
    let mut worst_gap = f64::NEG_INFINITY;
    for r in partial {
        let (cnt, bad, w) = r?;
        for (a, b) in counts.iter_mut().zip(cnt) {
            *a += b;
        }
        violating_paths += bad;
        worst_gap = worst_gap.max(w);
    }
    let report = ComparisonReport {
        n_paths,
        tol,
        hypothesis_violations,
        violation_fraction: counts.iter().map(|&k| k as f64 / n_paths.max(1) as f64).collect(),
        violating_paths,
        worst_gap,
    };
    let keep = keep.min(n_paths);
    let b1 = simulate_smdde(co1, h1, &ctl, grid, noise, keep)?;
    let b2 = simulate_smdde(co2, h2, &ctl, grid, noise, keep)?;
    Ok((b1, b2, report))
}

/// Both sides of the moment bound `E sup|X|^p <= C (...)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentEstimate {
    pub p: u32,
    /// Monte Carlo estimate of `E sup_{[s - delta, T]} |X|^p`.
    pub lhs: f64,
    pub lhs_se: f64,
    /// `sup|phi|^p`, `(int |b(r,0,0,0)| dr)^p`, `(int sigma(r,0,0,0)^2 dr)^{p/2}`.
    pub rhs_terms: [f64; 3],
    pub n_used: usize,
    pub n_diverged: usize,
}

impl MomentEstimate {
    pub fn rhs(&self) -> f64 {
        self.rhs_terms.iter().sum()
    }

    /// `lhs / rhs`; infinite when the right side vanishes but the left does not.
    pub fn ratio(&self) -> f64 {
        let r = self.rhs();
        if r > 0.0 {
            self.lhs / r
        } else if self.lhs == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

/// Estimate the moment bound for each even `p` in `ps` from one set of paths.
#[allow(clippy::too_many_arguments)]
pub fn estimate_moment_bound<T: Scalar>(
    co: &dyn Coefficients<T>,
    history: &HistoryPath<T>,
    control: &dyn ControlPolicy<T>,
    grid: &TimeGrid<T>,
    noise: &NoiseSource,
    ps: &[u32],
    n_paths: usize,
) -> Result<Vec<MomentEstimate>> {
    history.check_grid(grid)?;
    if ps.is_empty() || ps.iter().any(|p| *p < 2 || p % 2 == 1) {
        return Err(Error::Config("moment orders must be even integers >= 2".into()));
    }
    let n = grid.n_steps();
    let m = grid.delay_steps();
    let n_blocks = n_paths.div_ceil(BLOCK);

    let partial: Vec<(Vec<MeanAcc>, usize)> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let mut acc = vec![MeanAcc::default(); ps.len()];
            let mut diverged = 0usize;
            let mut dw = vec![T::zero(); n];
            let mut xs = vec![T::zero(); m + n + 1];
            let mut s1 = vec![T::zero(); n + 1];
            let mut s2 = vec![T::zero(); n + 1];
            for path in b * BLOCK..((b + 1) * BLOCK).min(n_paths) {
                noise.fill_increments(path, grid.dt(), &mut dw);
                xs[..=m].copy_from_slice(history.samples());
                if run_path(co, control, grid, path, 0, None, &dw, &mut xs, &mut s1, &mut s2).is_err() {
                    diverged += 1;
                    continue;
                }
                let sup = xs.iter().fold(0.0f64, |a, v| a.max(v.as_f64().abs()));
                for (k, p) in ps.iter().enumerate() {
                    acc[k].push(sup.powi(*p as i32));
                }
            }
            (acc, diverged)
        })
        .collect();

    let mut acc = vec![MeanAcc::default(); ps.len()];
    let mut n_diverged = 0;
    for (a, d) in partial {
        for (tot, part) in acc.iter_mut().zip(a) {
            tot.merge(&part);
        }
        n_diverged += d;
    }

    // Deterministic right-hand ingredients along the zero state.
    let zero = DelayedState::default();
    let (mut ib, mut is2) = (0.0f64, 0.0f64);
    for i in 0..n {
        let t = grid.time(i);
        let u = control.control(0, i, t, &zero);
        let p = zero.at(t, u);
        ib += co.b(&p).as_f64().abs() * grid.dt().as_f64();
        is2 += co.sigma(&p).as_f64().powi(2) * grid.dt().as_f64();
    }
    let sup_phi = history.sup_abs().as_f64();
    Ok(ps
        .iter()
        .zip(acc)
        .map(|(&p, a)| MomentEstimate {
            p,
            lhs: a.mean(),
            lhs_se: a.std_error(),
            rhs_terms: [sup_phi.powi(p as i32), ib.powi(p as i32), is2.powf(p as f64 / 2.0)],
            n_used: a.count(),
            n_diverged,
        })
        .collect())
}
