//! Coupled perturbation runs: the variational process, its remainders, the
//! duality processes and the scaling regressions.

use std::io::Write;

use crate::adjoint::AdjointBundle;
use crate::bsde::solve_bsde_lsmc;
use crate::coeffs::{Coefficients, Point, StateGrad};
use crate::control::Pathwise;
use crate::error::{Error, Result};
use crate::hamiltonian::gauss_legendre_8;
use crate::lsmc::{RegressionBasis, Scheme};
use crate::scalar::Scalar;
use crate::smdde::{run_path, TrajectoryBundle};
use crate::stats::{loglog_slope, MeanAcc};

/// Perturbed run started from `X(t) = X*(t) + h`, `X1(t) = X1*(t)`, with the
/// base increments and the base control replayed pathwise.
#[derive(Debug, Clone)]
pub struct VariationRun<T> {
    pub step: usize,
    pub h: T,
    /// Perturbed forward paths; identical to the base before `step`.
    pub perturbed: TrajectoryBundle<T>,
    /// `X-hat`, `X1-hat`, `X2-hat` (zero before `step`).
    pub xh: Vec<T>,
    pub x1h: Vec<T>,
    pub x2h: Vec<T>,
    /// Drift and diffusion remainders (zero before `step`).
    pub eps1: Vec<T>,
    pub eps2: Vec<T>,
}

fn averaged<T: Scalar>(
    grad: impl Fn(&Point<T>) -> StateGrad<T>,
    base: &Point<T>,
    dx: T,
    dx1: T,
    dx2: T,
    nodes: &[(T, T); 8],
) -> StateGrad<T> {
    let mut g = StateGrad::default();
    for &(th, w) in nodes {
        let p = Point { x: base.x + th * dx, x1: base.x1 + th * dx1, x2: base.x2 + th * dx2, ..*base };
        let d = grad(&p);
        g.x += w * d.x;
        g.x1 += w * d.x1;
        g.x2 += w * d.x2;
    }
    g
}

/// Coupled perturbed run and its remainders at offset `h` from grid step `step`.
pub fn simulate_variation<T: Scalar>(
    base: &TrajectoryBundle<T>,
    step: usize,
    h: T,
    co: &dyn Coefficients<T>,
) -> Result<VariationRun<T>> {
    let n = base.grid.n_steps();
    if step >= n {
        return Err(Error::Config(format!("perturbation step {step} leaves no room before T (n = {n})")));
    }
    let m = base.grid.delay_steps();
    let st = base.stride();
    let ctl = Pathwise::new(base.u.clone(), st);
    let mut pert = base.clone();
    pert.y = None;
    pert.z = None;
    let mut xs = vec![T::zero(); m + n + 1];
    for p in 0..base.n_paths {
        for (j, v) in xs.iter_mut().enumerate() {
            *v = base.x_signed(p, j as isize - m as isize);
        }
        xs[m + step] += h;
        let k0 = p * st;
        let x1_star = base.x1[k0 + step];
        let dw = &base.dw[p * n..(p + 1) * n];
        run_path(
            co,
            &ctl,
            &base.grid,
            p,
            step,
            Some(x1_star),
            dw,
            &mut xs,
            &mut pert.x1[k0..k0 + st],
            &mut pert.u[k0..k0 + st],
        )?;
        for i in step..=n {
            pert.x[k0 + i] = xs[m + i];
            pert.x2[k0 + i] = xs[i];
        }
    }

    let len = base.n_paths * st;
    let mut xh = vec![T::zero(); len];
    let mut x1h = vec![T::zero(); len];
    let mut x2h = vec![T::zero(); len];
    let mut eps1 = vec![T::zero(); len];
    let mut eps2 = vec![T::zero(); len];
    let nodes = gauss_legendre_8::<T>();
    for p in 0..base.n_paths {
        for i in step..=n {
            let k = p * st + i;
            let (a, b, c2) = (pert.x[k] - base.x[k], pert.x1[k] - base.x1[k], pert.x2[k] - base.x2[k]);
            xh[k] = a;
            x1h[k] = b;
            x2h[k] = c2;
            if !a.is_finite() || !b.is_finite() {
                return Err(Error::Divergence { path: p, step: i, value: a.as_f64() });
            }
            let pt = base.point(p, i);
            let bs = co.b_grad(&pt);
            let ss = co.sigma_grad(&pt);
            let bt = averaged(|q| co.b_grad(q), &pt, a, b, c2, &nodes);
            let stt = averaged(|q| co.sigma_grad(q), &pt, a, b, c2, &nodes);
            eps1[k] = (bt.x - bs.x) * a + (bt.x1 - bs.x1) * b + (bt.x2 - bs.x2) * c2;
            eps2[k] = (stt.x - ss.x) * a + (stt.x1 - ss.x1) * b + (stt.x2 - ss.x2) * c2;
        }
    }
    Ok(VariationRun { step, h, perturbed: pert, xh, x1h, x2h, eps1, eps2 })
}

/// One row of the scaling table.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingRow {
    pub quantity: String,
    pub offset: f64,
    pub estimate: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    /// Fitted log-log slope per quantity; `None` when fewer than two
    /// estimates are positive.
    pub slopes: Vec<(String, Option<f64>)>,
}

impl ScalingReport {
    pub fn slope(&self, quantity: &str) -> Option<f64> {
        self.slopes.iter().find(|(q, _)| q == quantity).and_then(|(_, s)| *s)
    }

    pub fn push(&mut self, quantity: &str, offset: f64, (estimate, std_error): (f64, f64)) {
        self.rows.push(ScalingRow { quantity: quantity.into(), offset, estimate, std_error });
    }

    /// Fit slopes for every quantity present in the rows.
    pub fn fit(&mut self) {
        let mut names: Vec<String> = Vec::new();
        for r in &self.rows {
            if !names.contains(&r.quantity) {
                names.push(r.quantity.clone());
            }
        }
        self.slopes = names
            .into_iter()
            .map(|q| {
                let (x, y): (Vec<f64>, Vec<f64>) =
                    self.rows.iter().filter(|r| r.quantity == q).map(|r| (r.offset, r.estimate)).unzip();
                let s = loglog_slope(&x, &y);
                (q, s)
            })
            .collect();
    }

    /// `quantity,offset,estimate,std_error`, then `# slope` comment lines.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "quantity,offset,estimate,std_error")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{}", r.quantity, r.offset, r.estimate, r.std_error)?;
        }
        for (q, s) in &self.slopes {
            match s {
                Some(v) => writeln!(w, "# slope,{q},{v}")?,
                None => writeln!(w, "# slope,{q},NA")?,
            }
        }
        Ok(())
    }
}

/// Check the offset set: at least three positive values spanning a factor 4.
pub fn validate_offsets<T: Scalar>(offsets: &[T]) -> Result<()> {
    if offsets.len() < 3 {
        return Err(Error::Config(format!("need at least 3 offsets, got {}", offsets.len())));
    }
    let v: Vec<f64> = offsets.iter().map(|o| o.as_f64().abs()).collect();
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(0.0, f64::max);
    if !(lo > 0.0) || hi / lo < 4.0 - 1e-12 {
        return Err(Error::Config(format!("offsets must be non-zero and span a factor >= 4 (got {lo}..{hi})")));
    }
    Ok(())
}

/// Sample statistics of one run: `E sup|X-hat|^p`, `E sup|X1-hat|^p`,
/// `E sup|X2-hat|^p`, `E int |eps1|^p`, `E int |eps2|^p`, `E int (|eps1|^p + |eps2|^p)`.
pub fn run_statistics<T: Scalar>(run: &VariationRun<T>, p: u32) -> [(f64, f64); 6] {
    let b = &run.perturbed;
    let st = b.stride();
    let n = b.grid.n_steps();
    let dt = b.grid.dt().as_f64();
    let pw = |v: T| v.as_f64().abs().powi(p as i32);
    let mut acc: [MeanAcc; 6] = Default::default();
    for path in 0..b.n_paths {
        let mut sup = [0.0f64; 3];
        let mut int = [0.0f64; 2];
        for i in run.step..=n {
            let k = path * st + i;
            sup[0] = sup[0].max(pw(run.xh[k]));
            sup[1] = sup[1].max(pw(run.x1h[k]));
            sup[2] = sup[2].max(pw(run.x2h[k]));
            if i < n {
                int[0] += pw(run.eps1[k]) * dt;
                int[1] += pw(run.eps2[k]) * dt;
            }
        }
        for d in 0..3 {
            acc[d].push(sup[d]);
        }
        acc[3].push(int[0]);
        acc[4].push(int[1]);
        acc[5].push(int[0] + int[1]);
    }
    let mut out = [(0.0, 0.0); 6];
    for (o, a) in out.iter_mut().zip(&acc) {
        *o = (a.mean(), a.std_error());
    }
    out
}

/// Quantity names of [`run_statistics`], in order.
pub const REMAINDER_QUANTITIES: [&str; 6] =
    ["sup_xhat", "sup_x1hat", "sup_x2hat", "int_eps1", "int_eps2", "int_eps"];

/// Log-log slopes of the remainder statistics against the offsets.
pub fn remainder_scaling<T: Scalar>(
    base: &TrajectoryBundle<T>,
    step: usize,
    offsets: &[T],
    p: u32,
    co: &dyn Coefficients<T>,
) -> Result<ScalingReport> {
    validate_offsets(offsets)?;
    let mut rep = ScalingReport::default();
    for &h in offsets {
        let run = simulate_variation(base, step, h, co)?;
        let stats = run_statistics(&run, p);
        for (q, s) in REMAINDER_QUANTITIES.iter().zip(stats) {
            rep.push(q, h.as_f64().abs(), s);
        }
    }
    rep.fit();
    Ok(rep)
}

/// `Y-hat = p-tilde X-hat`, `Y-check = p-check X1-hat` and
/// `Y-tilde = -Y' + Y* - Y-hat - Y-check` from `step` on.
#[derive(Debug, Clone)]
pub struct DualityRun<T> {
    pub y_hat: Vec<T>,
    pub y_check: Vec<T>,
    pub y_tilde: Vec<T>,
    /// `E |Y-tilde(t)|` and its standard error.
    pub abs_y_tilde: (f64, f64),
    /// `E[-Y'(t) + Y*(t)]` and its standard error.
    pub value_increment: (f64, f64),
}

/// Solve the perturbed backward equation and form the duality processes.
pub fn duality_processes<T: Scalar>(
    base: &TrajectoryBundle<T>,
    adj: Option<&AdjointBundle<T>>,
    run: &VariationRun<T>,
    co: &dyn Coefficients<T>,
    basis: &RegressionBasis,
    scheme: Scheme,
) -> Result<DualityRun<T>> {
    let adj = adj.ok_or_else(|| Error::Config("transformed adjoints are required".into()))?;
    let y_star = base
        .y
        .as_ref()
        .ok_or_else(|| Error::Config("base bundle has no backward solution".into()))?;
    let mut pert = run.perturbed.clone();
    solve_bsde_lsmc(&mut pert, co, basis, scheme)?;
    let y_p = pert.y.as_ref().expect("set by solve_bsde_lsmc");
    let st = base.stride();
    let n = base.grid.n_steps();
    let len = base.n_paths * st;
    let mut y_hat = vec![T::zero(); len];
    let mut y_check = vec![T::zero(); len];
    let mut y_tilde = vec![T::zero(); len];
    let mut abs_acc = MeanAcc::default();
    let mut inc_acc = MeanAcc::default();
    for p in 0..base.n_paths {
        for i in run.step..=n {
            let k = p * st + i;
            y_hat[k] = adj.p_tilde[k] * run.xh[k];
            y_check[k] = adj.p_check[k] * run.x1h[k];
            y_tilde[k] = -y_p[k] + y_star[k] - y_hat[k] - y_check[k];
        }
        let k = p * st + run.step;
        abs_acc.push(y_tilde[k].as_f64().abs());
        inc_acc.push((y_star[k] - y_p[k]).as_f64());
    }
    Ok(DualityRun {
        y_hat,
        y_check,
        y_tilde,
        abs_y_tilde: (abs_acc.mean(), abs_acc.std_error()),
        value_increment: (inc_acc.mean(), inc_acc.std_error()),
    })
}

/// `E |Y-tilde(t)|` against the offsets at each perturbation step.
#[allow(clippy::too_many_arguments)]
pub fn duality_scaling<T: Scalar>(
    base: &TrajectoryBundle<T>,
    adj: &AdjointBundle<T>,
    steps: &[usize],
    offsets: &[T],
    co: &dyn Coefficients<T>,
    basis: &RegressionBasis,
    scheme: Scheme,
) -> Result<ScalingReport> {
    validate_offsets(offsets)?;
    let mut rep = ScalingReport::default();
    for &i in steps {
        let t = base.grid.time(i).as_f64();
        let name = format!("abs_ytilde_t{t}");
        for &h in offsets {
            let run = simulate_variation(base, i, h, co)?;
            let d = duality_processes(base, Some(adj), &run, co, basis, scheme)?;
            rep.push(&name, h.as_f64().abs(), d.abs_y_tilde);
        }
    }
    rep.fit();
    Ok(rep)
}
