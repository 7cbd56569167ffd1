use std::io::Write;

use delay_control::adjoint::{check_sufficient_mp, solve_adjoints, AdjointBundle, MpConfig};
use delay_control::bsde::{cost_functional_j, linear_driver_oracle, solve_bsde_lsmc, BackwardSolution};
use delay_control::connect::{
    check_duality_inclusion, girsanov_reduce, girsanov_weights, verify_optimality, DualityConfig, VerifyConfig,
};
use delay_control::control::{ConstantControl, ControlPolicy, Perturbed};
use delay_control::hamiltonian::LinearDriver;
use delay_control::hjb::{interior_nodes, solve_hjb, viscosity_residual, GridFeedback, GridValueFunction};
use delay_control::noise::NoiseSource;
use delay_control::report::{KeyValues, ToKeyValues};
use delay_control::smdde::{estimate_moment_bound, simulate_coupled_pair, simulate_smdde, TrajectoryBundle};
use delay_control::stats::mean_se;
use delay_control::variational::{duality_scaling, remainder_scaling, ScalingReport};
use delay_control::{Error, Result};

use crate::config::{family, Resolved, RunConfig};
use crate::{svg, Artifacts, Command};

/// What a successful run concluded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    /// Nothing to judge (simulation and solver runs).
    Done,
    Verdict(bool),
}

struct Run<'a> {
    cfg: &'a RunConfig,
    r: &'a Resolved,
    art: &'a mut Artifacts,
    kv: &'a mut KeyValues,
}

pub fn execute(cmd: Command, cfg: &RunConfig, r: &Resolved, art: &mut Artifacts, kv: &mut KeyValues) -> Result<Outcome> {
    let mut run = Run { cfg, r, art, kv };
    run.kv.put("instance", &cfg.instance.family);
    match cmd {
        Command::Simulate => run.simulate(),
        Command::SolveBsde => run.solve_bsde(),
        Command::SolveHjb => run.solve_hjb(),
        Command::CheckComparison => run.comparison(),
        Command::CheckMoments => run.moments(),
        Command::CheckMp => run.mp(),
        Command::CheckDuality => run.duality(),
        Command::CheckScaling => run.scaling(),
        Command::Verify => run.verify(),
        Command::Girsanov => run.girsanov(),
    }
}

impl Run<'_> {
    fn noise(&self) -> NoiseSource {
        NoiseSource::new(self.r.seed)
    }

    fn driver(&self) -> Result<LinearDriver<f64>> {
        LinearDriver::from_coefficients(&self.r.co, self.r.grid.s())
    }

    fn needs_grid(&self) -> bool {
        self.cfg.control.kind == "hjb"
    }

    fn value_function(&mut self) -> Result<GridValueFunction<f64>> {
        let drv = self.driver()?;
        let vf = solve_hjb(&self.r.co, Some(&drv), &self.r.domain, &self.r.hjb, self.r.variant)?;
        self.kv.extend_prefixed("hjb", &vf.to_kv());
        Ok(vf)
    }

    /// The configured control, borrowing the grid when it is HJB feedback.
    fn policy<'v>(&self, vf: Option<&'v GridValueFunction<f64>>) -> Box<dyn ControlPolicy<f64> + 'v> {
        let c = &self.cfg.control;
        let d = self.r.domain.clone();
        let base: Box<dyn ControlPolicy<f64> + 'v> = match c.kind.as_str() {
            "hjb" => Box::new(GridFeedback { vf: vf.expect("grid solved for hjb control"), domain: d.clone() }),
            "max" => Box::new(ConstantControl(d.upper())),
            "min" => Box::new(ConstantControl(d.lower())),
            _ => Box::new(ConstantControl(c.value)),
        };
        if c.perturb_shift == 0.0 {
            base
        } else {
            Box::new(Perturbed { base, shift: c.perturb_shift, from: c.perturb_from, to: c.perturb_to, domain: d })
        }
    }

    fn describe_control(&mut self) {
        let c = &self.cfg.control;
        let label = match c.kind.as_str() {
            "constant" => format!("constant {}", c.value),
            k => k.to_string(),
        };
        self.kv.put("control", label);
        if c.perturb_shift != 0.0 {
            self.kv.put("control_perturbation", format!("{} on [{}, {})", c.perturb_shift, c.perturb_from, c.perturb_to));
        }
    }

    fn simulate_with(&mut self, vf: Option<&GridValueFunction<f64>>) -> Result<TrajectoryBundle<f64>> {
        self.describe_control();
        let pol = self.policy(vf);
        simulate_smdde(&self.r.co, &self.r.history, &pol, &self.r.grid, &self.noise(), self.cfg.numerics.n_paths)
    }

    /// Grid (only when the control needs it) and forward bundle.
    fn forward(&mut self) -> Result<(Option<GridValueFunction<f64>>, TrajectoryBundle<f64>)> {
        let vf = if self.needs_grid() { Some(self.value_function()?) } else { None };
        let b = self.simulate_with(vf.as_ref())?;
        Ok((vf, b))
    }

    fn backward(&mut self, b: &mut TrajectoryBundle<f64>) -> Result<BackwardSolution> {
        let sol = solve_bsde_lsmc(b, &self.r.co, &self.r.basis, self.r.scheme)?;
        self.kv.extend_prefixed("bsde", &sol.to_kv());
        self.kv.put("J", cost_functional_j(&sol));
        Ok(sol)
    }

    fn adjoints(&mut self, b: &TrajectoryBundle<f64>) -> Result<AdjointBundle<f64>> {
        let adj = solve_adjoints(b, &self.r.co, &self.r.basis, self.r.scheme)?;
        self.kv.put("adjoint.p_tilde_start", adj.p_start[0]).put("adjoint.p_tilde_start_se", adj.p_start_se[0]);
        self.kv.put("adjoint.p3_max", adj.p3_max);
        for w in &adj.warnings {
            self.kv.put("adjoint.warning", w);
        }
        let n = b.grid.n_steps();
        self.art.csv("adjoint_means.csv", |w| {
            writeln!(w, "step,t,gamma,p1,p2,p3,q1,q2")?;
            for i in 0..=n {
                let mut s = [0.0f64; 6];
                for p in 0..b.n_paths {
                    let v = adj.vector(p, i);
                    for (a, x) in s.iter_mut().zip([v.gamma, v.p1, v.p2, v.p3, v.q1, v.q2]) {
                        *a += x;
                    }
                }
                let m = b.n_paths as f64;
                writeln!(
                    w,
                    "{i},{},{},{},{},{},{},{}",
                    b.grid.time(i),
                    s[0] / m,
                    s[1] / m,
                    s[2] / m,
                    s[3] / m,
                    s[4] / m,
                    s[5] / m
                )?;
            }
            Ok(())
        });
        Ok(adj)
    }

    fn paths_plot(&mut self, name: &str, b: &TrajectoryBundle<f64>, paths: usize) {
        if !self.cfg.output.plots {
            return;
        }
        let series: Vec<Vec<(f64, f64)>> = (0..paths.min(b.n_paths))
            .map(|p| (0..b.stride()).map(|i| (b.grid.time(i), b.x[b.idx(p, i)])).collect())
            .collect();
        self.art.add(name, svg::line_plot("X(t)", &series, "t", "X").into_bytes());
    }

    fn simulate(&mut self) -> Result<Outcome> {
        let (_, b) = self.forward()?;
        let n = b.grid.n_steps();
        let col = |f: &[f64]| mean_se((0..b.n_paths).map(|p| f[b.idx(p, n)]));
        let (mx, sx) = col(&b.x);
        let (m1, s1) = col(&b.x1);
        let (sup, sup_se) = mean_se((0..b.n_paths).map(|p| (0..=n).map(|i| b.x[b.idx(p, i)].abs()).fold(0.0, f64::max)));
        self.kv
            .put("n_paths", b.n_paths)
            .put("n_steps", n)
            .put("dt", b.grid.dt())
            .put("mean_X_T", mx)
            .put("se_X_T", sx)
            .put("mean_X1_T", m1)
            .put("se_X1_T", s1)
            .put("mean_sup_abs_X", sup)
            .put("se_sup_abs_X", sup_se);
        let keep = self.cfg.output.dump_paths;
        self.art.csv("paths.csv", |w| b.write_csv(w, keep));
        self.paths_plot("paths.svg", &b, keep);
        Ok(Outcome::Done)
    }

    fn solve_bsde(&mut self) -> Result<Outcome> {
        let (_, mut b) = self.forward()?;
        let sol = self.backward(&mut b)?;
        match linear_driver_oracle(&self.r.co, &b) {
            Ok((o, ose)) => {
                let se = (sol.se * sol.se + ose * ose).sqrt();
                self.kv
                    .put("oracle.y0", o)
                    .put("oracle.se", ose)
                    .put("oracle.abs_diff", (sol.y0 - o).abs())
                    .put("oracle.within_3se", (sol.y0 - o).abs() <= 3.0 * se);
            }
            Err(e) => {
                self.kv.put("oracle", format!("NA ({e})"));
            }
        }
        let y = b.y.as_ref().expect("solved");
        self.art.csv("backward.csv", |w| {
            writeln!(w, "step,t,Y_mean,Y_se")?;
            for i in 0..b.stride() {
                let (m, se) = mean_se((0..b.n_paths).map(|p| y[b.idx(p, i)]));
                writeln!(w, "{i},{},{m},{se}", b.grid.time(i))?;
            }
            Ok(())
        });
        Ok(Outcome::Done)
    }

    fn solve_hjb(&mut self) -> Result<Outcome> {
        let vf = self.value_function()?;
        let h = &self.r.history;
        let (x, x1) = (h.x(), h.x1(self.r.co.lambda, self.r.grid.dt()));
        self.kv.put("V_start", vf.interp_value(self.r.grid.s(), x, x1)).put("u_star_start", vf.interp_control(self.r.grid.s(), x, x1));
        let drv = self.driver()?;
        let pts = interior_nodes(&vf, self.cfg.verify.core_frac, self.cfg.verify.residual_every);
        let res = viscosity_residual(&vf, &self.r.co, Some(&drv), &self.r.domain, &pts)?;
        self.kv
            .put("residual.points", res.n_points)
            .put("residual.max_sub", res.max_sub)
            .put("residual.max_super", res.max_super);
        let every = self.cfg.output.hjb_every;
        self.art.csv("value.csv", |w| vf.write_csv(w, every));
        if self.cfg.output.plots {
            let first = vf.slices.values().next().expect("terminal slice is stored");
            let c = &vf.cfg;
            let map = svg::heat_map("V(s, x, x1)", &first.v, c.nx, c.nx1, (c.x_min, c.x_max), (c.x1_min, c.x1_max));
            self.art.add("value.svg", map.into_bytes());
        }
        Ok(Outcome::Done)
    }

    fn comparison(&mut self) -> Result<Outcome> {
        let c = &self.cfg.comparison;
        let mut co2 = family(&self.cfg.instance.family, self.cfg.instance.lambda).expect("family checked");
        self.cfg.instance.coeffs.apply(&mut co2);
        c.coeffs2.apply(&mut co2);
        let h2 = self.r.history.shifted(-c.history_gap);
        let tol = c.tol_dt * self.r.grid.dt();
        let (b1, b2, rep) = simulate_coupled_pair(
            &self.r.co,
            &co2,
            &self.r.history,
            &h2,
            &self.r.grid,
            &self.noise(),
            self.cfg.numerics.n_paths,
            tol,
            c.keep,
        )?;
        self.kv.extend_prefixed("comparison", &rep.to_kv());
        let keep = c.keep;
        self.art.csv("paths_1.csv", |w| b1.write_csv(w, keep));
        self.art.csv("paths_2.csv", |w| b2.write_csv(w, keep));
        let grid = &self.r.grid;
        self.art.csv("violations.csv", |w| {
            writeln!(w, "step,t,fraction")?;
            for (i, f) in rep.violation_fraction.iter().enumerate() {
                writeln!(w, "{i},{},{f}", grid.time(i))?;
            }
            Ok(())
        });
        if !rep.hypotheses_ok() {
            return Err(Error::Hypothesis(rep.hypothesis_violations.join("; ")));
        }
        Ok(Outcome::Verdict(rep.violating_paths == 0))
    }

    fn moments(&mut self) -> Result<Outcome> {
        let vf = if self.needs_grid() { Some(self.value_function()?) } else { None };
        self.describe_control();
        let pol = self.policy(vf.as_ref());
        let est = estimate_moment_bound(
            &self.r.co,
            &self.r.history,
            &pol,
            &self.r.grid,
            &self.noise(),
            &self.cfg.moments.orders,
            self.cfg.numerics.n_paths,
        )?;
        for e in &est {
            self.kv.extend_prefixed(&format!("p{}", e.p), &e.to_kv());
        }
        self.art.csv("moments.csv", |w| {
            writeln!(w, "p,lhs,lhs_se,rhs_history,rhs_drift,rhs_diffusion,rhs,ratio,n_used,n_diverged")?;
            for e in &est {
                let [a, b, c] = e.rhs_terms;
                writeln!(
                    w,
                    "{},{},{},{a},{b},{c},{},{},{},{}",
                    e.p,
                    e.lhs,
                    e.lhs_se,
                    e.rhs(),
                    e.ratio(),
                    e.n_used,
                    e.n_diverged
                )?;
            }
            Ok(())
        });
        Ok(Outcome::Verdict(est.iter().all(|e| e.ratio().is_finite() && e.n_diverged == 0)))
    }

    fn mp(&mut self) -> Result<Outcome> {
        let (_, mut b) = self.forward()?;
        self.backward(&mut b)?;
        let adj = self.adjoints(&b)?;
        let m = &self.cfg.mp;
        let mc = MpConfig {
            convexity_pairs: m.convexity_pairs,
            time_samples: m.time_samples,
            paths: m.paths,
            rel_tol: m.rel_tol,
            p3_tol_dt: m.p3_tol_dt,
            seed: self.r.seed,
        };
        let rep = check_sufficient_mp(&b, &adj, &self.r.co, &self.r.domain, &mc)?;
        self.kv.extend_prefixed("mp", &rep.to_kv());
        Ok(Outcome::Verdict(rep.verdict()))
    }

    fn duality(&mut self) -> Result<Outcome> {
        let vf = self.value_function()?;
        let mut b = self.simulate_with(Some(&vf))?;
        self.backward(&mut b)?;
        let adj = self.adjoints(&b)?;
        let d = &self.cfg.duality;
        let dc = DualityConfig {
            steps: (0..b.grid.n_steps()).step_by(d.step_every).collect(),
            paths: d.paths,
            shift: d.shift,
            radius: d.radius,
            tol: d.tol,
            p3_tol_dt: d.p3_tol_dt,
            core_frac: d.core_frac,
            t_margin: d.t_margin,
        };
        let rep = check_duality_inclusion(&vf, &b, &adj, &dc)?;
        self.kv.extend_prefixed("duality", &rep.to_kv());
        self.art.csv("duality.csv", |w| rep.write_csv(w));
        if !rep.applicable {
            return Err(Error::Inapplicable(format!("max |p3| = {} exceeds the gate", rep.p3_max)));
        }
        Ok(Outcome::Verdict(rep.median_rel_err <= d.max_median_rel_err && rep.super_fraction >= d.min_super_fraction))
    }

    fn scaling(&mut self) -> Result<Outcome> {
        let (_, mut b) = self.forward()?;
        let s = &self.cfg.scaling;
        let steps: Vec<usize> = s.times.iter().map(|t| b.grid.index_of(*t)).collect();
        let rep = if s.mode == "remainder" {
            let mut all = ScalingReport::default();
            for (&step, t) in steps.iter().zip(&s.times) {
                let one = remainder_scaling(&b, step, &s.offsets, s.p, &self.r.co)?;
                for row in one.rows {
                    all.push(&format!("{}_t{t}", row.quantity), row.offset, (row.estimate, row.std_error));
                }
            }
            all.fit();
            all
        } else {
            self.backward(&mut b)?;
            let adj = self.adjoints(&b)?;
            duality_scaling(&b, &adj, &steps, &s.offsets, &self.r.co, &self.r.basis, self.r.scheme)?
        };
        self.kv.put("mode", &s.mode).extend_prefixed("scaling", &rep.to_kv());
        self.art.csv("scaling.csv", |w| rep.write_csv(w));
        Ok(Outcome::Done)
    }

    fn verify(&mut self) -> Result<Outcome> {
        let vf = self.value_function()?;
        let mut b = self.simulate_with(Some(&vf))?;
        let sol = self.backward(&mut b)?;
        let v = &self.cfg.verify;
        let vc = VerifyConfig {
            paths: v.paths,
            radius: v.radius,
            membership_tol: v.membership_tol,
            membership_fraction: v.membership_fraction,
            grid_budget: v.grid_budget,
            residual_every: v.residual_every,
            core_frac: v.core_frac,
            min_coverage: v.min_coverage,
        };
        let drv = self.driver()?;
        let rep = verify_optimality(&vf, &self.r.co, &drv, &self.r.domain, &b, (cost_functional_j(&sol), sol.se), &vc)?;
        self.kv.extend_prefixed("verify", &rep.to_kv());
        Ok(Outcome::Verdict(rep.verdict))
    }

    fn girsanov(&mut self) -> Result<Outcome> {
        let times: Vec<f64> = (0..self.r.grid.n_steps()).map(|i| self.r.grid.time(i)).collect();
        let shifted = girsanov_reduce(&self.r.co, &times)?;
        let (vf, mut b) = self.forward()?;
        let sol = self.backward(&mut b)?;
        let pol = self.policy(vf.as_ref());
        let noise_q = self.noise().derive(1);
        let bq = simulate_smdde(&shifted, &self.r.history, &pol, &self.r.grid, &noise_q, self.cfg.numerics.n_paths)?;
        let (o, ose) = linear_driver_oracle(&shifted, &bq)?;
        let w = girsanov_weights(&b, &shifted.driver);
        let (wm, wse) = mean_se(w.iter().copied());
        let se = (sol.se * sol.se + ose * ose).sqrt();
        let routes_ok = (sol.y0 - o).abs() <= 3.0 * se;
        let weights_ok = (wm - 1.0).abs() <= 3.0 * wse;
        self.kv
            .put("route_regression.y0", sol.y0)
            .put("route_regression.se", sol.se)
            .put("route_shifted.y0", o)
            .put("route_shifted.se", ose)
            .put("routes_abs_diff", (sol.y0 - o).abs())
            .put("routes_ok", routes_ok)
            .put("weight_mean", wm)
            .put("weight_se", wse)
            .put("weights_ok", weights_ok);
        self.art.csv("routes.csv", |w| {
            writeln!(w, "route,estimate,std_error")?;
            writeln!(w, "regression,{},{}", sol.y0, sol.se)?;
            writeln!(w, "shifted_measure,{o},{ose}")
        });
        let keep = self.cfg.output.dump_paths.min(w.len());
        self.art.csv("weights.csv", |out| {
            writeln!(out, "path,weight")?;
            for (p, x) in w.iter().take(keep).enumerate() {
                writeln!(out, "{p},{x}")?;
            }
            Ok(())
        });
        Ok(Outcome::Verdict(routes_ok && weights_ok))
    }
}
