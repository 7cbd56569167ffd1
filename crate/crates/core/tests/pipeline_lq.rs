//! End-to-end checks on the no-delay LQ instance: grid value, optimal paths,
//! adjoints, duality, verification and the maximum principle.

mod common;

use std::sync::OnceLock;

use common::Lq;
use delay_control::adjoint::{check_sufficient_mp, solve_adjoints, AdjointBundle, MpConfig};
use delay_control::bsde::{cost_functional_j, solve_bsde_lsmc, BackwardSolution};
use delay_control::coeffs::Poly;
use delay_control::connect::{check_duality_inclusion, verify_optimality, DualityConfig, VerifyConfig};
use delay_control::control::{ConstantControl, ControlDomain, ControlPolicy, Perturbed};
use delay_control::grid::{HistoryPath, TimeGrid};
use delay_control::hamiltonian::{GVariant, LinearDriver};
use delay_control::hjb::{solve_hjb, GridFeedback, GridValueFunction, HjbGridConfig, Storage};
use delay_control::lsmc::{RegressionBasis, Scheme};
use delay_control::noise::NoiseSource;
use delay_control::report::ToKeyValues;
use delay_control::smdde::{simulate_smdde, TrajectoryBundle};
use delay_control::variational::duality_scaling;

const PATHS: usize = 5000;

fn domain() -> ControlDomain<f64> {
    ControlDomain::new(-1.0, 1.0, 41).unwrap()
}

fn driver() -> LinearDriver<f64> {
    LinearDriver::constant(0.0, 0.0)
}

fn time_grid() -> TimeGrid<f64> {
    TimeGrid::new(0.0, 1.0, 0.01, 0.2).unwrap()
}

fn history() -> HistoryPath<f64> {
    HistoryPath::constant(0.5, time_grid().delay_steps())
}

fn solve(co: &Poly<f64>) -> GridValueFunction<f64> {
    let cfg = HjbGridConfig {
        x_min: -2.0,
        x_max: 2.0,
        nx: 201,
        x1_min: -2.0,
        x1_max: 2.0,
        nx1: 101,
        s: 0.0,
        horizon: 1.0,
        n_slices: 200,
        delay: 0.2,
        storage: Storage::All,
    };
    solve_hjb(co, Some(&driver()), &domain(), &cfg, GVariant::Reduced).unwrap()
}

fn run(co: &Poly<f64>, ctl: &dyn ControlPolicy<f64>, seed: u64) -> (TrajectoryBundle<f64>, BackwardSolution) {
    let mut b = simulate_smdde(co, &history(), ctl, &time_grid(), &NoiseSource::new(seed), PATHS).unwrap();
    let sol = solve_bsde_lsmc(&mut b, co, &RegressionBasis::default(), Scheme::MultiStep).unwrap();
    (b, sol)
}

struct Fixture {
    lq: Lq,
    co: Poly<f64>,
    vf: GridValueFunction<f64>,
    bundle: TrajectoryBundle<f64>,
    sol: BackwardSolution,
    adj: AdjointBundle<f64>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let lq = Lq::canonical();
        let co = Poly::linear_quadratic(0.2, lq.a, lq.b, lq.s0, lq.q, lq.r, lq.mq, lq.ml);
        let vf = solve(&co);
        let fb = GridFeedback { vf: &vf, domain: domain() };
        let (bundle, sol) = run(&co, &fb, 11);
        let adj = solve_adjoints(&bundle, &co, &RegressionBasis::default(), Scheme::MultiStep).unwrap();
        Fixture { lq, co, vf, bundle, sol, adj }
    })
}

#[test]
fn optimal_cost_sits_on_the_value() {
    let f = fixture();
    let j = cost_functional_j(&f.sol);
    let v = f.vf.interp_value(0.0, 0.5, f.bundle.x1[0]);
    assert!((j - v).abs() <= 3.0 * f.sol.se + 0.05, "J {j} vs V {v}");
    assert!((j - f.lq.value(0.0, 0.5)).abs() <= 3.0 * f.sol.se + 0.01);
    // p-tilde at the start is V_x of the oracle.
    let vx = f.lq.value_x(0.0, 0.5);
    assert!((f.adj.p_start[0] - vx).abs() / (1.0 + vx.abs()) <= 0.05);
}

#[test]
fn adjoint_lies_in_the_superdifferential() {
    let f = fixture();
    let cfg = DualityConfig { steps: (0..100).step_by(10).collect(), ..Default::default() };
    let rep = check_duality_inclusion(&f.vf, &f.bundle, &f.adj, &cfg).unwrap();
    assert!(rep.applicable);
    assert!(rep.median_rel_err <= 0.05, "{:?}", rep.to_kv());
    assert!(rep.super_fraction >= 0.95);
    assert!(rep.coverage >= 0.5);

    let shifted = check_duality_inclusion(&f.vf, &f.bundle, &f.adj, &DualityConfig { shift: 0.5, ..cfg }).unwrap();
    assert!(shifted.super_fraction < 0.5, "shifted candidate passed at {}", shifted.super_fraction);
}

#[test]
fn verification_accepts_argmax_and_rejects_saturation() {
    let f = fixture();
    let (d, drv) = (domain(), driver());
    let cfg = VerifyConfig::default();
    let ok = verify_optimality(&f.vf, &f.co, &drv, &d, &f.bundle, (cost_functional_j(&f.sol), f.sol.se), &cfg)
        .unwrap();
    assert!(ok.verdict && ok.gap_ok, "{:?}", ok.to_kv());
    assert!(ok.membership_fraction >= 0.95);

    let (bm, sm) = run(&f.co, &ConstantControl(1.0), 11);
    let bad = verify_optimality(&f.vf, &f.co, &drv, &d, &bm, (cost_functional_j(&sm), sm.se), &cfg).unwrap();
    assert!(!bad.verdict);
    assert!(bad.gap > 3.0 * bad.j_se + cfg.grid_budget, "{:?}", bad.to_kv());
}

#[test]
fn duality_remainder_is_superlinear() {
    let f = fixture();
    let offsets = [0.2, 0.1, 0.05, 0.025];
    let rep = duality_scaling(
        &f.bundle,
        &f.adj,
        &[20, 40, 60],
        &offsets,
        &f.co,
        &RegressionBasis::default(),
        Scheme::MultiStep,
    )
    .unwrap();
    assert_eq!(rep.slopes.len(), 3);
    for (q, s) in &rep.slopes {
        let s = s.unwrap();
        assert!(s >= 1.5, "{q}: slope {s}");
    }
}

#[test]
fn maximum_principle_on_linear_terminal_instance() {
    let lq = Lq::canonical();
    let co = Poly::linear_quadratic(0.2, lq.a, lq.b, lq.s0, 0.0, lq.r, 0.0, 1.0);
    let vf = solve(&co);
    let fb = GridFeedback { vf: &vf, domain: domain() };
    let basis = RegressionBasis::default();
    let (b, _) = run(&co, &fb, 12);
    let adj = solve_adjoints(&b, &co, &basis, Scheme::MultiStep).unwrap();
    let mp = check_sufficient_mp(&b, &adj, &co, &domain(), &MpConfig::default()).unwrap();
    assert!(mp.verdict(), "{:?}", mp.to_kv());

    let pert = Perturbed { base: fb, shift: 0.2, from: 0.0, to: 0.5, domain: domain() };
    let (b, _) = run(&co, &pert, 12);
    let adj = solve_adjoints(&b, &co, &basis, Scheme::MultiStep).unwrap();
    let mp = check_sufficient_mp(&b, &adj, &co, &domain(), &MpConfig::default()).unwrap();
    assert!(mp.convexity_ok && mp.phi_linear_ok && mp.p3_zero_ok);
    assert!(!mp.variational_ok && mp.variational_worst > 0.0);
}

#[test]
fn quadratic_terminal_is_not_linear() {
    let f = fixture();
    let mp = check_sufficient_mp(&f.bundle, &f.adj, &f.co, &domain(), &MpConfig::default()).unwrap();
    assert!(!mp.phi_linear_ok && mp.phi_residual > 0.0);
    assert!(!mp.verdict());
}
