mod common;

use std::collections::BTreeMap;

use common::Lq;
use delay_control::coeffs::Poly;
use delay_control::control::ControlDomain;
use delay_control::hamiltonian::{GArgs, GVariant};
use delay_control::hjb::{
    check_x2_independence, interior_nodes, jet_membership, solve_hjb, viscosity_residual, Candidate,
    GridValueFunction, HjbGridConfig, Side, Slice, Storage, X2Probe,
};

fn small(nx: usize, n_slices: usize) -> HjbGridConfig<f64> {
    HjbGridConfig {
        x_min: -2.0,
        x_max: 2.0,
        nx,
        x1_min: -1.0,
        x1_max: 1.0,
        nx1: 11,
        s: 0.0,
        horizon: 1.0,
        n_slices,
        delay: 0.2,
        storage: Storage::All,
    }
}

fn fixed() -> ControlDomain<f64> {
    ControlDomain::new(0.0, 0.0, 1).unwrap()
}

#[test]
fn lq_value_matches_riccati_on_default_grid() {
    let lq = Lq::canonical();
    let co = Poly::linear_quadratic(0.2, lq.a, lq.b, lq.s0, lq.q, lq.r, lq.mq, lq.ml);
    let d = ControlDomain::new(-1.0, 1.0, 41).unwrap();
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
        storage: Storage::Stride(50),
    };
    let vf = solve_hjb(&co, None, &d, &cfg, GVariant::Standard).unwrap();
    assert!(vf.cfl <= 1.0);
    let mut worst = 0.0f64;
    for i in [0, 50, 100, 150] {
        let t = vf.time(i);
        let (kk, ll, cc) = {
            let r = lq.riccati(t);
            (r[0], r[1], r[2])
        };
        for j in 20..=180 {
            let x = vf.x(j);
            for k in 10..=90 {
                let e = (vf.value(i, j, k).unwrap() - (kk * x * x + ll * x + cc)).abs();
                worst = worst.max(e);
            }
        }
    }
    assert!(worst <= 5e-2, "sup error {worst}");

    // Time derivative and feedback against the oracle, away from the boundary
    // and from control saturation.
    let dt = cfg.dt();
    for x in [-0.8, -0.3, 0.0, 0.4, 0.9] {
        let jet = vf.extract_jet(0.25, x, 0.0).unwrap();
        let vt = lq.value_t(0.25, x);
        assert!((jet.theta - vt).abs() <= 0.02 + 10.0 * dt, "x = {x}: {} vs {vt}", jet.theta);
        assert!((jet.p - lq.value_x(0.25, x)).abs() <= 0.01);
        assert!(jet.q.abs() < 1e-6);
        let u = vf.interp_control(0.25, x, 0.0);
        assert!((u - lq.control(0.25, x)).abs() <= 0.02, "x = {x}: {u} vs {}", lq.control(0.25, x));
    }
}

#[test]
fn frozen_dynamics_carry_terminal_data() {
    // b = sigma = f = 0, Phi = x: V = -x.
    let co = Poly::linear(0.3, [0.0; 4], [0.0; 4]);
    let vf = solve_hjb(&co, None, &fixed(), &small(41, 20), GVariant::Standard).unwrap();
    for (&i, sl) in &vf.slices {
        for j in 1..40 {
            for k in 0..11 {
                let e = (sl.v[j * 11 + k] + vf.x(j)).abs();
                assert!(e <= 1e-10, "slice {i} node ({j}, {k}): {e}");
            }
        }
    }

    // Phi = c, f = 0: V = -c; residuals vanish.
    let co = Poly::constant(0.3, 0.0, 0.0, 0.0, 1.5);
    let vf = solve_hjb(&co, None, &fixed(), &small(41, 20), GVariant::Standard).unwrap();
    assert!(vf.slices.values().all(|s| s.v.iter().all(|v| *v == -1.5)));
    let pts = interior_nodes(&vf, 0.8, 5);
    assert!(!pts.is_empty());
    let r = viscosity_residual(&vf, &co, None, &fixed(), &pts).unwrap();
    assert_eq!((r.max_sub, r.max_super), (0.0, 0.0));
}

#[test]
fn terminal_slice_is_minus_phi() {
    let co = Poly::linear_quadratic(0.2, -0.1, 0.5, 0.2, 0.5, 1.0, 0.5, 0.3);
    let d = ControlDomain::new(-1.0, 1.0, 5).unwrap();
    let vf = solve_hjb(&co, None, &d, &small(41, 40), GVariant::Standard).unwrap();
    let last = &vf.slices[&40];
    for j in 0..41 {
        let x = vf.x(j);
        for k in 0..11 {
            assert_eq!(last.v[j * 11 + k], -(0.3 * x - 0.5 * x * x));
        }
    }
}

#[test]
fn raising_terminal_data_never_lowers_value() {
    let d = ControlDomain::new(-1.0, 1.0, 9).unwrap();
    let base = Poly::linear_quadratic(0.2, -0.1, 0.5, 0.2, 0.5, 1.0, 0.5, 0.0);
    let mut lower_phi = base.clone();
    lower_phi.pxx = -0.8;
    let a = solve_hjb(&base, None, &d, &small(41, 40), GVariant::Standard).unwrap();
    let b = solve_hjb(&lower_phi, None, &d, &small(41, 40), GVariant::Standard).unwrap();
    for (sa, sb) in a.slices.values().zip(b.slices.values()) {
        assert!(sa.v.iter().zip(&sb.v).all(|(va, vb)| vb >= va));
    }
}

fn probes(p: f64, q: f64) -> Vec<X2Probe<f64>> {
    let mut out = Vec::new();
    for x in [-1.0, 0.0, 0.7] {
        for x1 in [-0.5, 0.3] {
            out.push(X2Probe { t: 0.5, x, x1, args: GArgs { k: 0.2, p, r: -0.4, q } });
        }
    }
    out
}

#[test]
fn x2_independence_examples() {
    let lambda = 0.4;
    let d = ControlDomain::new(-1.0, 1.0, 5).unwrap();
    let free = Poly::linear_quadratic(lambda, -0.1, 0.5, 0.2, 0.5, 1.0, 0.5, 0.0);
    let r = check_x2_independence(&free, None, &d, GVariant::Standard, 0.2, &probes(0.8, 0.0), 1.0).unwrap();
    assert!(r.pass && r.worst == 0.0);

    let r = check_x2_independence(&free, None, &d, GVariant::Standard, 0.2, &probes(0.8, 0.5), 1.0).unwrap();
    assert!(!r.pass && r.witness.is_some());

    // b picks up kappa e^{-lambda delta} x2; probes with p kappa = q cancel the transport.
    let kappa = 2.0;
    let mut eng = free.clone();
    eng.bx2 = kappa * (-lambda * 0.2f64).exp();
    let r = check_x2_independence(&eng, None, &d, GVariant::Standard, 0.2, &probes(0.3, 0.3 * kappa), 1.0).unwrap();
    assert!(r.pass, "worst {}", r.worst);
}

fn kink_surface() -> GridValueFunction<f64> {
    let cfg = small(41, 2);
    let mut slices = BTreeMap::new();
    for i in 0..=2 {
        let mut v = vec![0.0; 41 * 11];
        for j in 0..41 {
            let x = -2.0 + 0.1 * j as f64;
            for k in 0..11 {
                v[j * 11 + k] = -x.abs();
            }
        }
        slices.insert(i, Slice { v, u_star: vec![0.0; 41 * 11] });
    }
    GridValueFunction {
        cfg,
        variant: GVariant::Standard,
        slices,
        x2_gate_worst: 0.0,
        x2_audit_worst: 0.0,
        cfl: 0.0,
        warnings: Vec::new(),
    }
}

#[test]
fn concave_kink_slopes() {
    let vf = kink_surface();
    for p in [-1.0, -0.5, 0.0, 0.5, 1.0] {
        let m = jet_membership(&vf, 0.25, 0.0, 0.0, Candidate::Slope(p), Side::Super, 2, 1e-12).unwrap();
        assert!(m.pass, "p = {p}: {}", m.worst);
        let m = jet_membership(&vf, 0.25, 0.0, 0.0, Candidate::Slope(p), Side::Sub, 2, 0.25).unwrap();
        assert!(!m.pass, "sub-jet should be empty at the kink (p = {p})");
    }
    let m = jet_membership(&vf, 0.25, 0.0, 0.0, Candidate::Slope(1.5), Side::Super, 2, 0.25).unwrap();
    assert!(!m.pass);

    // Away from the kink V = -x is linear.
    let jet = vf.extract_jet(0.25, 1.0, 0.0).unwrap();
    assert!(jet.theta.abs() < 1e-12 && (jet.p + 1.0).abs() < 1e-12 && jet.q.abs() < 1e-12 && jet.pp.abs() < 1e-9);
    for side in [Side::Super, Side::Sub] {
        assert!(jet_membership(&vf, 0.25, 1.0, 0.0, Candidate::Full(jet), side, 2, 1e-9).unwrap().pass);
    }
}
