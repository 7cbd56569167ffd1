use delay_control::coeffs::Poly;
use delay_control::control::ConstantControl;
use delay_control::grid::{eval_x1_quadrature, HistoryPath, TimeGrid};
use delay_control::noise::NoiseSource;
use delay_control::smdde::{estimate_moment_bound, simulate_coupled_pair, simulate_smdde, TrajectoryBundle};
use delay_control::stats::{loglog_slope, mean_se};

fn grid(dt: f64) -> TimeGrid<f64> {
    TimeGrid::new(0.0, 1.0, dt, 0.2).unwrap()
}

fn in_pool<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

#[test]
fn x1_of_decaying_window_converges_at_second_order() {
    let (lambda, delta) = (0.7, 0.2);
    let err = |m: usize| {
        let dt = delta / m as f64;
        let w: Vec<f64> = (0..=m).map(|j| (-lambda * (j as f64 - m as f64) * dt).exp()).collect();
        (eval_x1_quadrature(&w, lambda, dt).unwrap() - delta).abs()
    };
    let (e1, e2) = (err(20), err(40));
    // e^{lambda tau} X(t + tau) is constant here, so trapezoid is exact up to rounding.
    assert!(e1 < 1e-14 && e2 < 1e-14, "{e1} {e2}");

    // A curved integrand shows the O(dt^2) rate.
    let err_sin = |m: usize| {
        let dt = delta / m as f64;
        let w: Vec<f64> = (0..=m).map(|j| ((j as f64 - m as f64) * dt * 5.0).sin()).collect();
        let exact = {
            // int_{-delta}^0 e^{l tau} sin(5 tau) d tau
            let (l, k) = (lambda, 5.0f64);
            let prim = |t: f64| (t * l).exp() * (l * (k * t).sin() - k * (k * t).cos()) / (l * l + k * k);
            prim(0.0) - prim(-delta)
        };
        (eval_x1_quadrature(&w, lambda, dt).unwrap() - exact).abs()
    };
    let order = (err_sin(20) / err_sin(40)).log2();
    assert!((order - 2.0).abs() < 0.1, "observed order {order}");
}

#[test]
fn method_of_steps_first_and_second_segment() {
    // b = x2, sigma = 0, phi = 1.
    let co = Poly::linear(0.3, [0.0, 0.0, 0.0, 1.0], [0.0; 4]);
    let run = |dt: f64| {
        let g = grid(dt);
        let h = HistoryPath::constant(1.0, g.delay_steps());
        let b = simulate_smdde(&co, &h, &ConstantControl(0.0), &g, &NoiseSource::new(1), 1).unwrap();
        let m = g.delay_steps();
        for i in 0..=m {
            let t = g.time(i);
            assert!((b.x[i] - (1.0 + t)).abs() < 1e-12, "first segment at t = {t}");
        }
        let mut worst = 0.0f64;
        for i in m..=2 * m {
            let r = g.time(i) - 0.2;
            worst = worst.max((b.x[i] - (1.2 + r + r * r / 2.0)).abs());
        }
        worst
    };
    let (e1, e2) = (run(0.01), run(0.005));
    assert!(e1 < 0.01 && e2 < 0.6 * e1, "{e1} {e2}");
}

#[test]
fn incremental_x1_tracks_quadrature() {
    let co = Poly::linear(0.5, [0.2, -1.0, 0.0, 0.8], [0.0; 4]);
    let lambda = 0.5f64;
    let worst = |dt: f64| {
        let g = grid(dt);
        let h = HistoryPath::from_fn(&g, |tau| 1.0 + tau).unwrap();
        let b = simulate_smdde(&co, &h, &ConstantControl(0.0), &g, &NoiseSource::new(1), 1).unwrap();
        let k = (-lambda * 0.2).exp();
        let mut inc = b.x1[0];
        let mut w = 0.0f64;
        for i in 0..g.n_steps() {
            inc += (b.x[i] - lambda * b.x1[i] - k * b.x2[i]) * dt;
            w = w.max((inc - b.x1[i + 1]).abs());
        }
        w
    };
    let (a, c) = (worst(0.01), worst(0.005));
    assert!(a < 0.05, "{a}");
    assert!(c < 0.6 * a, "{a} {c}");
}

#[test]
fn gbm_terminal_mean() {
    let (a, s) = (0.1, 0.3);
    let co = Poly::gbm(0.2, a, s);
    let g = grid(0.01);
    let h = HistoryPath::constant(1.0, g.delay_steps());
    let b = simulate_smdde(&co, &h, &ConstantControl(0.0), &g, &NoiseSource::new(21), 20_000).unwrap();
    let n = g.n_steps();
    let (m, se) = mean_se((0..b.n_paths).map(|p| b.x[b.idx(p, n)]));
    assert!((m - a.exp()).abs() <= 3.0 * se, "{m} +- {se}");
}

#[test]
fn bundles_repeat_across_thread_counts() {
    let co = Poly::bilinear(0.2, 1.0, 0.3);
    let g = grid(0.01);
    let h = HistoryPath::from_fn(&g, |tau| 0.5 - tau).unwrap();
    let sim = || simulate_smdde(&co, &h, &ConstantControl(0.2), &g, &NoiseSource::new(4), 3000).unwrap();
    let a: TrajectoryBundle<f64> = in_pool(1, sim);
    let b = in_pool(4, sim);
    let c = in_pool(8, sim);
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn single_precision_follows_double() {
    let g64 = grid(0.01);
    let g32 = TimeGrid::<f32>::new(0.0, 1.0, 0.01, 0.2).unwrap();
    let co64 = Poly::linear(0.2, [0.1, -0.3, 0.2, 0.4], [0.2, 0.1, 0.0, 0.0]);
    let co32 = Poly::linear(0.2f32, [0.1, -0.3, 0.2, 0.4], [0.2, 0.1, 0.0, 0.0]);
    let noise = NoiseSource::new(8);
    let b64 = simulate_smdde(&co64, &HistoryPath::constant(1.0, 20), &ConstantControl(0.0), &g64, &noise, 50).unwrap();
    let b32 = simulate_smdde(&co32, &HistoryPath::constant(1.0f32, 20), &ConstantControl(0.0), &g32, &noise, 50)
        .unwrap();
    let worst = b64.x.iter().zip(&b32.x).map(|(a, b)| (a - *b as f64).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-4, "{worst}");
}

fn comparison_pairs(m: usize) -> Vec<(Poly<f64>, Poly<f64>, HistoryPath<f64>, HistoryPath<f64>)> {
    let one = HistoryPath::constant(1.0, m);
    let same = Poly::linear(0.2, [0.2, -0.3, 0.0, 0.4], [0.2, 0.1, 0.0, 0.0]);
    vec![
        (same.clone(), same, one.clone(), one.clone()),
        (
            Poly::linear(0.2, [1.0, 0.0, 0.0, 1.0], [0.0, 0.2, 0.0, 0.0]),
            Poly::linear(0.2, [0.0, 0.0, 0.0, 1.0], [0.0, 0.2, 0.0, 0.0]),
            one.clone(),
            one.clone(),
        ),
        (
            Poly::linear(0.2, [0.0, 0.0, 0.0, 1.0], [0.3, 0.0, 0.0, 0.0]),
            Poly::linear(0.2, [0.0, 0.0, 0.0, 1.0], [0.3, 0.0, 0.0, 0.0]),
            one.shifted(0.5),
            one,
        ),
    ]
}

#[test]
fn coupled_paths_stay_ordered() {
    let dt = 1e-3;
    let g = grid(dt);
    for (k, (a, b, h1, h2)) in comparison_pairs(g.delay_steps()).iter().enumerate() {
        let (b1, b2, r) =
            simulate_coupled_pair(a, b, h1, h2, &g, &NoiseSource::new(17), 10_000, 10.0 * dt, 3).unwrap();
        assert!(r.hypotheses_ok(), "pair {k}: {:?}", r.hypothesis_violations);
        assert_eq!(r.violating_paths, 0, "pair {k}");
        assert_eq!(r.max_fraction(), 0.0);
        if k == 0 {
            assert_eq!(b1.x, b2.x);
        }
    }
}

#[test]
fn reversed_pair_is_flagged() {
    let g = grid(1e-2);
    let pairs = comparison_pairs(g.delay_steps());
    let (a, b, h1, h2) = &pairs[1];
    let (_, _, r) = simulate_coupled_pair(b, a, h1, h2, &g, &NoiseSource::new(2), 500, 0.1, 0).unwrap();
    assert!(!r.hypotheses_ok());
    assert!(r.violating_paths > 0);
}

#[test]
fn moment_ratio_is_stable_across_steps_and_seeds() {
    let co = Poly::linear(0.2, [0.5, -0.3, 0.2, 0.4], [0.3, 0.2, 0.0, 0.0]);
    let mut ratios = [Vec::new(), Vec::new()];
    for dt in [1e-2, 5e-3, 2.5e-3] {
        for seed in [1, 2, 3] {
            let g = grid(dt);
            let h = HistoryPath::constant(1.0, g.delay_steps());
            let r = estimate_moment_bound(&co, &h, &ConstantControl(0.0), &g, &NoiseSource::new(seed), &[2, 4], 5000)
                .unwrap();
            for (k, e) in r.iter().enumerate() {
                assert!(e.ratio().is_finite());
                assert_eq!(e.n_diverged, 0);
                ratios[k].push(e.ratio());
            }
        }
    }
    for r in &ratios {
        let lo = r.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = r.iter().cloned().fold(0.0, f64::max);
        assert!(hi / lo - 1.0 <= 0.2, "{r:?}");
    }
}

#[test]
fn moments_scale_homogeneously_without_intercepts() {
    let co = Poly::linear(0.2, [0.0, -0.3, 0.2, 0.4], [0.0, 0.2, 0.1, 0.0]);
    let g = grid(0.01);
    let base = HistoryPath::from_fn(&g, |tau| 1.0 + tau).unwrap();
    let scales = [1.0, 2.0, 4.0];
    let mut lhs = [Vec::new(), Vec::new()];
    for s in scales {
        let r = estimate_moment_bound(&co, &base.scaled(s), &ConstantControl(0.0), &g, &NoiseSource::new(5), &[2, 4], 4000)
            .unwrap();
        lhs[0].push(r[0].lhs);
        lhs[1].push(r[1].lhs);
    }
    for (k, p) in [2.0, 4.0].iter().enumerate() {
        let slope = loglog_slope(&scales, &lhs[k]).unwrap();
        assert!((slope - p).abs() <= 0.2, "p = {p}: slope {slope}");
    }
}

#[test]
fn deterministic_moment_cases() {
    let g = grid(0.01);
    let m = g.delay_steps();
    let frozen = Poly::zero(0.2);
    let h = HistoryPath::from_fn(&g, |tau| 1.0 - 2.0 * tau).unwrap();
    let r = estimate_moment_bound(&frozen, &h, &ConstantControl(0.0), &g, &NoiseSource::new(1), &[2, 4], 10).unwrap();
    for e in &r {
        assert!((e.lhs - 1.4f64.powi(e.p as i32)).abs() < 1e-12);
        assert!((e.ratio() - 1.0).abs() < 1e-12);
    }
    let drift = Poly::constant(0.2, 1.0, 0.0, 0.0, 0.0);
    let r = estimate_moment_bound(&drift, &HistoryPath::constant(0.0, m), &ConstantControl(0.0), &g, &NoiseSource::new(1), &[2, 4], 10)
        .unwrap();
    for e in &r {
        assert!((e.lhs - 1.0).abs() < 1e-9);
        assert!((e.rhs_terms[1] - 1.0).abs() < 1e-9);
    }
}
