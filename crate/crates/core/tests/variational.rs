use delay_control::coeffs::Poly;
use delay_control::control::ConstantControl;
use delay_control::grid::{HistoryPath, TimeGrid};
use delay_control::noise::NoiseSource;
use delay_control::smdde::{simulate_smdde, TrajectoryBundle};
use delay_control::variational::{remainder_scaling, run_statistics, simulate_variation};

const OFFSETS: [f64; 4] = [0.2, 0.1, 0.05, 0.025];

fn base(co: &Poly<f64>) -> TrajectoryBundle<f64> {
    let g = TimeGrid::new(0.0, 1.0, 0.01, 0.2).unwrap();
    let h = HistoryPath::constant(0.5, g.delay_steps());
    simulate_smdde(co, &h, &ConstantControl(0.1), &g, &NoiseSource::new(3), 2000).unwrap()
}

#[test]
fn bilinear_remainders_are_higher_order() {
    let co = Poly::bilinear(0.2, 1.0, 0.3);
    let b = base(&co);
    for step in [20, 50] {
        let r = remainder_scaling(&b, step, &OFFSETS, 2, &co).unwrap();
        let s = r.slope("sup_xhat").unwrap();
        assert!((s - 2.0).abs() <= 0.2, "step {step}: sup slope {s}");
        let e = r.slope("int_eps1").unwrap();
        assert!(e >= 2.5, "step {step}: eps slope {e}");
        assert!(r.slope("int_eps").unwrap() >= 2.5);
    }
}

#[test]
fn linear_family_variation_is_exactly_quadratic() {
    let co = Poly::linear(0.2, [0.1, -0.5, 0.3, 0.7], [0.3, 0.1, 0.0, 0.0]);
    let b = base(&co);
    let r = remainder_scaling(&b, 30, &OFFSETS, 2, &co).unwrap();
    for q in ["sup_xhat", "sup_x1hat", "sup_x2hat"] {
        assert!((r.slope(q).unwrap() - 2.0).abs() <= 1e-6, "{q}");
    }
}

#[test]
fn zero_offset_statistics_vanish() {
    let co = Poly::bilinear(0.2, 1.0, 0.3);
    let b = base(&co);
    let run = simulate_variation(&b, 10, 0.0, &co).unwrap();
    for (m, se) in run_statistics(&run, 2) {
        assert_eq!((m, se), (0.0, 0.0));
    }
    assert_eq!(run.perturbed.x, b.x);
}

#[test]
fn variation_csv_lists_every_row() {
    let co = Poly::bilinear(0.2, 1.0, 0.3);
    let b = base(&co);
    let r = remainder_scaling(&b, 30, &OFFSETS[..3], 2, &co).unwrap();
    let mut out = Vec::new();
    r.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert!(text.starts_with("quantity,offset,estimate,std_error\n"));
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 1 + 6 * 3);
}
