use std::f64::consts::PI;
use std::sync::Arc;

use ivpb::phase_grid::*;
use ivpb::Error;
use proptest::prelude::*;

/// 1-D midpoint rule for the standard normal density on [-a, a].
fn normal_midpoint(a: f64, n: usize) -> f64 {
    let h = 2.0 * a / n as f64;
    (0..n)
        .map(|i| {
            let x = -a + (i as f64 + 0.5) * h;
            h * (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
        })
        .sum()
}

#[test]
fn desk_velocity_grid() {
    let g = build_velocity_grid(6.0, 16).unwrap();
    assert_eq!(g.len(), 4096);
    assert!(g.weights.iter().all(|w| *w > 0.0));
    let total: f64 = g.weights.iter().sum();
    assert!((total - 12f64.powi(3)).abs() < 1e-9);
    assert!(g.mass_defect < 1e-3, "{}", g.mass_defect);
    // μ is a product of 1-D Gaussians, so Σ w μ is the cube of the 1-D rule.
    let oracle = normal_midpoint(6.0, 16).powi(3);
    let s: f64 = g.weights.iter().zip(&g.mu_table).map(|(w, m)| w * m).sum();
    assert!((s - oracle).abs() < 1e-13, "{s} vs {oracle}");
    assert!((g.mass_defect - (oracle - 1.0).abs()).abs() < 1e-13);
}

#[test]
fn mass_defect_shrinks_with_box() {
    // fixed spacing 0.5, so only the truncated tail changes
    let defects: Vec<f64> = [(2.0, 8), (3.0, 12), (4.0, 16), (5.0, 20)]
        .iter()
        .map(|&(a, n)| build_velocity_grid(a, n).unwrap().mass_defect)
        .collect();
    for w in defects.windows(2) {
        assert!(w[1] < w[0], "{defects:?}");
    }
    // at v_max = 2 the defect is dominated by the truncated tail 1 - P(|X| < 2)^3
    assert!((defects[0] - (1.0 - normal_midpoint(2.0, 8).powi(3))).abs() < 1e-14);
    let tail = 1.0 - normal_midpoint(2.0, 4000).powi(3);
    assert!((defects[0] - tail).abs() / tail < 0.1, "{} vs {tail}", defects[0]);
}

#[test]
fn maxwellian_at_origin() {
    assert!((maxwellian(&[0.0; 3]) - 0.063_493_635_934_240_97).abs() < 1e-15);
}

#[test]
fn gaussian_moments() {
    assert_eq!(gaussian_moment(0).unwrap(), 1.0);
    assert_eq!(gaussian_moment(2).unwrap(), 3.0);
    assert_eq!(gaussian_moment(4).unwrap(), 15.0);
    assert!(gaussian_moment(1).is_err());
    assert!(gaussian_moment(6).is_err());
}

#[test]
fn bad_velocity_grids_rejected() {
    assert!(matches!(build_velocity_grid(6.0, 15), Err(Error::Config(_))));
    assert!(matches!(build_velocity_grid(0.0, 16), Err(Error::Config(_))));
    assert!(matches!(build_velocity_grid(-1.0, 16), Err(Error::Config(_))));
}

#[test]
fn discrete_moments_converge() {
    let mut prev = f64::INFINITY;
    for (a, n) in [(4.0, 8), (6.0, 16), (8.0, 32)] {
        let g = build_velocity_grid(a, n).unwrap();
        let err = (g.discrete_moment(0) - 1.0).abs()
            + (g.discrete_moment(2) - 3.0).abs()
            + (g.discrete_moment(4) - 15.0).abs();
        assert!(err < prev, "{err} >= {prev}");
        prev = err;
    }
    assert!(prev < 1e-8, "{prev}");
}

fn field_1x(nx: usize, n: usize, f: impl Fn([f64; 3], [f64; 3]) -> f64) -> PerturbationField {
    let sg = SpatialGrid::new(&[nx]).unwrap();
    let vg = Arc::new(build_velocity_grid(6.0, n).unwrap());
    PerturbationField::from_fn(&sg, &vg, Mode::Perturbation, f)
}

#[test]
fn spatial_derivative_of_sine() {
    let f = field_1x(16, 4, |x, _| (2.0 * PI * x[0]).sin());
    let d = derivative(&f, AxisKind::Space, 0, 1, &TimeContext::None).unwrap();
    for ix in 0..16 {
        let x = f.sgrid.coords(ix)[0];
        for &v in d.at_x(ix) {
            assert!((v - 2.0 * PI * (2.0 * PI * x).cos()).abs() < 1e-12);
        }
    }
}

#[test]
fn spatial_derivative_of_constant_is_zero() {
    let f = field_1x(8, 4, |_, v| 3.0 + v[0]);
    let d = derivative(&f, AxisKind::Space, 0, 1, &TimeContext::None).unwrap();
    assert!(d.values.iter().all(|v| *v == 0.0));
}

#[test]
fn velocity_derivative_of_maxwellian_second_order() {
    let err = |n: usize| {
        let f = field_1x(2, n, |_, v| maxwellian(&v));
        let d = derivative(&f, AxisKind::Velocity, 0, 1, &TimeContext::None).unwrap();
        f.vgrid
            .nodes
            .iter()
            .zip(d.at_x(0))
            .map(|(v, dv)| (dv + v[0] * maxwellian(v)).abs())
            .fold(0.0, f64::max)
    };
    let (e1, e2) = (err(32), err(64));
    assert!(e1 < 1e-2, "{e1}");
    let order = (e1 / e2).log2();
    assert!(order > 1.8, "order {order} ({e1}, {e2})");
}

#[test]
fn time_derivative_needs_context() {
    let f = field_1x(4, 4, |_, _| 1.0);
    let r = derivative(&f, AxisKind::Time, 0, 1, &TimeContext::None);
    assert!(matches!(r, Err(Error::MissingTimeContext { order: 1 })));
    let prev = [&f];
    let r = derivative(&f, AxisKind::Time, 0, 2, &TimeContext::History { prev: &prev, dt: 0.1 });
    assert!(matches!(r, Err(Error::MissingTimeContext { order: 2 })));
}

#[test]
fn time_derivative_from_history() {
    let f0 = field_1x(4, 4, |_, _| 1.0);
    let f1 = field_1x(4, 4, |_, _| 1.5);
    let prev = [&f0];
    let d = derivative(&f1, AxisKind::Time, 0, 1, &TimeContext::History { prev: &prev, dt: 0.25 }).unwrap();
    assert!(d.values.iter().all(|v| (v - 2.0).abs() < 1e-15));
}

#[test]
fn moments_examples() {
    let g = build_velocity_grid(6.0, 16).unwrap();
    let one = |_: &[f64; 3]| 1.0;
    let rho = moments_v(&g.mu_table, &g, &[&one]).unwrap()[0];
    assert!((rho - 1.0).abs() <= g.mass_defect + 1e-15);

    let f: Vec<f64> = g.nodes.iter().zip(&g.sqrt_mu_table).map(|(v, s)| v[0] * s).collect();
    let psi = |v: &[f64; 3]| v[0] * maxwellian(v).sqrt();
    let m = moments_v(&f, &g, &[&psi]).unwrap()[0];
    assert!((m - 1.0).abs() < 1e-3, "{m}");

    let odd: Vec<f64> = g.nodes.iter().map(|v| v[1] * (1.0 + v[0] * v[0])).collect();
    assert_eq!(moments_v(&odd, &g, &[&one]).unwrap()[0], 0.0);

    assert!(matches!(moments_v(&[1.0; 3], &g, &[&one]), Err(Error::Shape { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn odd_integrands_vanish(c in prop::collection::vec(-10.0f64..10.0, 4), axis in 0usize..3) {
        let g = build_velocity_grid(5.0, 10).unwrap();
        let h: Vec<f64> = g.nodes.iter().map(|v| {
            let even = c[0] + c[1] * v[0] * v[0] + c[2] * (v[1] * v[2]).powi(2) + c[3] * v[2].cos();
            v[axis] * even
        }).collect();
        let one = |_: &[f64; 3]| 1.0;
        prop_assert_eq!(moments_v(&h, &g, &[&one]).unwrap()[0], 0.0);
    }

    #[test]
    fn resolved_modes_differentiate_exactly(k in 1i32..7, phase in 0.0f64..6.3, amp in -3.0f64..3.0) {
        let sg = SpatialGrid::new(&[16]).unwrap();
        let f = Fourier::new(&sg);
        let u: Vec<f64> = (0..16).map(|i| amp * (2.0 * PI * k as f64 * sg.coords(i)[0] + phase).sin()).collect();
        let d = f.derivative(&u, 0, 1);
        for (i, dv) in d.iter().enumerate() {
            let x = sg.coords(i)[0];
            let exact = amp * 2.0 * PI * k as f64 * (2.0 * PI * k as f64 * x + phase).cos();
            prop_assert!((dv - exact).abs() < 1e-11 * (1.0 + exact.abs()));
        }
    }
}
