mod common;

use common::tables;
use ivpb::diagnostics::*;
use ivpb::phase_grid::*;
use ivpb::time_stepper::*;
use ivpb::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn decay_fit_recovers_exact_exponential() {
    let t: Vec<f64> = (0..50).map(|i| i as f64 * 0.02).collect();
    let y: Vec<f64> = t.iter().map(|t| (-3.0 * t).exp()).collect();
    let fit = decay_rate_fit(&t, &y, 0.1, 1.0).unwrap();
    assert!((fit.lambda - 3.0).abs() < 1e-6, "{fit:?}");
    assert!(fit.r2 > 1.0 - 1e-12);
    assert!((fit.envelope_constant - 1.0).abs() < 1e-9);
    assert!(!fit.floor_limited);
}

#[test]
fn decay_fit_of_constant_is_zero() {
    let t: Vec<f64> = (0..20).map(|i| i as f64).collect();
    let fit = decay_rate_fit(&t, &[0.7; 20], 0.1, 1.0).unwrap();
    assert_eq!(fit.lambda, 0.0);
}

#[test]
fn decay_fit_stops_at_floor() {
    let t: Vec<f64> = (0..100).map(|i| i as f64 * 0.02).collect();
    let y: Vec<f64> = t.iter().map(|t| (-60.0 * t).exp()).collect();
    let fit = decay_rate_fit(&t, &y, 0.0, 1.0).unwrap();
    assert!(fit.floor_limited);
    assert!(fit.samples < 100);
    assert!((fit.lambda - 60.0).abs() < 1e-6);
}

#[test]
fn decay_fit_needs_ten_samples() {
    let t: Vec<f64> = (0..10).map(|i| i as f64).collect();
    let y = vec![1.0; 10];
    assert!(matches!(decay_rate_fit(&t, &y, 0.1, 1.0), Err(Error::Contract(_))));
    assert!(decay_rate_fit(&t, &y[..9], 0.0, 1.0).is_err());
}

fn plasma() -> PlasmaParams {
    PlasmaParams { n_e: 1e19, n_i: 1e19, t_e: 1e4, t_i: 1e4, z_i: 1.0, m_e: 9.109_383_7e-31, m_i: 1.672_621_9e-27, ln_lambda: 10.0 }
}

#[test]
fn ion_electron_frequency_ratio() {
    let p = plasma();
    let f = physical_frequencies(&p).unwrap();
    let expect = (p.m_e / p.m_i).sqrt();
    assert!((f.ii_over_ee - expect).abs() <= 1e-12 * expect);
    assert!(f.ee > 0.0 && f.ei > 0.0 && f.ii > 0.0);
}

#[test]
fn frequency_scalings() {
    let p = plasma();
    let f = physical_frequencies(&p).unwrap();
    let f2 = physical_frequencies(&PlasmaParams { n_e: 2.0 * p.n_e, ..p }).unwrap();
    assert!((f2.ee / f.ee - 2.0).abs() < 1e-14);
    for z in [1.0, 2.0, 3.0] {
        let fz = physical_frequencies(&PlasmaParams { z_i: z, ..p }).unwrap();
        let expect = 0.5 * 2f64.sqrt() * z * z;
        assert!((fz.ei / fz.ee - expect).abs() < 1e-12 * expect);
    }
}

#[test]
fn nonpositive_plasma_parameter_is_named() {
    let err = physical_frequencies(&PlasmaParams { t_i: 0.0, ..plasma() }).unwrap_err();
    assert!(err.to_string().contains("t_i"), "{err}");
    assert!(physical_frequencies(&PlasmaParams { ln_lambda: -1.0, ..plasma() }).is_err());
}

fn model(nx: usize, n: usize) -> Model {
    Model::new(&SpatialGrid::new(&[nx]).unwrap(), tables(n), Default::default())
}

#[test]
fn norms_of_zero() {
    let m = model(8, 8);
    let s = build_initial_data(&m, &InitialSpec::default(), Mode::Perturbation).unwrap();
    let mut acc = EnergyAccumulator::default();
    let r = energy_report(&m, &s, 2, &mut acc).unwrap();
    assert_eq!(r.triple_norm_sq, 0.0);
    assert_eq!(r.triple_norm_nu_sq, 0.0);
    assert_eq!(r.e_functional, 0.0);
    assert_eq!(r.y_lyapunov, 0.0);
    let c = conservation_residuals(&m, &s);
    assert_eq!((c.mass, c.momentum, c.energy, c.neutrality), (0.0, [0.0; 3], 0.0, 0.0));
    assert_eq!(r.table.len(), multi_indices(1, 2).len());
}

#[test]
fn multi_index_counts() {
    // orders ≤ k over (t, x_1..x_d, v_1, v_2, v_3): C(4 + d + k, k)
    assert_eq!(multi_indices(1, 0).len(), 1);
    assert_eq!(multi_indices(1, 1).len(), 6);
    assert_eq!(multi_indices(1, 2).len(), 21);
    assert_eq!(multi_indices(3, 2).len(), 36);
}

#[test]
fn maxwellian_norm_at_order_zero() {
    let m = model(4, 8);
    let f = PerturbationField::from_fn(&m.sgrid, &m.vgrid, Mode::Perturbation, |_, v| maxwellian(&v).sqrt());
    let n = triple_norms(&f, &m.tables.nu, 0, &TimeContext::None).unwrap();
    let mass: f64 = m.vgrid.weights.iter().zip(&m.vgrid.mu_table).map(|(w, u)| w * u).sum();
    assert!((n.triple - mass.sqrt()).abs() < 1e-14);
    assert!(triple_norms(&f, &m.tables.nu, 1, &TimeContext::None).is_err());
}

#[test]
fn weighted_norm_dominates() {
    let m = model(16, 8);
    let mut spec = InitialSpec { a: vec![FourierMode { amplitude: 1e-3, wave: [1, 0, 0], phase: 0.0 }], ..Default::default() };
    spec.micro = vec![FourierMode { amplitude: 5e-4, wave: [2, 0, 0], phase: 0.4 }];
    let s = build_initial_data(&m, &spec, Mode::Perturbation).unwrap();
    let d = substitution_derivatives(&m, &s, 2).unwrap();
    let n = triple_norms(&s.field, &m.tables.nu, 2, &TimeContext::Substitution { derivs: &d.f }).unwrap();
    let min_sqrt_nu = m.tables.nu.iter().cloned().fold(f64::INFINITY, f64::min).sqrt();
    assert!(n.triple > 0.0);
    assert!(n.triple <= n.triple_nu / min_sqrt_nu);
}

#[test]
fn coercivity_is_positive_and_homogeneous() {
    let t = tables(10);
    let est = coercivity_estimate(&t, 20, 7).unwrap();
    eprintln!("{est:?}");
    assert!(est.delta > 0.0);
    assert!(est.lanczos_min <= est.rayleigh_min + 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g: Vec<f64> = t.vgrid.mu_table.iter().map(|m| rng.random_range(-1.0..1.0) * m.powf(0.25)).collect();
    let g2: Vec<f64> = g.iter().map(|x| 2.0 * x).collect();
    let (r1, r2) = (coercivity_ratio(&t, &g).unwrap(), coercivity_ratio(&t, &g2).unwrap());
    assert!((r1 - r2).abs() <= 1e-13 * r1);
    assert!(r1 >= est.delta);
}

fn random_slice(rng: &mut ChaCha8Rng, g: &VelocityGrid) -> Vec<f64> {
    g.sqrt_mu_table.iter().map(|s| rng.random_range(-1.0..1.0) * s).collect()
}

#[test]
fn trilinear_examples() {
    let t = tables(8);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let f = random_slice(&mut rng, &t.vgrid);
    let g = random_slice(&mut rng, &t.vgrid);
    let h = random_slice(&mut rng, &t.vgrid);
    let zero = vec![0.0; t.nv()];
    assert_eq!(trilinear_ratio(&t, &zero, &g, &h).unwrap(), Some(0.0));
    let r = trilinear_ratio(&t, &f, &g, &h).unwrap().unwrap();
    let f3: Vec<f64> = f.iter().map(|x| -3.0 * x).collect();
    let r3 = trilinear_ratio(&t, &f3, &g, &h).unwrap().unwrap();
    assert!((r - r3).abs() <= 1e-12 * r);
    let mut worst = 0.0f64;
    for _ in 0..40 {
        let f = random_slice(&mut rng, &t.vgrid);
        let g = random_slice(&mut rng, &t.vgrid);
        let h = random_slice(&mut rng, &t.vgrid);
        worst = worst.max(trilinear_ratio(&t, &f, &g, &h).unwrap().unwrap());
    }
    eprintln!("max trilinear ratio over 40 trials: {worst:.4}");
    assert!(worst <= 10.0);
}

#[test]
fn macro_bound_and_margins_on_small_data() {
    let m = model(16, 8);
    let mut spec = InitialSpec { a: vec![FourierMode { amplitude: 1e-3, wave: [1, 0, 0], phase: 0.0 }], ..Default::default() };
    spec.micro = vec![FourierMode { amplitude: 5e-4, wave: [1, 0, 0], phase: 0.2 }];
    let s = build_initial_data(&m, &spec, Mode::Perturbation).unwrap();
    let d = substitution_derivatives(&m, &s, 2).unwrap();
    let ctx = TimeContext::Substitution { derivs: &d.f };
    let ratio = macro_bound_ratio(&m, &s.field, 2, 0.5, &ctx).unwrap();
    assert!(ratio.is_finite() && ratio > 0.0);
    let delta = coercivity_estimate(&m.tables, 10, 1).unwrap().delta;
    for (gamma, form, micro) in coercivity_margins(&m, &s.field, 2, &ctx).unwrap() {
        assert!(form >= delta * micro * (1.0 - 1e-9), "{gamma:?}: {form} < {delta} * {micro}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn accumulated_integral_never_decreases(samples in prop::collection::vec(0.0f64..10.0, 1..40), dt in 0.001f64..1.0) {
        let mut acc = EnergyAccumulator::default();
        let mut last = 0.0;
        for (i, s) in samples.iter().enumerate() {
            let v = acc.push(i as f64 * dt, *s);
            prop_assert!(v >= last);
            last = v;
        }
    }

    #[test]
    fn decay_fit_recovers_rates(lambda in 0.0f64..20.0, c in 1e-6f64..1e3) {
        let t: Vec<f64> = (0..40).map(|i| i as f64 * 0.025).collect();
        let y: Vec<f64> = t.iter().map(|t| c * (-lambda * t).exp()).collect();
        let fit = decay_rate_fit(&t, &y, 0.1, c).unwrap();
        prop_assert!((fit.lambda - lambda).abs() < 1e-8 * (1.0 + lambda));
    }
}
