//! Norms, the energy functional, conservation residuals, coercivity and
//! macro-bound estimators, decay fits and the collision-frequency helper.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::collision_ops::{gamma, CollisionTables};
use crate::error::{Error, Result};
use crate::phase_grid::{derivative, AxisKind, Mode, PerturbationField, TimeContext};
use crate::time_stepper::{conserved_quantities, substitution_derivatives, Model, SimState, TimeDerivatives};

/// One row of the per-order norm table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormEntry {
    /// (t, x₁, x₂, x₃) orders.
    pub gamma: [usize; 4],
    pub beta: [usize; 3],
    pub l2: f64,
    pub l2_nu: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripleNorms {
    /// Σ ‖∂^γ_β f‖.
    pub triple: f64,
    /// Σ ‖∂^γ_β f‖_ν.
    pub triple_nu: f64,
    pub table: Vec<NormEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyReport {
    pub time: f64,
    pub triple_norm_sq: f64,
    pub triple_norm_nu_sq: f64,
    /// ‖|f|‖²(t) + trapezoid accumulation of ‖|f|‖²_ν.
    pub e_functional: f64,
    /// ∫₀ᵗ ‖|f|‖²_ν ds by the trapezoid rule over output times.
    pub nu_integral: f64,
    pub y_lyapunov: f64,
    pub mass_res: f64,
    pub momentum_res: [f64; 3],
    pub energy_res: f64,
    pub neutrality_res: f64,
    /// min over nodes of F = μ + √μ f.
    pub min_f: f64,
    pub newton_iters: usize,
    pub table: Vec<NormEntry>,
}

/// Running trapezoid integral of ‖|f|‖²_ν over output times.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EnergyAccumulator {
    /// Previous (t, ‖|f|‖²_ν) sample.
    pub last: Option<(f64, f64)>,
    pub integral: f64,
}

impl EnergyAccumulator {
    /// Adds the sample and returns the updated integral.
    pub fn push(&mut self, t: f64, nu_sq: f64) -> f64 {
        if let Some((t0, y0)) = self.last {
            self.integral += 0.5 * (y0 + nu_sq) * (t - t0);
        }
        self.last = Some((t, nu_sq));
        self.integral
    }
}

/// All (γ, β) with |γ| + |β| ≤ k_max; spatial orders only on the grid's axes.
pub fn multi_indices(dims: usize, k_max: usize) -> Vec<([usize; 4], [usize; 3])> {
    let mut out = Vec::new();
    let lim = |d: usize| if d == 0 || d <= dims { k_max } else { 0 };
    for g0 in 0..=lim(0) {
        for g1 in 0..=lim(1) {
            for g2 in 0..=lim(2) {
                for g3 in 0..=lim(3) {
                    for b1 in 0..=k_max {
                        for b2 in 0..=k_max {
                            for b3 in 0..=k_max {
                                if g0 + g1 + g2 + g3 + b1 + b2 + b3 <= k_max {
                                    out.push(([g0, g1, g2, g3], [b1, b2, b3]));
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// ∂^γ f with space-time orders γ = (t, x₁, x₂, x₃).
pub fn space_time_derivative(f: &PerturbationField, gamma: [usize; 4], ctx: &TimeContext) -> Result<PerturbationField> {
    let mut g = if gamma[0] > 0 {
        derivative(f, AxisKind::Time, 0, gamma[0], ctx)?
    } else {
        f.clone()
    };
    for d in 0..3 {
        if gamma[d + 1] > 0 {
            g = derivative(&g, AxisKind::Space, d, gamma[d + 1], ctx)?;
        }
    }
    Ok(g)
}

fn velocity_derivative(f: &PerturbationField, beta: [usize; 3]) -> Result<PerturbationField> {
    let mut g = f.clone();
    for (a, &b) in beta.iter().enumerate() {
        if b > 0 {
            g = derivative(&g, AxisKind::Velocity, a, b, &TimeContext::None)?;
        }
    }
    Ok(g)
}

/// ‖|f|‖ and ‖|f|‖_ν over |γ| + |β| ≤ k_max. Time derivatives come from
/// `ctx`; without one, any k_max ≥ 1 is an error.
pub fn triple_norms(f: &PerturbationField, nu: &[f64], k_max: usize, ctx: &TimeContext) -> Result<TripleNorms> {
    if f.mode != Mode::Perturbation {
        return Err(Error::Contract("triple norms need a PERTURBATION-mode field".into()));
    }
    let mut table = Vec::new();
    let mut cache: Vec<([usize; 4], PerturbationField)> = Vec::new();
    for (gamma, beta) in multi_indices(f.sgrid.dims, k_max) {
        let base = match cache.iter().find(|(g, _)| *g == gamma) {
            Some((_, b)) => b.clone(),
            None => {
                let b = space_time_derivative(f, gamma, ctx)?;
                cache.push((gamma, b.clone()));
                b
            }
        };
        let d = velocity_derivative(&base, beta)?;
        table.push(NormEntry {
            gamma,
            beta,
            l2: d.l2(),
            l2_nu: d.l2_weighted(nu),
        });
    }
    Ok(TripleNorms {
        triple: table.iter().map(|e| e.l2).sum(),
        triple_nu: table.iter().map(|e| e.l2_nu).sum(),
        table,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConservationResiduals {
    pub mass: f64,
    pub momentum: [f64; 3],
    pub energy: f64,
    /// ∫e^φ dx − 1.
    pub neutrality: f64,
}

/// Left sides of the mass, momentum and energy laws, plus neutrality.
pub fn conservation_residuals(model: &Model, state: &SimState) -> ConservationResiduals {
    let f = state.perturbation();
    let (mass, momentum, energy) = conserved_quantities(model, &f, &state.potential);
    ConservationResiduals {
        mass,
        momentum,
        energy,
        neutrality: state.potential.exp_phi.mean() - 1.0,
    }
}

/// y = Σ_{|γ|+|β|≤k} ‖∂^γ_β f‖² + ‖∂^γ∇φ‖² + ‖∂^γφ e^{φ/2}‖², all C_{|β|} = 1.
pub fn lyapunov(model: &Model, state: &SimState, table: &[NormEntry], derivs: &TimeDerivatives) -> Result<f64> {
    let pot = &state.potential;
    let g = &model.sgrid;
    let mut y = 0.0;
    let mut phi_cache: Vec<([usize; 4], f64)> = Vec::new();
    for e in table {
        y += e.l2 * e.l2;
        let gamma = e.gamma;
        let val = match phi_cache.iter().find(|(k, _)| *k == gamma) {
            Some((_, v)) => *v,
            None => {
                let mut p = match gamma[0] {
                    0 => pot.phi.values.clone(),
                    k => derivs
                        .phi
                        .get(k - 1)
                        .ok_or(Error::MissingTimeContext { order: k })?
                        .clone(),
                };
                for d in 0..3 {
                    if gamma[d + 1] > 0 {
                        p = model.fourier.derivative(&p, d, gamma[d + 1]);
                    }
                }
                let mut s = 0.0;
                for d in 0..g.dims {
                    let gd = model.fourier.derivative(&p, d, 1);
                    s += g.l2(&gd).powi(2);
                }
                let weighted: Vec<f64> = p
                    .iter()
                    .zip(&pot.phi.values)
                    .map(|(q, phi)| q * (0.5 * phi).exp())
                    .collect();
                s += g.l2(&weighted).powi(2);
                phi_cache.push((gamma, s));
                s
            }
        };
        y += val;
    }
    Ok(y)
}

/// Minimum of F = μ + √μ f (or of F itself in PHYSICAL mode).
pub fn min_distribution(field: &PerturbationField) -> f64 {
    match field.mode {
        Mode::Physical => field.min_value().0,
        Mode::Perturbation => field.to_mode(Mode::Physical).min_value().0,
    }
}

/// Full report for one output state. Time derivatives are taken by
/// substitution into the equations.
pub fn energy_report(model: &Model, state: &SimState, k_max: usize, accum: &mut EnergyAccumulator) -> Result<EnergyReport> {
    let f = state.perturbation();
    let derivs = substitution_derivatives(model, state, k_max.min(2))?;
    let ctx = TimeContext::Substitution { derivs: &derivs.f };
    let norms = triple_norms(&f, &model.tables.nu, k_max, &ctx)?;
    let y = lyapunov(model, state, &norms.table, &derivs)?;
    let cons = conservation_residuals(model, state);
    let nu_sq = norms.triple_nu * norms.triple_nu;
    let integral = accum.push(state.time, nu_sq);
    let tsq = norms.triple * norms.triple;
    Ok(EnergyReport {
        time: state.time,
        triple_norm_sq: tsq,
        triple_norm_nu_sq: nu_sq,
        e_functional: tsq + integral,
        nu_integral: integral,
        y_lyapunov: y,
        mass_res: cons.mass,
        momentum_res: cons.momentum,
        energy_res: cons.energy,
        neutrality_res: cons.neutrality,
        min_f: min_distribution(&state.field),
        newton_iters: state.potential.newton_iters,
        table: norms.table,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoercivityEstimate {
    /// min(rayleigh_min, lanczos_min).
    pub delta: f64,
    pub rayleigh_min: f64,
    pub lanczos_min: f64,
    pub lanczos_steps: usize,
}

/// ⟨Lg, g⟩ / |(I−P)g|²_ν for one velocity slice.
pub fn coercivity_ratio(tables: &CollisionTables, g: &[f64]) -> Result<f64> {
    let h = tables.null_basis().remove(g)?;
    let lh = tables.apply_l(&h);
    let num: f64 = lh.iter().zip(&h).map(|(a, b)| a * b).sum();
    let den: f64 = h.iter().zip(&tables.nu).map(|(x, n)| n * x * x).sum();
    Ok(num / den)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Smallest value of ⟨Lg, g⟩ / |(I−P)g|²_ν: the minimum over `trials`
/// random g, and the lowest eigenvalue of ν^{-1/2} L ν^{-1/2} on the
/// complement of ν^{-1/2}𝒩 by Lanczos with full reorthogonalization.
pub fn coercivity_estimate(tables: &CollisionTables, trials: usize, seed: u64) -> Result<CoercivityEstimate> {
    let nv = tables.nv();
    let vg = &tables.vgrid;
    let basis = tables.null_basis();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rayleigh_min = f64::INFINITY;
    for _ in 0..trials {
        let g: Vec<f64> = vg
            .mu_table
            .iter()
            .map(|m| rng.random_range(-1.0..1.0) * m.powf(0.25))
            .collect();
        rayleigh_min = rayleigh_min.min(coercivity_ratio(tables, &g)?);
    }

    let isq: Vec<f64> = tables.nu.iter().map(|n| 1.0 / n.sqrt()).collect();
    // orthonormal basis of ν^{-1/2}𝒩
    let mut cons: Vec<Vec<f64>> = Vec::new();
    for k in 0..5 {
        let mut q: Vec<f64> = basis.element(k).iter().zip(&isq).map(|(e, s)| e * s).collect();
        let n0 = dot(&q, &q).sqrt();
        for _ in 0..2 {
            for c in &cons {
                let p = dot(&q, c);
                q.iter_mut().zip(c).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = dot(&q, &q).sqrt();
        if !(n > 1e-10 * n0) {
            return Err(Error::Singular("complement of the collision invariants".into()));
        }
        q.iter_mut().for_each(|x| *x /= n);
        cons.push(q);
    }
    let project = |q: &mut Vec<f64>| {
        for c in &cons {
            let p = dot(q, c);
            q.iter_mut().zip(c).for_each(|(x, y)| *x -= p * y);
        }
    };
    let apply = |y: &[f64]| -> Vec<f64> {
        let g: Vec<f64> = y.iter().zip(&isq).map(|(a, s)| a * s).collect();
        let mut out: Vec<f64> = tables.apply_l(&g).iter().zip(&isq).map(|(a, s)| a * s).collect();
        project(&mut out);
        out
    };
    let mut q: Vec<f64> = (0..nv).map(|_| rng.random_range(-1.0..1.0)).collect();
    project(&mut q);
    let n = dot(&q, &q).sqrt();
    q.iter_mut().for_each(|x| *x /= n);
    let max_steps = 400.min(nv - 5);
    let mut vs: Vec<Vec<f64>> = vec![q];
    let mut alpha = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut ritz_prev = f64::INFINITY;
    let mut lanczos_min = f64::INFINITY;
    let mut steps = 0;
    for m in 0..max_steps {
        let mut w = apply(&vs[m]);
        let a = dot(&w, &vs[m]);
        alpha.push(a);
        for _ in 0..2 {
            for v in &vs {
                let p = dot(&w, v);
                w.iter_mut().zip(v).for_each(|(x, y)| *x -= p * y);
            }
            project(&mut w);
        }
        steps = m + 1;
        let k = alpha.len();
        let mut t = DMatrix::zeros(k, k);
        for i in 0..k {
            t[(i, i)] = alpha[i];
            if i + 1 < k {
                t[(i, i + 1)] = beta[i];
                t[(i + 1, i)] = beta[i];
            }
        }
        let ev = SymmetricEigen::new(t).eigenvalues;
        lanczos_min = ev.iter().cloned().fold(f64::INFINITY, f64::min);
        let b = dot(&w, &w).sqrt();
        if (ritz_prev - lanczos_min).abs() <= 1e-13 * lanczos_min.abs().max(1.0) && m >= 20 {
            break;
        }
        ritz_prev = lanczos_min;
        if b < 1e-12 {
            break;
        }
        beta.push(b);
        w.iter_mut().for_each(|x| *x /= b);
        vs.push(w);
    }
    Ok(CoercivityEstimate {
        delta: rayleigh_min.min(lanczos_min),
        rayleigh_min,
        lanczos_min,
        lanczos_steps: steps,
    })
}

/// Per space-time derivative of order ≤ k_max: ⟨L∂f, ∂f⟩ and ‖(I−P)∂f‖²_ν.
pub fn coercivity_margins(
    model: &Model,
    f: &PerturbationField,
    k_max: usize,
    ctx: &TimeContext,
) -> Result<Vec<([usize; 4], f64, f64)>> {
    let t = &model.tables;
    let basis = model.basis();
    let mut out = Vec::new();
    for (gamma, beta) in multi_indices(f.sgrid.dims, k_max) {
        if beta != [0, 0, 0] {
            continue;
        }
        let d = space_time_derivative(f, gamma, ctx)?;
        let (mut form, mut micro) = (0.0, 0.0);
        for ix in 0..d.nx() {
            let g = d.at_x(ix);
            let h = basis.remove(g)?;
            form += dot(&t.apply_l(g), g);
            micro += h.iter().zip(&t.nu).map(|(x, n)| n * x * x).sum::<f64>();
        }
        let w = f.vgrid.weight() * f.sgrid.cell_volume;
        out.push((gamma, form * w, micro * w));
    }
    Ok(out)
}

/// Σ(‖∂a‖ + ‖∂b‖ + ‖∂c‖) / (Σ‖(I−P)∂f‖ + √M₀ Σ‖∂f‖) over space-time
/// derivatives of order ≤ k_max.
pub fn macro_bound_ratio(model: &Model, f: &PerturbationField, k_max: usize, m0: f64, ctx: &TimeContext) -> Result<f64> {
    let basis = model.basis();
    let g = &model.sgrid;
    let (mut num, mut micro, mut full) = (0.0, 0.0, 0.0);
    for (gamma, beta) in multi_indices(g.dims, k_max) {
        if beta != [0, 0, 0] {
            continue;
        }
        let d = space_time_derivative(f, gamma, ctx)?;
        let m = crate::macro_micro::macro_fields_with(basis, &d)?;
        let bn = (0..3).map(|k| g.l2(&m.b[k]).powi(2)).sum::<f64>().sqrt();
        num += g.l2(&m.a) + bn + g.l2(&m.c);
        micro += m.norm_micro;
        full += m.norm_f;
    }
    Ok(num / (micro + m0.sqrt() * full))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayFit {
    /// Fitted rate: log y ≈ log C − λ t.
    pub lambda: f64,
    pub r2: f64,
    pub intercept: f64,
    /// Smallest Ĉ with y(t) ≤ Ĉ e^{−λt} ℰ(0) at every sample.
    pub envelope_constant: f64,
    pub samples: usize,
    /// True when samples below the floor were dropped.
    pub floor_limited: bool,
}

pub const DECAY_FLOOR: f64 = 1e-24;

/// Least-squares fit of log y against t after the leading
/// `transient_fraction` of the time span, truncated at the first sample
/// below the quadrature floor. Needs 10 samples in the window.
pub fn decay_rate_fit(t: &[f64], y: &[f64], transient_fraction: f64, e0: f64) -> Result<DecayFit> {
    if t.len() != y.len() {
        return Err(Error::Shape {
            expected: t.len(),
            got: y.len(),
        });
    }
    let floor_at = y.iter().position(|v| *v < DECAY_FLOOR).unwrap_or(y.len());
    let (t0, t1) = match (t.first(), t.last()) {
        (Some(a), Some(b)) => (*a, *b),
        _ => return Err(Error::Contract("empty series".into())),
    };
    let start = t0 + transient_fraction * (t1 - t0);
    let idx: Vec<usize> = (0..floor_at).filter(|&i| t[i] >= start - 1e-12).collect();
    if idx.len() < 10 {
        return Err(Error::Contract(format!(
            "decay fit needs at least 10 samples past the transient window, got {}",
            idx.len()
        )));
    }
    let n = idx.len() as f64;
    let xs: Vec<f64> = idx.iter().map(|&i| t[i]).collect();
    let ys: Vec<f64> = idx.iter().map(|&i| y[i].ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    let lambda = -slope;
    let envelope_constant = (0..floor_at)
        .map(|i| y[i] * (lambda * t[i]).exp() / e0)
        .fold(0.0, f64::max);
    Ok(DecayFit {
        lambda,
        r2,
        intercept,
        envelope_constant,
        samples: idx.len(),
        floor_limited: floor_at < y.len(),
    })
}

/// |⟨Γ(f, g), h⟩| / (sup|μ^{−1/4}h| |f| |g|) for velocity slices; `None` when
/// the denominator vanishes and the numerator does not.
pub fn trilinear_ratio(tables: &CollisionTables, f: &[f64], g: &[f64], h: &[f64]) -> Result<Option<f64>> {
    let w = tables.vgrid.weight();
    let gm = gamma(f, g, tables)?;
    if h.len() != gm.len() {
        return Err(Error::Shape {
            expected: gm.len(),
            got: h.len(),
        });
    }
    let num = (w * dot(&gm, h)).abs();
    if num == 0.0 {
        return Ok(Some(0.0));
    }
    let sup = h
        .iter()
        .zip(&tables.vgrid.mu_table)
        .map(|(x, m)| (x / m.powf(0.25)).abs())
        .fold(0.0, f64::max);
    let den = sup * (w * dot(f, f)).sqrt() * (w * dot(g, g)).sqrt();
    Ok(if den > 0.0 { Some(num / den) } else { None })
}

/// SI constants used by the collision-frequency formulas.
pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;
pub const VACUUM_PERMITTIVITY: f64 = 8.854_187_8128e-12;
pub const BOLTZMANN: f64 = 1.380_649e-23;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlasmaParams {
    pub n_e: f64,
    pub n_i: f64,
    /// Temperatures in kelvin.
    pub t_e: f64,
    pub t_i: f64,
    pub z_i: f64,
    pub m_e: f64,
    pub m_i: f64,
    pub ln_lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollisionFrequencies {
    pub ee: f64,
    pub ei: f64,
    pub ii: f64,
    pub ii_over_ee: f64,
}

/// Electron-electron, electron-ion and ion-ion Coulomb collision frequencies.
pub fn physical_frequencies(p: &PlasmaParams) -> Result<CollisionFrequencies> {
    let named = [
        ("n_e", p.n_e),
        ("n_i", p.n_i),
        ("t_e", p.t_e),
        ("t_i", p.t_i),
        ("z_i", p.z_i),
        ("m_e", p.m_e),
        ("m_i", p.m_i),
        ("ln_lambda", p.ln_lambda),
    ];
    if let Some((name, v)) = named.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::Config(format!("plasma parameter {name} must be positive, got {v}")));
    }
    let e4 = ELEMENTARY_CHARGE.powi(4);
    let eps2 = VACUUM_PERMITTIVITY * VACUUM_PERMITTIVITY;
    let pi = std::f64::consts::PI;
    let kte = (BOLTZMANN * p.t_e).powf(1.5);
    let kti = (BOLTZMANN * p.t_i).powf(1.5);
    let ee = p.n_e * e4 * p.ln_lambda / (3.0 * 6f64.sqrt() * pi * eps2 * p.m_e.sqrt() * kte);
    let ei = p.n_e * p.z_i.powi(2) * e4 * p.ln_lambda / (6.0 * 3f64.sqrt() * pi * eps2 * p.m_e.sqrt() * kte);
    let ii = p.n_i * p.z_i.powi(4) * e4 * p.ln_lambda / (3.0 * 6f64.sqrt() * pi * eps2 * p.m_i.sqrt() * kti);
    Ok(CollisionFrequencies {
        ee,
        ei,
        ii,
        ii_over_ee: ii / ee,
    })
}
