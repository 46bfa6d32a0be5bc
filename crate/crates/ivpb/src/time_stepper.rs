//! Time integration: Strang splitting for the perturbation f, a
//! positivity-preserving scheme for F, and conservation-balanced initial data.

use std::f64::consts::PI;
use std::sync::{Arc, Mutex};

use num_complex::Complex64;
use rayon::prelude::*;

use crate::collision_ops::{physical_terms_cols, CollisionTables};
use crate::diagnostics::{self, EnergyReport};
use crate::error::{Error, Result};
use crate::field_solver::{self, PoissonOptions, PotentialState};
use crate::macro_micro::NullBasis;
use crate::phase_grid::{mirror_sum, velocity_diff, Fourier, Mode, PerturbationField, ScalarFieldX, SpatialGrid, VelocityGrid};

/// Shared, immutable pieces of a discretization.
#[derive(Debug, Clone)]
pub struct Model {
    pub sgrid: SpatialGrid,
    pub vgrid: Arc<VelocityGrid>,
    pub tables: Arc<CollisionTables>,
    pub fourier: Fourier,
    pub poisson: PoissonOptions,
    substeps: Arc<Mutex<Vec<(f64, usize)>>>,
}

impl Model {
    pub fn new(sgrid: &SpatialGrid, tables: Arc<CollisionTables>, poisson: PoissonOptions) -> Self {
        Self {
            sgrid: sgrid.clone(),
            vgrid: tables.vgrid.clone(),
            fourier: Fourier::new(sgrid),
            tables,
            poisson,
            substeps: Arc::default(),
        }
    }

    pub fn basis(&self) -> &NullBasis {
        self.tables.null_basis()
    }

    /// Number m of collision substeps of length dt/m such that
    /// (dt/m) λ_max((1 + (dt/m)ν)⁻¹ L) ≤ 1, which keeps the explicit K
    /// update non-oscillatory. Cached per dt.
    pub fn collision_substeps(&self, dt: f64) -> usize {
        let mut cache = self.substeps.lock().expect("substep cache poisoned");
        if let Some(&(_, m)) = cache.iter().find(|(d, _)| *d == dt) {
            return m;
        }
        // the condition reads m ≥ dt λ(dt/m); λ grows as h shrinks, so iterate up
        let mut m = 1;
        loop {
            let need = dt * self.damped_spectral_radius(dt / m as f64);
            if m as f64 >= need {
                break;
            }
            m = (need.ceil() as usize).max(m + 1);
        }
        cache.push((dt, m));
        m
    }

    /// Largest eigenvalue of D^{-1/2} L D^{-1/2}, D = 1 + hν, by power iteration.
    pub fn damped_spectral_radius(&self, h: f64) -> f64 {
        let t = &self.tables;
        let isd: Vec<f64> = t.nu.iter().map(|n| 1.0 / (1.0 + h * n).sqrt()).collect();
        let mut x: Vec<f64> = (0..t.nv()).map(|i| 1.0 + ((i * 7919) % 101) as f64 / 101.0).collect();
        let mut lam = 0.0;
        for _ in 0..200 {
            let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
            let y: Vec<f64> = x.iter().zip(&isd).map(|(a, s)| a * s / nx).collect();
            x = t.apply_l(&y).iter().zip(&isd).map(|(a, s)| a * s).collect();
            lam = x.iter().map(|a| a * a).sum::<f64>().sqrt();
        }
        lam
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DtSpec {
    /// dt = cfl_safety · Δx / v_max, then shortened so t_end is hit exactly.
    Auto { cfl_safety: f64 },
    Fixed(f64),
}

/// amplitude · cos(2π k·x + phase).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FourierMode {
    pub amplitude: f64,
    pub wave: [i64; 3],
    pub phase: f64,
}

impl FourierMode {
    pub fn eval(&self, x: [f64; 3]) -> f64 {
        let arg: f64 = (0..3).map(|d| self.wave[d] as f64 * x[d]).sum();
        self.amplitude * (2.0 * PI * arg + self.phase).cos()
    }
}

fn profile(modes: &[FourierMode], x: [f64; 3]) -> f64 {
    modes.iter().map(|m| m.eval(x)).sum()
}

/// Initial f₀ = (a + b·v + c|v|²)√μ + m(x) v₁v₂√μ before balancing; each
/// profile is a sum of Fourier modes. v₁v₂√μ is orthogonal to the collision
/// invariants, so m is a purely microscopic part.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InitialSpec {
    pub a: Vec<FourierMode>,
    pub b: [Vec<FourierMode>; 3],
    pub c: Vec<FourierMode>,
    pub micro: Vec<FourierMode>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub nx: Vec<usize>,
    pub v_max: f64,
    pub nv: usize,
    pub sphere_order: usize,
    pub dt: DtSpec,
    pub t_end: f64,
    pub mode: Mode,
    /// Smallness threshold M₀; runs abort once ℰ exceeds 10·M₀.
    pub m0: f64,
    pub k_max: usize,
    pub conservation_correction: bool,
    /// Time between output states.
    pub output_interval: f64,
    pub initial: InitialSpec,
    pub poisson: PoissonOptions,
    /// Leading fraction of the run excluded from decay fits.
    pub transient_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            nx: vec![32],
            v_max: 6.0,
            nv: 16,
            sphere_order: 38,
            dt: DtSpec::Auto { cfl_safety: 0.5 },
            t_end: 1.0,
            mode: Mode::Perturbation,
            m0: 0.5,
            k_max: 2,
            conservation_correction: true,
            output_interval: 0.05,
            initial: InitialSpec::default(),
            poisson: PoissonOptions::default(),
            transient_fraction: 0.1,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::Config(format!("{key} {msg}")));
        match self.dt {
            DtSpec::Fixed(dt) if !(dt.is_finite() && dt > 0.0) => {
                return bad("time.dt", "must be positive or 'auto'")
            }
            DtSpec::Auto { cfl_safety } if !(cfl_safety > 0.0 && cfl_safety <= 1.0) => {
                return bad("time.cfl_safety", "must lie in (0, 1]")
            }
            _ => {}
        }
        if !(self.t_end.is_finite() && self.t_end >= 0.0) {
            return bad("time.t_end", "must be finite and >= 0");
        }
        if !(self.m0 > 0.0 && self.m0 < 1.0) {
            return bad("time.m0", "must lie in (0, 1)");
        }
        if self.k_max > 2 {
            return bad("output.k_max", "must be 0, 1 or 2");
        }
        if !(self.output_interval > 0.0) {
            return bad("output.interval", "must be positive");
        }
        if !(0.0..1.0).contains(&self.transient_fraction) {
            return bad("output.transient_fraction", "must lie in [0, 1)");
        }
        if self.nx.is_empty() || self.nx.len() > 3 {
            return bad("grid.nx", "must list 1 to 3 sizes");
        }
        SpatialGrid::new(&self.nx)?;
        let vg = crate::phase_grid::build_velocity_grid(self.v_max, self.nv)?;
        if self.mode == Mode::Physical {
            // F₀/μ = 1 + a + b·v + c|v|² + m v₁v₂ with every mode at its worst phase
            let amp = |m: &[FourierMode]| m.iter().map(|x| x.amplitude.abs()).sum::<f64>();
            let ia = &self.initial;
            let worst = vg
                .nodes
                .iter()
                .map(|v| {
                    let r2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
                    1.0 - amp(&ia.a)
                        - (0..3).map(|d| amp(&ia.b[d]) * v[d].abs()).sum::<f64>()
                        - amp(&ia.c) * r2
                        - amp(&ia.micro) * (v[0] * v[1]).abs()
                })
                .fold(f64::INFINITY, f64::min);
            if worst < 0.0 {
                return bad(
                    "initial_data",
                    &format!("can make F0 negative in PHYSICAL mode (worst-case F0/mu = {worst:.3e} on the velocity grid)"),
                );
            }
        }
        Ok(())
    }

    /// (dt, number of steps) with n·dt = t_end.
    pub fn resolve_dt(&self, sgrid: &SpatialGrid, v_max: f64) -> (f64, usize) {
        let raw = match self.dt {
            DtSpec::Fixed(dt) => dt,
            DtSpec::Auto { cfl_safety } => cfl_safety * sgrid.min_dx() / v_max,
        };
        if self.t_end == 0.0 {
            return (raw, 0);
        }
        let n = (self.t_end / raw - 1e-9).ceil().max(1.0) as usize;
        (self.t_end / n as f64, n)
    }

    pub fn steps_per_output(&self, dt: f64) -> usize {
        ((self.output_interval / dt).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    /// f in PERTURBATION mode, F in PHYSICAL mode.
    pub field: PerturbationField,
    pub potential: PotentialState,
    pub time: f64,
    pub step_index: usize,
    /// Field one step earlier, for backward time differences.
    pub prev_field: Option<PerturbationField>,
}

impl SimState {
    /// The state as a perturbation f.
    pub fn perturbation(&self) -> PerturbationField {
        self.field.to_mode(Mode::Perturbation)
    }
}

/// x-major/v-major storage to v-major columns (one column per x node).
pub(crate) fn to_cols(values: &[f64], nx: usize, nv: usize) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for ix in 0..nx {
        for j in 0..nv {
            out[j * nx + ix] = values[ix * nv + j];
        }
    }
    out
}

pub(crate) fn from_cols(cols: &[f64], nx: usize, nv: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols.len()];
    for j in 0..nv {
        for ix in 0..nx {
            out[ix * nv + j] = cols[j * nx + ix];
        }
    }
    out
}

/// ρ = ∫F dv normalized so that F = μ gives ρ ≡ 1 on the discrete grid.
pub fn density(field: &PerturbationField) -> ScalarFieldX {
    let vg = &field.vgrid;
    let w = vg.weight();
    let nv = field.nv();
    let values = (0..field.nx())
        .map(|ix| {
            let g = field.at_x(ix);
            let s = match field.mode {
                Mode::Perturbation => mirror_sum(nv, |j| vg.sqrt_mu_table[j] * g[j]),
                Mode::Physical => mirror_sum(nv, |j| g[j] - vg.mu_table[j]),
            };
            1.0 + w * s
        })
        .collect();
    ScalarFieldX {
        grid: field.sgrid.clone(),
        values,
    }
}

pub fn solve_potential(model: &Model, field: &PerturbationField, guess: Option<&ScalarFieldX>) -> Result<PotentialState> {
    field_solver::solve_poisson_poincare_with(&model.fourier, &density(field), guess, &model.poisson)
}

/// Exact free transport over τ: f̂_k(v) ← e^{−i k·v τ} f̂_k(v). On a Nyquist
/// axis the factor is cos(k v τ) so the field stays real.
pub fn transport_spectral(model: &Model, f: &PerturbationField, tau: f64) -> PerturbationField {
    let (nx, nv) = (f.nx(), f.nv());
    let g = &model.sgrid;
    let cols = to_cols(&f.values, nx, nv);
    let shifted: Vec<f64> = cols
        .par_chunks(nx)
        .enumerate()
        .flat_map_iter(|(j, col)| {
            let v = model.vgrid.nodes[j];
            model
                .fourier
                .apply_multiplier(col, |i| {
                    let k = g.wave_vector(i);
                    let mut z = Complex64::new(1.0, 0.0);
                    for d in 0..g.dims {
                        let arg = k[d] * v[d] * tau;
                        z *= if g.is_nyquist(i, d) {
                            Complex64::new(arg.cos(), 0.0)
                        } else {
                            Complex64::new(arg.cos(), -arg.sin())
                        };
                    }
                    z
                })
                .into_iter()
        })
        .collect();
    PerturbationField {
        values: from_cols(&shifted, nx, nv),
        ..f.clone()
    }
}

/// Free transport by periodic linear interpolation, F(x) ← F(x − vτ).
/// Weights are nonnegative.
pub fn transport_linear(model: &Model, f: &PerturbationField, tau: f64) -> PerturbationField {
    let (nx, nv) = (f.nx(), f.nv());
    let g = &model.sgrid;
    let cols = to_cols(&f.values, nx, nv);
    let shifted: Vec<f64> = cols
        .par_chunks(nx)
        .enumerate()
        .flat_map_iter(|(j, col)| {
            let v = model.vgrid.nodes[j];
            let mut cur = col.to_vec();
            for d in 0..g.dims {
                let n = g.n_per_dim[d];
                let stride: usize = g.n_per_dim[d + 1..g.dims].iter().product();
                let sigma = v[d] * tau / g.dx(d);
                let q = sigma.floor();
                let th = sigma - q;
                let q = q as i64;
                let mut next = vec![0.0; nx];
                for (idx, o) in next.iter_mut().enumerate() {
                    let i = ((idx / stride) % n) as i64;
                    let base = idx - (i as usize) * stride;
                    let at = |m: i64| cur[base + (m.rem_euclid(n as i64) as usize) * stride];
                    *o = (1.0 - th) * at(i - q) + th * at(i - q - 1);
                }
                cur = next;
            }
            cur.into_iter()
        })
        .collect();
    PerturbationField {
        values: from_cols(&shifted, nx, nv),
        ..f.clone()
    }
}

/// g(v − s) on one velocity slice by separable linear interpolation, zero
/// outside the lattice.
pub fn velocity_shift(g: &[f64], vgrid: &VelocityGrid, s: [f64; 3]) -> Vec<f64> {
    let n = vgrid.n_per_axis;
    let mut cur = g.to_vec();
    for (axis, &sa) in s.iter().enumerate() {
        if sa == 0.0 {
            continue;
        }
        let stride = match axis {
            0 => n * n,
            1 => n,
            _ => 1,
        };
        let sigma = sa / vgrid.dv;
        let q = sigma.floor();
        let th = sigma - q;
        let q = q as i64;
        let mut next = vec![0.0; g.len()];
        for (j, o) in next.iter_mut().enumerate() {
            let i = ((j / stride) % n) as i64;
            let base = j - (i as usize) * stride;
            let at = |m: i64| {
                if m < 0 || m >= n as i64 {
                    0.0
                } else {
                    cur[base + m as usize * stride]
                }
            };
            *o = (1.0 - th) * at(i - q) + th * at(i - q - 1);
        }
        cur = next;
    }
    cur
}

/// Field substep for f over dt with E frozen: f ← f(v − E dt), then the
/// exp(dt (v/2)·E) multiplier and the source dt E·v√μ. With `correct`, the
/// five moments are then reset to the values of the exact shift of F.
pub fn field_substep(
    model: &Model,
    f: &PerturbationField,
    potential: &PotentialState,
    dt: f64,
    correct: bool,
) -> PerturbationField {
    let vg = &model.vgrid;
    let basis = model.basis();
    let mass_mu = vg.weight() * mirror_sum(vg.len(), |j| vg.mu_table[j]);
    let mut out = f.clone();
    out.values
        .par_chunks_mut(f.nv())
        .enumerate()
        .for_each(|(ix, slice)| {
            let e = [
                potential.e_field[0][ix],
                potential.e_field[1][ix],
                potential.e_field[2][ix],
            ];
            let s = e.map(|c| c * dt);
            let old = basis.moments(slice);
            let mut g = velocity_shift(slice, vg, s);
            for (j, x) in g.iter_mut().enumerate() {
                let v = vg.nodes[j];
                let ve = v[0] * e[0] + v[1] * e[1] + v[2] * e[2];
                *x = *x * (0.5 * dt * ve).exp() + dt * ve * vg.sqrt_mu_table[j];
            }
            if correct {
                let n0 = mass_mu + old[0];
                let s2 = s[0] * s[0] + s[1] * s[1] + s[2] * s[2];
                let target = [
                    old[0],
                    old[1] + s[0] * n0,
                    old[2] + s[1] * n0,
                    old[3] + s[2] * n0,
                    old[4] + 2.0 * (s[0] * old[1] + s[1] * old[2] + s[2] * old[3]) + s2 * n0,
                ];
                let now = basis.moments(&g);
                let fix = basis.coefficients_for_moments(std::array::from_fn(|k| target[k] - now[k]));
                for (x, d) in g.iter_mut().zip(basis.reconstruct(&fix)) {
                    *x += d;
                }
            }
            slice.copy_from_slice(&g);
        });
    out
}

/// Physical-mode field substep F ← F(v − E dt) with nonnegative weights.
pub fn field_substep_physical(model: &Model, f: &PerturbationField, potential: &PotentialState, dt: f64) -> PerturbationField {
    let mut out = f.clone();
    out.values
        .par_chunks_mut(f.nv())
        .enumerate()
        .for_each(|(ix, slice)| {
            let s = [0, 1, 2].map(|d| potential.e_field[d][ix] * dt);
            let g = velocity_shift(slice, &model.vgrid, s);
            slice.copy_from_slice(&g);
        });
    out
}

/// f ← [f + h(Kf + Γ_gain(f, f))] / (1 + h(ν + ℓ(f))) with ℓ(f) the Γ_loss
/// rate, applied m = `Model::collision_substeps(dt)` times with h = dt/m;
/// with `correct`, each increment is projected off the invariants.
pub fn collision_substep(model: &Model, f: &PerturbationField, dt: f64, correct: bool) -> PerturbationField {
    let m = model.collision_substeps(dt);
    let mut out = collision_update(model, f, dt / m as f64, correct);
    for _ in 1..m {
        out = collision_update(model, &out, dt / m as f64, correct);
    }
    out
}

fn collision_update(model: &Model, f: &PerturbationField, dt: f64, correct: bool) -> PerturbationField {
    let (nx, nv) = (f.nx(), f.nv());
    let t = &model.tables;
    let cols = to_cols(&f.values, nx, nv);
    let kf = t.apply_k_cols(&cols, nx);
    let gain = t.gamma_gain_cols(&cols, &cols, nx);
    let rate = t.loss_rate_cols(&cols, nx);
    let mut new = vec![0.0; cols.len()];
    for j in 0..nv {
        for c in 0..nx {
            let i = j * nx + c;
            new[i] = (cols[i] + dt * (kf[i] + gain[i])) / (1.0 + dt * (t.nu[j] + rate[i]));
        }
    }
    let mut out = PerturbationField {
        values: from_cols(&new, nx, nv),
        ..f.clone()
    };
    if correct {
        let basis = model.basis();
        out.values
            .par_chunks_mut(nv)
            .zip(f.values.par_chunks(nv))
            .for_each(|(o, old)| {
                let inc: Vec<f64> = o.iter().zip(old).map(|(a, b)| a - b).collect();
                let inc = basis.remove(&inc).expect("slice length matches basis");
                for ((x, b), d) in o.iter_mut().zip(old).zip(inc) {
                    *x = b + d;
                }
            });
    }
    out
}

/// F ← [F + dt Q_gain(F, F)] / (1 + dt R(F)).
pub fn collision_substep_physical(model: &Model, f: &PerturbationField, dt: f64) -> PerturbationField {
    let (nx, nv) = (f.nx(), f.nv());
    let cols = to_cols(&f.values, nx, nv);
    let (gain, rate) = physical_terms_cols(&cols, &cols, nx, &model.tables);
    let new: Vec<f64> = cols
        .iter()
        .zip(&gain)
        .zip(&rate)
        .map(|((x, g), r)| (x + dt * g) / (1.0 + dt * r))
        .collect();
    PerturbationField {
        values: from_cols(&new, nx, nv),
        ..f.clone()
    }
}

fn finite_or(field: &PerturbationField, step: usize) -> Result<()> {
    if field.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { step })
    }
}

/// One Strang step: half transport, field, collision, half transport.
pub fn step_perturbation(model: &Model, state: &SimState, dt: f64, correct: bool) -> Result<SimState> {
    if state.field.mode != Mode::Perturbation {
        return Err(Error::Contract("step_perturbation needs a PERTURBATION-mode state".into()));
    }
    let step = state.step_index + 1;
    let f = transport_spectral(model, &state.field, 0.5 * dt);
    let pot = solve_potential(model, &f, Some(&state.potential.phi))?;
    let f = field_substep(model, &f, &pot, dt, correct);
    finite_or(&f, step)?;
    let f = collision_substep(model, &f, dt, correct);
    finite_or(&f, step)?;
    let f = transport_spectral(model, &f, 0.5 * dt);
    finite_or(&f, step)?;
    let potential = solve_potential(model, &f, Some(&pot.phi))?;
    Ok(SimState {
        field: f,
        potential,
        time: state.time + dt,
        step_index: step,
        prev_field: Some(state.field.clone()),
    })
}

/// Positivity-preserving step for F.
pub fn step_physical(model: &Model, state: &SimState, dt: f64) -> Result<SimState> {
    if state.field.mode != Mode::Physical {
        return Err(Error::Contract("step_physical needs a PHYSICAL-mode state".into()));
    }
    let step = state.step_index + 1;
    let f = transport_linear(model, &state.field, 0.5 * dt);
    let pot = solve_potential(model, &f, Some(&state.potential.phi))?;
    let f = field_substep_physical(model, &f, &pot, dt);
    let f = collision_substep_physical(model, &f, dt);
    let f = transport_linear(model, &f, 0.5 * dt);
    finite_or(&f, step)?;
    let (min, ix, j) = f.min_value();
    if min < 0.0 {
        return Err(Error::Invariant(format!(
            "F = {min:e} < 0 at x-node {ix}, v-node {j} after step {step}"
        )));
    }
    let potential = solve_potential(model, &f, Some(&pot.phi))?;
    Ok(SimState {
        field: f,
        potential,
        time: state.time + dt,
        step_index: step,
        prev_field: Some(state.field.clone()),
    })
}

/// The three conserved quantities (mass, momentum, energy) of a state.
pub fn conserved_quantities(model: &Model, f: &PerturbationField, pot: &PotentialState) -> (f64, [f64; 3], f64) {
    let basis = model.basis();
    let vol = model.sgrid.cell_volume;
    let mut m = [0.0; 5];
    for ix in 0..f.nx() {
        let mk = basis.moments(f.at_x(ix));
        for k in 0..5 {
            m[k] += mk[k];
        }
    }
    let m = m.map(|x| x * vol);
    let phi = &pot.phi.values;
    let field_energy: f64 = (0..phi.len())
        .map(|i| phi[i] * pot.exp_phi.values[i] + 0.5 * (0..3).map(|d| pot.e_field[d][i].powi(2)).sum::<f64>())
        .sum::<f64>()
        * vol;
    (m[0], [m[1], m[2], m[3]], 0.5 * m[4] + field_energy)
}

fn unbalanced_profile(model: &Model, spec: &InitialSpec) -> PerturbationField {
    PerturbationField::from_fn(&model.sgrid, &model.vgrid, Mode::Perturbation, |x, v| {
        let r2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
        let mac = profile(&spec.a, x)
            + (0..3).map(|d| profile(&spec.b[d], x) * v[d]).sum::<f64>()
            + profile(&spec.c, x) * r2;
        let mic = profile(&spec.micro, x) * v[0] * v[1];
        (mac + mic) * crate::phase_grid::maxwellian(&v).sqrt()
    })
}

/// Balanced initial data. Mass and momentum: the spatial means of the
/// corresponding moments are removed with uniform √μ and v√μ terms. Energy:
/// a uniform κ(|v|² − ϱ)√μ term, ϱ making it mass-free, is added to the c
/// profile, with κ found by a secant iteration that re-solves the
/// Poisson–Poincaré equation at every trial.
pub fn build_initial_data(model: &Model, spec: &InitialSpec, mode: Mode) -> Result<SimState> {
    let mut f = unbalanced_profile(model, spec);
    let basis = model.basis();
    let gram = basis.gram;
    let nx = f.nx();
    let mut mean = [0.0; 4];
    for ix in 0..nx {
        let m = basis.moments(f.at_x(ix));
        for k in 0..4 {
            mean[k] += m[k] / nx as f64;
        }
    }
    let mut shift = [0.0; 5];
    for k in 0..4 {
        shift[k] = -mean[k] / gram[(k, k)];
    }
    let uniform = basis.reconstruct(&shift);
    for ix in 0..nx {
        for (x, u) in f.at_x_mut(ix).iter_mut().zip(&uniform) {
            *x += u;
        }
    }
    let mut dir = [0.0; 5];
    dir[4] = 1.0;
    dir[0] = -gram[(0, 4)] / gram[(0, 0)];
    let heat = basis.reconstruct(&dir);

    let with_kappa = |kappa: f64| -> PerturbationField {
        let mut g = f.clone();
        for ix in 0..nx {
            for (x, h) in g.at_x_mut(ix).iter_mut().zip(&heat) {
                *x += kappa * h;
            }
        }
        g
    };
    let mut guess: Option<ScalarFieldX> = None;
    let mut residual = |kappa: f64| -> Result<(f64, PerturbationField, PotentialState)> {
        let g = with_kappa(kappa);
        let pot = solve_potential(model, &g, guess.as_ref())?;
        guess = Some(pot.phi.clone());
        let (_, _, e) = conserved_quantities(model, &g, &pot);
        Ok((e, g, pot))
    };
    const TOL: f64 = 1e-10;
    const MAX_IT: usize = 50;
    let (mut k0, mut r0) = (0.0, residual(0.0)?);
    if r0.0.abs() > TOL {
        let mut k1 = 1e-3;
        let mut r1 = residual(k1)?;
        let mut it = 0;
        while r1.0.abs() > TOL {
            it += 1;
            if it > MAX_IT || r1.0 == r0.0 {
                return Err(Error::SecantFailed {
                    iterations: it.min(MAX_IT),
                    residual: r1.0.abs(),
                });
            }
            let k2 = k1 - r1.0 * (k1 - k0) / (r1.0 - r0.0);
            let r2 = residual(k2)?;
            (k0, r0, k1, r1) = (k1, r1, k2, r2);
        }
        r0 = r1;
    }
    let (_, g, pot) = r0;
    let nv = g.nv();
    let vg = &model.vgrid;
    for (i, x) in g.values.iter().enumerate() {
        let j = i % nv;
        let big_f = vg.mu_table[j] + vg.sqrt_mu_table[j] * x;
        if big_f < 0.0 {
            return Err(Error::NegativeInitial {
                x: i / nv,
                v: j,
                value: big_f,
            });
        }
    }
    Ok(SimState {
        field: g.to_mode(mode),
        potential: pot,
        time: 0.0,
        step_index: 0,
        prev_field: None,
    })
}

/// Right side of ∂_t f = −v·∇_x f − E·∇_v f + (v/2)·E f + E·v√μ − Lf + Γ(f, f).
pub fn rhs(model: &Model, f: &PerturbationField, pot: &PotentialState) -> PerturbationField {
    let zero = [vec![], vec![], vec![]];
    rhs_linearized(model, f, f, pot, &zero)
}

/// Directional derivative of the right side: evaluated at (f, E) along
/// (df, dE) it gives the time derivative of rhs when df = ∂_t f, dE = ∂_t E.
/// When `df` is `f` and `de` empty, the plain right side.
fn rhs_linearized(
    model: &Model,
    f: &PerturbationField,
    df: &PerturbationField,
    pot: &PotentialState,
    de: &[Vec<f64>; 3],
) -> PerturbationField {
    let plain = de[0].is_empty();
    let (nx, nv) = (f.nx(), f.nv());
    let vg = &model.vgrid;
    let t = &model.tables;
    let dims = model.sgrid.dims;
    let mut out = vec![0.0; f.values.len()];
    // −v·∇_x df
    for d in 0..dims {
        let cols = to_cols(&df.values, nx, nv);
        let der: Vec<f64> = cols
            .par_chunks(nx)
            .flat_map_iter(|c| model.fourier.derivative(c, d, 1).into_iter())
            .collect();
        let der = from_cols(&der, nx, nv);
        for (i, o) in out.iter_mut().enumerate() {
            *o -= vg.nodes[i % nv][d] * der[i];
        }
    }
    // field terms on df with E, and on f with dE
    let field_terms = |g: &[f64], e: [f64; 3], o: &mut [f64], source: bool| {
        for a in 0..3 {
            if e[a] == 0.0 {
                continue;
            }
            let dg = velocity_diff(g, vg, a);
            for j in 0..nv {
                o[j] += e[a] * (0.5 * vg.nodes[j][a] * g[j] - dg[j]);
                if source {
                    o[j] += e[a] * vg.nodes[j][a] * vg.sqrt_mu_table[j];
                }
            }
        }
    };
    out.par_chunks_mut(nv).enumerate().for_each(|(ix, o)| {
        let e = [0, 1, 2].map(|d| pot.e_field[d][ix]);
        field_terms(df.at_x(ix), e, o, plain);
        if !plain {
            let de = [0, 1, 2].map(|d| de[d][ix]);
            field_terms(f.at_x(ix), de, o, true);
        }
    });
    // −L df + Γ(f, df) + Γ(df, f)  (or −Lf + Γ(f, f))
    let cf = to_cols(&f.values, nx, nv);
    let cd = to_cols(&df.values, nx, nv);
    let kd = t.apply_k_cols(&cd, nx);
    let mut coll = vec![0.0; cf.len()];
    if plain {
        let gain = t.gamma_gain_cols(&cf, &cf, nx);
        let rate = t.loss_rate_cols(&cf, nx);
        for j in 0..nv {
            for c in 0..nx {
                let i = j * nx + c;
                coll[i] = kd[i] - t.nu[j] * cd[i] + gain[i] - rate[i] * cf[i];
            }
        }
    } else {
        let g1 = t.gamma_gain_cols(&cf, &cd, nx);
        let g2 = t.gamma_gain_cols(&cd, &cf, nx);
        let rf = t.loss_rate_cols(&cf, nx);
        let rd = t.loss_rate_cols(&cd, nx);
        for j in 0..nv {
            for c in 0..nx {
                let i = j * nx + c;
                coll[i] = kd[i] - t.nu[j] * cd[i] + g1[i] + g2[i] - rf[i] * cd[i] - rd[i] * cf[i];
            }
        }
    }
    let coll = from_cols(&coll, nx, nv);
    for (o, c) in out.iter_mut().zip(coll) {
        *o += c;
    }
    PerturbationField {
        values: out,
        ..f.clone()
    }
}

/// ∂_t f, ∂_t² f and ∂_t φ, ∂_t² φ obtained from the equations themselves.
#[derive(Debug, Clone)]
pub struct TimeDerivatives {
    pub f: Vec<PerturbationField>,
    pub phi: Vec<Vec<f64>>,
}

/// Time derivatives up to `order` (≤ 2) by substitution. The potential
/// derivatives solve (Δ − e^φ)φ_t = −∫√μ f_t and
/// (Δ − e^φ)φ_tt = e^φ φ_t² − ∫√μ f_tt.
pub fn substitution_derivatives(model: &Model, state: &SimState, order: usize) -> Result<TimeDerivatives> {
    if order > 2 {
        return Err(Error::Unsupported(format!("time derivative order {order}")));
    }
    let f = state.perturbation();
    let pot = &state.potential;
    let mut out = TimeDerivatives { f: vec![], phi: vec![] };
    if order == 0 {
        return Ok(out);
    }
    let moment = |g: &PerturbationField| -> Vec<f64> {
        density(g).values.into_iter().map(|r| r - 1.0).collect()
    };
    let ft = rhs(model, &f, pot);
    let rhs1: Vec<f64> = moment(&ft).into_iter().map(|m| -m).collect();
    let phit = field_solver::solve_linearized(&model.fourier, pot, &rhs1);
    out.f.push(ft);
    out.phi.push(phit);
    if order == 2 {
        let phit_field = ScalarFieldX {
            grid: model.sgrid.clone(),
            values: out.phi[0].clone(),
        };
        let et = field_solver::electric_field_with(&model.fourier, &phit_field);
        let ftt = rhs_linearized(model, &f, &out.f[0], pot, &et);
        let m2 = moment(&ftt);
        let rhs2: Vec<f64> = (0..m2.len())
            .map(|i| pot.exp_phi.values[i] * out.phi[0][i].powi(2) - m2[i])
            .collect();
        let phitt = field_solver::solve_linearized(&model.fourier, pot, &rhs2);
        out.f.push(ftt);
        out.phi.push(phitt);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RunStatus {
    Completed,
    /// ℰ exceeded 10·M₀ at the given time.
    EarlyAbort { time: f64, e_functional: f64 },
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<SimState>,
    pub reports: Vec<EnergyReport>,
    pub status: RunStatus,
    pub dt: f64,
    pub steps: usize,
}

/// Builds the initial data and advances it to t_end.
pub fn run(config: &RunConfig, model: &Model) -> Result<Trajectory> {
    config.validate()?;
    let s0 = build_initial_data(model, &config.initial, config.mode)?;
    run_from(config, model, s0, |_, _| Ok(()))
}

/// Advances `state` to t_end, calling `observe` at each output time.
pub fn run_from<O>(config: &RunConfig, model: &Model, state: SimState, observe: O) -> Result<Trajectory>
where
    O: FnMut(&SimState, &EnergyReport) -> Result<()>,
{
    run_continued(config, model, state, diagnostics::EnergyAccumulator::default(), observe)
}

/// As [`run_from`], continuing the ℰ integral from `accum`. Outputs fall on
/// global step indices, so a run resumed from an output state reproduces the
/// uninterrupted one.
pub fn run_continued<O>(
    config: &RunConfig,
    model: &Model,
    state: SimState,
    mut accum: diagnostics::EnergyAccumulator,
    mut observe: O,
) -> Result<Trajectory>
where
    O: FnMut(&SimState, &EnergyReport) -> Result<()>,
{
    config.validate()?;
    let (dt, _) = config.resolve_dt(&model.sgrid, model.vgrid.v_max);
    let remaining = {
        let left = config.t_end - state.time;
        if left <= 0.0 {
            0
        } else {
            ((left / dt) - 1e-9).ceil() as usize
        }
    };
    let cadence = config.steps_per_output(dt);
    let mut states = Vec::new();
    let mut reports = Vec::new();
    let mut status = RunStatus::Completed;
    let mut cur = state;
    let emit = |s: &SimState, accum: &mut diagnostics::EnergyAccumulator| -> Result<EnergyReport> {
        diagnostics::energy_report(model, s, config.k_max, accum)
    };
    let r = emit(&cur, &mut accum)?;
    observe(&cur, &r)?;
    let abort = |r: &EnergyReport| r.e_functional > 10.0 * config.m0;
    if abort(&r) {
        status = RunStatus::EarlyAbort {
            time: cur.time,
            e_functional: r.e_functional,
        };
    }
    states.push(cur.clone());
    reports.push(r);
    let mut taken = 0;
    if status == RunStatus::Completed {
        for n in 1..=remaining {
            cur = match config.mode {
                Mode::Perturbation => step_perturbation(model, &cur, dt, config.conservation_correction)?,
                Mode::Physical => step_physical(model, &cur, dt)?,
            };
            taken = n;
            if cur.step_index % cadence == 0 || n == remaining {
                let r = emit(&cur, &mut accum)?;
                observe(&cur, &r)?;
                let stop = abort(&r);
                if stop {
                    status = RunStatus::EarlyAbort {
                        time: cur.time,
                        e_functional: r.e_functional,
                    };
                }
                states.push(cur.clone());
                reports.push(r);
                if stop {
                    break;
                }
            }
        }
    }
    Ok(Trajectory {
        states,
        reports,
        status,
        dt,
        steps: taken,
    })
}
