//! Spectral Poisson solves on the torus and the Poisson–Poincaré problem
//! Δφ = e^φ − ρ, solved by Newton from the split linear guess ΔŪ = 1 − ρ.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::phase_grid::{Fourier, ScalarFieldX};

/// Largest φ for which e^φ is evaluated.
const PHI_OVERFLOW: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoissonOptions {
    pub tol: f64,
    pub max_iters: usize,
    pub max_halvings: usize,
    /// Relative tolerance of the inner preconditioned CG solves.
    pub inner_tol: f64,
    pub inner_max_iters: usize,
}

impl Default for PoissonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-11,
            max_iters: 30,
            max_halvings: 5,
            inner_tol: 1e-13,
            inner_max_iters: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PotentialState {
    pub phi: ScalarFieldX,
    /// E = −∇φ; components beyond the grid dimension are zero.
    pub e_field: [Vec<f64>; 3],
    pub exp_phi: ScalarFieldX,
    pub newton_iters: usize,
    /// ‖G(φ)‖ in discrete L² at exit.
    pub residual_norm: f64,
    pub residual_history: Vec<f64>,
    /// Split linear part Ū (ΔŪ = 1 − ρ, mean zero).
    pub u_bar: ScalarFieldX,
    /// Mean removed from 1 − ρ before the linear solve.
    pub mean_defect: f64,
}

impl PotentialState {
    /// φ = 0, E = 0: the state of the neutral equilibrium ρ ≡ 1.
    pub fn equilibrium(grid: &crate::phase_grid::SpatialGrid) -> Self {
        let z = ScalarFieldX::zeros(grid);
        let mut one = z.clone();
        one.values.iter_mut().for_each(|v| *v = 1.0);
        Self {
            e_field: [vec![0.0; grid.len()], vec![0.0; grid.len()], vec![0.0; grid.len()]],
            phi: z.clone(),
            exp_phi: one,
            newton_iters: 0,
            residual_norm: 0.0,
            residual_history: vec![0.0],
            u_bar: z,
            mean_defect: 0.0,
        }
    }

    /// |∫ e^φ dx − 1|.
    pub fn neutrality_residual(&self) -> f64 {
        (self.exp_phi.mean() - 1.0).abs()
    }
}

/// Mean-zero solution of Δu = source − mean(source). Returns u and the
/// subtracted mean.
pub fn solve_linear_poisson(source: &ScalarFieldX) -> (ScalarFieldX, f64) {
    let fourier = Fourier::new(&source.grid);
    solve_linear_poisson_with(&fourier, source)
}

pub fn solve_linear_poisson_with(fourier: &Fourier, source: &ScalarFieldX) -> (ScalarFieldX, f64) {
    let g = fourier.grid();
    let mean = source.mean();
    let values = fourier.apply_multiplier(&source.values, |i| {
        let k = g.wave_vector(i);
        let k2 = k[0] * k[0] + k[1] * k[1] + k[2] * k[2];
        if k2 == 0.0 {
            Complex64::new(0.0, 0.0)
        } else {
            Complex64::new(-1.0 / k2, 0.0)
        }
    });
    (
        ScalarFieldX {
            grid: g.clone(),
            values,
        },
        mean,
    )
}

/// E = −∇φ by spectral differentiation.
pub fn electric_field(phi: &ScalarFieldX) -> [Vec<f64>; 3] {
    electric_field_with(&Fourier::new(&phi.grid), phi)
}

pub fn electric_field_with(fourier: &Fourier, phi: &ScalarFieldX) -> [Vec<f64>; 3] {
    let n = phi.values.len();
    let mut e = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for (d, comp) in e.iter_mut().enumerate().take(phi.grid.dims) {
        *comp = fourier
            .derivative(&phi.values, d, 1)
            .into_iter()
            .map(|x| -x)
            .collect();
    }
    e
}

/// Discrete H² norm: L² norms of all spectral derivatives through order 2
/// (each mixed partial counted once).
pub fn h2_norm(fourier: &Fourier, u: &[f64]) -> f64 {
    let g = fourier.grid();
    let dims = g.dims;
    let spec = fourier.forward(u);
    let n = g.len() as f64;
    let mut s = 0.0;
    for (i, z) in spec.iter().enumerate() {
        let k = g.wave_vector(i);
        let mut w = 1.0;
        for a in 0..dims {
            w += k[a] * k[a];
            for b in a..dims {
                w += (k[a] * k[b]).powi(2);
            }
        }
        s += w * z.norm_sqr();
    }
    // Parseval: Σ|u|² dx = Σ|û|² / N
    (s / n * g.cell_volume).sqrt()
}

fn exp_checked(phi: &[f64]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(phi.len());
    for &p in phi {
        if !(p <= PHI_OVERFLOW) {
            let max_phi = phi.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            return Err(Error::Overflow { max_phi: if p.is_nan() { p } else { max_phi } });
        }
        out.push(p.exp());
    }
    Ok(out)
}

/// Preconditioned CG for (−Δ + diag(w)) x = b, preconditioner (−Δ + mean w)⁻¹.
fn pcg(fourier: &Fourier, w: &[f64], b: &[f64], tol: f64, max_iters: usize) -> Vec<f64> {
    let g = fourier.grid();
    let m = w.iter().sum::<f64>() / w.len() as f64;
    let apply = |x: &[f64]| -> Vec<f64> {
        let lap = fourier.laplacian(x);
        lap.iter().zip(x).zip(w).map(|((l, x), w)| -l + w * x).collect()
    };
    let precond = |r: &[f64]| -> Vec<f64> {
        fourier.apply_multiplier(r, |i| {
            let k = g.wave_vector(i);
            Complex64::new(1.0 / (k[0] * k[0] + k[1] * k[1] + k[2] * k[2] + m), 0.0)
        })
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let bn = dot(b, b).sqrt();
    let mut x = vec![0.0; b.len()];
    if bn == 0.0 {
        return x;
    }
    let mut r = b.to_vec();
    let mut z = precond(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    for _ in 0..max_iters {
        let ap = apply(&p);
        let alpha = rz / dot(&p, &ap);
        for i in 0..x.len() {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if dot(&r, &r).sqrt() <= tol * bn {
            break;
        }
        z = precond(&r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..p.len() {
            p[i] = z[i] + beta * p[i];
        }
    }
    x
}

/// Solves (Δ − e^φ) u = rhs for the Newton linearization at a converged state.
pub fn solve_linearized(fourier: &Fourier, state: &PotentialState, rhs: &[f64]) -> Vec<f64> {
    let opts = PoissonOptions::default();
    let neg: Vec<f64> = rhs.iter().map(|x| -x).collect();
    pcg(fourier, &state.exp_phi.values, &neg, opts.inner_tol, opts.inner_max_iters)
}

/// Newton for G(φ) = Δφ − e^φ + ρ = 0.
pub fn solve_poisson_poincare(rho: &ScalarFieldX, init_guess: Option<&ScalarFieldX>) -> Result<PotentialState> {
    let fourier = Fourier::new(&rho.grid);
    solve_poisson_poincare_with(&fourier, rho, init_guess, &PoissonOptions::default())
}

pub fn solve_poisson_poincare_with(
    fourier: &Fourier,
    rho: &ScalarFieldX,
    init_guess: Option<&ScalarFieldX>,
    opts: &PoissonOptions,
) -> Result<PotentialState> {
    let grid = &rho.grid;
    if !rho.is_finite() {
        return Err(Error::Contract("density contains non-finite values".into()));
    }
    let one_minus: ScalarFieldX = ScalarFieldX {
        grid: grid.clone(),
        values: rho.values.iter().map(|r| 1.0 - r).collect(),
    };
    let (u_bar, mean_defect) = solve_linear_poisson_with(fourier, &one_minus);
    let mut phi = match init_guess {
        Some(g) => g.values.clone(),
        None => u_bar.values.clone(),
    };
    let residual = |phi: &[f64], e: &[f64]| -> Vec<f64> {
        let lap = fourier.laplacian(phi);
        lap.iter()
            .zip(e)
            .zip(&rho.values)
            .map(|((l, e), r)| l - e + r)
            .collect()
    };
    let mut e = exp_checked(&phi)?;
    let mut g = residual(&phi, &e);
    let mut gn = grid.l2(&g);
    let mut history = vec![gn];
    let mut iters = 0;
    while gn > opts.tol {
        if iters == opts.max_iters {
            return Err(Error::NewtonDiverged { residuals: history });
        }
        iters += 1;
        // (Δ − e^φ) δ = −G  ⇔  (−Δ + e^φ) δ = G
        let delta = pcg(fourier, &e, &g, opts.inner_tol, opts.inner_max_iters);
        let mut accepted = None;
        let mut fallback = None;
        let mut overflow = None;
        for h in 0..=opts.max_halvings {
            let step = 0.5f64.powi(h as i32);
            let trial: Vec<f64> = phi.iter().zip(&delta).map(|(p, d)| p + step * d).collect();
            match exp_checked(&trial) {
                Ok(te) => {
                    let tg = residual(&trial, &te);
                    let tn = grid.l2(&tg);
                    if tn < gn {
                        accepted = Some((trial, te, tg, tn));
                        break;
                    }
                    if fallback.is_none() {
                        fallback = Some((trial, te, tg, tn));
                    }
                }
                Err(err) => overflow = Some(err),
            }
        }
        let Some((p, ex, gg, n)) = accepted.or(fallback) else {
            return Err(overflow.expect("every trial overflowed"));
        };
        phi = p;
        e = ex;
        g = gg;
        gn = n;
        history.push(gn);
        if !gn.is_finite() {
            return Err(Error::NewtonDiverged { residuals: history });
        }
    }
    let phi = ScalarFieldX {
        grid: grid.clone(),
        values: phi,
    };
    Ok(PotentialState {
        e_field: electric_field_with(fourier, &phi),
        exp_phi: ScalarFieldX {
            grid: grid.clone(),
            values: e,
        },
        phi,
        newton_iters: iters,
        residual_norm: gn,
        residual_history: history,
        u_bar,
        mean_defect,
    })
}
