//! Projection onto the collision invariants, the macroscopic fields (a, b, c)
//! and the coefficient identities obtained by expanding the kinetic equation
//! in the thirteen moments [1, v_i, v_i v_j, v_i², v_i|v|²]√μ.

use nalgebra::{DMatrix, DVector, Matrix5, Vector5};

use crate::collision_ops::CollisionTables;
use crate::error::{Error, Result};
use crate::phase_grid::{
    derivative, mirror_sum, velocity_diff, AxisKind, Fourier, Mode, PerturbationField, TimeContext, VelocityGrid,
};

/// Polynomial part of the k-th invariant: 1, v₁, v₂, v₃, |v|².
pub fn basis_poly(k: usize, v: &[f64; 3]) -> f64 {
    match k {
        0 => 1.0,
        1..=3 => v[k - 1],
        _ => v[0] * v[0] + v[1] * v[1] + v[2] * v[2],
    }
}

/// Discrete Gram system of {√μ, v√μ, |v|²√μ}; the basis is not orthogonal.
#[derive(Debug, Clone)]
pub struct NullBasis {
    e: Vec<[f64; 5]>,
    w: f64,
    chol: nalgebra::Cholesky<f64, nalgebra::U5>,
    pub gram: Matrix5<f64>,
}

impl NullBasis {
    pub fn new(vg: &VelocityGrid) -> Self {
        Self::try_new(vg).expect("Gram matrix of the collision invariants is singular")
    }

    pub fn try_new(vg: &VelocityGrid) -> Result<Self> {
        let e: Vec<[f64; 5]> = vg
            .nodes
            .iter()
            .zip(&vg.sqrt_mu_table)
            .map(|(v, s)| {
                let mut r = [0.0; 5];
                for (k, x) in r.iter_mut().enumerate() {
                    *x = s * basis_poly(k, v);
                }
                r
            })
            .collect();
        let w = vg.weight();
        let mut gram = Matrix5::zeros();
        for k in 0..5 {
            for l in 0..5 {
                gram[(k, l)] = w * mirror_sum(e.len(), |j| e[j][k] * e[j][l]);
            }
        }
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::Singular("Gram matrix of the collision invariants".into()))?;
        Ok(Self { e, w, chol, gram })
    }

    pub fn len(&self) -> usize {
        self.e.len()
    }

    pub fn is_empty(&self) -> bool {
        self.e.is_empty()
    }

    pub fn element(&self, k: usize) -> Vec<f64> {
        self.e.iter().map(|r| r[k]).collect()
    }

    /// The five discrete moments ⟨g, e_k⟩.
    pub fn moments(&self, g: &[f64]) -> [f64; 5] {
        let nv = self.e.len();
        let mut m = [0.0; 5];
        for j in 0..nv / 2 {
            let (r, q) = (&self.e[j], &self.e[nv - 1 - j]);
            for k in 0..5 {
                m[k] += r[k] * g[j] + q[k] * g[nv - 1 - j];
            }
        }
        m.map(|v| v * self.w)
    }

    /// Coefficients (a, b₁, b₂, b₃, c) of the orthogonal projection.
    pub fn coefficients(&self, g: &[f64]) -> [f64; 5] {
        let rhs = Vector5::from(self.moments(g));
        let s = self.chol.solve(&rhs);
        [s[0], s[1], s[2], s[3], s[4]]
    }

    /// Coefficients that reproduce prescribed moments.
    pub fn coefficients_for_moments(&self, m: [f64; 5]) -> [f64; 5] {
        let s = self.chol.solve(&Vector5::from(m));
        [s[0], s[1], s[2], s[3], s[4]]
    }

    pub fn reconstruct(&self, coef: &[f64; 5]) -> Vec<f64> {
        self.e
            .iter()
            .map(|r| (0..5).map(|k| coef[k] * r[k]).sum())
            .collect()
    }

    /// (I − P) g.
    pub fn remove(&self, g: &[f64]) -> Result<Vec<f64>> {
        if g.len() != self.len() {
            return Err(Error::Shape {
                expected: self.len(),
                got: g.len(),
            });
        }
        let coef = self.coefficients(g);
        Ok(g.iter()
            .zip(&self.e)
            .map(|(x, r)| x - (0..5).map(|k| coef[k] * r[k]).sum::<f64>())
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MacroTriple {
    pub a: f64,
    pub b: [f64; 3],
    pub c: f64,
}

impl MacroTriple {
    fn from_coef(c: [f64; 5]) -> Self {
        Self {
            a: c[0],
            b: [c[1], c[2], c[3]],
            c: c[4],
        }
    }
}

/// (a, b, c) and Pg for one velocity slice.
pub fn project(g_at_x: &[f64], vgrid: &VelocityGrid) -> Result<(MacroTriple, Vec<f64>)> {
    let basis = NullBasis::try_new(vgrid)?;
    project_with(&basis, g_at_x)
}

pub fn project_with(basis: &NullBasis, g: &[f64]) -> Result<(MacroTriple, Vec<f64>)> {
    if g.len() != basis.len() {
        return Err(Error::Shape {
            expected: basis.len(),
            got: g.len(),
        });
    }
    let coef = basis.coefficients(g);
    Ok((MacroTriple::from_coef(coef), basis.reconstruct(&coef)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MacroFields {
    pub a: Vec<f64>,
    pub b: [Vec<f64>; 3],
    pub c: Vec<f64>,
    pub norm_pf: f64,
    pub norm_micro: f64,
    pub norm_f: f64,
    /// |‖Pf‖² + ‖(I−P)f‖² − ‖f‖²| / ‖f‖² (0 when f = 0).
    pub pythagoras_defect: f64,
}

/// Per-node projection of a perturbation field.
pub fn macro_fields(f: &PerturbationField) -> Result<MacroFields> {
    if f.mode != Mode::Perturbation {
        return Err(Error::Contract(
            "macro_fields needs a PERTURBATION-mode field; convert F first".into(),
        ));
    }
    let basis = NullBasis::try_new(&f.vgrid)?;
    macro_fields_with(&basis, f)
}

pub fn macro_fields_with(basis: &NullBasis, f: &PerturbationField) -> Result<MacroFields> {
    let nx = f.nx();
    let mut a = vec![0.0; nx];
    let mut b = [vec![0.0; nx], vec![0.0; nx], vec![0.0; nx]];
    let mut c = vec![0.0; nx];
    let (mut sp, mut sm, mut sf) = (0.0, 0.0, 0.0);
    for ix in 0..nx {
        let g = f.at_x(ix);
        let coef = basis.coefficients(g);
        let pg = basis.reconstruct(&coef);
        a[ix] = coef[0];
        for d in 0..3 {
            b[d][ix] = coef[d + 1];
        }
        c[ix] = coef[4];
        for (x, p) in g.iter().zip(&pg) {
            sp += p * p;
            sm += (x - p) * (x - p);
            sf += x * x;
        }
    }
    let scale = f.vgrid.weight() * f.sgrid.cell_volume;
    let defect = if sf > 0.0 { (sp + sm - sf).abs() / sf } else { 0.0 };
    Ok(MacroFields {
        a,
        b,
        c,
        norm_pf: (sp * scale).sqrt(),
        norm_micro: (sm * scale).sqrt(),
        norm_f: (sf * scale).sqrt(),
        pythagoras_defect: defect,
    })
}

/// Applies (I − P) at every spatial node.
pub fn micro_part(basis: &NullBasis, f: &PerturbationField) -> Result<PerturbationField> {
    let mut out = f.clone();
    for ix in 0..f.nx() {
        let r = basis.remove(f.at_x(ix))?;
        out.at_x_mut(ix).copy_from_slice(&r);
    }
    Ok(out)
}

/// The thirteen-moment basis [1, v_i, v_i², v_i v_j (i<j), v_i|v|²]√μ and
/// its discrete Gram factorization.
#[derive(Debug, Clone)]
pub struct ThirteenBasis {
    e: Vec<[f64; 13]>,
    w: f64,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

/// Index layout of the thirteen coefficients.
pub mod lh_index {
    pub const ONE: usize = 0;
    pub const V: usize = 1; // 1..4
    pub const V_SQ: usize = 4; // 4..7, v_i²
    pub const V12: usize = 7;
    pub const V13: usize = 8;
    pub const V23: usize = 9;
    pub const V_R2: usize = 10; // 10..13, v_i|v|²
}

impl ThirteenBasis {
    pub fn new(vg: &VelocityGrid) -> Result<Self> {
        let e: Vec<[f64; 13]> = vg
            .nodes
            .iter()
            .zip(&vg.sqrt_mu_table)
            .map(|(v, s)| {
                let r2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
                [
                    *s,
                    s * v[0],
                    s * v[1],
                    s * v[2],
                    s * v[0] * v[0],
                    s * v[1] * v[1],
                    s * v[2] * v[2],
                    s * v[0] * v[1],
                    s * v[0] * v[2],
                    s * v[1] * v[2],
                    s * v[0] * r2,
                    s * v[1] * r2,
                    s * v[2] * r2,
                ]
            })
            .collect();
        let w = vg.weight();
        let mut gram = DMatrix::zeros(13, 13);
        for k in 0..13 {
            for l in 0..13 {
                gram[(k, l)] = w * mirror_sum(e.len(), |j| e[j][k] * e[j][l]);
            }
        }
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::Singular("thirteen-moment Gram matrix".into()))?;
        Ok(Self { e, w, chol })
    }

    /// Coefficients of the discrete L² projection onto the thirteen basis.
    pub fn coefficients(&self, g: &[f64]) -> [f64; 13] {
        let nv = self.e.len();
        let mut m = DVector::zeros(13);
        for j in 0..nv / 2 {
            let (r, q) = (&self.e[j], &self.e[nv - 1 - j]);
            for k in 0..13 {
                m[k] += r[k] * g[j] + q[k] * g[nv - 1 - j];
            }
        }
        m *= self.w;
        let s = self.chol.solve(&m);
        let mut out = [0.0; 13];
        for k in 0..13 {
            out[k] = s[k];
        }
        out
    }
}

/// L² norms over x of the five coefficient identities
/// ∇c = l_c + h_c, ∂_t c + ∂_i b_i = l_i + h_i, ∂_i b_j + ∂_j b_i = l_ij + h_ij,
/// ∂_t b_i + ∂_i a − E_i = l_bi + h_bi and ∂_t a = l_a + h_a, where l + h is
/// −{∂_t + v·∇_x + L}(I−P)f − E·∇_v f + (v/2)·E f + Γ(f, f) expanded in the
/// thirteen-moment basis. Vector identities combine their components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MacroIdentityResiduals {
    pub lc: f64,
    pub li: f64,
    pub lij: f64,
    pub lbi: f64,
    pub la: f64,
}

impl MacroIdentityResiduals {
    pub fn as_array(&self) -> [f64; 5] {
        [self.lc, self.li, self.lij, self.lbi, self.la]
    }
}

pub fn macro_identity_residuals(
    f: &PerturbationField,
    ctx: &TimeContext,
    e_field: &[Vec<f64>; 3],
    tables: &CollisionTables,
    thirteen: &ThirteenBasis,
) -> Result<MacroIdentityResiduals> {
    if f.mode != Mode::Perturbation {
        return Err(Error::Contract("macro identities need a PERTURBATION-mode field".into()));
    }
    let basis = tables.null_basis();
    let (nx, nv) = (f.nx(), f.nv());
    let g = &f.sgrid;
    let dims = g.dims;
    let vg = &f.vgrid;
    let fourier = Fourier::new(g);
    let ft = derivative(f, AxisKind::Time, 0, 1, ctx)?;
    let coef = |h: &PerturbationField| -> Vec<[f64; 5]> { (0..nx).map(|ix| basis.coefficients(h.at_x(ix))).collect() };
    let cf = coef(f);
    let ct = coef(&ft);
    let field_of = |c: &[[f64; 5]], k: usize| -> Vec<f64> { c.iter().map(|r| r[k]).collect() };
    let dx = |u: &[f64], d: usize| -> Vec<f64> {
        if d < dims {
            fourier.derivative(u, d, 1)
        } else {
            vec![0.0; u.len()]
        }
    };
    let a = field_of(&cf, 0);
    let b: Vec<Vec<f64>> = (1..4).map(|k| field_of(&cf, k)).collect();
    let c = field_of(&cf, 4);

    let m = micro_part(basis, f)?;
    let mt = micro_part(basis, &ft)?;
    let mut r: Vec<f64> = mt.values.iter().map(|x| -x).collect();
    for d in 0..dims {
        let dm = derivative(&m, AxisKind::Space, d, 1, &TimeContext::None)?;
        for (i, x) in r.iter_mut().enumerate() {
            *x -= vg.nodes[i % nv][d] * dm.values[i];
        }
    }
    let cols = crate::time_stepper::to_cols(&f.values, nx, nv);
    let mcols = crate::time_stepper::to_cols(&m.values, nx, nv);
    let km = tables.apply_k_cols(&mcols, nx);
    let gain = tables.gamma_gain_cols(&cols, &cols, nx);
    let rate = tables.loss_rate_cols(&cols, nx);
    let mut coll = vec![0.0; cols.len()];
    for j in 0..nv {
        for col in 0..nx {
            let i = j * nx + col;
            coll[i] = -(tables.nu[j] * mcols[i] - km[i]) + gain[i] - rate[i] * cols[i];
        }
    }
    let coll = crate::time_stepper::from_cols(&coll, nx, nv);
    for (x, y) in r.iter_mut().zip(coll) {
        *x += y;
    }
    for ix in 0..nx {
        let e = [e_field[0][ix], e_field[1][ix], e_field[2][ix]];
        let fx = f.at_x(ix);
        let slice = &mut r[ix * nv..(ix + 1) * nv];
        for (ax, &ea) in e.iter().enumerate() {
            if ea == 0.0 {
                continue;
            }
            let dv = velocity_diff(fx, vg, ax);
            for j in 0..nv {
                slice[j] += ea * (0.5 * vg.nodes[j][ax] * fx[j] - dv[j]);
            }
        }
    }
    let lh: Vec<[f64; 13]> = (0..nx).map(|ix| thirteen.coefficients(&r[ix * nv..(ix + 1) * nv])).collect();
    let lhk = |k: usize| -> Vec<f64> { lh.iter().map(|row| row[k]).collect() };

    use lh_index::*;
    let norm = |parts: Vec<Vec<f64>>| -> f64 { parts.iter().map(|p| g.l2(p).powi(2)).sum::<f64>().sqrt() };
    let sub = |x: Vec<f64>, y: Vec<f64>| -> Vec<f64> { x.iter().zip(&y).map(|(p, q)| p - q).collect() };
    let add = |x: Vec<f64>, y: Vec<f64>| -> Vec<f64> { x.iter().zip(&y).map(|(p, q)| p + q).collect() };

    let lc = norm((0..3).map(|i| sub(dx(&c, i), lhk(V_R2 + i))).collect());
    let li = norm(
        (0..3)
            .map(|i| sub(add(field_of(&ct, 4), dx(&b[i], i)), lhk(V_SQ + i)))
            .collect(),
    );
    let pairs = [(0, 1, V12), (0, 2, V13), (1, 2, V23)];
    let lij = norm(
        pairs
            .iter()
            .map(|&(i, j, k)| sub(add(dx(&b[j], i), dx(&b[i], j)), lhk(k)))
            .collect(),
    );
    let lbi = norm(
        (0..3)
            .map(|i| {
                let lhs = add(field_of(&ct, i + 1), dx(&a, i));
                let lhs = sub(lhs, e_field[i].clone());
                sub(lhs, lhk(V + i))
            })
            .collect(),
    );
    let la = norm(vec![sub(field_of(&ct, 0), lhk(ONE))]);
    Ok(MacroIdentityResiduals { lc, li, lij, lbi, la })
}
