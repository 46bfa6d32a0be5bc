//! Hard-sphere collision machinery on the velocity lattice: ν, the dense
//! matrix of K = K₂ − K₁, the bilinear Γ and the physical gain/loss pair.
//!
//! Off-lattice values at u', v' are interpolated on g/√μ (or F/μ) and scaled
//! back by the Maxwellian at the target. K comes from the symmetric
//! quadratic form of L; Γ_gain uses a plane-line factorization of the (u, ω)
//! integral and the loss rates are FFT convolutions with the kernel.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use num_complex::Complex64;

use crate::macro_micro::NullBasis;
use crate::phase_grid::{Fourier, SpatialGrid, VelocityGrid};

#[derive(Debug, Clone, PartialEq)]
pub struct SphereQuadrature {
    pub nodes: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
}

fn push_signed(nodes: &mut Vec<[f64; 3]>, weights: &mut Vec<f64>, p: [f64; 3], w: f64) {
    // every sign flip of the nonzero components
    let nz: Vec<usize> = (0..3).filter(|&d| p[d] != 0.0).collect();
    for mask in 0..(1usize << nz.len()) {
        let mut q = p;
        for (b, &d) in nz.iter().enumerate() {
            if mask & (1 << b) != 0 {
                q[d] = -q[d];
            }
        }
        nodes.push(q);
        weights.push(w);
    }
}

fn push_perms(nodes: &mut Vec<[f64; 3]>, weights: &mut Vec<f64>, a: f64, b: f64, w: f64) {
    // the six placements of (a, b, 0) with a != b
    for p in [
        [a, b, 0.0],
        [b, a, 0.0],
        [a, 0.0, b],
        [b, 0.0, a],
        [0.0, a, b],
        [0.0, b, a],
    ] {
        push_signed(nodes, weights, p, w);
    }
}

impl SphereQuadrature {
    /// Lebedev rules with 6, 14, 26 or 38 nodes.
    pub fn lebedev(order: usize) -> Result<Self> {
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        let s2 = 0.5f64.sqrt();
        let s3 = (1.0f64 / 3.0).sqrt();
        let (a1, a2, a3, c1) = match order {
            6 => (1.0 / 6.0, 0.0, 0.0, 0.0),
            14 => (1.0 / 15.0, 0.0, 3.0 / 40.0, 0.0),
            26 => (1.0 / 21.0, 4.0 / 105.0, 9.0 / 280.0, 0.0),
            38 => (1.0 / 105.0, 0.0, 9.0 / 280.0, 1.0 / 35.0),
            _ => {
                return Err(Error::Unsupported(format!(
                    "sphere quadrature with {order} nodes (use 6, 14, 26 or 38)"
                )))
            }
        };
        let four_pi = 4.0 * PI;
        for d in 0..3 {
            let mut p = [0.0; 3];
            p[d] = 1.0;
            push_signed(&mut nodes, &mut weights, p, a1 * four_pi);
        }
        if a2 > 0.0 {
            for p in [[s2, s2, 0.0], [s2, 0.0, s2], [0.0, s2, s2]] {
                push_signed(&mut nodes, &mut weights, p, a2 * four_pi);
            }
        }
        if a3 > 0.0 {
            push_signed(&mut nodes, &mut weights, [s3, s3, s3], a3 * four_pi);
        }
        if c1 > 0.0 {
            let p: f64 = 0.459_700_843_380_983_1;
            let q = (1.0 - p * p).sqrt();
            push_perms(&mut nodes, &mut weights, p, q, c1 * four_pi);
        }
        Ok(Self { nodes, weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// One representative per ±ω pair with the pair's combined weight.
    /// Both u' and v' and the kernel are invariant under ω → −ω.
    pub fn antipodal_pairs(&self) -> Vec<([f64; 3], f64)> {
        let mut out = Vec::new();
        for (w, &om) in self.weights.iter().zip(&self.nodes) {
            let first = om.iter().copied().find(|c| *c != 0.0).unwrap_or(0.0);
            if first > 0.0 {
                out.push((om, 2.0 * w));
            }
        }
        out
    }

    /// Σ w |z·ω|, the discrete angular integral of the hard-sphere kernel.
    pub fn kernel_integral(&self, z: &[f64; 3]) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(o, w)| w * (z[0] * o[0] + z[1] * o[1] + z[2] * o[2]).abs())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum StencilKind {
    /// Trilinear, linear extrapolation between the node hull and the box edge.
    Linear,
    /// Trilinear with the coordinate clamped to the node hull (nonnegative weights).
    Clamped,
    /// Trilinear plus per-axis second differences: exact on quadratics.
    Quadratic,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Stencil {
    pub len: usize,
    pub idx: [usize; 17],
    pub w: [f64; 17],
}

#[cfg(test)]
impl Stencil {
    #[inline]
    pub fn eval(&self, h: &[f64]) -> f64 {
        let mut s = 0.0;
        for k in 0..self.len {
            s += self.w[k] * h[self.idx[k]];
        }
        s
    }
}

/// Interpolation stencil at lattice coordinate p (node i sits at i). None
/// when p lies outside the truncation box [-0.5, n-0.5]³.
#[inline]
pub(crate) fn build_stencil(p: [f64; 3], n: usize, kind: StencilKind) -> Option<Stencil> {
    let hi = n as f64 - 0.5;
    let mut ax_idx = [[0usize; 2]; 3];
    let mut ax_w = [[0.0f64; 2]; 3];
    let mut ax_len = [0usize; 3];
    let mut theta = [0.0f64; 3];
    for d in 0..3 {
        let c = p[d];
        if !(c >= -0.5 && c <= hi) {
            return None;
        }
        let base = c.floor().clamp(0.0, (n - 2) as f64);
        let mut t = c - base;
        if kind == StencilKind::Clamped {
            t = t.clamp(0.0, 1.0);
        }
        let b = base as usize;
        theta[d] = t;
        if t == 0.0 {
            ax_idx[d][0] = b;
            ax_w[d][0] = 1.0;
            ax_len[d] = 1;
        } else if t == 1.0 {
            ax_idx[d][0] = b + 1;
            ax_w[d][0] = 1.0;
            ax_len[d] = 1;
        } else {
            ax_idx[d] = [b, b + 1];
            ax_w[d] = [1.0 - t, t];
            ax_len[d] = 2;
        }
    }
    let mut st = Stencil {
        len: 0,
        idx: [0; 17],
        w: [0.0; 17],
    };
    for a in 0..ax_len[0] {
        for b in 0..ax_len[1] {
            for c in 0..ax_len[2] {
                st.idx[st.len] = (ax_idx[0][a] * n + ax_idx[1][b]) * n + ax_idx[2][c];
                st.w[st.len] = ax_w[0][a] * ax_w[1][b] * ax_w[2][c];
                st.len += 1;
            }
        }
    }
    if kind == StencilKind::Quadratic {
        let mut m = [0usize; 3];
        for d in 0..3 {
            m[d] = p[d].round().clamp(0.0, (n - 1) as f64) as usize;
        }
        for d in 0..3 {
            let t = theta[d];
            if t == 0.0 || t == 1.0 {
                continue;
            }
            let q = 0.5 * t * (1.0 - t);
            let mut mm = m;
            mm[d] = m[d].clamp(1, n - 2);
            let centre = (mm[0] * n + mm[1]) * n + mm[2];
            let stride = match d {
                0 => n * n,
                1 => n,
                _ => 1,
            };
            for (off, w) in [(centre - stride, -q), (centre, 2.0 * q), (centre + stride, -q)] {
                st.idx[st.len] = off;
                st.w[st.len] = w;
                st.len += 1;
            }
        }
    }
    Some(st)
}

/// Visits every (u, ω-pair) collision partner of lattice node iv, handing
/// over the kernel weight w_u w_ω |(v-u)·ω| (without μ) and the lattice
/// coordinates of u' and v'.
#[inline]
fn for_each_collision<F: FnMut(usize, f64, [f64; 3], [f64; 3])>(
    n: usize,
    dv: f64,
    w_u: f64,
    pairs: &[([f64; 3], f64)],
    iv: [usize; 3],
    mut visit: F,
) {
    let ivf = [iv[0] as f64, iv[1] as f64, iv[2] as f64];
    for &(om, wp) in pairs {
        let scale = wp * w_u * dv;
        let mut ju = 0usize;
        for a in 0..n {
            let da = ivf[0] - a as f64;
            for b in 0..n {
                let db = ivf[1] - b as f64;
                for c in 0..n {
                    let dc = ivf[2] - c as f64;
                    let s = da * om[0] + db * om[1] + dc * om[2];
                    if s != 0.0 {
                        let up = [a as f64 + s * om[0], b as f64 + s * om[1], c as f64 + s * om[2]];
                        let vp = [ivf[0] - s * om[0], ivf[1] - s * om[1], ivf[2] - s * om[2]];
                        visit(ju, scale * s.abs(), up, vp);
                    }
                    ju += 1;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssemblyMetadata {
    pub v_max: f64,
    pub n_per_axis: usize,
    pub sphere_nodes: usize,
    /// Fraction of the collision mass Σ B μ(u)μ(v) dropped because u' or v'
    /// left the box.
    pub leakage: f64,
}

#[derive(Clone)]
pub struct CollisionTables {
    pub vgrid: Arc<VelocityGrid>,
    pub sphere: SphereQuadrature,
    pub nu: Vec<f64>,
    /// Row-major N_v × N_v matrix of K in the uniform quadrature basis.
    pub k_matrix: Vec<f64>,
    pub metadata: AssemblyMetadata,
    pub(crate) pairs: Vec<([f64; 3], f64)>,
    pub(crate) basis: NullBasis,
    conv: Fourier,
    /// Transform of w B(z) laid out circularly on the (2n)³ padding grid.
    b_hat: Vec<Complex64>,
}

impl std::fmt::Debug for CollisionTables {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CollisionTables")
            .field("metadata", &self.metadata)
            .finish_non_exhaustive()
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let r = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    a.map(|x| x / r)
}

/// B(z) = Σ_ω w_ω |z·ω| on all lattice differences, index (z + n − 1) per axis.
fn b_table(vg: &VelocityGrid, sphere: &SphereQuadrature) -> Vec<f64> {
    let n = vg.n_per_axis as i64;
    let m = (2 * n - 1) as usize;
    let mut out = vec![0.0; m * m * m];
    for a in 0..m {
        for b in 0..m {
            for c in 0..m {
                let z = [
                    (a as i64 - (n - 1)) as f64 * vg.dv,
                    (b as i64 - (n - 1)) as f64 * vg.dv,
                    (c as i64 - (n - 1)) as f64 * vg.dv,
                ];
                out[(a * m + b) * m + c] = sphere.kernel_integral(&z);
            }
        }
    }
    out
}

#[inline]
fn b_index(n: usize, iv: [usize; 3], iu: [usize; 3]) -> usize {
    let m = 2 * n - 1;
    let o = n - 1;
    ((iv[0] + o - iu[0]) * m + (iv[1] + o - iu[1])) * m + (iv[2] + o - iu[2])
}

/// ν(v_j) = Σ_u Σ_ω w_u w_ω |(v_j-u)·ω| μ(u).
pub fn build_nu_table(vgrid: &VelocityGrid, sphere: &SphereQuadrature) -> Vec<f64> {
    let table = b_table(vgrid, sphere);
    let n = vgrid.n_per_axis;
    let w = vgrid.weight();
    (0..vgrid.len())
        .into_par_iter()
        .map(|j| {
            let iv = vgrid.multi_index(j);
            let mut s = 0.0;
            for (u, m) in vgrid.mu_table.iter().enumerate() {
                s += table[b_index(n, iv, vgrid.multi_index(u))] * m;
            }
            s * w
        })
        .collect()
}

/// ν at an arbitrary velocity, with the same (u, ω) quadrature as the table.
pub fn nu_at(vgrid: &VelocityGrid, sphere: &SphereQuadrature, v: [f64; 3]) -> f64 {
    let w = vgrid.weight();
    vgrid
        .nodes
        .iter()
        .zip(&vgrid.mu_table)
        .map(|(u, m)| sphere.kernel_integral(&[v[0] - u[0], v[1] - u[1], v[2] - u[2]]) * m)
        .sum::<f64>()
        * w
}

fn convolution_plan(vg: &VelocityGrid, sphere: &SphereQuadrature) -> (Fourier, Vec<Complex64>) {
    let n = vg.n_per_axis;
    let m = 2 * n;
    let grid = SpatialGrid::new(&[m, m, m]).expect("padding grid is even");
    let conv = Fourier::new(&grid);
    let table = b_table(vg, sphere);
    let w = vg.weight();
    let mut pad = vec![0.0; m * m * m];
    let mt = 2 * n - 1;
    for a in 0..mt {
        for b in 0..mt {
            for c in 0..mt {
                let wrap = |i: usize| (i + m - (n - 1)) % m;
                pad[(wrap(a) * m + wrap(b)) * m + wrap(c)] = w * table[(a * mt + b) * mt + c];
            }
        }
    }
    let b_hat = conv.forward(&pad);
    (conv, b_hat)
}

/// Assembles ν and the dense matrix of K = diag(ν) − L, with L taken from
/// the symmetric quadratic form
///   ⟨Lg,h⟩ = ¼ ∫∫∫ B μ(u)μ(v) ΔG ΔH,   ΔG = G(v') + G(u') − G(v) − G(u),   G = g/√μ,
/// evaluated over lattice pairs (v, u) and the sphere rule. G at u', v' uses
/// a stencil exact on quadratics, so {√μ, v√μ, |v|²√μ} lie in the kernel.
/// A collision whose u' or v' leaves the box is dropped as a whole.
pub fn build_k_matrix(vgrid: &Arc<VelocityGrid>, sphere: &SphereQuadrature) -> CollisionTables {
    let vg = vgrid.as_ref();
    let n = vg.n_per_axis;
    let nv = vg.len();
    let w = vg.weight();
    let nu = build_nu_table(vg, sphere);
    let pairs = sphere.antipodal_pairs();
    let mu = &vg.mu_table;
    let smu = &vg.sqrt_mu_table;
    let mut l = vec![0.0; nv * nv];
    let (mut kept, mut lost) = (0.0, 0.0);
    let mut idx = [0usize; 36];
    let mut val = [0.0f64; 36];
    for v in 0..nv {
        let ivf = vg.multi_index(v).map(|x| x as f64);
        for u in (v + 1)..nv {
            let iuf = vg.multi_index(u).map(|x| x as f64);
            let m = mu[u] * mu[v];
            for &(om, wp) in &pairs {
                let s = (ivf[0] - iuf[0]) * om[0] + (ivf[1] - iuf[1]) * om[1] + (ivf[2] - iuf[2]) * om[2];
                if s == 0.0 {
                    continue;
                }
                let c = wp * w * vg.dv * s.abs() * m;
                let up = [iuf[0] + s * om[0], iuf[1] + s * om[1], iuf[2] + s * om[2]];
                let vp = [ivf[0] - s * om[0], ivf[1] - s * om[1], ivf[2] - s * om[2]];
                let (Some(sv), Some(su)) = (
                    build_stencil(vp, n, StencilKind::Quadratic),
                    build_stencil(up, n, StencilKind::Quadratic),
                ) else {
                    lost += c;
                    continue;
                };
                kept += c;
                let mut len = 0;
                let mut push = |a: usize, x: f64| {
                    for t in 0..len {
                        if idx[t] == a {
                            val[t] += x;
                            return;
                        }
                    }
                    idx[len] = a;
                    val[len] = x;
                    len += 1;
                };
                push(v, 1.0);
                push(u, 1.0);
                for t in 0..sv.len {
                    push(sv.idx[t], -sv.w[t]);
                }
                for t in 0..su.len {
                    push(su.idx[t], -su.w[t]);
                }
                // (v, u) and (u, v) give the same ΔG: ¼ · 2 over unordered pairs
                let half = 0.5 * c;
                for i in 0..len {
                    let (a, x) = (idx[i], half * val[i]);
                    for j in i..len {
                        let b = idx[j];
                        let (r, q) = if a <= b { (a, b) } else { (b, a) };
                        l[r * nv + q] += x * val[j];
                    }
                }
            }
        }
    }
    for a in 0..nv {
        for b in a..nv {
            let k = -l[a * nv + b] / (smu[a] * smu[b]);
            l[a * nv + b] = k;
            l[b * nv + a] = k;
        }
        l[a * nv + a] += nu[a];
    }
    let metadata = AssemblyMetadata {
        v_max: vg.v_max,
        n_per_axis: n,
        sphere_nodes: sphere.len(),
        leakage: if kept + lost > 0.0 { lost / (kept + lost) } else { 0.0 },
    };
    CollisionTables::from_parts(vgrid, sphere.clone(), nu, l, metadata).expect("shapes match")
}

// Plane-line factorization parameters, in units of Δv.
const FACTOR_BIN: f64 = 0.5;
const FACTOR_STEP: f64 = 0.5;
const FACTOR_PLANE: f64 = 0.5;

impl CollisionTables {
    /// Rebuilds tables from stored ν and K (e.g. a disk cache).
    pub fn from_parts(
        vgrid: &Arc<VelocityGrid>,
        sphere: SphereQuadrature,
        nu: Vec<f64>,
        k_matrix: Vec<f64>,
        metadata: AssemblyMetadata,
    ) -> Result<Self> {
        let nv = vgrid.len();
        if nu.len() != nv {
            return Err(Error::Shape {
                expected: nv,
                got: nu.len(),
            });
        }
        if k_matrix.len() != nv * nv {
            return Err(Error::Shape {
                expected: nv * nv,
                got: k_matrix.len(),
            });
        }
        let (conv, b_hat) = convolution_plan(vgrid, &sphere);
        Ok(Self {
            vgrid: vgrid.clone(),
            pairs: sphere.antipodal_pairs(),
            basis: NullBasis::try_new(vgrid)?,
            sphere,
            nu,
            k_matrix,
            metadata,
            conv,
            b_hat,
        })
    }

    pub fn nv(&self) -> usize {
        self.vgrid.len()
    }

    pub fn null_basis(&self) -> &NullBasis {
        &self.basis
    }

    pub fn apply_k(&self, g: &[f64]) -> Vec<f64> {
        let nv = self.nv();
        self.k_matrix
            .par_chunks(nv)
            .map(|row| row.iter().zip(g).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Lg = νg − Kg.
    pub fn apply_l(&self, g: &[f64]) -> Vec<f64> {
        let kg = self.apply_k(g);
        kg.iter()
            .zip(g)
            .zip(&self.nu)
            .map(|((k, g), nu)| nu * g - k)
            .collect()
    }

    /// K applied to many columns stored v-major: out[v][c] = Σ_a K[v][a] h[a][c].
    pub fn apply_k_cols(&self, h: &[f64], ncol: usize) -> Vec<f64> {
        let nv = self.nv();
        let mut out = vec![0.0; nv * ncol];
        out.par_chunks_mut(ncol)
            .zip(self.k_matrix.par_chunks(nv))
            .for_each(|(o, row)| {
                for (a, &kva) in row.iter().enumerate() {
                    let src = &h[a * ncol..(a + 1) * ncol];
                    for (x, s) in o.iter_mut().zip(src) {
                        *x += kva * s;
                    }
                }
            });
        out
    }

    /// out[v][c] = Σ_u w_u B(v−u) h[u][c], by zero-padded FFT convolution.
    pub fn kernel_cols(&self, h: &[f64], ncol: usize) -> Vec<f64> {
        let n = self.vgrid.n_per_axis;
        let nv = self.nv();
        let m = 2 * n;
        let cols: Vec<Vec<f64>> = (0..ncol)
            .into_par_iter()
            .map(|c| {
                let mut pad = vec![0.0; m * m * m];
                for j in 0..nv {
                    let [a, b, d] = self.vgrid.multi_index(j);
                    pad[(a * m + b) * m + d] = h[j * ncol + c];
                }
                let mut spec = self.conv.forward(&pad);
                for (z, b) in spec.iter_mut().zip(&self.b_hat) {
                    *z *= b;
                }
                let full = self.conv.inverse_real(spec);
                (0..nv)
                    .map(|j| {
                        let [a, b, d] = self.vgrid.multi_index(j);
                        full[(a * m + b) * m + d]
                    })
                    .collect()
            })
            .collect();
        let mut out = vec![0.0; nv * ncol];
        for (c, col) in cols.iter().enumerate() {
            for (j, x) in col.iter().enumerate() {
                out[j * ncol + c] = *x;
            }
        }
        out
    }

    /// Reference gain sum over lattice u and sphere nodes:
    /// out[v][c] = Σ_{u,ω} w |(v-u)·ω| μ(u) I[h₁](u') I[h₂](v').
    pub(crate) fn gain_direct(&self, h1: &[f64], h2: &[f64], ncol: usize, kind: StencilKind) -> Vec<f64> {
        let vg = self.vgrid.as_ref();
        let n = vg.n_per_axis;
        let nv = vg.len();
        let w = vg.weight();
        let mu = &vg.mu_table;
        let mut out = vec![0.0; nv * ncol];
        out.par_chunks_mut(ncol).enumerate().for_each(|(j, acc)| {
            let iv = vg.multi_index(j);
            let mut t1 = vec![0.0; ncol];
            let mut t2 = vec![0.0; ncol];
            for_each_collision(n, vg.dv, w, &self.pairs, iv, |ju, c, up, vp| {
                let (Some(su), Some(sv)) = (build_stencil(up, n, kind), build_stencil(vp, n, kind))
                else {
                    return;
                };
                let cm = c * mu[ju];
                t1.iter_mut().for_each(|x| *x = 0.0);
                t2.iter_mut().for_each(|x| *x = 0.0);
                for k in 0..su.len {
                    let src = &h1[su.idx[k] * ncol..(su.idx[k] + 1) * ncol];
                    for (x, s) in t1.iter_mut().zip(src) {
                        *x += su.w[k] * s;
                    }
                }
                for k in 0..sv.len {
                    let src = &h2[sv.idx[k] * ncol..(sv.idx[k] + 1) * ncol];
                    for (x, s) in t2.iter_mut().zip(src) {
                        *x += sv.w[k] * s;
                    }
                }
                for ((o, a), b) in acc.iter_mut().zip(&t1).zip(&t2) {
                    *o += cm * a * b;
                }
            });
        });
        out
    }

    /// The same gain integral by plane-line factorization. With u' = v + t
    /// (t ⊥ ω) and v' = v − sω,
    ///   ∫∫ B μ(u) H₁(u')H₂(v') = Σ_ω w_ω A_ω(v·ω) ∫ |s| e^{s v·ω − s²/2} H₂(v − sω) ds,
    /// with A_ω(τ) the integral of μH₁ over the plane x·ω = τ. A is tabulated
    /// on a τ grid by a plane trapezoid rule and interpolated linearly after
    /// removing its e^{−τ²/2} envelope; the line integral is a trapezoid rule.
    pub(crate) fn gain_factored(&self, h1: &[f64], h2: &[f64], ncol: usize, kind: StencilKind) -> Vec<f64> {
        let vg = self.vgrid.as_ref();
        let n = vg.n_per_axis;
        let nv = vg.len();
        let dv = vg.dv;
        let (bin, step, plane) = (FACTOR_BIN * dv, FACTOR_STEP * dv, FACTOR_PLANE * dv);
        let lattice = |x: [f64; 3]| x.map(|c| c / dv + vg.v_max / dv - 0.5);
        let norm = (2.0 * PI).powf(-1.5);
        let mut out = vec![0.0; nv * ncol];
        for &(om, wp) in &self.pairs {
            let tmax = vg.v_max * (om[0].abs() + om[1].abs() + om[2].abs());
            let nb = (2.0 * tmax / bin).ceil() as usize + 2;
            let helper = if om[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
            let e1 = normalize(cross(om, helper));
            let e2 = cross(om, e1);
            let np = (vg.v_max * 3f64.sqrt() / plane).ceil() as i64;
            // Â(τ) = e^{τ²/2} A(τ); μ(x) e^{τ²/2} = (2π)^{-3/2} e^{-(α²+β²)/2}
            let mut a = vec![0.0; nb * ncol];
            a.par_chunks_mut(ncol).enumerate().for_each(|(k, ak)| {
                let tau = -tmax + k as f64 * bin;
                for ia in -np..=np {
                    let al = ia as f64 * plane;
                    for ib in -np..=np {
                        let be = ib as f64 * plane;
                        let x = [
                            tau * om[0] + al * e1[0] + be * e2[0],
                            tau * om[1] + al * e1[1] + be * e2[1],
                            tau * om[2] + al * e1[2] + be * e2[2],
                        ];
                        let Some(st) = build_stencil(lattice(x), n, kind) else {
                            continue;
                        };
                        let c = plane * plane * norm * (-0.5 * (al * al + be * be)).exp();
                        for t in 0..st.len {
                            let ct = c * st.w[t];
                            let src = &h1[st.idx[t] * ncol..(st.idx[t] + 1) * ncol];
                            for (o, s) in ak.iter_mut().zip(src) {
                                *o += ct * s;
                            }
                        }
                    }
                }
            });
            let ns = (2.0 * tmax / step).ceil() as i64;
            out.par_chunks_mut(ncol).enumerate().for_each(|(j, acc)| {
                let v = vg.nodes[j];
                let tau = v[0] * om[0] + v[1] * om[1] + v[2] * om[2];
                let x = (tau + tmax) / bin;
                let k0 = x.floor() as usize;
                let fr = x - k0 as f64;
                let mut line = vec![0.0; ncol];
                for m in -ns..=ns {
                    if m == 0 {
                        continue;
                    }
                    let s = m as f64 * step;
                    let p = lattice([v[0] - s * om[0], v[1] - s * om[1], v[2] - s * om[2]]);
                    let Some(st) = build_stencil(p, n, kind) else {
                        continue;
                    };
                    let wt = step * s.abs() * (s * tau - 0.5 * s * s - 0.5 * tau * tau).exp();
                    for t in 0..st.len {
                        let c = wt * st.w[t];
                        let src = &h2[st.idx[t] * ncol..(st.idx[t] + 1) * ncol];
                        for (o, s) in line.iter_mut().zip(src) {
                            *o += c * s;
                        }
                    }
                }
                let a0 = &a[k0 * ncol..(k0 + 1) * ncol];
                let a1 = &a[(k0 + 1) * ncol..(k0 + 2) * ncol];
                for c in 0..ncol {
                    acc[c] += wp * ((1.0 - fr) * a0[c] + fr * a1[c]) * line[c];
                }
            });
        }
        out
    }

    /// Γ_gain(g₁, g₂) for columns stored v-major.
    pub fn gamma_gain_cols(&self, g1: &[f64], g2: &[f64], ncol: usize) -> Vec<f64> {
        let smu = &self.vgrid.sqrt_mu_table;
        let h1 = scale_rows(g1, ncol, |v| 1.0 / smu[v]);
        let h2 = scale_rows(g2, ncol, |v| 1.0 / smu[v]);
        let acc = self.gain_factored(&h1, &h2, ncol, StencilKind::Linear);
        scale_rows(&acc, ncol, |v| smu[v])
    }

    /// Γ_loss rate Σ_u w B(v−u) √μ(u) g(u) for columns stored v-major.
    pub fn loss_rate_cols(&self, g: &[f64], ncol: usize) -> Vec<f64> {
        let smu = &self.vgrid.sqrt_mu_table;
        self.kernel_cols(&scale_rows(g, ncol, |v| smu[v]), ncol)
    }
}

pub(crate) fn scale_rows<F: Fn(usize) -> f64>(h: &[f64], ncol: usize, f: F) -> Vec<f64> {
    h.chunks(ncol)
        .enumerate()
        .flat_map(|(v, row)| {
            let s = f(v);
            row.iter().map(move |x| x * s)
        })
        .collect()
}

fn check_len(g: &[f64], nv: usize) -> Result<()> {
    if g.len() != nv {
        return Err(Error::Shape {
            expected: nv,
            got: g.len(),
        });
    }
    Ok(())
}

/// Lg = νg − Kg.
pub fn apply_l(g: &[f64], tables: &CollisionTables) -> Result<Vec<f64>> {
    check_len(g, tables.nv())?;
    Ok(tables.apply_l(g))
}

/// Γ(g₁, g₂) split into gain and loss parts.
pub fn gamma_parts(g1: &[f64], g2: &[f64], tables: &CollisionTables) -> Result<(Vec<f64>, Vec<f64>)> {
    check_len(g1, tables.nv())?;
    check_len(g2, tables.nv())?;
    let gain = tables.gamma_gain_cols(g1, g2, 1);
    let rate = tables.loss_rate_cols(g1, 1);
    let loss = rate.iter().zip(g2).map(|(r, g)| r * g).collect();
    Ok((gain, loss))
}

/// Γ(g₁, g₂) = Γ_gain − Γ_loss.
pub fn gamma(g1: &[f64], g2: &[f64], tables: &CollisionTables) -> Result<Vec<f64>> {
    let (gain, loss) = gamma_parts(g1, g2, tables)?;
    Ok(gain.iter().zip(&loss).map(|(a, b)| a - b).collect())
}

/// Γ_gain by the direct (u, ω) lattice sum. Slow; kept as a reference.
pub fn gamma_gain_direct(g1: &[f64], g2: &[f64], tables: &CollisionTables) -> Result<Vec<f64>> {
    check_len(g1, tables.nv())?;
    check_len(g2, tables.nv())?;
    let smu = &tables.vgrid.sqrt_mu_table;
    let h1 = scale_rows(g1, 1, |v| 1.0 / smu[v]);
    let h2 = scale_rows(g2, 1, |v| 1.0 / smu[v]);
    let acc = tables.gain_direct(&h1, &h2, 1, StencilKind::Linear);
    Ok(scale_rows(&acc, 1, |v| smu[v]))
}

/// Physical-form collision pieces: Q_gain(F₁, F₂) and R(F₁) = Σ w |(v-u)·ω| F₁(u).
pub fn physical_collision_terms(
    f1: &[f64],
    f2: &[f64],
    tables: &CollisionTables,
) -> Result<(Vec<f64>, Vec<f64>)> {
    for f in [f1, f2] {
        check_len(f, tables.nv())?;
        if let Some((j, v)) = f.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
            return Err(Error::Contract(format!(
                "physical collision input negative ({v:e}) at velocity node {j}"
            )));
        }
    }
    Ok(physical_terms_cols(f1, f2, 1, tables))
}

/// Q_gain and R for columns of nonnegative F stored v-major. Off-lattice
/// values use F/μ with clamped (nonnegative) trilinear weights.
pub(crate) fn physical_terms_cols(
    f1: &[f64],
    f2: &[f64],
    ncol: usize,
    tables: &CollisionTables,
) -> (Vec<f64>, Vec<f64>) {
    let mu = &tables.vgrid.mu_table;
    let h1 = scale_rows(f1, ncol, |v| 1.0 / mu[v]);
    let h2 = scale_rows(f2, ncol, |v| 1.0 / mu[v]);
    let acc = tables.gain_factored(&h1, &h2, ncol, StencilKind::Clamped);
    let gain = scale_rows(&acc, ncol, |v| mu[v]).into_iter().map(|x| x.max(0.0)).collect();
    let rate = tables.kernel_cols(f1, ncol).into_iter().map(|x| x.max(0.0)).collect();
    (gain, rate)
}

/// Removes the component of a collision output along the five collision
/// invariants so that ∫ out √μ ψ dv = 0 for ψ in {1, v, |v|²}.
pub fn conserve_project(out: &[f64], vgrid: &VelocityGrid) -> Result<Vec<f64>> {
    NullBasis::try_new(vgrid)?.remove(out)
}

/// Relative residuals ‖L e_k‖/‖e_k‖ for √μ, v₁√μ, v₂√μ, v₃√μ, |v|²√μ.
pub fn null_space_residuals(tables: &CollisionTables) -> [f64; 5] {
    let mut out = [0.0; 5];
    for (k, o) in out.iter_mut().enumerate() {
        let e = tables.basis.element(k);
        let le = tables.apply_l(&e);
        let nl: f64 = le.iter().map(|x| x * x).sum::<f64>().sqrt();
        let ne: f64 = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        *o = nl / ne;
    }
    out
}

/// max |L − Lᵀ| / max |L| of the weighted matrix (uniform weights, so the
/// conjugation by √w is a scalar).
pub fn symmetry_defect(tables: &CollisionTables) -> f64 {
    let nv = tables.nv();
    let k = &tables.k_matrix;
    let mut max_l: f64 = 0.0;
    let mut max_asym: f64 = 0.0;
    for i in 0..nv {
        for j in 0..nv {
            let l = if i == j { tables.nu[i] } else { 0.0 } - k[i * nv + j];
            max_l = max_l.max(l.abs());
            max_asym = max_asym.max((k[i * nv + j] - k[j * nv + i]).abs());
        }
    }
    max_asym / max_l
}
