//! Discrete phase space: the periodic spatial torus, the truncated velocity
//! lattice with its Maxwellian tables, and the discrete derivatives.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Normalized global Maxwellian (2π)^{-3/2} exp(-|v|²/2).
pub fn maxwellian(v: &[f64; 3]) -> f64 {
    let r2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
    (2.0 * PI).powf(-1.5) * (-0.5 * r2).exp()
}

/// Exact Gaussian moments ∫|v|^i μ dv for i in {0, 2, 4}.
pub fn gaussian_moment(i: u32) -> Result<f64> {
    match i {
        0 => Ok(1.0),
        2 => Ok(3.0),
        4 => Ok(15.0),
        _ => Err(Error::Unsupported(format!("gaussian moment of order {i}"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGrid {
    pub dims: usize,
    pub n_per_dim: Vec<usize>,
    pub cell_volume: f64,
    /// Integer frequencies per axis in FFT order (0, 1, .., n/2-1, -n/2, .., -1).
    pub wave_numbers: Vec<Vec<f64>>,
}

impl SpatialGrid {
    pub fn new(n_per_dim: &[usize]) -> Result<Self> {
        let dims = n_per_dim.len();
        if !(1..=3).contains(&dims) {
            return Err(Error::Config(format!(
                "grid.nx must have 1 to 3 entries, got {dims}"
            )));
        }
        for &n in n_per_dim {
            if n < 2 || n % 2 != 0 {
                return Err(Error::Config(format!(
                    "grid.nx entries must be even and >= 2, got {n}"
                )));
            }
        }
        let cell_volume = n_per_dim.iter().map(|&n| 1.0 / n as f64).product();
        let wave_numbers = n_per_dim
            .iter()
            .map(|&n| {
                (0..n)
                    .map(|i| if i < n / 2 { i as f64 } else { i as f64 - n as f64 })
                    .collect()
            })
            .collect();
        Ok(Self {
            dims,
            n_per_dim: n_per_dim.to_vec(),
            cell_volume,
            wave_numbers,
        })
    }

    pub fn len(&self) -> usize {
        self.n_per_dim.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dx(&self, axis: usize) -> f64 {
        1.0 / self.n_per_dim[axis] as f64
    }

    pub fn min_dx(&self) -> f64 {
        (0..self.dims).map(|a| self.dx(a)).fold(f64::INFINITY, f64::min)
    }

    /// Multi-index of a flat (row-major) node index.
    pub fn multi_index(&self, mut idx: usize) -> [usize; 3] {
        let mut out = [0usize; 3];
        for d in (0..self.dims).rev() {
            out[d] = idx % self.n_per_dim[d];
            idx /= self.n_per_dim[d];
        }
        out
    }

    /// Node coordinates; unused dimensions are 0.
    pub fn coords(&self, idx: usize) -> [f64; 3] {
        let m = self.multi_index(idx);
        let mut x = [0.0; 3];
        for d in 0..self.dims {
            x[d] = m[d] as f64 / self.n_per_dim[d] as f64;
        }
        x
    }

    /// Physical wave vector 2πk of a flat spectral index.
    pub fn wave_vector(&self, idx: usize) -> [f64; 3] {
        let m = self.multi_index(idx);
        let mut k = [0.0; 3];
        for d in 0..self.dims {
            k[d] = 2.0 * PI * self.wave_numbers[d][m[d]];
        }
        k
    }

    /// True when the mode sits on the Nyquist frequency of some axis.
    pub fn is_nyquist(&self, idx: usize, axis: usize) -> bool {
        let m = self.multi_index(idx);
        m[axis] == self.n_per_dim[axis] / 2
    }

    /// Discrete integral Σ g dx.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        values.iter().sum::<f64>() * self.cell_volume
    }

    /// Discrete L² norm.
    pub fn l2(&self, values: &[f64]) -> f64 {
        (values.iter().map(|v| v * v).sum::<f64>() * self.cell_volume).sqrt()
    }
}

/// FFT plans for one spatial grid. Transforms are serial so results do not
/// depend on the thread pool.
#[derive(Clone)]
pub struct Fourier {
    grid: SpatialGrid,
    fwd: Vec<Arc<dyn Fft<f64>>>,
    inv: Vec<Arc<dyn Fft<f64>>>,
}

impl std::fmt::Debug for Fourier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fourier").field("grid", &self.grid).finish()
    }
}

impl Fourier {
    pub fn new(grid: &SpatialGrid) -> Self {
        let mut planner = FftPlanner::new();
        let fwd = grid.n_per_dim.iter().map(|&n| planner.plan_fft_forward(n)).collect();
        let inv = grid.n_per_dim.iter().map(|&n| planner.plan_fft_inverse(n)).collect();
        Self {
            grid: grid.clone(),
            fwd,
            inv,
        }
    }

    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    fn transform(&self, buf: &mut [Complex64], inverse: bool) {
        let g = &self.grid;
        let n = &g.n_per_dim;
        let mut line = Vec::new();
        for axis in 0..g.dims {
            let len = n[axis];
            let stride: usize = n[axis + 1..].iter().product();
            let outer: usize = n[..axis].iter().product();
            let plan = if inverse { &self.inv[axis] } else { &self.fwd[axis] };
            line.resize(len, Complex64::new(0.0, 0.0));
            for o in 0..outer {
                for s in 0..stride {
                    let base = o * len * stride + s;
                    for i in 0..len {
                        line[i] = buf[base + i * stride];
                    }
                    plan.process(&mut line);
                    for i in 0..len {
                        buf[base + i * stride] = line[i];
                    }
                }
            }
        }
        if inverse {
            let scale = 1.0 / g.len() as f64;
            for z in buf.iter_mut() {
                *z *= scale;
            }
        }
    }

    pub fn forward(&self, values: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.transform(&mut buf, false);
        buf
    }

    pub fn inverse_real(&self, mut spec: Vec<Complex64>) -> Vec<f64> {
        self.transform(&mut spec, true);
        spec.into_iter().map(|z| z.re).collect()
    }

    /// Apply a Fourier multiplier m(wave-vector index) to a real field.
    pub fn apply_multiplier<M: Fn(usize) -> Complex64>(&self, values: &[f64], m: M) -> Vec<f64> {
        let mut spec = self.forward(values);
        for (i, z) in spec.iter_mut().enumerate() {
            *z *= m(i);
        }
        self.inverse_real(spec)
    }

    /// Spectral ∂^order along one axis. Odd derivatives drop the Nyquist mode.
    pub fn derivative(&self, values: &[f64], axis: usize, order: usize) -> Vec<f64> {
        if order == 0 {
            return values.to_vec();
        }
        let g = &self.grid;
        self.apply_multiplier(values, |i| {
            if order % 2 == 1 && g.is_nyquist(i, axis) {
                return Complex64::new(0.0, 0.0);
            }
            let k = g.wave_vector(i)[axis];
            Complex64::new(0.0, k).powu(order as u32)
        })
    }

    /// Spectral Laplacian.
    pub fn laplacian(&self, values: &[f64]) -> Vec<f64> {
        let g = &self.grid;
        self.apply_multiplier(values, |i| {
            let k = g.wave_vector(i);
            Complex64::new(-(k[0] * k[0] + k[1] * k[1] + k[2] * k[2]), 0.0)
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityGrid {
    pub v_max: f64,
    pub n_per_axis: usize,
    pub dv: f64,
    pub nodes: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
    pub mu_table: Vec<f64>,
    pub sqrt_mu_table: Vec<f64>,
    /// |Σ w μ - 1|
    pub mass_defect: f64,
}

impl VelocityGrid {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn index(&self, i: [usize; 3]) -> usize {
        (i[0] * self.n_per_axis + i[1]) * self.n_per_axis + i[2]
    }

    pub fn multi_index(&self, j: usize) -> [usize; 3] {
        let n = self.n_per_axis;
        [j / (n * n), (j / n) % n, j % n]
    }

    /// Lattice coordinate (in units of dv, node i at i) of a velocity.
    pub fn lattice_coord(&self, v: f64) -> f64 {
        (v + self.v_max) / self.dv - 0.5
    }

    /// Uniform quadrature weight Δv³.
    pub fn weight(&self) -> f64 {
        self.weights[0]
    }

    /// Discrete moment Σ w |v|^i μ.
    pub fn discrete_moment(&self, i: i32) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .zip(&self.mu_table)
            .map(|((v, w), m)| {
                let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                w * r.powi(i) * m
            })
            .sum()
    }
}

/// Uniform midpoint lattice on [-v_max, v_max]³ with n nodes per axis.
pub fn build_velocity_grid(v_max: f64, n: usize) -> Result<VelocityGrid> {
    if !(v_max.is_finite() && v_max > 0.0) {
        return Err(Error::Config(format!(
            "grid.v_max must be positive, got {v_max}"
        )));
    }
    if n < 4 || n % 2 != 0 {
        return Err(Error::Config(format!(
            "grid.nv must be even and >= 4, got {n}"
        )));
    }
    let dv = 2.0 * v_max / n as f64;
    // mirrored exactly so that odd integrands cancel pairwise
    let mut axis = vec![0.0; n];
    for i in 0..n / 2 {
        axis[i] = -v_max + (i as f64 + 0.5) * dv;
        axis[n - 1 - i] = -axis[i];
    }
    let mut nodes = Vec::with_capacity(n * n * n);
    for &a in &axis {
        for &b in &axis {
            for &c in &axis {
                nodes.push([a, b, c]);
            }
        }
    }
    let w = dv * dv * dv;
    let weights = vec![w; nodes.len()];
    let mu_table: Vec<f64> = nodes.iter().map(maxwellian).collect();
    let sqrt_mu_table = mu_table.iter().map(|m| m.sqrt()).collect();
    let mass: f64 = mirror_sum(mu_table.len(), |j| mu_table[j] * w);
    Ok(VelocityGrid {
        v_max,
        n_per_axis: n,
        dv,
        nodes,
        weights,
        mu_table,
        sqrt_mu_table,
        mass_defect: (mass - 1.0).abs(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarFieldX {
    pub grid: SpatialGrid,
    pub values: Vec<f64>,
}

impl ScalarFieldX {
    pub fn zeros(grid: &SpatialGrid) -> Self {
        Self {
            grid: grid.clone(),
            values: vec![0.0; grid.len()],
        }
    }

    pub fn from_fn<F: Fn([f64; 3]) -> f64>(grid: &SpatialGrid, f: F) -> Self {
        let values = (0..grid.len()).map(|i| f(grid.coords(i))).collect();
        Self {
            grid: grid.clone(),
            values,
        }
    }

    pub fn mean(&self) -> f64 {
        self.grid.integrate(&self.values)
    }

    pub fn l2(&self) -> f64 {
        self.grid.l2(&self.values)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Stores f with F = μ + √μ f.
    Perturbation,
    /// Stores F directly.
    Physical,
}

impl Mode {
    pub fn code(self) -> u8 {
        match self {
            Mode::Perturbation => 0,
            Mode::Physical => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Mode::Perturbation),
            1 => Some(Mode::Physical),
            _ => None,
        }
    }
}

/// Phase-space field stored x-major then v-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationField {
    pub sgrid: SpatialGrid,
    pub vgrid: Arc<VelocityGrid>,
    pub values: Vec<f64>,
    pub mode: Mode,
}

impl PerturbationField {
    pub fn zeros(sgrid: &SpatialGrid, vgrid: &Arc<VelocityGrid>, mode: Mode) -> Self {
        Self {
            sgrid: sgrid.clone(),
            vgrid: vgrid.clone(),
            values: vec![0.0; sgrid.len() * vgrid.len()],
            mode,
        }
    }

    pub fn from_fn<F: Fn([f64; 3], [f64; 3]) -> f64>(
        sgrid: &SpatialGrid,
        vgrid: &Arc<VelocityGrid>,
        mode: Mode,
        f: F,
    ) -> Self {
        let nv = vgrid.len();
        let mut values = Vec::with_capacity(sgrid.len() * nv);
        for ix in 0..sgrid.len() {
            let x = sgrid.coords(ix);
            for v in &vgrid.nodes {
                values.push(f(x, *v));
            }
        }
        Self {
            sgrid: sgrid.clone(),
            vgrid: vgrid.clone(),
            values,
            mode,
        }
    }

    pub fn nx(&self) -> usize {
        self.sgrid.len()
    }

    pub fn nv(&self) -> usize {
        self.vgrid.len()
    }

    pub fn at_x(&self, ix: usize) -> &[f64] {
        let nv = self.nv();
        &self.values[ix * nv..(ix + 1) * nv]
    }

    pub fn at_x_mut(&mut self, ix: usize) -> &mut [f64] {
        let nv = self.nv();
        &mut self.values[ix * nv..(ix + 1) * nv]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Smallest value with its (x, v) location.
    pub fn min_value(&self) -> (f64, usize, usize) {
        let nv = self.nv();
        let mut best = (f64::INFINITY, 0, 0);
        for (i, &v) in self.values.iter().enumerate() {
            if v < best.0 {
                best = (v, i / nv, i % nv);
            }
        }
        best
    }

    /// Converts between f and F = μ + √μ f.
    pub fn to_mode(&self, mode: Mode) -> Self {
        if mode == self.mode {
            return self.clone();
        }
        let vg = &self.vgrid;
        let nv = vg.len();
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(i, &g)| {
                let j = i % nv;
                match mode {
                    Mode::Physical => vg.mu_table[j] + vg.sqrt_mu_table[j] * g,
                    Mode::Perturbation => (g - vg.mu_table[j]) / vg.sqrt_mu_table[j],
                }
            })
            .collect();
        Self {
            sgrid: self.sgrid.clone(),
            vgrid: self.vgrid.clone(),
            values,
            mode,
        }
    }

    /// Discrete L² norm over x and v.
    pub fn l2(&self) -> f64 {
        let w = self.vgrid.weight() * self.sgrid.cell_volume;
        (self.values.iter().map(|v| v * v).sum::<f64>() * w).sqrt()
    }

    /// Discrete ν-weighted L² norm.
    pub fn l2_weighted(&self, nu: &[f64]) -> f64 {
        let w = self.vgrid.weight() * self.sgrid.cell_volume;
        let nv = self.nv();
        let s: f64 = self
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| nu[i % nv] * v * v)
            .sum();
        (s * w).sqrt()
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.values.len() != other.values.len() {
            return Err(Error::Shape {
                expected: self.values.len(),
                got: other.values.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxisKind {
    Space,
    Velocity,
    Time,
}

/// Where time derivatives come from.
#[derive(Debug, Clone, Copy)]
pub enum TimeContext<'a> {
    None,
    /// Previous states, most recent first, equally spaced by dt.
    History {
        prev: &'a [&'a PerturbationField],
        dt: f64,
    },
    /// Time derivatives ∂_t^k f for k = 1.. obtained from the equation.
    Substitution { derivs: &'a [PerturbationField] },
}

/// Second-order first derivative along one velocity axis of a single
/// velocity slice, one-sided at the truncation boundary.
pub fn velocity_diff(g: &[f64], vgrid: &VelocityGrid, axis: usize) -> Vec<f64> {
    let n = vgrid.n_per_axis;
    let stride = match axis {
        0 => n * n,
        1 => n,
        _ => 1,
    };
    let h2 = 2.0 * vgrid.dv;
    let mut out = vec![0.0; g.len()];
    for (j, o) in out.iter_mut().enumerate() {
        let i = (j / stride) % n;
        *o = if i == 0 {
            (-3.0 * g[j] + 4.0 * g[j + stride] - g[j + 2 * stride]) / h2
        } else if i == n - 1 {
            (3.0 * g[j] - 4.0 * g[j - stride] + g[j - 2 * stride]) / h2
        } else {
            (g[j + stride] - g[j - stride]) / h2
        };
    }
    out
}

/// ∂^order along a space, velocity or time axis.
pub fn derivative(
    field: &PerturbationField,
    kind: AxisKind,
    axis: usize,
    order: usize,
    ctx: &TimeContext,
) -> Result<PerturbationField> {
    if order == 0 {
        return Err(Error::Contract("derivative order must be >= 1".into()));
    }
    let nv = field.nv();
    let nx = field.nx();
    let mut out = field.clone();
    match kind {
        AxisKind::Space => {
            if axis >= field.sgrid.dims {
                return Err(Error::Contract(format!("space axis {axis} out of range")));
            }
            let fourier = Fourier::new(&field.sgrid);
            let mut col = vec![0.0; nx];
            for j in 0..nv {
                for ix in 0..nx {
                    col[ix] = field.values[ix * nv + j];
                }
                let d = fourier.derivative(&col, axis, order);
                for ix in 0..nx {
                    out.values[ix * nv + j] = d[ix];
                }
            }
        }
        AxisKind::Velocity => {
            if axis >= 3 {
                return Err(Error::Contract(format!("velocity axis {axis} out of range")));
            }
            for ix in 0..nx {
                let mut g = field.at_x(ix).to_vec();
                for _ in 0..order {
                    g = velocity_diff(&g, &field.vgrid, axis);
                }
                out.at_x_mut(ix).copy_from_slice(&g);
            }
        }
        AxisKind::Time => match ctx {
            TimeContext::History { prev, dt } if prev.len() >= order => {
                for p in prev.iter() {
                    field.same_shape(p)?;
                }
                let coeffs: &[f64] = match order {
                    1 => &[1.0, -1.0],
                    2 => &[1.0, -2.0, 1.0],
                    3 => &[1.0, -3.0, 3.0, -1.0],
                    _ => return Err(Error::Unsupported(format!("time derivative order {order}"))),
                };
                let scale = dt.powi(order as i32);
                for (i, o) in out.values.iter_mut().enumerate() {
                    let mut s = coeffs[0] * field.values[i];
                    for (k, c) in coeffs[1..].iter().enumerate() {
                        s += c * prev[k].values[i];
                    }
                    *o = s / scale;
                }
            }
            TimeContext::Substitution { derivs } if derivs.len() >= order => {
                field.same_shape(&derivs[order - 1])?;
                out.values.copy_from_slice(&derivs[order - 1].values);
            }
            _ => return Err(Error::MissingTimeContext { order }),
        },
    }
    Ok(out)
}

/// Σ_j x(j) over the lattice, adding each node to its mirror image -v first
/// (the mirror of node j is N_v - 1 - j). Sums of odd integrands are exactly 0.
pub fn mirror_sum<F: Fn(usize) -> f64>(nv: usize, x: F) -> f64 {
    (0..nv / 2).map(|j| x(j) + x(nv - 1 - j)).sum()
}

/// Quadrature sums Σ_j w_j ψ(v_j) g(v_j) for each weight function ψ.
pub fn moments_v(
    g_at_x: &[f64],
    vgrid: &VelocityGrid,
    psi: &[&dyn Fn(&[f64; 3]) -> f64],
) -> Result<Vec<f64>> {
    if g_at_x.len() != vgrid.len() {
        return Err(Error::Shape {
            expected: vgrid.len(),
            got: g_at_x.len(),
        });
    }
    Ok(psi
        .iter()
        .map(|p| {
            mirror_sum(vgrid.len(), |j| {
                vgrid.weights[j] * p(&vgrid.nodes[j]) * g_at_x[j]
            })
        })
        .collect())
}
