//! Binary snapshots. Layout, all little-endian:
//!
//! ```text
//! "IVPBSNAP"  u32 version  u8 mode  u8 dims  u32 nx[dims]  f64 v_max  u32 nv_axis
//! f64 time  u64 step_index
//! u64 len  f64 field[len]                 x-major, then v-major
//! f64 phi[nx] exp_phi[nx] e1[nx] e2[nx] e3[nx] u_bar[nx]
//! f64 mean_defect  f64 residual_norm  u64 newton_iters  u64 h  f64 history[h]
//! u8 has_prev  [f64 prev[len]]
//! u8 has_last  [f64 t  f64 y]  f64 integral
//! ```

use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};

use ivpb::diagnostics::EnergyAccumulator;
use ivpb::field_solver::PotentialState;
use ivpb::phase_grid::{Mode, PerturbationField, ScalarFieldX, SpatialGrid, VelocityGrid};
use ivpb::time_stepper::SimState;

pub const MAGIC: &[u8; 8] = b"IVPBSNAP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub state: SimState,
    pub accum: EnergyAccumulator,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, x: u8) {
        self.0.push(x);
    }
    fn u32(&mut self, x: u32) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn u64(&mut self, x: u64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn f64(&mut self, x: f64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn f64s(&mut self, xs: &[f64]) {
        xs.iter().for_each(|&x| self.f64(x));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            bail!("truncated snapshot: needed {n} bytes at offset {}, file has {}", self.pos, self.buf.len());
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into()?))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).context("snapshot length overflow")?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            x => bail!("corrupt snapshot: flag byte {x}"),
        }
    }
}

pub fn encode(snap: &Snapshot) -> Vec<u8> {
    let s = &snap.state;
    let f = &s.field;
    let mut w = Writer(Vec::with_capacity(64 + 16 * f.values.len()));
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u8(f.mode.code());
    w.u8(f.sgrid.dims as u8);
    for &n in &f.sgrid.n_per_dim {
        w.u32(n as u32);
    }
    w.f64(f.vgrid.v_max);
    w.u32(f.vgrid.n_per_axis as u32);
    w.f64(s.time);
    w.u64(s.step_index as u64);
    w.u64(f.values.len() as u64);
    w.f64s(&f.values);
    let p = &s.potential;
    w.f64s(&p.phi.values);
    w.f64s(&p.exp_phi.values);
    for e in &p.e_field {
        w.f64s(e);
    }
    w.f64s(&p.u_bar.values);
    w.f64(p.mean_defect);
    w.f64(p.residual_norm);
    w.u64(p.newton_iters as u64);
    w.u64(p.residual_history.len() as u64);
    w.f64s(&p.residual_history);
    match &s.prev_field {
        Some(prev) => {
            w.u8(1);
            w.f64s(&prev.values);
        }
        None => w.u8(0),
    }
    match snap.accum.last {
        Some((t, y)) => {
            w.u8(1);
            w.f64(t);
            w.f64(y);
        }
        None => w.u8(0),
    }
    w.f64(snap.accum.integral);
    w.0
}

/// Decodes a snapshot. `vgrid` is reused when its parameters match the
/// header, otherwise a fresh grid is built.
pub fn decode(buf: &[u8], vgrid: Option<&Arc<VelocityGrid>>) -> Result<Snapshot> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(8).context("not a snapshot file")?;
    ensure!(magic == MAGIC, "not a snapshot file: bad magic {:?}", String::from_utf8_lossy(magic));
    let version = r.u32()?;
    ensure!(version == VERSION, "unsupported snapshot version {version} (this build reads version {VERSION})");
    let mode_code = r.u8()?;
    let mode = Mode::from_code(mode_code).with_context(|| format!("corrupt snapshot: unknown mode code {mode_code}"))?;
    let dims = r.u8()? as usize;
    ensure!((1..=3).contains(&dims), "corrupt snapshot: {dims} spatial dimensions");
    let nx = (0..dims).map(|_| r.u32().map(|n| n as usize)).collect::<Result<Vec<_>>>()?;
    let v_max = r.f64()?;
    let nv_axis = r.u32()? as usize;
    let time = r.f64()?;
    let step_index = r.u64()? as usize;
    let sgrid = SpatialGrid::new(&nx).context("corrupt snapshot: spatial grid")?;
    let vgrid = match vgrid {
        Some(v) if v.v_max.to_bits() == v_max.to_bits() && v.n_per_axis == nv_axis => v.clone(),
        _ => Arc::new(ivpb::phase_grid::build_velocity_grid(v_max, nv_axis).context("corrupt snapshot: velocity grid")?),
    };
    let len = r.u64()? as usize;
    ensure!(
        len == sgrid.len() * vgrid.len(),
        "corrupt snapshot: {len} values for a {}x{} grid",
        sgrid.len(),
        vgrid.len()
    );
    let field = PerturbationField {
        sgrid: sgrid.clone(),
        vgrid: vgrid.clone(),
        values: r.f64s(len)?,
        mode,
    };
    let m = sgrid.len();
    let scalar = |r: &mut Reader| -> Result<ScalarFieldX> {
        Ok(ScalarFieldX {
            grid: sgrid.clone(),
            values: r.f64s(m)?,
        })
    };
    let phi = scalar(&mut r)?;
    let exp_phi = scalar(&mut r)?;
    let e_field = [r.f64s(m)?, r.f64s(m)?, r.f64s(m)?];
    let u_bar = scalar(&mut r)?;
    let mean_defect = r.f64()?;
    let residual_norm = r.f64()?;
    let newton_iters = r.u64()? as usize;
    let h = r.u64()? as usize;
    let residual_history = r.f64s(h)?;
    let prev_field = if r.flag()? {
        Some(PerturbationField {
            values: r.f64s(len)?,
            ..field.clone()
        })
    } else {
        None
    };
    let last = if r.flag()? { Some((r.f64()?, r.f64()?)) } else { None };
    let integral = r.f64()?;
    ensure!(r.pos == buf.len(), "corrupt snapshot: {} trailing bytes", buf.len() - r.pos);
    Ok(Snapshot {
        state: SimState {
            field,
            potential: PotentialState {
                phi,
                e_field,
                exp_phi,
                newton_iters,
                residual_norm,
                residual_history,
                u_bar,
                mean_defect,
            },
            time,
            step_index,
            prev_field,
        },
        accum: EnergyAccumulator { last, integral },
    })
}

pub fn write(path: &Path, snap: &Snapshot) -> Result<()> {
    std::fs::write(path, encode(snap)).with_context(|| format!("writing snapshot {}", path.display()))
}

pub fn read(path: &Path, vgrid: Option<&Arc<VelocityGrid>>) -> Result<Snapshot> {
    let buf = std::fs::read(path).with_context(|| format!("reading snapshot {}", path.display()))?;
    decode(&buf, vgrid).with_context(|| format!("loading snapshot {}", path.display()))
}
