//! Disk cache for assembled collision tables.
//!
//! Layout, all little-endian: magic `IVPBKTAB`, u32 version, f64 v_max,
//! u32 n per axis, u32 sphere order, u32 sphere nodes, f64 leakage, N_v f64
//! of ν, then N_v² f64 of K row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::collision_ops::{build_k_matrix, AssemblyMetadata, CollisionTables, SphereQuadrature};
use crate::error::{Error, Result};
use crate::phase_grid::build_velocity_grid;

pub const MAGIC: &[u8; 8] = b"IVPBKTAB";
pub const VERSION: u32 = 1;

/// File name used for a given key inside a cache directory.
pub fn cache_file_name(v_max: f64, n: usize, sphere_order: usize) -> String {
    format!("ktab_v{v_max}_n{n}_s{sphere_order}.bin")
}

pub fn write_tables(tables: &CollisionTables, sphere_order: usize, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let m = &tables.metadata;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&m.v_max.to_le_bytes())?;
    w.write_all(&(m.n_per_axis as u32).to_le_bytes())?;
    w.write_all(&(sphere_order as u32).to_le_bytes())?;
    w.write_all(&(m.sphere_nodes as u32).to_le_bytes())?;
    w.write_all(&m.leakage.to_le_bytes())?;
    for x in tables.nu.iter().chain(&tables.k_matrix) {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn take<const N: usize>(buf: &[u8], pos: &mut usize) -> Result<[u8; N]> {
    let end = *pos + N;
    let s = buf
        .get(*pos..end)
        .ok_or_else(|| Error::Format("table cache truncated".into()))?;
    *pos = end;
    Ok(s.try_into().expect("slice length"))
}

pub fn read_tables(path: &Path) -> Result<(CollisionTables, usize)> {
    let mut buf = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
    let mut pos = 0;
    if &take::<8>(&buf, &mut pos)? != MAGIC {
        return Err(Error::Format("not a collision table cache (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(&buf, &mut pos)?);
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported table cache version {version} (expected {VERSION})"
        )));
    }
    let v_max = f64::from_le_bytes(take(&buf, &mut pos)?);
    let n = u32::from_le_bytes(take(&buf, &mut pos)?) as usize;
    let order = u32::from_le_bytes(take(&buf, &mut pos)?) as usize;
    let nodes = u32::from_le_bytes(take(&buf, &mut pos)?) as usize;
    let leakage = f64::from_le_bytes(take(&buf, &mut pos)?);
    let vgrid = Arc::new(build_velocity_grid(v_max, n)?);
    let sphere = SphereQuadrature::lebedev(order)?;
    if sphere.len() != nodes {
        return Err(Error::Format(format!("sphere has {} nodes, file says {nodes}", sphere.len())));
    }
    let nv = vgrid.len();
    let body = &buf[pos..];
    if body.len() != 8 * (nv + nv * nv) {
        return Err(Error::Format(format!(
            "table cache body has {} bytes, expected {}",
            body.len(),
            8 * (nv + nv * nv)
        )));
    }
    let mut vals = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));
    let nu: Vec<f64> = vals.by_ref().take(nv).collect();
    let k: Vec<f64> = vals.collect();
    let meta = AssemblyMetadata {
        v_max,
        n_per_axis: n,
        sphere_nodes: nodes,
        leakage,
    };
    Ok((CollisionTables::from_parts(&vgrid, sphere, nu, k, meta)?, order))
}

/// Reads the tables for (v_max, n, sphere order) from `dir`, assembling and
/// storing them on a miss. Without a directory the tables are always built.
pub fn load_or_build(v_max: f64, n: usize, sphere_order: usize, dir: Option<&Path>) -> Result<CollisionTables> {
    let path: Option<PathBuf> = dir.map(|d| d.join(cache_file_name(v_max, n, sphere_order)));
    if let Some(p) = &path {
        if p.exists() {
            let (t, order) = read_tables(p)?;
            if order == sphere_order && t.metadata.n_per_axis == n && t.metadata.v_max == v_max {
                return Ok(t);
            }
        }
    }
    let vgrid = Arc::new(build_velocity_grid(v_max, n)?);
    let sphere = SphereQuadrature::lebedev(sphere_order)?;
    let t = build_k_matrix(&vgrid, &sphere);
    if let Some(p) = &path {
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        static SEQ: AtomicUsize = AtomicUsize::new(0);
        let tmp = p.with_extension(format!("tmp{}.{}", std::process::id(), SEQ.fetch_add(1, Ordering::Relaxed)));
        write_tables(&t, sphere_order, &tmp)?;
        std::fs::rename(&tmp, p)?;
    }
    Ok(t)
}
