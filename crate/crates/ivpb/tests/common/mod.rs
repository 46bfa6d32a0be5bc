#![allow(dead_code)]

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, OnceLock};

use ivpb::collision_ops::CollisionTables;
use ivpb::table_cache::load_or_build;

pub fn cache_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("ktab")
}

/// Tables at v_max = 6 with the 38-node sphere, assembled once per process
/// and cached on disk between runs.
pub fn tables(n: usize) -> Arc<CollisionTables> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<CollisionTables>>>> = OnceLock::new();
    let mut map = CACHE.get_or_init(Default::default).lock().unwrap();
    map.entry(n)
        .or_insert_with(|| Arc::new(load_or_build(6.0, n, 38, Some(&cache_dir())).unwrap()))
        .clone()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
