//! Deterministic kinetic solver for the ionic Vlasov-Poisson-Boltzmann
//! system near a global Maxwellian on a periodic box.

pub mod collision_ops;
pub mod diagnostics;
pub mod error;
pub mod field_solver;
pub mod macro_micro;
pub mod phase_grid;
pub mod table_cache;
pub mod time_stepper;

pub use error::{Error, Result};
