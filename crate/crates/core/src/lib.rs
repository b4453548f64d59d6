//! Quasi-static crack evolution in atomistic lattices with irreversible
//! bond damage.

mod error;
pub mod analysis;
pub mod damage;
pub mod evolution;
pub mod lattice;
pub mod output;
pub mod potentials;
pub mod scenario;
pub mod solver;

pub use error::{Error, Result};
