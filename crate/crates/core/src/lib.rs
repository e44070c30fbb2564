//! Laboratory for singular-vector/feature alignment in attention heads.

pub mod error;
pub mod analysis;
pub mod io;
pub mod linalg;
pub mod toy_model;
pub mod sweeps;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
