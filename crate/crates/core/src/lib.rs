//! Unit-level small area estimation for count outcomes.

pub mod bootstrap;
pub mod data;
pub mod diagnostics;
pub mod ebpp;
pub mod error;
pub mod fixed;
pub mod forest;
pub mod glm;
pub mod gmerf;
mod linalg;
pub mod lmm;
pub mod merf;
pub mod predict;
pub mod rng;
mod serde_float;
pub mod simlab;

pub use data::{
    Covariates, CsvSchema, Dataset, DomainId, DomainUnits, Population, Sample, UnitData,
};
pub use error::{Result, SaeError};
pub use rng::RngHandle;
