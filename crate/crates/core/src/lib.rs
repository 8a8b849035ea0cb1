//! Multi-objective design-space exploration for systolic-array accelerators.
//!
//! The crate learns an inverse mapping from quality-of-results targets to
//! discrete design configurations with a guided denoising diffusion model,
//! and ships a Gaussian-process EHVI optimizer as the reference baseline.
//! Everything is deterministic given a root seed.

pub mod checkpoint;
pub mod design_space;
pub mod diffusion;
pub mod error;
pub mod guidance;
pub mod harness;
pub mod mobo;
pub mod net;
pub mod oracle;
pub mod pareto;
pub mod report;
pub mod rng;
pub mod tensor;

pub use design_space::{Configuration, DesignSpace};
pub use error::{Error, Result};
