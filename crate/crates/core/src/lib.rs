//! Desk-scale numerics for simple symmetric random walks in random media and
//! their diffusive limit on `(−1, 1)ᵈ` with absorbing boundary.

// NaN must fail range checks, so negated comparisons are deliberate.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dipole;
pub mod env;
pub mod error;
pub mod green;
pub mod lattice;
pub mod rng;
pub mod solve;
pub mod spectral;
pub mod walker;

pub use env::{sample_environment, Environment, EnvironmentSpec, Family};
pub use dipole::DipoleOperator;
pub use error::{Error, Result};
pub use lattice::{build_delta, Lattice, OneForm, SparseSymmetricOperator, ZeroForm};
pub use green::{InitialMeasure, KernelGrid, Semigroup, XiProfile};
pub use solve::{CgOptions, SpdSolver};
pub use spectral::{EigenPair, Projector, SpectrumRow};
pub use walker::{Binning, DiffusionEstimate, EnsembleConfig, EnsembleStats, WalkGraph};
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
