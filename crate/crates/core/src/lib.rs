//! Numerical laboratory for Thomas-Fermi-Dirac-von Weizsäcker (TFDW)
//! energies with background potentials.
//!
//! Fields are real amplitudes `u` on a uniform 3D grid; the energy is
//!
//! ```text
//! E_V(u) = ∫ |∇u|² + c₁|u|^{10/3} − c₂|u|^{8/3} − V u²  +  ½ ∫∫ u²(x) u²(y) / |x − y|
//! ```
//!
//! minimized over fields of fixed mass `‖u‖² = M`. Beyond the minimizer the
//! crate ships the diagnostics used to study mass splitting: component
//! detection, decay fits, the reduced interaction energies of fleeing
//! components, and the small-mass concavity machinery.

pub mod analysis;
pub mod concavity;
pub mod configopt;
pub mod coulomb;
pub mod energy;
pub mod experiments;
pub mod potentials;
pub mod runconfig;
pub mod error;
pub mod grid;
pub mod minimizer;
mod par;
pub mod snapshot;
pub mod transform;

pub use coulomb::CoulombKernel;
pub use error::{Error, Result};
pub use grid::{CutoffProfile, Field, GridSpec, Vec3};
pub use energy::{EnergyBreakdown, ModelParams, ShapeIntegrals};
pub use minimizer::{InitSpec, MinimizeConfig, MinimizeResult};
pub use potentials::{NuclearSite, PotentialSpec};
