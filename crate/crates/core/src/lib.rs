//! Diffusive molecular dynamics on a bounded box.
//!
//! Sites carry an occupancy probability `c_i` together with the mean
//! position `X_i` and stiffness `k_i` of a harmonic (variational Gaussian)
//! approximation. The crate provides
//!
//! * the pair potentials and the four system potentials ([`potentials`]),
//! * closed-form quantities of the approximate product ensemble ([`ensemble`]),
//! * the approximate free-energy functionals and their gradients ([`free_energy`]),
//! * box-constrained minimization over `(X, k)` ([`minimizer`]),
//! * occupancy evolution by gradient flow or master equation ([`dynamics`]),
//! * a brute-force reference for systems of up to three sites ([`oracle`]),
//! * scenario files, artifacts and the command drivers used by the CLI
//!   ([`scenario`], [`io`], [`commands`]).

pub mod commands;
pub mod domain;
pub mod dynamics;
pub mod ensemble;
pub mod error;
pub mod free_energy;
pub mod io;
pub mod minimizer;
pub mod oracle;
mod pair_quadrature;
pub mod potentials;
pub mod quadrature;
pub mod scenario;

pub use domain::{
    build_lattice, HarmonicVariant, LatticeSpec, Model, OccupancyVector, Positions, SiteState,
    SystemState, ThermodynamicDomain, C_FLOOR, DEFAULT_K_MAX,
};
pub use error::{DmdError, Result};
pub use free_energy::{Estimator, FreeEnergyReport, Functional, LogDomainTerm, Objective};
pub use potentials::{AlloyPotentialSpec, Interaction, PairKind, PairPotentialSpec};
