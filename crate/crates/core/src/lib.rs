//! Free energy, dissipation and circulation for diffusion processes.
//!
//! The crate solves and simulates Fokker–Planck dynamics
//! `∂f/∂t = ∇·(β⁻¹D∇f − b f)`, splits drifts into a divergence-free
//! circulation plus a gradient part, classifies stationary states as
//! detailed-balanced, Maxwell–Boltzmann equilibria with circulation, or
//! driven nonequilibrium steady states, evaluates the free-energy and
//! entropy-production ledger, and tabulates Boltzmann entropy, temperature
//! and generalized force for parametrized families of potentials.
//!
//! Sign convention used throughout: the probability current is
//! `J = b f − β⁻¹ D ∇f`, so that `∂f/∂t = −∇·J`.

pub mod error;
pub mod fpe;
pub mod helmholtz;
pub mod mb;
pub mod model;
pub mod numerics;
pub mod ou;
pub mod sde;
pub mod thermo;

pub use error::{Error, Result};
pub use model::{DiffusionModel, PotentialSpec};
pub use numerics::{CurrentField, Grid, GridField, Matrix, RngStream};
