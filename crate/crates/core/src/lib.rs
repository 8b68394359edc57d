//! Physics-constrained estimation of root-zone soil moisture and
//! active-learning sensor placement.
//!
//! The crate is organised bottom-up:
//!
//! - [`hydro`]: van Genuchten retention and conductivity with derivatives.
//! - [`field`]: grids, space-time fields, virtual sensors, error metric.
//! - [`richards`]: mass-conservative finite-difference Richards solver that
//!   produces the reference moisture fields.
//! - [`net`]: the surrogate network, its input-derivative jets and
//!   parameter gradients, and the Adam optimizer.
//! - [`pinn`]: physics-constrained loss terms and the training loop.
//! - [`planner`]: residual maps, the residual-plus-maximin selection rule and
//!   the sequential placement loop.
//! - [`experiment`]: configuration, seeding, orchestration and reports.

pub mod experiment;
pub mod field;
pub mod hydro;
pub mod net;
pub mod pinn;
pub mod planner;
pub mod richards;
pub mod seed;

pub use hydro::VanGenuchten;
