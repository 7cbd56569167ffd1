//! Stochastic recursive optimal control with mixed delay: forward simulation,
//! backward recursive costs, adjoints, a grid HJB solver and the checks that
//! tie them together.
//!
//! Everything is generic over the scalar type (`f32` or `f64`); the aliases
//! below fix the common choices.

pub mod adjoint;
pub mod bsde;
pub mod coeffs;
pub mod connect;
pub mod control;
pub mod error;
pub mod grid;
pub mod hamiltonian;
pub mod hjb;
pub mod lsmc;
pub mod noise;
pub mod report;
pub mod scalar;
pub mod smdde;
pub mod stats;
pub mod variational;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub type TimeGrid64 = grid::TimeGrid<f64>;
pub type HistoryPath64 = grid::HistoryPath<f64>;
pub type Poly64 = coeffs::Poly<f64>;
pub type ControlDomain64 = control::ControlDomain<f64>;
pub type TrajectoryBundle64 = smdde::TrajectoryBundle<f64>;
pub type AdjointBundle64 = adjoint::AdjointBundle<f64>;
pub type LinearDriver64 = hamiltonian::LinearDriver<f64>;
pub type HjbGridConfig64 = hjb::HjbGridConfig<f64>;
pub type GridValueFunction64 = hjb::GridValueFunction<f64>;
pub type Jet64 = hjb::Jet<f64>;

pub type TimeGrid32 = grid::TimeGrid<f32>;
pub type HistoryPath32 = grid::HistoryPath<f32>;
pub type Poly32 = coeffs::Poly<f32>;
pub type TrajectoryBundle32 = smdde::TrajectoryBundle<f32>;
