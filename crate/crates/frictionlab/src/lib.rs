//! Super-replication pricing and verification for n-step binomial markets
//! with convex trading friction.
//!
//! The numerical core is generic over the scalar type (`f32` or `f64`).
//! The `f64` aliases below are what the harness and most callers use.

pub mod convex_pl;
pub mod dual;
pub mod error;
pub mod ext_real;
pub mod friction;
pub mod limit_pde;
pub mod market_tree;
pub mod payoffs;
pub mod primal;
pub mod scalar;
pub mod text_io;

pub use error::{Error, Result};
pub use ext_real::ExtReal;
pub use scalar::Scalar;

/// Market parameters in double precision.
pub type Market = market_tree::MarketParams<f64>;
/// Penalty in double precision.
pub type PenaltyF64 = friction::Penalty<f64>;
/// Claim in double precision.
pub type ClaimF64 = payoffs::Claim<f64>;
/// Piecewise-linear path in double precision.
pub type Path = market_tree::PlPath<f64>;
/// Holdings grid in double precision.
pub type Grid = primal::GammaGrid<f64>;
/// Full-tree measure in double precision.
pub type Measure = dual::TreeMeasure<f64>;
