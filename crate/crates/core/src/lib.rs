//! Spherical-harmonic moment models for two-dimensional radiative transfer
//! with a learned closure that is symmetrizable hyperbolic by construction.
//!
//! Everything numeric is generic over [`scalar::Real`] (`f32` or `f64`); the
//! aliases below fix the double-precision types used by the command line.

pub mod autodiff_mlp;
pub mod closure_model;
pub mod data_pipeline;
pub mod error;
pub mod formats;
pub mod linalg;
pub mod pn_core;
pub mod rng;
pub mod scalar;
pub mod sphere_basis;
pub mod transport_solver;

pub use error::{Error, Result};

pub type PnOperators64 = pn_core::PnOperators<f64>;
pub type ClosureBlocks64 = closure_model::ClosureBlocks<f64>;
pub type MlpParams64 = autodiff_mlp::MlpParams<f64>;
pub type SampleSet64 = autodiff_mlp::SampleSet<f64>;
pub type CheckpointRecord64 = autodiff_mlp::CheckpointRecord<f64>;
pub type Grid2D64 = transport_solver::Grid2D<f64>;
pub type FieldState64 = transport_solver::FieldState<f64>;
pub type Discretization64 = transport_solver::Discretization<f64>;
pub type ClosureModel64 = transport_solver::ClosureModel<f64>;
pub type SolverConfig64 = transport_solver::SolverConfig<f64>;
