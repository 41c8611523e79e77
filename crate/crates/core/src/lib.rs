//! Stochastic Navier–Stokes with transport noise, discretized by MINI finite
//! elements on nested triangulations of the unit square.

pub mod config;
pub mod error;
pub mod experiments;
pub mod integrator;
pub mod mesh;
pub mod mini_spaces;
pub mod noise;
pub mod operator_lab;
pub mod operators;
pub mod sparse;
pub mod transfer;

pub use error::{Error, Result};
