//! Desk-scale laboratory for mixtures of vision encoders.

pub mod commands;
pub mod config;
pub mod error;
pub mod experts;
pub mod fusion;
pub mod lmstub;
pub mod model;
pub mod params;
pub mod registry;
pub mod selector;
pub mod synthbench;
pub mod tensorlab;
pub mod trainer;

pub use error::{Error, Result};
