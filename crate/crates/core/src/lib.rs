//! Core library for a learnable, differentiable 2-D finite-volume flow
//! solver: classical fine-grid reference solving, learned coarse-grid flux
//! and temporal corrections, training, data generation, and evaluation
//! metrics.

pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod engine;
pub mod equations;
pub mod error;
pub mod fft;
pub mod fluxblock;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod solver;
pub mod stencil;
pub mod temporal;
pub mod training;

pub use equations::{EquationSystem, FlowKind, Forcing};
pub use error::{Error, Result};
pub use fluxblock::{AblationSwitches, ModelParams, SpectralHyper};
pub use grid::{FieldState, Grid, Trajectory};
