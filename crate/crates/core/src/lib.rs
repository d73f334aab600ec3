//! Trainability lab for continual learning: a small autodiff engine, spectral
//! tools, MLPs, regularizers, nonstationary task streams and diagnostics.

pub mod models;
pub mod seed;
pub mod spectral;
pub mod tensor;
pub mod optim;
pub mod regularizers;
pub mod tasks;
pub mod diagnostics;
pub mod harness;
