//! Random RASP programs, their compiled transformer weights, and the tooling
//! to turn both into a decompilation dataset.

pub mod codec;
pub mod compiler;
pub mod dataset;
pub mod difftest;
pub mod evalsuite;
pub mod filters;
pub mod generator;
pub mod probe;
pub mod rasp;
