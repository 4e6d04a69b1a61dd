pub mod detection;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod experiment;
pub mod io;
pub mod model;
pub mod simulation;
pub mod solvers;
pub mod surrogate;
pub mod transfer;
