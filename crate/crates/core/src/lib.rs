//! Data-driven synthesis and verification of nonlinear state-feedback
//! controllers for systems that are linear in a known library of basis
//! functions.

pub mod basis;
pub mod data;
pub mod io;
pub mod lmi;
pub mod synth;
pub mod verify;
