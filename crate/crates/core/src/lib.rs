//! Learning hidden diffusion dynamics from aggregate, per-timestep sample
//! bags, with filtering and smoothing on top of the learned process.

pub mod autodiff;
pub mod nn;
pub mod rng;
pub mod ot;
pub mod sde;
pub mod data;
pub mod learn;
pub mod infer;
pub mod experiment;
