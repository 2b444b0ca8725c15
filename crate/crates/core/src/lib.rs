//! Joint hierarchical inference over single-cell and bulk RNA-seq counts.
//!
//! Cell-type-specific expression profiles, single-cell dropout and bulk
//! mixing proportions are estimated jointly by a stochastic EM whose E-step is
//! a Gibbs sampler.

pub mod bench;
pub mod error;
pub mod gem;
pub mod gibbs;
pub mod io;
pub mod metrics;
pub mod model;
pub mod mstep;
pub mod nmf;
pub mod posterior;
pub mod rng;
pub mod samplers;
pub mod sim;
pub mod special;

pub use error::{Error, Result};
