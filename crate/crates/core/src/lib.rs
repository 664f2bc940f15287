//! Learning local finite-difference stencils from snapshot data, with
//! optional Gershgorin dominance constraints that make the assembled
//! semi-discrete system linearly stable.

pub mod error;
pub mod experiment;
pub mod features;
pub mod forecast;
pub mod form;
pub mod grid;
pub mod io;
pub mod learner;
pub mod par;
pub mod qp;
pub mod refsim;
pub mod spectra;

pub use error::{Error, Result};
