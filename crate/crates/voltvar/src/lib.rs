//! Local volt/var control synthesis for radial distribution feeders.
//!
//! End-to-end toolkit: feeder models and their voltage-sensitivity
//! structure, a sweep AC power flow, a convex reactive-dispatch solver,
//! per-node control surrogates with stability certificates, the training
//! pipeline that produces them, and closed-loop simulation against linear
//! and AC plants.
//!
//! The expensive stages (dispatch labeling, per-node fits, batch solves)
//! run data-parallel by default; building with `--no-default-features`
//! swaps in sequential loops that produce bit-identical results.

pub mod acpf;
pub mod error;
pub mod feeder;
pub mod orpf;
pub mod profiles;
pub mod sensitivity;
pub mod sim;
pub mod surrogate;
pub mod train;

mod par;
mod textio;

pub use error::{Error, Result};
pub use textio::{float as format_float, to_json_string};
