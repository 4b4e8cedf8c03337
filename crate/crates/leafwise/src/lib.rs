//! Numerical differential geometry on anchored bundles: integration of
//! admissible curves, principal lifts over trivialized bundles, and
//! estimation of leafwise holonomy groups and their algebras.
//!
//! The crate is organized bottom-up:
//!
//! * [`liegroup`]: fixed matrix groups, their algebras, and a Lie-group
//!   integrator for right-logarithmic-derivative equations,
//! * [`anchored`]: anchored bundles, induced fields, composite flows, and
//!   bracket-generated rank,
//! * [`curves`]: piecewise controls and admissible base curves,
//! * [`lift`]: trivialized principal lifts, transport, and lift transfer,
//! * [`holonomy`]: loop families, holonomy sampling, and algebra estimates,
//! * [`scenario`]: a JSON-driven task runner shared with the CLI.

// Guards of the form `!(x > 0.0)` reject NaN along with non-positive values;
// the negation is load-bearing.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anchored;
pub mod curves;
mod error;
pub mod holonomy;
pub mod liegroup;
pub mod lift;
pub mod scenario;

pub use error::{Error, Result};
