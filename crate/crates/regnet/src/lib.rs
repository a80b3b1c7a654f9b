//! Toolkit for microgrid participation in frequency regulation markets.
//!
//! The crate is organized around the pipeline an aggregator walks through:
//!
//! 1. [`netgraph`] — directed graphs and the incidence / loop / path / Laplacian
//!    matrices everything else is built on.
//! 2. [`powerflow`] — lossless linear power flow on a microgrid network.
//! 3. [`convexsolve`] — a small deterministic LP/QP solver.
//! 4. [`abstraction`] — regulation capacity, ramp rate and cost abstractions of
//!    a microgrid, with chance-constrained variants for uncertain loads.
//! 5. [`market`] — bid construction, market clearing and the proportional
//!    current-practice allocation baseline.
//! 6. [`coordination`] — distributed disaggregation of the regulation signal by
//!    gradient descent combined with dynamic average consensus, plus a
//!    centralized reference solver.
//! 7. [`harness`] — end-to-end tracking experiments over synthetic fleets.
//!
//! Grid sampling and Monte-Carlo loops run on rayon when the `parallel` feature
//! (on by default) is enabled; with the feature disabled everything falls back
//! to sequential loops with identical results.

pub mod abstraction;
pub mod convexsolve;
pub mod coordination;
pub mod harness;
pub mod io;
pub mod market;
pub mod netgraph;
pub mod par;
pub mod powerflow;
pub mod stats;
