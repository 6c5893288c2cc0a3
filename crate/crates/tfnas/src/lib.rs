//! Latency-constrained differentiable architecture search at desk scale.
//!
//! The crate implements the three search freedoms over a configurable toy
//! supernet: operation-level search with bi-sampling Gumbel-Softmax,
//! depth-level search over a sink-connecting space (plus skip-in/skip-out
//! baselines), and width-level refinement via elasticity-scaling against a
//! latency lookup table. Features are plain vectors; spatial resolution only
//! enters through per-stage latency cost factors, which keeps every piece of
//! the search math intact while staying dependency-free and fast enough for
//! a laptop core.

// `!(x > 0.0)` guards reject NaN as well as out-of-range values; the
// suggested `partial_cmp` rewrite loses that.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod derive;
pub mod elastic;
pub mod error;
pub mod gradcore;
pub mod harness;
pub mod latmodel;
pub mod optimizer;
pub mod relax;
pub mod space;

pub use error::{Error, Result};
