//! Frequency-matching mode-pairing QKD: simulation and post-processing.

// `!(x >= lo)` rejects NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod beatnote;
pub mod decoy;
pub mod exec;
pub mod io;
pub mod optics_sim;
pub mod pairing;
pub mod params;
pub mod pipeline;
