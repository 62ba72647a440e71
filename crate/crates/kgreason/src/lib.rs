//! Complex logical query answering over knowledge graphs.
//!
//! The crate has three layers:
//!
//! * a symbolic layer: [`kg`] stores triples, [`query`] defines thirteen
//!   conjunctive/disjunctive query shapes and evaluates them exactly,
//!   [`synth`] grows random graphs and [`dataset`] samples query datasets
//!   with train/valid/test splits;
//! * a text layer: [`text`] linearizes queries into token sequences with
//!   structural markers and path spans, the bridge between symbolic queries
//!   and the encoder;
//! * a neural layer: [`model`] is a from-scratch transformer encoder with
//!   structure-aware pooling heads, [`train`] holds losses, the optimizer,
//!   and ranking evaluation, and [`pipeline`] wires everything into
//!   reproducible runs driven by a single config.

pub mod dataset;
pub mod kg;
pub mod model;
pub mod pipeline;
pub mod query;
pub mod rng;
pub mod synth;
pub mod text;
pub mod train;
