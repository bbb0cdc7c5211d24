//! Adaptive alarm-threshold prediction for cellular networks.
//!
//! The crate covers the whole batch pipeline: alarm snapshot ingestion,
//! cell-day aggregation, feature engineering, percentile label derivation,
//! two neural threshold models built on a small reverse-mode
//! differentiation engine, and the statistical evaluation protocol.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and falls back to plain iteration otherwise.
//! Results are identical either way.

// Negated float comparisons deliberately treat NaN as out of range.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity, clippy::too_many_arguments)]

pub mod error;
pub mod eval;
pub mod features;
pub mod ingest;
pub mod itransformer;
pub mod kv;
pub mod labels;
pub mod nn;
pub mod par;
pub mod pctn;
pub mod pipeline;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
