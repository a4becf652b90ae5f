//! Adaptive spline additive models for electricity load forecasting.
//!
//! The crate fits one penalized B-spline additive model per instant of day
//! and keeps it useful through regime breaks with online adaptation:
//! Kalman filtering and exponential-forgetting least squares over the
//! frozen normalized effects, gradient fine-tuning of the full coefficient
//! vector, transfer of a fine-tuned shift from another series, an AR
//! residual correction, and online expert aggregation.

pub mod adapt;
pub mod aggregate;
pub mod eval;
pub mod features;
pub mod gam;
pub mod residual;
pub mod spline;
pub mod table;
pub mod transfer;

pub use features::{build_features, exp_smooth, split_by_instant};
pub use gam::{fit_penalized, FittedGam, GamSpec, Lambda};
pub use table::{parse_load_csv, CsvSchema, TimeTable};
