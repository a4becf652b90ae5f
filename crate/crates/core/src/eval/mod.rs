//! Metrics, the synthetic twin-series generator and backtests.

pub mod backtest;
pub mod metrics;
pub mod synthetic;

use chrono::{DateTime, Utc};
use thiserror::Error;

use crate::adapt::AdaptError;
use crate::aggregate::AggregateError;
use crate::features::FeatureError;
use crate::gam::GamError;
use crate::residual::ResidualError;
use crate::table::TableError;
use crate::transfer::TransferError;

pub use backtest::{backtest, BacktestOutput, BacktestPlan, Expert, Period, ScoreCard};
pub use metrics::{metrics, Metrics};
pub use synthetic::{gen_synthetic, Scenario};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("expected {expected} forecasts, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("nothing to score")]
    EmptySample,
    #[error("non-finite actual or forecast")]
    NonFinite,
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("invalid backtest plan: {0}")]
    InvalidPlan(String),
    #[error("expert `{0}` cannot run: its inputs are missing")]
    MissingExpert(String),
    #[error("forecast of `{expert}` at instant {instant} up to {timestamp} depends on later targets")]
    LeakageGuardTripped { expert: String, instant: usize, timestamp: DateTime<Utc> },
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Gam(#[from] GamError),
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
    #[error(transparent)]
    Residual(#[from] ResidualError),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
