//! Command-line front end: synthetic data, features, model fitting,
//! adaptation, transfer, aggregation, scoring and backtests.

mod config;
mod data;
mod evaluate;
mod models;
mod records;

use std::path::PathBuf;
use std::process::ExitCode;

use adagam::eval::EvalError;
use adagam::table::parse_timestamp;
use anyhow::Result;
use chrono::{DateTime, Utc};
use clap::{Parser, Subcommand};

use crate::config::Config;
use crate::evaluate::AuditFailed;
use crate::models::Method;

#[derive(Debug, Parser)]
#[command(name = "adagam", version, about = "Adaptive additive models for load forecasting")]
struct Cli {
    /// TOML or JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

fn time(s: &str) -> Result<DateTime<Utc>, String> {
    parse_timestamp(s).ok_or_else(|| format!("cannot parse timestamp `{s}`"))
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate twin source/target series and a matching config.
    Synth {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Compute the feature table of a raw load file.
    Features {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit one additive model per instant of day.
    Fit {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_parser = time)]
        train_start: Option<DateTime<Utc>>,
        #[arg(long, value_parser = time)]
        train_end: Option<DateTime<Utc>>,
        /// Comma-separated instants; all by default.
        #[arg(long, value_delimiter = ',')]
        instants: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an online adaptation of fitted models over a load file.
    Adapt {
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        method: Method,
        /// First timestamp of a new regime (Kalman methods).
        #[arg(long, value_parser = time)]
        break_time: Option<DateTime<Utc>>,
        #[arg(long)]
        out: PathBuf,
        /// Selected hyperparameters per instant, as JSON.
        #[arg(long)]
        state_out: Option<PathBuf>,
        /// Directory for per-instant state trajectories.
        #[arg(long)]
        trajectory_dir: Option<PathBuf>,
    },
    /// Fine-tune fitted models on the rows from a start time on.
    Finetune {
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_parser = time)]
        start: DateTime<Utc>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        coefficients_out: Option<PathBuf>,
    },
    /// Transfer the fine-tuned shift of a source series onto target models.
    Transfer {
        #[arg(long)]
        source_models: PathBuf,
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// First timestamp of the new regime in the target.
        #[arg(long, value_parser = time)]
        break_time: DateTime<Utc>,
        /// First source row of the fine-tuning window.
        #[arg(long, value_parser = time)]
        source_window_start: DateTime<Utc>,
        /// Target-to-source load ratio; estimated before the end of
        /// training when unset.
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long, default_value_t = 365)]
        rho_window_days: i64,
        /// Fine-tune the transferred model on the target rows as well.
        #[arg(long)]
        finetune: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        link_out: Option<PathBuf>,
    },
    /// Online mixture of forecast streams.
    Aggregate {
        /// Forecast CSVs (expert, timestamp, instant, actual, forecast).
        #[arg(long, required = true, num_args = 1..)]
        forecasts: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        weights_out: Option<PathBuf>,
    },
    /// Run the full expert roster on a plan; exits non-zero unless the
    /// leakage audit passes.
    Backtest {
        /// Target load file; synthetic series are generated when unset.
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// RMSE and MAPE of forecast streams per period.
    Score {
        #[arg(long, required = true, num_args = 1..)]
        forecasts: Vec<PathBuf>,
        /// Score one custom period instead of the configured ones.
        #[arg(long, value_parser = time)]
        start: Option<DateTime<Utc>>,
        #[arg(long, value_parser = time)]
        end: Option<DateTime<Utc>>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let config = Config::load(cli.config.as_deref())?;
    match cli.command {
        Command::Synth { seed, out_dir } => data::synth(&config, seed, &out_dir),
        Command::Features { input, out } => data::features(&config, &input, &out),
        Command::Fit { input, train_start, train_end, instants, out } => {
            models::fit(&config, &models::FitArgs { input: &input, train_start, train_end, instants, out: &out })
        }
        Command::Adapt { models, input, method, break_time, out, state_out, trajectory_dir } => models::adapt(
            &config,
            &models::AdaptArgs {
                models: &models,
                input: &input,
                method,
                break_time,
                out: &out,
                state_out: state_out.as_deref(),
                trajectory_dir: trajectory_dir.as_deref(),
            },
        ),
        Command::Finetune { models, input, start, out, coefficients_out } => models::finetune(
            &config,
            &models::FinetuneArgs { models: &models, input: &input, start, out: &out, coefficients_out: coefficients_out.as_deref() },
        ),
        Command::Transfer {
            source_models,
            models,
            source,
            input,
            break_time,
            source_window_start,
            rho,
            rho_window_days,
            finetune,
            out,
            link_out,
        } => models::transfer(
            &config,
            &models::TransferArgs {
                source_models: &source_models,
                models: &models,
                source: &source,
                input: &input,
                break_time,
                source_window_start,
                rho,
                rho_window_days,
                finetune,
                out: &out,
                link_out: link_out.as_deref(),
            },
        ),
        Command::Aggregate { forecasts, out, weights_out } => evaluate::aggregate(&forecasts, &out, weights_out.as_deref()),
        Command::Backtest { target, source, seed, out_dir } => evaluate::run_backtest(
            &config,
            &evaluate::BacktestArgs { target: target.as_deref(), source: source.as_deref(), seed, out_dir: &out_dir },
        ),
        Command::Score { forecasts, start, end, out, csv } => evaluate::score(
            &config,
            &evaluate::ScoreArgs { forecasts: &forecasts, start, end, out: out.as_deref(), csv: csv.as_deref() },
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let leak = e.downcast_ref::<AuditFailed>().is_some()
                || matches!(e.downcast_ref::<EvalError>(), Some(EvalError::LeakageGuardTripped { .. }));
            ExitCode::from(if leak { 2 } else { 1 })
        }
    }
}
