//! `fit`, `adapt`, `finetune` and `transfer`.

use std::path::Path;

use adagam::adapt::{
    default_validation_start, greedy_search_q, run_adaptive_features, solve_theta1, tune_mu, Adapter, ExpLsConfig,
    KalmanConfig, DEFAULT_EPSILON,
};
use adagam::eval::backtest::ArchiveRow;
use adagam::table::col;
use adagam::transfer::{estimate_rho, GramWindow, TransferLink};
use adagam::{build_features, fit_penalized, split_by_instant, FittedGam, GamSpec, TimeTable};
use anyhow::{bail, Context, Result};
use chrono::{DateTime, Duration, Utc};
use clap::ValueEnum;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use serde_json::Value;

use crate::config::Config;
use crate::records::{write_forecasts, write_json, InstantModel, ModelSet};

fn instant_tables(config: &Config, raw: &TimeTable) -> Result<Vec<TimeTable>> {
    Ok(split_by_instant(&build_features(raw, config.data.timezone)?)?)
}

fn first_row_at(table: &TimeTable, t: DateTime<Utc>) -> usize {
    table.timestamps().partition_point(|&s| s < t)
}

fn finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn check_models(models: &ModelSet, config: &Config, parts: &[TimeTable]) -> Result<()> {
    if models.period_minutes != config.data.period_minutes {
        bail!("models were fitted on {}-minute data, input has {} minutes", models.period_minutes, config.data.period_minutes);
    }
    if let Some(m) = models.models.iter().find(|m| m.instant >= parts.len()) {
        bail!("model for instant {} but the input has {} instants", m.instant, parts.len());
    }
    Ok(())
}

pub struct FitArgs<'a> {
    pub input: &'a Path,
    pub train_start: Option<DateTime<Utc>>,
    pub train_end: Option<DateTime<Utc>>,
    pub instants: Option<Vec<usize>>,
    pub out: &'a Path,
}

/// Fits one model per instant on `[train_start, train_end)`, the whole
/// file by default.
pub fn fit(config: &Config, args: &FitArgs) -> Result<()> {
    let raw = config.read_raw(args.input)?;
    let parts = instant_tables(config, &raw)?;
    let ts = raw.timestamps();
    let start = args.train_start.unwrap_or(ts[0]);
    let end = args.train_end.unwrap_or(ts[ts.len() - 1] + Duration::minutes(config.data.period_minutes as i64));
    if start >= end {
        bail!("empty training range {start} .. {end}");
    }
    let instants = args.instants.clone().unwrap_or_else(|| (0..parts.len()).collect());
    let spec = GamSpec::load_model();
    let mut models = Vec::with_capacity(instants.len());
    for k in instants {
        let part = parts.get(k).with_context(|| format!("instant {k} out of range (0..{})", parts.len()))?;
        let rows = part.slice(part.rows_between(start, end));
        let model = fit_penalized(&spec, &rows, &config.lambda).with_context(|| format!("fitting instant {k}"))?;
        log::info!("instant {k}: {} rows, lambdas {:?}", rows.len(), model.lambdas);
        models.push(InstantModel { instant: k, model });
    }
    let set = ModelSet {
        timezone: config.data.timezone,
        period_minutes: config.data.period_minutes,
        train_start: start,
        train_end: end,
        models,
    };
    write_json(args.out, &set)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    KalmanStatic,
    KalmanDynamic,
    ExpLs,
}

pub struct AdaptArgs<'a> {
    pub models: &'a Path,
    pub input: &'a Path,
    pub method: Method,
    pub break_time: Option<DateTime<Utc>>,
    pub out: &'a Path,
    pub state_out: Option<&'a Path>,
    pub trajectory_dir: Option<&'a Path>,
}

#[derive(Serialize)]
struct AdapterState {
    instant: usize,
    /// Forgetting factor of exp-LS.
    #[serde(skip_serializing_if = "Option::is_none")]
    mu: Option<f64>,
    /// Kalman hyperparameters.
    #[serde(skip_serializing_if = "Option::is_none")]
    kalman: Option<Value>,
}

/// Trains the adapter on the model's training rows, then runs it online
/// from the start of training to the end of the input. Forecasts after the
/// training range are written.
pub fn adapt(config: &Config, args: &AdaptArgs) -> Result<()> {
    let set = ModelSet::read(args.models)?;
    let raw = config.read_raw(args.input)?;
    let parts = instant_tables(config, &raw)?;
    check_models(&set, config, &parts)?;
    if args.break_time.is_some() && args.method == Method::ExpLs {
        bail!("a break time only applies to the Kalman methods");
    }
    let name = match (args.method, args.break_time.is_some()) {
        (Method::KalmanStatic, false) => "kalman_static",
        (Method::KalmanStatic, true) => "kalman_static_break",
        (Method::KalmanDynamic, false) => "kalman_dynamic",
        (Method::KalmanDynamic, true) => "kalman_dynamic_break",
        (Method::ExpLs, _) => "exp_ls",
    };
    if let Some(dir) = args.trajectory_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut rows_out = Vec::new();
    let mut states = Vec::new();
    for m in &set.models {
        let stream = parts[m.instant].slice(first_row_at(&parts[m.instant], set.train_start)..parts[m.instant].len());
        let n_train = first_row_at(&stream, set.train_end);
        let effects = m.model.effect_values(&stream)?;
        let y = stream.column(col::LOAD)?;
        let usable: Vec<usize> = (0..n_train).filter(|&i| y[i].is_finite() && finite(&effects[i])).collect();
        let fs: Vec<DVector<f64>> = usable.iter().map(|&i| effects[i].clone()).collect();
        let ys: Vec<f64> = usable.iter().map(|&i| y[i]).collect();
        let d = effects.first().map_or(0, |f| f.len());
        let (adapter, state) = match args.method {
            Method::ExpLs => {
                let mu = tune_mu(&fs, &ys, default_validation_start(fs.len()), DEFAULT_EPSILON)?;
                (Adapter::ExpLs(ExpLsConfig { mu, epsilon: DEFAULT_EPSILON }), AdapterState { instant: m.instant, mu: Some(mu), kalman: None })
            }
            Method::KalmanStatic | Method::KalmanDynamic => {
                let mut kc = if args.method == Method::KalmanStatic {
                    KalmanConfig::static_filter(solve_theta1(&DMatrix::zeros(d, d), &fs, &ys)?)
                } else {
                    let search = greedy_search_q(&fs, &ys)?;
                    log::info!("instant {}: Q* exponents {:?}", m.instant, search.exponents);
                    KalmanConfig::dynamic(solve_theta1(&search.q_star(), &fs, &ys)?, &search.diagonal())
                };
                if let Some(b) = args.break_time {
                    kc = kc.with_break(first_row_at(&stream, b));
                }
                let kalman: Value = serde_json::from_str(&kc.to_json()?)?;
                (Adapter::Kalman(kc), AdapterState { instant: m.instant, mu: None, kalman: Some(kalman) })
            }
        };
        let run = run_adaptive_features(&effects, y, &adapter)?;
        if let Some(dir) = args.trajectory_dir {
            let path = dir.join(format!("{name}_{}.csv", m.instant));
            let file = std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            run.write_trajectory_csv(std::io::BufWriter::new(file))?;
        }
        for i in n_train..stream.len() {
            rows_out.push(archive_row(name, &stream, m.instant, i, run.forecasts[i])?);
        }
        states.push(state);
    }
    sort_rows(&mut rows_out);
    write_forecasts(args.out, &rows_out)?;
    if let Some(path) = args.state_out {
        write_json(path, &states)?;
    }
    Ok(())
}

fn archive_row(expert: &str, rows: &TimeTable, instant: usize, i: usize, forecast: f64) -> Result<ArchiveRow> {
    Ok(ArchiveRow {
        expert: expert.to_string(),
        timestamp: rows.timestamps()[i],
        instant,
        actual: rows.column(col::LOAD)?[i],
        forecast,
    })
}

fn sort_rows(rows: &mut [ArchiveRow]) {
    rows.sort_by(|a, b| (a.timestamp, a.instant).cmp(&(b.timestamp, b.instant)));
}

pub struct FinetuneArgs<'a> {
    pub models: &'a Path,
    pub input: &'a Path,
    pub start: DateTime<Utc>,
    pub out: &'a Path,
    pub coefficients_out: Option<&'a Path>,
}

#[derive(Serialize)]
struct Coefficients {
    instant: usize,
    coefficients: Vec<f64>,
}

/// Fine-tuned forecasts from `start` on: the forecast at each row uses the
/// model fine-tuned on the rows from `start` up to, not including, that row.
pub fn finetune(config: &Config, args: &FinetuneArgs) -> Result<()> {
    let set = ModelSet::read(args.models)?;
    let raw = config.read_raw(args.input)?;
    let parts = instant_tables(config, &raw)?;
    check_models(&set, config, &parts)?;
    let mut rows_out = Vec::new();
    let mut coefs = Vec::new();
    for m in &set.models {
        let rows = parts[m.instant].slice(first_row_at(&parts[m.instant], args.start)..parts[m.instant].len());
        let x = m.model.design(&rows)?;
        let y = rows.column(col::LOAD)?;
        let beta_s = DVector::from_column_slice(&m.model.coefficients);
        let mut window = GramWindow::new(beta_s.len());
        for t in 0..rows.len() {
            let beta = window.finetune(&beta_s, &config.finetune)?;
            let xt: DVector<f64> = x.row(t).transpose();
            rows_out.push(archive_row("fine_tuned", &rows, m.instant, t, xt.dot(&beta))?);
            if finite(&xt) && y[t].is_finite() {
                window.push(&xt, y[t])?;
            }
        }
        let beta = window.finetune(&beta_s, &config.finetune)?;
        coefs.push(Coefficients { instant: m.instant, coefficients: beta.iter().copied().collect() });
    }
    sort_rows(&mut rows_out);
    write_forecasts(args.out, &rows_out)?;
    if let Some(path) = args.coefficients_out {
        write_json(path, &coefs)?;
    }
    Ok(())
}

pub struct TransferArgs<'a> {
    pub source_models: &'a Path,
    pub models: &'a Path,
    pub source: &'a Path,
    pub input: &'a Path,
    pub break_time: DateTime<Utc>,
    pub source_window_start: DateTime<Utc>,
    pub rho: Option<f64>,
    pub rho_window_days: i64,
    pub finetune: bool,
    pub out: &'a Path,
    pub link_out: Option<&'a Path>,
}

/// Target-to-source load ratio over the `days` before `end`.
fn rho_between(target: &TimeTable, source: &TimeTable, end: DateTime<Utc>, days: i64) -> Result<f64> {
    let start = end - Duration::days(days);
    let t = target.slice(target.rows_between(start, end));
    let s = source.slice(source.rows_between(start, end));
    if t.timestamps() != s.timestamps() || t.is_empty() {
        bail!("target and source do not share timestamps over {start} .. {end}");
    }
    Ok(estimate_rho(t.column(col::LOAD)?, s.column(col::LOAD)?)?)
}

#[derive(Serialize)]
struct InstantLink {
    instant: usize,
    link: TransferLink,
}

/// GAM-δ forecasts on the target from its break on. At each target row the
/// source shift is fine-tuned on the source rows from the window start up
/// to that timestamp, scaled by `ρ` and added to the target coefficients;
/// with `finetune` the result is further fine-tuned on the target rows
/// since the break.
pub fn transfer(config: &Config, args: &TransferArgs) -> Result<()> {
    let src_set = ModelSet::read(args.source_models)?;
    let set = ModelSet::read(args.models)?;
    let src_raw = config.read_raw(args.source)?;
    let raw = config.read_raw(args.input)?;
    let rho = match args.rho {
        Some(r) => r,
        None => rho_between(&raw, &src_raw, set.train_end, args.rho_window_days)?,
    };
    log::info!("load ratio {rho}");
    let src_parts = instant_tables(config, &src_raw)?;
    let parts = instant_tables(config, &raw)?;
    check_models(&src_set, config, &src_parts)?;
    check_models(&set, config, &parts)?;
    let name = if args.finetune { "gam_delta_fine_tuned" } else { "gam_delta" };

    let mut rows_out = Vec::new();
    let mut links = Vec::new();
    for m in &set.models {
        let src_gam: &FittedGam =
            src_set.get(m.instant).with_context(|| format!("no source model for instant {}", m.instant))?;
        let mut link = TransferLink::standard(src_gam, &m.model, rho)?;
        let src_rows = src_parts[m.instant].slice(first_row_at(&src_parts[m.instant], args.source_window_start)..src_parts[m.instant].len());
        let xs = src_gam.design(&src_rows)?;
        let ys = src_rows.column(col::LOAD)?;
        let rows = parts[m.instant].slice(first_row_at(&parts[m.instant], args.break_time)..parts[m.instant].len());
        let x = m.model.design(&rows)?;
        let y = rows.column(col::LOAD)?;

        let beta_src = DVector::from_column_slice(&src_gam.coefficients);
        let beta_fr = DVector::from_column_slice(&m.model.coefficients);
        let mut src_window = GramWindow::new(beta_src.len());
        let mut window = GramWindow::new(beta_fr.len());
        let mut next = 0;
        let mut push_source_until = |ts: Option<DateTime<Utc>>, w: &mut GramWindow| -> Result<()> {
            while next < src_rows.len() && ts.is_none_or(|ts| src_rows.timestamps()[next] < ts) {
                let xr: DVector<f64> = xs.row(next).transpose();
                if finite(&xr) && ys[next].is_finite() {
                    w.push(&xr, ys[next])?;
                }
                next += 1;
            }
            Ok(())
        };
        for t in 0..rows.len() {
            push_source_until(Some(rows.timestamps()[t]), &mut src_window)?;
            link.set_delta(&(src_window.finetune(&beta_src, &config.finetune)? - &beta_src))?;
            let start = link.transferred(&beta_fr)?;
            let beta = if args.finetune { window.finetune(&start, &config.finetune)? } else { start };
            let xt: DVector<f64> = x.row(t).transpose();
            rows_out.push(archive_row(name, &rows, m.instant, t, xt.dot(&beta))?);
            if finite(&xt) && y[t].is_finite() {
                window.push(&xt, y[t])?;
            }
        }
        push_source_until(None, &mut src_window)?;
        link.set_delta(&(src_window.finetune(&beta_src, &config.finetune)? - &beta_src))?;
        links.push(InstantLink { instant: m.instant, link });
    }
    sort_rows(&mut rows_out);
    write_forecasts(args.out, &rows_out)?;
    if let Some(path) = args.link_out {
        write_json(path, &links)?;
    }
    Ok(())
}
