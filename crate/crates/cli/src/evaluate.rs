//! `aggregate`, `backtest` and `score`.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use adagam::aggregate::{run_panel, ExpertPanel};
use adagam::eval::backtest::{ArchiveRow, ScoreEntry, WeightRow};
use adagam::eval::{backtest, gen_synthetic, metrics, Period, ScoreCard};
use anyhow::{bail, Context, Result};
use chrono::{DateTime, Utc};
use thiserror::Error;

use crate::config::Config;
use crate::records::{read_forecasts, to_grids, write_forecasts, write_json};

/// The backtest ran but its leakage audit did not pass.
#[derive(Debug, Error)]
#[error("leakage audit failed: {0}")]
pub struct AuditFailed(pub String);

fn read_all(paths: &[PathBuf]) -> Result<Vec<ArchiveRow>> {
    let mut rows = Vec::new();
    for p in paths {
        rows.extend(read_forecasts(p)?);
    }
    Ok(rows)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

/// ML-Poly mixture of every expert in the forecast files, per instant.
/// An expert joins the mixture at its first finite forecast.
pub fn aggregate(forecasts: &[PathBuf], out: &Path, weights_out: Option<&Path>) -> Result<()> {
    let rows = read_all(forecasts)?;
    let (experts, grids) = to_grids(&rows)?;
    if experts.iter().any(|e| e == "aggregation") {
        bail!("input already contains aggregated forecasts");
    }
    let mut agg_rows = Vec::new();
    let mut weight_rows = Vec::new();
    for g in &grids {
        let len = g.timestamps.len();
        let active_from: Vec<usize> =
            g.forecasts.iter().map(|f| f.iter().position(|v| v.is_finite()).unwrap_or(len)).collect();
        if !active_from.contains(&0) {
            bail!("instant {}: no expert has a forecast at the first step", g.instant);
        }
        let panel = ExpertPanel {
            names: experts.clone(),
            forecasts: g.forecasts.clone(),
            active_from,
            bound: 1.2 * g.actual.iter().copied().fold(0.0, f64::max),
        };
        let run = run_panel(&panel, &g.actual)?;
        for (t, &ts) in g.timestamps.iter().enumerate() {
            agg_rows.push(ArchiveRow {
                expert: "aggregation".into(),
                timestamp: ts,
                instant: g.instant,
                actual: g.actual[t],
                forecast: run.forecasts[t],
            });
            for (name, &w) in experts.iter().zip(&run.weights[t]) {
                weight_rows.push(WeightRow { timestamp: ts, instant: g.instant, expert: name.clone(), weight: w });
            }
        }
    }
    agg_rows.sort_by(|a, b| (a.timestamp, a.instant).cmp(&(b.timestamp, b.instant)));
    write_forecasts(out, &agg_rows)?;
    if let Some(path) = weights_out {
        let mut w = csv::Writer::from_writer(create(path)?);
        for r in &weight_rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    Ok(())
}

/// Scores every expert in the forecast files on each period, over the rows
/// where every expert with a forecast in that period has one.
pub fn score_rows(rows: &[ArchiveRow], periods: &[Period]) -> Result<ScoreCard> {
    let (experts, grids) = to_grids(rows)?;
    let mut entries = Vec::new();
    for p in periods {
        let in_period = |t: &DateTime<Utc>| p.contains(*t);
        let active: Vec<bool> = (0..experts.len())
            .map(|j| grids.iter().any(|g| g.timestamps.iter().zip(&g.forecasts[j]).any(|(t, f)| in_period(t) && f.is_finite())))
            .collect();
        let mut ys = Vec::new();
        let mut fs: Vec<Vec<f64>> = vec![Vec::new(); experts.len()];
        for g in &grids {
            for (i, t) in g.timestamps.iter().enumerate() {
                if !in_period(t) || !(0..experts.len()).all(|j| !active[j] || g.forecasts[j][i].is_finite()) {
                    continue;
                }
                ys.push(g.actual[i]);
                for j in 0..experts.len() {
                    fs[j].push(g.forecasts[j][i]);
                }
            }
        }
        for (j, name) in experts.iter().enumerate() {
            let m = if active[j] && !ys.is_empty() { Some(metrics(&ys, &fs[j])?) } else { None };
            entries.push(ScoreEntry {
                expert: name.clone(),
                period: p.name.clone(),
                rmse: m.map(|m| m.rmse),
                mape: m.map(|m| m.mape),
                n: if active[j] { ys.len() } else { 0 },
                zero_actuals: m.map_or(0, |m| m.zero_actuals),
            });
        }
    }
    Ok(ScoreCard { entries })
}

pub struct ScoreArgs<'a> {
    pub forecasts: &'a [PathBuf],
    pub start: Option<DateTime<Utc>>,
    pub end: Option<DateTime<Utc>>,
    pub out: Option<&'a Path>,
    pub csv: Option<&'a Path>,
}

pub fn score(config: &Config, args: &ScoreArgs) -> Result<()> {
    let rows = read_all(args.forecasts)?;
    let periods = match (args.start, args.end) {
        (None, None) => config.plan().periods,
        (start, end) => {
            let start = start.or_else(|| rows.iter().map(|r| r.timestamp).min()).context("no forecasts")?;
            let end = end.or_else(|| rows.iter().map(|r| r.timestamp).max().map(|t| t + chrono::Duration::seconds(1))).context("no forecasts")?;
            vec![Period::new("custom", start, end)]
        }
    };
    let card = score_rows(&rows, &periods)?;
    print_card(&card);
    if let Some(path) = args.out {
        write_json(path, &card)?;
    }
    if let Some(path) = args.csv {
        card.write_csv(create(path)?)?;
    }
    Ok(())
}

fn print_card(card: &ScoreCard) {
    let opt = |v: Option<f64>, digits: usize| v.map_or("-".to_string(), |x| format!("{x:.digits$}"));
    println!("{:<24} {:<24} {:>12} {:>8} {:>8}", "expert", "period", "rmse", "mape%", "n");
    for e in &card.entries {
        println!("{:<24} {:<24} {:>12} {:>8} {:>8}", e.expert, e.period, opt(e.rmse, 1), opt(e.mape, 3), e.n);
    }
}

pub struct BacktestArgs<'a> {
    pub target: Option<&'a Path>,
    pub source: Option<&'a Path>,
    pub seed: Option<u64>,
    pub out_dir: &'a Path,
}

/// Runs the configured plan on the given files, or on freshly generated
/// series when no target file is given. Fails with [`AuditFailed`] unless
/// the leakage audit ran and passed.
pub fn run_backtest(config: &Config, args: &BacktestArgs) -> Result<()> {
    let plan = config.plan();
    let (target, source) = match args.target {
        Some(path) => (config.read_raw(path)?, args.source.map(|p| config.read_raw(p)).transpose()?),
        None => {
            if args.source.is_some() {
                bail!("a source file needs a target file");
            }
            let (s, t) = gen_synthetic(&config.scenario, args.seed.unwrap_or(config.seed))?;
            (t, Some(s))
        }
    };
    let out = backtest(&plan, &target, source.as_ref())?;
    std::fs::create_dir_all(args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    let dir = args.out_dir;
    write_json(&dir.join("scorecard.json"), &out.scorecard)?;
    out.scorecard.write_csv(create(&dir.join("scorecard.csv"))?)?;
    out.write_archive_csv(create(&dir.join("archive.csv"))?)?;
    out.write_weights_csv(create(&dir.join("weights.csv"))?)?;
    write_json(&dir.join("diagnostics.json"), &out.diagnostics)?;
    write_json(&dir.join("audit.json"), &out.audit)?;
    print_card(&out.scorecard);
    if let Some(rho) = out.rho {
        println!("load ratio {rho:.4}");
    }
    println!("leakage audit: {} checks, {}", out.audit.checked, if out.audit.passed { "passed" } else { "FAILED" });
    if out.audit.checked == 0 {
        return Err(AuditFailed("no checks were run (audit_steps = 0)".into()).into());
    }
    if !out.audit.passed {
        return Err(AuditFailed(format!("{} checks", out.audit.checked)).into());
    }
    Ok(())
}
