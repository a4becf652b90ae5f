//! File formats shared by the subcommands: per-instant model sets and long
//! forecast tables.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use adagam::eval::backtest::ArchiveRow;
use adagam::FittedGam;
use anyhow::{bail, Context, Result};
use chrono::{DateTime, Utc};
use chrono_tz::Tz;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstantModel {
    pub instant: usize,
    pub model: FittedGam,
}

/// One fitted model per instant of day, with the data it was fitted on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSet {
    pub timezone: Tz,
    pub period_minutes: u32,
    pub train_start: DateTime<Utc>,
    pub train_end: DateTime<Utc>,
    pub models: Vec<InstantModel>,
}

impl ModelSet {
    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        serde_json::from_reader(BufReader::new(file)).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn get(&self, instant: usize) -> Option<&FittedGam> {
        self.models.iter().find(|m| m.instant == instant).map(|m| &m.model)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(file), value)?;
    Ok(())
}

/// Long forecast table `expert, timestamp, instant, actual, forecast`.
pub fn write_forecasts(path: &Path, rows: &[ArchiveRow]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut out = csv::Writer::from_writer(BufWriter::new(file));
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_forecasts(path: &Path) -> Result<Vec<ArchiveRow>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let rows = rdr
        .deserialize()
        .collect::<Result<Vec<ArchiveRow>, _>>()
        .with_context(|| format!("parsing {}", path.display()))?;
    Ok(rows)
}

/// Forecasts of several experts on a common time axis for one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub instant: usize,
    pub timestamps: Vec<DateTime<Utc>>,
    pub actual: Vec<f64>,
    /// `forecasts[j][t]`, NaN where expert `j` has no forecast.
    pub forecasts: Vec<Vec<f64>>,
}

/// Groups forecast rows by instant. Experts keep their first-seen order;
/// rows with a non-finite actual are dropped. Two rows giving different
/// actuals for the same timestamp are an error.
pub fn to_grids(rows: &[ArchiveRow]) -> Result<(Vec<String>, Vec<Grid>)> {
    let mut experts: Vec<String> = Vec::new();
    for r in rows {
        if !experts.contains(&r.expert) {
            experts.push(r.expert.clone());
        }
    }
    let mut by_instant: BTreeMap<usize, BTreeMap<DateTime<Utc>, (f64, Vec<f64>)>> = BTreeMap::new();
    for r in rows {
        if !r.actual.is_finite() {
            continue;
        }
        let j = experts.iter().position(|e| *e == r.expert).expect("collected above");
        let entry = by_instant
            .entry(r.instant)
            .or_default()
            .entry(r.timestamp)
            .or_insert_with(|| (r.actual, vec![f64::NAN; experts.len()]));
        if entry.0 != r.actual {
            bail!("conflicting actuals at {} (instant {})", r.timestamp, r.instant);
        }
        entry.1[j] = r.forecast;
    }
    let grids = by_instant
        .into_iter()
        .map(|(instant, rows)| {
            let mut g = Grid {
                instant,
                timestamps: Vec::with_capacity(rows.len()),
                actual: Vec::with_capacity(rows.len()),
                forecasts: vec![Vec::with_capacity(rows.len()); experts.len()],
            };
            for (t, (y, fs)) in rows {
                g.timestamps.push(t);
                g.actual.push(y);
                for (j, f) in fs.into_iter().enumerate() {
                    g.forecasts[j].push(f);
                }
            }
            g
        })
        .collect();
    Ok((experts, grids))
}
