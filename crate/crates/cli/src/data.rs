//! `synth` and `features`.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use adagam::eval::gen_synthetic;
use adagam::eval::synthetic::COUNTERFACTUAL;
use adagam::table::{col, CsvSchema};
use adagam::{build_features, TimeTable};
use anyhow::{Context, Result};
use chrono::SecondsFormat;

use crate::config::Config;
use crate::records::write_json;

/// Writes a generated table with the column names of `schema`, so that it
/// reads back like user data.
fn write_raw(path: &Path, table: &TimeTable, schema: &CsvSchema) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut out = csv::Writer::from_writer(BufWriter::new(file));
    out.write_record([&schema.timestamp, &schema.load, &schema.temperature, COUNTERFACTUAL])?;
    let load = table.column(col::LOAD)?;
    let temp = table.column(col::TEMP)?;
    let cf = table.column(COUNTERFACTUAL)?;
    for (i, ts) in table.timestamps().iter().enumerate() {
        out.write_record([
            ts.to_rfc3339_opts(SecondsFormat::Secs, true),
            load[i].to_string(),
            temp[i].to_string(),
            cf[i].to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Generates the twin series and a config that backtests them.
pub fn synth(config: &Config, seed: Option<u64>, out_dir: &Path) -> Result<()> {
    let seed = seed.unwrap_or(config.seed);
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let (source, target) = gen_synthetic(&config.scenario, seed)?;
    write_raw(&out_dir.join("source.csv"), &source, &config.data.schema)?;
    write_raw(&out_dir.join("target.csv"), &target, &config.data.schema)?;

    let mut run = config.clone();
    run.seed = seed;
    run.data.period_minutes = config.scenario.period_minutes;
    run.plan = Some(config.plan());
    std::fs::write(out_dir.join("config.toml"), toml::to_string(&run)?)?;
    write_json(&out_dir.join("scenario.json"), &config.scenario)?;
    log::info!("wrote {} rows per series to {}", target.len(), out_dir.display());
    Ok(())
}

pub fn features(config: &Config, input: &Path, out: &Path) -> Result<()> {
    let raw = config.read_raw(input)?;
    let table = build_features(&raw, config.data.timezone)?;
    table.write_csv_path(out).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}
