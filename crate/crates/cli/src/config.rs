//! Run configuration, read from a single TOML or JSON file.

use std::path::Path;

use adagam::eval::{BacktestPlan, Scenario};
use adagam::table::{parse_load_csv, CsvSchema};
use adagam::transfer::FinetuneConfig;
use adagam::{Lambda, TimeTable};
use anyhow::{bail, Context, Result};
use chrono_tz::Tz;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub period_minutes: u32,
    pub timezone: Tz,
    pub schema: CsvSchema,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { period_minutes: 60, timezone: Tz::UTC, schema: CsvSchema::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataConfig,
    pub scenario: Scenario,
    pub seed: u64,
    /// Backtest and scoring calendar; derived from `scenario` when unset.
    pub plan: Option<BacktestPlan>,
    pub lambda: Lambda,
    pub finetune: FinetuneConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            scenario: Scenario::default(),
            seed: 0,
            plan: None,
            lambda: Lambda::Auto,
            finetune: FinetuneConfig::default(),
        }
    }
}

impl Config {
    /// Defaults when `path` is `None`. The format follows the extension:
    /// `.json` is JSON, anything else TOML.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let config = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        } else {
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        };
        Ok(config)
    }

    pub fn plan(&self) -> BacktestPlan {
        self.plan.clone().unwrap_or_else(|| BacktestPlan::synthetic(&self.scenario))
    }

    pub fn read_raw(&self, path: &Path) -> Result<TimeTable> {
        let table = parse_load_csv(path, &self.data.schema, self.data.period_minutes)
            .with_context(|| format!("reading {}", path.display()))?;
        if table.is_empty() {
            bail!("{} has no rows", path.display());
        }
        Ok(table)
    }
}
