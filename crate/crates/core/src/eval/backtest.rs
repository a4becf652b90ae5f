//! One-step-ahead backtests of the expert roster over named test periods,
//! with a perturbation audit of the information flow.
//!
//! Every model is per instant of day, so one step is one day of the
//! instant series. The forecast at row `t` may use targets of rows `< t`
//! only, which includes the lag covariates of row `t`.

use std::io::Write;
use std::ops::Range;

use chrono::{DateTime, Duration, Utc};
use chrono_tz::Tz;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::metrics;
use super::synthetic::Scenario;
use super::EvalError;
use crate::adapt::{
    default_validation_start, greedy_search_q, run_adaptive_features, solve_theta1, tune_mu, Adapter, ExpLsConfig,
    KalmanConfig, DEFAULT_EPSILON,
};
use crate::aggregate::{as_saturday, run_panel, ExpertPanel};
use crate::features::{build_features, split_by_instant};
use crate::gam::{fit_penalized, FittedGam, GamSpec, Lambda};
use crate::residual::{correct_forecast, fit_ar_with, ArModel, Centering, MAX_ORDER};
use crate::table::{col, TimeTable};
use crate::transfer::{estimate_rho, FinetuneConfig, GramWindow, TransferLink, DEFAULT_ITERATIONS, DEFAULT_STEP_DIVISOR};

/// Forecasters a backtest can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expert {
    /// The frozen additive model.
    Gam,
    /// Frozen model plus the AR correction of its residuals.
    GamAr,
    /// AR model of the loads themselves.
    Ar,
    ExpLs,
    KalmanStatic,
    KalmanStaticBreak,
    KalmanDynamic,
    KalmanDynamicBreak,
    /// Fine-tuning on the target rows since the break.
    FineTuned,
    GamSaturday,
    GamDelta,
    GamDeltaFineTuned,
    /// ML-Poly mixture of every other expert of the roster.
    Aggregation,
}

impl Expert {
    pub const ALL: [Expert; 13] = [
        Expert::Gam,
        Expert::GamAr,
        Expert::Ar,
        Expert::ExpLs,
        Expert::KalmanStatic,
        Expert::KalmanStaticBreak,
        Expert::KalmanDynamic,
        Expert::KalmanDynamicBreak,
        Expert::FineTuned,
        Expert::GamSaturday,
        Expert::GamDelta,
        Expert::GamDeltaFineTuned,
        Expert::Aggregation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Expert::Gam => "gam",
            Expert::GamAr => "gam_ar",
            Expert::Ar => "ar",
            Expert::ExpLs => "exp_ls",
            Expert::KalmanStatic => "kalman_static",
            Expert::KalmanStaticBreak => "kalman_static_break",
            Expert::KalmanDynamic => "kalman_dynamic",
            Expert::KalmanDynamicBreak => "kalman_dynamic_break",
            Expert::FineTuned => "fine_tuned",
            Expert::GamSaturday => "gam_saturday",
            Expert::GamDelta => "gam_delta",
            Expert::GamDeltaFineTuned => "gam_delta_fine_tuned",
            Expert::Aggregation => "aggregation",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.name() == name)
    }

    /// Experts that only make sense from the break on; they join the
    /// aggregation there.
    pub fn break_only(self) -> bool {
        matches!(
            self,
            Expert::KalmanStaticBreak
                | Expert::KalmanDynamicBreak
                | Expert::FineTuned
                | Expert::GamSaturday
                | Expert::GamDelta
                | Expert::GamDeltaFineTuned
        )
    }

    pub fn needs_source(self) -> bool {
        matches!(self, Expert::GamDelta | Expert::GamDeltaFineTuned)
    }
}

/// Half-open time range `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Period {
    pub name: String,
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
}

impl Period {
    pub fn new(name: &str, start: DateTime<Utc>, end: DateTime<Utc>) -> Self {
        Self { name: name.to_string(), start, end }
    }

    pub fn contains(&self, t: DateTime<Utc>) -> bool {
        self.start <= t && t < self.end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestPlan {
    pub train: Period,
    /// Scored periods, chronological and disjoint.
    pub periods: Vec<Period>,
    /// First instant of the new regime in the target series.
    pub break_time: Option<DateTime<Utc>>,
    /// First instant of the new regime in the source series.
    pub source_break_time: Option<DateTime<Utc>>,
    /// First source row used to estimate the transferred shift; defaults to
    /// `source_break_time`.
    pub source_window_start: Option<DateTime<Utc>>,
    pub experts: Vec<Expert>,
    /// Instants of day to run; all when unset.
    pub instants: Option<Vec<usize>>,
    pub timezone: Tz,
    pub lambda: Lambda,
    pub finetune_iterations: usize,
    pub finetune_step_divisor: f64,
    /// Target-to-source load ratio; estimated when unset.
    pub rho: Option<f64>,
    /// Days before the end of training over which `ρ` is estimated.
    pub rho_window_days: i64,
    pub max_ar_order: usize,
    /// Number of perturbation checks; zero disables the audit.
    pub audit_steps: usize,
    pub audit_seed: u64,
}

impl Default for BacktestPlan {
    fn default() -> Self {
        Self::synthetic(&Scenario::default())
    }
}

fn utc(y: i32, m: u32, d: u32, h: u32) -> DateTime<Utc> {
    chrono::NaiveDate::from_ymd_opt(y, m, d)
        .and_then(|d| d.and_hms_opt(h, 0, 0))
        .map(|t| t.and_utc())
        .expect("valid preset date")
}

/// Pre-break control days of the synthetic plan.
const CONTROL_DAYS: usize = 30;

impl BacktestPlan {
    /// Plan matching a generated scenario: training up to 30 days before
    /// the break, those 30 days as a control period, and two 30-day periods from the
    /// break on (the second is as long as the data allows).
    pub fn synthetic(s: &Scenario) -> Self {
        let day = |d: usize| s.start + Duration::days(d as i64);
        let pre = s.pre_break_days;
        let train_days = pre.saturating_sub(CONTROL_DAYS).max(pre / 2);
        let total = s.total_days();
        let first = (pre + 30).min(total);
        let mut periods = vec![Period::new("pre_break", day(train_days), day(pre)), Period::new("break_1", day(pre), day(first))];
        if first < total {
            periods.push(Period::new("break_2", day(first), day((first + 30).min(total))));
        }
        Self {
            train: Period::new("train", s.start, day(train_days)),
            periods,
            break_time: Some(s.break_time()),
            source_break_time: Some(s.source_break_time()),
            source_window_start: None,
            experts: Expert::ALL.to_vec(),
            instants: None,
            timezone: Tz::UTC,
            lambda: Lambda::Auto,
            finetune_iterations: DEFAULT_ITERATIONS,
            finetune_step_divisor: DEFAULT_STEP_DIVISOR,
            rho: None,
            rho_window_days: 365,
            max_ar_order: MAX_ORDER,
            audit_steps: 20,
            audit_seed: 0,
        }
    }

    /// Calendar of the spring 2020 French lockdown: training from 2012 through
    /// August 2019, a pre-crisis control period, the first lockdown month
    /// and the following weeks, with the source series breaking one week
    /// earlier and fine-tuned from February 28.
    pub fn lockdown_preset() -> Self {
        let mut plan = Self::synthetic(&Scenario::default());
        // Local midnight in Paris (UTC+1 in winter).
        plan.train = Period::new("train", utc(2011, 12, 31, 23), utc(2019, 8, 31, 22));
        plan.periods = vec![
            Period::new("2019-09-01_2020-03-15", utc(2019, 8, 31, 22), utc(2020, 3, 15, 23)),
            Period::new("2020-03-16_2020-04-15", utc(2020, 3, 15, 23), utc(2020, 4, 15, 22)),
            Period::new("2020-04-16_2020-06-07", utc(2020, 4, 15, 22), utc(2020, 6, 7, 22)),
        ];
        plan.break_time = Some(utc(2020, 3, 15, 23));
        plan.source_break_time = Some(utc(2020, 3, 8, 23));
        plan.source_window_start = Some(utc(2020, 2, 27, 23));
        plan.timezone = chrono_tz::Europe::Paris;
        plan
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: String| Err(EvalError::InvalidPlan(m));
        if self.train.start >= self.train.end {
            return bad("empty training range".into());
        }
        if self.periods.is_empty() {
            return bad("no test period".into());
        }
        for p in &self.periods {
            if p.start >= p.end {
                return bad(format!("empty period `{}`", p.name));
            }
        }
        for w in self.periods.windows(2) {
            if w[1].start < w[0].end {
                return bad(format!("periods `{}` and `{}` overlap or are out of order", w[0].name, w[1].name));
            }
        }
        if let Some(b) = self.break_time {
            if !self.periods.iter().any(|p| p.contains(b)) {
                return bad("break time lies outside every test period".into());
            }
        }
        if self.experts.is_empty() {
            return bad("empty roster".into());
        }
        if self.experts.iter().any(|e| e.break_only()) && self.break_time.is_none() {
            return bad("break experts need a break time".into());
        }
        if self.experts.iter().any(|e| e.needs_source()) && self.source_break_time.is_none() && self.source_window_start.is_none() {
            return bad("transfer experts need a source break time".into());
        }
        if !(self.finetune_step_divisor > 0.0) || self.rho_window_days <= 0 || self.max_ar_order > MAX_ORDER {
            return bad("invalid numeric setting".into());
        }
        let mut roster = self.experts.clone();
        roster.sort();
        if roster.windows(2).any(|w| w[0] == w[1]) {
            return bad("duplicate expert in roster".into());
        }
        Ok(())
    }

    fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig { k: self.finetune_iterations, step_divisor: self.finetune_step_divisor, frozen: Vec::new() }
    }

    fn has(&self, e: Expert) -> bool {
        self.experts.contains(&e)
    }

    /// Roster entries that produce their own forecasts.
    fn base_experts(&self) -> Vec<Expert> {
        self.experts.iter().copied().filter(|&e| e != Expert::Aggregation).collect()
    }

    fn span_end(&self) -> DateTime<Utc> {
        self.periods.iter().map(|p| p.end).max().unwrap_or(self.train.end).max(self.train.end)
    }
}

/// Scores of one expert on one period; `None` when the expert is not
/// active over the whole period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub expert: String,
    pub period: String,
    pub rmse: Option<f64>,
    pub mape: Option<f64>,
    pub n: usize,
    pub zero_actuals: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreCard {
    pub entries: Vec<ScoreEntry>,
}

impl ScoreCard {
    pub fn get(&self, expert: Expert, period: &str) -> Option<&ScoreEntry> {
        self.entries.iter().find(|e| e.expert == expert.name() && e.period == period)
    }

    pub fn rmse(&self, expert: Expert, period: &str) -> Option<f64> {
        self.get(expert, period).and_then(|e| e.rmse)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), EvalError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["expert", "period", "rmse", "mape", "n", "zero_actuals"])?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for e in &self.entries {
            out.write_record([
                e.expert.clone(),
                e.period.clone(),
                opt(e.rmse),
                opt(e.mape),
                e.n.to_string(),
                e.zero_actuals.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// One forecast of the archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveRow {
    pub expert: String,
    pub timestamp: DateTime<Utc>,
    pub instant: usize,
    pub actual: f64,
    pub forecast: f64,
}

/// Aggregation weight of one expert at one row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub timestamp: DateTime<Utc>,
    pub instant: usize,
    pub expert: String,
    pub weight: f64,
}

/// What the training stage selected for one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstantDiagnostics {
    pub instant: usize,
    pub lambdas: Vec<f64>,
    pub mu: Option<f64>,
    /// Exponents of the selected `Q*` diagonal; `None` entries are zero.
    pub q_exponents: Option<Vec<Option<i32>>>,
    pub residual_order: Option<(usize, usize)>,
    pub load_order: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub checked: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestOutput {
    pub scorecard: ScoreCard,
    /// Sorted by roster order of the expert, then timestamp.
    pub archive: Vec<ArchiveRow>,
    pub weights: Vec<WeightRow>,
    pub diagnostics: Vec<InstantDiagnostics>,
    pub rho: Option<f64>,
    pub audit: AuditReport,
}

impl BacktestOutput {
    pub fn write_archive_csv<W: Write>(&self, w: W) -> Result<(), EvalError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["expert", "timestamp", "instant", "actual", "forecast"])?;
        for r in &self.archive {
            out.write_record([
                r.expert.clone(),
                r.timestamp.to_rfc3339(),
                r.instant.to_string(),
                r.actual.to_string(),
                r.forecast.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Long-format CSV `t, instant, expert, weight`.
    pub fn write_weights_csv<W: Write>(&self, w: W) -> Result<(), EvalError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", "instant", "expert", "weight"])?;
        for r in &self.weights {
            out.write_record([r.timestamp.to_rfc3339(), r.instant.to_string(), r.expert.clone(), r.weight.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Forecasts of `expert` on rows whose timestamp lies in `[start, end)`,
    /// as `(actual, forecast)` pairs.
    pub fn pairs(&self, expert: Expert, start: DateTime<Utc>, end: DateTime<Utc>) -> Vec<(f64, f64)> {
        self.archive
            .iter()
            .filter(|r| r.expert == expert.name() && start <= r.timestamp && r.timestamp < end)
            .map(|r| (r.actual, r.forecast))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Training stage

struct SourceTrained {
    gam: FittedGam,
    link: TransferLink,
    design: DMatrix<f64>,
    y: Vec<f64>,
    timestamps: Vec<DateTime<Utc>>,
    window_start: DateTime<Utc>,
}

struct Trained {
    gam: FittedGam,
    /// Rows of the instant table run online: training start to last test end.
    span: Range<usize>,
    break_row: Option<usize>,
    residual_ar: Option<ArModel>,
    load_ar: Option<ArModel>,
    mu: Option<f64>,
    kalman_static: Option<KalmanConfig>,
    kalman_dynamic: Option<KalmanConfig>,
    q_exponents: Option<Vec<Option<i32>>>,
    source: Option<SourceTrained>,
}

/// Longest run of finite values ending at the end of `v`.
fn trailing_finite(v: &[f64]) -> &[f64] {
    let start = v.iter().rposition(|x| !x.is_finite()).map_or(0, |i| i + 1);
    &v[start..]
}

fn fit_or_white_noise(series: &[f64], max_p: usize, centering: Centering) -> Result<ArModel, EvalError> {
    let p = max_p.min(series.len() / 5);
    match fit_ar_with(series, p, centering) {
        Ok(m) => Ok(m),
        Err(e) => {
            log::warn!("AR fit failed ({e}); using no correction");
            Ok(ArModel::white_noise())
        }
    }
}

fn usable_rows(effects: &[DVector<f64>], y: &[f64]) -> Vec<usize> {
    (0..y.len()).filter(|&i| y[i].is_finite() && effects[i].iter().all(|v| v.is_finite())).collect()
}

fn first_row_at(table: &TimeTable, t: DateTime<Utc>) -> usize {
    table.timestamps().partition_point(|&s| s < t)
}

fn train_instant(plan: &BacktestPlan, target: &TimeTable, source: Option<&TimeTable>, rho: Option<f64>) -> Result<Trained, EvalError> {
    let spec = GamSpec::load_model();
    let train = target.rows_between(plan.train.start, plan.train.end);
    let span_end = first_row_at(target, plan.span_end());
    let span = train.start..span_end;
    let train_table = target.slice(train.clone());
    let gam = fit_penalized(&spec, &train_table, &plan.lambda)?;
    let y_train = train_table.column(col::LOAD)?;
    let break_row = plan.break_time.map(|b| first_row_at(target, b));

    let mut out = Trained {
        gam,
        span,
        break_row,
        residual_ar: None,
        load_ar: None,
        mu: None,
        kalman_static: None,
        kalman_dynamic: None,
        q_exponents: None,
        source: None,
    };
    let needs_effects = [Expert::ExpLs, Expert::KalmanStatic, Expert::KalmanStaticBreak, Expert::KalmanDynamic, Expert::KalmanDynamicBreak]
        .iter()
        .any(|&e| plan.has(e));
    if needs_effects {
        let effects = out.gam.effect_values(&train_table)?;
        let rows = usable_rows(&effects, y_train);
        let fs: Vec<DVector<f64>> = rows.iter().map(|&i| effects[i].clone()).collect();
        let ys: Vec<f64> = rows.iter().map(|&i| y_train[i]).collect();
        if plan.has(Expert::KalmanStatic) || plan.has(Expert::KalmanStaticBreak) {
            let d = fs.first().map_or(0, |f| f.len());
            let theta1 = solve_theta1(&DMatrix::zeros(d, d), &fs, &ys)?;
            out.kalman_static = Some(KalmanConfig::static_filter(theta1));
        }
        if plan.has(Expert::KalmanDynamic) || plan.has(Expert::KalmanDynamicBreak) {
            let search = greedy_search_q(&fs, &ys)?;
            let theta1 = solve_theta1(&search.q_star(), &fs, &ys)?;
            out.kalman_dynamic = Some(KalmanConfig::dynamic(theta1, &search.diagonal()));
            out.q_exponents = Some(search.exponents);
        }
        if plan.has(Expert::ExpLs) {
            out.mu = Some(select_mu(&spec, plan, &train_table, &rows, &fs, &ys)?);
        }
    }
    if plan.has(Expert::GamAr) {
        let fitted = out.gam.predict(&train_table)?;
        let resid: Vec<f64> = y_train.iter().zip(&fitted).map(|(y, f)| y - f).collect();
        out.residual_ar = Some(fit_or_white_noise(trailing_finite(&resid), plan.max_ar_order, Centering::None)?);
    }
    if plan.has(Expert::Ar) {
        out.load_ar = Some(fit_or_white_noise(trailing_finite(y_train), plan.max_ar_order, Centering::Mean)?);
    }
    if let (Some(src), true) = (source, plan.experts.iter().any(|e| e.needs_source())) {
        let rho = rho.ok_or_else(|| EvalError::InvalidPlan("transfer experts need a load ratio".into()))?;
        let src_train = src.slice(src.rows_between(plan.train.start, plan.train.end));
        let src_gam = fit_penalized(&spec, &src_train, &plan.lambda)?;
        let link = TransferLink::standard(&src_gam, &out.gam, rho)?;
        let window_start = plan.source_window_start.or(plan.source_break_time).expect("validated plan");
        let first = first_row_at(src, window_start);
        let last = first_row_at(src, plan.span_end());
        let rows = src.slice(first..last);
        out.source = Some(SourceTrained {
            design: src_gam.design(&rows)?,
            y: rows.column(col::LOAD)?.to_vec(),
            timestamps: rows.timestamps().to_vec(),
            gam: src_gam,
            link,
            window_start,
        });
    }
    Ok(out)
}

/// Forgetting factor by validation RMSE on the last year of training (the
/// last quarter when shorter). When the rows before the validation split
/// cover at least a year, the effects come from a model fitted on those
/// rows only; otherwise from the full training model.
fn select_mu(
    spec: &GamSpec,
    plan: &BacktestPlan,
    train_table: &TimeTable,
    rows: &[usize],
    fs: &[DVector<f64>],
    ys: &[f64],
) -> Result<f64, EvalError> {
    let split = default_validation_start(rows.len());
    if split >= 365 {
        let early_table = train_table.slice(0..rows[split]);
        if let Ok(early) = fit_penalized(spec, &early_table, &plan.lambda) {
            let effects = early.effect_values(&train_table.select(rows))?;
            if effects.iter().all(|f| f.iter().all(|v| v.is_finite())) {
                return Ok(tune_mu(&effects, ys, split, DEFAULT_EPSILON)?);
            }
        }
        log::warn!("early model for the forgetting factor failed; using the full training model");
    }
    Ok(tune_mu(fs, ys, split, DEFAULT_EPSILON)?)
}

// ---------------------------------------------------------------------------
// Online stage

/// Forecasts of every base expert over the span rows of one instant.
struct Online {
    forecasts: Vec<(Expert, Vec<f64>)>,
}

fn ar_stream(base: &[f64], series: &[f64], model: &ArModel) -> Result<Vec<f64>, EvalError> {
    let lags = model.lags_needed();
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let recent = if i >= lags { &series[i - lags..i] } else { &series[..0] };
        let value = if lags == 0 {
            correct_forecast(base[i], model, &[], 1)?
        } else if recent.len() == lags && recent.iter().all(|v| v.is_finite()) {
            correct_forecast(base[i], model, recent, 1)?
        } else {
            base[i]
        };
        out.push(value);
    }
    Ok(out)
}

fn row_of(x: &DMatrix<f64>, i: usize) -> DVector<f64> {
    x.row(i).transpose()
}

fn finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn online_instant(plan: &BacktestPlan, tr: &Trained, target: &TimeTable) -> Result<Online, EvalError> {
    let rows = target.slice(tr.span.clone());
    let n = rows.len();
    let y = rows.column(col::LOAD)?;
    let x = tr.gam.design(&rows)?;
    let beta_s = DVector::from_column_slice(&tr.gam.coefficients);
    let gam: Vec<f64> = (0..n).map(|i| x.row(i).transpose().dot(&beta_s)).collect();
    let effects = if tr.kalman_static.is_some() || tr.kalman_dynamic.is_some() || tr.mu.is_some() {
        Some(tr.gam.effect_values(&rows)?)
    } else {
        None
    };
    let brk = tr.break_row.map(|b| b.saturating_sub(tr.span.start).min(n));
    let cfg = plan.finetune_config();

    let mut out = Vec::new();
    for &e in &plan.base_experts() {
        let f = match e {
            Expert::Gam => gam.clone(),
            Expert::GamSaturday => tr.gam.predict(&as_saturday(&rows)?)?,
            Expert::GamAr => {
                let resid: Vec<f64> = y.iter().zip(&gam).map(|(a, b)| a - b).collect();
                ar_stream(&gam, &resid, tr.residual_ar.as_ref().expect("trained"))?
            }
            Expert::Ar => {
                let zero = vec![0.0; n];
                let model = tr.load_ar.as_ref().expect("trained");
                let mut f = ar_stream(&zero, y, model)?;
                if model.p == 0 && model.d == 0 {
                    f.iter_mut().for_each(|v| *v = model.mean);
                }
                f
            }
            Expert::ExpLs => {
                let cfg = ExpLsConfig { mu: tr.mu.expect("trained"), epsilon: DEFAULT_EPSILON };
                run_adaptive_features(effects.as_ref().expect("computed"), y, &Adapter::ExpLs(cfg))?.forecasts
            }
            Expert::KalmanStatic | Expert::KalmanStaticBreak | Expert::KalmanDynamic | Expert::KalmanDynamicBreak => {
                let base = if matches!(e, Expert::KalmanStatic | Expert::KalmanStaticBreak) {
                    tr.kalman_static.clone()
                } else {
                    tr.kalman_dynamic.clone()
                }
                .expect("trained");
                let config = if matches!(e, Expert::KalmanStaticBreak | Expert::KalmanDynamicBreak) {
                    base.with_break(brk.expect("validated plan"))
                } else {
                    base
                };
                run_adaptive_features(effects.as_ref().expect("computed"), y, &Adapter::Kalman(config))?.forecasts
            }
            Expert::FineTuned | Expert::GamDelta | Expert::GamDeltaFineTuned => {
                transfer_stream(e, tr, &rows, &x, y, &gam, brk.expect("validated plan"), &cfg)?
            }
            Expert::Aggregation => unreachable!("filtered out"),
        };
        out.push((e, f));
    }
    Ok(Online { forecasts: out })
}

/// Fine-tuned and transferred forecasts. Before the break they equal the
/// frozen model. At row `t` the target window holds rows `brk..t` and the
/// source window the source rows strictly before the timestamp of `t`.
#[allow(clippy::too_many_arguments)]
fn transfer_stream(
    e: Expert,
    tr: &Trained,
    rows: &TimeTable,
    x: &DMatrix<f64>,
    y: &[f64],
    gam: &[f64],
    brk: usize,
    cfg: &FinetuneConfig,
) -> Result<Vec<f64>, EvalError> {
    let n = rows.len();
    let p = tr.gam.n_coefficients();
    let beta_s = DVector::from_column_slice(&tr.gam.coefficients);
    let mut out = gam.to_vec();
    let mut window = GramWindow::new(p);
    let src = if e.needs_source() {
        Some(tr.source.as_ref().ok_or_else(|| EvalError::MissingExpert(e.name().to_string()))?)
    } else {
        None
    };
    let mut src_window = src.map(|s| GramWindow::new(s.gam.n_coefficients()));
    let src_beta = src.map(|s| DVector::from_column_slice(&s.gam.coefficients));
    let mut src_next = 0;
    for t in brk..n {
        let ts = rows.timestamps()[t];
        let xt = row_of(x, t);
        let start = match (src, src_window.as_mut(), src_beta.as_ref()) {
            (Some(s), Some(w), Some(b)) => {
                while src_next < s.timestamps.len() && s.timestamps[src_next] < ts {
                    let xs = row_of(&s.design, src_next);
                    if s.timestamps[src_next] >= s.window_start && finite(&xs) && s.y[src_next].is_finite() {
                        w.push(&xs, s.y[src_next])?;
                    }
                    src_next += 1;
                }
                let delta = w.finetune(b, cfg)? - b;
                let mut link = s.link.clone();
                link.set_delta(&delta)?;
                link.transferred(&beta_s)?
            }
            _ => beta_s.clone(),
        };
        let beta = if e == Expert::GamDelta { start } else { window.finetune(&start, cfg)? };
        out[t] = xt.dot(&beta);
        if finite(&xt) && y[t].is_finite() {
            window.push(&xt, y[t])?;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Assembly

/// Test rows of one instant and every forecast on them, aggregation
/// included.
struct InstantResult {
    instant: usize,
    timestamps: Vec<DateTime<Utc>>,
    actual: Vec<f64>,
    /// Roster order.
    forecasts: Vec<(Expert, Vec<f64>)>,
    /// `weights[t][j]` over the base experts, when aggregating.
    weights: Vec<Vec<f64>>,
}

fn in_any_period(plan: &BacktestPlan, t: DateTime<Utc>) -> bool {
    plan.periods.iter().any(|p| p.contains(t))
}

fn assemble(plan: &BacktestPlan, instant: usize, tr: &Trained, target: &TimeTable, online: Online) -> Result<InstantResult, EvalError> {
    let rows = target.slice(tr.span.clone());
    let test: Vec<usize> = (0..rows.len()).filter(|&i| in_any_period(plan, rows.timestamps()[i])).collect();
    let y_all = rows.column(col::LOAD)?;
    let actual: Vec<f64> = test.iter().map(|&i| y_all[i]).collect();
    let timestamps: Vec<DateTime<Utc>> = test.iter().map(|&i| rows.timestamps()[i]).collect();
    let base: Vec<(Expert, Vec<f64>)> =
        online.forecasts.into_iter().map(|(e, f)| (e, test.iter().map(|&i| f[i]).collect())).collect();
    let mut weights = Vec::new();
    let mut agg = None;
    if plan.has(Expert::Aggregation) && !test.is_empty() {
        let break_pos = plan.break_time.map(|b| timestamps.partition_point(|&t| t < b)).unwrap_or(0);
        let panel = ExpertPanel {
            names: base.iter().map(|(e, _)| e.name().to_string()).collect(),
            forecasts: base.iter().map(|(_, f)| f.clone()).collect(),
            active_from: base.iter().map(|(e, _)| if e.break_only() { break_pos } else { 0 }).collect(),
            bound: 1.2 * y_all.iter().copied().filter(|v| v.is_finite()).fold(0.0, f64::max),
        };
        if panel.active_from.iter().all(|&a| a > 0) {
            return Err(EvalError::InvalidPlan("aggregation has no expert active before the break".into()));
        }
        let run = run_panel(&panel, &actual)?;
        weights = run.weights;
        agg = Some(run.forecasts);
    }
    let mut forecasts = Vec::new();
    let mut base_iter = base.into_iter();
    for &e in &plan.experts {
        if e == Expert::Aggregation {
            forecasts.push((e, agg.clone().unwrap_or_else(|| vec![f64::NAN; timestamps.len()])));
        } else {
            forecasts.push(base_iter.next().expect("roster order"));
        }
    }
    Ok(InstantResult { instant, timestamps, actual, forecasts, weights })
}

fn active_over(plan: &BacktestPlan, e: Expert, p: &Period) -> bool {
    if !e.break_only() {
        return true;
    }
    plan.break_time.is_some_and(|b| b <= p.start)
}

fn score(plan: &BacktestPlan, results: &[&InstantResult]) -> Result<ScoreCard, EvalError> {
    let mut entries = Vec::new();
    for p in &plan.periods {
        let active: Vec<bool> = plan.experts.iter().map(|&e| active_over(plan, e, p)).collect();
        // Common index set: finite actual and finite forecasts of every
        // expert active over the whole period.
        let mut ys = Vec::new();
        let mut fs: Vec<Vec<f64>> = vec![Vec::new(); plan.experts.len()];
        for r in results {
            for (i, &t) in r.timestamps.iter().enumerate() {
                if !p.contains(t) || !r.actual[i].is_finite() {
                    continue;
                }
                let ok = r.forecasts.iter().zip(&active).all(|((_, f), &a)| !a || f[i].is_finite());
                if !ok {
                    continue;
                }
                ys.push(r.actual[i]);
                for (j, (_, f)) in r.forecasts.iter().enumerate() {
                    fs[j].push(f[i]);
                }
            }
        }
        for (j, &e) in plan.experts.iter().enumerate() {
            let m = if active[j] && !ys.is_empty() { Some(metrics(&ys, &fs[j])?) } else { None };
            entries.push(ScoreEntry {
                expert: e.name().to_string(),
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

fn estimate_plan_rho(plan: &BacktestPlan, target_raw: &TimeTable, source_raw: &TimeTable) -> Result<f64, EvalError> {
    let start = plan.train.end - Duration::days(plan.rho_window_days);
    let t = target_raw.slice(target_raw.rows_between(start, plan.train.end));
    let s = source_raw.slice(source_raw.rows_between(start, plan.train.end));
    if t.timestamps() != s.timestamps() {
        return Err(EvalError::InvalidPlan("target and source do not share timestamps over the ratio window".into()));
    }
    let (ty, sy) = (t.column(col::LOAD)?, s.column(col::LOAD)?);
    let keep: Vec<usize> = (0..ty.len()).filter(|&i| ty[i].is_finite() && sy[i].is_finite()).collect();
    let a: Vec<f64> = keep.iter().map(|&i| ty[i]).collect();
    let b: Vec<f64> = keep.iter().map(|&i| sy[i]).collect();
    Ok(estimate_rho(&a, &b)?)
}

/// Target table with the loads of rows `from..` perturbed and the lag
/// columns of later rows recomputed from the perturbed loads.
fn perturbed(target: &TimeTable, from: usize, rng: &mut ChaCha8Rng) -> Result<TimeTable, EvalError> {
    let mut y = target.column(col::LOAD)?.to_vec();
    for v in &mut y[from..] {
        *v *= 1.0 + 0.1 * rng.sample::<f64, _>(StandardNormal);
    }
    let mut lag1 = target.column(col::LOAD1D)?.to_vec();
    let mut lag7 = target.column(col::LOAD1W)?.to_vec();
    for i in from..y.len() {
        if i > from {
            lag1[i] = y[i - 1];
        }
        if i >= from + 7 {
            lag7[i] = y[i - 7];
        }
    }
    let mut out = target.clone();
    out.set_column(col::LOAD, y)?;
    out.set_column(col::LOAD1D, lag1)?;
    out.set_column(col::LOAD1W, lag7)?;
    Ok(out)
}

/// Runs the roster of `plan` on `target_raw` (and `source_raw` for the
/// transfer experts): features, per-instant training on the training range,
/// one-step-ahead forecasts over the test periods, scores and the audit.
pub fn backtest(plan: &BacktestPlan, target_raw: &TimeTable, source_raw: Option<&TimeTable>) -> Result<BacktestOutput, EvalError> {
    plan.validate()?;
    if source_raw.is_none() {
        if let Some(e) = plan.experts.iter().find(|e| e.needs_source()) {
            return Err(EvalError::MissingExpert(e.name().to_string()));
        }
    }
    let target_parts = split_by_instant(&build_features(target_raw, plan.timezone)?)?;
    let source_parts = match source_raw {
        Some(s) if plan.experts.iter().any(|e| e.needs_source()) => {
            if s.period_minutes() != target_raw.period_minutes() {
                return Err(EvalError::InvalidPlan("source and target periods differ".into()));
            }
            Some(split_by_instant(&build_features(s, plan.timezone)?)?)
        }
        _ => None,
    };
    let rho = match (&source_parts, plan.rho) {
        (Some(_), Some(r)) => Some(r),
        (Some(_), None) => Some(estimate_plan_rho(plan, target_raw, source_raw.expect("checked"))?),
        _ => None,
    };
    let instants: Vec<usize> = match &plan.instants {
        Some(v) => v.clone(),
        None => (0..target_parts.len()).collect(),
    };
    if let Some(&k) = instants.iter().find(|&&k| k >= target_parts.len()) {
        return Err(EvalError::InvalidPlan(format!("instant {k} out of range")));
    }

    let staged: Vec<(Trained, InstantResult)> = instants
        .par_iter()
        .map(|&k| {
            let target = &target_parts[k];
            let source = source_parts.as_ref().map(|s| &s[k]);
            let tr = train_instant(plan, target, source, rho)?;
            let online = online_instant(plan, &tr, target)?;
            let res = assemble(plan, k, &tr, target, online)?;
            Ok((tr, res))
        })
        .collect::<Result<_, EvalError>>()?;

    let audit = audit(plan, &staged, &target_parts)?;
    let results: Vec<&InstantResult> = staged.iter().map(|(_, r)| r).collect();
    let scorecard = score(plan, &results)?;

    let mut archive = Vec::new();
    for (j, &e) in plan.experts.iter().enumerate() {
        let mut rows: Vec<ArchiveRow> = results
            .iter()
            .flat_map(|r| {
                r.timestamps.iter().enumerate().map(move |(i, &t)| ArchiveRow {
                    expert: e.name().to_string(),
                    timestamp: t,
                    instant: r.instant,
                    actual: r.actual[i],
                    forecast: r.forecasts[j].1[i],
                })
            })
            .collect();
        rows.sort_by_key(|r| (r.timestamp, r.instant));
        archive.extend(rows);
    }
    let names: Vec<String> = plan.base_experts().iter().map(|e| e.name().to_string()).collect();
    let mut weights = Vec::new();
    for r in &results {
        for (i, ws) in r.weights.iter().enumerate() {
            for (name, &w) in names.iter().zip(ws) {
                weights.push(WeightRow { timestamp: r.timestamps[i], instant: r.instant, expert: name.clone(), weight: w });
            }
        }
    }
    weights.sort_by(|a, b| (a.timestamp, a.instant).cmp(&(b.timestamp, b.instant)));
    let diagnostics = staged
        .iter()
        .map(|(tr, r)| InstantDiagnostics {
            instant: r.instant,
            lambdas: tr.gam.lambdas.clone(),
            mu: tr.mu,
            q_exponents: tr.q_exponents.clone(),
            residual_order: tr.residual_ar.as_ref().map(|m| (m.p, m.d)),
            load_order: tr.load_ar.as_ref().map(|m| (m.p, m.d)),
        })
        .collect();
    Ok(BacktestOutput { scorecard, archive, weights, diagnostics, rho, audit })
}

/// Perturbs the loads of a random test row and every later row, reruns the
/// online stage and checks that every forecast up to that row is
/// bit-identical.
fn audit(plan: &BacktestPlan, staged: &[(Trained, InstantResult)], parts: &[TimeTable]) -> Result<AuditReport, EvalError> {
    if plan.audit_steps == 0 || staged.is_empty() {
        return Ok(AuditReport { checked: 0, passed: true });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.audit_seed);
    let mut checks = Vec::with_capacity(plan.audit_steps);
    for _ in 0..plan.audit_steps {
        let s = rng.random_range(0..staged.len());
        let len = staged[s].1.timestamps.len();
        if len == 0 {
            continue;
        }
        let pos = rng.random_range(0..len);
        let seed = rng.random::<u64>();
        checks.push((s, pos, seed));
    }
    let failures: Vec<Option<EvalError>> = checks
        .par_iter()
        .map(|&(s, pos, seed)| {
            let (tr, res) = &staged[s];
            let target = &parts[res.instant];
            let t = res.timestamps[pos];
            let row = first_row_at(target, t);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let run = perturbed(target, row, &mut rng)
                .and_then(|p| online_instant(plan, tr, &p).and_then(|o| assemble(plan, res.instant, tr, &p, o)));
            match run {
                Err(e) => Some(e),
                Ok(again) => {
                    for ((e, a), (_, b)) in res.forecasts.iter().zip(&again.forecasts) {
                        if a[..=pos].iter().zip(&b[..=pos]).any(|(u, v)| u.to_bits() != v.to_bits()) {
                            return Some(EvalError::LeakageGuardTripped {
                                expert: e.name().to_string(),
                                instant: res.instant,
                                timestamp: t,
                            });
                        }
                    }
                    None
                }
            }
        })
        .collect();
    if let Some(e) = failures.into_iter().flatten().next() {
        return Err(e);
    }
    Ok(AuditReport { checked: checks.len(), passed: true })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::gen_synthetic;

    #[test]
    fn perturbing_the_future_moves_later_forecasts_only() {
        let s = Scenario { pre_break_days: 420, post_break_days: 40, ..Default::default() };
        let (source, target) = gen_synthetic(&s, 11).unwrap();
        let plan = BacktestPlan::synthetic(&s);
        let parts = split_by_instant(&build_features(&target, Tz::UTC).unwrap()).unwrap();
        let src = split_by_instant(&build_features(&source, Tz::UTC).unwrap()).unwrap();
        let k = 9;
        let tr = train_instant(&plan, &parts[k], Some(&src[k]), Some(s.rho)).unwrap();
        let base = assemble(&plan, k, &tr, &parts[k], online_instant(&plan, &tr, &parts[k]).unwrap()).unwrap();
        let t = s.break_time() + Duration::days(5) + Duration::hours(k as i64);
        let pos = base.timestamps.iter().position(|&u| u == t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = perturbed(&parts[k], first_row_at(&parts[k], t), &mut rng).unwrap();
        let again = assemble(&plan, k, &tr, &p, online_instant(&plan, &tr, &p).unwrap()).unwrap();
        for ((e, a), (_, b)) in base.forecasts.iter().zip(&again.forecasts) {
            assert!(a[..=pos].iter().zip(&b[..=pos]).all(|(u, v)| u.to_bits() == v.to_bits()), "{e:?} leaked");
            assert!(a[pos + 1..pos + 9].iter().zip(&b[pos + 1..pos + 9]).any(|(u, v)| u != v), "{e:?} ignores new data");
        }
    }

    #[test]
    fn validation_rules() {
        let s = Scenario::default();
        let plan = BacktestPlan::synthetic(&s);
        plan.validate().unwrap();
        let mut p = plan.clone();
        p.experts.push(Expert::Gam);
        assert!(p.validate().is_err());
        let mut p = plan.clone();
        p.source_break_time = None;
        assert!(p.validate().is_err());
        p.experts.retain(|e| !e.needs_source());
        p.validate().unwrap();
        let mut p = plan;
        p.periods[1].start = p.periods[0].start;
        assert!(p.validate().is_err());
    }
}
