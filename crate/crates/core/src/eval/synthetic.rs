//! Twin-series generator with a known regime break.
//!
//! Loads follow a multiplicative ground truth: level, a shared log-level
//! random walk, annual, daily and day-of-week shapes, a slowly varying
//! weekend contrast, a heating/cooling response to smoothed temperature,
//! an AR(1) daily deviation and hourly Gaussian noise. The break scales
//! the level and pulls the weekday profile toward the Saturday one while
//! preserving each weekday's total. The
//! target is the source scaled by `ρ`, with its own noise and the break
//! `source_lead_days` later.

use std::f64::consts::PI;

use chrono::{DateTime, Datelike, Duration, Timelike, Utc};
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::features::{exp_smooth, TEMP95_FACTOR};
use crate::table::{col, TimeTable, DAY_MINUTES};

/// Loads without the break, same noise draws.
pub const COUNTERFACTUAL: &str = "load_counterfactual";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub start: DateTime<Utc>,
    pub period_minutes: u32,
    /// Days before the target break.
    pub pre_break_days: usize,
    pub post_break_days: usize,
    /// Mean source load.
    pub level: f64,
    /// Target-to-source load ratio.
    pub rho: f64,
    /// Relative level change at the break, e.g. `-0.15`.
    pub break_level: f64,
    /// Weight in `[0, 1]` of the Saturday profile in post-break weekdays.
    pub break_flattening: f64,
    /// Further relative level change accumulated linearly over the first
    /// 30 post-break days, centered so that their mean level change is
    /// `break_level`.
    pub break_ramp: f64,
    /// Days by which the source break precedes the target one.
    pub source_lead_days: usize,
    /// Relative sd of the per-row noise.
    pub noise_sd: f64,
    /// AR coefficient of the daily relative deviation.
    pub daily_ar: f64,
    /// Innovation sd of the daily relative deviation.
    pub daily_sd: f64,
    /// Daily sd of the shared log-level random walk.
    pub drift_sd: f64,
    /// Daily innovation sd of the shared log weekend contrast, a
    /// mean-reverting AR(1) scaling weekend loads.
    pub weekend_sd: f64,
    /// AR coefficient of the log weekend contrast.
    pub weekend_ar: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            start: DateTime::from_timestamp(1_483_228_800, 0).expect("valid epoch"),
            period_minutes: 60,
            pre_break_days: 730,
            post_break_days: 60,
            level: 20_000.0,
            rho: 3.0,
            break_level: -0.15,
            break_flattening: 0.7,
            break_ramp: -0.06,
            source_lead_days: 7,
            noise_sd: 0.01,
            daily_ar: 0.5,
            daily_sd: 0.01,
            drift_sd: 5e-4,
            weekend_sd: 0.01,
            weekend_ar: 0.99,
        }
    }
}

impl Scenario {
    /// No level change and no flattening.
    pub fn without_break(mut self) -> Self {
        self.break_level = 0.0;
        self.break_flattening = 0.0;
        self.break_ramp = 0.0;
        self
    }

    pub fn total_days(&self) -> usize {
        self.pre_break_days + self.post_break_days
    }

    /// First instant of the target break.
    pub fn break_time(&self) -> DateTime<Utc> {
        self.start + Duration::days(self.pre_break_days as i64)
    }

    /// First instant of the source break.
    pub fn source_break_time(&self) -> DateTime<Utc> {
        self.start + Duration::days((self.pre_break_days - self.source_lead_days) as i64)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: &str| Err(EvalError::InvalidScenario(m.to_string()));
        if self.period_minutes == 0 || DAY_MINUTES % self.period_minutes != 0 {
            return bad("period must divide a day");
        }
        if self.pre_break_days < 14 + self.source_lead_days {
            return bad("need at least two weeks before the source break");
        }
        if !(self.level > 0.0) || !(self.rho > 0.0) {
            return bad("level and rho must be positive");
        }
        if !(self.break_level - self.break_ramp.abs() / 2.0 > -1.0) || !(0.0..=1.0).contains(&self.break_flattening) {
            return bad("break level must stay above -1 and flattening lie in [0, 1]");
        }
        if !(self.daily_ar.abs() < 1.0) || !(self.weekend_ar.abs() < 1.0) {
            return bad("AR coefficients must lie in (-1, 1)");
        }
        for v in [self.noise_sd, self.daily_sd, self.drift_sd, self.weekend_sd] {
            if !(v >= 0.0) {
                return bad("standard deviations must be nonnegative");
            }
        }
        Ok(())
    }
}

/// Relative daily shape at hour-of-day `h` (fractional).
fn daily_shape(h: f64) -> f64 {
    1.0 + 0.10 * (2.0 * PI * (h - 19.0) / 24.0).cos() + 0.06 * (4.0 * PI * (h - 11.0) / 24.0).cos()
}

/// Day-of-week profile, `dow` numbered from Monday = 1.
fn weekly_shape(dow: u32, h: f64) -> f64 {
    let business = (2.0 * PI * (h - 11.0) / 24.0).cos();
    match dow {
        6 => 0.90 * (1.0 - 0.03 * business),
        7 => 0.84 * (1.0 - 0.04 * business),
        1 if h < 8.0 => 0.97 * (1.0 + 0.04 * business),
        _ => 1.0 + 0.04 * business,
    }
}

fn annual_shape(doy: f64) -> f64 {
    1.0 + 0.05 * (2.0 * PI * (doy - 10.0) / 365.25).cos()
}

/// Post-break weekday profile: a blend with the Saturday profile rescaled
/// so that the daily total under the daily shape is unchanged.
struct BreakProfile {
    hours: Vec<f64>,
    kappa: f64,
}

impl BreakProfile {
    fn new(per_day: usize, kappa: f64) -> Self {
        let hours = (0..per_day).map(|k| 24.0 * k as f64 / per_day as f64).collect();
        Self { hours, kappa }
    }

    fn factor(&self, dow: u32, h: f64) -> f64 {
        if dow >= 6 || self.kappa == 0.0 {
            return weekly_shape(dow, h);
        }
        let blend = |x: f64| (1.0 - self.kappa) * weekly_shape(dow, x) + self.kappa * weekly_shape(6, x);
        let before: f64 = self.hours.iter().map(|&x| daily_shape(x) * weekly_shape(dow, x)).sum();
        let after: f64 = self.hours.iter().map(|&x| daily_shape(x) * blend(x)).sum();
        blend(h) * before / after
    }
}

struct Shared {
    timestamps: Vec<DateTime<Utc>>,
    temp: Vec<f64>,
    temp95: Vec<f64>,
    drift: Vec<f64>,
    weekend: Vec<f64>,
}

fn shared_series(s: &Scenario, rng: &mut ChaCha8Rng) -> Shared {
    let per_day = (DAY_MINUTES / s.period_minutes) as usize;
    let days = s.total_days();
    let step = Duration::minutes(s.period_minutes as i64);
    let timestamps: Vec<DateTime<Utc>> = (0..days * per_day).map(|i| s.start + step * i as i32).collect();
    let phi = 0.85f64;
    let mut anomaly = 0.0;
    let mut level = 0.0;
    let mut drift = Vec::with_capacity(days);
    let mut contrast = 0.0;
    let mut weekend = Vec::with_capacity(days);
    let mut daily_anomaly = Vec::with_capacity(days);
    for _ in 0..days {
        anomaly = phi * anomaly + 2.0 * (1.0 - phi * phi).sqrt() * rng.sample::<f64, _>(StandardNormal);
        level += s.drift_sd * rng.sample::<f64, _>(StandardNormal);
        daily_anomaly.push(anomaly);
        drift.push(level);
        contrast = s.weekend_ar * contrast + s.weekend_sd * rng.sample::<f64, _>(StandardNormal);
        weekend.push(contrast.exp());
    }
    let temp: Vec<f64> = timestamps
        .iter()
        .enumerate()
        .map(|(i, ts)| {
            let doy = ts.ordinal0() as f64;
            let h = hour_of_day(ts);
            11.0 - 8.0 * (2.0 * PI * (doy - 20.0) / 365.25).cos()
                + 4.0 * (2.0 * PI * (h - 15.0) / 24.0).cos()
                + daily_anomaly[i / per_day]
                + 0.7 * rng.sample::<f64, _>(StandardNormal)
        })
        .collect();
    let temp95 = exp_smooth(&temp, TEMP95_FACTOR).expect("nonempty series");
    Shared { timestamps, temp, temp95, drift, weekend }
}

fn hour_of_day(ts: &DateTime<Utc>) -> f64 {
    ts.hour() as f64 + ts.minute() as f64 / 60.0
}

/// One country's loads and counterfactual loads.
fn country(s: &Scenario, shared: &Shared, level: f64, break_day: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let per_day = (DAY_MINUTES / s.period_minutes) as usize;
    let profile = BreakProfile::new(per_day, s.break_flattening);
    let mut dev = 0.0;
    let mut load = Vec::with_capacity(shared.timestamps.len());
    let mut counterfactual = Vec::with_capacity(shared.timestamps.len());
    for (i, ts) in shared.timestamps.iter().enumerate() {
        let day = i / per_day;
        if i % per_day == 0 {
            dev = s.daily_ar * dev + s.daily_sd * rng.sample::<f64, _>(StandardNormal);
        }
        let noise = s.noise_sd * rng.sample::<f64, _>(StandardNormal);
        let h = hour_of_day(ts);
        let dow = ts.weekday().number_from_monday();
        let t95 = shared.temp95[i];
        let weather = 1.0 + 0.018 * (16.0 - t95).max(0.0) + 0.012 * (t95 - 22.0).max(0.0);
        let base = level
            * shared.drift[day].exp()
            * annual_shape(ts.ordinal0() as f64)
            * daily_shape(h)
            * weather
            * if dow >= 6 { shared.weekend[day] } else { 1.0 }
            * (1.0 + dev + noise);
        let regular = base * weekly_shape(dow, h);
        counterfactual.push(regular);
        load.push(if day >= break_day { base * profile.factor(dow, h) * break_factor(s, day - break_day) } else { regular });
    }
    (load, counterfactual)
}

/// Level factor `k` days after the break.
fn break_factor(s: &Scenario, k: usize) -> f64 {
    let progress = (k.min(RAMP_DAYS - 1) as f64) / (RAMP_DAYS - 1) as f64;
    1.0 + s.break_level + s.break_ramp * (progress - 0.5)
}

const RAMP_DAYS: usize = 30;

fn table(shared: &Shared, load: Vec<f64>, counterfactual: Vec<f64>, period: u32) -> Result<TimeTable, EvalError> {
    let mut cols = IndexMap::new();
    cols.insert(col::LOAD.to_string(), load);
    cols.insert(col::TEMP.to_string(), shared.temp.clone());
    cols.insert(COUNTERFACTUAL.to_string(), counterfactual);
    Ok(TimeTable::new(shared.timestamps.clone(), cols, period)?)
}

/// Generates `(source, target)` raw tables with `load`, `temp` and
/// [`COUNTERFACTUAL`] columns.
pub fn gen_synthetic(scenario: &Scenario, seed: u64) -> Result<(TimeTable, TimeTable), EvalError> {
    scenario.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shared = shared_series(scenario, &mut rng);
    let target_break = scenario.pre_break_days;
    let source_break = target_break - scenario.source_lead_days;
    let (sl, sc) = country(scenario, &shared, scenario.level, source_break, &mut rng);
    let (tl, tc) = country(scenario, &shared, scenario.level * scenario.rho, target_break, &mut rng);
    Ok((
        table(&shared, sl, sc, scenario.period_minutes)?,
        table(&shared, tl, tc, scenario.period_minutes)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transfer::estimate_rho;

    fn short() -> Scenario {
        Scenario { pre_break_days: 400, post_break_days: 40, ..Default::default() }
    }

    #[test]
    fn shapes_and_columns() {
        let s = short();
        let (src, tgt) = gen_synthetic(&s, 1).unwrap();
        assert_eq!(src.len(), 440 * 24);
        assert_eq!(tgt.timestamps(), src.timestamps());
        assert_eq!(src.column(col::TEMP).unwrap(), tgt.column(col::TEMP).unwrap());
        assert!(tgt.column(col::LOAD).unwrap().iter().all(|v| v.is_finite() && *v > 0.0));
        assert_eq!(s.break_time() - s.source_break_time(), Duration::days(7));
    }

    #[test]
    fn determinism() {
        let a = gen_synthetic(&short(), 5).unwrap();
        let b = gen_synthetic(&short(), 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.1, gen_synthetic(&short(), 6).unwrap().1);
    }

    #[test]
    fn zero_break_equals_counterfactual() {
        let (src, tgt) = gen_synthetic(&short().without_break(), 2).unwrap();
        for t in [&src, &tgt] {
            assert_eq!(t.column(col::LOAD).unwrap(), t.column(COUNTERFACTUAL).unwrap());
        }
    }

    #[test]
    fn rho_is_recovered_on_the_pre_break_year() {
        let s = short();
        let (src, tgt) = gen_synthetic(&s, 3).unwrap();
        let n = 365 * 24;
        let rho = estimate_rho(&tgt.column(col::LOAD).unwrap()[..n], &src.column(col::LOAD).unwrap()[..n]).unwrap();
        assert!((rho - 3.0).abs() <= 0.01, "{rho}");
    }

    #[test]
    fn break_lowers_the_mean_by_the_stated_fraction() {
        let s = short();
        for seed in 0..5 {
            let (src, tgt) = gen_synthetic(&s, seed).unwrap();
            for (t, day) in [(&tgt, s.pre_break_days), (&src, s.pre_break_days - s.source_lead_days)] {
                let rows = day * 24..(day + 30) * 24;
                let load: f64 = t.column(col::LOAD).unwrap()[rows.clone()].iter().sum();
                let cf: f64 = t.column(COUNTERFACTUAL).unwrap()[rows].iter().sum();
                assert!((load / cf - 0.85).abs() <= 0.01, "{}", load / cf);
            }
            // Before the break the two coincide.
            let pre = ..(s.pre_break_days - s.source_lead_days) * 24;
            assert_eq!(src.column(col::LOAD).unwrap()[pre], src.column(COUNTERFACTUAL).unwrap()[pre]);
        }
    }

    #[test]
    fn weekday_profile_flattens_toward_saturday() {
        let p = BreakProfile::new(24, 1.0);
        let total = |f: &dyn Fn(f64) -> f64| (0..24).map(|h| daily_shape(h as f64) * f(h as f64)).sum::<f64>();
        let before = total(&|h| weekly_shape(3, h));
        let after = total(&|h| p.factor(3, h));
        assert!((before - after).abs() < 1e-12 * before);
        // Fully flattened weekdays are a rescaled Saturday profile.
        let r = p.factor(3, 4.0) / weekly_shape(6, 4.0);
        assert!((p.factor(3, 15.0) / weekly_shape(6, 15.0) - r).abs() < 1e-12);
        assert_eq!(p.factor(6, 9.0), weekly_shape(6, 9.0));
    }

    #[test]
    fn invalid_scenarios() {
        for s in [
            Scenario { period_minutes: 7, ..Default::default() },
            Scenario { rho: 0.0, ..Default::default() },
            Scenario { break_level: -1.0, ..Default::default() },
            Scenario { break_flattening: 1.5, ..Default::default() },
            Scenario { pre_break_days: 10, ..Default::default() },
            Scenario { noise_sd: -1.0, ..Default::default() },
        ] {
            assert!(matches!(gen_synthetic(&s, 0), Err(EvalError::InvalidScenario(_))));
        }
    }
}
