//! Covariates of the per-instant additive load model.
//!
//! From a raw `load`/`temp` table this derives the calendar variables (day
//! type, daylight-saving flag, time of year), exponentially smoothed
//! temperatures, daily min/max temperatures smoothed across days, and the
//! one-day and one-week load lags. Rows whose lags do not exist are kept but
//! marked with `usable = 0`.

use chrono::{DateTime, Datelike, NaiveDate, NaiveDateTime, TimeZone, Utc};
use chrono_tz::{OffsetComponents, Tz};
use thiserror::Error;

use crate::table::{col, TableError, TimeTable, DAY_MINUTES};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("smoothing factor {0} is outside [0, 1)")]
    FactorOutOfRange(f64),
    #[error("cannot smooth an empty sequence")]
    EmptyInput,
    #[error(transparent)]
    Table(#[from] TableError),
}

pub const TEMP95_FACTOR: f64 = 0.95;
pub const TEMP99_FACTOR: f64 = 0.99;

/// Saturday in the 1 = Monday … 7 = Sunday numbering.
pub const SATURDAY: f64 = 6.0;

/// Exponential smoothing `s₁ = x₁`, `s_t = factor·s_{t−1} + (1−factor)·x_t`.
pub fn exp_smooth(x: &[f64], factor: f64) -> Result<Vec<f64>, FeatureError> {
    if !(0.0..1.0).contains(&factor) {
        return Err(FeatureError::FactorOutOfRange(factor));
    }
    let Some(&first) = x.first() else {
        return Err(FeatureError::EmptyInput);
    };
    Ok(exp_smooth_from(x, factor, first))
}

/// Continues a smoothing recursion from a previous state `prev`, so that
/// smoothing a sequence in chunks gives the same result as one call.
pub fn exp_smooth_from(x: &[f64], factor: f64, prev: f64) -> Vec<f64> {
    let mut s = prev;
    x.iter()
        .map(|&v| {
            s = factor * s + (1.0 - factor) * v;
            s
        })
        .collect()
}

/// Calendar covariates of one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalendarFeatures {
    /// 1 = Monday … 7 = Sunday, in local time.
    pub day_type: u8,
    pub dls: bool,
    /// Linear time of year, 0 at local Jan 1 00:00 and 1 at the last grid
    /// instant of Dec 31.
    pub toy: f64,
}

pub fn calendar_features(ts: DateTime<Utc>, tz: Tz, period_minutes: u32) -> CalendarFeatures {
    let local = tz.from_utc_datetime(&ts.naive_utc());
    let offset = local.offset();
    let dls = !offset.dst_offset().is_zero();
    let naive = local.naive_local();
    CalendarFeatures {
        day_type: naive.weekday().number_from_monday() as u8,
        dls,
        toy: time_of_year(naive, period_minutes),
    }
}

/// Position of a local wall-clock instant on the year's instant grid.
pub fn time_of_year(local: NaiveDateTime, period_minutes: u32) -> f64 {
    let year = local.year();
    let jan1 = NaiveDate::from_ymd_opt(year, 1, 1)
        .unwrap()
        .and_hms_opt(0, 0, 0)
        .unwrap();
    let next = NaiveDate::from_ymd_opt(year + 1, 1, 1)
        .unwrap()
        .and_hms_opt(0, 0, 0)
        .unwrap();
    let span = ((next - jan1).num_minutes() - period_minutes as i64) as f64;
    let elapsed = (local - jan1).num_seconds() as f64 / 60.0;
    (elapsed / span).clamp(0.0, 1.0)
}

/// Days since the Unix epoch, the continuous time covariate.
pub fn time_index(ts: DateTime<Utc>) -> f64 {
    ts.timestamp() as f64 / 86_400.0
}

/// Adds every model covariate to a raw table holding `load` and `temp`.
///
/// The instant-of-day index is the UTC slot of the day, so each
/// per-instant series is spaced exactly 24 hours apart. Day type, DLS, time
/// of year and the daily min/max grouping use local time in `tz`.
pub fn build_features(raw: &TimeTable, tz: Tz) -> Result<TimeTable, FeatureError> {
    let load = raw.column(col::LOAD)?.to_vec();
    let temp = raw.column(col::TEMP)?.to_vec();
    let n = raw.len();
    let period = raw.period_minutes();
    let per_day = raw.instant_count();

    let mut time = Vec::with_capacity(n);
    let mut instant = Vec::with_capacity(n);
    let mut day_type = Vec::with_capacity(n);
    let mut dls = Vec::with_capacity(n);
    let mut toy = Vec::with_capacity(n);
    let mut local_dates = Vec::with_capacity(n);
    for &ts in raw.timestamps() {
        let cal = calendar_features(ts, tz, period);
        time.push(time_index(ts));
        let minute_of_day = (ts.timestamp().rem_euclid(86_400) / 60) as u32;
        instant.push((minute_of_day / period) as f64);
        day_type.push(cal.day_type as f64);
        dls.push(if cal.dls { 1.0 } else { 0.0 });
        toy.push(cal.toy);
        local_dates.push(tz.from_utc_datetime(&ts.naive_utc()).date_naive());
    }

    let (temp95, temp99) = if n == 0 {
        (Vec::new(), Vec::new())
    } else {
        (exp_smooth(&temp, TEMP95_FACTOR)?, exp_smooth(&temp, TEMP99_FACTOR)?)
    };
    let (tempmin99, tempmax99) = smoothed_daily_extremes(&temp, &local_dates);

    let lag = |k: usize| -> Vec<f64> {
        (0..n)
            .map(|i| if i >= k { load[i - k] } else { f64::NAN })
            .collect()
    };
    let load1d = lag(per_day);
    let load1w = lag(7 * per_day);
    let usable = (0..n)
        .map(|i| {
            let ok = load1d[i].is_finite() && load1w[i].is_finite() && load[i].is_finite();
            if ok {
                1.0
            } else {
                0.0
            }
        })
        .collect();

    let mut out = TimeTable::new(raw.timestamps().to_vec(), Default::default(), period)?;
    out.set_column(col::LOAD, load)?;
    out.set_column(col::TEMP, temp)?;
    out.set_column(col::TIME, time)?;
    out.set_column(col::INSTANT, instant)?;
    out.set_column(col::DAY_TYPE, day_type)?;
    out.set_column(col::DLS, dls)?;
    out.set_column(col::TOY, toy)?;
    out.set_column(col::TEMP95, temp95)?;
    out.set_column(col::TEMP99, temp99)?;
    out.set_column(col::TEMPMIN99, tempmin99)?;
    out.set_column(col::TEMPMAX99, tempmax99)?;
    out.set_column(col::LOAD1D, load1d)?;
    out.set_column(col::LOAD1W, load1w)?;
    out.set_column(col::USABLE, usable)?;
    Ok(out)
}

/// Daily min and max over each local calendar day, smoothed across days with
/// factor 0.99 and broadcast back to every row of the day.
fn smoothed_daily_extremes(temp: &[f64], dates: &[NaiveDate]) -> (Vec<f64>, Vec<f64>) {
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    for i in 1..=dates.len() {
        if i == dates.len() || dates[i] != dates[start] {
            groups.push((start, i));
            start = i;
        }
    }
    let mins: Vec<f64> = groups
        .iter()
        .map(|&(a, b)| temp[a..b].iter().copied().fold(f64::INFINITY, f64::min))
        .collect();
    let maxs: Vec<f64> = groups
        .iter()
        .map(|&(a, b)| temp[a..b].iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let broadcast = |daily: &[f64]| -> Vec<f64> {
        let smoothed = match daily.first() {
            Some(&f) => exp_smooth_from(daily, TEMP99_FACTOR, f),
            None => Vec::new(),
        };
        let mut out = vec![0.0; temp.len()];
        for (g, &(a, b)) in groups.iter().enumerate() {
            out[a..b].iter_mut().for_each(|v| *v = smoothed[g]);
        }
        out
    };
    (broadcast(&mins), broadcast(&maxs))
}

/// One table per instant of day, in instant order.
pub fn split_by_instant(tbl: &TimeTable) -> Result<Vec<TimeTable>, TableError> {
    let instant = tbl.column(col::INSTANT)?;
    let count = tbl.instant_count();
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); count];
    for (i, &k) in instant.iter().enumerate() {
        rows[k as usize].push(i);
    }
    Ok(rows
        .iter()
        .map(|r| {
            let sub = tbl.select(r);
            TimeTable::from_parts_unchecked(
                sub.timestamps().to_vec(),
                sub.column_names()
                    .map(|c| (c.to_string(), sub.column(c).unwrap().to_vec()))
                    .collect(),
                DAY_MINUTES,
            )
        })
        .collect())
}

/// Inverse of [`split_by_instant`]: interleaves per-instant tables back into
/// one chronological table with the given period.
pub fn merge_instants(parts: &[TimeTable], period_minutes: u32) -> Result<TimeTable, TableError> {
    let first = parts.first().ok_or(TableError::Empty)?;
    let names: Vec<String> = first.column_names().map(str::to_string).collect();
    let mut order: Vec<(DateTime<Utc>, usize, usize)> = parts
        .iter()
        .enumerate()
        .flat_map(|(p, t)| t.timestamps().iter().enumerate().map(move |(i, &ts)| (ts, p, i)))
        .collect();
    order.sort();
    let timestamps = order.iter().map(|o| o.0).collect();
    let mut columns = indexmap::IndexMap::new();
    for name in names {
        let cols: Vec<&[f64]> = parts
            .iter()
            .map(|t| t.column(&name))
            .collect::<Result<_, _>>()?;
        columns.insert(name, order.iter().map(|&(_, p, i)| cols[p][i]).collect());
    }
    TimeTable::new(timestamps, columns, period_minutes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::parse_timestamp;
    use indexmap::IndexMap;
    use proptest::prelude::*;

    fn raw_table(start: &str, n: usize, period: u32) -> TimeTable {
        let t0 = parse_timestamp(start).unwrap();
        let ts: Vec<_> = (0..n)
            .map(|i| t0 + chrono::Duration::minutes(period as i64 * i as i64))
            .collect();
        let mut cols = IndexMap::new();
        cols.insert(
            col::LOAD.to_string(),
            (0..n).map(|i| 1000.0 + (i % 48) as f64).collect(),
        );
        cols.insert(
            col::TEMP.to_string(),
            (0..n).map(|i| 10.0 + 5.0 * ((i as f64) * 0.1).sin()).collect(),
        );
        TimeTable::new(ts, cols, period).unwrap()
    }

    #[test]
    fn smoothing_examples() {
        assert_eq!(exp_smooth(&[10.0, 20.0], 0.95).unwrap(), vec![10.0, 10.5]);
        let x = [3.0, -1.0, 7.5];
        assert_eq!(exp_smooth(&x, 0.0).unwrap(), x.to_vec());
        assert_eq!(exp_smooth(&[5.0, 5.0, 5.0], 0.99).unwrap(), vec![5.0; 3]);
        assert!(matches!(exp_smooth(&[1.0], 1.0), Err(FeatureError::FactorOutOfRange(_))));
        assert!(matches!(exp_smooth(&[], 0.5), Err(FeatureError::EmptyInput)));
    }

    proptest! {
        #[test]
        fn smoothing_is_streaming_consistent(
            x in prop::collection::vec(-50.0f64..50.0, 2..60),
            cut in 1usize..59,
            factor in 0.0f64..0.999,
        ) {
            let cut = cut.min(x.len() - 1);
            let whole = exp_smooth(&x, factor).unwrap();
            let mut chained = exp_smooth(&x[..cut], factor).unwrap();
            let last = *chained.last().unwrap();
            chained.extend(exp_smooth_from(&x[cut..], factor, last));
            prop_assert_eq!(whole, chained);
        }

        #[test]
        fn smoothing_stays_within_observed_range(
            x in prop::collection::vec(-50.0f64..50.0, 1..60),
            factor in 0.0f64..0.999,
        ) {
            let s = exp_smooth(&x, factor).unwrap();
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for (v, sv) in x.iter().zip(&s) {
                lo = lo.min(*v);
                hi = hi.max(*v);
                prop_assert!(*sv >= lo - 1e-9 && *sv <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn time_of_year_endpoints_and_midpoint() {
        let at = |s: &str| {
            calendar_features(parse_timestamp(s).unwrap(), chrono_tz::UTC, 30).toy
        };
        assert_eq!(at("2019-01-01T00:00:00Z"), 0.0);
        assert_eq!(at("2019-12-31T23:30:00Z"), 1.0);
        // Linear-interpolation oracle: index of the instant among the
        // year's 17520 half-hours over the index of the last one.
        let mid = at("2019-07-02T12:00:00Z");
        let idx = (182 * 48 + 24) as f64;
        assert!((mid - idx / 17_519.0).abs() < 1e-12);
        assert!((mid - 0.5).abs() <= 1.0 / 17_520.0);
        // Leap year still reaches 1 on the last instant.
        assert_eq!(at("2020-12-31T23:30:00Z"), 1.0);
    }

    #[test]
    fn time_of_year_is_monotone_and_resets() {
        let tbl = raw_table("2019-12-25T00:00:00Z", 48 * 14, 30);
        let f = build_features(&tbl, chrono_tz::UTC).unwrap();
        let toy = f.column(col::TOY).unwrap();
        let mut resets = 0;
        for w in toy.windows(2) {
            if w[1] < w[0] {
                resets += 1;
                assert_eq!(w[1], 0.0);
            }
        }
        assert_eq!(resets, 1);
    }

    #[test]
    fn day_type_numbering_starts_monday() {
        // 2020-03-16 was a Monday, 2020-03-21 a Saturday.
        let f = |s| calendar_features(parse_timestamp(s).unwrap(), chrono_tz::UTC, 30).day_type;
        assert_eq!(f("2020-03-16T12:00:00Z"), 1);
        assert_eq!(f("2020-03-21T12:00:00Z"), 6);
        assert_eq!(f("2020-03-22T12:00:00Z"), 7);
    }

    #[test]
    fn dls_flips_twice_in_paris() {
        let tbl = raw_table("2019-01-01T00:00:00Z", 365 * 24, 60);
        let f = build_features(&tbl, chrono_tz::Europe::Paris).unwrap();
        let dls = f.column(col::DLS).unwrap();
        let flips = dls.windows(2).filter(|w| w[0] != w[1]).count();
        assert_eq!(flips, 2);
        assert_eq!(dls[0], 0.0);
        assert_eq!(dls[24 * 200], 1.0);
    }

    #[test]
    fn lags_and_usable_flags() {
        let tbl = raw_table("2020-01-06T00:00:00Z", 48 * 9, 30);
        let f = build_features(&tbl, chrono_tz::UTC).unwrap();
        let usable = f.column(col::USABLE).unwrap();
        assert!(usable[..48 * 7].iter().all(|&u| u == 0.0));
        assert!(usable[48 * 7..].iter().all(|&u| u == 1.0));
        let load = f.column(col::LOAD).unwrap();
        assert_eq!(f.column(col::LOAD1D).unwrap()[48 * 8 + 3], load[48 * 7 + 3]);
        assert_eq!(f.column(col::LOAD1W).unwrap()[48 * 8 + 3], load[48 + 3]);
        assert!(f.column(col::LOAD1D).unwrap()[47].is_nan());
    }

    #[test]
    fn daily_extremes_are_constant_within_a_day() {
        let tbl = raw_table("2020-01-06T00:00:00Z", 48 * 3, 30);
        let f = build_features(&tbl, chrono_tz::UTC).unwrap();
        let tmin = f.column(col::TEMPMIN99).unwrap();
        let tmax = f.column(col::TEMPMAX99).unwrap();
        let temp = f.column(col::TEMP).unwrap();
        let first_min = temp[..48].iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(tmin[0], first_min);
        for d in 0..3 {
            assert!(tmin[d * 48..(d + 1) * 48].iter().all(|&v| v == tmin[d * 48]));
            assert!(tmax[d * 48..(d + 1) * 48].iter().all(|&v| v == tmax[d * 48]));
        }
        assert!(tmin[0] <= tmax[0]);
    }

    #[test]
    fn missing_column_is_reported() {
        let mut cols = IndexMap::new();
        cols.insert(col::LOAD.to_string(), vec![1.0]);
        let t = TimeTable::new(vec![parse_timestamp("2020-01-01T00:00:00Z").unwrap()], cols, 30)
            .unwrap();
        assert!(matches!(
            build_features(&t, chrono_tz::UTC),
            Err(FeatureError::Table(TableError::MissingColumn(c))) if c == col::TEMP
        ));
    }

    #[test]
    fn split_counts_and_round_trip() {
        let tbl = raw_table("2020-01-01T00:00:00Z", 96, 30);
        let f = build_features(&tbl, chrono_tz::UTC).unwrap();
        let parts = split_by_instant(&f).unwrap();
        assert_eq!(parts.len(), 48);
        assert!(parts.iter().all(|p| p.len() == 2));
        assert_eq!(parts.iter().map(TimeTable::len).sum::<usize>(), f.len());
        let merged = merge_instants(&parts, 30).unwrap();
        // NaN lags make PartialEq fail, so compare bit patterns.
        assert_eq!(merged.timestamps(), f.timestamps());
        for name in f.column_names() {
            let a: Vec<u64> = f.column(name).unwrap().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = merged.column(name).unwrap().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "{name}");
        }
    }

    #[test]
    fn hourly_table_splits_into_24() {
        let tbl = raw_table("2020-01-01T00:00:00Z", 72, 60);
        let f = build_features(&tbl, chrono_tz::Europe::Rome).unwrap();
        let parts = split_by_instant(&f).unwrap();
        assert_eq!(parts.len(), 24);
        assert!(parts.iter().all(|p| p.len() == 3));
    }
}
