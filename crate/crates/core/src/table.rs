//! Timestamped column store shared by every stage of the pipeline.
//!
//! A [`TimeTable`] holds a strictly increasing, gap-free UTC timestamp grid
//! and any number of equally long numeric columns. Columns keep insertion
//! order, which is also the order used when writing CSV.

use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, SecondsFormat, TimeZone, Utc};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minutes in a day.
pub const DAY_MINUTES: u32 = 24 * 60;

#[derive(Debug, Error)]
pub enum TableError {
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("gap in series: instant {0} is missing")]
    GapInSeries(DateTime<Utc>),
    #[error("duplicate timestamp {0}")]
    DuplicateTimestamp(DateTime<Utc>),
    #[error("timestamps are not increasing at {0}")]
    Unordered(DateTime<Utc>),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("column `{name}` has length {len}, expected {expected}")]
    LengthMismatch {
        name: String,
        len: usize,
        expected: usize,
    },
    #[error("period of {0} minutes does not divide a day")]
    BadPeriod(u32),
    #[error("{run} consecutive missing values in `{column}` starting at {start} (at most {max} allowed)")]
    TooManyMissing {
        column: String,
        start: DateTime<Utc>,
        run: usize,
        max: usize,
    },
    #[error("empty table")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Column names of the raw input file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvSchema {
    pub timestamp: String,
    pub load: String,
    pub temperature: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            timestamp: "timestamp".into(),
            load: "load_mw".into(),
            temperature: "temp_c".into(),
        }
    }
}

/// Canonical column names used inside the toolkit.
pub mod col {
    pub const LOAD: &str = "load";
    pub const TEMP: &str = "temp";
    pub const TIME: &str = "time";
    pub const INSTANT: &str = "instant";
    pub const DAY_TYPE: &str = "day_type";
    pub const DLS: &str = "dls";
    pub const TOY: &str = "toy";
    pub const TEMP95: &str = "temp95";
    pub const TEMP99: &str = "temp99";
    pub const TEMPMIN99: &str = "tempmin99";
    pub const TEMPMAX99: &str = "tempmax99";
    pub const LOAD1D: &str = "load1d";
    pub const LOAD1W: &str = "load1w";
    pub const USABLE: &str = "usable";
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeTable {
    timestamps: Vec<DateTime<Utc>>,
    columns: IndexMap<String, Vec<f64>>,
    period_minutes: u32,
}

impl TimeTable {
    /// Builds a table, checking that timestamps sit on a gap-free grid of the
    /// given period and that every column matches the timestamp length.
    pub fn new(
        timestamps: Vec<DateTime<Utc>>,
        columns: IndexMap<String, Vec<f64>>,
        period_minutes: u32,
    ) -> Result<Self, TableError> {
        if period_minutes == 0 || DAY_MINUTES % period_minutes != 0 {
            return Err(TableError::BadPeriod(period_minutes));
        }
        let step = chrono::Duration::minutes(period_minutes as i64);
        for w in timestamps.windows(2) {
            if w[1] == w[0] {
                return Err(TableError::DuplicateTimestamp(w[1]));
            }
            if w[1] < w[0] {
                return Err(TableError::Unordered(w[1]));
            }
            if w[1] - w[0] != step {
                return Err(TableError::GapInSeries(w[0] + step));
            }
        }
        for (name, values) in &columns {
            if values.len() != timestamps.len() {
                return Err(TableError::LengthMismatch {
                    name: name.clone(),
                    len: values.len(),
                    expected: timestamps.len(),
                });
            }
        }
        Ok(Self {
            timestamps,
            columns,
            period_minutes,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn timestamps(&self) -> &[DateTime<Utc>] {
        &self.timestamps
    }

    pub fn period_minutes(&self) -> u32 {
        self.period_minutes
    }

    /// Periods per day: 48 for half-hourly data, 24 for hourly, 1 for a
    /// single instant-of-day series.
    pub fn instant_count(&self) -> usize {
        (DAY_MINUTES / self.period_minutes) as usize
    }

    pub fn column(&self, name: &str) -> Result<&[f64], TableError> {
        self.columns
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| TableError::MissingColumn(name.to_string()))
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.columns.contains_key(name)
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.keys().map(String::as_str)
    }

    /// Inserts or replaces a column.
    pub fn set_column(&mut self, name: &str, values: Vec<f64>) -> Result<(), TableError> {
        if values.len() != self.len() {
            return Err(TableError::LengthMismatch {
                name: name.to_string(),
                len: values.len(),
                expected: self.len(),
            });
        }
        self.columns.insert(name.to_string(), values);
        Ok(())
    }

    /// Rows `range` as a new table.
    pub fn slice(&self, range: std::ops::Range<usize>) -> TimeTable {
        TimeTable {
            timestamps: self.timestamps[range.clone()].to_vec(),
            columns: self
                .columns
                .iter()
                .map(|(k, v)| (k.clone(), v[range.clone()].to_vec()))
                .collect(),
            period_minutes: self.period_minutes,
        }
    }

    /// Selects arbitrary rows. The result is not required to be gap-free and
    /// keeps the source period only as metadata.
    pub fn select(&self, rows: &[usize]) -> TimeTable {
        TimeTable {
            timestamps: rows.iter().map(|&i| self.timestamps[i]).collect(),
            columns: self
                .columns
                .iter()
                .map(|(k, v)| (k.clone(), rows.iter().map(|&i| v[i]).collect()))
                .collect(),
            period_minutes: self.period_minutes,
        }
    }

    /// Row indices whose timestamp lies in `[start, end)`.
    pub fn rows_between(&self, start: DateTime<Utc>, end: DateTime<Utc>) -> std::ops::Range<usize> {
        let lo = self.timestamps.partition_point(|t| *t < start);
        let hi = self.timestamps.partition_point(|t| *t < end);
        lo..hi.max(lo)
    }

    pub(crate) fn from_parts_unchecked(
        timestamps: Vec<DateTime<Utc>>,
        columns: IndexMap<String, Vec<f64>>,
        period_minutes: u32,
    ) -> Self {
        Self {
            timestamps,
            columns,
            period_minutes,
        }
    }

    /// Writes `timestamp` followed by every column in insertion order.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), TableError> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["timestamp".to_string()];
        header.extend(self.columns.keys().cloned());
        wtr.write_record(&header)?;
        for (i, ts) in self.timestamps.iter().enumerate() {
            let mut rec = vec![ts.to_rfc3339_opts(SecondsFormat::Secs, true)];
            rec.extend(self.columns.values().map(|c| format_value(c[i])));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: impl AsRef<Path>) -> Result<(), TableError> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// Reads a table written by [`TimeTable::write_csv`]: a `timestamp`
    /// column followed by numeric columns, empty cells read as NaN.
    pub fn read_csv<R: Read>(reader: R, period_minutes: u32) -> Result<TimeTable, TableError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let ts_idx = headers
            .iter()
            .position(|h| h == "timestamp")
            .ok_or_else(|| TableError::MissingColumn("timestamp".into()))?;
        let names: Vec<(usize, String)> = headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != ts_idx)
            .map(|(i, h)| (i, h.to_string()))
            .collect();
        let mut timestamps = Vec::new();
        let mut cols: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
        for (line, rec) in rdr.records().enumerate() {
            let line = line + 2;
            let rec = rec?;
            let ts = parse_timestamp(rec.get(ts_idx).unwrap_or("")).ok_or_else(|| {
                TableError::MalformedRow {
                    line,
                    reason: "unparseable timestamp".into(),
                }
            })?;
            timestamps.push(ts);
            for (k, (i, name)) in names.iter().enumerate() {
                let v = parse_cell(rec.get(*i).unwrap_or("")).map_err(|_| TableError::MalformedRow {
                    line,
                    reason: format!("bad number in `{name}`"),
                })?;
                cols[k].push(v.unwrap_or(f64::NAN));
            }
        }
        let columns = names.into_iter().map(|(_, n)| n).zip(cols).collect();
        TimeTable::new(timestamps, columns, period_minutes)
    }
}

fn format_value(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        // `{}` on f64 is the shortest representation that round-trips.
        format!("{v}")
    }
}

fn parse_cell(s: &str) -> Result<Option<f64>, std::num::ParseFloatError> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan") {
        Ok(None)
    } else {
        s.parse().map(Some)
    }
}

/// Accepts RFC 3339, naive `YYYY-MM-DD HH:MM[:SS]` (read as UTC), or integer
/// epoch seconds.
pub fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M"] {
        if let Ok(naive) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(Utc.from_utc_datetime(&naive));
        }
    }
    s.parse::<i64>()
        .ok()
        .and_then(|secs| Utc.timestamp_opt(secs, 0).single())
}

/// Longest run of missing temperature values that is filled by linear
/// interpolation.
pub const MAX_INTERPOLATED_GAP: usize = 3;

/// Reads a raw load/temperature file into a gap-free table with columns
/// `load` and `temp`.
///
/// Rows must be sorted. Missing temperatures are linearly interpolated over
/// runs of at most [`MAX_INTERPOLATED_GAP`] rows; a missing load value is a
/// malformed row.
pub fn parse_load_csv(
    path: impl AsRef<Path>,
    schema: &CsvSchema,
    period_minutes: u32,
) -> Result<TimeTable, TableError> {
    let file = std::fs::File::open(path)?;
    parse_load_reader(std::io::BufReader::new(file), schema, period_minutes)
}

pub fn parse_load_reader<R: Read>(
    reader: R,
    schema: &CsvSchema,
    period_minutes: u32,
) -> Result<TimeTable, TableError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| TableError::MissingColumn(name.to_string()))
    };
    let (ts_i, load_i, temp_i) = (
        find(&schema.timestamp)?,
        find(&schema.load)?,
        find(&schema.temperature)?,
    );
    let mut timestamps = Vec::new();
    let mut load = Vec::new();
    let mut temp = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| TableError::MalformedRow {
            line,
            reason: e.to_string(),
        })?;
        let malformed = |reason: &str| TableError::MalformedRow {
            line,
            reason: reason.to_string(),
        };
        let ts = parse_timestamp(rec.get(ts_i).unwrap_or(""))
            .ok_or_else(|| malformed("unparseable timestamp"))?;
        let y = parse_cell(rec.get(load_i).unwrap_or(""))
            .map_err(|_| malformed("bad load value"))?
            .ok_or_else(|| malformed("missing load value"))?;
        let t = parse_cell(rec.get(temp_i).unwrap_or(""))
            .map_err(|_| malformed("bad temperature value"))?
            .unwrap_or(f64::NAN);
        timestamps.push(ts);
        load.push(y);
        temp.push(t);
    }
    if timestamps.is_empty() {
        return Err(TableError::Empty);
    }
    interpolate_gaps(&mut temp, &timestamps, col::TEMP, MAX_INTERPOLATED_GAP)?;
    let mut columns = IndexMap::new();
    columns.insert(col::LOAD.to_string(), load);
    columns.insert(col::TEMP.to_string(), temp);
    TimeTable::new(timestamps, columns, period_minutes)
}

/// Fills NaN runs of length ≤ `max_run` by linear interpolation between the
/// bracketing observations. Leading or trailing runs copy the nearest value.
pub fn interpolate_gaps(
    values: &mut [f64],
    timestamps: &[DateTime<Utc>],
    name: &str,
    max_run: usize,
) -> Result<(), TableError> {
    let n = values.len();
    let mut i = 0;
    while i < n {
        if !values[i].is_nan() {
            i += 1;
            continue;
        }
        let start = i;
        while i < n && values[i].is_nan() {
            i += 1;
        }
        let run = i - start;
        if run > max_run || run == n {
            return Err(TableError::TooManyMissing {
                column: name.to_string(),
                start: timestamps[start],
                run,
                max: max_run,
            });
        }
        match (start.checked_sub(1), (i < n).then_some(i)) {
            (Some(a), Some(b)) => {
                let (va, vb) = (values[a], values[b]);
                for k in start..i {
                    let w = (k - a) as f64 / (b - a) as f64;
                    values[k] = va + w * (vb - va);
                }
            }
            (Some(a), None) => {
                let va = values[a];
                values[start..i].iter_mut().for_each(|v| *v = va);
            }
            (None, Some(b)) => {
                let vb = values[b];
                values[start..i].iter_mut().for_each(|v| *v = vb);
            }
            (None, None) => unreachable!(),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(s: &str) -> DateTime<Utc> {
        parse_timestamp(s).unwrap()
    }

    #[test]
    fn parses_contiguous_rows() {
        let csv = "timestamp,load_mw,temp_c\n\
            2020-01-01T00:00:00Z,100,5\n\
            2020-01-01T00:30:00Z,101,5.5\n\
            2020-01-01T01:00:00Z,102,6\n\
            2020-01-01T01:30:00Z,103,6.5\n";
        let t = parse_load_reader(csv.as_bytes(), &CsvSchema::default(), 30).unwrap();
        assert_eq!(t.len(), 4);
        assert_eq!(t.instant_count(), 48);
        assert_eq!(t.column(col::LOAD).unwrap(), &[100.0, 101.0, 102.0, 103.0]);
    }

    #[test]
    fn reports_gap_at_missing_instant() {
        let csv = "timestamp,load_mw,temp_c\n\
            2020-01-01 00:00,100,5\n\
            2020-01-01 00:30,101,5\n\
            2020-01-01 01:30,103,5\n";
        let err = parse_load_reader(csv.as_bytes(), &CsvSchema::default(), 30).unwrap_err();
        match err {
            TableError::GapInSeries(t) => assert_eq!(t, ts("2020-01-01T01:00:00Z")),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn rejects_duplicates_and_bad_rows() {
        let dup = "timestamp,load_mw,temp_c\n1577836800,1,1\n1577836800,2,1\n";
        assert!(matches!(
            parse_load_reader(dup.as_bytes(), &CsvSchema::default(), 30),
            Err(TableError::DuplicateTimestamp(_))
        ));
        let bad = "timestamp,load_mw,temp_c\n1577836800,1,1\n1577838600,abc,1\n";
        assert!(matches!(
            parse_load_reader(bad.as_bytes(), &CsvSchema::default(), 30),
            Err(TableError::MalformedRow { line: 3, .. })
        ));
    }

    #[test]
    fn remapped_schema_and_interpolation() {
        let csv = "when,mw,t\n\
            2020-01-01T00:00:00Z,1,0\n\
            2020-01-01T01:00:00Z,1,\n\
            2020-01-01T02:00:00Z,1,\n\
            2020-01-01T03:00:00Z,1,3\n";
        let schema = CsvSchema {
            timestamp: "when".into(),
            load: "mw".into(),
            temperature: "t".into(),
        };
        let t = parse_load_reader(csv.as_bytes(), &schema, 60).unwrap();
        assert_eq!(t.column(col::TEMP).unwrap(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(t.instant_count(), 24);
    }

    #[test]
    fn long_temperature_gap_is_an_error() {
        let mut csv = String::from("timestamp,load_mw,temp_c\n");
        for h in 0..8 {
            let temp = if (1..5).contains(&h) { String::new() } else { "1".into() };
            csv.push_str(&format!("2020-01-01T0{h}:00:00Z,1,{temp}\n"));
        }
        assert!(matches!(
            parse_load_reader(csv.as_bytes(), &CsvSchema::default(), 60),
            Err(TableError::TooManyMissing { run: 4, .. })
        ));
    }

    #[test]
    fn leap_year_file_has_calendar_row_count() {
        // Calendar oracle: count half-hours between the two year boundaries.
        let start = ts("2012-01-01T00:00:00Z");
        let end = ts("2013-01-01T00:00:00Z");
        let expected = ((end - start).num_minutes() / 30) as usize;
        assert_eq!(expected, 366 * 48);

        let mut csv = String::from("timestamp,load_mw,temp_c\n");
        let mut t = start;
        while t < end {
            csv.push_str(&format!("{},50000,10\n", t.timestamp()));
            t += chrono::Duration::minutes(30);
        }
        let tbl = parse_load_reader(csv.as_bytes(), &CsvSchema::default(), 30).unwrap();
        assert_eq!(tbl.len(), 17_568);
        assert_eq!(tbl.instant_count(), 48);
    }

    #[test]
    fn csv_round_trip() {
        let csv = "timestamp,load_mw,temp_c\n\
            2020-01-01T00:00:00Z,100.25,5\n\
            2020-01-01T00:30:00Z,101,-0.1\n";
        let t = parse_load_reader(csv.as_bytes(), &CsvSchema::default(), 30).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let back = TimeTable::read_csv(buf.as_slice(), 30).unwrap();
        assert_eq!(back, t);
    }
}
