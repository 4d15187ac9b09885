//! Minute-grid market data: CSV ingestion, tick aggregation and daily compounding.
//!
//! A session ("day") starts at `CalendarSpec::day_boundary` (UTC) and spans
//! `minutes_per_day` one-minute slots. Every grid carries exactly that many
//! returns and dollar volumes; minutes without data are filled with a zero
//! return and zero volume.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime, NaiveTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MS_PER_MINUTE: i64 = 60_000;
const MS_PER_DAY: i64 = 86_400_000;

/// Days with more than this fraction of missing minutes are rejected.
pub const MAX_MISSING_FRACTION: f64 = 0.20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssetClass {
    Crypto,
    Equity,
}

impl AssetClass {
    /// Annualization factor used for Sharpe ratios.
    pub fn periods_per_year(self) -> f64 {
        match self {
            AssetClass::Crypto => 365.0,
            AssetClass::Equity => 252.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalendarSpec {
    pub minutes_per_day: usize,
    /// UTC time of day at which a session starts.
    pub day_boundary: NaiveTime,
    pub asset_class: AssetClass,
}

impl CalendarSpec {
    pub fn new(minutes_per_day: usize, day_boundary: NaiveTime, asset_class: AssetClass) -> Result<Self> {
        if minutes_per_day < 2 {
            return Err(Error::Config(format!(
                "minutes_per_day must be >= 2, got {minutes_per_day}"
            )));
        }
        if minutes_per_day > 1440 {
            return Err(Error::Config(format!(
                "minutes_per_day must be <= 1440, got {minutes_per_day}"
            )));
        }
        if day_boundary.second() != 0 || day_boundary.nanosecond() != 0 {
            return Err(Error::Config("day_boundary must fall on a whole minute".into()));
        }
        Ok(Self {
            minutes_per_day,
            day_boundary,
            asset_class,
        })
    }

    /// 24/7 crypto session of 1440 minutes starting at midnight UTC.
    pub fn crypto() -> Self {
        Self::new(1440, NaiveTime::MIN, AssetClass::Crypto).expect("valid preset")
    }

    /// Regular US equity session: 390 minutes from 14:30 UTC.
    pub fn us_equity() -> Self {
        let open = NaiveTime::from_hms_opt(14, 30, 0).expect("valid time");
        Self::new(390, open, AssetClass::Equity).expect("valid preset")
    }

    fn boundary_ms(&self) -> i64 {
        self.day_boundary.num_seconds_from_midnight() as i64 * 1000
    }

    /// Session date and minute slot for a UTC epoch-millisecond timestamp, or
    /// `None` if the timestamp falls outside the session.
    pub fn locate(&self, epoch_ms: i64) -> Option<(NaiveDate, usize)> {
        let shifted = epoch_ms - self.boundary_ms();
        let day = shifted.div_euclid(MS_PER_DAY);
        let minute = (shifted.rem_euclid(MS_PER_DAY) / MS_PER_MINUTE) as usize;
        if minute >= self.minutes_per_day {
            return None;
        }
        let date = DateTime::from_timestamp_millis(day * MS_PER_DAY)?.date_naive();
        Some((date, minute))
    }

    /// UTC epoch milliseconds of minute slot `minute` on session `date`.
    pub fn timestamp_ms(&self, date: NaiveDate, minute: usize) -> i64 {
        let midnight = date.and_time(NaiveTime::MIN).and_utc().timestamp_millis();
        midnight + self.boundary_ms() + minute as i64 * MS_PER_MINUTE
    }
}

/// One asset-day of minute returns and traded dollar amounts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinuteGrid {
    pub symbol: String,
    pub date: NaiveDate,
    pub returns: Vec<f64>,
    pub dollar_volume: Vec<f64>,
    /// Close path with gaps filled (carried forward, or back-filled from the
    /// prior session close before the first print). Kept so grids can be
    /// written back out without loss.
    pub close: Vec<f64>,
}

impl MinuteGrid {
    pub fn len(&self) -> usize {
        self.returns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.returns.is_empty()
    }

    pub fn validate(&self, spec: &CalendarSpec) -> Result<()> {
        let t = spec.minutes_per_day;
        if self.returns.len() != t || self.dollar_volume.len() != t || self.close.len() != t {
            return Err(Error::Dimension(format!(
                "{} {}: grid has {} returns / {} volumes, expected {t}",
                self.symbol,
                self.date,
                self.returns.len(),
                self.dollar_volume.len()
            )));
        }
        if let Some(v) = self.dollar_volume.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidInput(format!(
                "{} {}: invalid dollar volume {v}",
                self.symbol, self.date
            )));
        }
        if self.returns.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "{} {}: non-finite minute return",
                self.symbol, self.date
            )));
        }
        Ok(())
    }
}

/// A session dropped during ingestion because too many minutes were missing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RejectedDay {
    pub symbol: String,
    pub date: NaiveDate,
    pub missing_minutes: usize,
    pub minutes_per_day: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Ingested {
    /// Sorted by (date, symbol).
    pub grids: Vec<MinuteGrid>,
    pub rejected: Vec<RejectedDay>,
    /// Rows whose timestamp fell outside the configured session.
    pub out_of_session_rows: usize,
}

/// Parse an ISO-8601 UTC timestamp or epoch milliseconds.
pub fn parse_timestamp(raw: &str) -> std::result::Result<i64, String> {
    let s = raw.trim();
    if !s.is_empty() && s.bytes().enumerate().all(|(i, b)| b.is_ascii_digit() || (i == 0 && b == b'-')) {
        return s.parse::<i64>().map_err(|e| format!("bad epoch milliseconds `{s}`: {e}"));
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Ok(dt.timestamp_millis());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(dt.and_utc().timestamp_millis());
        }
    }
    Err(format!("unrecognized timestamp `{s}`"))
}

pub fn format_timestamp(epoch_ms: i64) -> String {
    DateTime::from_timestamp_millis(epoch_ms)
        .map(|dt| dt.format("%Y-%m-%dT%H:%M:%SZ").to_string())
        .unwrap_or_else(|| epoch_ms.to_string())
}

fn parse_field<T: std::str::FromStr>(
    record: &csv::StringRecord,
    idx: usize,
    name: &str,
) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    let raw = record.get(idx).ok_or_else(|| format!("missing field `{name}`"))?;
    raw.trim()
        .parse::<T>()
        .map_err(|e| format!("bad `{name}` value `{raw}`: {e}"))
}

fn header_index(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim().eq_ignore_ascii_case(name))
        .ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("missing column `{name}`"),
        })
}

fn open_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

#[derive(Debug, Clone, Copy)]
struct MinutePrint {
    close: f64,
    dollar_volume: f64,
}

type SessionPrints = BTreeMap<usize, MinutePrint>;

/// Read a minute CSV (`timestamp,symbol,close,dollar_volume`) into grids.
pub fn ingest_minute_csv(path: impl AsRef<Path>, spec: &CalendarSpec) -> Result<Ingested> {
    let path = path.as_ref();
    let mut reader = open_reader(path)?;
    let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    let ts_idx = header_index(&headers, "timestamp", path)?;
    let sym_idx = header_index(&headers, "symbol", path)?;
    let close_idx = header_index(&headers, "close", path)?;
    let vol_idx = header_index(&headers, "dollar_volume", path)?;

    let mut by_symbol: BTreeMap<String, BTreeMap<NaiveDate, SessionPrints>> = BTreeMap::new();
    let mut out_of_session = 0;
    for record in reader.records() {
        let record = record.map_err(|e| Error::csv(path, e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let ts_raw = record.get(ts_idx).ok_or_else(|| parse_err("missing timestamp".into()))?;
        let ts = parse_timestamp(ts_raw).map_err(parse_err)?;
        let symbol = record
            .get(sym_idx)
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .ok_or_else(|| parse_err("missing symbol".into()))?;
        let close: f64 = parse_field(&record, close_idx, "close").map_err(parse_err)?;
        let dollar_volume: f64 = parse_field(&record, vol_idx, "dollar_volume").map_err(parse_err)?;
        if !(close.is_finite() && close > 0.0) {
            return Err(parse_err(format!("close must be positive and finite, got {close}")));
        }
        if !(dollar_volume.is_finite() && dollar_volume >= 0.0) {
            return Err(parse_err(format!(
                "dollar_volume must be non-negative and finite, got {dollar_volume}"
            )));
        }
        let Some((date, minute)) = spec.locate(ts) else {
            out_of_session += 1;
            continue;
        };
        let slot = by_symbol
            .entry(symbol)
            .or_default()
            .entry(date)
            .or_default()
            .entry(minute)
            .or_insert(MinutePrint {
                close,
                dollar_volume: 0.0,
            });
        slot.close = close;
        slot.dollar_volume += dollar_volume;
    }

    let mut out = Ingested {
        out_of_session_rows: out_of_session,
        ..Default::default()
    };
    let t = spec.minutes_per_day;
    for (symbol, sessions) in by_symbol {
        let mut prior_close: Option<f64> = None;
        for (date, prints) in sessions {
            let missing = t - prints.len();
            if missing as f64 > MAX_MISSING_FRACTION * t as f64 {
                log::warn!("{symbol} {date}: rejected, {missing} of {t} minutes missing");
                out.rejected.push(RejectedDay {
                    symbol: symbol.clone(),
                    date,
                    missing_minutes: missing,
                    minutes_per_day: t,
                });
                continue;
            }
            let grid = build_grid(&symbol, date, t, &prints, prior_close);
            prior_close = grid.close.last().copied();
            out.grids.push(grid);
        }
    }
    out.grids
        .sort_by(|a, b| a.date.cmp(&b.date).then_with(|| a.symbol.cmp(&b.symbol)));
    Ok(out)
}

fn build_grid(symbol: &str, date: NaiveDate, t: usize, prints: &SessionPrints, prior_close: Option<f64>) -> MinuteGrid {
    let first_print = prints.values().next().map(|p| p.close);
    let mut returns = vec![0.0; t];
    let mut volume = vec![0.0; t];
    let mut close = vec![0.0; t];
    // Reference price for the next return; `None` until a price is known.
    let mut reference = prior_close;
    let fill = prior_close.or(first_print).unwrap_or(f64::NAN);
    let mut carried = fill;
    for minute in 0..t {
        match prints.get(&minute) {
            Some(p) => {
                returns[minute] = match reference {
                    Some(prev) => p.close / prev - 1.0,
                    None => 0.0,
                };
                volume[minute] = p.dollar_volume;
                reference = Some(p.close);
                carried = p.close;
            }
            None => {
                // Missing minute: zero return, zero volume.
            }
        }
        close[minute] = carried;
    }
    MinuteGrid {
        symbol: symbol.to_string(),
        date,
        returns,
        dollar_volume: volume,
        close,
    }
}

/// Write grids back out in the minute CSV format accepted by [`ingest_minute_csv`].
pub fn write_minute_csv(path: impl AsRef<Path>, grids: &[MinuteGrid], spec: &CalendarSpec) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "timestamp,symbol,close,dollar_volume").map_err(io)?;
    let mut ordered: Vec<&MinuteGrid> = grids.iter().collect();
    ordered.sort_by(|a, b| a.date.cmp(&b.date).then_with(|| a.symbol.cmp(&b.symbol)));
    for g in ordered {
        for minute in 0..g.len() {
            writeln!(
                w,
                "{},{},{},{}",
                format_timestamp(spec.timestamp_ms(g.date, minute)),
                g.symbol,
                g.close[minute],
                g.dollar_volume[minute]
            )
            .map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tick {
    pub timestamp_ms: i64,
    pub price: f64,
    pub size: f64,
}

/// Aggregate one session of time-sorted ticks into a minute grid.
///
/// Each minute carries its last traded price and the summed `price * size`.
/// Minutes without ticks get a zero return and zero volume; the first traded
/// minute is measured against `prior_close` when given.
pub fn aggregate_ticks(
    symbol: &str,
    ticks: &[Tick],
    spec: &CalendarSpec,
    prior_close: Option<f64>,
) -> Result<MinuteGrid> {
    let first = ticks
        .first()
        .ok_or_else(|| Error::InvalidInput(format!("{symbol}: no ticks in session")))?;
    let (date, _) = spec.locate(first.timestamp_ms).ok_or_else(|| {
        Error::InvalidInput(format!(
            "{symbol}: tick at {} is outside the session",
            format_timestamp(first.timestamp_ms)
        ))
    })?;
    let mut prints = SessionPrints::new();
    let mut previous = i64::MIN;
    for tick in ticks {
        if tick.timestamp_ms < previous {
            return Err(Error::UnsortedTicks {
                previous,
                current: tick.timestamp_ms,
            });
        }
        previous = tick.timestamp_ms;
        if !(tick.price.is_finite() && tick.price > 0.0 && tick.size.is_finite() && tick.size >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "{symbol}: invalid tick price {} / size {}",
                tick.price, tick.size
            )));
        }
        match spec.locate(tick.timestamp_ms) {
            Some((d, minute)) if d == date => {
                let slot = prints.entry(minute).or_insert(MinutePrint {
                    close: tick.price,
                    dollar_volume: 0.0,
                });
                slot.close = tick.price;
                slot.dollar_volume += tick.price * tick.size;
            }
            _ => {
                return Err(Error::InvalidInput(format!(
                    "{symbol}: tick at {} is outside session {date}",
                    format_timestamp(tick.timestamp_ms)
                )))
            }
        }
    }
    Ok(build_grid(symbol, date, spec.minutes_per_day, &prints, prior_close))
}

/// Read a tick CSV (`timestamp,symbol,price,size`) and aggregate every
/// (symbol, session) into a minute grid. Ticks must be time-sorted per symbol.
pub fn ingest_tick_csv(path: impl AsRef<Path>, spec: &CalendarSpec) -> Result<Ingested> {
    let path = path.as_ref();
    let mut reader = open_reader(path)?;
    let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    let ts_idx = header_index(&headers, "timestamp", path)?;
    let sym_idx = header_index(&headers, "symbol", path)?;
    let price_idx = header_index(&headers, "price", path)?;
    let size_idx = header_index(&headers, "size", path)?;

    let mut by_symbol: BTreeMap<String, BTreeMap<NaiveDate, Vec<Tick>>> = BTreeMap::new();
    let mut last_seen: BTreeMap<String, i64> = BTreeMap::new();
    let mut out_of_session = 0;
    for record in reader.records() {
        let record = record.map_err(|e| Error::csv(path, e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let ts = parse_timestamp(record.get(ts_idx).unwrap_or("")).map_err(parse_err)?;
        let symbol = record
            .get(sym_idx)
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .ok_or_else(|| parse_err("missing symbol".into()))?;
        let price: f64 = parse_field(&record, price_idx, "price").map_err(parse_err)?;
        let size: f64 = parse_field(&record, size_idx, "size").map_err(parse_err)?;
        if let Some(&prev) = last_seen.get(&symbol) {
            if ts < prev {
                return Err(Error::UnsortedTicks { previous: prev, current: ts });
            }
        }
        last_seen.insert(symbol.clone(), ts);
        let Some((date, _)) = spec.locate(ts) else {
            out_of_session += 1;
            continue;
        };
        by_symbol.entry(symbol).or_default().entry(date).or_default().push(Tick {
            timestamp_ms: ts,
            price,
            size,
        });
    }

    let mut out = Ingested {
        out_of_session_rows: out_of_session,
        ..Default::default()
    };
    for (symbol, sessions) in by_symbol {
        let mut prior_close = None;
        for (_, ticks) in sessions {
            let grid = aggregate_ticks(&symbol, &ticks, spec, prior_close)?;
            prior_close = grid.close.last().copied();
            out.grids.push(grid);
        }
    }
    out.grids
        .sort_by(|a, b| a.date.cmp(&b.date).then_with(|| a.symbol.cmp(&b.symbol)));
    Ok(out)
}

/// Daily return from minute returns: `prod(1 + r) - 1`.
pub fn daily_compound_return(returns: &[f64]) -> Result<f64> {
    let mut growth = 1.0;
    for (i, &r) in returns.iter().enumerate() {
        if !(r > -1.0) || !r.is_finite() {
            return Err(Error::Domain(format!(
                "minute return {r} at index {i} is not in (-1, inf)"
            )));
        }
        growth *= 1.0 + r;
    }
    Ok(growth - 1.0)
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;
    use std::fmt::Write as _;

    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn small_spec(t: usize) -> CalendarSpec {
        CalendarSpec::new(t, NaiveTime::MIN, AssetClass::Crypto).unwrap()
    }

    fn ts(date: &str, minute: usize) -> String {
        let d = NaiveDate::parse_from_str(date, "%Y-%m-%d").unwrap();
        format_timestamp(small_spec(4).timestamp_ms(d, minute))
    }

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn two_assets_three_days_gives_six_grids() {
        let mut csv = String::from("timestamp,symbol,close,dollar_volume\n");
        for day in ["2024-01-01", "2024-01-02", "2024-01-03"] {
            for m in 0..4 {
                for sym in ["AAA", "BBB"] {
                    writeln!(csv, "{},{sym},{},{}", ts(day, m), 100.0 + m as f64, 10.0).unwrap();
                }
            }
        }
        let f = write_tmp(&csv);
        let out = ingest_minute_csv(f.path(), &small_spec(4)).unwrap();
        assert_eq!(out.grids.len(), 6);
        assert!(out.grids.iter().all(|g| g.returns.len() == 4 && g.dollar_volume.len() == 4));
        assert!(out.rejected.is_empty());
    }

    #[test]
    fn constant_close_gives_zero_returns() {
        let mut csv = String::from("timestamp,symbol,close,dollar_volume\n");
        for day in ["2024-01-01", "2024-01-02"] {
            for m in 0..4 {
                writeln!(csv, "{},X,42.5,1", ts(day, m)).unwrap();
            }
        }
        let f = write_tmp(&csv);
        let out = ingest_minute_csv(f.path(), &small_spec(4)).unwrap();
        for g in &out.grids {
            assert!(g.returns.iter().all(|&r| r == 0.0));
        }
    }

    #[test]
    fn returns_match_row_by_row_recomputation() {
        let closes = [100.0, 101.0, 101.0, 99.98, 100.5, 102.25, 101.75, 101.0];
        let mut csv = String::from("timestamp,symbol,close,dollar_volume\n");
        for (i, c) in closes.iter().enumerate() {
            let day = if i < 4 { "2024-03-01" } else { "2024-03-02" };
            writeln!(csv, "{},X,{c},5", ts(day, i % 4)).unwrap();
        }
        let f = write_tmp(&csv);
        let out = ingest_minute_csv(f.path(), &small_spec(4)).unwrap();
        // Spreadsheet-style: first row has no predecessor, every other row is
        // close / previous close - 1, the second session linking to the first.
        let mut expected = vec![0.0];
        for w in closes.windows(2) {
            expected.push(w[1] / w[0] - 1.0);
        }
        let got: Vec<f64> = out.grids.iter().flat_map(|g| g.returns.clone()).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn epoch_millisecond_timestamps_are_detected() {
        let spec = small_spec(4);
        let d = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap();
        let mut csv = String::from("timestamp,symbol,close,dollar_volume\n");
        for m in 0..4 {
            writeln!(csv, "{},X,{},1", spec.timestamp_ms(d, m), 10.0 + m as f64).unwrap();
        }
        let f = write_tmp(&csv);
        let out = ingest_minute_csv(f.path(), &spec).unwrap();
        assert_eq!(out.grids.len(), 1);
        assert_eq!(out.grids[0].date, d);
        assert!((out.grids[0].returns[1] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn malformed_row_reports_line_number() {
        let csv = format!(
            "timestamp,symbol,close,dollar_volume\n{},X,1,1\n{},X,abc,1\n",
            ts("2024-01-01", 0),
            ts("2024-01-01", 1)
        );
        let f = write_tmp(&csv);
        match ingest_minute_csv(f.path(), &small_spec(4)) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn sparse_day_is_rejected_with_record() {
        let spec = small_spec(10);
        let d = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap();
        let mut csv = String::from("timestamp,symbol,close,dollar_volume\n");
        // 7 of 10 minutes present: 30% missing.
        for m in 0..7 {
            writeln!(csv, "{},X,10,1", format_timestamp(spec.timestamp_ms(d, m))).unwrap();
        }
        // Next day: 8 of 10 present, exactly 20% missing, accepted.
        let d2 = d.succ_opt().unwrap();
        for m in [0, 1, 2, 4, 5, 6, 8, 9] {
            writeln!(csv, "{},X,{},1", format_timestamp(spec.timestamp_ms(d2, m)), 10 + m).unwrap();
        }
        let f = write_tmp(&csv);
        let out = ingest_minute_csv(f.path(), &spec).unwrap();
        assert_eq!(out.rejected.len(), 1);
        assert_eq!(out.rejected[0].missing_minutes, 3);
        assert_eq!(out.grids.len(), 1);
        let g = &out.grids[0];
        assert_eq!(g.returns[3], 0.0);
        assert_eq!(g.dollar_volume[3], 0.0);
        assert!((g.returns[4] - (14.0 / 12.0 - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn reingest_after_reserialize_is_bit_identical() {
        let spec = small_spec(10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut csv = String::from("timestamp,symbol,close,dollar_volume\n");
        let start = NaiveDate::from_ymd_opt(2024, 5, 1).unwrap();
        for day in 0..4 {
            let d = start + chrono::Days::new(day);
            for sym in ["A", "B"] {
                let mut px = 50.0;
                for m in 0..10 {
                    px *= 1.0 + rng.random_range(-0.01..0.01);
                    // Drop minute 0 and a middle minute now and then.
                    if (m == 0 && day % 2 == 1) || (m == 5 && sym == "B") {
                        continue;
                    }
                    let ts = format_timestamp(spec.timestamp_ms(d, m));
                    writeln!(csv, "{ts},{sym},{px},{}", rng.random_range(0.0..100.0)).unwrap();
                }
            }
        }
        let f = write_tmp(&csv);
        let first = ingest_minute_csv(f.path(), &spec).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        write_minute_csv(out.path(), &first.grids, &spec).unwrap();
        let second = ingest_minute_csv(out.path(), &spec).unwrap();
        assert_eq!(first.grids, second.grids);
    }

    #[test]
    fn one_tick_per_minute() {
        let spec = small_spec(4);
        let d = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap();
        let ticks: Vec<Tick> = (0..4)
            .map(|m| Tick {
                timestamp_ms: spec.timestamp_ms(d, m) + 1000,
                price: 10.0 + m as f64,
                size: 2.0,
            })
            .collect();
        let g = aggregate_ticks("X", &ticks, &spec, None).unwrap();
        for m in 0..4 {
            assert_eq!(g.dollar_volume[m], (10.0 + m as f64) * 2.0);
        }
    }

    #[test]
    fn empty_minute_between_ticks_is_filled() {
        let spec = small_spec(4);
        let d = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap();
        let ticks = vec![
            Tick { timestamp_ms: spec.timestamp_ms(d, 0), price: 10.0, size: 1.0 },
            Tick { timestamp_ms: spec.timestamp_ms(d, 2), price: 11.0, size: 1.0 },
        ];
        let g = aggregate_ticks("X", &ticks, &spec, None).unwrap();
        assert_eq!(g.returns[1], 0.0);
        assert_eq!(g.dollar_volume[1], 0.0);
        assert!((g.returns[2] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn unsorted_ticks_are_rejected() {
        let spec = small_spec(4);
        let d = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap();
        let ticks = vec![
            Tick { timestamp_ms: spec.timestamp_ms(d, 2), price: 10.0, size: 1.0 },
            Tick { timestamp_ms: spec.timestamp_ms(d, 1), price: 11.0, size: 1.0 },
        ];
        assert!(matches!(
            aggregate_ticks("X", &ticks, &spec, None),
            Err(Error::UnsortedTicks { .. })
        ));
    }

    #[test]
    fn random_ticks_match_group_by_minute_oracle() {
        let spec = small_spec(60);
        let d = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap();
        let base = spec.timestamp_ms(d, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut stamps: Vec<i64> = (0..1000).map(|_| base + rng.random_range(0..60 * 60_000)).collect();
        stamps.sort();
        let ticks: Vec<Tick> = stamps
            .iter()
            .map(|&t| Tick {
                timestamp_ms: t,
                price: rng.random_range(90.0..110.0),
                size: rng.random_range(0.1..5.0),
            })
            .collect();
        let g = aggregate_ticks("X", &ticks, &spec, Some(100.0)).unwrap();

        let mut volume: HashMap<i64, f64> = HashMap::new();
        let mut last: HashMap<i64, f64> = HashMap::new();
        for t in &ticks {
            let bucket = (t.timestamp_ms - base) / 60_000;
            *volume.entry(bucket).or_default() += t.price * t.size;
            last.insert(bucket, t.price);
        }
        let mut prev = 100.0;
        for m in 0..60 {
            let key = m as i64;
            assert_eq!(g.dollar_volume[m], volume.get(&key).copied().unwrap_or(0.0));
            match last.get(&key) {
                Some(&p) => {
                    assert_eq!(g.returns[m], p / prev - 1.0);
                    prev = p;
                }
                None => assert_eq!(g.returns[m], 0.0),
            }
        }
        let total: f64 = ticks.iter().map(|t| t.price * t.size).sum();
        assert!((g.dollar_volume.iter().sum::<f64>() - total).abs() < 1e-9 * total);
    }

    #[test]
    fn compound_return_cases() {
        assert_eq!(daily_compound_return(&[0.0; 390]).unwrap(), 0.0);
        let c = 0.001;
        let got = daily_compound_return(&[c; 390]).unwrap();
        assert!((got - ((1.0 + c).powi(390) - 1.0)).abs() < 1e-12);
        assert!(matches!(daily_compound_return(&[0.1, -1.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn compound_return_matches_product_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r: Vec<f64> = (0..390).map(|_| rng.random_range(-0.01..0.01)).collect();
        let oracle = r.iter().map(|x| 1.0 + x).product::<f64>() - 1.0;
        assert!((daily_compound_return(&r).unwrap() - oracle).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn compounding_composes_over_segments(
            a in prop::collection::vec(-0.05f64..0.05, 1..50),
            b in prop::collection::vec(-0.05f64..0.05, 1..50),
        ) {
            let ra = daily_compound_return(&a).unwrap();
            let rb = daily_compound_return(&b).unwrap();
            let joined: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
            let rj = daily_compound_return(&joined).unwrap();
            prop_assert!(((1.0 + ra) * (1.0 + rb) - 1.0 - rj).abs() < 1e-12);
        }
    }
}
