//! Timestamp parsing. All internal times are `f64` minutes since
//! 1970-01-01T00:00 UTC.

use chrono::{DateTime, NaiveDate, NaiveDateTime, Timelike};

pub const EPOCH: &str = "1970-01-01T00:00:00Z";
pub const MINUTES_PER_DAY: f64 = 1440.0;
/// 365.25 days.
pub const MINUTES_PER_YEAR: f64 = 525_960.0;

const FORMATS: &[&str] = &[
    "%Y-%m-%dT%H:%M:%S%.f",
    "%Y-%m-%dT%H:%M",
    "%Y-%m-%d %H:%M:%S%.f",
    "%Y-%m-%d %H:%M",
];

fn naive_minutes(dt: NaiveDateTime) -> f64 {
    let utc = dt.and_utc();
    utc.timestamp() as f64 / 60.0 + utc.timestamp_subsec_nanos() as f64 / 6.0e10
}

/// Parses a timestamp cell. Plain numbers are taken as minutes since the
/// epoch; otherwise ISO-8601-like date-times and bare dates are accepted.
pub fn parse_minutes(text: &str) -> Option<f64> {
    let s = text.trim();
    if s.is_empty() {
        return None;
    }
    if let Ok(v) = s.parse::<f64>() {
        return v.is_finite().then_some(v);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp() as f64 / 60.0 + dt.timestamp_subsec_nanos() as f64 / 6.0e10);
    }
    for f in FORMATS {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, f) {
            return Some(naive_minutes(dt));
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(naive_minutes)
}

/// Renders minutes since the epoch as `YYYY-MM-DDTHH:MM:SS`.
pub fn format_minutes(minutes: f64) -> String {
    let secs = (minutes * 60.0).round() as i64;
    DateTime::from_timestamp(secs, 0)
        .map(|d| d.naive_utc().format("%Y-%m-%dT%H:%M:%S").to_string())
        .unwrap_or_else(|| format!("{minutes}"))
}

/// Clock hour (0..24) of a timestamp, in UTC.
pub fn clock_hour(minutes: f64) -> u32 {
    let secs = (minutes * 60.0).floor() as i64;
    DateTime::from_timestamp(secs, 0).map(|d| d.hour()).unwrap_or(0)
}

/// Totally ordered integer key for an `f64` timestamp.
pub fn ts_key(t: f64) -> i64 {
    let bits = t.to_bits() as i64;
    bits ^ (((bits >> 63) as u64) >> 1) as i64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hour_apart() {
        let a = parse_minutes("2020-01-01T00:00").unwrap();
        let b = parse_minutes("2020-01-01T01:00").unwrap();
        assert_eq!(b - a, 60.0);
        assert_eq!(parse_minutes("1970-01-01"), Some(0.0));
        assert_eq!(parse_minutes("1970-01-02 00:00:00"), Some(1440.0));
        assert_eq!(parse_minutes("90.5"), Some(90.5));
        assert_eq!(parse_minutes("2020-01-01T00:00:00Z"), Some(a));
        assert_eq!(parse_minutes("garbage"), None);
    }

    #[test]
    fn ts_key_orders_like_floats() {
        let mut v = vec![3.5, -2.0, 0.0, -1e9, 1e9, -0.5];
        let mut by_key = v.clone();
        by_key.sort_by_key(|t| ts_key(*t));
        v.sort_by(f64::total_cmp);
        assert_eq!(v, by_key);
    }

    #[test]
    fn hour_of_day() {
        let t = parse_minutes("2021-06-01T13:00").unwrap();
        assert_eq!(clock_hour(t), 13);
        assert_eq!(format_minutes(t), "2021-06-01T13:00:00");
    }
}
