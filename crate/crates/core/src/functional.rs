//! Functional time-dependent features: covariates that are a pure function
//! of an event's timestamp and the subject's static record.

use thiserror::Error;

use crate::time::{clock_hour, MINUTES_PER_YEAR};

/// Clock-hour buckets for `time_of_day`; bucket `b` covers hours
/// `[6b, 6b + 6)`.
pub const TIME_OF_DAY_BUCKETS: [&str; 4] = ["[0,6)", "[6,12)", "[12,18)", "[18,24)"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FunctionalError {
    #[error("feature `{feature}` needs static field `{field}`, which subject {subject_id} lacks")]
    MissingStatic {
        feature: String,
        field: String,
        subject_id: u64,
    },
    #[error("`{0}` is not a registered feature function")]
    Unknown(String),
}

/// Age in years, unnormalized.
pub fn age_years(time: f64, dob: f64) -> f64 {
    (time - dob) / MINUTES_PER_YEAR
}

/// Bucket position (0..4) of the clock hour of `time`.
pub fn time_of_day_bucket(time: f64) -> usize {
    (clock_hour(time) / 6) as usize
}

/// Raw value of one functional feature: a bucket for categorical features,
/// a real value for regression features.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RawFunctional {
    Bucket(usize),
    Value(f64),
}

pub fn evaluate(name: &str, time: f64, dob: Option<f64>, subject_id: u64) -> Result<RawFunctional, FunctionalError> {
    match name {
        "age" => dob
            .map(|d| RawFunctional::Value(age_years(time, d)))
            .ok_or_else(|| FunctionalError::MissingStatic {
                feature: "age".into(),
                field: "dob".into(),
                subject_id,
            }),
        "time_of_day" => Ok(RawFunctional::Bucket(time_of_day_bucket(time))),
        other => Err(FunctionalError::Unknown(other.into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::parse_minutes;

    #[test]
    fn age_at_birth_is_zero_and_grows_by_years() {
        let dob = parse_minutes("1990-05-01T08:00").unwrap();
        assert_eq!(age_years(dob, dob), 0.0);
        assert_eq!(age_years(dob + MINUTES_PER_YEAR, dob), 1.0);
    }

    #[test]
    fn buckets() {
        let t = parse_minutes("2022-03-04T13:00").unwrap();
        assert_eq!(TIME_OF_DAY_BUCKETS[time_of_day_bucket(t)], "[12,18)");
        assert_eq!(time_of_day_bucket(parse_minutes("2022-03-04T00:00").unwrap()), 0);
        assert_eq!(time_of_day_bucket(parse_minutes("2022-03-04T23:59").unwrap()), 3);
        assert!(matches!(
            evaluate("age", t, None, 3),
            Err(FunctionalError::MissingStatic { .. })
        ));
    }
}
