use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike, Weekday};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Fields that can be engineered from a row's entity and timestamp.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivedFeature {
    Entity,
    Hour,
    Day,
    Weekday,
    Month,
    Year,
}

impl DerivedFeature {
    pub fn column_name(self) -> &'static str {
        match self {
            DerivedFeature::Entity => "entity",
            DerivedFeature::Hour => "hour",
            DerivedFeature::Day => "day",
            DerivedFeature::Weekday => "weekday",
            DerivedFeature::Month => "month",
            DerivedFeature::Year => "year",
        }
    }
}

const FORMATS: &[&str] = &["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M"];

/// Parses an ISO-8601 date or date-time (no zone).
pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .or_else(|| NaiveDate::parse_from_str(s, "%Y-%m-%d").ok().and_then(|d| d.and_hms_opt(0, 0, 0)))
}

fn weekday_name(w: Weekday) -> &'static str {
    match w {
        Weekday::Mon => "Monday",
        Weekday::Tue => "Tuesday",
        Weekday::Wed => "Wednesday",
        Weekday::Thu => "Thursday",
        Weekday::Fri => "Friday",
        Weekday::Sat => "Saturday",
        Weekday::Sun => "Sunday",
    }
}

/// Calendar fields of `ts` in the order requested by `recipe`.
/// `Entity` is not a calendar field and is skipped here.
pub fn expand_timestamp(ts: &NaiveDateTime, recipe: &[DerivedFeature]) -> Vec<String> {
    recipe
        .iter()
        .filter_map(|f| match f {
            DerivedFeature::Entity => None,
            DerivedFeature::Hour => Some(ts.hour().to_string()),
            DerivedFeature::Day => Some(ts.day().to_string()),
            DerivedFeature::Weekday => Some(weekday_name(ts.weekday()).to_string()),
            DerivedFeature::Month => Some(ts.month().to_string()),
            DerivedFeature::Year => Some(ts.year().to_string()),
        })
        .collect()
}

/// Parses then expands, reporting the row on failure.
pub fn expand_timestamp_str(s: &str, recipe: &[DerivedFeature], row: usize) -> Result<Vec<String>> {
    let ts = parse_timestamp(s).ok_or_else(|| Error::data_at(format!("unparseable timestamp {s:?}"), row))?;
    Ok(expand_timestamp(&ts, recipe))
}
