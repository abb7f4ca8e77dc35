use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use super::{DatasetError, Rating, RawRatings};

/// On-disk rating log layouts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RatingFormat {
    /// `user item rating timestamp`, whitespace separated (ml-100k `u.data`).
    /// A missing fourth column falls back to the line number, which covers
    /// logs like FilmTrust's `ratings.txt` that carry no timestamps.
    MovielensTab,
    /// `user::item::rating::timestamp` (ml-1m `ratings.dat`).
    MovielensDoubleColon,
    /// Comma separated with header `user,item,rating,timestamp`.
    Csv,
}

impl FromStr for RatingFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "movielens-tab" | "tab" => Ok(Self::MovielensTab),
            "movielens-double-colon" | "double-colon" => Ok(Self::MovielensDoubleColon),
            "csv" => Ok(Self::Csv),
            other => Err(format!(
                "unknown format {other:?} (expected movielens-tab, movielens-double-colon or csv)"
            )),
        }
    }
}

impl fmt::Display for RatingFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::MovielensTab => "movielens-tab",
            Self::MovielensDoubleColon => "movielens-double-colon",
            Self::Csv => "csv",
        })
    }
}

pub fn load_ratings(path: &Path, format: RatingFormat) -> Result<RawRatings, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_ratings(&text, format)
}

pub fn parse_ratings(text: &str, format: RatingFormat) -> Result<RawRatings, DatasetError> {
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = match format {
            RatingFormat::MovielensTab => line.split_whitespace().collect(),
            RatingFormat::MovielensDoubleColon => line.split("::").map(str::trim).collect(),
            RatingFormat::Csv => {
                if records.is_empty() && idx == 0 && line.to_ascii_lowercase().starts_with("user") {
                    continue;
                }
                line.split(',').map(str::trim).collect()
            }
        };
        let timestamp_optional = format == RatingFormat::MovielensTab;
        if fields.len() != 4 && !(timestamp_optional && fields.len() == 3) {
            return Err(DatasetError::Parse {
                line: lineno,
                msg: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let rating: f64 = fields[2].parse().map_err(|_| DatasetError::Parse {
            line: lineno,
            msg: format!("bad rating {:?}", fields[2]),
        })?;
        let timestamp: i64 = match fields.get(3) {
            Some(ts) => parse_timestamp(ts).ok_or_else(|| DatasetError::Parse {
                line: lineno,
                msg: format!("bad timestamp {ts:?}"),
            })?,
            None => idx as i64,
        };
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(DatasetError::Parse {
                line: lineno,
                msg: "empty user or item token".into(),
            });
        }
        records.push(Rating {
            user: fields[0].to_string(),
            item: fields[1].to_string(),
            rating,
            timestamp,
        });
    }
    if records.is_empty() {
        return Err(DatasetError::Empty);
    }
    RawRatings::from_records(records)
}

fn parse_timestamp(s: &str) -> Option<i64> {
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    // Some exports write timestamps as floats ("881250949.0").
    let v: f64 = s.parse().ok()?;
    (v.fract() == 0.0 && v.is_finite()).then_some(v as i64)
}

/// Repeatedly drops users with fewer than `min_user_ratings` records and
/// items with fewer than `min_item_raters` records until both hold.
pub fn k_core_filter(raw: &RawRatings, min_user_ratings: usize, min_item_raters: usize) -> RawRatings {
    let mut current = raw.clone();
    loop {
        let mut per_user: HashMap<&str, usize> = HashMap::new();
        for r in current.records() {
            *per_user.entry(r.user.as_str()).or_default() += 1;
        }
        let users_ok = current.retain(|r| per_user[r.user.as_str()] >= min_user_ratings);

        let mut per_item: HashMap<&str, usize> = HashMap::new();
        for r in users_ok.records() {
            *per_item.entry(r.item.as_str()).or_default() += 1;
        }
        let next = users_ok.retain(|r| per_item[r.item.as_str()] >= min_item_raters);
        if next.len() == current.len() {
            return next;
        }
        current = next;
    }
}
