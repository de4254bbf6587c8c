//! Click-log readers: YOOCHOOSE-style CSV, DIGINETICA-style CSV with header,
//! and the `simple-sessions` plain-text fixture format (one session per line,
//! whitespace-separated item keys, synthetic ascending timestamps).

use super::ClickEvent;
use crate::error::{Error, Result};
use std::fs;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    /// `sessionId,ISO-8601 timestamp,itemId[,category]`
    YoochooseCsv,
    /// `sessionId;userId;itemId;timeframe;eventdate` with a header row
    DigineticaCsv,
    /// `sessionKey item item item ...`
    SimpleSessions,
}

impl FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "yoochoose-csv" => Ok(DataFormat::YoochooseCsv),
            "diginetica-csv" => Ok(DataFormat::DigineticaCsv),
            "simple-sessions" => Ok(DataFormat::SimpleSessions),
            other => Err(Error::Config(format!(
                "unknown dataset format `{other}` (expected yoochoose-csv, diginetica-csv or simple-sessions)"
            ))),
        }
    }
}

impl std::fmt::Display for DataFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DataFormat::YoochooseCsv => "yoochoose-csv",
            DataFormat::DigineticaCsv => "diginetica-csv",
            DataFormat::SimpleSessions => "simple-sessions",
        })
    }
}

/// Events plus parse accounting. More than 1% malformed lines is an error;
/// fewer are skipped and reported here.
#[derive(Debug)]
pub struct LoadOutcome {
    pub events: Vec<ClickEvent>,
    pub total_lines: usize,
    pub malformed: usize,
    pub samples: Vec<String>,
}

pub fn load_clicks(path: &Path, format: DataFormat) -> Result<LoadOutcome> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut events = Vec::new();
    let mut total = 0usize;
    let mut malformed = 0usize;
    let mut samples = Vec::new();

    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        total += 1;
        let parsed = match format {
            DataFormat::YoochooseCsv => parse_yoochoose(line),
            DataFormat::DigineticaCsv => parse_diginetica(line),
            DataFormat::SimpleSessions => {
                parse_simple(line, total - 1, &mut events);
                continue;
            }
        };
        match parsed {
            Some(ev) => events.push(ev),
            None if lineno == 0 => {
                // lenient on a single header row
                total -= 1;
            }
            None => {
                malformed += 1;
                if samples.len() < 5 {
                    samples.push(line.to_string());
                }
            }
        }
    }

    if malformed * 100 > total {
        return Err(Error::Format {
            path: path.display().to_string(),
            malformed,
            total,
            samples,
        });
    }
    Ok(LoadOutcome {
        events,
        total_lines: total,
        malformed,
        samples,
    })
}

fn parse_yoochoose(line: &str) -> Option<ClickEvent> {
    let mut fields = line.split(',');
    let session = fields.next()?.trim();
    let ts = parse_iso8601(fields.next()?.trim())?;
    let item = fields.next()?.trim();
    if session.is_empty() || item.is_empty() || ts < 0.0 {
        return None;
    }
    Some(ClickEvent {
        session_key: session.to_string(),
        timestamp: ts,
        item_key: item.to_string(),
    })
}

fn parse_diginetica(line: &str) -> Option<ClickEvent> {
    let fields: Vec<&str> = line.split(';').collect();
    if fields.len() < 5 {
        return None;
    }
    let session = fields[0].trim();
    let item = fields[2].trim();
    let timeframe_ms: f64 = fields[3].trim().parse().ok()?;
    let day = parse_date(fields[4].trim())?;
    let ts = day as f64 * 86_400.0 + timeframe_ms / 1000.0;
    if session.is_empty() || item.is_empty() || ts < 0.0 {
        return None;
    }
    Some(ClickEvent {
        session_key: session.to_string(),
        timestamp: ts,
        item_key: item.to_string(),
    })
}

/// One session per line. Sessions are spaced one hour apart and items one
/// second apart, so `--test-days` still carves a meaningful time split.
fn parse_simple(line: &str, line_index: usize, events: &mut Vec<ClickEvent>) {
    let mut tokens = line.split_whitespace();
    let Some(session) = tokens.next() else { return };
    let base = line_index as f64 * 3_600.0;
    for (pos, item) in tokens.enumerate() {
        events.push(ClickEvent {
            session_key: session.to_string(),
            timestamp: base + pos as f64,
            item_key: item.to_string(),
        });
    }
}

/// `YYYY-MM-DDTHH:MM:SS[.fff]Z` to fractional epoch seconds.
fn parse_iso8601(s: &str) -> Option<f64> {
    let s = s.strip_suffix('Z').unwrap_or(s);
    let (date, time) = s.split_once('T')?;
    let day = parse_date(date)?;
    let mut parts = time.split(':');
    let hh: f64 = parts.next()?.parse().ok()?;
    let mm: f64 = parts.next()?.parse().ok()?;
    let ss: f64 = parts.next()?.parse().ok()?;
    if parts.next().is_some() || hh >= 24.0 || mm >= 60.0 || ss >= 61.0 {
        return None;
    }
    Some(day as f64 * 86_400.0 + hh * 3_600.0 + mm * 60.0 + ss)
}

/// `YYYY-MM-DD` to days since the Unix epoch (civil-days algorithm).
fn parse_date(s: &str) -> Option<i64> {
    let mut parts = s.split('-');
    let y: i64 = parts.next()?.parse().ok()?;
    let m: i64 = parts.next()?.parse().ok()?;
    let d: i64 = parts.next()?.parse().ok()?;
    if parts.next().is_some() || !(1..=12).contains(&m) || !(1..=31).contains(&d) {
        return None;
    }
    let y = if m <= 2 { y - 1 } else { y };
    let era = if y >= 0 { y } else { y - 399 } / 400;
    let yoe = y - era * 400;
    let mp = if m > 2 { m - 3 } else { m + 9 };
    let doy = (153 * mp + 2) / 5 + d - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    Some(era * 146_097 + doe - 719_468)
}
