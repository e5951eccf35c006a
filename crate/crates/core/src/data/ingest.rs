//! Trip-record CSV → demand tensor.

use std::collections::HashMap;
use std::path::Path;

use chrono::{DateTime, Utc};

use super::{DataError, DemandTensor};

/// Tally trip records into per-pair, per-window counts.
///
/// The CSV must carry a header row naming `origin_zone`, `dest_zone` and
/// `timestamp` (any column order); timestamps are RFC 3339 or integer epoch
/// seconds, interpreted as UTC. The tensor indexes the full ordered
/// cross-product of `zones` with itself (self-pairs included), so |V| = z².
/// Windows are half-open `[w, w + resolution)` aligned to the period start — a
/// record exactly on a boundary lands in the later window — and every record
/// must fall inside `[period.0, period.1)`.
pub fn ingest_trips(
    records_path: &Path,
    zones: &[String],
    resolution_minutes: u32,
    period: (DateTime<Utc>, DateTime<Utc>),
) -> Result<DemandTensor, DataError> {
    let (start, end) = period;
    if zones.is_empty() {
        return Err(DataError::BadShape {
            context: "empty zone list".into(),
        });
    }
    if end <= start {
        return Err(DataError::BadShape {
            context: format!("study period ends ({end}) before it starts ({start})"),
        });
    }
    let mut zone_pos: HashMap<&str, usize> = HashMap::new();
    for (i, z) in zones.iter().enumerate() {
        if zone_pos.insert(z.as_str(), i).is_some() {
            return Err(DataError::BadShape {
                context: format!("zone {z:?} declared twice"),
            });
        }
    }

    let res_secs = i64::from(resolution_minutes) * 60;
    let span_secs = (end - start).num_seconds();
    let num_windows = usize::try_from((span_secs + res_secs - 1) / res_secs).unwrap();
    let z = zones.len();
    let pair_index: Vec<(String, String)> = zones
        .iter()
        .flat_map(|o| zones.iter().map(move |d| (o.clone(), d.clone())))
        .collect();
    let mut counts = vec![0i64; z * z * num_windows];

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(records_path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => DataError::BadShape {
                context: format!("cannot open {}: {e}", records_path.display()),
            },
            _ => DataError::MalformedRow {
                line: 1,
                reason: e.to_string(),
            },
        })?;

    let headers = reader
        .headers()
        .map_err(|e| DataError::MalformedRow { line: 1, reason: e.to_string() })?
        .clone();
    let col = |name: &str| -> Result<usize, DataError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MalformedRow {
                line: 1,
                reason: format!("missing column {name:?} in header"),
            })
    };
    let origin_col = col("origin_zone")?;
    let dest_col = col("dest_zone")?;
    let ts_col = col("timestamp")?;

    for result in reader.records() {
        let record = result.map_err(|e| DataError::MalformedRow {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |idx: usize| -> Result<&str, DataError> {
            record.get(idx).ok_or_else(|| DataError::MalformedRow {
                line,
                reason: format!("row has only {} fields", record.len()),
            })
        };
        let origin = field(origin_col)?;
        let dest = field(dest_col)?;
        let raw_ts = field(ts_col)?;

        let oi = *zone_pos
            .get(origin)
            .ok_or_else(|| DataError::UnknownZone { line, zone: origin.into() })?;
        let di = *zone_pos
            .get(dest)
            .ok_or_else(|| DataError::UnknownZone { line, zone: dest.into() })?;

        let ts = parse_timestamp(raw_ts).ok_or_else(|| DataError::MalformedRow {
            line,
            reason: format!("unparseable timestamp {raw_ts:?}"),
        })?;
        if ts < start || ts >= end {
            return Err(DataError::OutOfPeriod {
                line,
                timestamp: raw_ts.into(),
            });
        }
        let window = usize::try_from((ts - start).num_seconds() / res_secs).unwrap();
        counts[(oi * z + di) * num_windows + window] += 1;
    }

    DemandTensor::new(pair_index, counts, num_windows, resolution_minutes, start)
}

fn parse_timestamp(raw: &str) -> Option<DateTime<Utc>> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
        return Some(dt.with_timezone(&Utc));
    }
    let epoch: i64 = raw.parse().ok()?;
    DateTime::from_timestamp(epoch, 0)
}
