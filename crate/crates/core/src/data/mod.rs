//! Demand tensors and everything that produces or reshapes them: trip-record
//! ingestion, O-D pair graphs, chronological splits, supervised windows, and
//! a synthetic generator whose ground-truth parameter fields are returned
//! alongside the data.

mod graph;
mod ingest;
mod io;
mod synth;
mod windows;

use std::error::Error;
use std::fmt;

use chrono::{DateTime, Duration, Utc};

pub use graph::{build_adjacency, AdjacencyMode, ODGraph};
pub use ingest::ingest_trips;
pub use io::{load_tensor, load_truth, save_tensor, save_truth};
pub use synth::{synth_generate, GroundTruth, SyntheticSpec};
pub use windows::{make_windows, sample_od_grid, split_chronological, Window};

#[derive(Debug)]
pub enum DataError {
    /// A record names a zone absent from the declared zone list.
    UnknownZone { line: u64, zone: String },
    /// A CSV row that cannot be parsed into a trip record.
    MalformedRow { line: u64, reason: String },
    /// A well-formed record whose timestamp falls outside the study period.
    OutOfPeriod { line: u64, timestamp: String },
    /// Fewer zones available than a grid sample requests.
    InsufficientZones {
        role: &'static str,
        requested: usize,
        available: usize,
    },
    /// A cross-product pair missing from the source tensor's index.
    MissingPair { origin: String, dest: String },
    /// The adjacency rule produced no edges at all.
    EmptyGraph,
    /// Too few time windows for the requested split or windowing.
    TooShort { needed: usize, actual: usize },
    /// Inconsistent dimensions, manifests, or field values.
    BadShape { context: String },
    Io(std::io::Error),
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::UnknownZone { line, zone } => {
                write!(f, "line {line}: zone {zone:?} is not in the declared zone list")
            }
            Self::MalformedRow { line, reason } => write!(f, "line {line}: {reason}"),
            Self::OutOfPeriod { line, timestamp } => {
                write!(f, "line {line}: timestamp {timestamp} outside the study period")
            }
            Self::InsufficientZones { role, requested, available } => write!(
                f,
                "requested {requested} {role} zones but only {available} are available"
            ),
            Self::MissingPair { origin, dest } => {
                write!(f, "pair ({origin}, {dest}) not present in the source tensor")
            }
            Self::EmptyGraph => write!(f, "adjacency rule produced a graph with no edges"),
            Self::TooShort { needed, actual } => {
                write!(f, "needs at least {needed} time windows, tensor has {actual}")
            }
            Self::BadShape { context } => write!(f, "{context}"),
            Self::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl Error for DataError {
    fn source(&self) -> Option<&(dyn Error + 'static)> {
        match self {
            Self::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

/// Per-pair trip counts on a regular time grid.
///
/// Counts are exact tallies laid out row-major: row = O-D pair, column =
/// time window. Window `t` covers the half-open interval
/// `[start_time + t·res, start_time + (t+1)·res)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandTensor {
    counts: Vec<i64>,
    num_pairs: usize,
    num_windows: usize,
    resolution_minutes: u32,
    start_time: DateTime<Utc>,
    pair_index: Vec<(String, String)>,
}

pub(crate) const VALID_RESOLUTIONS: [u32; 3] = [5, 15, 60];

impl DemandTensor {
    pub fn new(
        pair_index: Vec<(String, String)>,
        counts: Vec<i64>,
        num_windows: usize,
        resolution_minutes: u32,
        start_time: DateTime<Utc>,
    ) -> Result<Self, DataError> {
        let num_pairs = pair_index.len();
        if num_pairs == 0 || num_windows == 0 {
            return Err(DataError::BadShape {
                context: format!("empty tensor: {num_pairs} pairs x {num_windows} windows"),
            });
        }
        if counts.len() != num_pairs * num_windows {
            return Err(DataError::BadShape {
                context: format!(
                    "{} counts cannot fill {num_pairs} pairs x {num_windows} windows",
                    counts.len()
                ),
            });
        }
        if !VALID_RESOLUTIONS.contains(&resolution_minutes) {
            return Err(DataError::BadShape {
                context: format!(
                    "resolution {resolution_minutes} min not one of {VALID_RESOLUTIONS:?}"
                ),
            });
        }
        if counts.iter().any(|&c| c < 0) {
            return Err(DataError::BadShape {
                context: "negative count".into(),
            });
        }
        Ok(Self {
            counts,
            num_pairs,
            num_windows,
            resolution_minutes,
            start_time,
            pair_index,
        })
    }

    pub fn num_pairs(&self) -> usize {
        self.num_pairs
    }

    pub fn num_windows(&self) -> usize {
        self.num_windows
    }

    pub fn resolution_minutes(&self) -> u32 {
        self.resolution_minutes
    }

    pub fn start_time(&self) -> DateTime<Utc> {
        self.start_time
    }

    pub fn pair_index(&self) -> &[(String, String)] {
        &self.pair_index
    }

    pub fn count(&self, pair: usize, window: usize) -> i64 {
        self.counts[pair * self.num_windows + window]
    }

    /// Full demand series of one pair (contiguous by construction).
    pub fn series(&self, pair: usize) -> &[i64] {
        let base = pair * self.num_windows;
        &self.counts[base..base + self.num_windows]
    }

    pub fn counts(&self) -> &[i64] {
        &self.counts
    }

    pub fn total_trips(&self) -> i64 {
        self.counts.iter().sum()
    }

    /// UTC instant at which window `t` opens.
    pub fn window_start(&self, t: usize) -> DateTime<Utc> {
        self.start_time + Duration::minutes(self.resolution_minutes as i64 * t as i64)
    }

    /// Distinct origin zones in order of first appearance in the pair index.
    pub fn origins(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for (o, _) in &self.pair_index {
            if !seen.contains(&o.as_str()) {
                seen.push(o.as_str());
            }
        }
        seen
    }

    /// Distinct destination zones in order of first appearance.
    pub fn dests(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for (_, d) in &self.pair_index {
            if !seen.contains(&d.as_str()) {
                seen.push(d.as_str());
            }
        }
        seen
    }

    /// Contiguous time slice `[from, from + len)` as a new tensor whose
    /// start time advances accordingly.
    pub fn slice_time(&self, from: usize, len: usize) -> Result<Self, DataError> {
        if len == 0 || from + len > self.num_windows {
            return Err(DataError::BadShape {
                context: format!(
                    "slice [{from}, {from}+{len}) outside {} windows",
                    self.num_windows
                ),
            });
        }
        let mut counts = Vec::with_capacity(self.num_pairs * len);
        for pair in 0..self.num_pairs {
            let base = pair * self.num_windows + from;
            counts.extend_from_slice(&self.counts[base..base + len]);
        }
        Ok(Self {
            counts,
            num_pairs: self.num_pairs,
            num_windows: len,
            resolution_minutes: self.resolution_minutes,
            start_time: self.window_start(from),
            pair_index: self.pair_index.clone(),
        })
    }
}
