//! Run configuration: one JSON file drives every subcommand.
//!
//! All randomness flows from the single root `seed`; each stochastic
//! component (node-mean draws, demand draws, grid sampling, training) derives
//! its own stream from it, so a config plus a seed pins every artifact byte.
//! The `seed` field inside `trainer` is therefore ignored here and overwritten
//! with a derived value — set the root seed instead.

use std::fmt;
use std::path::PathBuf;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use odcast::data::AdjacencyMode;
use odcast::encoder::EncoderConfig;
use odcast::train::TrainConfig;
use odcast::tweedie::FamilyKind;

/// Time-bucket widths the pipeline accepts, in minutes.
const RESOLUTIONS: [u32; 3] = [5, 15, 60];

/// A config field violating its invariant. The message always names the
/// offending key with its full dotted path.
#[derive(Debug)]
pub struct ConfigError {
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for ConfigError {}

fn bad(key: &str, detail: impl fmt::Display) -> ConfigError {
    ConfigError {
        message: format!("config key `{key}`: {detail}"),
    }
}

/// Everything a run needs: family, root seed, dataset construction, model
/// architecture, and optimization settings. Unknown keys are rejected so a
/// typo cannot silently fall back to a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; see the module docs for how it fans out.
    pub seed: u64,
    /// Distribution family to train and evaluate under. The `--family` flag
    /// overrides this per invocation.
    pub family: FamilyKind,
    /// Where artifacts land when `--output-dir` is not passed.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub trainer: TrainConfig,
}

/// Dataset construction: one source plus optional zone sub-sampling and the
/// adjacency rule used to build the pair graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: SourceConfig,
    /// Keep only a seeded m × u zone sub-grid of the source tensor, the
    /// usual way to cut a manageable slice out of a city-wide feed.
    #[serde(default)]
    pub grid_sample: Option<GridSampleConfig>,
    #[serde(default)]
    pub adjacency: AdjacencyConfig,
}

/// Where demand counts come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum SourceConfig {
    /// Draw counts from known per-node Tweedie parameters.
    Synth(SynthConfig),
    /// Aggregate a trip-record CSV into counts.
    Trips(TripsConfig),
}

/// Synthetic generator settings. Node means draw uniformly from `mu_range`
/// (seeded), so every node gets its own stationary mean while dispersion and
/// index stay shared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub origins: usize,
    pub dests: usize,
    pub num_windows: usize,
    #[serde(default = "default_resolution")]
    pub resolution_minutes: u32,
    #[serde(default = "default_start_time")]
    pub start_time: DateTime<Utc>,
    /// Inclusive [low, high] range of per-node mean demand.
    pub mu_range: [f64; 2],
    /// Shared dispersion φ > 0.
    pub phi: f64,
    /// Shared index parameter, strictly inside (1, 2).
    pub rho: f64,
    /// Optional daily sinusoidal modulation of the mean, |amplitude| < 1.
    #[serde(default)]
    pub daily_amplitude: Option<f64>,
}

/// Trip-record ingestion settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripsConfig {
    /// CSV of trip records; must exist at invocation.
    pub records: PathBuf,
    /// Zone vocabulary; every record must use these names.
    pub zones: Vec<String>,
    #[serde(default = "default_resolution")]
    pub resolution_minutes: u32,
    /// Half-open [start, end) study period.
    pub period: [DateTime<Utc>; 2],
}

/// Seeded m × u zone sub-grid selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSampleConfig {
    pub m: usize,
    pub u: usize,
}

/// Pair-graph adjacency rule.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum AdjacencyConfig {
    /// Pairs sharing an origin or destination zone are adjacent.
    #[default]
    SharedEndpoint,
    /// Pairs whose train-split demand correlation exceeds the threshold are
    /// adjacent.
    DemandCorrelation { threshold: f64 },
}

impl AdjacencyConfig {
    pub fn mode(&self) -> AdjacencyMode {
        match *self {
            AdjacencyConfig::SharedEndpoint => AdjacencyMode::SharedEndpoint,
            AdjacencyConfig::DemandCorrelation { threshold } => {
                AdjacencyMode::DemandCorrelation { threshold }
            }
        }
    }
}

fn default_resolution() -> u32 {
    15
}

fn default_start_time() -> DateTime<Utc> {
    DateTime::from_timestamp(1_704_067_200, 0).unwrap() // 2024-01-01T00:00:00Z
}

impl RunConfig {
    /// Read and validate a config file. Parse errors and invariant
    /// violations both surface as [`ConfigError`]s naming the offending key.
    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            message: format!("cannot read config {}: {e}", path.display()),
        })?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| ConfigError {
            message: format!("cannot parse config {}: {e}", path.display()),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        match &self.data.source {
            SourceConfig::Synth(s) => s.validate()?,
            SourceConfig::Trips(t) => t.validate()?,
        }
        if let Some(g) = &self.data.grid_sample {
            if g.m == 0 {
                return Err(bad("data.grid_sample.m", "must be at least 1"));
            }
            if g.u == 0 {
                return Err(bad("data.grid_sample.u", "must be at least 1"));
            }
        }
        if let AdjacencyConfig::DemandCorrelation { threshold } = self.data.adjacency {
            if !threshold.is_finite() || !(0.0..1.0).contains(&threshold) {
                return Err(bad(
                    "data.adjacency.demand_correlation.threshold",
                    format!("{threshold} outside [0, 1)"),
                ));
            }
        }
        self.encoder
            .validate()
            .map_err(|e| bad("encoder", e))?;
        self.trainer
            .validate()
            .map_err(|e| bad("trainer", e))?;
        Ok(())
    }
}

fn check_resolution(key: &str, minutes: u32) -> Result<(), ConfigError> {
    if RESOLUTIONS.contains(&minutes) {
        Ok(())
    } else {
        Err(bad(key, format!("{minutes} min not one of {RESOLUTIONS:?}")))
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<(), ConfigError> {
        let key = |k: &str| format!("data.source.synth.{k}");
        if self.origins == 0 {
            return Err(bad(&key("origins"), "must be at least 1"));
        }
        if self.dests == 0 {
            return Err(bad(&key("dests"), "must be at least 1"));
        }
        if self.num_windows == 0 {
            return Err(bad(&key("num_windows"), "must be at least 1"));
        }
        check_resolution(&key("resolution_minutes"), self.resolution_minutes)?;
        let [lo, hi] = self.mu_range;
        if !(lo.is_finite() && hi.is_finite()) || lo <= 0.0 || hi < lo {
            return Err(bad(
                &key("mu_range"),
                format!("[{lo}, {hi}] is not a positive low ≤ high range"),
            ));
        }
        if !self.phi.is_finite() || self.phi <= 0.0 {
            return Err(bad(&key("phi"), format!("{} must be positive", self.phi)));
        }
        if !self.rho.is_finite() || self.rho <= 1.0 || self.rho >= 2.0 {
            return Err(bad(
                &key("rho"),
                format!("{} outside the open interval (1, 2)", self.rho),
            ));
        }
        if let Some(a) = self.daily_amplitude {
            if !a.is_finite() || a.abs() >= 1.0 {
                return Err(bad(
                    &key("daily_amplitude"),
                    format!("{a} outside (-1, 1)"),
                ));
            }
        }
        Ok(())
    }
}

impl TripsConfig {
    fn validate(&self) -> Result<(), ConfigError> {
        let key = |k: &str| format!("data.source.trips.{k}");
        if !self.records.exists() {
            return Err(bad(
                &key("records"),
                format!("{} does not exist", self.records.display()),
            ));
        }
        if self.zones.is_empty() {
            return Err(bad(&key("zones"), "must list at least one zone"));
        }
        check_resolution(&key("resolution_minutes"), self.resolution_minutes)?;
        if self.period[0] >= self.period[1] {
            return Err(bad(
                &key("period"),
                format!("start {} is not before end {}", self.period[0], self.period[1]),
            ));
        }
        Ok(())
    }
}
