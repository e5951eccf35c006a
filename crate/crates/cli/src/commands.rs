//! Subcommand implementations. Each one reads its inputs from files, writes
//! its artifacts under the output directory, and shares nothing else, so any
//! stage can be re-run in isolation. Artifact content is a pure function of
//! config + seed: no timestamps, no machine identifiers.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use odcast::data::{
    build_adjacency, ingest_trips, load_tensor, make_windows, sample_od_grid, save_tensor,
    save_truth, split_chronological, synth_generate, DataError, DemandTensor, GroundTruth,
    ODGraph, SyntheticSpec,
};
use odcast::encoder::{EncoderError, ForecastField};
use odcast::metrics::{evaluate_field, surface_export, MetricsError};
use odcast::seeds::derive_seed;
use odcast::train::{predict, train, TrainError, TrainedModel};
use odcast::tweedie::FamilyKind;

use crate::config::{RunConfig, SourceConfig, SynthConfig};

/// Failures split by exit code: `Usage` is the caller's mistake (exit 1),
/// `Runtime` is the pipeline failing on valid input (exit 2).
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<EncoderError> for CliError {
    fn from(e: EncoderError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// One resolved invocation: validated config with flag overrides applied,
/// plus the output directory and the overwrite switch.
pub struct Ctx {
    pub cfg: RunConfig,
    pub out_dir: PathBuf,
    pub overwrite: bool,
}

impl Ctx {
    fn tensor_path(&self) -> PathBuf {
        self.out_dir.join("demand.json")
    }

    fn truth_path(&self) -> PathBuf {
        self.out_dir.join("truth.json")
    }

    fn checkpoint_path(&self, family: FamilyKind) -> PathBuf {
        self.out_dir.join(format!("checkpoint_{}.json", family.name()))
    }

    fn history_path(&self, family: FamilyKind) -> PathBuf {
        self.out_dir.join(format!("history_{}.csv", family.name()))
    }

    fn metrics_path(&self, family: FamilyKind) -> PathBuf {
        self.out_dir.join(format!("metrics_{}.json", family.name()))
    }

    fn forecast_path(&self, family: FamilyKind) -> PathBuf {
        self.out_dir.join(format!("forecast_{}.json", family.name()))
    }

    fn surfaces_path(&self, family: FamilyKind) -> PathBuf {
        self.out_dir.join(format!("surfaces_{}.csv", family.name()))
    }

    /// Refuse to clobber existing artifacts unless `--overwrite` was passed.
    fn guard(&self, outputs: &[PathBuf]) -> Result<(), CliError> {
        if self.overwrite {
            return Ok(());
        }
        for path in outputs {
            if path.exists() {
                return Err(CliError::Usage(format!(
                    "{} already exists; pass --overwrite to replace it",
                    path.display()
                )));
            }
        }
        Ok(())
    }

    fn load_input_tensor(&self) -> Result<DemandTensor, CliError> {
        let path = self.tensor_path();
        if !path.exists() {
            return Err(CliError::Runtime(format!(
                "{} not found; run `odcast synth` or `odcast ingest` first",
                path.display()
            )));
        }
        Ok(load_tensor(&path)?)
    }

    fn load_model(&self, family: FamilyKind) -> Result<TrainedModel, CliError> {
        let path = self.checkpoint_path(family);
        if !path.exists() {
            return Err(CliError::Runtime(format!(
                "{} not found; run `odcast train --family {}` first",
                path.display(),
                family.name()
            )));
        }
        let model = TrainedModel::load(&path)?;
        if model.family != family {
            return Err(CliError::Runtime(format!(
                "{} holds a {} model, not {}",
                path.display(),
                model.family.name(),
                family.name()
            )));
        }
        Ok(model)
    }

    fn build_graph(&self, train_split: &DemandTensor) -> Result<ODGraph, CliError> {
        Ok(build_adjacency(train_split, self.cfg.data.adjacency.mode())?)
    }
}

/// Sibling binary buffer of a JSON manifest, for overwrite checks.
fn bin_sibling(json_path: &Path) -> PathBuf {
    json_path.with_extension("bin")
}

pub fn synth(ctx: &Ctx) -> Result<(), CliError> {
    let sc: &SynthConfig = match &ctx.cfg.data.source {
        SourceConfig::Synth(s) => s,
        SourceConfig::Trips(_) => {
            return Err(CliError::Usage(
                "config key `data.source`: `synth` needs a synth source, found trips".into(),
            ))
        }
    };
    let tensor_path = ctx.tensor_path();
    let truth_path = ctx.truth_path();
    ctx.guard(&[
        tensor_path.clone(),
        bin_sibling(&tensor_path),
        truth_path.clone(),
        bin_sibling(&truth_path),
    ])?;

    let v = sc.origins * sc.dests;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(ctx.cfg.seed, "synth.nodes"));
    let mu: Vec<f64> = (0..v)
        .map(|_| rng.random_range(sc.mu_range[0]..=sc.mu_range[1]))
        .collect();
    let spec = SyntheticSpec {
        origins: sc.origins,
        dests: sc.dests,
        num_windows: sc.num_windows,
        resolution_minutes: sc.resolution_minutes,
        start_time: sc.start_time,
        mu,
        phi: vec![sc.phi; v],
        rho: vec![sc.rho; v],
        daily_amplitude: sc.daily_amplitude,
        seed: derive_seed(ctx.cfg.seed, "synth.draws"),
    };
    let (mut tensor, mut truth) = synth_generate(&spec)?;
    if let Some(g) = ctx.cfg.data.grid_sample {
        let sampled = sample_od_grid(&tensor, g.m, g.u, derive_seed(ctx.cfg.seed, "grid"))?;
        truth = subset_truth(&truth, &tensor, &sampled);
        tensor = sampled;
    }

    save_tensor(&tensor, &tensor_path)?;
    save_truth(&truth, &truth_path)?;
    println!(
        "wrote {} pairs x {} windows ({} trips) to {}",
        tensor.num_pairs(),
        tensor.num_windows(),
        tensor.total_trips(),
        tensor_path.display()
    );
    Ok(())
}

/// Keep only the ground-truth rows matching the sampled tensor's pairs.
fn subset_truth(truth: &GroundTruth, full: &DemandTensor, sampled: &DemandTensor) -> GroundTruth {
    let position: std::collections::HashMap<(&str, &str), usize> = full
        .pair_index()
        .iter()
        .enumerate()
        .map(|(i, (o, d))| ((o.as_str(), d.as_str()), i))
        .collect();
    let t = truth.num_windows;
    let mut out = GroundTruth {
        num_pairs: sampled.num_pairs(),
        num_windows: t,
        mu: Vec::with_capacity(sampled.num_pairs() * t),
        phi: Vec::with_capacity(sampled.num_pairs() * t),
        rho: Vec::with_capacity(sampled.num_pairs() * t),
    };
    for (o, d) in sampled.pair_index() {
        let src = position[&(o.as_str(), d.as_str())];
        out.mu.extend_from_slice(&truth.mu[src * t..(src + 1) * t]);
        out.phi.extend_from_slice(&truth.phi[src * t..(src + 1) * t]);
        out.rho.extend_from_slice(&truth.rho[src * t..(src + 1) * t]);
    }
    out
}

pub fn ingest(ctx: &Ctx) -> Result<(), CliError> {
    let tc = match &ctx.cfg.data.source {
        SourceConfig::Trips(t) => t,
        SourceConfig::Synth(_) => {
            return Err(CliError::Usage(
                "config key `data.source`: `ingest` needs a trips source, found synth".into(),
            ))
        }
    };
    let tensor_path = ctx.tensor_path();
    ctx.guard(&[tensor_path.clone(), bin_sibling(&tensor_path)])?;

    let mut tensor = ingest_trips(
        &tc.records,
        &tc.zones,
        tc.resolution_minutes,
        (tc.period[0], tc.period[1]),
    )?;
    if let Some(g) = ctx.cfg.data.grid_sample {
        tensor = sample_od_grid(&tensor, g.m, g.u, derive_seed(ctx.cfg.seed, "grid"))?;
    }

    save_tensor(&tensor, &tensor_path)?;
    println!(
        "ingested {} pairs x {} windows ({} trips) to {}",
        tensor.num_pairs(),
        tensor.num_windows(),
        tensor.total_trips(),
        tensor_path.display()
    );
    Ok(())
}

pub fn run_train(ctx: &Ctx) -> Result<(), CliError> {
    let family = ctx.cfg.family;
    let checkpoint = ctx.checkpoint_path(family);
    let history = ctx.history_path(family);
    ctx.guard(&[checkpoint.clone(), bin_sibling(&checkpoint), history.clone()])?;

    let tensor = ctx.load_input_tensor()?;
    let (train_split, val_split, _) = split_chronological(&tensor)?;
    let graph = ctx.build_graph(&train_split)?;

    let mut tcfg = ctx.cfg.trainer.clone();
    tcfg.seed = derive_seed(ctx.cfg.seed, "train");
    let model = train(&tcfg, &ctx.cfg.encoder, family, &graph, &train_split, &val_split)?;

    model.save(&checkpoint)?;
    model.write_history_csv(&history)?;
    println!(
        "trained {} model: {} epochs, best epoch {}, checkpoint at {}",
        family.name(),
        model.history.len(),
        model.best_epoch,
        checkpoint.display()
    );
    Ok(())
}

/// Forecast every test window and stack the results into one field whose
/// "pairs" axis runs over (window, pair), alongside the matching truth.
fn forecast_test_windows(
    model: &TrainedModel,
    graph: &ODGraph,
    test_split: &DemandTensor,
) -> Result<(ForecastField, Vec<f64>), CliError> {
    let t = model.encoder_config.input_len;
    let k = model.encoder_config.horizon;
    let windows = make_windows(test_split, t, k)?;
    let v = test_split.num_pairs();
    let mut mu = Vec::with_capacity(windows.len() * v * k);
    let mut phi = Vec::with_capacity(windows.len() * v * k);
    let mut rho: Option<Vec<f64>> = None;
    let mut truth = Vec::with_capacity(windows.len() * v * k);
    for window in &windows {
        let field = predict(model, graph, &window.input)?;
        mu.extend_from_slice(&field.mu);
        phi.extend_from_slice(&field.phi);
        if let Some(r) = &field.rho {
            rho.get_or_insert_with(Vec::new).extend_from_slice(r);
        }
        truth.extend_from_slice(&window.target);
    }
    let field = ForecastField {
        num_pairs: windows.len() * v,
        horizon: k,
        mu,
        phi,
        rho,
    };
    Ok((field, truth))
}

pub fn evaluate(ctx: &Ctx) -> Result<(), CliError> {
    let family = ctx.cfg.family;
    let metrics_path = ctx.metrics_path(family);
    ctx.guard(std::slice::from_ref(&metrics_path))?;

    let tensor = ctx.load_input_tensor()?;
    let (train_split, _, test_split) = split_chronological(&tensor)?;
    let graph = ctx.build_graph(&train_split)?;
    let model = ctx.load_model(family)?;

    let (field, truth) = forecast_test_windows(&model, &graph, &test_split)?;
    let report = evaluate_field(&field, family, &truth)?;
    let json = to_pretty_json(&report)?;
    fs::write(&metrics_path, &json)?;
    print!("{json}");
    Ok(())
}

/// Forecast artifact: distribution parameters for the horizon right after
/// the tensor's last window, one entry per pair per step.
#[derive(Serialize)]
struct ForecastArtifact<'a> {
    family: &'a str,
    num_pairs: usize,
    horizon: usize,
    pairs: &'a [(String, String)],
    mu: &'a [f64],
    phi: &'a [f64],
    #[serde(skip_serializing_if = "Option::is_none")]
    rho: Option<&'a [f64]>,
}

pub fn run_predict(ctx: &Ctx) -> Result<(), CliError> {
    let family = ctx.cfg.family;
    let forecast_path = ctx.forecast_path(family);
    ctx.guard(std::slice::from_ref(&forecast_path))?;

    let tensor = ctx.load_input_tensor()?;
    let (train_split, _, _) = split_chronological(&tensor)?;
    let graph = ctx.build_graph(&train_split)?;
    let model = ctx.load_model(family)?;

    let t = model.encoder_config.input_len;
    let total = tensor.num_windows();
    if total < t {
        return Err(CliError::Runtime(format!(
            "tensor has {total} windows, model needs {t} of history"
        )));
    }
    let v = tensor.num_pairs();
    let mut input = Vec::with_capacity(v * t);
    for pair in 0..v {
        let series = tensor.series(pair);
        input.extend(series[total - t..].iter().map(|&c| c as f64));
    }
    let field = predict(&model, &graph, &input)?;

    let artifact = ForecastArtifact {
        family: family.name(),
        num_pairs: field.num_pairs,
        horizon: field.horizon,
        pairs: tensor.pair_index(),
        mu: &field.mu,
        phi: &field.phi,
        rho: field.rho.as_deref(),
    };
    let json = to_pretty_json(&artifact)?;
    fs::write(&forecast_path, &json)?;
    println!(
        "wrote {}-step forecast for {} pairs to {}",
        field.horizon,
        field.num_pairs,
        forecast_path.display()
    );
    Ok(())
}

pub fn export_surfaces(ctx: &Ctx) -> Result<(), CliError> {
    let family = ctx.cfg.family;
    if family != FamilyKind::Tweedie {
        return Err(CliError::Runtime(format!(
            "parameter surfaces need the learned-rho tweedie family; `{}` fixes its index parameter",
            family.name()
        )));
    }
    let surfaces_path = ctx.surfaces_path(family);
    ctx.guard(std::slice::from_ref(&surfaces_path))?;

    let tensor = ctx.load_input_tensor()?;
    let (train_split, _, test_split) = split_chronological(&tensor)?;
    let graph = ctx.build_graph(&train_split)?;
    let model = ctx.load_model(family)?;

    let (field, truth) = forecast_test_windows(&model, &graph, &test_split)?;
    let mut buf = Vec::new();
    surface_export(&field, &truth, &mut buf)?;
    fs::write(&surfaces_path, &buf)?;
    println!(
        "wrote {} surface rows to {}",
        field.num_pairs * field.horizon,
        surfaces_path.display()
    );
    Ok(())
}

fn to_pretty_json<T: Serialize>(value: &T) -> Result<String, CliError> {
    let mut json = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Runtime(format!("cannot encode artifact: {e}")))?;
    json.push('\n');
    Ok(json)
}
