//! Loss assembly, the Adam training loop with early stopping, fixed-ρ family
//! variants, checkpointing, prediction, and the historical-average baseline.
//!
//! The training loss lives on the autodiff tape; the same quantities are
//! also computed by pure functions ([`loss_total`], [`family_nll_mean`])
//! that serve as an independent path for validation-loss evaluation and for
//! cross-checking the tape construction in tests.

use std::error::Error;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use chrono::{Datelike, Timelike};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::autodiff::{Array, AutodiffError, NodeId, ParameterStore, Tape};
use crate::data::{make_windows, DataError, DemandTensor, ODGraph, Window};
use crate::encoder::{Encoder, EncoderConfig, EncoderError, ForecastField, ForwardMode, HeadNodes};
use crate::seeds::derive_seed;
use crate::tweedie::{
    log_density_surrogate, DistError, FamilyKind, TweedieParams, MU_FLOOR, ZERO_SUBSTITUTE,
};

#[derive(Debug)]
pub enum TrainError {
    /// Window loss came out non-finite twice in a row.
    Diverged { epoch: usize, window: usize },
    /// A loss evaluation produced a non-finite value; context names the
    /// offending (pair, horizon) entry.
    NonFinite { context: String },
    /// Invalid configuration value.
    BadConfig { context: String },
    /// Dimension disagreement between model, graph, and data.
    Mismatch { context: String },
    /// Checkpoint file inconsistent with its manifest.
    BadCheckpoint { context: String },
    Data(DataError),
    Encoder(EncoderError),
    Autodiff(AutodiffError),
    Dist(DistError),
    Io(std::io::Error),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Diverged { epoch, window } => write!(
                f,
                "training diverged: non-finite loss twice in a row (epoch {epoch}, window {window})"
            ),
            Self::NonFinite { context } => write!(f, "non-finite loss at {context}"),
            Self::BadConfig { context } => write!(f, "invalid training config: {context}"),
            Self::Mismatch { context } => write!(f, "{context}"),
            Self::BadCheckpoint { context } => write!(f, "bad checkpoint: {context}"),
            Self::Data(e) => write!(f, "{e}"),
            Self::Encoder(e) => write!(f, "{e}"),
            Self::Autodiff(e) => write!(f, "{e}"),
            Self::Dist(e) => write!(f, "{e}"),
            Self::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl Error for TrainError {
    fn source(&self) -> Option<&(dyn Error + 'static)> {
        match self {
            Self::Data(e) => Some(e),
            Self::Encoder(e) => Some(e),
            Self::Autodiff(e) => Some(e),
            Self::Dist(e) => Some(e),
            Self::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<DataError> for TrainError {
    fn from(e: DataError) -> Self {
        Self::Data(e)
    }
}
impl From<EncoderError> for TrainError {
    fn from(e: EncoderError) -> Self {
        Self::Encoder(e)
    }
}
impl From<AutodiffError> for TrainError {
    fn from(e: AutodiffError) -> Self {
        Self::Autodiff(e)
    }
}
impl From<DistError> for TrainError {
    fn from(e: DistError) -> Self {
        Self::Dist(e)
    }
}
impl From<std::io::Error> for TrainError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

/// Optimization hyperparameters. Adam runs with β₁ = 0.9, β₂ = 0.999,
/// ε = 1e-8; one full-graph gradient step per window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// L2 penalty weight λ over all parameters, added to the data term of
    /// the on-tape loss (so its gradient 2λθ flows with everything else).
    pub l2_weight: f64,
    pub max_epochs: usize,
    /// Consecutive epochs without strict validation improvement tolerated
    /// before stopping.
    pub patience: usize,
    /// Iterate training windows in seeded-shuffled order instead of the
    /// default chronological order.
    pub shuffle: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            l2_weight: 1e-5,
            max_epochs: 200,
            patience: 10,
            shuffle: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |context: String| Err(TrainError::BadConfig { context });
        // Zero is allowed: a frozen run is the cleanest early-stopping probe.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be non-negative", self.learning_rate));
        }
        if !(self.l2_weight >= 0.0 && self.l2_weight.is_finite()) {
            return bad(format!("l2_weight {} must be non-negative", self.l2_weight));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        Ok(())
    }
}

/// One line of training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-window optimized loss (data NLL + L2 term).
    pub train_loss: f64,
    /// Mean validation data NLL, evaluation mode, no L2 term.
    pub val_loss: f64,
}

/// A trained model: weights at the best validation epoch plus everything
/// needed to rebuild the encoder against a compatible graph.
pub struct TrainedModel {
    pub family: FamilyKind,
    pub encoder_config: EncoderConfig,
    pub train_config: TrainConfig,
    pub num_pairs: usize,
    pub store: ParameterStore,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    /// Zero targets replaced by the documented positive substitute because
    /// the family (Gamma, inverse Gaussian) has no mass at zero.
    pub zero_substitutions: usize,
}

/// Mean surrogate negative log-likelihood over a forecast field plus the L2
/// penalty — the pure (off-tape) form of the training objective.
///
/// Zero targets contribute the exact zero-branch value λ; positive targets
/// the single-term surrogate. The mean runs over all |V|·k entries, and
/// `l2_weight · Σθ²` sums over every parameter in `store`.
pub fn loss_total(
    field: &ForecastField,
    target: &[f64],
    store: &ParameterStore,
    l2_weight: f64,
) -> Result<f64, TrainError> {
    let nll = surrogate_nll_mean(field, target)?;
    let mut l2 = 0.0;
    if l2_weight != 0.0 {
        for name in store.names().map(str::to_owned).collect::<Vec<_>>() {
            let theta = store.get(&name).expect("name comes from the store");
            l2 += theta.data().iter().map(|&x| x * x).sum::<f64>();
        }
    }
    Ok(nll + l2_weight * l2)
}

/// Mean surrogate NLL of `field` against `target` (no regularizer).
pub fn surrogate_nll_mean(field: &ForecastField, target: &[f64]) -> Result<f64, TrainError> {
    let rho = field.rho.as_ref().ok_or_else(|| TrainError::Mismatch {
        context: "surrogate loss needs a rho field; fixed-rho families use their own likelihood"
            .into(),
    })?;
    let n = field.num_pairs * field.horizon;
    if target.len() != n || field.mu.len() != n {
        return Err(TrainError::Mismatch {
            context: format!(
                "target has {} entries, field is {} x {}",
                target.len(),
                field.num_pairs,
                field.horizon
            ),
        });
    }
    let mut sum = 0.0;
    for i in 0..n {
        let p = TweedieParams::new(field.mu[i], field.phi[i], rho[i]);
        let ld = log_density_surrogate(target[i], &p)?;
        if !ld.is_finite() {
            return Err(TrainError::NonFinite {
                context: format!(
                    "pair {}, horizon {}",
                    i / field.horizon,
                    i % field.horizon
                ),
            });
        }
        sum -= ld;
    }
    Ok(sum / n as f64)
}

/// Mean fixed-ρ family NLL of `field` against `target`, using the same
/// closed forms as `tweedie::family_log_density`. Targets must already be
/// substituted where the family requires positivity.
pub fn family_nll_mean(
    field: &ForecastField,
    target: &[f64],
    family: FamilyKind,
) -> Result<f64, TrainError> {
    let n = field.num_pairs * field.horizon;
    if target.len() != n {
        return Err(TrainError::Mismatch {
            context: format!("target has {} entries, field has {n}", target.len()),
        });
    }
    let mut sum = 0.0;
    #[allow(clippy::needless_range_loop)] // i walks three parallel buffers
    for i in 0..n {
        let x = target[i];
        let mu = field.mu[i];
        let phi = field.phi[i];
        let nll = match family {
            FamilyKind::Gaussian => {
                0.5 * (2.0 * std::f64::consts::PI * phi).ln() + (x - mu) * (x - mu) / (2.0 * phi)
            }
            FamilyKind::Poisson => {
                let mu_c = mu.max(MU_FLOOR);
                mu_c - x * mu_c.ln() + ln_gamma(x + 1.0)
            }
            FamilyKind::Gamma => {
                let mu_c = mu.max(MU_FLOOR);
                let inv_phi = 1.0 / phi;
                ln_gamma(inv_phi) + inv_phi * (mu_c * phi).ln() + x / (mu_c * phi)
                    - (inv_phi - 1.0) * x.ln()
            }
            FamilyKind::InverseGaussian => {
                let mu_c = mu.max(MU_FLOOR);
                0.5 * phi.ln()
                    + 0.5 * (2.0 * std::f64::consts::PI * x * x * x).ln()
                    + (x - mu_c) * (x - mu_c) / (2.0 * phi * mu_c * mu_c * x)
            }
            FamilyKind::Tweedie => {
                return Err(TrainError::Mismatch {
                    context: "tweedie family uses the surrogate loss, not family_nll_mean".into(),
                })
            }
        };
        if !nll.is_finite() {
            return Err(TrainError::NonFinite {
                context: format!("pair {}, horizon {}", i / field.horizon, i % field.horizon),
            });
        }
        sum += nll;
    }
    Ok(sum / n as f64)
}

/// Constants of one window's loss that depend only on the targets.
struct TargetConstants {
    x: Array,
    /// 1 where the target is zero, 0 elsewhere.
    zero_mask: Array,
    /// Complement of `zero_mask`.
    pos_mask: Array,
    /// Targets with zeros replaced by 1 — a safe stand-in that keeps the
    /// positive branch finite where the mask will zero it out anyway.
    x_safe: Array,
    ln_x_safe: Array,
    /// ln Γ(x + 1), for the Poisson branch.
    lgamma_x1: Array,
}

fn target_constants(target: &[f64], v: usize, k: usize) -> TargetConstants {
    let shape = vec![v, k];
    let zero_mask: Vec<f64> = target.iter().map(|&x| if x == 0.0 { 1.0 } else { 0.0 }).collect();
    let pos_mask: Vec<f64> = zero_mask.iter().map(|&m| 1.0 - m).collect();
    let x_safe: Vec<f64> = target.iter().map(|&x| if x == 0.0 { 1.0 } else { x }).collect();
    let ln_x_safe: Vec<f64> = x_safe.iter().map(|&x| x.ln()).collect();
    let lgamma_x1: Vec<f64> = target.iter().map(|&x| ln_gamma(x + 1.0)).collect();
    TargetConstants {
        x: Array::new(shape.clone(), target.to_vec()).expect("shape checked by caller"),
        zero_mask: Array::new(shape.clone(), zero_mask).unwrap(),
        pos_mask: Array::new(shape.clone(), pos_mask).unwrap(),
        x_safe: Array::new(shape.clone(), x_safe).unwrap(),
        ln_x_safe: Array::new(shape.clone(), ln_x_safe).unwrap(),
        lgamma_x1: Array::new(shape, lgamma_x1).unwrap(),
    }
}

/// Record the mean data NLL of one window on the tape.
///
/// For the Tweedie family this is the surrogate objective: the exact zero
/// branch λ = μ^{2−ρ}/(φ(2−ρ)) where x = 0 and the single-term lower-bound
/// surrogate where x > 0, branch-selected by constant masks so no gradient
/// crosses branches. Fixed-ρ families record their closed-form NLL instead.
/// Targets for Gamma / inverse Gaussian must already be substituted.
fn build_nll(
    tape: &mut Tape,
    heads: &HeadNodes,
    target: &[f64],
    v: usize,
    k: usize,
    family: FamilyKind,
) -> Result<NodeId, TrainError> {
    let consts = target_constants(target, v, k);
    let shape = [v, k];
    let full = |tape: &mut Tape, value: f64| tape.leaf(Array::full(&shape, value));

    // μ clamped to the floor with relu so the clamp differentiates.
    let floor = full(tape, MU_FLOOR);
    let shifted = tape.sub(heads.mu, floor)?;
    let shifted_pos = tape.relu(shifted);
    let mu_c = tape.add(shifted_pos, floor)?;
    let phi = heads.phi;

    let nll_entries = match family {
        FamilyKind::Tweedie => {
            let rho = heads.rho.ok_or_else(|| TrainError::Mismatch {
                context: "tweedie training requires the rho head".into(),
            })?;
            let zero_mask = tape.leaf(consts.zero_mask);
            let pos_mask = tape.leaf(consts.pos_mask);
            let x_safe = tape.leaf(consts.x_safe);
            let ln_x = tape.leaf(consts.ln_x_safe);

            let one = full(tape, 1.0);
            let two = full(tape, 2.0);
            let half = full(tape, 0.5);
            let two_m_rho = tape.sub(two, rho)?;
            let one_m_rho = tape.sub(one, rho)?;
            let rho_m_one = tape.sub(rho, one)?;

            // Zero branch: λ = μ^{2−ρ} / (φ(2−ρ)); −log f(0) = λ.
            let mu_pow_2mr = tape.pow(mu_c, two_m_rho)?;
            let denom = tape.mul(phi, two_m_rho)?;
            let zero_nll = tape.div(mu_pow_2mr, denom)?;

            // Positive branch, evaluated with the safe targets everywhere:
            // base = (x·μ^{1−ρ}/(1−ρ) − μ^{2−ρ}/(2−ρ))/φ
            let mu_pow_1mr = tape.pow(mu_c, one_m_rho)?;
            let xm = tape.mul(x_safe, mu_pow_1mr)?;
            let term1 = tape.div(xm, one_m_rho)?;
            let term2 = tape.div(mu_pow_2mr, two_m_rho)?;
            let numer = tape.sub(term1, term2)?;
            let base = tape.div(numer, phi)?;
            // j_max = x^{2−ρ}/((2−ρ)φ); α_g = (2−ρ)/(ρ−1) = −α_s.
            let x_pow = tape.pow(x_safe, two_m_rho)?;
            let j_max = tape.div(x_pow, denom)?;
            let alpha_g = tape.div(two_m_rho, rho_m_one)?;
            // log(j_max · √α_g · x) = log j_max + ½ log α_g + log x
            let log_jmax = tape.log(j_max);
            let log_ag = tape.log(alpha_g);
            let half_log_ag = tape.mul(half, log_ag)?;
            let log_sum = tape.add(log_jmax, half_log_ag)?;
            let log_term = tape.add(log_sum, ln_x)?;
            // j_max(α_s − 1) = −j_max(α_g + 1): enters the NLL positively.
            let ag_p1 = tape.add(alpha_g, one)?;
            let tail = tape.mul(j_max, ag_p1)?;
            // NLL = −base + log_term + tail
            let lt_m_base = tape.sub(log_term, base)?;
            let pos_nll = tape.add(lt_m_base, tail)?;

            let z_part = tape.mul(zero_mask, zero_nll)?;
            let p_part = tape.mul(pos_mask, pos_nll)?;
            tape.add(z_part, p_part)?
        }
        FamilyKind::Gaussian => {
            let x = tape.leaf(consts.x);
            let two = full(tape, 2.0);
            let half = full(tape, 0.5);
            let ln_2pi = full(tape, (2.0 * std::f64::consts::PI).ln());
            // Gaussian mean may sit at zero; no clamp (heads.mu ≥ 0 already).
            let log_phi = tape.log(phi);
            let log_sum = tape.add(ln_2pi, log_phi)?;
            let entropy = tape.mul(half, log_sum)?;
            let resid = tape.sub(x, heads.mu)?;
            let sq = tape.mul(resid, resid)?;
            let two_phi = tape.mul(two, phi)?;
            let quad = tape.div(sq, two_phi)?;
            tape.add(entropy, quad)?
        }
        FamilyKind::Poisson => {
            let x = tape.leaf(consts.x);
            let lgx = tape.leaf(consts.lgamma_x1);
            let log_mu = tape.log(mu_c);
            let x_log_mu = tape.mul(x, log_mu)?;
            let rate_term = tape.sub(mu_c, x_log_mu)?;
            tape.add(rate_term, lgx)?
        }
        FamilyKind::Gamma => {
            // NLL = lnΓ(1/φ) + (1/φ)ln(μφ) + x/(μφ) − (1/φ − 1)ln x
            let x = tape.leaf(consts.x);
            let ln_x = tape.leaf(consts.ln_x_safe);
            let one = full(tape, 1.0);
            let inv_phi = tape.div(one, phi)?;
            let lg = tape.lgamma(inv_phi);
            let mu_phi = tape.mul(mu_c, phi)?;
            let log_mu_phi = tape.log(mu_phi);
            let scale_term = tape.mul(inv_phi, log_mu_phi)?;
            let x_over = tape.div(x, mu_phi)?;
            let a = tape.add(lg, scale_term)?;
            let b = tape.add(a, x_over)?;
            let shape_m1 = tape.sub(inv_phi, one)?;
            let shape_lnx = tape.mul(shape_m1, ln_x)?;
            tape.sub(b, shape_lnx)?
        }
        FamilyKind::InverseGaussian => {
            // NLL = ½ln φ + ½ln(2πx³) + (x−μ)²/(2φμ²x)
            let x = tape.leaf(consts.x);
            let half = full(tape, 0.5);
            let two = full(tape, 2.0);
            let cubic: Vec<f64> = target
                .iter()
                .map(|&t| {
                    let xs = if t == 0.0 { 1.0 } else { t };
                    0.5 * (2.0 * std::f64::consts::PI * xs * xs * xs).ln()
                })
                .collect();
            let cubic_term = tape.leaf(Array::new(shape.to_vec(), cubic).unwrap());
            let log_phi = tape.log(phi);
            let half_log_phi = tape.mul(half, log_phi)?;
            let resid = tape.sub(x, mu_c)?;
            let sq = tape.mul(resid, resid)?;
            let mu_sq = tape.mul(mu_c, mu_c)?;
            let phi_mu_sq = tape.mul(phi, mu_sq)?;
            let phi_mu_sq_x = tape.mul(phi_mu_sq, x)?;
            let den = tape.mul(two, phi_mu_sq_x)?;
            let quad = tape.div(sq, den)?;
            let a = tape.add(half_log_phi, cubic_term)?;
            tape.add(a, quad)?
        }
    };
    Ok(tape.reduce_mean(nll_entries))
}

/// Add `l2_weight · Σθ²` over the attached parameter leaves to a scalar
/// loss node.
fn add_l2(
    tape: &mut Tape,
    data_nll: NodeId,
    param_ids: &[NodeId],
    l2_weight: f64,
) -> Result<NodeId, TrainError> {
    if l2_weight == 0.0 {
        return Ok(data_nll);
    }
    let mut acc: Option<NodeId> = None;
    for &id in param_ids {
        let sq = tape.mul(id, id)?;
        let s = tape.reduce_sum(sq);
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    let total = acc.ok_or_else(|| TrainError::Mismatch {
        context: "no parameters to regularize".into(),
    })?;
    let w = tape.leaf(Array::scalar(l2_weight));
    let scaled = tape.mul(total, w)?;
    Ok(tape.add(data_nll, scaled)?)
}

/// One tape evaluation of the training objective on a single window:
/// forward pass in `mode`, then mean data NLL plus the L2 term. Returns the
/// scalar loss. Deterministic given the store, the inputs, and (in training
/// mode) the dropout seed.
pub fn objective(
    encoder: &Encoder,
    store: &ParameterStore,
    input: &[f64],
    target: &[f64],
    family: FamilyKind,
    l2_weight: f64,
    mode: ForwardMode,
) -> Result<f64, TrainError> {
    let (loss, _) = objective_tape(encoder, store, input, target, family, l2_weight, mode, false)?;
    Ok(loss)
}

/// [`objective`] plus reverse-mode gradients, one `Vec` per parameter in
/// store order — the hook for finite-difference verification.
pub fn objective_with_grads(
    encoder: &Encoder,
    store: &ParameterStore,
    input: &[f64],
    target: &[f64],
    family: FamilyKind,
    l2_weight: f64,
    mode: ForwardMode,
) -> Result<(f64, Vec<Vec<f64>>), TrainError> {
    let (loss, grads) =
        objective_tape(encoder, store, input, target, family, l2_weight, mode, true)?;
    Ok((loss, grads.expect("requested gradients")))
}

#[allow(clippy::too_many_arguments, clippy::type_complexity)]
fn objective_tape(
    encoder: &Encoder,
    store: &ParameterStore,
    input: &[f64],
    target: &[f64],
    family: FamilyKind,
    l2_weight: f64,
    mode: ForwardMode,
    with_grads: bool,
) -> Result<(f64, Option<Vec<Vec<f64>>>), TrainError> {
    let mut tape = Tape::new();
    let ids = store.attach(&mut tape);
    let heads = encoder.forward(&mut tape, &ids, input, mode)?;
    let v = encoder.num_pairs();
    let k = encoder.config().horizon;
    let data_nll = build_nll(&mut tape, &heads, target, v, k, family)?;
    let loss = add_l2(&mut tape, data_nll, &ids, l2_weight)?;
    let loss_value = tape.value(loss).item();
    if !with_grads {
        return Ok((loss_value, None));
    }
    tape.backward(loss)?;
    let grads = ids
        .iter()
        .zip(store.names())
        .map(|(&id, name)| match tape.grad(id) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; store.get(name).expect("listed name").len()],
        })
        .collect();
    Ok((loss_value, Some(grads)))
}

/// Replace zero targets for families with no mass at zero, counting the
/// substitutions.
fn substitute_targets(windows: &mut [Window], family: FamilyKind) -> usize {
    if !matches!(family, FamilyKind::Gamma | FamilyKind::InverseGaussian) {
        return 0;
    }
    let mut substituted = 0;
    for w in windows {
        for x in &mut w.target {
            if *x == 0.0 {
                *x = ZERO_SUBSTITUTE;
                substituted += 1;
            }
        }
    }
    substituted
}

/// Mean evaluation-mode data NLL over a window set (no L2 term).
fn mean_eval_nll(
    encoder: &Encoder,
    store: &ParameterStore,
    windows: &[Window],
    family: FamilyKind,
) -> Result<f64, TrainError> {
    let mut sum = 0.0;
    for w in windows {
        let field = encoder.predict(store, &w.input)?;
        let nll = match family {
            FamilyKind::Tweedie => surrogate_nll_mean(&field, &w.target)?,
            _ => family_nll_mean(&field, &w.target, family)?,
        };
        sum += nll;
    }
    Ok(sum / windows.len() as f64)
}

/// Train an encoder + heads on chronological windows with Adam and early
/// stopping; return the weights of the best validation epoch.
///
/// One gradient step per window over the full graph. An epoch ends with a
/// validation pass in evaluation mode; training stops after `patience`
/// consecutive epochs without strict improvement, or at `max_epochs`. A
/// window whose loss comes out non-finite is skipped (no update); two in a
/// row abort with `Diverged`.
pub fn train(
    train_cfg: &TrainConfig,
    encoder_cfg: &EncoderConfig,
    family: FamilyKind,
    graph: &ODGraph,
    train_split: &DemandTensor,
    val_split: &DemandTensor,
) -> Result<TrainedModel, TrainError> {
    train_cfg.validate()?;
    let with_rho = family == FamilyKind::Tweedie;
    let encoder = Encoder::new(encoder_cfg.clone(), graph, with_rho)?;
    for (name, split) in [("train", train_split), ("validation", val_split)] {
        if split.num_pairs() != graph.num_pairs() {
            return Err(TrainError::Mismatch {
                context: format!(
                    "{name} split has {} pairs, graph has {}",
                    split.num_pairs(),
                    graph.num_pairs()
                ),
            });
        }
    }

    let t = encoder_cfg.input_len;
    let k = encoder_cfg.horizon;
    let mut train_windows = make_windows(train_split, t, k)?;
    let mut val_windows = make_windows(val_split, t, k)?;
    let mut zero_substitutions = substitute_targets(&mut train_windows, family);
    zero_substitutions += substitute_targets(&mut val_windows, family);

    let v = graph.num_pairs();
    let mut store = ParameterStore::new();
    encoder.init_params(&mut store, derive_seed(train_cfg.seed, "init"))?;

    let mut history: Vec<EpochStats> = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_snapshot = store.snapshot();
    let mut best_epoch = 0usize;
    let mut stall = 0usize;
    let mut nonfinite_streak = 0usize;

    for epoch in 1..=train_cfg.max_epochs {
        let mut order: Vec<usize> = (0..train_windows.len()).collect();
        if train_cfg.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                train_cfg.seed,
                &format!("shuffle.e{epoch}"),
            ));
            order.shuffle(&mut rng);
        }

        let mut loss_sum = 0.0;
        let mut used = 0usize;
        for (wi, &widx) in order.iter().enumerate() {
            let window = &train_windows[widx];
            let mut tape = Tape::new();
            let ids = store.attach(&mut tape);
            let dropout_seed = derive_seed(train_cfg.seed, &format!("dropout.e{epoch}.w{wi}"));
            let heads = encoder.forward(
                &mut tape,
                &ids,
                &window.input,
                ForwardMode::Train { dropout_seed },
            )?;
            let data_nll = build_nll(&mut tape, &heads, &window.target, v, k, family)?;
            let loss = add_l2(&mut tape, data_nll, &ids, train_cfg.l2_weight)?;
            let loss_value = tape.value(loss).item();

            let finite = loss_value.is_finite() && tape.first_nonfinite().is_none();
            if !finite {
                nonfinite_streak += 1;
                if nonfinite_streak >= 2 {
                    return Err(TrainError::Diverged { epoch, window: wi });
                }
                continue;
            }
            nonfinite_streak = 0;

            tape.backward(loss)?;
            store.collect_grads(&tape, &ids)?;
            // The L2 term already lives on the tape; a second application
            // inside Adam would double-regularize.
            store.adam_step(train_cfg.learning_rate, 0.9, 0.999, 1e-8, 0.0)?;
            loss_sum += loss_value;
            used += 1;
        }

        let train_loss = if used > 0 { loss_sum / used as f64 } else { f64::NAN };
        let val_loss = mean_eval_nll(&encoder, &store, &val_windows, family)?;
        history.push(EpochStats { epoch, train_loss, val_loss });

        if val_loss < best_val {
            best_val = val_loss;
            best_snapshot = store.snapshot();
            best_epoch = epoch;
            stall = 0;
        } else {
            stall += 1;
            if stall >= train_cfg.patience {
                break;
            }
        }
    }

    store.restore(&best_snapshot)?;
    Ok(TrainedModel {
        family,
        encoder_config: encoder_cfg.clone(),
        train_config: train_cfg.clone(),
        num_pairs: v,
        store,
        history,
        best_epoch,
        zero_substitutions,
    })
}

/// Evaluation-mode forward pass of a trained model on one input window.
pub fn predict(
    model: &TrainedModel,
    graph: &ODGraph,
    input: &[f64],
) -> Result<ForecastField, TrainError> {
    if graph.num_pairs() != model.num_pairs {
        return Err(TrainError::Mismatch {
            context: format!(
                "graph has {} pairs, model was trained on {}",
                graph.num_pairs(),
                model.num_pairs
            ),
        });
    }
    let encoder = Encoder::new(
        model.encoder_config.clone(),
        graph,
        model.family == FamilyKind::Tweedie,
    )?;
    Ok(encoder.predict(&model.store, input)?)
}

/// Historical-average baseline: the forecast for pair i in a window is the
/// mean training demand of pair i in the same (weekday, time-of-day) slot,
/// falling back to the pair's global training mean for slots the training
/// period never saw. Returns forecasts for every (pair, window) of
/// `targets`, row-major.
pub fn baseline_ha(train_split: &DemandTensor, targets: &DemandTensor) -> Vec<f64> {
    let v = train_split.num_pairs();
    let res = train_split.resolution_minutes();
    let slots_per_day = (24 * 60 / res) as usize;
    let slot_count = 7 * slots_per_day;
    let slot_of = |tensor: &DemandTensor, w: usize| -> usize {
        let ts = tensor.window_start(w);
        let weekday = ts.weekday().num_days_from_monday() as usize;
        let minute = (ts.time().hour() * 60 + ts.time().minute()) as usize;
        weekday * slots_per_day + minute / res as usize
    };

    let mut slot_sum = vec![0.0; v * slot_count];
    let mut slot_n = vec![0u32; v * slot_count];
    let mut pair_sum = vec![0.0; v];
    for pair in 0..v {
        for w in 0..train_split.num_windows() {
            let c = train_split.count(pair, w) as f64;
            let s = slot_of(train_split, w);
            slot_sum[pair * slot_count + s] += c;
            slot_n[pair * slot_count + s] += 1;
            pair_sum[pair] += c;
        }
    }
    let global: Vec<f64> = pair_sum
        .iter()
        .map(|&s| s / train_split.num_windows() as f64)
        .collect();

    let tw = targets.num_windows();
    let mut out = vec![0.0; v * tw];
    for pair in 0..v {
        for w in 0..tw {
            let s = slot_of(targets, w);
            let idx = pair * slot_count + s;
            out[pair * tw + w] = if slot_n[idx] > 0 {
                slot_sum[idx] / f64::from(slot_n[idx])
            } else {
                global[pair]
            };
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    family: FamilyKind,
    encoder_config: EncoderConfig,
    train_config: TrainConfig,
    num_pairs: usize,
    best_epoch: usize,
    zero_substitutions: usize,
    history: Vec<EpochStats>,
    params: Vec<ParamSpec>,
    /// Basename of the little-endian f64 buffer holding every parameter
    /// back to back in `params` order.
    data_file: String,
}

impl TrainedModel {
    /// Write `manifest.json`-style checkpoint: a JSON manifest at
    /// `manifest_path` plus a flat binary of all weights beside it.
    /// Optimizer state is deliberately not persisted.
    pub fn save(&self, manifest_path: &Path) -> Result<(), TrainError> {
        let data_file = manifest_path
            .with_extension("bin")
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "params.bin".to_string());
        let params: Vec<ParamSpec> = self
            .store
            .names()
            .map(|name| ParamSpec {
                name: name.to_string(),
                shape: self.store.get(name).expect("listed name").shape().to_vec(),
            })
            .collect();
        let manifest = CheckpointManifest {
            family: self.family,
            encoder_config: self.encoder_config.clone(),
            train_config: self.train_config.clone(),
            num_pairs: self.num_pairs,
            best_epoch: self.best_epoch,
            zero_substitutions: self.zero_substitutions,
            history: self.history.clone(),
            params,
            data_file: data_file.clone(),
        };
        let mut json = BufWriter::new(File::create(manifest_path)?);
        serde_json::to_writer_pretty(&mut json, &manifest).map_err(|e| {
            TrainError::BadCheckpoint {
                context: format!("cannot encode manifest: {e}"),
            }
        })?;
        json.write_all(b"\n")?;
        json.flush()?;

        let bin_path = manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&data_file);
        let mut bin = BufWriter::new(File::create(bin_path)?);
        for name in self.store.names() {
            for x in self.store.get(name).expect("listed name").data() {
                bin.write_all(&x.to_le_bytes())?;
            }
        }
        bin.flush()?;
        Ok(())
    }

    /// Load a checkpoint written by [`TrainedModel::save`].
    pub fn load(manifest_path: &Path) -> Result<Self, TrainError> {
        let manifest: CheckpointManifest =
            serde_json::from_reader(BufReader::new(File::open(manifest_path)?)).map_err(|e| {
                TrainError::BadCheckpoint {
                    context: format!("{}: {e}", manifest_path.display()),
                }
            })?;
        let bin_path = manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&manifest.data_file);
        let mut bytes = Vec::new();
        BufReader::new(File::open(&bin_path)?).read_to_end(&mut bytes)?;
        let total: usize = manifest
            .params
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum();
        if bytes.len() != total * 8 {
            return Err(TrainError::BadCheckpoint {
                context: format!(
                    "{}: {} bytes on disk, manifest implies {}",
                    bin_path.display(),
                    bytes.len(),
                    total * 8
                ),
            });
        }
        let mut store = ParameterStore::new();
        let mut offset = 0usize;
        for spec in &manifest.params {
            let n: usize = spec.shape.iter().product();
            let data: Vec<f64> = bytes[offset..offset + n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset += n * 8;
            let arr = Array::new(spec.shape.clone(), data).map_err(|e| {
                TrainError::BadCheckpoint {
                    context: format!("parameter {}: {e}", spec.name),
                }
            })?;
            store.add(&spec.name, arr)?;
        }
        Ok(Self {
            family: manifest.family,
            encoder_config: manifest.encoder_config,
            train_config: manifest.train_config,
            num_pairs: manifest.num_pairs,
            store,
            history: manifest.history,
            best_epoch: manifest.best_epoch,
            zero_substitutions: manifest.zero_substitutions,
        })
    }

    /// Training history as `epoch,train_loss,val_loss` CSV.
    pub fn write_history_csv(&self, path: &Path) -> Result<(), TrainError> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "epoch,train_loss,val_loss")?;
        for e in &self.history {
            writeln!(out, "{},{},{}", e.epoch, e.train_loss, e.val_loss)?;
        }
        out.flush()?;
        Ok(())
    }
}
