//! Evaluation metrics over predicted demand distributions: absolute error
//! of mean/median point estimates, prediction-interval width and coverage,
//! a histogram KL divergence, sparsity fidelity, and discrete F1, plus CSV
//! export of the learned parameter surfaces.
//!
//! Two protocol choices are deliberate and documented rather than inherited:
//! the KL divergence compares additively-smoothed relative-frequency
//! histograms of *rounded* values (see [`kl_divergence`]), and F1 scores the
//! zero/nonzero binarization by default (see [`f1_nonzero`]; an exact-class
//! macro variant is available as [`f1_exact_macro`]). Rounding everywhere is
//! ties-to-even so results are bit-reproducible.

use std::error::Error;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::encoder::ForecastField;
use crate::tweedie::{family_quantile, CachedDensity, DistError, FamilyIndex, FamilyKind, TweedieParams};

/// Additive smoothing mass used by [`kl_divergence`] unless overridden.
pub const DEFAULT_SMOOTHING: f64 = 1e-6;
/// Default interval quantile levels: the central 80% band.
pub const DEFAULT_Q_LO: f64 = 0.10;
pub const DEFAULT_Q_HI: f64 = 0.90;

#[derive(Debug)]
pub enum MetricsError {
    ShapeMismatch { context: String },
    /// `true_zero_rate` is undefined when the truth contains no zeros.
    NoZeros,
    /// The operation needs a learned ρ surface but the field has none.
    MissingRho,
    BadLevels { context: String },
    Dist(DistError),
    Io(std::io::Error),
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeMismatch { context } => write!(f, "shape mismatch: {context}"),
            Self::NoZeros => write!(f, "true_zero_rate is undefined: truth has no zeros"),
            Self::MissingRho => write!(f, "operation needs a rho surface, field has none"),
            Self::BadLevels { context } => write!(f, "bad quantile levels: {context}"),
            Self::Dist(e) => write!(f, "{e}"),
            Self::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl Error for MetricsError {
    fn source(&self) -> Option<&(dyn Error + 'static)> {
        match self {
            Self::Dist(e) => Some(e),
            Self::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<DistError> for MetricsError {
    fn from(e: DistError) -> Self {
        Self::Dist(e)
    }
}
impl From<std::io::Error> for MetricsError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

/// Per-entry prediction intervals at fixed quantile levels.
/// Lower bounds are clamped at zero (demand is non-negative even when a
/// Gaussian head's quantile is not), so `lower[i] ≤ upper[i]` and
/// `lower[i] ≥ 0` hold elementwise.
#[derive(Debug, Clone)]
pub struct IntervalSet {
    lower: Vec<f64>,
    upper: Vec<f64>,
    pub q_lo: f64,
    pub q_hi: f64,
}

impl IntervalSet {
    /// Build from raw bounds, clamping lower bounds at 0 and validating
    /// elementwise order.
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, q_lo: f64, q_hi: f64) -> Result<Self, MetricsError> {
        if lower.len() != upper.len() {
            return Err(MetricsError::ShapeMismatch {
                context: format!("{} lower bounds vs {} upper", lower.len(), upper.len()),
            });
        }
        let lower: Vec<f64> = lower.into_iter().map(|l| l.max(0.0)).collect();
        if let Some(i) = (0..lower.len()).find(|&i| lower[i] > upper[i]) {
            return Err(MetricsError::ShapeMismatch {
                context: format!("entry {i}: lower {} > upper {}", lower[i], upper[i]),
            });
        }
        Ok(Self { lower, upper, q_lo, q_hi })
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }
}

/// The full evaluation summary. Serialized with exactly these key names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae_mean: f64,
    pub mae_median: f64,
    pub mpiw: f64,
    pub picp: f64,
    pub kl_divergence: f64,
    pub true_zero_rate: f64,
    pub f1: f64,
}

/// Point-estimate rule for collapsing a distribution to one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointMode {
    /// The distribution mean — exactly μ for every family here.
    Mean,
    /// The 0.5 quantile; the zero atom absorbs it whenever P(0) > 0.5.
    Median,
}

/// The family member at one field entry.
fn index_at(field: &ForecastField, family: FamilyKind, i: usize) -> Result<FamilyIndex, MetricsError> {
    let mu = field.mu[i];
    let phi = field.phi[i];
    Ok(match family {
        FamilyKind::Tweedie => {
            let rho = field.rho.as_ref().ok_or(MetricsError::MissingRho)?;
            FamilyIndex::CompoundPG(TweedieParams::new(mu, phi, rho[i]))
        }
        FamilyKind::Gaussian => FamilyIndex::Gaussian { mu, phi },
        FamilyKind::Poisson => FamilyIndex::Poisson { mu },
        FamilyKind::Gamma => FamilyIndex::Gamma { mu, phi },
        FamilyKind::InverseGaussian => FamilyIndex::InverseGaussian { mu, phi },
    })
}

/// Collapse every entry of a field to a point forecast.
pub fn point_estimates(
    field: &ForecastField,
    family: FamilyKind,
    mode: PointMode,
) -> Result<Vec<f64>, MetricsError> {
    let n = field.num_pairs * field.horizon;
    match mode {
        PointMode::Mean => Ok(field.mu.clone()),
        PointMode::Median => {
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                out.push(family_quantile(0.5, &index_at(field, family, i)?)?);
            }
            Ok(out)
        }
    }
}

/// Mean absolute error between point forecasts and observed demand.
pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64, MetricsError> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(MetricsError::ShapeMismatch {
            context: format!("{} predictions vs {} truths", pred.len(), truth.len()),
        });
    }
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / pred.len() as f64)
}

/// Per-entry prediction intervals from the model's own quantiles.
///
/// The Tweedie path reuses one integration cache per entry for both levels;
/// whenever `q_lo` falls inside the zero atom the lower bound is exactly 0.
pub fn intervals(
    field: &ForecastField,
    family: FamilyKind,
    q_lo: f64,
    q_hi: f64,
) -> Result<IntervalSet, MetricsError> {
    if !(0.0 < q_lo && q_lo < q_hi && q_hi < 1.0) {
        return Err(MetricsError::BadLevels {
            context: format!("need 0 < q_lo < q_hi < 1, got ({q_lo}, {q_hi})"),
        });
    }
    let n = field.num_pairs * field.horizon;
    let mut lower = Vec::with_capacity(n);
    let mut upper = Vec::with_capacity(n);
    for i in 0..n {
        match index_at(field, family, i)? {
            FamilyIndex::CompoundPG(p) => {
                let mut cache = CachedDensity::new(&p);
                lower.push(cache.quantile(q_lo)?);
                upper.push(cache.quantile(q_hi)?);
            }
            idx => {
                lower.push(family_quantile(q_lo, &idx)?);
                upper.push(family_quantile(q_hi, &idx)?);
            }
        }
    }
    IntervalSet::new(lower, upper, q_lo, q_hi)
}

/// Mean prediction-interval width.
pub fn mpiw(intervals: &IntervalSet) -> f64 {
    intervals
        .lower
        .iter()
        .zip(&intervals.upper)
        .map(|(l, u)| u - l)
        .sum::<f64>()
        / intervals.len() as f64
}

/// Prediction-interval coverage probability: the fraction of truths falling
/// inside their interval, boundaries inclusive.
pub fn picp(intervals: &IntervalSet, truth: &[f64]) -> Result<f64, MetricsError> {
    if truth.len() != intervals.len() || truth.is_empty() {
        return Err(MetricsError::ShapeMismatch {
            context: format!("{} truths vs {} intervals", truth.len(), intervals.len()),
        });
    }
    let covered = truth
        .iter()
        .enumerate()
        .filter(|&(i, &t)| intervals.lower[i] <= t && t <= intervals.upper[i])
        .count();
    Ok(covered as f64 / truth.len() as f64)
}

/// Histogram KL divergence KL(truth ‖ predictions).
///
/// Protocol (fixed here; the metric's source text names no estimator):
/// round both collections ties-to-even, clip to `[0, B]` where `B` is
/// `max_bin` or, when `None`, the largest rounded truth value; form
/// relative-frequency histograms over bins `0..=B`; smooth both additively,
/// `p_b = (f_b + s)/(1 + s(B+1))`; return `Σ p_b ln(p_b/q_b)`, floored at 0
/// against roundoff.
pub fn kl_divergence(
    truth: &[f64],
    pred: &[f64],
    max_bin: Option<u64>,
    smoothing: f64,
) -> f64 {
    if truth.is_empty() || pred.is_empty() {
        return 0.0;
    }
    let clipped = |x: f64, b: u64| -> usize {
        let r = x.round_ties_even().max(0.0);
        (r as u64).min(b) as usize
    };
    let b = max_bin.unwrap_or_else(|| {
        truth
            .iter()
            .map(|&x| x.round_ties_even().max(0.0) as u64)
            .max()
            .unwrap_or(0)
    });
    let bins = b as usize + 1;
    let mut ft = vec![0.0f64; bins];
    let mut fp = vec![0.0f64; bins];
    for &x in truth {
        ft[clipped(x, b)] += 1.0 / truth.len() as f64;
    }
    for &x in pred {
        fp[clipped(x, b)] += 1.0 / pred.len() as f64;
    }
    let z = 1.0 + smoothing * bins as f64;
    let kl: f64 = ft
        .iter()
        .zip(&fp)
        .map(|(&t, &p)| {
            let pt = (t + smoothing) / z;
            let pp = (p + smoothing) / z;
            pt * (pt / pp).ln()
        })
        .sum();
    kl.max(0.0)
}

/// Fraction of truly-zero entries the model also predicts as zero after
/// rounding. Errors with `NoZeros` when the truth has no zero entries.
pub fn true_zero_rate(pred: &[f64], truth: &[f64]) -> Result<f64, MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::ShapeMismatch {
            context: format!("{} predictions vs {} truths", pred.len(), truth.len()),
        });
    }
    let zero_truths: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] == 0.0).collect();
    if zero_truths.is_empty() {
        return Err(MetricsError::NoZeros);
    }
    let hit = zero_truths
        .iter()
        .filter(|&&i| pred[i].round_ties_even() == 0.0)
        .count();
    Ok(hit as f64 / zero_truths.len() as f64)
}

/// F1 of the binary classifier "rounded prediction > 0" against
/// "truth > 0". A collection with no positives on either side scores 1
/// (nothing to miss); zero precision + recall scores 0.
pub fn f1_nonzero(pred: &[f64], truth: &[f64]) -> Result<f64, MetricsError> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(MetricsError::ShapeMismatch {
            context: format!("{} predictions vs {} truths", pred.len(), truth.len()),
        });
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fneg = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        let pp = p.round_ties_even() > 0.0;
        let tt = *t > 0.0;
        match (pp, tt) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    if tp + fp + fneg == 0 {
        return Ok(1.0);
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fneg) as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Macro-averaged F1 over exact rounded count classes — the optional
/// stricter alternative to the zero/nonzero binarization. Classes are the
/// union of rounded values seen in either collection; each class scores a
/// one-vs-rest F1 (0 when the class has no true or predicted members with
/// any overlap), and the macro average weights classes equally.
pub fn f1_exact_macro(pred: &[f64], truth: &[f64]) -> Result<f64, MetricsError> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(MetricsError::ShapeMismatch {
            context: format!("{} predictions vs {} truths", pred.len(), truth.len()),
        });
    }
    let rp: Vec<i64> = pred.iter().map(|&x| x.round_ties_even().max(0.0) as i64).collect();
    let rt: Vec<i64> = truth.iter().map(|&x| x.round_ties_even().max(0.0) as i64).collect();
    let mut classes: Vec<i64> = rp.iter().chain(rt.iter()).copied().collect();
    classes.sort_unstable();
    classes.dedup();
    let mut total = 0.0;
    for &c in &classes {
        let tp = rp.iter().zip(&rt).filter(|&(&p, &t)| p == c && t == c).count();
        let fp = rp.iter().zip(&rt).filter(|&(&p, &t)| p == c && t != c).count();
        let fneg = rp.iter().zip(&rt).filter(|&(&p, &t)| p != c && t == c).count();
        if tp > 0 {
            let precision = tp as f64 / (tp + fp) as f64;
            let recall = tp as f64 / (tp + fneg) as f64;
            total += 2.0 * precision * recall / (precision + recall);
        }
    }
    Ok(total / classes.len() as f64)
}

/// Assemble the full report for one field against observed demand.
///
/// Point metrics (MAE, KL, zero rate, F1) use mean-mode estimates except
/// `mae_median`, which uses the median; intervals run at the default
/// (0.10, 0.90) levels.
pub fn evaluate_field(
    field: &ForecastField,
    family: FamilyKind,
    truth: &[f64],
) -> Result<MetricsReport, MetricsError> {
    let n = field.num_pairs * field.horizon;
    if truth.len() != n {
        return Err(MetricsError::ShapeMismatch {
            context: format!("{} truths for a {n}-entry field", truth.len()),
        });
    }
    let mean_points = point_estimates(field, family, PointMode::Mean)?;
    let median_points = point_estimates(field, family, PointMode::Median)?;
    let iv = intervals(field, family, DEFAULT_Q_LO, DEFAULT_Q_HI)?;
    Ok(MetricsReport {
        mae_mean: mae(&mean_points, truth)?,
        mae_median: mae(&median_points, truth)?,
        mpiw: mpiw(&iv),
        picp: picp(&iv, truth)?,
        kl_divergence: kl_divergence(truth, &mean_points, None, DEFAULT_SMOOTHING),
        true_zero_rate: true_zero_rate(&mean_points, truth)?,
        f1: f1_nonzero(&mean_points, truth)?,
    })
}

/// Write the learned parameter surfaces as CSV: one row per (node, horizon)
/// with columns `node,horizon,mu,phi,rho,x_true`. Values print with 17
/// significant digits so a parse recovers them bit-exactly.
pub fn surface_export<W: Write>(
    field: &ForecastField,
    truth: &[f64],
    out: &mut W,
) -> Result<(), MetricsError> {
    let rho = field.rho.as_ref().ok_or(MetricsError::MissingRho)?;
    let n = field.num_pairs * field.horizon;
    if truth.len() != n {
        return Err(MetricsError::ShapeMismatch {
            context: format!("{} truths for a {n}-entry field", truth.len()),
        });
    }
    writeln!(out, "node,horizon,mu,phi,rho,x_true")?;
    for node in 0..field.num_pairs {
        for h in 0..field.horizon {
            let i = node * field.horizon + h;
            writeln!(
                out,
                "{node},{h},{:.16e},{:.16e},{:.16e},{:.16e}",
                field.mu[i], field.phi[i], rho[i], truth[i]
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(mu: Vec<f64>, phi: Vec<f64>, rho: Option<Vec<f64>>) -> ForecastField {
        let n = mu.len();
        ForecastField {
            num_pairs: n,
            horizon: 1,
            mu,
            phi,
            rho,
        }
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 4.0]).unwrap(), 1.0);
        assert_eq!(mae(&[3.0, 7.0], &[3.0, 7.0]).unwrap(), 0.0);
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn picp_and_mpiw_counting() {
        let iv = IntervalSet::new(
            vec![0.0, 0.0, 1.0],
            vec![2.0, 3.0, 4.0],
            0.1,
            0.9,
        )
        .unwrap();
        let truth = [1.0, 5.0, 2.0];
        assert!((picp(&iv, &truth).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((mpiw(&iv) - 8.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn picp_boundaries_inclusive() {
        let iv = IntervalSet::new(vec![1.0], vec![2.0], 0.1, 0.9).unwrap();
        assert_eq!(picp(&iv, &[1.0]).unwrap(), 1.0);
        assert_eq!(picp(&iv, &[2.0]).unwrap(), 1.0);
        assert_eq!(picp(&iv, &[2.0001]).unwrap(), 0.0);
    }

    #[test]
    fn interval_lower_bound_clamped() {
        // A Gaussian 0.10 quantile below zero must clamp to 0.
        let f = field(vec![0.1], vec![4.0], None);
        let iv = intervals(&f, FamilyKind::Gaussian, 0.10, 0.90).unwrap();
        assert_eq!(iv.lower()[0], 0.0);
        assert!(iv.upper()[0] > 0.0);
    }

    #[test]
    fn tweedie_lower_bound_zero_inside_atom() {
        // P(0) = exp(−2) ≈ 0.135 > 0.10, so the 10% quantile sits on the atom.
        let f = field(vec![1.0], vec![1.0], Some(vec![1.5]));
        let iv = intervals(&f, FamilyKind::Tweedie, 0.10, 0.90).unwrap();
        assert_eq!(iv.lower()[0], 0.0);
    }

    #[test]
    fn kl_identical_collections_is_zero() {
        let xs = [0.0, 1.0, 2.0, 3.0, 1.0];
        assert_eq!(kl_divergence(&xs, &xs, None, DEFAULT_SMOOTHING), 0.0);
    }

    #[test]
    fn kl_opposite_one_hots() {
        let kl = kl_divergence(&[0.0], &[1.0], Some(1), 1e-6);
        assert!((kl - 13.815483926995917).abs() < 1e-9, "{kl}");
    }

    #[test]
    fn zero_rate_counting_and_no_zeros_error() {
        let rate = true_zero_rate(&[0.0, 1.0, 3.0], &[0.0, 0.0, 3.0]).unwrap();
        assert_eq!(rate, 0.5);
        assert!(matches!(
            true_zero_rate(&[1.0], &[2.0]),
            Err(MetricsError::NoZeros)
        ));
    }

    #[test]
    fn f1_examples() {
        let f1 = f1_nonzero(&[0.0, 1.0, 3.0, 0.0], &[0.0, 0.0, 3.0, 2.0]).unwrap();
        assert_eq!(f1, 0.5);
        assert_eq!(f1_nonzero(&[0.0, 2.0], &[0.0, 2.0]).unwrap(), 1.0);
        assert_eq!(f1_nonzero(&[0.0], &[0.0]).unwrap(), 1.0);
        // Rounding is ties-to-even: 0.5 rounds to 0, so no positive is predicted.
        assert_eq!(f1_nonzero(&[0.5], &[1.0]).unwrap(), 0.0);
    }

    #[test]
    fn exact_macro_f1_perfect_and_disjoint() {
        assert_eq!(f1_exact_macro(&[0.0, 1.0, 2.0], &[0.0, 1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(f1_exact_macro(&[1.0, 1.0], &[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn surface_rows_and_roundtrip() {
        let f = ForecastField {
            num_pairs: 2,
            horizon: 1,
            mu: vec![0.123_456_789_012_345_68, 2.0],
            phi: vec![1.5, 0.25],
            rho: Some(vec![1.5, 1.25]),
        };
        let mut buf = Vec::new();
        surface_export(&f, &[0.0, 3.0], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "node,horizon,mu,phi,rho,x_true");
        let first: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(first[0], "0");
        assert_eq!(first[1], "0");
        let parsed: f64 = first[2].parse().unwrap();
        assert_eq!(parsed, f.mu[0]);
    }

    #[test]
    fn mean_points_are_mu() {
        let f = field(vec![3.0, 0.5], vec![1.0, 1.0], Some(vec![1.5, 1.5]));
        let pts = point_estimates(&f, FamilyKind::Tweedie, PointMode::Mean).unwrap();
        assert_eq!(pts, vec![3.0, 0.5]);
    }

    #[test]
    fn heavy_atom_median_is_zero() {
        // μ=0.2, φ=1, ρ=1.5: λ = 0.2^0.5/0.5 ≈ 0.894, P(0) ≈ 0.409 < 0.5 — no.
        // Use μ=0.05: λ = 0.05^0.5/0.5 ≈ 0.447, P(0) ≈ 0.639 > 0.5.
        let f = field(vec![0.05], vec![1.0], Some(vec![1.5]));
        let pts = point_estimates(&f, FamilyKind::Tweedie, PointMode::Median).unwrap();
        assert_eq!(pts[0], 0.0);
    }
}
