//! Tweedie distribution mathematics for zero-inflated demand.
//!
//! For index 1 < ρ < 2 the Tweedie member with mean μ and dispersion φ
//! (variance φμ^ρ) is a compound Poisson–Gamma: draw an event count
//! L ~ Poisson(λ), then sum L independent Gamma(α_g, γ) variables. L = 0
//! puts an exact point mass exp(−λ) at zero — "no trips" — while positive
//! outcomes follow a continuous density. The closed-form mapping between the
//! two parameterizations is
//!
//! ```text
//! λ = μ^(2−ρ) / (φ(2−ρ)),   α_g = (2−ρ)/(ρ−1),   γ = φ(ρ−1)μ^(ρ−1)
//! ```
//!
//! with the mean identity λ·α_g·γ = μ.
//!
//! Two α symbols appear throughout: `alpha_g` is the positive Gamma shape
//! above, while the series and surrogate expressions use the negative
//! exponent `alpha_s = (2−ρ)/(1−ρ) = −alpha_g`. They are kept as distinct
//! names so each printed formula stays literal.
//!
//! Submodules: [`series`] evaluates the exact log-density (infinite series
//! summed in log space) and the single-term surrogate used as the training
//! loss; [`quadrature`] integrates the density for CDF and quantile queries.

mod quadrature;
mod series;

pub use quadrature::{cdf, quantile, CachedDensity};
pub use series::{log_density_exact, log_density_surrogate};

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use statrs::distribution::ContinuousCDF;

/// Floor applied to μ before any likelihood evaluation: μ^(1−ρ) diverges at
/// μ = 0, but the ReLU parameter head legitimately outputs 0.
pub const MU_FLOOR: f64 = 1e-6;

/// Generic positive floor: minimum φ, and the gap keeping ρ inside (1, 2).
pub const EPS: f64 = 1e-6;

/// Value substituted for x = 0 under the Gamma / Inverse Gaussian families,
/// which place zero mass at 0 (see [`family_log_density_floored`]).
pub const ZERO_SUBSTITUTE: f64 = 1e-3;

/// Errors from distribution evaluations.
#[derive(Debug, Clone, PartialEq)]
pub enum DistError {
    /// An intermediate quantity overflowed or became NaN even in log space;
    /// signals pathological parameters the caller should clamp.
    NonFinite { context: String },
    /// Quadrature failed to reach its tolerance within the evaluation budget.
    ToleranceNotMet { context: String },
    /// Input outside the operation's domain (negative x, or x = 0 under a
    /// family with no atom there).
    DomainError { context: String },
}

impl fmt::Display for DistError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DistError::NonFinite { context } => write!(f, "non-finite value in {context}"),
            DistError::ToleranceNotMet { context } => {
                write!(f, "quadrature tolerance not met in {context}")
            }
            DistError::DomainError { context } => write!(f, "domain error: {context}"),
        }
    }
}

impl std::error::Error for DistError {}

/// The (μ, φ, ρ) triple defining one predicted demand distribution,
/// clamped on construction so every downstream formula is finite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TweedieParams {
    mu: f64,
    phi: f64,
    rho: f64,
}

impl TweedieParams {
    /// Builds a parameter triple, clamping μ ≥ [`MU_FLOOR`], φ ≥ [`EPS`] and
    /// ρ into [1 + EPS, 2 − EPS].
    pub fn new(mu: f64, phi: f64, rho: f64) -> Self {
        Self {
            mu: mu.max(MU_FLOOR),
            phi: phi.max(EPS),
            rho: rho.clamp(1.0 + EPS, 2.0 - EPS),
        }
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Distribution mean: exactly μ.
    pub fn mean(&self) -> f64 {
        self.mu
    }

    /// Distribution variance: exactly φ·μ^ρ.
    pub fn variance(&self) -> f64 {
        self.phi * self.mu.powf(self.rho)
    }
}

/// The compound representation: event count rate λ, Gamma shape α_g > 0 and
/// Gamma scale γ. Satisfies λ·α_g·γ = μ to relative 1e-12.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompoundPoissonGamma {
    pub lambda: f64,
    pub alpha_g: f64,
    pub gamma: f64,
}

/// Maps (μ, φ, ρ) to the compound Poisson–Gamma parameters.
pub fn to_compound(p: &TweedieParams) -> CompoundPoissonGamma {
    let (mu, phi, rho) = (p.mu(), p.phi(), p.rho());
    CompoundPoissonGamma {
        lambda: mu.powf(2.0 - rho) / (phi * (2.0 - rho)),
        alpha_g: (2.0 - rho) / (rho - 1.0),
        gamma: phi * (rho - 1.0) * mu.powf(rho - 1.0),
    }
}

/// Probability of exactly zero demand: P(x = 0) = exp(−λ).
pub fn zero_mass(p: &TweedieParams) -> f64 {
    (-to_compound(p).lambda).exp()
}

/// Draws `n` demand values: L ~ Poisson(λ); zero if L = 0, else the sum of L
/// independent Gamma(α_g, γ) draws. Deterministic for a fixed seed.
pub fn sample(p: &TweedieParams, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| sample_one(p, &mut rng)).collect()
}

/// One compound draw from an externally owned stream, so callers that weave
/// many distributions into a single deterministic sequence (the synthetic
/// generator) control the draw order themselves.
pub(crate) fn sample_one(p: &TweedieParams, rng: &mut ChaCha8Rng) -> f64 {
    let cpg = to_compound(p);
    let pois = Poisson::new(cpg.lambda).expect("lambda > 0 by construction");
    let gamma = Gamma::new(cpg.alpha_g, cpg.gamma).expect("shape/scale > 0 by construction");
    let events = pois.sample(rng) as u64;
    (0..events).map(|_| gamma.sample(rng)).sum()
}

/// Selects which family member a model trains and evaluates under.
///
/// This is the fieldless selector; [`FamilyIndex`] carries the evaluated
/// parameter values for a single density query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyKind {
    /// ρ = 0: Gaussian with mean μ, variance φ.
    Gaussian,
    /// ρ = 1: standard Poisson mass at integer x; φ is ignored (no
    /// overdispersed-Poisson construction is defined here).
    Poisson,
    /// 1 < ρ < 2: compound Poisson–Gamma with a learned ρ.
    Tweedie,
    /// ρ = 2: Gamma with mean μ, variance φμ².
    Gamma,
    /// ρ = 3: Inverse Gaussian with mean μ, variance φμ³.
    #[serde(rename = "invgauss")]
    InverseGaussian,
}

impl FamilyKind {
    /// CLI spelling of the family.
    pub fn name(&self) -> &'static str {
        match self {
            FamilyKind::Gaussian => "gaussian",
            FamilyKind::Poisson => "poisson",
            FamilyKind::Tweedie => "tweedie",
            FamilyKind::Gamma => "gamma",
            FamilyKind::InverseGaussian => "invgauss",
        }
    }
}

impl std::str::FromStr for FamilyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gaussian" => Ok(FamilyKind::Gaussian),
            "poisson" => Ok(FamilyKind::Poisson),
            "tweedie" => Ok(FamilyKind::Tweedie),
            "gamma" => Ok(FamilyKind::Gamma),
            "invgauss" => Ok(FamilyKind::InverseGaussian),
            other => Err(format!(
                "unknown family `{other}` (expected tweedie|gaussian|poisson|gamma|invgauss)"
            )),
        }
    }
}

/// One family member evaluated at concrete parameters.
///
/// The compound member carries a full [`TweedieParams`]; the fixed-ρ members
/// carry (μ, φ). Gaussian permits μ ≥ 0, the rest require μ > 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FamilyIndex {
    Gaussian { mu: f64, phi: f64 },
    Poisson { mu: f64 },
    CompoundPG(TweedieParams),
    Gamma { mu: f64, phi: f64 },
    InverseGaussian { mu: f64, phi: f64 },
}

impl FamilyIndex {
    pub fn kind(&self) -> FamilyKind {
        match self {
            FamilyIndex::Gaussian { .. } => FamilyKind::Gaussian,
            FamilyIndex::Poisson { .. } => FamilyKind::Poisson,
            FamilyIndex::CompoundPG(_) => FamilyKind::Tweedie,
            FamilyIndex::Gamma { .. } => FamilyKind::Gamma,
            FamilyIndex::InverseGaussian { .. } => FamilyKind::InverseGaussian,
        }
    }
}

/// Closed-form log density (or log mass) of one family member at x.
///
/// Gamma and Inverse Gaussian place zero mass at x = 0 and return
/// `DomainError` there; see [`family_log_density_floored`] for the documented
/// substitution used when evaluating those families on zero-inflated counts.
pub fn family_log_density(x: f64, f: &FamilyIndex) -> Result<f64, DistError> {
    if x < 0.0 {
        return Err(DistError::DomainError {
            context: format!("negative x = {x}"),
        });
    }
    match f {
        FamilyIndex::Gaussian { mu, phi } => {
            let var = phi.max(EPS);
            Ok(-0.5 * (2.0 * std::f64::consts::PI * var).ln() - (x - mu).powi(2) / (2.0 * var))
        }
        FamilyIndex::Poisson { mu } => {
            // log P(x) = x·ln μ − μ − ln Γ(x+1); x must be a count.
            if x.fract() != 0.0 {
                return Err(DistError::DomainError {
                    context: format!("Poisson mass needs integer x, got {x}"),
                });
            }
            let m = mu.max(MU_FLOOR);
            Ok(x * m.ln() - m - statrs::function::gamma::ln_gamma(x + 1.0))
        }
        FamilyIndex::CompoundPG(p) => log_density_exact(x, p, 1e-10),
        FamilyIndex::Gamma { mu, phi } => {
            // Mean μ, variance φμ² → shape 1/φ, scale μφ.
            if x == 0.0 {
                return Err(DistError::DomainError {
                    context: "Gamma density has zero mass at x = 0".to_string(),
                });
            }
            let shape = 1.0 / phi.max(EPS);
            let scale = mu.max(MU_FLOOR) * phi.max(EPS);
            Ok((shape - 1.0) * x.ln()
                - x / scale
                - shape * scale.ln()
                - statrs::function::gamma::ln_gamma(shape))
        }
        FamilyIndex::InverseGaussian { mu, phi } => {
            // Mean μ, variance φμ³ → canonical shape parameter 1/φ.
            if x == 0.0 {
                return Err(DistError::DomainError {
                    context: "Inverse Gaussian density has zero mass at x = 0".to_string(),
                });
            }
            let m = mu.max(MU_FLOOR);
            let lam = 1.0 / phi.max(EPS);
            Ok(0.5 * (lam / (2.0 * std::f64::consts::PI * x.powi(3))).ln()
                - lam * (x - m).powi(2) / (2.0 * m * m * x))
        }
    }
}

/// [`family_log_density`] with the x = 0 substitution for Gamma / Inverse
/// Gaussian: x is replaced by [`ZERO_SUBSTITUTE`] and the boolean reports
/// that the substitution fired, so callers can surface a warning with a
/// count instead of silently absorbing it.
pub fn family_log_density_floored(x: f64, f: &FamilyIndex) -> Result<(f64, bool), DistError> {
    let needs_floor = x == 0.0
        && matches!(
            f,
            FamilyIndex::Gamma { .. } | FamilyIndex::InverseGaussian { .. }
        );
    let x_eval = if needs_floor { ZERO_SUBSTITUTE } else { x };
    family_log_density(x_eval, f).map(|v| (v, needs_floor))
}

/// Quantile of one family member, used to build prediction intervals for the
/// fixed-ρ variants. The Gaussian quantile may be negative (its support is
/// all of ℝ); interval assembly clamps lower bounds at 0.
pub fn family_quantile(q: f64, f: &FamilyIndex) -> Result<f64, DistError> {
    if !(0.0 < q && q < 1.0) {
        return Err(DistError::DomainError {
            context: format!("quantile level {q} outside (0, 1)"),
        });
    }
    match f {
        FamilyIndex::Gaussian { mu, phi } => {
            let n = statrs::distribution::Normal::new(*mu, phi.max(EPS).sqrt()).map_err(|e| {
                DistError::DomainError {
                    context: format!("Gaussian({mu}, {phi}): {e}"),
                }
            })?;
            Ok(n.inverse_cdf(q))
        }
        FamilyIndex::Poisson { mu } => {
            // Smallest k with CDF(k) ≥ q.
            let m = mu.max(MU_FLOOR);
            let mut cum = 0.0;
            let mut log_pmf = -m; // log P(0)
            for k in 0..10_000u64 {
                cum += log_pmf.exp();
                if cum >= q {
                    return Ok(k as f64);
                }
                log_pmf += m.ln() - ((k + 1) as f64).ln();
            }
            Err(DistError::ToleranceNotMet {
                context: format!("Poisson quantile search exhausted at mu = {m}"),
            })
        }
        FamilyIndex::CompoundPG(p) => quantile(q, p),
        FamilyIndex::Gamma { mu, phi } => {
            let shape = 1.0 / phi.max(EPS);
            let scale = mu.max(MU_FLOOR) * phi.max(EPS);
            let g = statrs::distribution::Gamma::new(shape, 1.0 / scale).map_err(|e| {
                DistError::DomainError {
                    context: format!("Gamma({shape}, {scale}): {e}"),
                }
            })?;
            Ok(g.inverse_cdf(q))
        }
        FamilyIndex::InverseGaussian { mu, phi } => inverse_gaussian_quantile(q, *mu, *phi),
    }
}

/// Inverse Gaussian CDF via its closed form in terms of the standard normal:
/// F(x) = Φ(√(λ/x)(x/μ − 1)) + exp(2λ/μ)·Φ(−√(λ/x)(x/μ + 1)), λ = 1/φ.
fn inverse_gaussian_cdf(x: f64, mu: f64, phi: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let m = mu.max(MU_FLOOR);
    let lam = 1.0 / phi.max(EPS);
    let std_normal = statrs::distribution::Normal::new(0.0, 1.0).expect("unit normal");
    let s = (lam / x).sqrt();
    // exp(2λ/μ) overflows for small φμ; pair it with the tiny Φ term in log
    // space instead of multiplying the raw values.
    let t1 = std_normal.cdf(s * (x / m - 1.0));
    let phi_neg = std_normal.cdf(-s * (x / m + 1.0));
    let t2 = if phi_neg > 0.0 {
        (2.0 * lam / m + phi_neg.ln()).exp()
    } else {
        0.0
    };
    (t1 + t2).clamp(0.0, 1.0)
}

fn inverse_gaussian_quantile(q: f64, mu: f64, phi: f64) -> Result<f64, DistError> {
    let m = mu.max(MU_FLOOR);
    // Bracket the quantile: variance φμ³.
    let sd = (phi.max(EPS) * m.powi(3)).sqrt();
    let mut hi = m + 12.0 * sd;
    let mut guard = 0;
    while inverse_gaussian_cdf(hi, mu, phi) < q {
        hi *= 2.0;
        guard += 1;
        if guard > 64 {
            return Err(DistError::ToleranceNotMet {
                context: format!("Inverse Gaussian quantile bracket at q = {q}"),
            });
        }
    }
    let mut lo = 0.0;
    while hi - lo > 1e-9 * (1.0 + hi) {
        let mid = 0.5 * (lo + hi);
        if inverse_gaussian_cdf(mid, mu, phi) < q {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_clamp_on_construction() {
        let p = TweedieParams::new(0.0, 0.0, 5.0);
        assert_eq!(p.mu(), MU_FLOOR);
        assert_eq!(p.phi(), EPS);
        assert_eq!(p.rho(), 2.0 - EPS);
        let p = TweedieParams::new(1.0, 1.0, 0.5);
        assert_eq!(p.rho(), 1.0 + EPS);
    }

    #[test]
    fn variance_identity() {
        let p = TweedieParams::new(2.0, 0.5, 1.3);
        assert_eq!(p.mean(), 2.0);
        assert!((p.variance() - 0.5 * 2f64.powf(1.3)).abs() < 1e-15);
    }

    #[test]
    fn inverse_gaussian_cdf_is_a_cdf() {
        // Monotone, 0 at the origin, → 1 in the far tail.
        let (mu, phi) = (1.5, 0.8);
        let mut prev = 0.0;
        for i in 1..=60 {
            let x = 0.25 * i as f64;
            let c = inverse_gaussian_cdf(x, mu, phi);
            assert!(c >= prev, "CDF decreased at x = {x}");
            prev = c;
        }
        assert!((inverse_gaussian_cdf(60.0, mu, phi) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn family_names_round_trip() {
        for kind in [
            FamilyKind::Gaussian,
            FamilyKind::Poisson,
            FamilyKind::Tweedie,
            FamilyKind::Gamma,
            FamilyKind::InverseGaussian,
        ] {
            assert_eq!(kind.name().parse::<FamilyKind>().unwrap(), kind);
        }
        assert!("normal".parse::<FamilyKind>().is_err());
    }
}
