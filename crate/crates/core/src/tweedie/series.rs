//! Exact series log-density and the single-term surrogate.
//!
//! For x > 0 the density factors as a(x, φ, ρ) · exp((xθ − κ(θ))/φ) with
//! θ = μ^(1−ρ)/(1−ρ), κ(θ) = μ^(2−ρ)/(2−ρ), and the normalizing series
//!
//! ```text
//! a(x, φ, ρ) = (1/x) · Σ_{j≥1} x^(−j·α_s) (ρ−1)^(α_s·j)
//!                        / ( φ^(j(1−α_s)) (2−ρ)^j · j! · Γ(−j·α_s) )
//! ```
//!
//! where α_s = (2−ρ)/(1−ρ) < 0. Terms are strictly log-concave in j with a
//! single peak near j_max = x^(2−ρ)/((2−ρ)φ), so the sum is evaluated in log
//! space: locate the peak index, expand outward in both directions until
//! terms fall below `tol` × the peak term, and combine with log-sum-exp.
//!
//! The training loss avoids the summation entirely: it keeps the exponent
//! and replaces log a(x, φ, ρ) by the Stirling evaluation of the peak term,
//! `−log(j_max·√(−α_s)·x) + j_max(α_s − 1)`. That surrogate sits below the
//! exact log-density whenever j_max ≥ 1; for very small x (j_max < 1) the
//! continuous peak lies below the first series index and the surrogate can
//! exceed the exact value — see the ordering tests for measured behaviour.

use statrs::function::gamma::ln_gamma;

use super::{to_compound, DistError, TweedieParams};

/// Default relative cutoff for series terms, as used by callers that have no
/// reason to pick their own: terms below `tol` × (peak term) are dropped.
pub(crate) const DEFAULT_SERIES_TOL: f64 = 1e-10;

/// Hard cap on summed series terms; hitting it means the parameters put the
/// peak so far out that the evaluation cannot be trusted.
const MAX_TERMS: usize = 500_000;

/// Per-(φ, ρ) cache of the x-independent part of each log term.
///
/// log t_j = c_j + j·α_g·ln x with c_j = j·w − ln Γ(j+1) − ln Γ(j·α_g); the
/// `c_j` are the expensive part (two ln Γ each) and are reused across every
/// x the CDF/quantile machinery touches.
pub(crate) struct SeriesTable {
    pub(crate) phi: f64,
    pub(crate) rho: f64,
    pub(crate) alpha_g: f64,
    w: f64,
    coeffs: Vec<f64>,
}

impl SeriesTable {
    pub(crate) fn new(phi: f64, rho: f64) -> Self {
        let alpha_s = (2.0 - rho) / (1.0 - rho);
        let alpha_g = -alpha_s;
        let w = alpha_s * (rho - 1.0).ln() - (1.0 - alpha_s) * phi.ln() - (2.0 - rho).ln();
        Self {
            phi,
            rho,
            alpha_g,
            w,
            coeffs: Vec::new(),
        }
    }

    /// x-independent coefficient for term index j ≥ 1, extending lazily.
    fn coeff(&mut self, j: usize) -> f64 {
        while self.coeffs.len() < j {
            let jj = (self.coeffs.len() + 1) as f64;
            self.coeffs
                .push(jj * self.w - ln_gamma(jj + 1.0) - ln_gamma(jj * self.alpha_g));
        }
        self.coeffs[j - 1]
    }

    fn log_term(&mut self, j: usize, ln_x: f64) -> f64 {
        self.coeff(j) + (j as f64) * self.alpha_g * ln_x
    }

    /// log a(x, φ, ρ) by peak location + bidirectional expansion.
    pub(crate) fn log_a(&mut self, x: f64, tol: f64) -> Result<f64, DistError> {
        let ln_x = x.ln();
        let j_max = x.powf(2.0 - self.rho) / ((2.0 - self.rho) * self.phi);

        // Hill-climb from the continuous peak estimate to the discrete peak;
        // the terms are unimodal in j so a local step test suffices.
        let mut peak = (j_max.round() as i64).max(1) as usize;
        let mut guard = 0usize;
        while self.log_term(peak + 1, ln_x) > self.log_term(peak, ln_x) {
            peak += 1;
            guard += 1;
            if guard > MAX_TERMS {
                return Err(DistError::NonFinite {
                    context: format!("series peak search ran away at x = {x}"),
                });
            }
        }
        while peak > 1 && self.log_term(peak - 1, ln_x) > self.log_term(peak, ln_x) {
            peak -= 1;
        }

        let log_peak = self.log_term(peak, ln_x);
        if !log_peak.is_finite() {
            return Err(DistError::NonFinite {
                context: format!(
                    "series peak term at j = {peak}, x = {x}, phi = {}, rho = {}",
                    self.phi, self.rho
                ),
            });
        }
        let cutoff = log_peak + tol.ln();

        // Expand outward from the peak, accumulating exp-shifted terms.
        let mut sum = 1.0; // the peak term itself
        let mut terms = 1usize;
        let mut j = peak + 1;
        loop {
            let t = self.log_term(j, ln_x);
            if t < cutoff {
                break;
            }
            sum += (t - log_peak).exp();
            j += 1;
            terms += 1;
            if terms > MAX_TERMS {
                return Err(DistError::NonFinite {
                    context: format!("series term budget exhausted rightward at x = {x}"),
                });
            }
        }
        // Leftward expansion needs no budget: j is bounded below by 1.
        let mut j = peak;
        while j > 1 {
            j -= 1;
            let t = self.log_term(j, ln_x);
            if t < cutoff {
                break;
            }
            sum += (t - log_peak).exp();
        }

        Ok(log_peak + sum.ln() - ln_x)
    }
}

/// Exponent of the reparameterized density: (xθ − κ(θ))/φ.
pub(crate) fn base_exponent(x: f64, p: &TweedieParams) -> f64 {
    let (mu, phi, rho) = (p.mu(), p.phi(), p.rho());
    (x * mu.powf(1.0 - rho) / (1.0 - rho) - mu.powf(2.0 - rho) / (2.0 - rho)) / phi
}

/// Exact log density (x > 0) or log zero mass (x = 0).
///
/// The series is summed in log space with relative term cutoff `tol`
/// (use 1e-10 unless there is a reason not to).
pub fn log_density_exact(x: f64, p: &TweedieParams, tol: f64) -> Result<f64, DistError> {
    if x < 0.0 {
        return Err(DistError::DomainError {
            context: format!("negative x = {x}"),
        });
    }
    if tol <= 0.0 || tol.is_nan() {
        return Err(DistError::DomainError {
            context: format!("series tolerance must be positive, got {tol}"),
        });
    }
    if x == 0.0 {
        return Ok(-to_compound(p).lambda);
    }
    let log_a = SeriesTable::new(p.phi(), p.rho()).log_a(x, tol)?;
    let v = base_exponent(x, p) + log_a;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(DistError::NonFinite {
            context: format!("exact log density at x = {x}"),
        })
    }
}

/// Single-term surrogate of the log-likelihood, used as the training loss.
///
/// The x = 0 branch equals the exact zero branch −μ^(2−ρ)/(φ(2−ρ)). The
/// x > 0 branch keeps the exponent and approximates the series by its peak
/// term at the continuous index j_max = x^(2−ρ)/((2−ρ)φ):
///
/// ```text
/// (1/φ)(x·μ^(1−ρ)/(1−ρ) − μ^(2−ρ)/(2−ρ)) − log(j_max·√(−α_s)·x) + j_max(α_s − 1)
/// ```
pub fn log_density_surrogate(x: f64, p: &TweedieParams) -> Result<f64, DistError> {
    if x < 0.0 {
        return Err(DistError::DomainError {
            context: format!("negative x = {x}"),
        });
    }
    let (mu, phi, rho) = (p.mu(), p.phi(), p.rho());
    if x == 0.0 {
        return Ok(-mu.powf(2.0 - rho) / (phi * (2.0 - rho)));
    }
    let alpha_s = (2.0 - rho) / (1.0 - rho);
    let j_max = x.powf(2.0 - rho) / ((2.0 - rho) * phi);
    let v = base_exponent(x, p) - (j_max * (-alpha_s).sqrt() * x).ln() + j_max * (alpha_s - 1.0);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(DistError::NonFinite {
            context: format!("surrogate log density at x = {x}, mu = {mu}"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_reuse_matches_fresh_evaluation() {
        let mut table = SeriesTable::new(0.7, 1.4);
        let a1 = table.log_a(2.5, 1e-12).unwrap();
        let _ = table.log_a(0.3, 1e-12).unwrap();
        let a1_again = table.log_a(2.5, 1e-12).unwrap();
        assert_eq!(a1, a1_again);
        let fresh = SeriesTable::new(0.7, 1.4).log_a(2.5, 1e-12).unwrap();
        assert_eq!(a1, fresh);
    }

    #[test]
    fn zero_branches_agree_exactly() {
        let p = TweedieParams::new(1.7, 0.9, 1.6);
        let exact = log_density_exact(0.0, &p, 1e-10).unwrap();
        let surrogate = log_density_surrogate(0.0, &p).unwrap();
        assert_eq!(exact, surrogate);
    }

    #[test]
    fn negative_x_is_a_domain_error() {
        let p = TweedieParams::new(1.0, 1.0, 1.5);
        assert!(matches!(
            log_density_exact(-0.1, &p, 1e-10),
            Err(DistError::DomainError { .. })
        ));
        assert!(matches!(
            log_density_surrogate(-0.1, &p),
            Err(DistError::DomainError { .. })
        ));
    }
}
