//! Property tests of the distribution invariants over randomized parameters.

use proptest::prelude::*;

use odcast::tweedie::{
    cdf, log_density_exact, log_density_surrogate, to_compound, zero_mass, CachedDensity,
    TweedieParams,
};

fn params() -> impl Strategy<Value = TweedieParams> {
    (0.1f64..5.0, 0.3f64..2.5, 1.1f64..1.9)
        .prop_map(|(mu, phi, rho)| TweedieParams::new(mu, phi, rho))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn compound_mapping_preserves_the_mean(p in params()) {
        let c = to_compound(&p);
        prop_assert!(c.lambda > 0.0 && c.alpha_g > 0.0 && c.gamma > 0.0);
        let mu = c.lambda * c.alpha_g * c.gamma;
        prop_assert!((mu - p.mu()).abs() <= 1e-12 * p.mu().max(1.0));
    }

    #[test]
    fn zero_mass_is_a_probability(p in params()) {
        let z = zero_mass(&p);
        prop_assert!(z > 0.0 && z < 1.0);
        // And equals the CDF at 0.
        prop_assert!((cdf(0.0, &p).unwrap() - z).abs() < 1e-15);
    }

    #[test]
    fn cdf_is_monotone_in_x(p in params(), a in 0.01f64..6.0, b in 0.01f64..6.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let mut cache = CachedDensity::new(&p);
        let cl = cache.cdf(lo).unwrap();
        let ch = cache.cdf(hi).unwrap();
        prop_assert!(cl <= ch + 1e-12, "cdf({lo}) = {cl} > cdf({hi}) = {ch}");
        prop_assert!((0.0..=1.0 + 1e-9).contains(&cl));
    }

    #[test]
    fn quantile_inverts_the_cdf(p in params(), q in 0.05f64..0.99) {
        let mut cache = CachedDensity::new(&p);
        let x = cache.quantile(q).unwrap();
        prop_assert!(x >= 0.0);
        let c = cache.cdf(x).unwrap();
        if x == 0.0 {
            // Inside the atom: CDF(0) = P(0) ≥ q.
            prop_assert!(c >= q - 1e-6);
        } else {
            prop_assert!((c - q).abs() < 1e-4, "cdf(quantile({q})) = {c}");
        }
    }

    #[test]
    fn exact_density_zero_branch_matches_atom(p in params()) {
        let ld0 = log_density_exact(0.0, &p, 1e-12).unwrap();
        prop_assert!((ld0 - zero_mass(&p).ln()).abs() < 1e-12);
        let s0 = log_density_surrogate(0.0, &p).unwrap();
        prop_assert!((s0 - ld0).abs() < 1e-12);
    }

    /// Lower-bound property restricted to peak index ≥ 1, where it holds
    /// (the single-term approximation overshoots below index 1).
    #[test]
    fn surrogate_bounds_exact_at_high_peak_index(p in params(), x_raw in 0.2f64..8.0) {
        let (phi, rho) = (p.phi(), p.rho());
        // Scale x up until j_max = x^(2−ρ)/((2−ρ)φ) ≥ 1.
        let x_min = ((2.0 - rho) * phi).powf(1.0 / (2.0 - rho));
        let x = x_raw.max(x_min * 1.001);
        let s = log_density_surrogate(x, &p).unwrap();
        let e = log_density_exact(x, &p, 1e-12).unwrap();
        prop_assert!(s <= e + 1e-9, "surrogate {s} > exact {e} at x = {x}");
    }

    #[test]
    fn variance_identity_holds(p in params()) {
        prop_assert!((p.variance() - p.phi() * p.mu().powf(p.rho())).abs() < 1e-15);
    }
}
