//! Error-function family and the odd/even decomposition functions used by
//! every closed-form exit-time expression.
//!
//! All four decomposition functions are evaluated from their Maclaurin
//! series. Every series here has terms of a single sign for a given `x`
//! (odd powers carry the sign of `x`), so there is no cancellation; the
//! terms grow until `n ~ x²` and then decay factorially. Summation is
//! compensated because the growing phase otherwise costs trailing digits.
//!
//! | function | series                                                     | parity |
//! |----------|------------------------------------------------------------|--------|
//! | `phi1`   | `Σ x^(2n+1) / (n! (2n+1))`                                 | odd    |
//! | `psi1`   | `Σ 2^n x^(2n+2) / ((2n+1)!! (n+1))`                        | even   |
//! | `phi2`   | `Σ x^(2n+3) / ((n+1)! (2n+3)) · Σ_{k≤n} 1/(2k+1)`          | odd    |
//! | `psi2`   | `Σ 2^n x^(2n+4) / ((2n+3)!! (n+2)) · Σ_{k≤n} 1/(k+1)`      | even   |
//!
//! The domain bound is enforced on the argument actually fed to the series;
//! beyond it `e^{x²}` overflows long before the series stops converging, so
//! values are refused instead of returned inaccurate.

use std::f64::consts::{LN_2, PI};

use thiserror::Error;

use crate::numeric::NeumaierSum;

const SQRT_PI: f64 = 1.772_453_850_905_516;
const TWO_OVER_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpecialFnError {
    #[error("{function}: argument {x} outside the supported domain |x| <= {bound}")]
    Domain {
        function: &'static str,
        x: f64,
        bound: f64,
    },
    #[error("{function}: series did not converge at x = {x} within {terms} terms")]
    Convergence {
        function: &'static str,
        x: f64,
        terms: usize,
    },
    #[error("invalid series configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, SpecialFnError>;

/// Truncation rule shared by all series in this module.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesConfig {
    /// Stop once `|term| <= rel_tol * |partial sum|`.
    pub rel_tol: f64,
    pub max_terms: usize,
    /// Largest `|x|` accepted by the series (in the function's own argument).
    pub domain_bound: f64,
}

impl SeriesConfig {
    /// Defaults for `erf`/`erfi`/`erfid`.
    pub const ERF_FAMILY: SeriesConfig = SeriesConfig {
        rel_tol: 1e-14,
        max_terms: 300,
        domain_bound: 8.0,
    };

    /// Defaults for `phi1`, `psi1`, `phi2`, `psi2`. The bound admits the
    /// deep stop-loss `l = -10` (series argument `-10/√2 ≈ -7.07`).
    pub const DECOMPOSITION: SeriesConfig = SeriesConfig {
        rel_tol: 1e-14,
        max_terms: 300,
        domain_bound: 8.0,
    };

    pub fn new(rel_tol: f64, max_terms: usize, domain_bound: f64) -> Result<Self> {
        if !(rel_tol > 0.0 && rel_tol < 1e-6) {
            return Err(SpecialFnError::InvalidConfig(format!(
                "rel_tol must lie in (0, 1e-6), got {rel_tol}"
            )));
        }
        if max_terms < 50 {
            return Err(SpecialFnError::InvalidConfig(format!(
                "max_terms must be at least 50, got {max_terms}"
            )));
        }
        if !(domain_bound > 0.0 && domain_bound.is_finite()) {
            return Err(SpecialFnError::InvalidConfig(format!(
                "domain_bound must be positive and finite, got {domain_bound}"
            )));
        }
        Ok(Self {
            rel_tol,
            max_terms,
            domain_bound,
        })
    }

    fn check(&self, function: &'static str, x: f64) -> Result<()> {
        if x.is_nan() || x.abs() > self.domain_bound {
            return Err(SpecialFnError::Domain {
                function,
                x,
                bound: self.domain_bound,
            });
        }
        Ok(())
    }
}

impl Default for SeriesConfig {
    fn default() -> Self {
        Self::DECOMPOSITION
    }
}

/// Sums `Σ_n term(n)` where `term` is produced by a stateful generator,
/// stopping on the relative-tolerance rule.
fn sum_series<F>(function: &'static str, x: f64, cfg: &SeriesConfig, mut next_term: F) -> Result<f64>
where
    F: FnMut(usize) -> f64,
{
    let mut acc = NeumaierSum::default();
    for n in 0..cfg.max_terms {
        let term = next_term(n);
        acc.add(term);
        let sum = acc.value();
        if term.abs() <= cfg.rel_tol * sum.abs() {
            return Ok(sum);
        }
    }
    Err(SpecialFnError::Convergence {
        function,
        x,
        terms: cfg.max_terms,
    })
}

/// `φ₁(x) = ∫₀ˣ e^{t²} dt`.
pub fn phi1_with(x: f64, cfg: &SeriesConfig) -> Result<f64> {
    cfg.check("phi1", x)?;
    let x2 = x * x;
    // a_n = x^(2n+1) / n!
    let mut a = x;
    sum_series("phi1", x, cfg, |n| {
        let term = a / (2 * n + 1) as f64;
        a *= x2 / (n + 1) as f64;
        term
    })
}

/// `ψ₁(x) = 2 ∫₀ˣ e^{t²} ∫₀ᵗ e^{-u²} du dt`.
pub fn psi1_with(x: f64, cfg: &SeriesConfig) -> Result<f64> {
    cfg.check("psi1", x)?;
    let x2 = x * x;
    // b_n = 2^n x^(2n+2) / (2n+1)!!
    let mut b = x2;
    sum_series("psi1", x, cfg, |n| {
        let term = b / (n + 1) as f64;
        b *= 2.0 * x2 / (2 * n + 3) as f64;
        term
    })
}

/// `φ₂(x) = 2 ∫₀ˣ e^{t²} ∫₀ᵗ e^{-u²} φ₁(u) du dt`.
pub fn phi2_with(x: f64, cfg: &SeriesConfig) -> Result<f64> {
    cfg.check("phi2", x)?;
    let x2 = x * x;
    // c_n = x^(2n+3) / (n+1)!, h_n = Σ_{k<=n} 1/(2k+1)
    let mut c = x * x2;
    let mut h = 0.0;
    sum_series("phi2", x, cfg, |n| {
        h += 1.0 / (2 * n + 1) as f64;
        let term = c / (2 * n + 3) as f64 * h;
        c *= x2 / (n + 2) as f64;
        term
    })
}

/// `ψ₂(x) = 4 ∫₀ˣ e^{t²} ∫₀ᵗ e^{-u²} ∫₀ᵘ e^{s²} ∫₀ˢ e^{-v²} dv ds du dt`.
pub fn psi2_with(x: f64, cfg: &SeriesConfig) -> Result<f64> {
    cfg.check("psi2", x)?;
    let x2 = x * x;
    // e_n = 2^n x^(2n+4) / (2n+3)!!, g_n = Σ_{k<=n} 1/(k+1)
    let mut e = x2 * x2 / 3.0;
    let mut g = 0.0;
    sum_series("psi2", x, cfg, |n| {
        g += 1.0 / (n + 1) as f64;
        let term = e / (n + 2) as f64 * g;
        e *= 2.0 * x2 / (2 * n + 5) as f64;
        term
    })
}

pub fn phi1(x: f64) -> Result<f64> {
    phi1_with(x, &SeriesConfig::DECOMPOSITION)
}

pub fn psi1(x: f64) -> Result<f64> {
    psi1_with(x, &SeriesConfig::DECOMPOSITION)
}

pub fn phi2(x: f64) -> Result<f64> {
    phi2_with(x, &SeriesConfig::DECOMPOSITION)
}

pub fn psi2(x: f64) -> Result<f64> {
    psi2_with(x, &SeriesConfig::DECOMPOSITION)
}

/// Error function, from the positive-term expansion
/// `erf(x) = (2/√π) e^{-x²} Σ 2^n x^(2n+1) / (2n+1)!!`.
pub fn erf_with(x: f64, cfg: &SeriesConfig) -> Result<f64> {
    cfg.check("erf", x)?;
    let x2 = x * x;
    let mut g = x;
    let s = sum_series("erf", x, cfg, |n| {
        let term = g;
        g *= 2.0 * x2 / (2 * n + 3) as f64;
        term
    })?;
    Ok(TWO_OVER_SQRT_PI * (-x2).exp() * s)
}

/// Imaginary error function `erfi(x) = (2/√π) ∫₀ˣ e^{t²} dt = (2/√π) φ₁(x)`.
pub fn erfi_with(x: f64, cfg: &SeriesConfig) -> Result<f64> {
    cfg.check("erfi", x)?;
    let inner = SeriesConfig {
        domain_bound: f64::INFINITY,
        ..*cfg
    };
    Ok(TWO_OVER_SQRT_PI * phi1_with(x, &inner)?)
}

/// `Erfid(x, y) = erfi(x/√2) − erfi(y/√2)`.
pub fn erfid_with(x: f64, y: f64, cfg: &SeriesConfig) -> Result<f64> {
    if x == y {
        cfg.check("erfid", x / std::f64::consts::SQRT_2)?;
        return Ok(0.0);
    }
    let s = std::f64::consts::FRAC_1_SQRT_2;
    Ok(erfi_with(x * s, cfg)? - erfi_with(y * s, cfg)?)
}

pub fn erf(x: f64) -> Result<f64> {
    erf_with(x, &SeriesConfig::ERF_FAMILY)
}

pub fn erfi(x: f64) -> Result<f64> {
    erfi_with(x, &SeriesConfig::ERF_FAMILY)
}

pub fn erfid(x: f64, y: f64) -> Result<f64> {
    erfid_with(x, y, &SeriesConfig::ERF_FAMILY)
}

/// `(χ₁(z), χ₂(z))` assembled from the odd/even parts:
/// `χ₁ = √π φ₁ + ψ₁`, `χ₂ = √π (φ₂ − ln2 · φ₁) + ψ₂`.
///
/// Test hook for the decomposition; the analytics never call it.
pub fn chi_decomposition_check(z: f64) -> Result<(f64, f64)> {
    let p1 = phi1(z)?;
    let chi1 = SQRT_PI * p1 + psi1(z)?;
    let chi2 = SQRT_PI * (phi2(z)? - LN_2 * p1) + psi2(z)?;
    Ok((chi1, chi2))
}

/// Value of the constant triple integral appearing in the `χ₂` split,
/// `-(√π/4) ln 2`.
pub fn decomposition_constant() -> f64 {
    -(PI.sqrt() / 4.0) * LN_2
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs().max(1e-300)
    }

    #[test]
    fn all_vanish_at_origin() {
        assert_eq!(erf(0.0).unwrap(), 0.0);
        assert_eq!(erfi(0.0).unwrap(), 0.0);
        assert_eq!(phi1(0.0).unwrap(), 0.0);
        assert_eq!(psi1(0.0).unwrap(), 0.0);
        assert_eq!(phi2(0.0).unwrap(), 0.0);
        assert_eq!(psi2(0.0).unwrap(), 0.0);
        assert_eq!(chi_decomposition_check(0.0).unwrap().0, 0.0);
        for a in [-3.0, -0.4, 0.0, 1.7] {
            assert_eq!(erfid(a, a).unwrap(), 0.0);
        }
    }

    #[test]
    fn reference_values() {
        // (2/√π)∫₀¹ e^{t²} dt and ∫₀¹ e^{t²} dt, 30-digit quadrature
        assert!(close(erfi(1.0).unwrap(), 1.650_425_758_797_542_8, 1e-14));
        assert!(close(phi1(1.0).unwrap(), 1.462_651_745_907_181_6, 1e-14));
        // √π ∫₀¹ e^{t²} erf(t) dt
        assert!(close(psi1(1.0).unwrap(), 1.445_245_613_388_347_2, 1e-14));
        assert!(close(erf(1.0).unwrap(), 0.842_700_792_949_714_9, 1e-14));
        assert!(close(erf(-2.5).unwrap(), -0.999_593_047_982_555, 1e-14));
    }

    #[test]
    fn cross_identity_with_erfi() {
        for i in -40..=40 {
            let x = i as f64 * 0.1;
            let lhs = phi1(x).unwrap();
            let rhs = SQRT_PI / 2.0 * erfi(x).unwrap();
            assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()), "x = {x}");
        }
    }

    #[test]
    fn erfid_antisymmetric() {
        let a = erfid(0.3, -1.2).unwrap();
        let b = erfid(-1.2, 0.3).unwrap();
        assert_eq!(a, -b);
    }

    #[test]
    fn domain_guard() {
        assert!(matches!(erfi(8.5), Err(SpecialFnError::Domain { .. })));
        assert!(matches!(phi2(-9.0), Err(SpecialFnError::Domain { .. })));
        assert!(matches!(psi1(f64::NAN), Err(SpecialFnError::Domain { .. })));
        // the bound itself still converges within the default term cap
        assert!(phi2(8.0).unwrap().is_finite());
        assert!(psi2(-8.0).unwrap().is_finite());
        assert!(erf(8.0).unwrap() <= 1.0);
    }

    #[test]
    fn convergence_error_when_term_cap_too_small() {
        let cfg = SeriesConfig::new(1e-14, 50, 8.0).unwrap();
        assert!(matches!(
            phi1_with(7.5, &cfg),
            Err(SpecialFnError::Convergence { .. })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(SeriesConfig::new(1e-3, 300, 8.0).is_err());
        assert!(SeriesConfig::new(1e-14, 10, 8.0).is_err());
        assert!(SeriesConfig::new(1e-14, 300, -1.0).is_err());
    }
}
