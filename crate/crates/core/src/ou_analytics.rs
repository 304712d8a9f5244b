//! Closed-form exit probabilities, expected First-Exit-Times (FET), expected
//! First-Passage-Times (FPT) and expected trade length for the zero-mean OU
//! process `dX = -κ X dt + σ dB`.
//!
//! Everything is computed in rescaled units: levels in multiples of the
//! stationary deviation `Σ = σ/√(2κ)` and times in multiples of `θ = 1/κ`.
//! In these units the dynamics are parameter-free; physical units only enter
//! through [`OuParams`] at the boundary.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::specialfn::{self, SpecialFnError};

const SQRT_PI: f64 = 1.772_453_850_905_516;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalyticsError {
    #[error("invalid OU parameters: {0}")]
    InvalidParams(String),
    #[error("band ordering violated: need l <= d <= u and l < u, got l = {l}, d = {d}, u = {u}")]
    Ordering { l: f64, d: f64, u: f64 },
    #[error(transparent)]
    Special(#[from] SpecialFnError),
}

pub type Result<T> = std::result::Result<T, AnalyticsError>;

/// OU triple `(κ, η, σ)` for `dX = κ(η − X) dt + σ dB`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuParams {
    pub kappa: f64,
    pub eta: f64,
    pub sigma: f64,
}

impl OuParams {
    pub fn new(kappa: f64, eta: f64, sigma: f64) -> Result<Self> {
        if !(kappa > 0.0 && kappa.is_finite()) {
            return Err(AnalyticsError::InvalidParams(format!("kappa must be > 0, got {kappa}")));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(AnalyticsError::InvalidParams(format!("sigma must be > 0, got {sigma}")));
        }
        if !eta.is_finite() {
            return Err(AnalyticsError::InvalidParams(format!("eta must be finite, got {eta}")));
        }
        Ok(Self { kappa, eta, sigma })
    }

    /// Characteristic time `θ = 1/κ`.
    pub fn theta(&self) -> f64 {
        1.0 / self.kappa
    }

    /// Stationary standard deviation `Σ = σ/√(2κ)`.
    pub fn stationary_sd(&self) -> f64 {
        self.sigma / (2.0 * self.kappa).sqrt()
    }

    /// Log-price level to Σ units around `η`.
    pub fn rescale(&self, level: f64) -> f64 {
        (level - self.eta) / self.stationary_sd()
    }

    /// Inverse of [`OuParams::rescale`].
    pub fn unscale(&self, sigma_units: f64) -> f64 {
        self.eta + sigma_units * self.stationary_sd()
    }
}

/// Stop-loss `l`, entry `d` and exit `u` in Σ units.
///
/// `d` may coincide with either end (degenerate channel); the analytics
/// then return exact zeros / unit probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub l: f64,
    pub d: f64,
    pub u: f64,
}

impl Channel {
    pub fn new(l: f64, d: f64, u: f64) -> Result<Self> {
        let finite = l.is_finite() && d.is_finite() && u.is_finite();
        if !finite || !(l <= d && d <= u && l < u) {
            return Err(AnalyticsError::Ordering { l, d, u });
        }
        Ok(Self { l, d, u })
    }

    /// The same channel with the entry band moved.
    pub fn with_entry(&self, d: f64) -> Result<Self> {
        Self::new(self.l, d, self.u)
    }
}

/// Series values needed at one level (argument `x/√2`).
#[derive(Debug, Clone, Copy)]
struct LevelTerms {
    phi1: f64,
    psi1: f64,
    phi2: f64,
}

impl LevelTerms {
    fn at(level: f64) -> Result<Self> {
        let x = level * std::f64::consts::FRAC_1_SQRT_2;
        Ok(Self {
            phi1: specialfn::phi1(x)?,
            psi1: specialfn::psi1(x)?,
            phi2: specialfn::phi2(x)?,
        })
    }
}

/// `ξ(a, b)` with `a > b`: the building block of both conditional FETs.
fn xi(a: &LevelTerms, b: &LevelTerms) -> f64 {
    (a.phi2 - b.phi2 - a.psi1 * b.phi1 + b.psi1 * a.phi1) / (a.phi1 - b.phi1)
}

/// Probability that the process started at `d` leaves `(l, u)` through `u`:
/// `Erfid(d, l) / Erfid(u, l)`.
pub fn exit_prob_up(ch: &Channel) -> Result<f64> {
    if ch.d == ch.u {
        return Ok(1.0);
    }
    if ch.d == ch.l {
        return Ok(0.0);
    }
    Ok(specialfn::erfid(ch.d, ch.l)? / specialfn::erfid(ch.u, ch.l)?)
}

pub fn exit_prob_down(ch: &Channel) -> Result<f64> {
    if ch.d == ch.u {
        return Ok(0.0);
    }
    if ch.d == ch.l {
        return Ok(1.0);
    }
    Ok(specialfn::erfid(ch.u, ch.d)? / specialfn::erfid(ch.u, ch.l)?)
}

/// `E[τ⁺ₑ]`: expected exit time conditional on leaving through `u`.
pub fn expected_fet_up(ch: &Channel, theta: f64) -> Result<f64> {
    if ch.d == ch.u || ch.d == ch.l {
        return Ok(0.0);
    }
    let (l, d, u) = (LevelTerms::at(ch.l)?, LevelTerms::at(ch.d)?, LevelTerms::at(ch.u)?);
    Ok(theta * (xi(&u, &l) - xi(&d, &l)))
}

/// `E[τ⁻ₑ]`: expected exit time conditional on leaving through `l`.
pub fn expected_fet_down(ch: &Channel, theta: f64) -> Result<f64> {
    if ch.d == ch.u || ch.d == ch.l {
        return Ok(0.0);
    }
    let (l, d, u) = (LevelTerms::at(ch.l)?, LevelTerms::at(ch.d)?, LevelTerms::at(ch.u)?);
    Ok(theta * (xi(&u, &l) - xi(&u, &d)))
}

/// Expected first-passage time from `from` to `to` (Σ units).
///
/// Upward: `θ{√π[φ₁(to/√2) − φ₁(from/√2)] + [ψ₁(to/√2) − ψ₁(from/√2)]}`;
/// downward passages use the mirrored levels `−from → −to`.
pub fn expected_fpt(from: f64, to: f64, theta: f64) -> Result<f64> {
    if from == to {
        return Ok(0.0);
    }
    let (a, b) = if from < to { (from, to) } else { (-from, -to) };
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let (a, b) = (a * s, b * s);
    let phi = specialfn::phi1(b)? - specialfn::phi1(a)?;
    let psi = specialfn::psi1(b)? - specialfn::psi1(a)?;
    Ok(theta * (SQRT_PI * phi + psi))
}

/// Expected trade length `θ π Erfid(d,l) Erfid(u,d) / Erfid(u,l)`.
pub fn expected_trade_length(ch: &Channel, theta: f64) -> Result<f64> {
    let num = specialfn::erfid(ch.d, ch.l)? * specialfn::erfid(ch.u, ch.d)?;
    Ok(theta * std::f64::consts::PI * num / specialfn::erfid(ch.u, ch.l)?)
}

/// Everything the strategy layer needs about one channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitStats {
    pub p_plus: f64,
    pub p_minus: f64,
    pub e_tau_plus_exit: f64,
    pub e_tau_minus_exit: f64,
    /// Passage `l ⇝ d` after a stop-loss exit.
    pub e_fpt_up: f64,
    /// Passage `u ⇝ d` after a profitable exit.
    pub e_fpt_down: f64,
    pub e_trade_length: f64,
}

impl ExitStats {
    /// `p⁺(E[τ⁺ₑ] + E[u⇝d]) + p⁻(E[τ⁻ₑ] + E[l⇝d])`, the trade length
    /// assembled from its pieces.
    pub fn assembled_trade_length(&self) -> f64 {
        self.p_plus * (self.e_tau_plus_exit + self.e_fpt_down)
            + self.p_minus * (self.e_tau_minus_exit + self.e_fpt_up)
    }

    /// Expected trade length in the positive scenario, `E[τ⁺]`.
    pub fn e_trade_length_plus(&self) -> f64 {
        self.e_tau_plus_exit + self.e_fpt_down
    }

    /// Expected trade length in the negative scenario, `E[τ⁻]`.
    pub fn e_trade_length_minus(&self) -> f64 {
        self.e_tau_minus_exit + self.e_fpt_up
    }

    /// Multiplies all times by `factor` (e.g. to move between θ units and
    /// physical time).
    pub fn scale_times(&self, factor: f64) -> Self {
        Self {
            e_tau_plus_exit: self.e_tau_plus_exit * factor,
            e_tau_minus_exit: self.e_tau_minus_exit * factor,
            e_fpt_up: self.e_fpt_up * factor,
            e_fpt_down: self.e_fpt_down * factor,
            e_trade_length: self.e_trade_length * factor,
            ..*self
        }
    }
}

/// All exit statistics for a channel, sharing the series evaluations.
pub fn exit_stats(ch: &Channel, theta: f64) -> Result<ExitStats> {
    let p_plus = exit_prob_up(ch)?;
    let p_minus = exit_prob_down(ch)?;
    let (fet_up, fet_down) = if ch.d == ch.u || ch.d == ch.l {
        (0.0, 0.0)
    } else {
        let (l, d, u) = (LevelTerms::at(ch.l)?, LevelTerms::at(ch.d)?, LevelTerms::at(ch.u)?);
        let xi_ul = xi(&u, &l);
        (theta * (xi_ul - xi(&d, &l)), theta * (xi_ul - xi(&u, &d)))
    };
    Ok(ExitStats {
        p_plus,
        p_minus,
        e_tau_plus_exit: fet_up,
        e_tau_minus_exit: fet_down,
        e_fpt_up: expected_fpt(ch.l, ch.d, theta)?,
        e_fpt_down: expected_fpt(ch.u, ch.d, theta)?,
        e_trade_length: expected_trade_length(ch, theta)?,
    })
}

/// Exit statistics for physical log-price levels `stop < entry < target`;
/// times come back in the time unit of `κ`.
pub fn exit_stats_physical(params: &OuParams, stop: f64, entry: f64, target: f64) -> Result<ExitStats> {
    let ch = Channel::new(params.rescale(stop), params.rescale(entry), params.rescale(target))?;
    exit_stats(&ch, params.theta())
}

#[cfg(test)]
mod tests {
    use super::*;

    const REF: (f64, f64, f64) = (-1.96, -0.87, 0.58);

    fn reference() -> Channel {
        Channel::new(REF.0, REF.1, REF.2).unwrap()
    }

    #[test]
    fn rescale_round_trip_and_reference_sigma() {
        let p = OuParams::new(18.51, -0.0094, 0.0893).unwrap();
        assert_eq!(p.rescale(p.eta), 0.0);
        assert!((p.rescale(p.eta + p.stationary_sd()) - 1.0).abs() < 1e-15);
        assert!((p.unscale(p.rescale(0.0123)) - 0.0123).abs() < 1e-17);
        // Σ ≈ 1.47 %
        assert!((p.stationary_sd() - 0.014_68).abs() < 5e-5);
        assert!((p.theta() * 18.51 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(OuParams::new(0.0, 0.0, 1.0).is_err());
        assert!(OuParams::new(1.0, 0.0, -1.0).is_err());
        assert!(OuParams::new(1.0, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn ordering_violation() {
        assert!(matches!(Channel::new(0.0, -1.0, 1.0), Err(AnalyticsError::Ordering { .. })));
        assert!(Channel::new(1.0, 1.0, 1.0).is_err());
        assert!(Channel::new(-1.0, 2.0, 1.0).is_err());
    }

    #[test]
    fn symmetric_channel() {
        for a in [0.3, 1.0, 2.5] {
            let ch = Channel::new(-a, 0.0, a).unwrap();
            assert!((exit_prob_up(&ch).unwrap() - 0.5).abs() < 1e-15);
            let up = expected_fet_up(&ch, 1.0).unwrap();
            let down = expected_fet_down(&ch, 1.0).unwrap();
            assert!((up - down).abs() < 1e-13 * up, "a = {a}: {up} vs {down}");
        }
    }

    #[test]
    fn degenerate_channels() {
        let at_top = Channel::new(-1.0, 0.5, 0.5).unwrap();
        assert_eq!(exit_prob_up(&at_top).unwrap(), 1.0);
        assert_eq!(expected_fet_up(&at_top, 1.0).unwrap(), 0.0);
        assert_eq!(expected_trade_length(&at_top, 1.0).unwrap(), 0.0);
        let at_stop = Channel::new(-1.0, -1.0, 0.5).unwrap();
        assert_eq!(exit_prob_up(&at_stop).unwrap(), 0.0);
        assert_eq!(expected_fet_down(&at_stop, 1.0).unwrap(), 0.0);
        assert_eq!(expected_fpt(0.4, 0.4, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn boundary_limits_are_continuous() {
        let eps = 1e-7;
        let near_top = Channel::new(-1.0, 0.5 - eps, 0.5).unwrap();
        assert!(1.0 - exit_prob_up(&near_top).unwrap() < 1e-6);
        assert!(expected_fet_up(&near_top, 1.0).unwrap() < 1e-5);
        assert!(expected_trade_length(&near_top, 1.0).unwrap() < 1e-5);
        let near_stop = Channel::new(-1.0, -1.0 + eps, 0.5).unwrap();
        assert!(exit_prob_up(&near_stop).unwrap() < 1e-6);
        assert!(expected_fet_down(&near_stop, 1.0).unwrap() < 1e-5);
    }

    #[test]
    fn downward_passage_mirrors_upward() {
        let down = expected_fpt(0.58, -0.87, 1.0).unwrap();
        let up = expected_fpt(-0.58, 0.87, 1.0).unwrap();
        assert_eq!(down, up);
    }

    #[test]
    fn trade_length_identity_at_reference() {
        let s = exit_stats(&reference(), 1.0).unwrap();
        let rel = (s.assembled_trade_length() - s.e_trade_length).abs() / s.e_trade_length;
        assert!(rel < 1e-10, "rel = {rel}");
        assert!((s.p_plus + s.p_minus - 1.0).abs() < 1e-15);
        // values from an independent double-precision prototype
        assert!((s.p_plus - 0.682_220_708_365_474).abs() < 1e-12);
        assert!((s.e_tau_plus_exit - 1.069_509_817_146_6).abs() < 1e-9);
        assert!((s.e_tau_minus_exit - 0.891_075_239_415_84).abs() < 1e-9);
        assert!((s.e_trade_length - 2.749_198_836_824_99).abs() < 1e-9);
    }

    #[test]
    fn deep_stop_loss_recovers_passage_time() {
        let ch = Channel::new(-10.0, 0.0, 1.0).unwrap();
        let fet = expected_fet_up(&ch, 1.0).unwrap();
        let fpt = expected_fpt(0.0, 1.0, 1.0).unwrap();
        assert!((fet - fpt).abs() / fpt < 1e-6, "{fet} vs {fpt}");
        // trade length tends to the no-stop-loss denominator π Erfid(u, d)
        let ch = Channel::new(-10.0, -0.5, 0.5).unwrap();
        let tl = expected_trade_length(&ch, 1.0).unwrap();
        let bertram = std::f64::consts::PI * specialfn::erfid(0.5, -0.5).unwrap();
        assert!((tl - bertram).abs() / bertram < 1e-6);
    }

    #[test]
    fn scale_covariance() {
        let p = OuParams::new(18.51, -0.0094, 0.0893).unwrap();
        let sd = p.stationary_sd();
        let phys = exit_stats_physical(&p, p.eta + REF.0 * sd, p.eta + REF.1 * sd, p.eta + REF.2 * sd).unwrap();
        let unit = exit_stats(&reference(), 1.0).unwrap().scale_times(p.theta());
        assert!((phys.p_plus - unit.p_plus).abs() < 1e-12);
        assert!((phys.e_trade_length - unit.e_trade_length).abs() < 1e-12 * unit.e_trade_length);
        assert!((phys.e_tau_plus_exit - unit.e_tau_plus_exit).abs() < 1e-12 * unit.e_tau_plus_exit);
    }
}
