//! Payoffs, fair probabilities, optimal leverage and long-run return of the
//! repeated long strategy "buy at D, sell at U or at the stop-loss L", plus
//! the numerical search for the best bands at a fixed stop-loss.
//!
//! Bands are in Σ units around the stationary mean; the cost `c` is an
//! absolute log-price amount charged once per round trip. Returns are per
//! unit of the time scale of `κ`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::nelder_mead;
use crate::ou_analytics::{self, AnalyticsError, Channel, OuParams};
use crate::specialfn::{self, SpecialFnError};

/// Leverage values with `f·|v⁻|` this close to 1 are treated as ruin.
pub const RUIN_MARGIN: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StrategyError {
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
    #[error("invalid bands: {0}")]
    InvalidBands(String),
    #[error("leverage {f} ruins the investor: 1 + f·v⁻ = {factor} <= 0")]
    Ruin { f: f64, factor: f64 },
}

impl From<SpecialFnError> for StrategyError {
    fn from(e: SpecialFnError) -> Self {
        StrategyError::Analytics(e.into())
    }
}

pub type Result<T> = std::result::Result<T, StrategyError>;

/// Stop-loss, entry and exit bands (Σ units), round-trip cost and leverage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    pub l: f64,
    pub d: f64,
    pub u: f64,
    /// Round-trip transaction cost in log-price units.
    pub c: f64,
    pub f: f64,
}

impl BandSpec {
    pub fn new(l: f64, d: f64, u: f64, c: f64, f: f64) -> Result<Self> {
        if !(l < d && d < u) {
            return Err(StrategyError::InvalidBands(format!(
                "need l < d < u, got ({l}, {d}, {u})"
            )));
        }
        if !(c >= 0.0 && c.is_finite()) {
            return Err(StrategyError::InvalidBands(format!("cost must be >= 0, got {c}")));
        }
        if !(f >= 0.0 && f.is_finite()) {
            return Err(StrategyError::InvalidBands(format!("leverage must be >= 0, got {f}")));
        }
        Ok(Self { l, d, u, c, f })
    }

    pub fn channel(&self) -> Result<Channel> {
        Ok(Channel::new(self.l, self.d, self.u)?)
    }

    pub fn with_leverage(&self, f: f64) -> Self {
        Self { f, ..*self }
    }

    /// The bands a short-side trader uses on the same process: stop at
    /// `−l`, entry at `−d`, exit at `−u`.
    pub fn mirrored(&self) -> ShortBands {
        ShortBands {
            stop: -self.l,
            entry: -self.d,
            target: -self.u,
            c: self.c,
            f: self.f,
        }
    }
}

/// Short-side bands in Σ units: sell at `entry > 0`, buy back at
/// `target < entry` (profit) or at `stop > entry` (loss).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShortBands {
    pub stop: f64,
    pub entry: f64,
    pub target: f64,
    pub c: f64,
    pub f: f64,
}

impl ShortBands {
    /// Under `X → −X` the short trade is a long trade on the reflected
    /// process with bands `(−stop, −entry, −target)`.
    pub fn as_reflected_long(&self) -> Result<BandSpec> {
        BandSpec::new(-self.stop, -self.entry, -self.target, self.c, self.f)
    }
}

/// Fractional wealth changes of a winning and a losing trade at `f = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Payoffs {
    pub v_plus: f64,
    pub v_minus: f64,
}

/// `v⁺ = e^{(u−d)Σ−c} − 1`, `v⁻ = e^{(l−d)Σ−c} − 1`.
pub fn payoffs(bands: &BandSpec, stationary_sd: f64) -> Payoffs {
    Payoffs {
        v_plus: ((bands.u - bands.d) * stationary_sd - bands.c).exp_m1(),
        v_minus: ((bands.l - bands.d) * stationary_sd - bands.c).exp_m1(),
    }
}

/// Fair probability `q⁺ = v⁻ / (v⁻ − v⁺)`: the exit-up probability that
/// makes the per-trade game zero-expectation.
pub fn fair_probability(p: &Payoffs) -> f64 {
    p.v_minus / (p.v_minus - p.v_plus)
}

/// `f* = −(p⁺v⁺ + p⁻v⁻)/(v⁺v⁻)` when `p⁺ > q⁺`, else 0.
pub fn optimal_leverage(p_plus: f64, v_plus: f64, v_minus: f64) -> f64 {
    if !(v_plus > 0.0 && v_minus < 0.0) {
        return 0.0;
    }
    let q_plus = v_minus / (v_minus - v_plus);
    if p_plus <= q_plus {
        return 0.0;
    }
    let f = -(p_plus * v_plus + (1.0 - p_plus) * v_minus) / (v_plus * v_minus);
    f.max(0.0)
}

/// `(ln(1 + f v⁺), ln(1 + f v⁻))`.
pub fn log_payoffs(f: f64, p: &Payoffs) -> Result<(f64, f64)> {
    let down = 1.0 + f * p.v_minus;
    if down <= 0.0 {
        return Err(StrategyError::Ruin { f, factor: down });
    }
    Ok(((f * p.v_plus).ln_1p(), (f * p.v_minus).ln_1p()))
}

/// Long-run return in the explicit OU form
/// `(1/(πθ)) [ln(1+f v⁺)/Erfid(u,d) + ln(1+f v⁻)/Erfid(d,l)]`.
pub fn long_run_return(bands: &BandSpec, params: &OuParams) -> Result<f64> {
    bands.channel()?;
    let pay = payoffs(bands, params.stationary_sd());
    let (a_plus, a_minus) = log_payoffs(bands.f, &pay)?;
    if bands.f == 0.0 {
        return Ok(0.0);
    }
    let up = specialfn::erfid(bands.u, bands.d)?;
    let down = specialfn::erfid(bands.d, bands.l)?;
    Ok((a_plus / up + a_minus / down) / (std::f64::consts::PI * params.theta()))
}

/// Long-run return assembled from exit probabilities and expected trade
/// length, `(p⁺α⁺ + p⁻α⁻) / E[trade length]`; valid for any continuous
/// dynamics once those pieces are known.
pub fn long_run_return_general(bands: &BandSpec, params: &OuParams) -> Result<f64> {
    let ch = bands.channel()?;
    let pay = payoffs(bands, params.stationary_sd());
    let (a_plus, a_minus) = log_payoffs(bands.f, &pay)?;
    let p_plus = ou_analytics::exit_prob_up(&ch)?;
    let tl = ou_analytics::expected_trade_length(&ch, params.theta())?;
    Ok((p_plus * a_plus + (1.0 - p_plus) * a_minus) / tl)
}

/// Kullback–Leibler divergence `p⁺ln(p⁺/q⁺) + p⁻ln(p⁻/q⁻)`, zero when the
/// game is not favourable.
pub fn kl_divergence(p_plus: f64, q_plus: f64) -> f64 {
    if p_plus <= q_plus {
        return 0.0;
    }
    let p_minus = 1.0 - p_plus;
    let q_minus = 1.0 - q_plus;
    let mut kl = p_plus * (p_plus / q_plus).ln();
    if p_minus > 0.0 {
        kl += p_minus * (p_minus / q_minus).ln();
    }
    kl
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyEvaluation {
    pub v_plus: f64,
    pub v_minus: f64,
    pub p_plus: f64,
    pub p_minus: f64,
    pub q_plus: f64,
    pub q_minus: f64,
    pub alpha_plus: f64,
    pub alpha_minus: f64,
    pub f_star: f64,
    /// Long-run return at the leverage in the band spec.
    pub mu: f64,
    /// Long-run return at `f*` (KL divergence over trade length).
    pub mu_at_f_star: f64,
    pub e_trade_length: f64,
}

pub fn evaluate(bands: &BandSpec, params: &OuParams) -> Result<StrategyEvaluation> {
    let ch = bands.channel()?;
    let pay = payoffs(bands, params.stationary_sd());
    let (alpha_plus, alpha_minus) = log_payoffs(bands.f, &pay)?;
    let p_plus = ou_analytics::exit_prob_up(&ch)?;
    let q_plus = fair_probability(&pay);
    let e_trade_length = ou_analytics::expected_trade_length(&ch, params.theta())?;
    let f_star = optimal_leverage(p_plus, pay.v_plus, pay.v_minus);
    Ok(StrategyEvaluation {
        v_plus: pay.v_plus,
        v_minus: pay.v_minus,
        p_plus,
        p_minus: 1.0 - p_plus,
        q_plus,
        q_minus: 1.0 - q_plus,
        alpha_plus,
        alpha_minus,
        f_star,
        mu: long_run_return(bands, params)?,
        mu_at_f_star: kl_divergence(p_plus, q_plus) / e_trade_length,
        e_trade_length,
    })
}

/// No-stop-loss limit `ln[1 + f(e^{(u−d)Σ−c} − 1)] / (πθ Erfid(u,d))`.
pub fn bertram_return(d: f64, u: f64, f: f64, c: f64, params: &OuParams) -> Result<f64> {
    if !(d < u) {
        return Err(StrategyError::InvalidBands(format!("need d < u, got ({d}, {u})")));
    }
    let v_plus = ((u - d) * params.stationary_sd() - c).exp_m1();
    let a_plus = (f * v_plus).ln_1p();
    Ok(a_plus / (std::f64::consts::PI * params.theta() * specialfn::erfid(u, d)?))
}

/// First-order maximum viable cost for given bands (Σ units):
/// `c̄ = p⁺(u − l) − (d − l)`.
pub fn viable_cost_bound(l: f64, d: f64, u: f64) -> Result<f64> {
    let ch = Channel::new(l, d, u)?;
    Ok(ou_analytics::exit_prob_up(&ch)? * (u - l) - (d - l))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViableCost {
    /// `c*` in Σ units.
    pub c_star: f64,
    pub d: f64,
    pub u: f64,
}

/// `c*(l) = max_{l<d<u} c̄(d, u; l)`: the largest cost (Σ units) for which
/// some bands still give a favourable game.
pub fn max_viable_cost(l: f64) -> Result<ViableCost> {
    if !(l < 0.0 && l.is_finite()) {
        return Err(StrategyError::InvalidBands(format!("stop-loss must be negative, got {l}")));
    }
    let u_max = 2.0 * l.abs() + 1.0;
    let n = 120;
    let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
    for i in 0..n {
        let d = l + (-l) * (i as f64 + 0.5) / n as f64;
        for j in 0..n {
            let u = d + (u_max - d) * (j as f64 + 0.5) / n as f64;
            let v = viable_cost_bound(l, d, u)?;
            if v > best.0 {
                best = (v, d, u);
            }
        }
    }
    let objective = |p: &[f64]| -> f64 {
        if !(l < p[0] && p[0] < p[1] && p[1] <= u_max) {
            return f64::INFINITY;
        }
        viable_cost_bound(l, p[0], p[1]).map(|v| -v).unwrap_or(f64::INFINITY)
    };
    let step = [(-l) / n as f64, (u_max - l) / n as f64];
    let (x, fx) = nelder_mead(objective, &[best.1, best.2], &step, 1e-10, 1e-16, 5_000);
    let (c_star, d, u) = if -fx >= best.0 { (-fx, x[0], x[1]) } else { best };
    Ok(ViableCost { c_star, d, u })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LeverageMode {
    Fixed(f64),
    Optimal,
}

/// Tie-break among grid cells whose objective agrees within `1e-12`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum TieBreak {
    /// Smallest `|d|`, then smallest `u`.
    #[default]
    SmallestEntryThenExit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    /// Grid points per axis for the seeding phase.
    pub resolution: usize,
    /// Refinement tolerance on `(d, u)`.
    pub tolerance: f64,
    pub tie_break: TieBreak,
    /// Upper limit for `u` in Σ units.
    pub u_max: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            resolution: 200,
            tolerance: 1e-6,
            tie_break: TieBreak::SmallestEntryThenExit,
            u_max: 3.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 50 {
            return Err(StrategyError::InvalidBands(format!(
                "optimizer resolution must be >= 50, got {}",
                self.resolution
            )));
        }
        if !(self.tolerance > 0.0) || !(self.u_max > 0.0) {
            return Err(StrategyError::InvalidBands(
                "optimizer tolerance and u_max must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandOptimum {
    pub l: f64,
    pub d: f64,
    pub u: f64,
    /// Leverage used at the optimum (the fixed value or `f*(d, u)`).
    pub f: f64,
    pub mu: f64,
    /// True when no admissible bands give a positive return.
    pub no_trade: bool,
    /// True when the optimum sits on the search-box edge (`d = 0` or `u = u_max`).
    pub hits_search_box: bool,
    /// Central-difference gradient of `μ` in `(d, u)` at the optimum.
    pub gradient: [f64; 2],
}

/// Objective for the band search. `None` marks inadmissible points.
fn band_objective(l: f64, d: f64, u: f64, c: f64, params: &OuParams, mode: LeverageMode) -> Option<(f64, f64)> {
    let sd = params.stationary_sd();
    if !(l < d && d < u) || (u - d) * sd <= c {
        return None;
    }
    let probe = BandSpec { l, d, u, c, f: 0.0 };
    let pay = payoffs(&probe, sd);
    let f = match mode {
        LeverageMode::Fixed(f) => {
            if f * pay.v_minus.abs() >= 1.0 - RUIN_MARGIN {
                return None;
            }
            f
        }
        LeverageMode::Optimal => {
            let ch = Channel::new(l, d, u).ok()?;
            let p_plus = ou_analytics::exit_prob_up(&ch).ok()?;
            optimal_leverage(p_plus, pay.v_plus, pay.v_minus)
        }
    };
    if f == 0.0 {
        return Some((0.0, 0.0));
    }
    long_run_return(&probe.with_leverage(f), params).ok().map(|mu| (mu, f))
}

/// Maximises the long-run return over `l < d ≤ 0`, `d < u ≤ u_max` with
/// `(u − d)Σ > c`: grid seeding, then simplex refinement.
///
/// The grid is evaluated in parallel; the reduction runs in index order so
/// the result does not depend on the worker count.
pub fn optimize_bands(
    l: f64,
    c: f64,
    params: &OuParams,
    mode: LeverageMode,
    cfg: &OptimizerConfig,
) -> Result<BandOptimum> {
    cfg.validate()?;
    if !(l < 0.0 && l.is_finite()) {
        return Err(StrategyError::InvalidBands(format!("stop-loss must be negative, got {l}")));
    }
    if let LeverageMode::Fixed(f) = mode {
        if !(f >= 0.0 && f.is_finite()) {
            return Err(StrategyError::InvalidBands(format!("leverage must be >= 0, got {f}")));
        }
    }
    let n = cfg.resolution;
    let u_max = cfg.u_max;
    let rows: Vec<Vec<(f64, f64, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let d = l + (-l) * (i + 1) as f64 / n as f64;
            (0..n)
                .filter_map(|j| {
                    let u = d + (u_max - d) * (j + 1) as f64 / n as f64;
                    band_objective(l, d, u, c, params, mode).map(|(mu, _)| (d, u, mu))
                })
                .collect()
        })
        .collect();

    let mut best: Option<(f64, f64, f64)> = None;
    for &(d, u, mu) in rows.iter().flatten() {
        best = match best {
            None => Some((d, u, mu)),
            Some(b) if mu > b.2 + 1e-12 => Some((d, u, mu)),
            Some(b) if (mu - b.2).abs() <= 1e-12 => {
                let better = match cfg.tie_break {
                    TieBreak::SmallestEntryThenExit => {
                        (d.abs(), u) < (b.0.abs(), b.1)
                    }
                };
                if better {
                    Some((d, u, mu))
                } else {
                    Some(b)
                }
            }
            keep => keep,
        };
    }

    let no_trade = |d: f64, u: f64| BandOptimum {
        l,
        d,
        u,
        f: 0.0,
        mu: 0.0,
        no_trade: true,
        hits_search_box: false,
        gradient: [0.0, 0.0],
    };
    let Some((d0, u0, mu0)) = best else {
        return Ok(no_trade(f64::NAN, f64::NAN));
    };
    if mu0 <= 0.0 {
        return Ok(no_trade(d0, u0));
    }

    let objective = |p: &[f64]| -> f64 {
        if p[0] > 0.0 || p[1] > u_max {
            return f64::INFINITY;
        }
        match band_objective(l, p[0], p[1], c, params, mode) {
            Some((mu, _)) => -mu,
            None => f64::INFINITY,
        }
    };
    let step = [(-l) / n as f64, (u_max - l) / n as f64];
    let (x, fx) = nelder_mead(objective, &[d0, u0], &step, cfg.tolerance * 1e-3, 0.0, 20_000);
    let (d, u) = if -fx >= mu0 { (x[0], x[1]) } else { (d0, u0) };
    let (mu, f) = band_objective(l, d, u, c, params, mode).expect("refined point is admissible");

    let h = 1e-6;
    let at = |dd: f64, uu: f64| band_objective(l, dd, uu, c, params, mode).map(|v| v.0);
    let grad_d = match (at(d + h, u), at(d - h, u)) {
        (Some(a), Some(b)) => (a - b) / (2.0 * h),
        _ => f64::NAN,
    };
    let grad_u = match (at(d, u + h), at(d, u - h)) {
        (Some(a), Some(b)) => (a - b) / (2.0 * h),
        _ => f64::NAN,
    };
    let hits_search_box = d >= -cfg.tolerance || u >= u_max - cfg.tolerance;
    if hits_search_box {
        log::warn!("band optimum ({d:.4}, {u:.4}) lies on the search box; consider raising u_max");
    }
    Ok(BandOptimum {
        l,
        d,
        u,
        f,
        mu,
        no_trade: false,
        hits_search_box,
        gradient: [grad_d, grad_u],
    })
}

/// Long-run return on a grid of `(d, u)` for plotting; inadmissible cells
/// are reported as NaN.
pub fn return_surface(
    l: f64,
    c: f64,
    params: &OuParams,
    mode: LeverageMode,
    cfg: &OptimizerConfig,
) -> Vec<(f64, f64, f64)> {
    let n = cfg.resolution;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let d = l + (-l) * (i + 1) as f64 / n as f64;
            (0..n)
                .map(|j| {
                    let u = d + (cfg.u_max - d) * (j + 1) as f64 / n as f64;
                    let mu = band_objective(l, d, u, c, params, mode).map_or(f64::NAN, |v| v.0);
                    (d, u, mu)
                })
                .collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// Optimal bands as a function of the cost (Σ units), for `|d|`/`u` versus
/// `c` curves.
pub fn cost_sweep(
    l: f64,
    costs_sigma_units: &[f64],
    params: &OuParams,
    mode: LeverageMode,
    cfg: &OptimizerConfig,
) -> Result<Vec<(f64, BandOptimum)>> {
    let sd = params.stationary_sd();
    costs_sigma_units
        .iter()
        .map(|&c| Ok((c, optimize_bands(l, c * sd, params, mode, cfg)?)))
        .collect()
}

/// Long-run return of the short-side strategy on the same process.
pub fn short_side_return(bands: &ShortBands, params: &OuParams) -> Result<f64> {
    long_run_return(&bands.as_reflected_long()?, params)
}

/// Long plus mirrored short strategy; by symmetry twice the long-side return.
pub fn combined_return(bands: &BandSpec, params: &OuParams) -> Result<f64> {
    Ok(long_run_return(bands, params)? + short_side_return(&bands.mirrored(), params)?)
}
