//! Exact OU sampling, Monte Carlo exit-time estimates, the bar-by-bar
//! backtester and renewal statistics of the realised return.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{linear_fit, NeumaierSum};
use crate::ou_analytics::{AnalyticsError, Channel, OuParams};
use crate::strategy::{log_payoffs, payoffs, BandSpec, StrategyError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimulationError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
}

pub type Result<T> = std::result::Result<T, SimulationError>;

/// Independent generator for stream `stream` under a master `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Exact one-step transition: returns the decay factor and the
/// conditional standard deviation for a step of length `dt`.
pub fn transition(params: &OuParams, dt: f64) -> (f64, f64) {
    let decay = (-params.kappa * dt).exp();
    let var = -(-2.0 * params.kappa * dt).exp_m1() / (2.0 * params.kappa);
    (decay, params.sigma * var.sqrt())
}

pub fn stationary_draw<R: Rng>(params: &OuParams, rng: &mut R) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    params.eta + params.stationary_sd() * z
}

/// Path on the observation grid defined by consecutive gaps `dts`.
pub fn simulate_on_grid<R: Rng>(params: &OuParams, dts: &[f64], x0: f64, rng: &mut R) -> Vec<f64> {
    let mut out = Vec::with_capacity(dts.len() + 1);
    let mut x = x0;
    out.push(x);
    for &dt in dts {
        let (a, sd) = transition(params, dt);
        let z: f64 = rng.sample(StandardNormal);
        x = params.eta + (x - params.eta) * a + sd * z;
        out.push(x);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathConfig {
    pub params: OuParams,
    pub dt: f64,
    pub horizon: f64,
    pub seed: u64,
    pub x0: f64,
}

impl PathConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SimulationError::InvalidConfig(format!("dt must be > 0, got {}", self.dt)));
        }
        if !(self.horizon >= self.dt && self.horizon.is_finite()) {
            return Err(SimulationError::InvalidConfig(format!(
                "horizon {} shorter than dt {}",
                self.horizon, self.dt
            )));
        }
        if !self.x0.is_finite() {
            return Err(SimulationError::InvalidConfig("initial level must be finite".into()));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledPath {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

/// Regularly sampled path, stream 0 of `seed`.
pub fn simulate_path(cfg: &PathConfig) -> Result<SampledPath> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, 0);
    let n = cfg.steps();
    let values = simulate_on_grid(&cfg.params, &vec![cfg.dt; n], cfg.x0, &mut rng);
    let times = (0..=n).map(|i| i as f64 * cfg.dt).collect();
    Ok(SampledPath { times, values })
}

/// Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self { mean: f64::NAN, se: f64::NAN, n };
        }
        let mut s = NeumaierSum::default();
        xs.iter().for_each(|&x| s.add(x));
        let mean = s.value() / n as f64;
        let mut q = NeumaierSum::default();
        xs.iter().for_each(|&x| q.add((x - mean) * (x - mean)));
        let se = if n > 1 { (q.value() / (n as f64 - 1.0) / n as f64).sqrt() } else { f64::NAN };
        Self { mean, se, n }
    }

    /// Number of standard errors separating the estimate from `value`.
    pub fn z_score(&self, value: f64) -> f64 {
        (self.mean - value) / self.se
    }

    fn scaled(self, k: f64) -> Self {
        Self { mean: self.mean * k, se: self.se * k, n: self.n }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub n_paths: usize,
    /// Simulation step in units of `θ`.
    pub dt_theta: f64,
    pub seed: u64,
    /// Probability-of-crossing correction between grid points.
    pub bridge: bool,
    /// Also monitor the same paths at half the step.
    pub step_halving: bool,
    /// Cycles still running after this many `θ` are dropped as censored.
    pub max_time_theta: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            n_paths: 100_000,
            dt_theta: 1e-3,
            seed: 1,
            bridge: true,
            step_halving: true,
            max_time_theta: 1e4,
        }
    }
}

/// One simulated cycle in `θ` units: exit from the channel started at the
/// entry band, then first passage back to it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleSample {
    pub exit_up: bool,
    pub fet: f64,
    pub fpt: f64,
}

#[derive(Debug, Clone, Copy)]
enum Phase {
    Exit,
    Return { up: bool, fet: f64 },
    Done,
}

/// Discretely monitored exit/return detector on the standardised process.
#[derive(Debug, Clone, Copy)]
struct Monitor {
    l: f64,
    d: f64,
    u: f64,
    bridge: bool,
    phase: Phase,
    result: Option<CycleSample>,
}

#[inline]
fn bridge_prob(gap0: f64, gap1: f64, h: f64) -> f64 {
    // gaps measured toward the barrier; local variance of the standardised
    // diffusion is 2h
    let e = gap0 * gap1 / h;
    if e > 40.0 {
        0.0
    } else {
        (-e).exp()
    }
}

impl Monitor {
    fn new(ch: &Channel, bridge: bool) -> Self {
        Self { l: ch.l, d: ch.d, u: ch.u, bridge, phase: Phase::Exit, result: None }
    }

    fn done(&self) -> bool {
        matches!(self.phase, Phase::Done)
    }

    fn step<R: Rng>(&mut self, y0: f64, y1: f64, t_end: f64, h: f64, rng: &mut R) {
        let t_mid = t_end - 0.5 * h;
        match self.phase {
            Phase::Exit => {
                let mut up = y1 >= self.u;
                let mut down = y1 <= self.l;
                if !up && !down && self.bridge {
                    let pu = bridge_prob(self.u - y0, self.u - y1, h);
                    let pl = bridge_prob(y0 - self.l, y1 - self.l, h);
                    if pu + pl > 0.0 {
                        let r: f64 = rng.random();
                        up = r < pu;
                        down = !up && r < pu + pl;
                    }
                }
                if up || down {
                    self.phase = Phase::Return { up, fet: t_mid };
                }
            }
            Phase::Return { up, fet } => {
                let hit = if up {
                    y1 <= self.d
                        || self.bridge && {
                            let p = bridge_prob(y0 - self.d, y1 - self.d, h);
                            p > 0.0 && rng.random::<f64>() < p
                        }
                } else {
                    y1 >= self.d
                        || self.bridge && {
                            let p = bridge_prob(self.d - y0, self.d - y1, h);
                            p > 0.0 && rng.random::<f64>() < p
                        }
                };
                if hit {
                    self.result = Some(CycleSample { exit_up: up, fet, fpt: t_mid - fet });
                    self.phase = Phase::Done;
                }
            }
            Phase::Done => {}
        }
    }
}

/// Coarse-step cycles and, with step halving, the fine-step cycles.
pub type CycleRuns = (Vec<Option<CycleSample>>, Option<Vec<Option<CycleSample>>>);

/// Simulated cycles of the standardised process `dY = −Y ds + √2 dW`
/// (`s = t/θ`). With `step_halving` the second vector holds the same paths
/// monitored at half the step; `None` entries are censored cycles.
pub fn mc_cycles(ch: &Channel, cfg: &OracleConfig) -> Result<CycleRuns> {
    if cfg.n_paths < 2 || !(cfg.dt_theta > 0.0) {
        return Err(SimulationError::InvalidConfig("need n_paths >= 2 and dt > 0".into()));
    }
    let fine_h = if cfg.step_halving { 0.5 * cfg.dt_theta } else { cfg.dt_theta };
    let (a, s) = ((-fine_h).exp(), (-(-2.0 * fine_h).exp_m1()).sqrt());
    let max_steps = (cfg.max_time_theta / fine_h).ceil() as u64;
    let per_path: Vec<(Option<CycleSample>, Option<CycleSample>)> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(cfg.seed, i as u64);
            let mut coarse = Monitor::new(ch, cfg.bridge);
            let mut fine = Monitor::new(ch, cfg.bridge);
            let mut y = ch.d;
            let mut y_coarse_start = y;
            let mut step: u64 = 0;
            while step < max_steps {
                step += 1;
                let z: f64 = rng.sample(StandardNormal);
                let y_new = y * a + s * z;
                if cfg.step_halving {
                    if !fine.done() {
                        fine.step(y, y_new, step as f64 * fine_h, fine_h, &mut rng);
                    }
                    if step.is_multiple_of(2) {
                        if !coarse.done() {
                            coarse.step(y_coarse_start, y_new, step as f64 * fine_h, cfg.dt_theta, &mut rng);
                        }
                        y_coarse_start = y_new;
                    }
                    y = y_new;
                    if fine.done() && coarse.done() {
                        break;
                    }
                } else {
                    coarse.step(y, y_new, step as f64 * fine_h, fine_h, &mut rng);
                    y = y_new;
                    if coarse.done() {
                        break;
                    }
                }
            }
            (coarse.result, fine.result)
        })
        .collect();
    let coarse = per_path.iter().map(|p| p.0).collect();
    let fine = cfg.step_halving.then(|| per_path.iter().map(|p| p.1).collect());
    Ok((coarse, fine))
}

/// Monte Carlo exit statistics, physical time units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McExitStats {
    pub dt: f64,
    pub n_paths: usize,
    pub censored: usize,
    pub p_plus: Estimate,
    pub p_minus: Estimate,
    pub fet_plus: Estimate,
    pub fet_minus: Estimate,
    /// Return from the stop-loss to the entry band.
    pub fpt_up: Estimate,
    /// Return from the exit band to the entry band.
    pub fpt_down: Estimate,
    pub trade_length: Estimate,
    pub trade_length_plus: Estimate,
    pub trade_length_minus: Estimate,
}

impl McExitStats {
    pub fn from_cycles(cycles: &[Option<CycleSample>], theta: f64, dt: f64) -> Self {
        let done: Vec<CycleSample> = cycles.iter().flatten().copied().collect();
        let ups: Vec<f64> = done.iter().map(|c| if c.exit_up { 1.0 } else { 0.0 }).collect();
        let downs: Vec<f64> = ups.iter().map(|x| 1.0 - x).collect();
        let pick = |up: bool, f: fn(&CycleSample) -> f64| -> Vec<f64> {
            done.iter().filter(|c| c.exit_up == up).map(f).collect()
        };
        let total: Vec<f64> = done.iter().map(|c| c.fet + c.fpt).collect();
        Self {
            dt,
            n_paths: cycles.len(),
            censored: cycles.len() - done.len(),
            p_plus: Estimate::from_samples(&ups),
            p_minus: Estimate::from_samples(&downs),
            fet_plus: Estimate::from_samples(&pick(true, |c| c.fet)).scaled(theta),
            fet_minus: Estimate::from_samples(&pick(false, |c| c.fet)).scaled(theta),
            fpt_up: Estimate::from_samples(&pick(false, |c| c.fpt)).scaled(theta),
            fpt_down: Estimate::from_samples(&pick(true, |c| c.fpt)).scaled(theta),
            trade_length: Estimate::from_samples(&total).scaled(theta),
            trade_length_plus: Estimate::from_samples(&pick(true, |c| c.fet + c.fpt)).scaled(theta),
            trade_length_minus: Estimate::from_samples(&pick(false, |c| c.fet + c.fpt)).scaled(theta),
        }
    }

    pub fn named(&self) -> [(&'static str, Estimate); 9] {
        [
            ("p_plus", self.p_plus),
            ("fet_plus", self.fet_plus),
            ("fet_minus", self.fet_minus),
            ("fpt_up", self.fpt_up),
            ("fpt_down", self.fpt_down),
            ("trade_length", self.trade_length),
            ("trade_length_plus", self.trade_length_plus),
            ("trade_length_minus", self.trade_length_minus),
            ("p_minus", self.p_minus),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub stats: McExitStats,
    pub half_step: Option<McExitStats>,
    /// `|coarse − fine| / SE(coarse)` per quantity.
    pub drift_in_se: Vec<(String, f64)>,
}

impl OracleReport {
    pub fn max_drift_in_se(&self) -> f64 {
        self.drift_in_se.iter().map(|d| d.1).fold(0.0, f64::max)
    }
}

pub fn mc_exit_oracle(ch: &Channel, params: &OuParams, cfg: &OracleConfig) -> Result<OracleReport> {
    let theta = params.theta();
    let (coarse, fine) = mc_cycles(ch, cfg)?;
    let stats = McExitStats::from_cycles(&coarse, theta, cfg.dt_theta * theta);
    let half_step = fine.map(|f| McExitStats::from_cycles(&f, theta, 0.5 * cfg.dt_theta * theta));
    let drift_in_se = half_step
        .as_ref()
        .map(|h| {
            stats
                .named()
                .iter()
                .zip(h.named())
                .map(|((name, a), (_, b))| (name.to_string(), (a.mean - b.mean).abs() / a.se))
                .collect()
        })
        .unwrap_or_default();
    Ok(OracleReport { stats, half_step, drift_in_se })
}

/// Monte Carlo first-passage time between two levels in Σ units.
pub fn mc_first_passage(from: f64, to: f64, params: &OuParams, cfg: &OracleConfig) -> Result<Estimate> {
    if from == to {
        return Ok(Estimate { mean: 0.0, se: 0.0, n: cfg.n_paths });
    }
    let h = cfg.dt_theta;
    let (a, s) = ((-h).exp(), (-(-2.0 * h).exp_m1()).sqrt());
    let max_steps = (cfg.max_time_theta / h).ceil() as u64;
    let up = to > from;
    let times: Vec<Option<f64>> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(cfg.seed, i as u64);
            let mut y = from;
            for step in 1..=max_steps {
                let z: f64 = rng.sample(StandardNormal);
                let y_new = y * a + s * z;
                let (g0, g1) = if up { (to - y, to - y_new) } else { (y - to, y_new - to) };
                let hit = g1 <= 0.0 || cfg.bridge && {
                    let p = bridge_prob(g0, g1, h);
                    p > 0.0 && rng.random::<f64>() < p
                };
                if hit {
                    return Some((step as f64 - 0.5) * h);
                }
                y = y_new;
            }
            None
        })
        .collect();
    let done: Vec<f64> = times.into_iter().flatten().collect();
    Ok(Estimate::from_samples(&done).scaled(params.theta()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Long,
    Short,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExitKind {
    Target,
    Stop,
}

/// How exit payoffs are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Fills {
    /// At the band levels regardless of overshoot.
    #[default]
    BandLevel,
    /// At the observed grid prices.
    Realistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trade {
    pub side: Side,
    pub entry_index: usize,
    pub exit_index: usize,
    pub entry_time: f64,
    pub exit_time: f64,
    pub entry_level: f64,
    pub exit_level: f64,
    pub exit: ExitKind,
    /// Fractional change of the position value.
    pub v: f64,
    /// `1 + f·v`.
    pub wealth_factor: f64,
    pub wealth_after: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BacktestConfig {
    pub bands: BandSpec,
    pub params: OuParams,
    pub fills: Fills,
    pub short_side: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestResult {
    pub trades: Vec<Trade>,
    pub n_plus: usize,
    pub n_minus: usize,
    /// `(time, wealth)` at the start and after every closed trade.
    pub wealth: Vec<(f64, f64)>,
    /// `ln(W_T/W_0)` from the wealth recursion.
    pub log_wealth: f64,
    /// `N⁺α⁺ + N⁻α⁻`.
    pub log_wealth_from_counts: f64,
    pub alpha_plus: f64,
    pub alpha_minus: f64,
    pub horizon: f64,
    /// Realised return per unit time.
    pub mu_t: f64,
    pub ruined: bool,
}

impl BacktestResult {
    /// Consecutive long entries as `(exit kind of the cycle, cycle length)`.
    pub fn long_cycles(&self) -> Vec<(ExitKind, f64)> {
        let longs: Vec<&Trade> = self.trades.iter().filter(|t| t.side == Side::Long).collect();
        longs.windows(2).map(|w| (w[0].exit, w[1].entry_time - w[0].entry_time)).collect()
    }
}

#[derive(Debug, Clone, Copy)]
enum LegState {
    /// Waiting for the entry level; `above` is the side the price is on.
    Waiting { above: bool },
    Open { index: usize, time: f64, level: f64 },
}

/// One side of the strategy in physical log-price levels.
#[derive(Debug, Clone, Copy)]
struct Leg {
    side: Side,
    entry: f64,
    target: f64,
    stop: f64,
    state: Option<LegState>,
}

impl Leg {
    fn triggers_entry(&self, above: bool, x: f64) -> bool {
        if above {
            x <= self.entry
        } else {
            x >= self.entry
        }
    }

    fn exit_kind(&self, x: f64) -> Option<ExitKind> {
        match self.side {
            Side::Long if x >= self.target => Some(ExitKind::Target),
            Side::Long if x <= self.stop => Some(ExitKind::Stop),
            Side::Short if x <= self.target => Some(ExitKind::Target),
            Side::Short if x >= self.stop => Some(ExitKind::Stop),
            _ => None,
        }
    }
}

/// Streaming backtester; feed observations in time order with [`push`].
///
/// [`push`]: Backtester::push
#[derive(Debug, Clone)]
pub struct Backtester {
    f: f64,
    c: f64,
    fills: Fills,
    v_plus: f64,
    v_minus: f64,
    alpha_plus: f64,
    alpha_minus: f64,
    legs: Vec<Leg>,
    trades: Vec<Trade>,
    keep_trades: bool,
    n_plus: usize,
    n_minus: usize,
    wealth: f64,
    wealth_path: Vec<(f64, f64)>,
    start: Option<f64>,
    last: f64,
    ruined: bool,
    index: usize,
}

impl Backtester {
    pub fn new(cfg: &BacktestConfig) -> Result<Self> {
        let b = cfg.bands;
        b.channel()?;
        let p = &cfg.params;
        let pay = payoffs(&b, p.stationary_sd());
        let (alpha_plus, alpha_minus) = log_payoffs(b.f, &pay)?;
        let level = |s: f64| p.unscale(s);
        let mut legs = vec![Leg {
            side: Side::Long,
            entry: level(b.d),
            target: level(b.u),
            stop: level(b.l),
            state: None,
        }];
        if cfg.short_side {
            legs.push(Leg {
                side: Side::Short,
                entry: level(-b.d),
                target: level(-b.u),
                stop: level(-b.l),
                state: None,
            });
        }
        Ok(Self {
            f: b.f,
            c: b.c,
            fills: cfg.fills,
            v_plus: pay.v_plus,
            v_minus: pay.v_minus,
            alpha_plus,
            alpha_minus,
            legs,
            trades: Vec::new(),
            keep_trades: true,
            n_plus: 0,
            n_minus: 0,
            wealth: 1.0,
            wealth_path: Vec::new(),
            start: None,
            last: 0.0,
            ruined: false,
            index: 0,
        })
    }

    /// Drop per-trade records; counts and wealth are still tracked.
    pub fn without_trade_log(mut self) -> Self {
        self.keep_trades = false;
        self
    }

    pub fn log_wealth(&self) -> f64 {
        self.wealth.ln()
    }

    pub fn is_ruined(&self) -> bool {
        self.ruined
    }

    pub fn counts(&self) -> (usize, usize) {
        (self.n_plus, self.n_minus)
    }

    pub fn push(&mut self, time: f64, x: f64) {
        let index = self.index;
        self.index += 1;
        if self.start.is_none() {
            self.start = Some(time);
            if self.keep_trades {
                self.wealth_path.push((time, 1.0));
            }
        }
        self.last = time;
        if self.ruined {
            return;
        }
        for k in 0..self.legs.len() {
            let leg = self.legs[k];
            let next = match leg.state {
                None => {
                    if x == leg.entry {
                        LegState::Open { index, time, level: x }
                    } else {
                        LegState::Waiting { above: x > leg.entry }
                    }
                }
                Some(LegState::Waiting { above }) => {
                    if leg.triggers_entry(above, x) {
                        LegState::Open { index, time, level: x }
                    } else {
                        LegState::Waiting { above }
                    }
                }
                Some(LegState::Open { index: ei, time: et, level: el }) => match leg.exit_kind(x) {
                    None => LegState::Open { index: ei, time: et, level: el },
                    Some(kind) => {
                        let v = match self.fills {
                            Fills::BandLevel => match kind {
                                ExitKind::Target => self.v_plus,
                                ExitKind::Stop => self.v_minus,
                            },
                            Fills::Realistic => {
                                let gain = match leg.side {
                                    Side::Long => x - el,
                                    Side::Short => el - x,
                                };
                                (gain - self.c).exp_m1()
                            }
                        };
                        let factor = 1.0 + self.f * v;
                        match kind {
                            ExitKind::Target => self.n_plus += 1,
                            ExitKind::Stop => self.n_minus += 1,
                        }
                        if factor <= 0.0 {
                            self.ruined = true;
                            self.wealth = 0.0;
                        } else {
                            self.wealth *= factor;
                        }
                        if self.keep_trades {
                            self.trades.push(Trade {
                                side: leg.side,
                                entry_index: ei,
                                exit_index: index,
                                entry_time: et,
                                exit_time: time,
                                entry_level: el,
                                exit_level: x,
                                exit: kind,
                                v,
                                wealth_factor: factor,
                                wealth_after: self.wealth,
                            });
                            self.wealth_path.push((time, self.wealth));
                        }
                        if self.ruined {
                            log::warn!("backtest ruined at t = {time}");
                            return;
                        }
                        let above = matches!(
                            (leg.side, kind),
                            (Side::Long, ExitKind::Target) | (Side::Short, ExitKind::Stop)
                        );
                        LegState::Waiting { above }
                    }
                },
            };
            self.legs[k].state = Some(next);
        }
    }

    pub fn finish(self) -> BacktestResult {
        let horizon = self.last - self.start.unwrap_or(self.last);
        let log_wealth = self.wealth.ln();
        let from_counts = self.n_plus as f64 * self.alpha_plus + self.n_minus as f64 * self.alpha_minus;
        let mu_t = if horizon > 0.0 {
            log_wealth / horizon
        } else {
            0.0
        };
        BacktestResult {
            trades: self.trades,
            n_plus: self.n_plus,
            n_minus: self.n_minus,
            wealth: self.wealth_path,
            log_wealth,
            log_wealth_from_counts: from_counts,
            alpha_plus: self.alpha_plus,
            alpha_minus: self.alpha_minus,
            horizon,
            mu_t,
            ruined: self.ruined,
        }
    }
}

/// Replays an observed series (times in the units of `κ⁻¹`).
pub fn backtest(times: &[f64], values: &[f64], cfg: &BacktestConfig) -> Result<BacktestResult> {
    if times.len() != values.len() {
        return Err(SimulationError::InvalidConfig("times and values differ in length".into()));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(SimulationError::InvalidConfig("times must be strictly increasing".into()));
    }
    let mut bt = Backtester::new(cfg)?;
    for (&t, &x) in times.iter().zip(values) {
        bt.push(t, x);
    }
    Ok(bt.finish())
}

/// Backtest on a freshly simulated regular path without materialising it.
pub fn backtest_simulated(cfg: &BacktestConfig, path: &PathConfig, keep_trades: bool) -> Result<BacktestResult> {
    path.validate()?;
    let mut rng = stream_rng(path.seed, 0);
    let mut bt = Backtester::new(cfg)?;
    if !keep_trades {
        bt = bt.without_trade_log();
    }
    let (a, sd) = transition(&path.params, path.dt);
    let eta = path.params.eta;
    let mut x = path.x0;
    bt.push(0.0, x);
    for i in 1..=path.steps() {
        let z: f64 = rng.sample(StandardNormal);
        x = eta + (x - eta) * a + sd * z;
        bt.push(i as f64 * path.dt, x);
        if bt.is_ruined() {
            break;
        }
    }
    Ok(bt.finish())
}

/// First three moments of the cycle length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenewalMoments {
    pub phi1: f64,
    pub phi2_sq: f64,
    pub phi3: Option<f64>,
    pub n: Option<usize>,
    /// Fewer than 30 cycles behind an empirical estimate.
    pub insufficient: bool,
}

/// Mixture moments from per-scenario means and standard deviations.
pub fn renewal_moments_analytic(p_plus: f64, plus: (f64, f64), minus: (f64, f64)) -> RenewalMoments {
    let q = 1.0 - p_plus;
    RenewalMoments {
        phi1: p_plus * plus.0 + q * minus.0,
        phi2_sq: p_plus * q * (plus.0 - minus.0).powi(2) + p_plus * plus.1 * plus.1 + q * minus.1 * minus.1,
        phi3: None,
        n: None,
        insufficient: false,
    }
}

pub fn renewal_moments_empirical(durations: &[f64]) -> RenewalMoments {
    let n = durations.len();
    if n < 2 {
        return RenewalMoments {
            phi1: durations.first().copied().unwrap_or(f64::NAN),
            phi2_sq: f64::NAN,
            phi3: None,
            n: Some(n),
            insufficient: true,
        };
    }
    let m = crate::numeric::mean(durations);
    let var = crate::numeric::variance(durations);
    let third = durations.iter().map(|x| (x - m).powi(3)).sum::<f64>() / n as f64;
    if n < 30 {
        log::warn!("renewal moments from only {n} cycles");
    }
    RenewalMoments { phi1: m, phi2_sq: var, phi3: Some(third), n: Some(n), insufficient: n < 30 }
}

/// `t·Var[μ_t]` as `t → ∞` from the conditional-variance expansion
/// `(α⁺−α⁻)² p⁺p⁻/φ₁ + ᾱ²φ₂²/φ₁³`.
pub fn leading_variance_coefficient(p_plus: f64, alpha_plus: f64, alpha_minus: f64, m: &RenewalMoments) -> f64 {
    let mean_alpha = p_plus * alpha_plus + (1.0 - p_plus) * alpha_minus;
    (alpha_plus - alpha_minus).powi(2) * p_plus * (1.0 - p_plus) / m.phi1
        + mean_alpha * mean_alpha * m.phi2_sq / m.phi1.powi(3)
}

/// Renewal-reward limit `Var[α − μτ]/φ₁`, which also carries the
/// covariance between the cycle outcome and its length.
pub fn renewal_reward_coefficient(cycles: &[(ExitKind, f64)], alpha_plus: f64, alpha_minus: f64) -> f64 {
    let n = cycles.len() as f64;
    let alpha = |k: ExitKind| if k == ExitKind::Target { alpha_plus } else { alpha_minus };
    let total_alpha: f64 = cycles.iter().map(|c| alpha(c.0)).sum();
    let total_len: f64 = cycles.iter().map(|c| c.1).sum();
    let mu = total_alpha / total_len;
    let ss: f64 = cycles.iter().map(|c| (alpha(c.0) - mu * c.1).powi(2)).sum();
    (ss / (n - 1.0)) / (total_len / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayConfig {
    pub n_paths: usize,
    /// Horizons in units of `θ`.
    pub horizons_theta: [f64; 2],
    pub n_horizons: usize,
    pub dt_theta: f64,
    pub seed: u64,
}

impl Default for DecayConfig {
    fn default() -> Self {
        Self { n_paths: 500, horizons_theta: [10.0, 1000.0], n_horizons: 9, dt_theta: 1e-3, seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceDecay {
    pub horizons: Vec<f64>,
    pub variances: Vec<f64>,
    pub mean_returns: Vec<f64>,
    pub slope: f64,
    /// `t·Var[μ_t]` at the largest horizon.
    pub scaled_variance_at_max: f64,
    /// Leading coefficient from the conditional-variance expansion.
    pub predicted_coefficient: f64,
    /// Renewal-reward coefficient including the outcome/length covariance.
    pub renewal_reward_coefficient: f64,
    pub moments: RenewalMoments,
    pub empirical_p_plus: f64,
}

/// Ensemble study of `Var[μ_t]` over log-spaced horizons. Moments of the
/// cycle length come from the simulated trades themselves.
pub fn variance_decay_study(bands: &BandSpec, params: &OuParams, cfg: &DecayConfig) -> Result<VarianceDecay> {
    let [t0, t1] = cfg.horizons_theta;
    if !(t0 > 0.0 && t1 / t0 >= 10f64.powf(1.5) - 1e-9) || cfg.n_horizons < 2 || cfg.n_paths < 2 {
        return Err(SimulationError::InvalidConfig(
            "horizons must span at least 1.5 decades with >= 2 horizons and >= 2 paths".into(),
        ));
    }
    let theta = params.theta();
    let horizons: Vec<f64> = (0..cfg.n_horizons)
        .map(|k| theta * t0 * (t1 / t0).powf(k as f64 / (cfg.n_horizons - 1) as f64))
        .collect();
    let bt_cfg = BacktestConfig { bands: *bands, params: *params, fills: Fills::BandLevel, short_side: false };
    let dt = cfg.dt_theta * theta;
    let (a, sd) = transition(params, dt);
    let steps = (horizons[horizons.len() - 1] / dt).round() as u64;

    // per path: return at each horizon, then the complete long cycles
    type PathRun = (Vec<f64>, Vec<(ExitKind, f64)>);
    let per_path: Vec<Result<PathRun>> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(cfg.seed, i as u64);
            let mut bt = Backtester::new(&bt_cfg)?;
            let mut x = params.eta + params.stationary_sd() * bands.d;
            bt.push(0.0, x);
            let mut snapshots = Vec::with_capacity(horizons.len());
            let mut next = 0;
            for step in 1..=steps {
                let z: f64 = rng.sample(StandardNormal);
                x = params.eta + (x - params.eta) * a + sd * z;
                let t = step as f64 * dt;
                bt.push(t, x);
                while next < horizons.len() && t >= horizons[next] - 0.5 * dt {
                    snapshots.push(bt.log_wealth() / horizons[next]);
                    next += 1;
                }
            }
            while snapshots.len() < horizons.len() {
                snapshots.push(bt.log_wealth() / horizons[snapshots.len()]);
            }
            Ok((snapshots, bt.finish().long_cycles()))
        })
        .collect();
    let per_path: Vec<PathRun> = per_path.into_iter().collect::<Result<_>>()?;

    let mut variances = Vec::with_capacity(horizons.len());
    let mut mean_returns = Vec::with_capacity(horizons.len());
    for k in 0..horizons.len() {
        let col: Vec<f64> = per_path.iter().map(|p| p.0[k]).collect();
        mean_returns.push(crate::numeric::mean(&col));
        variances.push(crate::numeric::variance(&col));
    }
    let lx: Vec<f64> = horizons.iter().map(|t| t.ln()).collect();
    let ly: Vec<f64> = variances.iter().map(|v| v.ln()).collect();
    let (slope, _) = linear_fit(&lx, &ly);

    let cycles: Vec<(ExitKind, f64)> = per_path.iter().flat_map(|p| p.1.iter().copied()).collect();
    let durations: Vec<f64> = cycles.iter().map(|c| c.1).collect();
    let moments = renewal_moments_empirical(&durations);
    let empirical_p_plus =
        cycles.iter().filter(|c| c.0 == ExitKind::Target).count() as f64 / cycles.len().max(1) as f64;
    let pay = payoffs(bands, params.stationary_sd());
    let (ap, am) = log_payoffs(bands.f, &pay)?;
    let t_max = horizons[horizons.len() - 1];
    Ok(VarianceDecay {
        scaled_variance_at_max: t_max * variances[variances.len() - 1],
        predicted_coefficient: leading_variance_coefficient(empirical_p_plus, ap, am, &moments),
        renewal_reward_coefficient: renewal_reward_coefficient(&cycles, ap, am),
        horizons,
        variances,
        mean_returns,
        slope,
        moments,
        empirical_p_plus,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::strategy::long_run_return;

    fn params() -> OuParams {
        OuParams::new(18.51, -0.0094, 0.0893).unwrap()
    }

    #[test]
    fn noiseless_path_decays() {
        let p = OuParams { kappa: 2.0, eta: 0.0, sigma: 0.0 };
        let path = simulate_path(&PathConfig { params: p, dt: 0.01, horizon: 1.0, seed: 3, x0: 1.0 }).unwrap();
        for (t, x) in path.times.iter().zip(&path.values) {
            assert!((x - (-2.0 * t).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_path_config() {
        let cfg = PathConfig { params: params(), dt: 0.0, horizon: 1.0, seed: 0, x0: 0.0 };
        assert!(simulate_path(&cfg).is_err());
        let cfg = PathConfig { dt: 1.0, horizon: 0.5, ..cfg };
        assert!(simulate_path(&cfg).is_err());
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream_rng(9, 1).random();
        let b: u64 = stream_rng(9, 1).random();
        let c: u64 = stream_rng(9, 2).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn ensemble_mean_after_one_theta() {
        let p = OuParams { kappa: 1.0, eta: 0.0, sigma: 1.0 };
        let xs: Vec<f64> = (0..10_000)
            .map(|i| *simulate_on_grid(&p, &[1.0], 1.0, &mut stream_rng(5, i)).last().unwrap())
            .collect();
        let est = Estimate::from_samples(&xs);
        assert!(est.z_score((-1.0f64).exp()).abs() < 3.0);
    }

    #[test]
    fn symmetric_channel_oracle() {
        let ch = Channel::new(-1.0, 0.0, 1.0).unwrap();
        let cfg = OracleConfig { n_paths: 4000, dt_theta: 2e-3, step_halving: false, ..Default::default() };
        let r = mc_exit_oracle(&ch, &OuParams { kappa: 1.0, eta: 0.0, sigma: 1.0 }, &cfg).unwrap();
        assert!(r.stats.p_plus.z_score(0.5).abs() < 3.0);
        assert_eq!(r.stats.censored, 0);
    }

    fn single_trade_cfg(f: f64) -> BacktestConfig {
        let p = OuParams { kappa: 1.0, eta: 0.0, sigma: 2.0f64.sqrt() };
        BacktestConfig {
            bands: BandSpec::new(-2.0, -0.5, 0.5, 0.01, f).unwrap(),
            params: p,
            fills: Fills::BandLevel,
            short_side: false,
        }
    }

    #[test]
    fn never_reaching_entry_means_no_trades() {
        let r = backtest(&[0.0, 1.0, 2.0], &[0.0, 0.1, -0.2], &single_trade_cfg(1.0)).unwrap();
        assert!(r.trades.is_empty());
        assert_eq!(r.mu_t, 0.0);
    }

    #[test]
    fn single_target_trade() {
        let cfg = single_trade_cfg(1.0);
        let r = backtest(&[0.0, 1.0, 2.0, 3.0], &[0.0, -0.6, 0.0, 0.7], &cfg).unwrap();
        assert_eq!(r.trades.len(), 1);
        assert_eq!(r.trades[0].exit, ExitKind::Target);
        let expected = (1.0 - 0.01f64).exp();
        assert!((r.wealth.last().unwrap().1 - expected).abs() < 1e-14);
    }

    #[test]
    fn realistic_fills_use_grid_prices() {
        let cfg = BacktestConfig { fills: Fills::Realistic, ..single_trade_cfg(1.0) };
        let r = backtest(&[0.0, 1.0, 2.0], &[0.0, -0.6, 0.7], &cfg).unwrap();
        assert!((r.trades[0].v - (1.3f64 - 0.01).exp_m1()).abs() < 1e-14);
    }

    #[test]
    fn ruin_halts_backtest() {
        let cfg = single_trade_cfg(1.0);
        let cfg = BacktestConfig { bands: BandSpec { f: 200.0, ..cfg.bands }, ..cfg };
        // loss per stop ≈ 1 − e^{−1.51}; f = 200 overshoots zero wealth
        let r = Backtester::new(&cfg);
        assert!(r.is_err());
    }

    #[test]
    fn short_side_mirrors_long() {
        let cfg = BacktestConfig { short_side: true, ..single_trade_cfg(1.0) };
        let r = backtest(&[0.0, 1.0, 2.0, 3.0], &[0.0, 0.6, 0.0, -0.7], &cfg).unwrap();
        assert_eq!(r.trades.len(), 1);
        assert_eq!(r.trades[0].side, Side::Short);
        assert_eq!(r.trades[0].exit, ExitKind::Target);
    }

    #[test]
    fn wealth_identity_on_simulated_backtest() {
        let p = params();
        let bands = BandSpec::new(-1.96, -0.87, 0.58, 0.0933 * p.stationary_sd(), 5.0).unwrap();
        let cfg = BacktestConfig { bands, params: p, fills: Fills::BandLevel, short_side: true };
        let path = PathConfig { params: p, dt: 1e-3 / p.kappa, horizon: 200.0 / p.kappa, seed: 11, x0: p.eta };
        let r = backtest_simulated(&cfg, &path, true).unwrap();
        assert!(r.n_plus + r.n_minus > 50);
        assert!((r.log_wealth - r.log_wealth_from_counts).abs() <= 1e-12 * r.log_wealth.abs().max(1.0));
        let mut last_exit = 0;
        for t in r.trades.iter().filter(|t| t.side == Side::Long) {
            assert!(t.entry_index >= last_exit && t.exit_index > t.entry_index);
            last_exit = t.exit_index;
        }
        assert!(long_run_return(&bands, &p).unwrap() > 0.0);
    }

    #[test]
    fn renewal_analytic_special_cases() {
        let m = renewal_moments_analytic(1.0, (2.0, 0.5), (1.0, 0.3));
        assert_eq!((m.phi1, m.phi2_sq), (2.0, 0.25));
        let m = renewal_moments_analytic(0.5, (1.5, 0.5), (1.5, 0.3));
        assert!((m.phi2_sq - 0.5 * (0.25 + 0.09)).abs() < 1e-15);
    }

    #[test]
    fn few_trades_flagged() {
        assert!(renewal_moments_empirical(&[1.0, 2.0, 3.0]).insufficient);
    }

    #[test]
    fn zero_leverage_has_zero_variance() {
        let p = params();
        let bands = BandSpec::new(-1.96, -0.87, 0.58, 0.001, 0.0).unwrap();
        let cfg = DecayConfig { n_paths: 4, horizons_theta: [1.0, 40.0], n_horizons: 3, dt_theta: 1e-2, seed: 1 };
        let r = variance_decay_study(&bands, &p, &cfg).unwrap();
        assert!(r.variances.iter().all(|&v| v == 0.0));
    }
}
