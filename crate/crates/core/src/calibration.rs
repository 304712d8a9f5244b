//! Quote ingestion, outlier filters, bid-ask cost estimation and maximum
//! likelihood fitting of the OU parameters with parametric bootstrap CIs.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, Datelike, Duration, NaiveDateTime, NaiveTime, Weekday};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{brent_minimize, mean, quantile, quantile_sorted};
use crate::ou_analytics::OuParams;
use crate::simulation::{simulate_on_grid, stationary_draw, stream_rng};

/// Days per year used to convert calendar gaps.
pub const DAYS_PER_YEAR: f64 = 365.25;
const SECONDS_PER_YEAR: f64 = DAYS_PER_YEAR * 86_400.0;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("row {row}: {msg}")]
    BadRow { row: usize, msg: String },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("degenerate series: {0}")]
    Degenerate(String),
    #[error("likelihood maximisation did not converge: {0}")]
    NonConvergence(String),
    #[error("{failures} of {samples} bootstrap fits failed (limit is 1%)")]
    BootstrapFailures { failures: usize, samples: usize },
}

pub type Result<T> = std::result::Result<T, CalibrationError>;

/// Two-leg quote at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quote {
    pub timestamp: NaiveDateTime,
    pub bid1: f64,
    pub ask1: f64,
    pub bid2: f64,
    pub ask2: f64,
}

impl Quote {
    /// `R = mid₁ / mid₂`.
    pub fn ratio(&self) -> f64 {
        (self.bid1 + self.ask1) / (self.bid2 + self.ask2)
    }

    /// Round-trip cost `ln(ask₁/bid₁) + ln(ask₂/bid₂)`.
    pub fn cost(&self) -> f64 {
        (self.ask1 / self.bid1).ln() + (self.ask2 / self.bid2).ln()
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct CsvRow {
    timestamp: String,
    bid1: f64,
    ask1: f64,
    bid2: f64,
    ask2: f64,
}

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t);
        }
    }
    DateTime::parse_from_rfc3339(s).ok().map(|t| t.naive_utc())
}

pub fn format_timestamp(t: &NaiveDateTime) -> String {
    t.format("%Y-%m-%dT%H:%M:%S").to_string()
}

fn years_between(a: &NaiveDateTime, b: &NaiveDateTime) -> f64 {
    let d = *b - *a;
    (d.num_seconds() as f64 + d.subsec_nanos() as f64 * 1e-9) / SECONDS_PER_YEAR
}

/// Validated quote series with strictly increasing timestamps.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PriceSeries {
    quotes: Vec<Quote>,
}

impl PriceSeries {
    pub fn new(quotes: Vec<Quote>) -> Result<Self> {
        for (i, q) in quotes.iter().enumerate() {
            let prices = [q.bid1, q.ask1, q.bid2, q.ask2];
            if prices.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
                return Err(CalibrationError::BadRow { row: i, msg: "prices must be positive".into() });
            }
            if q.bid1 > q.ask1 || q.bid2 > q.ask2 {
                return Err(CalibrationError::BadRow { row: i, msg: "bid above ask".into() });
            }
            if i > 0 && quotes[i - 1].timestamp >= q.timestamp {
                return Err(CalibrationError::BadRow { row: i, msg: "timestamps not strictly increasing".into() });
            }
        }
        Ok(Self { quotes })
    }

    /// Synthetic quotes whose log-ratio equals `log_ratio` exactly; both
    /// legs carry the same relative spread so that the round-trip cost is
    /// `cost`.
    pub fn from_log_ratio(timestamps: &[NaiveDateTime], log_ratio: &[f64], cost: f64) -> Result<Self> {
        if timestamps.len() != log_ratio.len() {
            return Err(CalibrationError::Invalid("timestamps and values differ in length".into()));
        }
        let half = 0.25 * cost;
        let quotes = timestamps
            .iter()
            .zip(log_ratio)
            .map(|(&timestamp, &x)| {
                let m1 = x.exp();
                Quote {
                    timestamp,
                    bid1: m1 * (-half).exp(),
                    ask1: m1 * half.exp(),
                    bid2: (-half).exp(),
                    ask2: half.exp(),
                }
            })
            .collect();
        Self::new(quotes)
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut quotes = Vec::new();
        for (i, row) in rdr.deserialize::<CsvRow>().enumerate() {
            let row = row?;
            let timestamp = parse_timestamp(&row.timestamp).ok_or_else(|| CalibrationError::BadRow {
                row: i,
                msg: format!("unparseable timestamp '{}'", row.timestamp),
            })?;
            quotes.push(Quote { timestamp, bid1: row.bid1, ask1: row.ask1, bid2: row.bid2, ask2: row.ask2 });
        }
        Self::new(quotes)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for q in &self.quotes {
            w.serialize(CsvRow {
                timestamp: format_timestamp(&q.timestamp),
                bid1: q.bid1,
                ask1: q.ask1,
                bid2: q.bid2,
                ask2: q.ask2,
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn quotes(&self) -> &[Quote] {
        &self.quotes
    }

    pub fn len(&self) -> usize {
        self.quotes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.quotes.is_empty()
    }

    pub fn ratios(&self) -> Vec<f64> {
        self.quotes.iter().map(Quote::ratio).collect()
    }

    pub fn log_ratios(&self) -> Vec<f64> {
        self.quotes.iter().map(|q| q.ratio().ln()).collect()
    }

    /// Elapsed time since the first quote, in years.
    pub fn times_in_years(&self) -> Vec<f64> {
        match self.quotes.first() {
            None => Vec::new(),
            Some(first) => self.quotes.iter().map(|q| years_between(&first.timestamp, &q.timestamp)).collect(),
        }
    }

    /// Gaps between consecutive quotes under the chosen clock.
    pub fn gaps(&self, clock: Clock) -> Vec<f64> {
        match clock {
            Clock::Calendar => self
                .quotes
                .windows(2)
                .map(|w| years_between(&w[0].timestamp, &w[1].timestamp))
                .collect(),
            Clock::Trading { bar } => vec![bar; self.quotes.len().saturating_sub(1)],
        }
    }

    pub fn select(&self, keep: impl Fn(&Quote) -> bool) -> Self {
        Self { quotes: self.quotes.iter().copied().filter(|q| keep(q)).collect() }
    }

    /// Quotes with `from <= timestamp < to`.
    pub fn between(&self, from: Option<NaiveDateTime>, to: Option<NaiveDateTime>) -> Self {
        self.select(|q| from.is_none_or(|f| q.timestamp >= f) && to.is_none_or(|t| q.timestamp < t))
    }

    pub fn session_filtered(&self, window: &SessionWindow) -> Self {
        self.select(|q| window.contains(&q.timestamp))
    }

    fn without(&self, removed: &[usize]) -> Self {
        let mut drop = removed.iter().peekable();
        let quotes = self
            .quotes
            .iter()
            .enumerate()
            .filter(|(i, _)| {
                if drop.peek() == Some(&i) {
                    drop.next();
                    false
                } else {
                    true
                }
            })
            .map(|(_, q)| *q)
            .collect();
        Self { quotes }
    }
}

/// How the time between consecutive bars is measured.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Clock {
    /// Actual elapsed time in years, including nights and weekends.
    #[default]
    Calendar,
    /// Every bar counts as `bar` years.
    Trading { bar: f64 },
}

/// Intraday window on weekdays, bounds inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionWindow {
    pub start: NaiveTime,
    pub end: NaiveTime,
    pub weekdays_only: bool,
}

impl Default for SessionWindow {
    fn default() -> Self {
        Self {
            start: NaiveTime::from_hms_opt(9, 0, 0).unwrap(),
            end: NaiveTime::from_hms_opt(16, 0, 0).unwrap(),
            weekdays_only: true,
        }
    }
}

impl SessionWindow {
    pub fn contains(&self, t: &NaiveDateTime) -> bool {
        if self.weekdays_only && matches!(t.weekday(), Weekday::Sat | Weekday::Sun) {
            return false;
        }
        let tod = t.time();
        self.start <= tod && tod <= self.end
    }
}

/// `n` timestamps spaced by `step` inside the window, skipping the rest of
/// the day (and weekends when configured).
pub fn session_timestamps(n: usize, first_day: NaiveDateTime, window: &SessionWindow, step: Duration) -> Vec<NaiveDateTime> {
    let mut out = Vec::with_capacity(n);
    let mut day = first_day.date();
    while out.len() < n {
        let mut t = day.and_time(window.start);
        while out.len() < n && t.time() <= window.end && t.date() == day {
            if window.contains(&t) {
                out.push(t);
            }
            t += step;
        }
        day = day.succ_opt().expect("date overflow");
    }
    out
}

/// Regular timestamps from `start`, round the clock.
pub fn regular_timestamps(n: usize, start: NaiveDateTime, step: Duration) -> Vec<NaiveDateTime> {
    (0..n).map(|i| start + step * i as i32).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub series: PriceSeries,
    /// Indices into the input series.
    pub removed: Vec<usize>,
}

fn quartiles(r: &[f64]) -> (f64, f64) {
    let mut s = r.to_vec();
    s.sort_by(f64::total_cmp);
    (quantile_sorted(&s, 0.25), quantile_sorted(&s, 0.75))
}

/// Drops ratios outside `[Q₁ − 3·IQR, Q₃ + 3·IQR]` of the whole window.
pub fn filter_extreme_outliers(series: &PriceSeries) -> FilterOutcome {
    if series.is_empty() {
        return FilterOutcome { series: series.clone(), removed: Vec::new() };
    }
    let r = series.ratios();
    let (q1, q3) = quartiles(&r);
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - 3.0 * iqr, q3 + 3.0 * iqr);
    let removed: Vec<usize> = r.iter().enumerate().filter(|(_, &x)| x < lo || x > hi).map(|(i, _)| i).collect();
    FilterOutcome { series: series.without(&removed), removed }
}

/// Drops isolated spikes: a move larger than the IQR at `t` that is undone
/// at `t + 1` to within 5% of the IQR.
pub fn filter_antipersistent_outliers(series: &PriceSeries) -> FilterOutcome {
    if series.len() < 3 {
        return FilterOutcome { series: series.clone(), removed: Vec::new() };
    }
    let r = series.ratios();
    let (q1, q3) = quartiles(&r);
    let iqr = q3 - q1;
    let removed: Vec<usize> = (1..r.len() - 1)
        .filter(|&t| (r[t] - r[t - 1]).abs() > iqr && (r[t + 1] - r[t - 1]).abs() <= 0.05 * iqr)
        .collect();
    FilterOutcome { series: series.without(&removed), removed }
}

/// Extreme filter followed by the antipersistent filter; removed indices
/// refer to the input series.
pub fn clean(series: &PriceSeries) -> FilterOutcome {
    let first = filter_extreme_outliers(series);
    let second = filter_antipersistent_outliers(&first.series);
    let kept: Vec<usize> = (0..series.len()).filter(|i| first.removed.binary_search(i).is_err()).collect();
    let mut removed = first.removed;
    removed.extend(second.removed.iter().map(|&j| kept[j]));
    removed.sort_unstable();
    FilterOutcome { series: second.series, removed }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(data: &[f64], bins: usize) -> Self {
        let bins = bins.max(1);
        let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if data.is_empty() {
            return Self { edges: Vec::new(), counts: Vec::new() };
        }
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let edges = (0..=bins).map(|k| lo + k as f64 * width).collect();
        let mut counts = vec![0; bins];
        for &x in data {
            let k = (((x - lo) / width) as usize).min(bins - 1);
            counts[k] += 1;
        }
        Self { edges, counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    /// Mean in units of the stationary deviation, when one is supplied.
    pub mean_sigma_units: Option<f64>,
    pub histogram: Histogram,
}

/// Per-instant round-trip costs and their summary.
pub fn estimate_cost(series: &PriceSeries, stationary_sd: Option<f64>, bins: usize) -> Result<(Vec<f64>, CostSummary)> {
    if series.is_empty() {
        return Err(CalibrationError::Invalid("no quotes to estimate costs from".into()));
    }
    let c: Vec<f64> = series.quotes().iter().map(Quote::cost).collect();
    let m = mean(&c);
    let summary = CostSummary {
        n: c.len(),
        mean: m,
        median: quantile(&c, 0.5),
        min: c.iter().copied().fold(f64::INFINITY, f64::min),
        max: c.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean_sigma_units: stationary_sd.map(|s| m / s),
        histogram: Histogram::new(&c, bins),
    };
    Ok((c, summary))
}

/// Sufficient statistics of the transitions sharing one gap length.
#[derive(Debug, Clone, Copy, Default)]
struct GapGroup {
    dt: f64,
    n: f64,
    /// Σ increments, Σ previous levels and their second moments.
    s_inc: f64,
    s_prev: f64,
    s_inc_inc: f64,
    s_inc_prev: f64,
    s_prev_prev: f64,
}

/// Grouped data for the exact discrete OU likelihood. Levels are centred
/// on their mean internally.
#[derive(Debug, Clone)]
pub struct LikelihoodData {
    groups: Vec<GapGroup>,
    n: usize,
    centre: f64,
    kappa_bounds: (f64, f64),
}

/// Concentrated fit at a fixed `κ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KappaProfile {
    pub kappa: f64,
    pub eta: f64,
    pub sigma_sq: f64,
    pub log_likelihood: f64,
}

#[derive(Debug, Clone, Copy)]
struct GroupTerms {
    n: f64,
    b: f64,
    w: f64,
    /// Σ y and Σ y² with `y = x − a·x_prev` (centred levels).
    sy: f64,
    syy: f64,
}

impl LikelihoodData {
    pub fn new(values: &[f64], gaps: &[f64]) -> Result<Self> {
        if values.len() < 3 {
            return Err(CalibrationError::Invalid(format!("need >= 3 observations, got {}", values.len())));
        }
        if gaps.len() + 1 != values.len() {
            return Err(CalibrationError::Invalid("need one gap per transition".into()));
        }
        if gaps.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
            return Err(CalibrationError::Invalid("all gaps must be positive".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CalibrationError::Invalid("non-finite observation".into()));
        }
        let centre = mean(values);
        let mut map: BTreeMap<u64, GapGroup> = BTreeMap::new();
        for (w, &dt) in values.windows(2).zip(gaps) {
            let prev = w[0] - centre;
            let inc = w[1] - w[0];
            let g = map.entry(dt.to_bits()).or_insert(GapGroup { dt, ..Default::default() });
            g.n += 1.0;
            g.s_inc += inc;
            g.s_prev += prev;
            g.s_inc_inc += inc * inc;
            g.s_inc_prev += inc * prev;
            g.s_prev_prev += prev * prev;
        }
        if map.values().all(|g| g.s_inc_inc == 0.0) {
            return Err(CalibrationError::Degenerate("all increments are zero".into()));
        }
        let min_dt = gaps.iter().copied().fold(f64::INFINITY, f64::min);
        let span: f64 = gaps.iter().sum();
        Ok(Self {
            groups: map.into_values().collect(),
            n: gaps.len(),
            centre,
            kappa_bounds: (1e-4 / span, 50.0 / min_dt),
        })
    }

    pub fn transitions(&self) -> usize {
        self.n
    }

    pub fn kappa_bounds(&self) -> (f64, f64) {
        self.kappa_bounds
    }

    fn terms(&self, kappa: f64) -> impl Iterator<Item = GroupTerms> + '_ {
        self.groups.iter().map(move |g| {
            let b = -(-kappa * g.dt).exp_m1();
            let w = -(-2.0 * kappa * g.dt).exp_m1() / (2.0 * kappa);
            // y = inc + b·prev
            let sy = g.s_inc + b * g.s_prev;
            let syy = g.s_inc_inc + 2.0 * b * g.s_inc_prev + b * b * g.s_prev_prev;
            GroupTerms { n: g.n, b, w, sy, syy }
        })
    }

    /// `Σ r²/w` and `Σ ln w` for centred mean `m`.
    fn residuals(&self, kappa: f64, m: f64) -> (f64, f64) {
        let mut q = 0.0;
        let mut lw = 0.0;
        for t in self.terms(kappa) {
            q += (t.syy - 2.0 * m * t.b * t.sy + m * m * t.b * t.b * t.n) / t.w;
            lw += t.n * t.w.ln();
        }
        (q.max(0.0), lw)
    }

    fn best_mean(&self, kappa: f64) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for t in self.terms(kappa) {
            num += t.b * t.sy / t.w;
            den += t.b * t.b * t.n / t.w;
        }
        if den > 0.0 {
            num / den
        } else {
            0.0
        }
    }

    fn gaussian(&self, q_over_sigma_sq: f64, log_w: f64, sigma_sq: f64) -> f64 {
        let n = self.n as f64;
        -0.5 * n * (2.0 * std::f64::consts::PI * sigma_sq).ln() - 0.5 * log_w - 0.5 * q_over_sigma_sq
    }

    /// Exact log-likelihood of the transitions.
    pub fn log_likelihood(&self, p: &OuParams) -> f64 {
        let (q, lw) = self.residuals(p.kappa, p.eta - self.centre);
        let s2 = p.sigma * p.sigma;
        self.gaussian(q / s2, lw, s2)
    }

    /// `η` and `σ²` maximising the likelihood at fixed `κ`.
    pub fn profile_at_kappa(&self, kappa: f64) -> KappaProfile {
        let m = self.best_mean(kappa);
        let (q, lw) = self.residuals(kappa, m);
        let sigma_sq = q / self.n as f64;
        KappaProfile {
            kappa,
            eta: m + self.centre,
            sigma_sq,
            log_likelihood: self.gaussian(self.n as f64, lw, sigma_sq),
        }
    }

    /// Maximises `g(ln κ)` over the κ range by a log grid scan and Brent.
    /// Returns `(κ, g)`; the upper edge of the range means no mean reversion
    /// is detectable and is an error.
    fn maximise_over_kappa(&self, g: impl Fn(f64) -> f64) -> Result<(f64, f64)> {
        let (lo, hi) = (self.kappa_bounds.0.ln(), self.kappa_bounds.1.ln());
        let n = 64;
        let grid: Vec<f64> = (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect();
        let vals: Vec<f64> = grid.iter().map(|&x| g(x)).collect();
        let best = (0..=n)
            .filter(|&i| vals[i].is_finite())
            .max_by(|&i, &j| vals[i].total_cmp(&vals[j]))
            .ok_or_else(|| CalibrationError::NonConvergence("likelihood not finite on the κ range".into()))?;
        let a = grid[best.saturating_sub(1)];
        let b = grid[(best + 1).min(n)];
        let (x, fx) = brent_minimize(|x| -g(x), a, b, 1e-10, 200);
        let (x, v) = if -fx >= vals[best] { (x, -fx) } else { (grid[best], vals[best]) };
        if x >= hi - 1e-6 {
            return Err(CalibrationError::NonConvergence(format!(
                "κ estimate runs into the upper bound {:.3e}",
                self.kappa_bounds.1
            )));
        }
        Ok((x.exp(), v))
    }

    pub fn fit(&self) -> Result<MleFit> {
        let (kappa, _) = self.maximise_over_kappa(|lk| self.profile_at_kappa(lk.exp()).log_likelihood)?;
        let prof = self.profile_at_kappa(kappa);
        if !(prof.sigma_sq > 0.0) {
            return Err(CalibrationError::Degenerate("zero residual variance".into()));
        }
        let params = OuParams { kappa, eta: prof.eta, sigma: prof.sigma_sq.sqrt() };
        Ok(MleFit {
            params,
            log_likelihood: prof.log_likelihood,
            transitions: self.n,
            kappa_at_lower_bound: kappa <= self.kappa_bounds.0 * 1.0001,
        })
    }

    /// Profile log-likelihood with `κ` fixed.
    pub fn profile_kappa(&self, kappa: f64) -> f64 {
        self.profile_at_kappa(kappa).log_likelihood
    }

    /// Profile log-likelihood with `η` fixed.
    pub fn profile_eta(&self, eta: f64) -> Result<f64> {
        let m = eta - self.centre;
        let n = self.n as f64;
        let g = |lk: f64| {
            let (q, lw) = self.residuals(lk.exp(), m);
            let s2 = q / n;
            self.gaussian(n, lw, s2)
        };
        Ok(self.maximise_over_kappa(g)?.1)
    }

    /// Profile log-likelihood with `σ` fixed.
    pub fn profile_sigma(&self, sigma: f64) -> Result<f64> {
        let s2 = sigma * sigma;
        let g = |lk: f64| {
            let kappa = lk.exp();
            let (q, lw) = self.residuals(kappa, self.best_mean(kappa));
            self.gaussian(q / s2, lw, s2)
        };
        Ok(self.maximise_over_kappa(g)?.1)
    }

    /// Profile log-likelihood for one parameter.
    pub fn profile(&self, which: Param, value: f64) -> Result<f64> {
        match which {
            Param::Kappa => Ok(self.profile_kappa(value)),
            Param::Eta => self.profile_eta(value),
            Param::Sigma => self.profile_sigma(value),
        }
    }
}

/// Direct transition-by-transition log-likelihood (reference form).
pub fn log_likelihood_pointwise(values: &[f64], gaps: &[f64], p: &OuParams) -> f64 {
    values
        .windows(2)
        .zip(gaps)
        .map(|(w, &dt)| {
            let a = (-p.kappa * dt).exp();
            let mean = w[0] * a + p.eta * (1.0 - a);
            let var = p.sigma * p.sigma * (1.0 - a * a) / (2.0 * p.kappa);
            let r = w[1] - mean;
            -0.5 * (2.0 * std::f64::consts::PI * var).ln() - r * r / (2.0 * var)
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Param {
    Kappa,
    Eta,
    Sigma,
}

impl Param {
    pub const ALL: [Param; 3] = [Param::Kappa, Param::Eta, Param::Sigma];

    pub fn of(&self, p: &OuParams) -> f64 {
        match self {
            Param::Kappa => p.kappa,
            Param::Eta => p.eta,
            Param::Sigma => p.sigma,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Param::Kappa => "kappa",
            Param::Eta => "eta",
            Param::Sigma => "sigma",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MleFit {
    pub params: OuParams,
    pub log_likelihood: f64,
    pub transitions: usize,
    /// The fit sits at the small-κ edge (Brownian limit).
    pub kappa_at_lower_bound: bool,
}

pub fn mle_fit(values: &[f64], gaps: &[f64]) -> Result<MleFit> {
    LikelihoodData::new(values, gaps)?.fit()
}

pub fn mle_fit_series(series: &PriceSeries, clock: Clock) -> Result<MleFit> {
    mle_fit(&series.log_ratios(), &series.gaps(clock))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamIntervals {
    pub kappa: Interval,
    pub eta: Interval,
    pub sigma: Interval,
}

impl ParamIntervals {
    pub fn get(&self, which: Param) -> Interval {
        match which {
            Param::Kappa => self.kappa,
            Param::Eta => self.eta,
            Param::Sigma => self.sigma,
        }
    }

    fn from_fn(mut f: impl FnMut(Param) -> Result<Interval>) -> Result<Self> {
        Ok(Self { kappa: f(Param::Kappa)?, eta: f(Param::Eta)?, sigma: f(Param::Sigma)? })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub samples: usize,
    pub seed: u64,
    pub level: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self { samples: 10_000, seed: 1, level: 0.95 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub samples: usize,
    pub failures: usize,
    pub seed: u64,
    pub level: f64,
    /// Refitted parameters in sample order (failed samples skipped).
    pub estimates: Vec<OuParams>,
    /// Quantiles of the refitted estimates.
    pub percentile: ParamIntervals,
    /// Profile-likelihood intervals with the cut-off taken from the
    /// bootstrap distribution of the likelihood-ratio statistic.
    pub profile: ParamIntervals,
    /// The calibrated cut-offs per parameter.
    pub lr_cutoffs: [f64; 3],
}

/// Parametric bootstrap around `fit`: simulate on the observed gap grid,
/// refit, and collect estimates and likelihood-ratio statistics.
pub fn bootstrap_ci(data: &LikelihoodData, gaps: &[f64], fit: &MleFit, cfg: &BootstrapConfig) -> Result<BootstrapResult> {
    if cfg.samples < 100 {
        return Err(CalibrationError::Invalid(format!("need >= 100 bootstrap samples, got {}", cfg.samples)));
    }
    if !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(CalibrationError::Invalid("confidence level must be in (0, 1)".into()));
    }
    let theta_hat = fit.params;
    let outcomes: Vec<Option<(OuParams, [f64; 3])>> = (0..cfg.samples)
        .into_par_iter()
        .map(|j| {
            let mut rng = stream_rng(cfg.seed, j as u64);
            let x0 = stationary_draw(&theta_hat, &mut rng);
            let path = simulate_on_grid(&theta_hat, gaps, x0, &mut rng);
            let d = LikelihoodData::new(&path, gaps).ok()?;
            let f = d.fit().ok()?;
            let mut lr = [0.0; 3];
            for (k, which) in Param::ALL.iter().enumerate() {
                let prof = d.profile(*which, which.of(&theta_hat)).ok()?;
                lr[k] = (2.0 * (f.log_likelihood - prof)).max(0.0);
            }
            Some((f.params, lr))
        })
        .collect();
    let ok: Vec<(OuParams, [f64; 3])> = outcomes.iter().flatten().copied().collect();
    let failures = cfg.samples - ok.len();
    if failures * 100 >= cfg.samples {
        return Err(CalibrationError::BootstrapFailures { failures, samples: cfg.samples });
    }
    if failures > 0 {
        log::warn!("{failures} bootstrap fits failed and were excluded");
    }
    let tail = 0.5 * (1.0 - cfg.level);
    let percentile = ParamIntervals::from_fn(|which| {
        let xs: Vec<f64> = ok.iter().map(|(p, _)| which.of(p)).collect();
        Ok(Interval { lower: quantile(&xs, tail), upper: quantile(&xs, 1.0 - tail) })
    })?;
    let mut lr_cutoffs = [0.0; 3];
    for (k, c) in lr_cutoffs.iter_mut().enumerate() {
        let xs: Vec<f64> = ok.iter().map(|(_, lr)| lr[k]).collect();
        *c = quantile(&xs, cfg.level);
    }
    let profile = ParamIntervals::from_fn(|which| {
        let k = Param::ALL.iter().position(|p| *p == which).unwrap();
        profile_interval(data, fit, which, lr_cutoffs[k])
    })?;
    Ok(BootstrapResult {
        samples: cfg.samples,
        failures,
        seed: cfg.seed,
        level: cfg.level,
        estimates: ok.into_iter().map(|o| o.0).collect(),
        percentile,
        profile,
        lr_cutoffs,
    })
}

/// `{v : 2(ℓ̂ − ℓ_prof(v)) ≤ cutoff}` found by bracketing and bisection on
/// each side of the estimate (log scale for the positive parameters).
pub fn profile_interval(data: &LikelihoodData, fit: &MleFit, which: Param, cutoff: f64) -> Result<Interval> {
    let est = which.of(&fit.params);
    let positive = which != Param::Eta;
    let to_value = |z: f64| if positive { z.exp() } else { z };
    let z_hat = if positive { est.ln() } else { est };
    let scale = match which {
        Param::Eta => fit.params.sigma / (2.0 * fit.params.kappa).sqrt() * 0.05,
        _ => 0.02,
    };
    let excess = |z: f64| -> Result<f64> {
        Ok(2.0 * (fit.log_likelihood - data.profile(which, to_value(z))?) - cutoff)
    };
    let (k_lo, k_hi) = data.kappa_bounds();
    let side = |dir: f64| -> Result<f64> {
        let mut inner = z_hat;
        let mut step = scale;
        let mut outer = z_hat + dir * step;
        for _ in 0..80 {
            if which == Param::Kappa && (outer <= k_lo.ln() || outer >= k_hi.ln()) {
                return Ok(to_value(outer.clamp(k_lo.ln(), k_hi.ln())));
            }
            match excess(outer) {
                Ok(e) if e > 0.0 => break,
                Ok(_) => {}
                Err(_) => break,
            }
            inner = outer;
            step *= 2.0;
            outer = z_hat + dir * step;
        }
        for _ in 0..100 {
            let mid = 0.5 * (inner + outer);
            if (outer - inner).abs() <= 1e-10 * (1.0 + mid.abs()) {
                break;
            }
            match excess(mid) {
                Ok(e) if e <= 0.0 => inner = mid,
                _ => outer = mid,
            }
        }
        Ok(to_value(0.5 * (inner + outer)))
    };
    let lower = side(-1.0)?;
    let upper = side(1.0)?;
    Ok(Interval { lower, upper })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn ts(h: u32, m: u32) -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2024, 3, 4).unwrap().and_hms_opt(h, m, 0).unwrap()
    }

    fn series_from_ratios(r: &[f64]) -> PriceSeries {
        let times: Vec<NaiveDateTime> = (0..r.len()).map(|i| ts(0, 0) + Duration::minutes(30 * i as i64)).collect();
        let x: Vec<f64> = r.iter().map(|v| v.ln()).collect();
        PriceSeries::from_log_ratio(&times, &x, 0.0).unwrap()
    }

    #[test]
    fn timestamps_parse() {
        assert_eq!(parse_timestamp("2024-03-04T09:30:00"), Some(ts(9, 30)));
        assert_eq!(parse_timestamp("2024-03-04 09:30:00"), Some(ts(9, 30)));
        assert_eq!(parse_timestamp("2024-03-04T09:30:00Z"), Some(ts(9, 30)));
        assert_eq!(parse_timestamp("2024-03-04T10:30:00+01:00"), Some(ts(9, 30)));
        assert_eq!(parse_timestamp("yesterday"), None);
    }

    #[test]
    fn csv_round_trip() {
        let s = series_from_ratios(&[1.0, 1.01, 0.99]);
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("timestamp,bid1,ask1,bid2,ask2"));
        let back = PriceSeries::read_csv(&buf[..]).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn invalid_rows_rejected() {
        let bad = "timestamp,bid1,ask1,bid2,ask2\n2024-01-01T00:00:00,2,1,1,1\n";
        assert!(PriceSeries::read_csv(bad.as_bytes()).is_err());
        let dup = "timestamp,bid1,ask1,bid2,ask2\n2024-01-01T00:00:00,1,1,1,1\n2024-01-01T00:00:00,1,1,1,1\n";
        assert!(PriceSeries::read_csv(dup.as_bytes()).is_err());
    }

    #[test]
    fn constant_series_keeps_everything() {
        let s = series_from_ratios(&[1.2; 20]);
        assert!(filter_extreme_outliers(&s).removed.is_empty());
        assert!(filter_antipersistent_outliers(&s).removed.is_empty());
    }

    #[test]
    fn extreme_outlier_removed() {
        let mut r: Vec<f64> = (0..101).map(|i| 1.0 + 0.001 * i as f64).collect();
        let mut s = r.clone();
        s.sort_by(f64::total_cmp);
        let (q1, q3) = (quantile_sorted(&s, 0.25), quantile_sorted(&s, 0.75));
        r[40] = q3 + 4.0 * (q3 - q1);
        let out = filter_extreme_outliers(&series_from_ratios(&r));
        assert_eq!(out.removed, vec![40]);
    }

    #[test]
    fn spike_removed_and_regime_shift_kept() {
        let base: Vec<f64> = (0..40).map(|i| 1.0 + 0.002 * (i % 10) as f64).collect();
        let mut s = base.clone();
        s.sort_by(f64::total_cmp);
        let iqr = quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25);
        let mut spike = base.clone();
        spike[20] = base[19] + 1.5 * iqr;
        spike[21] = base[19] + 0.01 * iqr;
        let out = filter_antipersistent_outliers(&series_from_ratios(&spike));
        assert_eq!(out.removed, vec![20]);
        let again = filter_antipersistent_outliers(&out.series);
        assert!(again.removed.is_empty());

        let mut shift = base.clone();
        for v in shift.iter_mut().skip(20) {
            *v += 3.0 * iqr;
        }
        assert!(filter_antipersistent_outliers(&series_from_ratios(&shift)).removed.is_empty());
    }

    #[test]
    fn slow_drift_untouched() {
        let r: Vec<f64> = (0..50).map(|i| 1.0 + 1e-4 * i as f64).collect();
        assert!(clean(&series_from_ratios(&r)).removed.is_empty());
    }

    #[test]
    fn cost_from_spreads() {
        let q = Quote { timestamp: ts(9, 0), bid1: 1.0, ask1: 1.001, bid2: 2.0, ask2: 2.002 };
        assert!((q.cost() - 2.0 * 1.001f64.ln()).abs() < 1e-15);
        let s = PriceSeries::new(vec![q]).unwrap();
        let (c, summary) = estimate_cost(&s, Some(0.01), 10).unwrap();
        assert!((c[0] - 0.001999).abs() < 1e-6);
        assert!((summary.mean_sigma_units.unwrap() - c[0] / 0.01).abs() < 1e-12);
        let z = Quote { ask1: 1.0, ask2: 2.0, ..q };
        assert_eq!(z.cost(), 0.0);
    }

    #[test]
    fn session_window_and_calendar() {
        let w = SessionWindow::default();
        let t = session_timestamps(20, ts(0, 0), &w, Duration::minutes(30));
        assert_eq!(t[0], ts(9, 0));
        assert_eq!(t[14], ts(16, 0));
        assert_eq!(t[15], ts(9, 0) + Duration::days(1));
        let fri = NaiveDate::from_ymd_opt(2024, 3, 8).unwrap().and_hms_opt(16, 0, 0).unwrap();
        let t = session_timestamps(2, fri, &SessionWindow { start: fri.time(), ..w }, Duration::minutes(30));
        assert_eq!(t[1].weekday(), Weekday::Mon);
    }

    #[test]
    fn grouped_likelihood_matches_pointwise() {
        let p = OuParams::new(18.51, -0.0094, 0.0893).unwrap();
        let gaps: Vec<f64> = (0..500).map(|i| if i % 15 == 14 { 0.002 } else { 5.7e-5 }).collect();
        let x = simulate_on_grid(&p, &gaps, p.eta, &mut stream_rng(3, 0));
        let data = LikelihoodData::new(&x, &gaps).unwrap();
        for q in [p, OuParams::new(5.0, 0.01, 0.05).unwrap()] {
            let a = data.log_likelihood(&q);
            let b = log_likelihood_pointwise(&x, &gaps, &q);
            assert!((a - b).abs() <= 1e-10 * b.abs(), "{a} {b}");
        }
    }

    #[test]
    fn profile_is_stationary_point() {
        let p = OuParams::new(4.0, 0.1, 0.3).unwrap();
        let gaps = vec![0.01; 800];
        let x = simulate_on_grid(&p, &gaps, p.eta, &mut stream_rng(4, 0));
        let data = LikelihoodData::new(&x, &gaps).unwrap();
        let fit = data.fit().unwrap();
        let base = data.log_likelihood(&fit.params);
        assert!((base - fit.log_likelihood).abs() < 1e-9);
        for (dk, de, ds) in [(1e-3, 0.0, 0.0), (0.0, 1e-4, 0.0), (0.0, 0.0, 1e-4)] {
            for sgn in [-1.0, 1.0] {
                let q = OuParams {
                    kappa: fit.params.kappa * (1.0 + sgn * dk),
                    eta: fit.params.eta + sgn * de,
                    sigma: fit.params.sigma * (1.0 + sgn * ds),
                };
                assert!(data.log_likelihood(&q) <= base + 1e-9);
            }
        }
    }

    #[test]
    fn two_point_profile_mean() {
        let data = LikelihoodData::new(&[0.3, 0.3, 0.5], &[0.1, 0.1]).unwrap();
        let one = LikelihoodData { groups: data.groups.clone(), ..data };
        assert!(one.profile_at_kappa(2.0).eta.is_finite());
        // a single transition with no move pins η to the level
        let g = GapGroup { dt: 0.1, n: 1.0, s_inc: 0.0, s_prev: 0.0, s_inc_inc: 0.0, s_inc_prev: 0.0, s_prev_prev: 0.0 };
        let single = LikelihoodData { groups: vec![g], n: 1, centre: 0.3, kappa_bounds: (1e-6, 1e3) };
        assert!((single.profile_at_kappa(2.0).eta - 0.3).abs() < 1e-15);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(mle_fit(&[1.0, 1.0, 1.0, 1.0], &[0.1, 0.1, 0.1]).is_err());
        assert!(mle_fit(&[1.0, 2.0], &[0.1]).is_err());
        assert!(mle_fit(&[1.0, 2.0, 1.5], &[0.1, 0.0]).is_err());
    }

    #[test]
    fn recovers_parameters_on_long_sample() {
        let p = OuParams::new(18.51, -0.0094, 0.0893).unwrap();
        let gaps = vec![0.005; 50_000];
        let x = simulate_on_grid(&p, &gaps, p.eta, &mut stream_rng(12, 0));
        let fit = mle_fit(&x, &gaps).unwrap();
        assert!((fit.params.sigma / p.sigma - 1.0).abs() < 0.02);
        assert!((fit.params.kappa / p.kappa - 1.0).abs() < 0.10);
    }

    #[test]
    fn brownian_data_gives_small_kappa() {
        let gaps = vec![0.01; 3000];
        let mut rng = stream_rng(21, 0);
        let mut x = vec![0.0];
        for _ in 0..3000 {
            let z: f64 = rand::Rng::sample(&mut rng, rand_distr::StandardNormal);
            x.push(x.last().unwrap() + 0.2 * 0.1 * z);
        }
        let data = LikelihoodData::new(&x, &gaps).unwrap();
        let fit = data.fit().unwrap();
        assert!(fit.params.kappa < 1.0, "{:?}", fit.params);
        assert!((fit.params.sigma / 0.2 - 1.0).abs() < 0.05);
        let ci = profile_interval(&data, &fit, Param::Kappa, 3.84).unwrap();
        assert!(ci.lower < 0.05);
    }

    #[test]
    fn bootstrap_is_deterministic() {
        let p = OuParams::new(18.51, -0.0094, 0.0893).unwrap();
        let gaps = vec![1.0 / (365.25 * 48.0); 600];
        let x = simulate_on_grid(&p, &gaps, p.eta, &mut stream_rng(2, 0));
        let data = LikelihoodData::new(&x, &gaps).unwrap();
        let fit = data.fit().unwrap();
        let cfg = BootstrapConfig { samples: 100, seed: 5, level: 0.95 };
        let a = bootstrap_ci(&data, &gaps, &fit, &cfg).unwrap();
        let b = bootstrap_ci(&data, &gaps, &fit, &cfg).unwrap();
        assert_eq!(a, b);
        for which in Param::ALL {
            let ci = a.profile.get(which);
            let est = which.of(&fit.params);
            assert!(ci.lower < est && est < ci.upper, "{which:?} {ci:?} {est}");
        }
        assert!(bootstrap_ci(&data, &gaps, &fit, &BootstrapConfig { samples: 10, ..cfg }).is_err());
    }
}
