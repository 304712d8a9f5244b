use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use statarb_core::pipeline::Leverage;

#[derive(Debug, Parser)]
#[command(name = "ou-statarb", version, about = "Optimal mean-reversion bands with stop-loss on an OU spread")]
pub struct Cli {
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for output files; overrides the config file.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// TOML file whose keys mirror the pipeline configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Remove extreme and antipersistent outliers from a quote file.
    Clean(CleanArgs),
    /// Maximum-likelihood OU fit with bootstrap intervals.
    Calibrate(CalibrateArgs),
    /// Optimal entry and exit bands for a stop-loss.
    Bands(BandsArgs),
    /// Exit probabilities and expected exit and passage times.
    Fet(FetArgs),
    /// Write a synthetic quote file from an OU process.
    Simulate(SimulateArgs),
    /// Replay the band strategy over a quote file.
    Backtest(BacktestArgs),
    /// Clean, calibrate, choose bands and test out of sample.
    Pipeline(PipelineArgs),
    /// Special-function utilities.
    Fn {
        #[command(subcommand)]
        command: FnCommand,
    },
}

#[derive(Debug, Args)]
pub struct CleanArgs {
    /// Quote CSV: timestamp,bid1,ask1,bid2,ask2.
    pub input: PathBuf,
    /// Cleaned CSV; defaults to `<output-dir>/cleaned.csv`.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    pub input: PathBuf,
    /// Bootstrap samples; 0 skips the bootstrap.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Fit on every bar instead of the configured session window.
    #[arg(long)]
    pub all_hours: bool,
    /// Skip the outlier filters.
    #[arg(long)]
    pub no_clean: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ParamArgs {
    #[arg(long, requires_all = ["eta", "sigma"])]
    pub kappa: Option<f64>,
    #[arg(long, requires_all = ["kappa", "sigma"], allow_hyphen_values = true)]
    pub eta: Option<f64>,
    #[arg(long, requires_all = ["kappa", "eta"])]
    pub sigma: Option<f64>,
    /// JSON or TOML file with `kappa`, `eta` and `sigma` (as written by `calibrate`).
    #[arg(long, conflicts_with_all = ["kappa", "eta", "sigma"])]
    pub params_file: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CostUnits {
    /// Log-return units.
    Absolute,
    /// Multiples of the stationary deviation.
    Sigma,
}

#[derive(Debug, Args)]
pub struct BandsArgs {
    #[command(flatten)]
    pub params: ParamArgs,
    /// Stop-loss in units of the stationary deviation.
    #[arg(long, allow_hyphen_values = true)]
    pub stop_loss: Option<f64>,
    /// Round-trip transaction cost.
    #[arg(long, default_value_t = 0.0)]
    pub cost: f64,
    #[arg(long, value_enum, default_value_t = CostUnits::Sigma)]
    pub cost_units: CostUnits,
    /// Number or `opt`; repeat for several rows.
    #[arg(long)]
    pub leverage: Vec<Leverage>,
    /// Also write the return surface over the (d, u) grid.
    #[arg(long)]
    pub sweep: bool,
    /// Print JSON instead of key-value lines.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct FetArgs {
    /// Stop-loss, entry and exit bands in stationary-deviation units.
    #[arg(long, allow_hyphen_values = true)]
    pub l: f64,
    #[arg(long, allow_hyphen_values = true)]
    pub d: f64,
    #[arg(long, allow_hyphen_values = true)]
    pub u: f64,
    /// Mean-reversion time 1/κ.
    #[arg(long, default_value_t = 1.0)]
    pub theta: f64,
    /// Also estimate the same quantities from this many simulated paths.
    #[arg(long)]
    pub mc_paths: Option<usize>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub params: ParamArgs,
    #[arg(long, default_value_t = 17_520)]
    pub bars: usize,
    #[arg(long, default_value_t = 30)]
    pub step_minutes: i64,
    /// First timestamp (ISO-8601).
    #[arg(long, default_value = "2023-01-02T00:00:00")]
    pub start: String,
    /// Only emit bars inside the configured session window.
    #[arg(long)]
    pub session: bool,
    /// Round-trip bid-ask cost embedded in the quotes.
    #[arg(long, default_value_t = 0.0)]
    pub cost: f64,
    /// Output CSV; defaults to `<output-dir>/simulated.csv`.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct BacktestArgs {
    pub input: PathBuf,
    /// `l,d,u` in stationary-deviation units.
    #[arg(long, allow_hyphen_values = true)]
    pub bands: String,
    #[arg(long, default_value = "1")]
    pub leverage: Leverage,
    /// Absolute round-trip cost; defaults to the mean bid-ask cost of the file.
    #[arg(long)]
    pub cost: Option<f64>,
    /// `kappa,eta,sigma`.
    #[arg(long, allow_hyphen_values = true, conflicts_with = "params_file")]
    pub params: Option<String>,
    #[arg(long)]
    pub params_file: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Toggle::Off)]
    pub short_side: Toggle,
    /// Settle exits at observed prices rather than at the band levels.
    #[arg(long)]
    pub realistic_fills: bool,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Quote CSV; overrides `data` in the config file.
    pub input: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum FnCommand {
    /// Tabulate the special functions on a uniform grid.
    Eval {
        #[arg(long, default_value_t = -3.0, allow_hyphen_values = true)]
        from: f64,
        #[arg(long, default_value_t = 3.0, allow_hyphen_values = true)]
        to: f64,
        #[arg(long, default_value_t = 61)]
        points: usize,
    },
}
