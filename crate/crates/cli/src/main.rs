#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod args;
mod commands;

use std::fs;
use std::process::ExitCode;

use anyhow::{anyhow, Result};
use clap::Parser;
use statarb_core::pipeline::PipelineConfig;

use crate::args::{Cli, Command};

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| anyhow!("[config] {}: {e}", path.display()))?;
            toml::from_str::<PipelineConfig>(&text).map_err(|e| anyhow!("[config] {}: {e}", path.display()))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = dir.clone();
    }
    cfg.validate().map_err(|e| anyhow!("{e}"))?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Clean(a) => commands::clean(&cfg, a),
        Command::Calibrate(a) => commands::calibrate(&cfg, a),
        Command::Bands(a) => commands::bands(&cfg, a),
        Command::Fet(a) => commands::fet(&cfg, a),
        Command::Simulate(a) => commands::simulate(&cfg, a),
        Command::Backtest(a) => commands::run_backtest(&cfg, a),
        Command::Pipeline(a) => commands::pipeline(&cfg, a),
        Command::Fn { command } => commands::special_functions(command),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
