use std::fmt::Display;
use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Result};
use serde_json::json;
use statarb_core::calibration::{
    self, bootstrap_ci, estimate_cost, parse_timestamp, BootstrapConfig, LikelihoodData, Param, PriceSeries,
};
use statarb_core::ou_analytics::{exit_stats, Channel, OuParams};
use statarb_core::pipeline::{run_pipeline, synthetic_series, Leverage, PipelineConfig, SyntheticSpec};
use statarb_core::report::{emit_report, format_table, write_trades_csv};
use statarb_core::simulation::{backtest, mc_exit_oracle, BacktestConfig, Fills, OracleConfig};
use statarb_core::specialfn;
use statarb_core::strategy::{combined_return, evaluate, optimize_bands, return_surface, BandSpec, LeverageMode};

use crate::args::{
    BacktestArgs, BandsArgs, CalibrateArgs, CleanArgs, CostUnits, FetArgs, FnCommand, ParamArgs, PipelineArgs,
    SimulateArgs, Toggle,
};

/// Prefixes errors with the stage that raised them.
pub trait Tagged<T> {
    fn stage(self, stage: &str) -> Result<T>;
}

impl<T, E: Display> Tagged<T> for std::result::Result<T, E> {
    fn stage(self, stage: &str) -> Result<T> {
        self.map_err(|e| anyhow!("[{stage}] {e}"))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).stage("io")
}

fn load_series(path: &Path) -> Result<PriceSeries> {
    PriceSeries::from_path(path).map_err(|e| anyhow!("[input] {}: {e}", path.display()))
}

fn print_pairs(pairs: &[(&str, String)]) {
    let width = pairs.iter().map(|p| p.0.len()).max().unwrap_or(0);
    for (k, v) in pairs {
        println!("{k:<width$} = {v}");
    }
}

pub fn resolve_params(args: &ParamArgs) -> Result<OuParams> {
    let raw = if let Some(path) = &args.params_file {
        let text = fs::read_to_string(path).map_err(|e| anyhow!("[params] {}: {e}", path.display()))?;
        match serde_json::from_str::<OuParams>(&text) {
            Ok(p) => p,
            Err(_) => toml::from_str::<OuParams>(&text).map_err(|e| anyhow!("[params] {}: {e}", path.display()))?,
        }
    } else {
        match (args.kappa, args.eta, args.sigma) {
            (Some(kappa), Some(eta), Some(sigma)) => OuParams { kappa, eta, sigma },
            _ => bail!("[params] give --kappa, --eta and --sigma or --params-file"),
        }
    };
    OuParams::new(raw.kappa, raw.eta, raw.sigma).stage("params")
}

fn parse_triple(s: &str, what: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| anyhow!("[args] {what} '{s}': {e}"))?;
    <[f64; 3]>::try_from(parts).map_err(|_| anyhow!("[args] {what} needs three comma-separated numbers, got '{s}'"))
}

pub fn clean(cfg: &PipelineConfig, args: &CleanArgs) -> Result<()> {
    let series = load_series(&args.input)?;
    let out = calibration::clean(&series);
    let target = args.output.clone().unwrap_or_else(|| cfg.output_dir.join("cleaned.csv"));
    if let Some(parent) = target.parent() {
        create_dir(parent)?;
    }
    out.series.write_csv(File::create(&target).stage("clean")?).stage("clean")?;
    let log_path = target.with_file_name("removed.csv");
    let mut log = io::BufWriter::new(File::create(&log_path).stage("clean")?);
    writeln!(log, "row,timestamp,ratio").stage("clean")?;
    for &i in &out.removed {
        let q = &series.quotes()[i];
        writeln!(log, "{i},{},{}", calibration::format_timestamp(&q.timestamp), q.ratio()).stage("clean")?;
    }
    log.flush().stage("clean")?;
    print_pairs(&[
        ("input_rows", series.len().to_string()),
        ("removed", out.removed.len().to_string()),
        ("kept", out.series.len().to_string()),
        ("output", target.display().to_string()),
        ("removed_log", log_path.display().to_string()),
    ]);
    Ok(())
}

pub fn calibrate(cfg: &PipelineConfig, args: &CalibrateArgs) -> Result<()> {
    let mut series = load_series(&args.input)?;
    if !args.no_clean {
        series = calibration::clean(&series).series;
    }
    let series = series.between(cfg.start, cfg.split.or(cfg.end));
    let series = if args.all_hours { series } else { series.session_filtered(&cfg.session) };
    let values = series.log_ratios();
    let gaps = series.gaps(cfg.clock);
    let data = LikelihoodData::new(&values, &gaps).stage("calibrate")?;
    let fit = data.fit().stage("calibrate")?;
    let samples = args.samples.unwrap_or(cfg.bootstrap_samples);
    let boot = if samples > 0 {
        let bcfg = BootstrapConfig { samples, seed: cfg.seed, level: 0.95 };
        Some(bootstrap_ci(&data, &gaps, &fit, &bcfg).stage("bootstrap")?)
    } else {
        None
    };
    let (_, cost) = estimate_cost(&series, Some(fit.params.stationary_sd()), cfg.histogram_bins).stage("cost")?;

    let ci = |which: Param, profile: bool| {
        boot.as_ref().map_or("-".to_string(), |b| {
            let i = if profile { b.profile.get(which) } else { b.percentile.get(which) };
            format!("[{:.6}, {:.6}]", i.lower, i.upper)
        })
    };
    let rows: Vec<Vec<String>> = Param::ALL
        .iter()
        .map(|&p| vec![p.name().to_string(), format!("{:.6}", p.of(&fit.params)), ci(p, false), ci(p, true)])
        .collect();
    print!("{}", format_table(&["param", "estimate", "95% CI (percentile)", "95% CI (profile)"], &rows));
    print_pairs(&[
        ("observations", series.len().to_string()),
        ("log_likelihood", format!("{:.6}", fit.log_likelihood)),
        ("stationary_sd", format!("{:.6}", fit.params.stationary_sd())),
        ("theta", format!("{:.6}", fit.params.theta())),
        ("mean_cost", format!("{:.6e}", cost.mean)),
        ("mean_cost_sigma", format!("{:.4}", cost.mean_sigma_units.unwrap_or(f64::NAN))),
        ("bootstrap_samples", samples.to_string()),
        ("seed", cfg.seed.to_string()),
    ]);

    create_dir(&cfg.output_dir)?;
    let report = json!({
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "observations": series.len(),
        "fit": fit,
        "stationary_sd": fit.params.stationary_sd(),
        "cost": cost,
        "bootstrap": boot.as_ref().map(|b| json!({
            "samples": b.samples,
            "failures": b.failures,
            "percentile": b.percentile,
            "profile": b.profile,
            "lr_cutoffs": b.lr_cutoffs,
        })),
    });
    let report_path = cfg.output_dir.join("calibration.json");
    fs::write(&report_path, serde_json::to_string_pretty(&report)?).stage("report")?;
    let params_path = cfg.output_dir.join("params.json");
    fs::write(&params_path, serde_json::to_string_pretty(&fit.params)?).stage("report")?;
    log::info!("wrote {} and {}", report_path.display(), params_path.display());
    Ok(())
}

pub fn bands(cfg: &PipelineConfig, args: &BandsArgs) -> Result<()> {
    let params = resolve_params(&args.params)?;
    let sd = params.stationary_sd();
    let stop = args.stop_loss.unwrap_or(cfg.stop_loss);
    let cost = match args.cost_units {
        CostUnits::Absolute => args.cost,
        CostUnits::Sigma => args.cost * sd,
    };
    if !(cost >= 0.0) {
        bail!("[bands] cost must be >= 0");
    }
    let leverages: Vec<Leverage> = if args.leverage.is_empty() { cfg.leverages.clone() } else { args.leverage.clone() };
    let mut rows = Vec::new();
    for lev in &leverages {
        let o = optimize_bands(stop, cost, &params, lev.0, &cfg.optimizer).stage("bands")?;
        let detail = if o.no_trade {
            None
        } else {
            let spec = BandSpec::new(o.l, o.d, o.u, cost, o.f).stage("bands")?;
            Some((evaluate(&spec, &params).stage("bands")?, combined_return(&spec, &params).stage("bands")?))
        };
        rows.push(json!({
            "leverage": lev.to_string(),
            "stop_loss": o.l,
            "entry": o.d,
            "exit": o.u,
            "entry_level": params.unscale(o.d),
            "exit_level": params.unscale(o.u),
            "stop_level": params.unscale(o.l),
            "f": o.f,
            "mu": o.mu,
            "mu_both_sides": detail.map(|d| d.1),
            "no_trade": o.no_trade,
            "hits_search_box": o.hits_search_box,
            "p_plus": detail.map(|d| d.0.p_plus),
            "f_star": detail.map(|d| d.0.f_star),
            "expected_trade_length": detail.map(|d| d.0.e_trade_length),
        }));
    }
    let report = json!({
        "params": params,
        "stationary_sd": sd,
        "cost": cost,
        "cost_sigma_units": cost / sd,
        "rows": rows,
    });
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print_pairs(&[
            ("kappa", params.kappa.to_string()),
            ("eta", params.eta.to_string()),
            ("sigma", params.sigma.to_string()),
            ("stationary_sd", format!("{sd:.6}")),
            ("cost", format!("{cost:.6e} ({:.4} sd)", cost / sd)),
        ]);
        let fmt = |v: &serde_json::Value, digits: usize| v.as_f64().map_or("-".into(), |x| format!("{x:.digits$}"));
        let table: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                vec![
                    r["leverage"].as_str().unwrap_or("").to_string(),
                    fmt(&r["f"], 3),
                    fmt(&r["entry"], 4),
                    fmt(&r["exit"], 4),
                    fmt(&r["mu"], 4),
                    fmt(&r["mu_both_sides"], 4),
                    fmt(&r["p_plus"], 4),
                    fmt(&r["f_star"], 3),
                    fmt(&r["expected_trade_length"], 5),
                ]
            })
            .collect();
        print!("{}", format_table(&["leverage", "f", "d", "u", "mu", "mu_both", "p+", "f*", "E[T]"], &table));
    }
    if args.sweep {
        create_dir(&cfg.output_dir)?;
        for lev in &leverages {
            let path = cfg.output_dir.join(format!("surface_f_{lev}.dat"));
            let mut w = io::BufWriter::new(File::create(&path).stage("report")?);
            writeln!(w, "# d u mu").stage("report")?;
            for (d, u, mu) in return_surface(stop, cost, &params, lev.0, &cfg.optimizer) {
                writeln!(w, "{d} {u} {mu}").stage("report")?;
            }
            w.flush().stage("report")?;
            log::info!("wrote {}", path.display());
        }
    }
    Ok(())
}

pub fn fet(cfg: &PipelineConfig, args: &FetArgs) -> Result<()> {
    if !(args.theta > 0.0) {
        bail!("[fet] theta must be > 0");
    }
    let ch = Channel::new(args.l, args.d, args.u).stage("fet")?;
    let st = exit_stats(&ch, args.theta).stage("fet")?;
    let mc = match args.mc_paths {
        Some(n) => {
            let params = OuParams::new(1.0 / args.theta, 0.0, (2.0 / args.theta).sqrt()).stage("fet")?;
            let ocfg = OracleConfig { n_paths: n, seed: cfg.seed, ..OracleConfig::default() };
            Some(mc_exit_oracle(&ch, &params, &ocfg).stage("simulate")?)
        }
        None => None,
    };
    if args.json {
        let report = json!({ "l": args.l, "d": args.d, "u": args.u, "theta": args.theta, "analytic": st, "monte_carlo": mc });
        println!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(());
    }
    let analytic = [
        ("p_plus", st.p_plus, mc.as_ref().map(|r| r.stats.p_plus)),
        ("p_minus", st.p_minus, mc.as_ref().map(|r| r.stats.p_minus)),
        ("fet_plus", st.e_tau_plus_exit, mc.as_ref().map(|r| r.stats.fet_plus)),
        ("fet_minus", st.e_tau_minus_exit, mc.as_ref().map(|r| r.stats.fet_minus)),
        ("fpt_stop_to_entry", st.e_fpt_up, mc.as_ref().map(|r| r.stats.fpt_up)),
        ("fpt_exit_to_entry", st.e_fpt_down, mc.as_ref().map(|r| r.stats.fpt_down)),
        ("trade_length", st.e_trade_length, mc.as_ref().map(|r| r.stats.trade_length)),
        ("trade_length_plus", st.e_trade_length_plus(), mc.as_ref().map(|r| r.stats.trade_length_plus)),
        ("trade_length_minus", st.e_trade_length_minus(), mc.as_ref().map(|r| r.stats.trade_length_minus)),
    ];
    match mc {
        None => print_pairs(&analytic.iter().map(|(k, v, _)| (*k, format!("{v:.12}"))).collect::<Vec<_>>()),
        Some(r) => {
            let rows: Vec<Vec<String>> = analytic
                .iter()
                .filter_map(|(k, v, e)| e.map(|e| (k, v, e)))
                .map(|(k, v, e)| {
                    vec![k.to_string(), format!("{v:.8}"), format!("{:.8}", e.mean), format!("{:.2e}", e.se), format!("{:+.2}", e.z_score(*v))]
                })
                .collect();
            print!("{}", format_table(&["quantity", "analytic", "mc", "se", "z"], &rows));
            println!("censored = {}, max half-step drift = {:.2} se", r.stats.censored, r.max_drift_in_se());
        }
    }
    Ok(())
}

pub fn simulate(cfg: &PipelineConfig, args: &SimulateArgs) -> Result<()> {
    let params = resolve_params(&args.params)?;
    let start = parse_timestamp(&args.start).ok_or_else(|| anyhow!("[args] bad --start '{}'", args.start))?;
    let spec = SyntheticSpec {
        params,
        start,
        bars: args.bars,
        step_minutes: args.step_minutes,
        session: args.session.then_some(cfg.session),
        cost: args.cost,
        seed: cfg.seed,
        stream: 0,
    };
    let series = synthetic_series(&spec).stage("simulate")?;
    let target = args.output.clone().unwrap_or_else(|| cfg.output_dir.join("simulated.csv"));
    if let Some(parent) = target.parent() {
        create_dir(parent)?;
    }
    series.write_csv(File::create(&target).stage("simulate")?).stage("simulate")?;
    print_pairs(&[("rows", series.len().to_string()), ("seed", cfg.seed.to_string()), ("output", target.display().to_string())]);
    Ok(())
}

pub fn run_backtest(cfg: &PipelineConfig, args: &BacktestArgs) -> Result<()> {
    let series = load_series(&args.input)?;
    let params = match (&args.params, &args.params_file) {
        (Some(s), _) => {
            let [kappa, eta, sigma] = parse_triple(s, "--params")?;
            OuParams::new(kappa, eta, sigma).stage("params")?
        }
        (None, Some(path)) => resolve_params(&ParamArgs { kappa: None, eta: None, sigma: None, params_file: Some(path.clone()) })?,
        (None, None) => bail!("[params] give --params or --params-file"),
    };
    let [l, d, u] = parse_triple(&args.bands, "--bands")?;
    let cost = match args.cost {
        Some(c) => c,
        None => estimate_cost(&series, None, cfg.histogram_bins).stage("cost")?.1.mean,
    };
    let f = match args.leverage.0 {
        LeverageMode::Fixed(f) => f,
        LeverageMode::Optimal => {
            let probe = BandSpec::new(l, d, u, cost, 1.0).stage("backtest")?;
            evaluate(&probe, &params).stage("backtest")?.f_star
        }
    };
    let bands = BandSpec::new(l, d, u, cost, f).stage("backtest")?;
    let bt_cfg = BacktestConfig {
        bands,
        params,
        fills: if args.realistic_fills { Fills::Realistic } else { cfg.fills },
        short_side: args.short_side == Toggle::On,
    };
    let r = backtest(&series.times_in_years(), &series.log_ratios(), &bt_cfg).stage("backtest")?;
    create_dir(&cfg.output_dir)?;
    let trades_path = cfg.output_dir.join("trades.csv");
    write_trades_csv(&r.trades, File::create(&trades_path).stage("report")?).stage("report")?;
    let summary = json!({
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "bands": bands,
        "params": params,
        "n_plus": r.n_plus,
        "n_minus": r.n_minus,
        "log_wealth": r.log_wealth,
        "log_wealth_from_counts": r.log_wealth_from_counts,
        "horizon": r.horizon,
        "mu_t": r.mu_t,
        "ruined": r.ruined,
    });
    fs::write(cfg.output_dir.join("backtest.json"), serde_json::to_string_pretty(&summary)?).stage("report")?;
    print_pairs(&[
        ("leverage", format!("{f}")),
        ("cost", format!("{cost:.6e}")),
        ("trades", r.trades.len().to_string()),
        ("n_plus", r.n_plus.to_string()),
        ("n_minus", r.n_minus.to_string()),
        ("log_wealth", format!("{:.8}", r.log_wealth)),
        ("horizon_years", format!("{:.6}", r.horizon)),
        ("mu_t", format!("{:.6}", r.mu_t)),
        ("ruined", r.ruined.to_string()),
        ("trades_csv", trades_path.display().to_string()),
    ]);
    Ok(())
}

pub fn pipeline(cfg: &PipelineConfig, args: &PipelineArgs) -> Result<()> {
    let data: PathBuf = args
        .input
        .clone()
        .or_else(|| cfg.data.clone())
        .ok_or_else(|| anyhow!("[config] no input file: pass one or set `data`"))?;
    let series = load_series(&data)?;
    let report = run_pipeline(cfg, &series).map_err(|e| anyhow!("{e}"))?;
    let written = emit_report(&report, &cfg.output_dir).stage("report")?;
    print!("{}", statarb_core::report::parameter_table(&report));
    println!();
    print!("{}", statarb_core::report::band_table(&report));
    for p in written {
        log::info!("wrote {}", p.display());
    }
    Ok(())
}

pub fn special_functions(cmd: &FnCommand) -> Result<()> {
    match *cmd {
        FnCommand::Eval { from, to, points } => {
            if points < 2 || !(to > from) {
                bail!("[fn] need --to > --from and at least 2 points");
            }
            println!("# x phi1 psi1 phi2 psi2 erf erfi");
            for k in 0..points {
                let x = from + (to - from) * k as f64 / (points - 1) as f64;
                let row = [
                    specialfn::phi1(x),
                    specialfn::psi1(x),
                    specialfn::phi2(x),
                    specialfn::psi2(x),
                    specialfn::erf(x),
                    specialfn::erfi(x),
                ]
                .into_iter()
                .collect::<std::result::Result<Vec<f64>, _>>()
                .stage("fn")?;
                let cells: Vec<String> = row.iter().map(|v| format!("{v:.15e}")).collect();
                println!("{x} {}", cells.join(" "));
            }
            Ok(())
        }
    }
}
