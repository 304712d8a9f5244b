//! Report files: JSON summary, aligned text tables and plain-column data.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use crate::calibration::{Interval, Param};
use crate::pipeline::PipelineReport;
use crate::simulation::{ExitKind, Side, Trade};

/// Left-aligned first column, right-aligned rest, padded to the widest cell.
pub fn format_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let cols = headers.len();
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (k, cell) in r.iter().enumerate().take(cols) {
            widths[k] = widths[k].max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        cells
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let pad = widths[k] - c.chars().count();
                if k == 0 {
                    format!("{c}{}", " ".repeat(pad))
                } else {
                    format!("{}{c}", " ".repeat(pad))
                }
            })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = line(headers.to_vec());
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

fn ci(i: Option<Interval>, digits: usize) -> String {
    match i {
        Some(i) => format!("[{:.*}, {:.*}]", digits, i.lower, digits, i.upper),
        None => "-".into(),
    }
}

/// Parameter estimates with percentile and profile intervals.
pub fn parameter_table(r: &PipelineReport) -> String {
    let fit = &r.calibration.fit.params;
    let boot = r.calibration.bootstrap.as_ref();
    let rows = Param::ALL
        .iter()
        .map(|p| {
            vec![
                p.name().to_string(),
                format!("{:.6}", p.of(fit)),
                ci(boot.map(|b| b.percentile.get(*p)), 6),
                ci(boot.map(|b| b.profile.get(*p)), 6),
            ]
        })
        .collect::<Vec<_>>();
    let mut out = format_table(&["param", "estimate", "95% CI (percentile)", "95% CI (profile)"], &rows);
    out.push_str(&format!(
        "stationary sd = {:.6}, observations = {}, log-likelihood = {:.4}\n",
        r.calibration.stationary_sd, r.calibration.observations, r.calibration.fit.log_likelihood
    ));
    out
}

/// Bands and long-run return per leverage, with bootstrap intervals and the
/// out-of-sample realised return.
pub fn band_table(r: &PipelineReport) -> String {
    let rows = r
        .rows
        .iter()
        .map(|row| {
            let o = &row.optimum;
            let f = match row.leverage.0 {
                crate::strategy::LeverageMode::Optimal => format!("f*={:.3}", o.f),
                crate::strategy::LeverageMode::Fixed(v) => format!("{v}"),
            };
            vec![
                f,
                format!("{:.4}", o.d),
                ci(row.ci.as_ref().map(|c| c.d), 4),
                format!("{:.4}", o.u),
                ci(row.ci.as_ref().map(|c| c.u), 4),
                format!("{:.4}", o.mu),
                ci(row.ci.as_ref().map(|c| c.mu), 4),
                row.out_of_sample.as_ref().map_or("-".into(), |os| format!("{:.4}", os.mu)),
            ]
        })
        .collect::<Vec<_>>();
    format_table(&["f", "d", "CI", "u", "CI", "mu", "CI", "mu_OS"], &rows)
}

pub fn write_trades_csv<W: Write>(trades: &[Trade], w: W) -> io::Result<()> {
    let mut w = io::BufWriter::new(w);
    writeln!(w, "side,entry_time,exit_time,entry_level,exit_level,exit,v,wealth_factor,wealth_after")?;
    for t in trades {
        let side = match t.side {
            Side::Long => "long",
            Side::Short => "short",
        };
        let exit = match t.exit {
            ExitKind::Target => "target",
            ExitKind::Stop => "stop",
        };
        writeln!(
            w,
            "{side},{},{},{},{},{exit},{},{},{}",
            t.entry_time, t.exit_time, t.entry_level, t.exit_level, t.v, t.wealth_factor, t.wealth_after
        )?;
    }
    w.flush()
}

fn write_file(dir: &Path, name: &str, body: &str, written: &mut Vec<PathBuf>) -> io::Result<()> {
    let p = dir.join(name);
    fs::write(&p, body)?;
    written.push(p);
    Ok(())
}

/// Writes the report bundle into `dir` and returns the paths written.
pub fn emit_report(r: &PipelineReport, dir: &Path) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let json = serde_json::to_string_pretty(r).map_err(io::Error::other)?;
    write_file(dir, "report.json", &json, &mut written)?;
    write_file(dir, "parameters.txt", &parameter_table(r), &mut written)?;
    write_file(dir, "bands.txt", &band_table(r), &mut written)?;

    let h = &r.cost.histogram;
    let mut hist = String::from("# left right count\n");
    for (k, c) in h.counts.iter().enumerate() {
        hist.push_str(&format!("{} {} {}\n", h.edges[k], h.edges[k + 1], c));
    }
    write_file(dir, "cost_histogram.dat", &hist, &mut written)?;

    if !r.cost_sweep.is_empty() {
        let mut s = String::from("# c_sigma d u mu f\n");
        for (c, o) in &r.cost_sweep {
            s.push_str(&format!("{c} {} {} {} {}\n", o.d, o.u, o.mu, o.f));
        }
        write_file(dir, "cost_sweep.dat", &s, &mut written)?;
    }

    let with_os: Vec<_> = r.rows.iter().filter(|row| row.out_of_sample.is_some()).collect();
    for (row, bt) in with_os.iter().zip(&r.backtests) {
        let p = dir.join(format!("trades_f_{}.csv", row.leverage));
        write_trades_csv(&bt.trades, fs::File::create(&p)?)?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_columns_align() {
        let t = format_table(&["f", "mu"], &[vec!["1".into(), "0.1450".into()], vec!["10".into(), "1.2".into()]]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines.iter().all(|l| l.len() == lines[0].len()));
        assert!(lines[3].ends_with("   1.2"));
    }

    #[test]
    fn empty_trade_log_has_header() {
        let mut buf = Vec::new();
        write_trades_csv(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1);
    }
}
