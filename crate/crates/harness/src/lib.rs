//! Experiment harness for frictionlab: JSON configs, the experiments behind
//! the `frictionlab` command line, and CSV reports.

pub mod cli;
pub mod config;
pub mod error;
pub mod experiments;
pub mod report;

use std::path::{Path, PathBuf};

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result, EXIT_BREACH};

/// Subcommands of the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Price,
    Dual,
    Converge,
    Hjb,
    Verify,
    Premium,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Price => "price",
            Command::Dual => "dual",
            Command::Converge => "converge",
            Command::Hjb => "hjb",
            Command::Verify => "verify",
            Command::Premium => "premium",
        }
    }
}

/// Files written by a run and the checks that did not hold.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub breaches: Vec<String>,
    /// One human-readable line per row.
    pub summary: Vec<String>,
}

fn write(dir: &Path, name: &str, contents: &str, files: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|source| HarnessError::Io { path: path.display().to_string(), source })?;
    files.push(path);
    Ok(())
}

/// Runs `command` and writes its CSV files into `out`. Wall-clock timings go
/// to `timings_<command>.csv` so the other files are reproducible.
pub fn run(command: Command, cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    std::fs::create_dir_all(out).map_err(|source| HarnessError::Io { path: out.display().to_string(), source })?;
    let mut o = Outcome::default();
    let timings = match command {
        Command::Price => {
            let r = experiments::run_price(cfg)?;
            write(out, "price.csv", &report::price_csv(&r), &mut o.files)?;
            for (n, s) in &r.strategies {
                write(out, &format!("strategy_n{n}.txt"), &s.to_text(), &mut o.files)?;
            }
            o.summary = r.rows.iter().map(|x| format!("n={} {} value={:.10}", x.n, x.engine.name(), x.value)).collect();
            r.timings
        }
        Command::Dual => {
            let r = experiments::run_duality_check(cfg)?;
            write(out, "duality.csv", &report::duality_csv(&r), &mut o.files)?;
            o.summary = r
                .rows
                .iter()
                .map(|x| format!("n={} primal={:.10} dual={:.10} rel_gap={:.3e}", x.n, x.primal, x.dual, x.rel_gap))
                .collect();
            o.breaches = r.breaches;
            r.timings
        }
        Command::Converge => {
            let r = experiments::run_convergence(cfg)?;
            write(out, "convergence.csv", &report::convergence_csv(&r), &mut o.files)?;
            write(out, "convergence_summary.csv", &report::convergence_summary_csv(&r), &mut o.files)?;
            o.summary = r
                .rows
                .iter()
                .map(|x| match x.rel_gap {
                    Some(g) => format!("n={} primal={:.10} rel_gap={g:.3e}", x.n, x.primal),
                    None => format!("n={} primal={:.10}", x.n, x.primal),
                })
                .collect();
            o.breaches = r.breaches;
            r.timings
        }
        Command::Hjb => {
            let r = experiments::run_hjb(cfg)?;
            write(out, "hjb.csv", &report::hjb_csv(&r), &mut o.files)?;
            write(out, "hjb_surface.csv", &r.solution.to_csv(), &mut o.files)?;
            o.summary = vec![format!("value={:.10}", r.solution.value)];
            r.timings
        }
        Command::Verify => {
            let r = experiments::run_verify(cfg)?;
            write(out, "verify.csv", &report::verify_csv(&r), &mut o.files)?;
            o.summary = r.rows.iter().map(|x| format!("n={} min_slack={:.3e}", x.n, x.min_slack)).collect();
            o.breaches = r.breaches;
            r.timings
        }
        Command::Premium => {
            let r = experiments::run_premium_probe(cfg)?;
            write(out, "premium.csv", &report::premium_csv(&r), &mut o.files)?;
            o.summary = vec![format!("eps={} premium={:.10}", r.report.eps, r.report.premium)];
            r.timings
        }
    };
    write(out, &format!("timings_{}.csv", command.name()), &report::timings_csv(&timings), &mut o.files)?;
    Ok(o)
}
