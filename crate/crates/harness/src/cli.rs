//! Command line: `frictionlab <subcommand> --config <file> [--out <dir>]
//! [--threads <k>] [--seed <u64>]`, each flag also read from `FRICTIONLAB_*`.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::{HarnessError, Result, EXIT_BREACH};
use crate::{run, Command, ExperimentConfig};

#[derive(Debug, Parser)]
#[command(name = "frictionlab", version, about = "Super-replication under convex trading friction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,

    /// Experiment config (JSON).
    #[arg(long, global = true, env = "FRICTIONLAB_CONFIG")]
    pub config: Option<PathBuf>,

    /// Output directory; defaults to the config's `output.dir`, else `out/` next to the config.
    #[arg(long, global = true, env = "FRICTIONLAB_OUT")]
    pub out: Option<PathBuf>,

    /// Worker threads; defaults to all cores.
    #[arg(long, global = true, env = "FRICTIONLAB_THREADS")]
    pub threads: Option<usize>,

    /// Seed for randomised starts; overrides the config.
    #[arg(long, global = true, env = "FRICTIONLAB_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand, Clone, Copy, PartialEq, Eq)]
pub enum Cmd {
    /// One primal solve per n.
    Price,
    /// Primal against dual, with the relative gap.
    Dual,
    /// Convergence of the discrete prices to the limit.
    Converge,
    /// Limit equation only.
    Hjb,
    /// Audit a strategy on every path.
    Verify,
    /// Liquidity premium over the frictionless price.
    Premium,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Price => Command::Price,
            Cmd::Dual => Command::Dual,
            Cmd::Converge => Command::Converge,
            Cmd::Hjb => Command::Hjb,
            Cmd::Verify => Command::Verify,
            Cmd::Premium => Command::Premium,
        }
    }
}

/// Runs a parsed command line and returns its exit code.
pub fn execute(cli: &Cli) -> Result<i32> {
    let path = cli.config.as_ref().ok_or_else(|| HarnessError::Config("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli.out.clone().unwrap_or_else(|| cfg.output_dir());
    let command = cli.command.into();
    let outcome = match cli.threads {
        Some(0) => return Err(HarnessError::Config("--threads must be positive".into())),
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| HarnessError::Config(e.to_string()))?
            .install(|| run(command, &cfg, &out))?,
        None => run(command, &cfg, &out)?,
    };
    for line in &outcome.summary {
        println!("{line}");
    }
    for f in &outcome.files {
        println!("wrote {}", f.display());
    }
    if outcome.breaches.is_empty() {
        return Ok(0);
    }
    for b in &outcome.breaches {
        eprintln!("threshold breach: {b}");
    }
    Ok(EXIT_BREACH)
}

/// Parses `args` (program name first), runs, and maps failures to exit codes.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    fn write_config(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("config.json");
        std::fs::write(&path, body).unwrap();
        path
    }

    fn config(ns: &str, penalty: &str, claim: &str, extra: &str) -> String {
        format!(
            r#"{{"schema_version": 1, "market": {{"n": {ns}, "sigma": 0.2, "s0": 100}},
                "penalty": {penalty}, "claim": {claim} {extra}}}"#
        )
    }

    const CALL: &str = r#"{"kind": "call", "strike": 100}"#;
    const QUAD: &str = r#"{"kind": "quadratic", "lambda": 0.5}"#;
    const TZERO: &str = r#"{"kind": "truncated_zero", "c": 0.1}"#;

    fn cli(sub: &str, cfg: &Path, out: &Path, extra: &[&str]) -> i32 {
        let mut args = vec!["frictionlab", sub, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
        args.extend(extra);
        main_with(args)
    }

    #[test]
    fn dual_writes_gap_table() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), &config("[1, 2]", QUAD, CALL, ""));
        let out = dir.path().join("res");
        assert_eq!(cli("dual", &cfg, &out, &[]), 0);
        let csv = std::fs::read_to_string(out.join("duality.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "n,primal,dual,upper_bound,rel_gap,method,iterations");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("2,7.3287"), "{}", lines[2]);
        assert!(out.join("timings_dual.csv").exists());
    }

    #[test]
    fn reruns_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), &config("[8, 16, 24]", TZERO, CALL, r#", "kusuoka_a": 0.05"#));
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        assert_eq!(cli("converge", &cfg, &a, &[]), 0);
        assert_eq!(cli("converge", &cfg, &b, &["--threads", "1"]), 0);
        for f in ["convergence.csv", "convergence_summary.csv"] {
            assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn exit_codes() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let at = |name: &str, body: String| {
            let p = dir.path().join(name);
            std::fs::write(&p, body).unwrap();
            p
        };

        assert_eq!(cli("price", &at("bad.json", config("[2, 1]", QUAD, CALL, "")), &out, &[]), 2);
        assert_eq!(cli("price", &dir.path().join("nope.json"), &out, &[]), 2);
        assert_eq!(main_with(["frictionlab", "frobnicate"]), 2);
        assert_eq!(main_with(["frictionlab", "--help"]), 0);

        let ok = at("ok.json", config("[1]", QUAD, CALL, ""));
        assert_eq!(cli("price", &ok, &out, &["--threads", "0"]), 2);
        assert_eq!(cli("dual", &at("big.json", config("[15]", QUAD, CALL, "")), &out, &[]), 4);
        assert_eq!(cli("hjb", &ok, &out, &[]), 4);
        assert_eq!(cli("premium", &ok, &out, &[]), 2);

        let tight = at("tight.json", config("[8]", TZERO, CALL, r#", "thresholds": {"convergence_gap": 1e-9}"#));
        assert_eq!(cli("converge", &tight, &out, &[]), 3);

        let blocked = dir.path().join("file");
        std::fs::write(&blocked, "").unwrap();
        assert_eq!(cli("price", &ok, &blocked.join("sub"), &[]), 1);
    }

    #[test]
    fn flags_read_the_environment() {
        let cmd = <Cli as clap::CommandFactory>::command();
        for (id, var) in [
            ("config", "FRICTIONLAB_CONFIG"),
            ("out", "FRICTIONLAB_OUT"),
            ("threads", "FRICTIONLAB_THREADS"),
            ("seed", "FRICTIONLAB_SEED"),
        ] {
            let arg = cmd.get_arguments().find(|a| a.get_id() == id).unwrap();
            assert_eq!(arg.get_env(), Some(std::ffi::OsStr::new(var)));
        }
        let parsed = Cli::try_parse_from(["frictionlab", "dual", "--seed", "7"]).unwrap();
        assert_eq!((parsed.command, parsed.seed), (Cmd::Dual, Some(7)));
    }

    #[test]
    fn price_then_verify_strategy_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), &config("[5]", QUAD, CALL, r#", "engine": "exact""#));
        let out = dir.path().join("p");
        assert_eq!(cli("price", &cfg, &out, &[]), 0);
        assert!(out.join("strategy_n5.txt").exists());

        let cfg = write_config(dir.path(), &config("[5]", QUAD, CALL, r#", "strategy_file": "p/strategy_n5.txt""#));
        let v = dir.path().join("v");
        assert_eq!(cli("verify", &cfg, &v, &[]), 0);
        let csv = std::fs::read_to_string(v.join("verify.csv")).unwrap();
        assert!(csv.lines().nth(1).unwrap().starts_with("5,"));
    }

    #[test]
    fn hjb_and_premium_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let body = config("[1]", TZERO, CALL, r#", "grids": {"hjb_nx": 201}, "premium": {"eps": 0.05}"#);
        let cfg = write_config(dir.path(), &body);
        let out = dir.path().join("o");
        assert_eq!(cli("hjb", &cfg, &out, &[]), 0);
        let surface = std::fs::read_to_string(out.join("hjb_surface.csv")).unwrap();
        assert_eq!(surface.lines().next(), Some("t,x,v"));
        let rows = surface.lines().count() - 1;
        assert!(rows % 201 == 0 && rows / 201 >= 11, "{rows}");
        assert_eq!(cli("premium", &cfg, &out, &[]), 0);
        let premium = std::fs::read_to_string(out.join("premium.csv")).unwrap();
        let row: Vec<&str> = premium.lines().nth(1).unwrap().split(',').collect();
        let p: f64 = row[3].parse().unwrap();
        let closed: f64 = row[4].parse().unwrap();
        assert!(p > 0.0 && (p - closed).abs() < 1e-3, "{p} {closed}");
    }
}
