//! `bsde-lab`: runs one experiment, writes its table as CSV and a `.meta`
//! sidecar next to it.
//!
//! Exit codes: 0 on success, 2 for configuration and I/O errors, 3 when a
//! solver fails or a run violates its own acceptance threshold.

mod commands;
mod config;
mod error;
mod expr;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use config::Config;
use error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "bsde-lab", version, about = "Discrete BSDE experiments on Rademacher trees")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output CSV path; the sidecar is written to `<out>.meta`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides a configuration key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct TreeArgs {
    /// Number of steps.
    #[arg(long = "N")]
    n_steps: Option<usize>,
    /// Horizon.
    #[arg(long = "T")]
    horizon: Option<f64>,
    /// Noise dimension (1 or 2).
    #[arg(long)]
    d: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Norm table and slice counts for an adapted process.
    Norms {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        tree: TreeArgs,
        /// Process expression in b, b1, b2, t, T, N, level.
        #[arg(long)]
        gamma: Option<String>,
        /// Comma-separated slice budgets.
        #[arg(long)]
        delta: Option<String>,
        /// greedy or deterministic.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Linear solvers against the backward oracle on random instances.
    Linear {
        #[command(flatten)]
        common: Common,
        /// Run the suite over consecutive seeds.
        #[arg(long = "oracle-suite", alias = "oracle_suite")]
        oracle_suite: bool,
        /// Number of seeds in the suite.
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Non-uniqueness report for the sphere instance.
    Counterexample {
        #[command(flatten)]
        common: Common,
        /// Comma-separated tree depths.
        #[arg(long)]
        depths: Option<String>,
    },
    /// Reverse Hölder ratios of a stochastic exponential.
    ReverseHolder {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        depths: Option<String>,
        /// Comma-separated exponents.
        #[arg(long)]
        p: Option<String>,
        /// counterexample or scalar.
        #[arg(long)]
        source: Option<String>,
        /// Scalar coefficient expression (source = scalar).
        #[arg(long)]
        coefficient: Option<String>,
    },
    /// Quadratic system by truncation.
    Quadratic {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        tree: TreeArgs,
        #[arg(long)]
        driver: Option<String>,
        #[arg(long)]
        n: Option<usize>,
        /// Terminal expression; a tuple for n > 1.
        #[arg(long)]
        terminal: Option<String>,
    },
    /// Stability of the quadratic solution under perturbation.
    Stability {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        tree: TreeArgs,
        #[arg(long)]
        driver: Option<String>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        terminal: Option<String>,
        /// terminal or shift.
        #[arg(long)]
        perturbation: Option<String>,
        /// Comma-separated perturbation sizes.
        #[arg(long)]
        eps: Option<String>,
    },
}

type ApplyFlags = Box<dyn FnOnce(&mut Config)>;

fn put(cfg: &mut Config, key: &str, value: Option<impl ToString>) {
    if let Some(v) = value {
        cfg.set(key, v);
    }
}

fn put_tree(cfg: &mut Config, tree: TreeArgs) {
    put(cfg, "N", tree.n_steps);
    put(cfg, "T", tree.horizon);
    put(cfg, "d", tree.d);
}

/// Resolves the configuration: file first, then `--set`, then dedicated flags.
fn prepare(cli: Cli) -> CliResult<(&'static str, Config)> {
    let (name, common, flags): (&'static str, Common, ApplyFlags) = match cli.command {
        Command::Norms {
            common,
            tree,
            gamma,
            delta,
            mode,
        } => (
            "norms",
            common,
            Box::new(move |c| {
                put_tree(c, tree);
                put(c, "gamma", gamma);
                put(c, "delta", delta);
                put(c, "mode", mode);
            }),
        ),
        Command::Linear {
            common,
            oracle_suite,
            seeds,
            delta,
        } => (
            "linear",
            common,
            Box::new(move |c| {
                if oracle_suite {
                    c.set("oracle_suite", true);
                }
                put(c, "seeds", seeds);
                put(c, "delta", delta);
            }),
        ),
        Command::Counterexample { common, depths } => {
            ("counterexample", common, Box::new(move |c| put(c, "depths", depths)))
        }
        Command::ReverseHolder {
            common,
            depths,
            p,
            source,
            coefficient,
        } => (
            "reverse-holder",
            common,
            Box::new(move |c| {
                put(c, "depths", depths);
                put(c, "p", p);
                put(c, "source", source);
                put(c, "coefficient", coefficient);
            }),
        ),
        Command::Quadratic {
            common,
            tree,
            driver,
            n,
            terminal,
        } => (
            "quadratic",
            common,
            Box::new(move |c| {
                put_tree(c, tree);
                put(c, "driver", driver);
                put(c, "n", n);
                put(c, "terminal", terminal);
            }),
        ),
        Command::Stability {
            common,
            tree,
            driver,
            n,
            terminal,
            perturbation,
            eps,
        } => (
            "stability",
            common,
            Box::new(move |c| {
                put_tree(c, tree);
                put(c, "driver", driver);
                put(c, "n", n);
                put(c, "terminal", terminal);
                put(c, "perturbation", perturbation);
                put(c, "eps", eps);
            }),
        ),
    };
    let mut cfg = match &common.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    for pair in &common.set {
        cfg.set_pair(pair)?;
    }
    flags(&mut cfg);
    put(&mut cfg, "out", common.out.as_ref().map(|p| p.display().to_string()));
    put(&mut cfg, "seed", common.seed);
    Ok((name, cfg))
}

fn execute(cli: Cli) -> CliResult<()> {
    let started = Instant::now();
    let (name, cfg) = prepare(cli)?;
    if !cfg.contains("out") {
        return Err(CliError::Config(
            "an output path is required (--out or out = ...)".into(),
        ));
    }
    let out = PathBuf::from(cfg.string("out", ""));
    let seed = cfg.parsed("seed", 0u64)?;
    let outcome = commands::run(name, &cfg, seed)?;
    output::write_csv(&out, &outcome.table)?;
    output::write_sidecar(&out, name, &cfg.resolved(), started.elapsed())?;
    match outcome.failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
