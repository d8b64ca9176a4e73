use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand};
use diffblend_experiments::runs;
use diffblend_experiments::{resolve_out_dir, ExperimentConfig, RunError, RunOptions};

#[derive(Parser)]
#[command(name = "diffblend", version, about = "Run drift-blending experiments on Gaussian-mixture priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep preference weights for every configured method.
    Pareto(Common),
    /// Compare the lambda-blended sampler with the oracle across `lambda_grid`.
    #[command(alias = "kla-sweep")]
    Kla(Common),
    /// Tabulate the gap and its bound over an (x, t) grid.
    Jensen(Common),
    /// Dump terminal samples of each method at the first preference point.
    Sample(Common),
    /// Fit one score model per reward and save it.
    Fit(Common),
    /// Run numerical checks; exits with 2 if any fails.
    Validate(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    config: PathBuf,
    /// Use a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    no_plots: bool,
    /// `key.path=value`, repeatable; applied before the flags above.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn overrides(&self) -> Vec<String> {
        let mut o = self.overrides.clone();
        if let Some(s) = self.seed {
            o.push(format!("seeds=[{s}]"));
        }
        if let Some(s) = self.steps {
            o.push(format!("sampler.steps={s}"));
        }
        if let Some(n) = self.samples {
            o.push(format!("sampler.samples={n}"));
        }
        o
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let (name, c) = match &cli.command {
        Command::Pareto(c) => ("pareto", c),
        Command::Kla(c) => ("kla", c),
        Command::Jensen(c) => ("jensen", c),
        Command::Sample(c) => ("sample", c),
        Command::Fit(c) => ("fit", c),
        Command::Validate(c) => ("validate", c),
    };
    let cfg = ExperimentConfig::load(&c.config, &c.overrides())?;
    let out = resolve_out_dir(c.out_dir.as_deref(), cfg.out_dir.as_deref(), &cfg.name);
    let mut opts = RunOptions::new(&out, name);
    opts.plots = !c.no_plots;
    let warnings = match &cli.command {
        Command::Pareto(_) => runs::run_pareto(&cfg, &opts)?.record.warnings,
        Command::Kla(_) => runs::run_kla_sweep(&cfg, &opts)?.record.warnings,
        Command::Jensen(_) => runs::run_jensen(&cfg, &opts)?.record.warnings,
        Command::Sample(_) => runs::run_sample(&cfg, &opts)?.warnings,
        Command::Fit(_) => runs::run_fit(&cfg, &opts)?.warnings,
        Command::Validate(_) => {
            runs::run_validate(&cfg, &opts).with_context(|| format!("results in {}", out.display()))?.0.warnings
        }
    };
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    println!("{name}: wrote {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<RunError>().map_or(2, RunError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
