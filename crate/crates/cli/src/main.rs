use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use homog::config::{parse_config, ProblemConfig};
use homog::pipeline;
use log::warn;

/// Periodic homogenization experiments for semilinear elliptic systems.
#[derive(Debug, Parser)]
#[command(name = "homog", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Problem description (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Overrides the seed of the config file.
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Worker threads for per-epsilon runs (default: all cores).
    #[arg(long, value_name = "INT")]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the cell problems and export the homogenized tensor.
    Homogenize(Common),
    /// Run the full pipeline for a single epsilon and export nodal values.
    Solve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        eps: f64,
    },
    /// Run the full pipeline for every configured epsilon.
    Sweep(Common),
    /// H-convergence and Meyers probes over the configured epsilons.
    Probe(Common),
}

fn load(common: &Common) -> Result<ProblemConfig> {
    let text = fs::read_to_string(&common.config).with_context(|| format!("reading {}", common.config.display()))?;
    let mut cfg = parse_config(&text).with_context(|| format!("invalid config {}", common.config.display()))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    for w in &cfg.warnings {
        warn!("{w}");
        eprintln!("WARNING: {w}");
    }
    if let Some(n) = common.threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Homogenize(c) => {
            let cfg = load(&c)?;
            let h = pipeline::homogenize_to(&cfg, &c.out)?;
            println!("homogenized tensor written to {} (Legendre margin {:.6e})", c.out.join("homogenized.json").display(), h.legendre_margin);
        }
        Command::Solve { common: c, eps } => {
            if !(eps > 0.0 && eps <= 1.0) {
                bail!("--eps must lie in (0, 1], got {eps}");
            }
            let cfg = load(&c)?;
            let run = pipeline::solve_to(&cfg, eps, &c.out)?;
            println!("eps = {eps}: {} ({})", run.status, c.out.display());
        }
        Command::Sweep(c) => {
            let cfg = load(&c)?;
            let result = pipeline::sweep_to(&cfg, &c.out)?;
            for r in &result.runs {
                println!("eps = {:<10} |u_eps - u0|_inf = {:<22} {}", r.eps, r.ueps_u0_linf.map(|v| format!("{v:.6e}")).unwrap_or_default(), r.status);
            }
            match result.fit {
                Some((s, _)) => println!("fitted slope {s:.4}"),
                None => println!("rate fit: insufficient data"),
            }
        }
        Command::Probe(c) => {
            let cfg = load(&c)?;
            let result = pipeline::probe_to(&cfg, &c.out)?;
            match result.meyers.observed_range {
                Some(p) => println!("observed Meyers range: p <= {p}"),
                None => println!("observed Meyers range: empty"),
            }
        }
    }
    Ok(())
}
