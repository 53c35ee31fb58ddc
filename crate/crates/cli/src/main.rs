use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use dbdp_cli::config::{load_config, preset, ExperimentConfig};
use dbdp_cli::run;
use dbdp_cli::OUT_DIR_ENV;

#[derive(Parser, Debug)]
#[command(name = "dbdp", version, about = "Deep backward dynamic programming for SPDE-driven BSDEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON config file (a preset name plus overrides, or a run manifest).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset to use when no config file is given.
    #[arg(long, default_value = "linear-ou")]
    preset: String,
    /// Output directory (overrides the environment and the config file).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed (overrides the config file).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every available core.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the scheme and write checkpoints, losses and the run manifest.
    Train(Common),
    /// Report error-bound diagnostics for existing checkpoints.
    Validate(Common),
    /// Train and validate for several step counts.
    SweepH {
        #[command(flatten)]
        common: Common,
        /// Comma-separated step counts (defaults to the config's schedule).
        #[arg(long, value_delimiter = ',')]
        schedule: Option<Vec<usize>>,
    },
    /// Width sweep of regression errors on the last-step targets.
    Capacity(Common),
    /// Write the training paths as CSV.
    DumpPaths(Common),
}

fn resolve(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => load_config(path)?,
        None => preset(&common.preset)?,
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    } else if let Some(env) = std::env::var_os(OUT_DIR_ENV) {
        cfg.output_dir = PathBuf::from(env);
    }
    cfg.validate()?;
    if common.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(common.threads)
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => {
            let cfg = resolve(&c)?;
            let out = cfg.output_dir.clone();
            let t = run::run_train(&cfg, &out)?;
            println!("u_0(x0) = {}", t.manifest.u0_hat);
            if let (Some(exact), Some(rel)) = (t.manifest.closed_form_u0, t.manifest.relative_error) {
                println!("closed form = {exact}, relative error = {rel:.3e}");
            }
            println!("wrote {}", out.display());
        }
        Command::Validate(c) => {
            let cfg = resolve(&c)?;
            let v = run::run_validate(&cfg, &cfg.output_dir)?;
            let r = &v.report;
            match (r.lhs_total, r.lhs_total_se) {
                (Some(l), Some(se)) => println!("lhs = {l:.6e} +- {se:.1e}"),
                _ => println!("rhs-only report (no closed-form solution)"),
            }
            println!(
                "u_0(x0) = {}, reference = {}, relative error = {:.3e}",
                v.validation.u0_hat,
                v.validation.reference.value(),
                v.validation.relative_error
            );
        }
        Command::SweepH { common, schedule } => {
            let cfg = resolve(&common)?;
            let schedule = schedule.unwrap_or_else(|| cfg.sweep.schedule.clone());
            let s = run::run_sweep(&cfg, &schedule, &cfg.output_dir)?;
            if let Some(t) = s.trend {
                for ((n, l), se) in t.steps.iter().zip(&t.lhs).zip(&t.lhs_se) {
                    println!("N = {n:>4}: lhs = {l:.6e} +- {se:.1e}");
                }
                println!("non-increasing: {}", t.non_increasing);
            }
        }
        Command::Capacity(c) => {
            let cfg = resolve(&c)?;
            let r = run::run_capacity(&cfg, &cfg.output_dir)?;
            for (v, z) in r.value.per_width.iter().zip(&r.gradient.per_width) {
                println!("width {:>4}: eps_v = {:.4e}, eps_z = {:.4e}", v.width, v.best, z.best);
            }
            println!("monotone: v {}, z {}", r.value_monotone, r.gradient_monotone);
        }
        Command::DumpPaths(c) => {
            let cfg = resolve(&c)?;
            let (s, i) = run::run_dump_paths(&cfg, &cfg.output_dir)?;
            println!("wrote {} and {}", s.display(), i.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
