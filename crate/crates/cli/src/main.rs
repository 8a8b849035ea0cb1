use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dse_core::error::{Error, Result};
use dse_core::harness::{
    phase_mobo, phase_offline, phase_online, phase_prepare, ExperimentConfig,
};
use dse_core::report::phase_report;

#[derive(Parser)]
#[command(
    name = "dse",
    version,
    about = "Diffusion-guided design space exploration for systolic-array accelerators"
)]
struct Cli {
    /// Experiment configuration file (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the output directory.
    #[arg(long, global = true)]
    outdir: Option<PathBuf>,

    /// Override the root seed for every derived random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the oracle's own seed.
    #[arg(long, global = true)]
    oracle_seed: Option<u64>,

    /// Override the online evaluation budget.
    #[arg(long, global = true)]
    budget: Option<u64>,

    /// Override the number of unlabeled configurations drawn.
    #[arg(long, global = true)]
    unlabeled: Option<usize>,

    /// Override the number of labeled configurations.
    #[arg(long, global = true)]
    labeled: Option<usize>,

    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Draw the offline corpus and write the run manifest.
    Prepare,
    /// Train the denoiser and predictor, seed the archive.
    Offline,
    /// Run the guided online exploration loop.
    Online,
    /// Run the Bayesian-optimization baseline.
    Mobo,
    /// Emit report files from a completed run directory.
    Report,
    /// All phases in order.
    All,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_path(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(outdir) = &cli.outdir {
        cfg.outdir = outdir.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(seed) = cli.oracle_seed {
        cfg.oracle.seed = seed;
    }
    if let Some(budget) = cli.budget {
        cfg.online.budget = budget;
    }
    if let Some(unlabeled) = cli.unlabeled {
        cfg.data.unlabeled = unlabeled;
    }
    if let Some(labeled) = cli.labeled {
        cfg.data.labeled = labeled;
    }
    // Overrides can break invariants the file satisfied.
    cfg.validate()?;
    Ok(cfg)
}

fn prepare(cfg: &ExperimentConfig) -> Result<()> {
    let data = phase_prepare(cfg)?;
    println!(
        "prepared {} unlabeled, {} labeled, {} augmented -> {}",
        data.unlabeled.len(),
        data.labeled.len(),
        data.augmented.len(),
        cfg.data_dir().display()
    );
    Ok(())
}

fn offline(cfg: &ExperimentConfig) -> Result<()> {
    let artifacts = phase_offline(cfg)?;
    println!(
        "offline hypervolume {:.6}, predictor holdout rmse {:.6} -> {}",
        artifacts.archive.hypervolume(),
        artifacts.predictor_rmse,
        cfg.offline_dir().display()
    );
    Ok(())
}

fn online(cfg: &ExperimentConfig) -> Result<()> {
    let outcome = phase_online(cfg)?;
    let hvi = outcome.records.last().map_or(0.0, |r| r.hvi_offline);
    println!(
        "online spent {} evaluations, hypervolume improvement {:.6} -> {}",
        outcome.records.len(),
        hvi,
        cfg.online_dir().display()
    );
    if let Some(reason) = &outcome.termination {
        println!("online ended early: {reason}");
    }
    Ok(())
}

fn mobo(cfg: &ExperimentConfig) -> Result<()> {
    let outcome = phase_mobo(cfg)?;
    let hvi = outcome.records.last().map_or(0.0, |r| r.hvi_offline);
    println!(
        "baseline spent {} evaluations, hypervolume improvement {:.6} -> {}",
        outcome.records.len(),
        hvi,
        cfg.mobo_dir().display()
    );
    if let Some(reason) = &outcome.termination {
        println!("baseline ended early: {reason}");
    }
    Ok(())
}

fn report(cfg: &ExperimentConfig) -> Result<()> {
    let summary = phase_report(cfg)?;
    println!(
        "diffusion hvi {:.6} vs mobo hvi {:.6} -> {}",
        summary.diffusion.hvi_offline,
        summary.mobo.hvi_offline,
        cfg.report_dir().display()
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match cli.verb {
        Verb::Prepare => prepare(&cfg),
        Verb::Offline => offline(&cfg),
        Verb::Online => online(&cfg),
        Verb::Mobo => mobo(&cfg),
        Verb::Report => report(&cfg),
        Verb::All => {
            prepare(&cfg)?;
            offline(&cfg)?;
            online(&cfg)?;
            mobo(&cfg)?;
            report(&cfg)
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    u8::try_from(e.exit_code()).unwrap_or(1)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
