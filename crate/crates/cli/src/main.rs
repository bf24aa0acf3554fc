use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use vlngen_core::config::PipelineConfig;
use vlngen_core::gateway::BackendConfig;
use vlngen_core::pipeline::{Pipeline, PipelineError, RunOptions, Stage};

#[derive(Parser)]
#[command(name = "vlngen", version, about = "Navigation instruction dataset pipeline")]
struct Cli {
    /// Pipeline config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed everywhere it is used.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print the planned work without writing anything.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Worker cap.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Replaces the configured completion backend.
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendChoice>,
    /// Swap probability for `--backend mock-lossy`.
    #[arg(long, global = true, default_value_t = 0.0)]
    swap_prob: f64,
    /// Noise probability for `--backend mock-lossy`.
    #[arg(long, global = true, default_value_t = 0.0)]
    noise_prob: f64,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendChoice {
    MockFaithful,
    MockLossy,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Label frames, sample trajectories and ground their actions.
    Sample,
    /// Generate and verify instructions for sampled trajectories.
    Generate,
    /// Re-verify the instructions of a generated dataset.
    Verify,
    /// Build pretext examples from verified pairs.
    Pretext,
    /// Write the R2R-style export of verified pairs.
    Export,
    /// Print the recomputed dataset manifest.
    Stats,
    /// Run sample, generate, pretext and export.
    E2e,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| PipelineError::config(Stage::Config, "--config is required"))?;
    let mut cfg = PipelineConfig::load(path).map_err(|e| PipelineError::config(Stage::Config, e.message))?;
    if let Some(out) = &cli.out {
        cfg.paths.out = out.clone();
    }
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    match cli.backend {
        Some(BackendChoice::MockFaithful) => cfg.gateway.backend = BackendConfig::MockFaithful { seed },
        Some(BackendChoice::MockLossy) => {
            cfg.gateway.backend = BackendConfig::MockLossy {
                seed,
                swap_prob: cli.swap_prob,
                noise_prob: cli.noise_prob,
            }
        }
        None => {}
    }
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    cfg.validate().map_err(|e| PipelineError::config(Stage::Config, e.message))?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<serde_json::Value, PipelineError> {
    let cfg = load_config(cli)?;
    let opts = RunOptions {
        jobs: cli.jobs,
        dry_run: cli.dry_run,
    };
    let mut p = Pipeline::new(cfg, opts)?;
    let value = match cli.command {
        Command::Sample => serde_json::to_value(p.sample()?),
        Command::Generate => serde_json::to_value(p.generate()?),
        Command::Verify => serde_json::to_value(p.verify()?),
        Command::Pretext => serde_json::to_value(p.pretext()?),
        Command::Export => serde_json::to_value(p.export()?),
        Command::Stats => serde_json::to_value(p.stats()?),
        Command::E2e => serde_json::to_value(p.e2e()?),
    }
    .expect("reports serialize");
    if !matches!(cli.command, Command::Stats) {
        p.write_run_record()?;
    }
    Ok(value)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            log::error!("{e}");
            eprintln!("{}", e.summary());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
