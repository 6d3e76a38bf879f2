use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ehr_lift::pipeline::{run_pipeline, run_stage, RunConfig, Stage};

#[derive(Parser)]
#[command(name = "ehr-lift", version, about = "Lift-at-coverage evaluation of EHR cancer risk models")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, default_value = "ehr-lift-out")]
    out: PathBuf,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate the synthetic dataset described by the [synth] section.
    Synth,
    /// Build cohorts and risk-factor flags.
    Cohort,
    /// Cross-validated training, out-of-fold scores and attributions.
    Train,
    /// Lift, AUROC and significance per cancer type and risk factor.
    Evaluate,
    /// Write the report tables.
    Report,
    /// Every stage in order.
    All,
}

fn run(cli: &Cli) -> ehr_lift::Result<()> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| ehr_lift::Error::Config("--config is required".into()))?;
    let mut config = RunConfig::from_file(path)?;
    if let Some(seed) = cli.seed {
        config = config.with_seed(seed);
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.jobs {
        pool = pool.num_threads(n.max(1));
    }
    let pool = pool
        .build()
        .map_err(|e| ehr_lift::Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Synth => run_stage(&config, &cli.out, Stage::Synth),
        Command::Cohort => run_stage(&config, &cli.out, Stage::Cohort),
        Command::Train => run_stage(&config, &cli.out, Stage::Train),
        Command::Evaluate => run_stage(&config, &cli.out, Stage::Evaluate),
        Command::Report => run_stage(&config, &cli.out, Stage::Report),
        Command::All => run_pipeline(&config, &cli.out).map(|_| ()),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ehr-lift: {e}");
            ExitCode::FAILURE
        }
    }
}
