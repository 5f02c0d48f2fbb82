use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use diffattack::{CliError, CliResult, Run, RunConfig, VariantKind};

#[derive(Parser)]
#[command(name = "diffattack", version, about = "Adversarially guided diffusion voice conversion on a synthetic speaker world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for the parallel evaluation paths.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Artifact directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world and dataset.
    World(Common),
    TrainEncoder(Common),
    TrainClassifier(Common),
    TrainDecoder {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        variant: VariantKind,
    },
    /// Convert every test utterance to every eligible target with each method.
    Attack(Common),
    Eval(Common),
    Report(Common),
    /// Run every stage in order, skipping those already up to date.
    All(Common),
}

fn run(cli: Cli) -> CliResult<()> {
    let common = match &cli.command {
        Command::World(c)
        | Command::TrainEncoder(c)
        | Command::TrainClassifier(c)
        | Command::Attack(c)
        | Command::Eval(c)
        | Command::Report(c)
        | Command::All(c) => c.clone(),
        Command::TrainDecoder { common, .. } => common.clone(),
    };
    if common.threads == 0 {
        return Err(CliError::Config("--threads must be at least 1".into()));
    }
    let mut config = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    let run = Run::new(config, &common.out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(common.threads)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::World(_) => run.world().map(drop),
        Command::TrainEncoder(_) => run.train_encoder().map(drop),
        Command::TrainClassifier(_) => run.train_classifier().map(drop),
        Command::TrainDecoder { variant, .. } => run.train_decoder(variant).map(drop),
        Command::Attack(_) => run.attack().map(drop),
        Command::Eval(_) => run.eval().map(drop),
        Command::Report(_) => run.report().map(drop),
        Command::All(_) => run.all(),
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("diffattack: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
