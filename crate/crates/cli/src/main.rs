use std::path::PathBuf;
use std::process::ExitCode;

use advsig_cli::{default_output, resolve_config, CliError, CliResult, Preset, Run, Stage, DATA_ROOT_ENV};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "advsig", version, about = "Adversarial attack signatures for speaker identification")]
struct Cli {
    /// Experiment configuration (JSON); unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Scale preset used when no --config is given.
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    /// Overrides the root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Rerun stages whose outputs are current.
    #[arg(long, global = true)]
    force: bool,
    /// Run directory; defaults to <data root>/runs/<preset>-seed<seed>.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Worker threads; fix it for reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Base for relative corpus paths and default run directories.
    #[arg(long, global = true, env = DATA_ROOT_ENV, default_value = ".")]
    data_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic corpus, or register an existing WAV corpus.
    GenCorpus,
    /// Train the speaker-identification victim.
    TrainVictim,
    /// Attack the victim and store the successful attacks.
    GenAttacks,
    /// Train the perturbation estimators.
    TrainAdvest,
    /// Train the signature extractors for every configured mode.
    TrainSignature,
    /// Run the three tasks for every configured mode.
    Evaluate,
    /// Write the JSON report, text tables and heatmaps.
    Report,
    /// Run every stage in order.
    RunAll,
    /// Print the resolved configuration.
    ShowConfig,
    /// Check every manifest output against its recorded hash.
    Verify,
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let (config, config_bytes) = resolve_config(cli.config.as_deref(), cli.preset, cli.seed)?;
    if let Command::ShowConfig = cli.command {
        print!("{}", String::from_utf8_lossy(&config.canonical_json()));
        return Ok(());
    }
    let dir = cli.output.clone().unwrap_or_else(|| default_output(&cli.data_root, &config));
    let run = Run { dir, config, config_bytes, data_root: cli.data_root, force: cli.force };
    let stage = match cli.command {
        Command::GenCorpus => Stage::GenCorpus,
        Command::TrainVictim => Stage::TrainVictim,
        Command::GenAttacks => Stage::GenAttacks,
        Command::TrainAdvest => Stage::TrainAdvest,
        Command::TrainSignature => Stage::TrainSignature,
        Command::Evaluate => Stage::Evaluate,
        Command::Report => Stage::Report,
        Command::RunAll => {
            run.run_all()?;
            println!("{}", run.dir.join(advsig_cli::pipeline::REPORT_DIR).join("tables.txt").display());
            return Ok(());
        }
        Command::Verify => {
            let manifest = advsig_cli::manifest::RunManifest::load(&run.dir)?
                .ok_or_else(|| CliError::Dependency(format!("no manifest in {}", run.dir.display())))?;
            let bad = manifest.verify(&run.dir);
            if bad.is_empty() {
                println!("manifest ok");
                return Ok(());
            }
            return Err(CliError::Runtime(format!("hash mismatch: {bad:?}")));
        }
        Command::ShowConfig => unreachable!(),
    };
    let ran = run.run_stage(stage)?;
    println!("{}: {}", stage.name(), if ran { "done" } else { "up to date" });
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
