use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use visionmix::commands::{self, Outcome};
use visionmix::config::RunConfig;
use visionmix::registry::{DEFAULT_EPS, DEFAULT_SEEDS};

#[derive(Parser)]
#[command(name = "visionmix", version, about = "Toy vision-expert mixtures: table checks, greedy selection, staged training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Recompute the Avg column of score fixtures (bundled tables when none given).
    ReproAvg {
        fixtures: Vec<PathBuf>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Greedy round-robin expert selection over a score fixture.
    Select {
        fixture: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a training experiment described by a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `seed` in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `out` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks (every registered op when none given).
    Gradcheck {
        ops: Vec<String>,
        /// Check this seed only instead of the default three.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = DEFAULT_EPS)]
        eps: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn emit(outcome: &Outcome, out: Option<&PathBuf>) -> visionmix::Result<()> {
    print!("{}", outcome.report);
    if let Some(path) = out {
        std::fs::write(path, &outcome.report).map_err(|e| visionmix::Error::io(path, e))?;
    }
    Ok(())
}

fn run(cli: Cli) -> visionmix::Result<i32> {
    let outcome = match cli.command {
        Command::ReproAvg { fixtures, out } => {
            let paths = if fixtures.is_empty() {
                commands::bundled_tables()
            } else {
                fixtures
            };
            let (_, o) = commands::repro_avg(&paths)?;
            emit(&o, out.as_ref())?;
            o
        }
        Command::Select { fixture, out } => {
            let path = fixture.unwrap_or_else(|| commands::fixtures_dir().join("table5.csv"));
            let (_, o) = commands::select(&path)?;
            emit(&o, out.as_ref())?;
            o
        }
        Command::Gradcheck { ops, seed, eps, out } => {
            let seeds = seed.map(|s| vec![s]).unwrap_or_else(|| DEFAULT_SEEDS.to_vec());
            let o = commands::gradcheck(&ops, &seeds, eps)?;
            emit(&o, out.as_ref())?;
            o
        }
        Command::Train { config, seed, out } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out = Some(o);
            }
            let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from(format!("runs/seed-{}", cfg.seed)));
            let summary = commands::train(&cfg, &dir)?;
            print!("{}", commands::train_report(&summary));
            return Ok(commands::EXIT_OK);
        }
    };
    Ok(outcome.exit_code())
}

fn main() -> ExitCode {
    let code = match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            commands::exit_code(&e)
        }
    };
    ExitCode::from(code as u8)
}
