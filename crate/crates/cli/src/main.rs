use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedsilo_cli::commands::{self, EvalArgs, TrainArgs};
use fedsilo_cli::CliResult;

#[derive(Parser)]
#[command(
    name = "fedsilo",
    version,
    about = "Federated training with silo-local batch-norm statistics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-center datasets.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the config's data_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one strategy over several seeds and write a report.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of seeds, overriding the config.
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
        /// Train in single precision.
        #[arg(long)]
        f32: bool,
        /// Also score held-out centers after recomputing batch-norm statistics.
        #[arg(long)]
        adabn: bool,
    },
    /// Score saved models on test splits.
    Eval {
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        /// Data root with center_<k>/ directories.
        #[arg(long)]
        data: Option<PathBuf>,
        /// A center directory not used in training.
        #[arg(long)]
        foreign: Option<PathBuf>,
        /// Recompute batch-norm statistics on the foreign train split.
        #[arg(long)]
        adabn: bool,
        /// Write the metrics as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn set_threads(threads: Option<usize>) {
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("cannot set thread count: {e}");
        }
    }
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Generate { config, out } => commands::generate(&config, out.as_deref()).map(drop),
        Command::Train {
            config,
            out,
            seeds,
            threads,
            f32,
            adabn,
        } => {
            set_threads(threads);
            commands::train(&TrainArgs {
                config,
                out,
                seeds,
                f32,
                adabn,
            })
            .map(drop)
        }
        Command::Eval {
            models,
            data,
            foreign,
            adabn,
            out,
            batch_size,
        } => commands::eval(&EvalArgs {
            models,
            data,
            foreign,
            adabn,
            out,
            batch_size,
        })
        .map(drop),
        Command::Gradcheck { config, threads } => {
            set_threads(threads);
            commands::gradcheck(config.as_deref()).map(drop)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FEDSILO_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), e.to_string().replace('\n', " "));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
