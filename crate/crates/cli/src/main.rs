use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use convguard::ConvImpl;
use convguard_cli::{generate_corpus, init_weights, run, Mode, RunArgs};

#[derive(Parser)]
#[command(name = "convguard", version, about = "Checksum-protected convolution harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the model in one of the four modes.
    Run {
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Plan file to read (protected, campaign) or write (profile).
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long = "impl", default_value = "direct", value_parser = parse_impl)]
        imp: ConvImpl,
        #[arg(long)]
        json: Option<PathBuf>,
        /// Write the final output tensor as raw little-endian bytes.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Leave wall-clock timings out of the report.
        #[arg(long)]
        no_timings: bool,
        /// Repetitions per workflow variant when profiling.
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
    /// Write seeded random weights for a model.
    InitWeights {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate a fault corpus for a model.
    Corpus {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 1000)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_impl(s: &str) -> Result<ConvImpl, String> {
    s.parse().map_err(|e: convguard::Error| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Run {
            mode,
            config,
            weights,
            corpus,
            plan,
            seed,
            tau,
            imp,
            json,
            output,
            no_timings,
            reps,
        } => {
            let args = RunArgs {
                mode,
                config,
                weights,
                corpus,
                plan,
                seed,
                tau,
                imp,
                json,
                output,
                timings: !no_timings,
                reps,
            };
            run(&args).map(|report| {
                print!("{}", report.table());
                report.exit_code()
            })
        }
        Command::InitWeights { config, weights, seed } => init_weights(&config, &weights, seed).map(|()| 0),
        Command::Corpus {
            config,
            output,
            runs,
            seed,
        } => generate_corpus(&config, &output, runs, seed).map(|n| {
            println!("wrote {n} entries to {}", output.display());
            0
        }),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
