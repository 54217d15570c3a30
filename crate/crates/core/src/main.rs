use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cbqr::config::serialize_problem;
use cbqr::run::{builtin_options, error_exit_code, exit_code, run_solve, Overrides, Source, INPUT_ERROR_EXIT};
use cbqr::savs_bench::builtin;

#[derive(Parser)]
#[command(name = "cbqr", version, about = "Krotov successive improvement for bilinear quadratic regulators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a bundled problem or a TOML problem file.
    Solve(SolveArgs),
    /// Print a bundled problem as a TOML problem file.
    Export {
        #[arg(long)]
        builtin: String,
        #[arg(long)]
        steps: Option<usize>,
    },
}

#[derive(Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["builtin", "config"])))]
struct SolveArgs {
    /// savs, scalar or lqr-oracle
    #[arg(long)]
    builtin: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "cbqr-out")]
    out: PathBuf,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long = "max-iter")]
    max_iter: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Solve(args) => {
            let source = match (args.builtin, args.config) {
                (Some(name), _) => Source::Builtin(name),
                (None, Some(path)) => Source::Config(path),
                (None, None) => unreachable!("clap enforces a source"),
            };
            let overrides = Overrides {
                epsilon: args.epsilon,
                max_iterations: args.max_iter,
                steps: args.steps,
            };
            match run_solve(&source, &args.out, &overrides, &mut std::io::stdout()) {
                Ok(report) => exit_code(report.termination),
                Err(e) => {
                    eprintln!("error: {e}");
                    error_exit_code(&e)
                }
            }
        }
        Command::Export { builtin: name, steps } => {
            match builtin(&name, steps).and_then(|p| serialize_problem(&p, Some(&builtin_options(&name)))) {
                Ok(text) => {
                    print!("{text}");
                    0
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    INPUT_ERROR_EXIT
                }
            }
        }
    };
    ExitCode::from(code as u8)
}
