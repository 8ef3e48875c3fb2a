use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use rtci::{CliError, REPORT_CSV};
use rtci_core::tci::PathFunctional;

#[derive(Parser)]
#[command(name = "rtci", version, about = "Transport inequality experiments for reflected diffusions and competing particles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Functional {
    /// Coordinate at the final time.
    Terminal,
    /// Running maximum of a coordinate.
    Max,
    /// A constant (Lipschitz constant 0).
    Constant,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Output directory (overrides `output` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize an RTCI path bundle.
    Inspect { bundle: PathBuf },
    /// Print the constant on a grid of constant one-sided bounds and horizons.
    VerifyConstants {
        #[arg(long, default_value_t = 1.0)]
        norm_a: f64,
        #[arg(long, value_delimiter = ',', default_values_t = [-2.0, -1.0, 0.0, 1.0, 2.0])]
        bounds: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.5, 1.0, 2.0])]
        horizons: Vec<f64>,
    },
    /// Empirical tail table of a path functional against the Gaussian bound.
    Concentration {
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = Functional::Terminal)]
        functional: Functional,
        #[arg(long, default_value_t = 0)]
        coord: usize,
        /// Deviations in units of √T.
        #[arg(long, value_delimiter = ',', default_values_t = [0.5, 1.0, 1.5, 2.0])]
        r: Vec<f64>,
    },
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let workers = rtci::workers_from_env()?;
    match cli.command {
        Command::Run { config, out } => {
            let outcome = rtci::with_workers(workers, || rtci::run(&config, out.as_deref()))?;
            let csv = outcome.output.join(REPORT_CSV);
            print!("{}", std::fs::read_to_string(&csv).unwrap_or_default());
            eprintln!("artifacts written to {}", outcome.output.display());
            if !outcome.report.pass {
                return Err(CliError::CheckFailed(format!(
                    "coupling bound violated beyond slack in scenario {}",
                    outcome.report.scenario
                )));
            }
        }
        Command::Inspect { bundle } => print!("{}", rtci::inspect(&bundle)?),
        Command::VerifyConstants { norm_a, bounds, horizons } => {
            print!("{}", rtci::constants_table(norm_a, &bounds, &horizons)?)
        }
        Command::Concentration { config, functional, coord, r } => {
            let f = match functional {
                Functional::Terminal => PathFunctional::Terminal { coord },
                Functional::Max => PathFunctional::RunningMax { coord },
                Functional::Constant => PathFunctional::Constant(0.0),
            };
            let table = rtci::with_workers(workers, || rtci::concentration(&config, &f, &r))?;
            print!("{}", table.to_csv());
            if !table.pass {
                return Err(CliError::CheckFailed("empirical tail above the Gaussian bound".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
