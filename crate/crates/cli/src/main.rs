use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use codesign_cli::{analyze, optimize, simulate, sweep, CliError, RunOptions};

#[derive(Parser)]
#[command(name = "codesign", version, about = "Transmon device and pulse co-design")]
struct Cli {
    /// Worker threads for finite-difference probes and sweeps.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Propagate one gate and write waveforms, populations and invariants.
    Simulate(Common),
    /// Run the co-design optimization.
    Optimize(Common),
    /// Report invariants and Weyl coordinates of a 4x4 unitary.
    Analyze {
        /// JSON file: 4 rows of 4 [re, im] pairs.
        matrix: PathBuf,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Optimize once per value of a config parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Dotted config path; overrides the config's sweep block.
        #[arg(long)]
        parameter: Option<String>,
        /// Comma-separated values for `--parameter`.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
}

fn options(c: Common) -> RunOptions {
    RunOptions {
        config: c.config,
        out: c.out,
        seed: c.seed,
        env: std::env::vars().collect(),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    match cli.command {
        Command::Simulate(c) => simulate(&options(c)),
        Command::Optimize(c) => {
            let s = optimize(&options(c))?;
            println!("goal {:e} after {} iterations ({:?})", s.best.goal, s.iterations, s.status);
            Ok(())
        }
        Command::Analyze { matrix, out } => {
            print!("{}", analyze(&matrix, out.as_deref())?);
            Ok(())
        }
        Command::Sweep {
            common,
            parameter,
            values,
        } => {
            let over = match (parameter, values) {
                (Some(p), Some(v)) => Some((p, v)),
                (None, None) => None,
                _ => {
                    return Err(CliError::Validation(
                        "--parameter and --values must be given together".into(),
                    ))
                }
            };
            let rows = sweep(&options(common), over)?;
            println!("{} runs", rows.len());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("codesign: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
