//! The `wps` command line: config parsing, subcommand dispatch and output
//! persistence.

// `!(x > 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand as ClapSubcommand};

pub use commands::{dispatch, CliError, Format, Subcommand};
pub use config::{parse_config, parse_config_or_manifest, to_toml, ConfigErrors, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "wps",
    version,
    about = "Weighted processor-sharing simulation and fluid limits"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML config, or a run manifest from an earlier run.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub output: PathBuf,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(Debug, ClapSubcommand)]
pub enum Command {
    /// Simulate the prelimit queue.
    Simulate,
    /// Solve the fluid dynamics along characteristics.
    Fluid,
    /// Solve the fluid dynamics by windowed Picard iteration.
    Picard,
    /// Compare scaled simulations with the fluid path.
    ScalingTest,
    /// Bounded-Lipschitz distance between two measure CSV files.
    Distance { first: PathBuf, second: PathBuf },
}

fn load(cli: &Cli) -> Result<RunConfig, CliError> {
    let text = match &cli.config {
        Some(p) => {
            fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?
        }
        None => String::new(),
    };
    let mut cfg = parse_config_or_manifest(&text)?;
    if let Some(seed) = cli.seed {
        cfg.seed = Some(seed);
    }
    Ok(cfg)
}

/// Runs the command line and returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::Distance { first, second } => commands::distance(first, second).map(|rows| {
            rows.iter()
                .map(|(t, d)| match t {
                    Some(t) if rows.len() > 1 => format!("{t},{d}"),
                    _ => format!("{d}"),
                })
                .collect::<Vec<_>>()
                .join("\n")
        }),
        cmd => {
            let sub = match cmd {
                Command::Simulate => Subcommand::Simulate,
                Command::Fluid => Subcommand::Fluid,
                Command::Picard => Subcommand::Picard,
                Command::ScalingTest => Subcommand::ScalingTest,
                Command::Distance { .. } => unreachable!(),
            };
            load(&cli).and_then(|cfg| dispatch(sub, &cfg, &cli.output, cli.format))
        }
    };
    match result {
        Ok(line) => {
            // A closed pipe downstream is not an error for the run itself.
            let _ = writeln!(std::io::stdout().lock(), "{line}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            commands::write_error(&cli.output, &e);
            e.exit_code()
        }
    }
}
