use std::io::{ErrorKind, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flowcache_cli::config::{Overrides, RunConfig};
use flowcache_cli::error::{CliError, Result};
use flowcache_cli::run::cmd_run;
use flowcache_cli::sweep::cmd_sweep;
use flowcache_cli::verify::{run_suite, Suite, SUITES};

#[derive(Parser)]
#[command(name = "flowcache-sim", version, about = "Chunked flow-matching cache simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one configuration and write trace, curves and report.
    Run {
        #[command(flatten)]
        common: Common,
        /// Print the resolved configuration and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Run fixed-seed property suites.
    Verify {
        /// Suite to run; repeat for several. Defaults to all.
        #[arg(long)]
        suite: Vec<String>,
    },
    /// Run one simulation per value of an ablation axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// lambda, budget, granularity or epsilon.
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON config file layered over the profile.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let overrides = Overrides {
            profile: self.profile.clone(),
            seed: self.seed,
            out: self.out.clone(),
        };
        RunConfig::resolve(self.config.as_deref(), &overrides)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Writes to stdout; a closed pipe (e.g. `| head`) ends output quietly.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != ErrorKind::BrokenPipe => Err(CliError::io("<stdout>", e)),
        _ => Ok(()),
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run { common, print_config } => {
            let cfg = common.resolve()?;
            if print_config {
                emit(&format!("{}\n", cfg.to_json()))?;
                return Ok(());
            }
            let report = cmd_run(&cfg)?;
            emit(&format!("{}outputs in {}\n", report.render(), cfg.output.dir.display()))?;
            Ok(())
        }
        Command::Verify { suite } => {
            let names: Vec<String> = if suite.is_empty() {
                SUITES.iter().map(|s| s.to_string()).collect()
            } else {
                suite
            };
            let suites = names
                .iter()
                .map(|n| n.parse::<Suite>())
                .collect::<Result<Vec<_>>>()?;
            let (mut total, mut failed) = (0, 0);
            for s in suites {
                for check in run_suite(s)? {
                    emit(&format!("{check}\n"))?;
                    total += 1;
                    failed += usize::from(!check.passed());
                }
            }
            emit(&format!("{} of {total} checks passed\n", total - failed))?;
            if failed > 0 {
                return Err(CliError::ChecksFailed { failed, total });
            }
            Ok(())
        }
        Command::Sweep { common, axis, values } => {
            let cfg = common.resolve()?;
            emit(&cmd_sweep(&cfg, &axis, &values)?)
        }
    }
}
