//! `hypbstep`: run closed-loop scenarios, export kernel tables and run the
//! verification suites.
//!
//! Exit codes: 0 ok, 1 runtime or i/o failure, 2 configuration error,
//! 3 divergence (partial artifacts are written), 4 verification failure.

mod error;
mod run;
mod store;
mod svg;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliResult;
use crate::run::Flags;
use crate::verify::Level;

#[derive(Parser)]
#[command(
    name = "hypbstep",
    version,
    about = "Delay-adaptive backstepping simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario file, or the name of a bundled preset.
    #[arg(long)]
    scenario: String,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Kernel cache directory (falls back to $HYPBSTEP_CACHE).
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Use the kernel equations exactly as printed instead of the derived forms.
    #[arg(long)]
    printed_kernel_forms: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write trace, snapshots, diagnostics and plots.
    Run {
        #[command(flatten)]
        common: Common,
        /// Skip the SVG plots.
        #[arg(long)]
        no_svg: bool,
    },
    /// Run the verification suites.
    Verify {
        #[arg(long, value_enum, default_value = "quick")]
        level: Level,
        /// Kernel cache directory (falls back to $HYPBSTEP_CACHE).
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Export k, l and γ/q tables at selected delay nodes as CSV.
    Kernels {
        #[command(flatten)]
        common: Common,
    },
}

fn cache_dir(flag: Option<PathBuf>) -> Option<PathBuf> {
    flag.or_else(|| {
        std::env::var_os("HYPBSTEP_CACHE")
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
    })
}

fn flags(common: &Common, no_svg: bool) -> Flags {
    Flags {
        out: common.out.clone(),
        cache: cache_dir(common.cache.clone()),
        no_svg,
        printed_kernel_forms: common.printed_kernel_forms,
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Run { common, no_svg } => {
            run::cmd_run(&common.scenario, &flags(&common, no_svg)).map(|_| ())
        }
        Command::Kernels { common } => {
            run::cmd_kernels(&common.scenario, &flags(&common, true)).map(|_| ())
        }
        Command::Verify { level, cache } => verify::cmd_verify(level, cache_dir(cache).as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hypbstep: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
