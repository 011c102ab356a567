use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use conceptrol_cli::{
    cmd_generate, cmd_scan, cmd_transfer, parse_seeds, resolve_output_dir, CliError, Outcome,
    RunConfig,
};

#[derive(Parser)]
#[command(name = "conceptrol", version, about = "Toy-engine experiments for concept-masked image conditioning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render each seed under each requested variant, with traces and a manifest.
    Generate(Common),
    /// Rank blocks by how well their concept attention localizes the planted region.
    /// Exits 0 iff the planted block ranks first on every seed.
    Scan(Common),
    /// Run the masked-transfer experiment per seed.
    /// Exits 0 iff the mean AUC reaches `transfer.threshold`.
    Transfer(Common),
}

#[derive(Args)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config entry by dotted path, e.g. `conceptrol.lambda=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (falls back to `output_dir`, then $CONCEPTROL_OUT).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seeds as `1,2,3` or `0..5`; replaces `seeds` from the config.
    #[arg(long)]
    seeds: Option<String>,
}

fn run(cli: Cli) -> Result<Outcome, CliError> {
    let (common, command): (&Common, fn(&RunConfig, &std::path::Path) -> _) = match &cli.command {
        Command::Generate(c) => (c, cmd_generate),
        Command::Scan(c) => (c, cmd_scan),
        Command::Transfer(c) => (c, cmd_transfer),
    };
    let mut config = RunConfig::load(common.config.as_deref(), &common.overrides)?;
    if let Some(raw) = &common.seeds {
        config.seeds = parse_seeds(raw)?;
    }
    config.validate()?;
    let out = resolve_output_dir(common.out.as_deref(), &config);
    command(&config, &out)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(outcome) => {
            print!("{}", outcome.report);
            if outcome.passed {
                ExitCode::SUCCESS
            } else {
                eprintln!("gate failed");
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
