use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use exitrate::config::parse_config;
use exitrate::run::{execute, Command, Overrides};
use exitrate::verify::REFERENCE_CONFIG;
use exitrate::{Error, Result};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Subcommand {
    Simulate,
    Eig,
    Hjb,
    Action,
    Asymptotics,
    Pareto,
    Verify,
}

impl From<Subcommand> for Command {
    fn from(s: Subcommand) -> Self {
        match s {
            Subcommand::Simulate => Command::Simulate,
            Subcommand::Eig => Command::Eig,
            Subcommand::Hjb => Command::Hjb,
            Subcommand::Action => Command::Action,
            Subcommand::Asymptotics => Command::Asymptotics,
            Subcommand::Pareto => Command::Pareto,
            Subcommand::Verify => Command::Verify,
        }
    }
}

/// Exit rates of small-noise linear feedback systems.
#[derive(Debug, Parser)]
#[command(name = "exitrate", version)]
struct Cli {
    #[arg(value_enum)]
    command: Subcommand,

    /// JSON configuration; `verify` falls back to the bundled reference.
    #[arg(long)]
    config: Option<PathBuf>,

    #[arg(long)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Worker threads; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,

    /// Single noise level replacing the configured list.
    #[arg(long)]
    epsilon: Option<f64>,
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Usage(format!("cannot configure thread pool: {e}")))?;
    }
    let command = Command::from(cli.command);
    let text = match (&cli.config, command) {
        (Some(path), _) => std::fs::read_to_string(path)?,
        (None, Command::Verify) => REFERENCE_CONFIG.to_string(),
        (None, _) => return Err(Error::Usage(format!("`{}` needs --config", command.name()))),
    };
    let cfg = parse_config(&text)?;
    let overrides = Overrides { seed: cli.seed, out: cli.out, epsilon: cli.epsilon };
    let outcome = execute(command, &cfg, &overrides)?;
    if let Some(report) = &outcome.report {
        for c in &report.criteria {
            println!("criterion {:>2} {}: {} ({})", c.id, if c.passed { "PASS" } else { "FAIL" }, c.title, c.summary);
        }
        return Ok(report.all_passed);
    }
    println!("{} outputs written to {}", outcome.manifest.files.len(), outcome.output_dir.display());
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let err = Error::Usage(e.to_string().trim().to_string());
            eprintln!("{}", serde_json::json!({ "kind": err.kind(), "message": err.to_string() }));
            return ExitCode::from(2);
        }
        Err(e) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "kind": e.kind(), "message": e.to_string() }));
            ExitCode::from(1)
        }
    }
}
