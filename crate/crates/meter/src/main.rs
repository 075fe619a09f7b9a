use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use meter::commands::{run, CliError, Command};
use meter::config::{parse_override, RunConfig};

#[derive(Parser)]
#[command(name = "meter", about = "Toy-scale vision-and-language transformer runner")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Flat `section.key = value` config file.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// `key=value` override, applied after the file. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Print the resolved config and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Write a synthetic corpus (PPM images and a JSON-lines manifest).
    GenData,
    /// Pretrain a model and save its checkpoint and metrics log.
    Pretrain,
    /// Finetune a checkpoint on toy question answering.
    Finetune,
    /// Evaluate a checkpoint.
    Eval,
    /// Run every point of the ablation grid.
    Ablate,
    /// Time forward passes across fusion kinds and depths.
    Benchmark,
    /// Export text-to-image attention maps as PGM files.
    ExportAttn,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::GenData => Command::GenData,
            Cmd::Pretrain => Command::Pretrain,
            Cmd::Finetune => Command::Finetune,
            Cmd::Eval => Command::Eval,
            Cmd::Ablate => Command::Ablate,
            Cmd::Benchmark => Command::Benchmark,
            Cmd::ExportAttn => Command::ExportAttn,
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let text = match &cli.config {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| CliError::Runtime(anyhow::anyhow!("reading {}: {e}", p.display())))?,
        None => String::new(),
    };
    let overrides = cli.set.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>, _>>()?;
    Ok(RunConfig::parse(&text, &overrides)?)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // usage errors are config errors; --help and --version are not errors
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = resolve(&cli).and_then(|cfg| {
        if cli.print_config {
            print!("{}", cfg.render());
            return Ok(());
        }
        run(cli.command.into(), &cfg)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("meter: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
