use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use magic_cli::commands::{complete, dataset, eval, sweep, train, Common};
use magic_cli::RunConfig;

#[derive(Parser)]
#[command(name = "magic", about = "Toy-world guided image completion", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render scenes, masks and guidance maps as PGM/PPM files.
    Dataset(Opts),
    /// Train the denoising backbone.
    TrainBackbone(Opts),
    /// Train guidance encoders against a frozen backbone.
    TrainMcu(Opts),
    /// Complete masked inputs.
    Complete(Opts),
    /// Sweep one blending hyperparameter.
    Sweep(Opts),
    /// Score completion runs.
    Eval(Opts),
}

#[derive(Args)]
struct Opts {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `[run] seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace a non-empty output directory.
    #[arg(long)]
    force: bool,
}

impl Opts {
    fn common(&self) -> Result<Common> {
        let mut config = RunConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            config.run.seed = s;
        }
        Ok(Common { config, out: self.out.clone(), force: self.force })
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Dataset(o) => {
            let n = dataset::run(&o.common()?)?;
            eprintln!("wrote {n} scenes");
        }
        Command::TrainBackbone(o) => train::backbone(&o.common()?)?,
        Command::TrainMcu(o) => train::mcu(&o.common()?)?,
        Command::Complete(o) => {
            let rows = complete::run(&o.common()?)?;
            eprintln!("wrote {} samples", rows.len());
        }
        Command::Sweep(o) => print!("{}", sweep::run(&o.common()?)?),
        Command::Eval(o) => {
            for r in eval::run(&o.common()?)? {
                println!("{}", r.csv_row());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
