use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use db2transf_cli::{
    bench_table, cmd_bench, cmd_decompose, cmd_evaluate, cmd_predict, cmd_synth, cmd_train, CliError, RunConfig,
};

/// DB2 wavelet transformer forecaster.
#[derive(Parser)]
#[command(name = "db2transf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a key, e.g. `--set model.levels=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, CliError> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoint, per-epoch report and summary.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (overrides `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on the test split of the configured data.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Score only the first N forecast steps.
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Forecast past the end of a CSV file.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Classical DB2 decomposition of one CSV column.
    Decompose {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        column: String,
        #[arg(long)]
        levels: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Write the synthetic series described by `[data.synth]`.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        output: PathBuf,
    },
    /// Time the forward pass across `bench.lookbacks`.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { cfg, out } => {
            let mut cfg = cfg.load()?;
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            let outcome = cmd_train(&cfg)?;
            for e in &outcome.report.epochs {
                eprintln!(
                    "epoch {:>3}  lr {:.3e}  train {:.6}  val {:.6}  {:.0} ms",
                    e.epoch, e.lr, e.train_mse, e.val_mse, e.wall_ms
                );
            }
            eprintln!("checkpoint {}", outcome.checkpoint.display());
            println!("{}", outcome.summary);
        }
        Command::Evaluate { checkpoint, cfg, horizon } => {
            let cfg = cfg.load()?;
            println!("{}", cmd_evaluate(&checkpoint, &cfg, horizon)?.summary);
        }
        Command::Predict { checkpoint, input, output } => {
            let f = cmd_predict(&checkpoint, &input, &output)?;
            println!("predict steps={} channels={} output={}", f.nrows(), f.ncols(), output.display());
        }
        Command::Decompose { input, column, levels, output } => {
            let d = cmd_decompose(&input, &column, levels, &output)?;
            let sections: Vec<String> = d.sections.iter().map(|(b, n)| format!("{b}:{n}")).collect();
            println!(
                "decompose sections={} reconstruction_max_abs_error={:e}",
                sections.join(","),
                d.reconstruction_error
            );
        }
        Command::Synth { cfg, output } => {
            let s = cmd_synth(&cfg.load()?, &output)?;
            println!("synth rows={} channels={} output={}", s.len(), s.channels(), output.display());
        }
        Command::Bench { cfg } => {
            let cfg = cfg.load()?;
            print!("{}", bench_table(&cmd_bench(&cfg)?));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let keys = RunConfig::defaults_help();
    let mut cmd = Cli::command().after_long_help(keys.clone());
    for name in ["train", "evaluate", "synth", "bench"] {
        let k = keys.clone();
        cmd = cmd.mut_subcommand(name, |s| s.after_help(k));
    }
    let cli = match Cli::from_arg_matches(&cmd.get_matches()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
