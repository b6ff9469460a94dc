use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gatesparse::analyze::LagNorm;
use gatesparse::config::RunConfig;
use gatesparse::pipeline::{analyze_run, finalize_file, gridsearch, train_run, AnalyzeOptions};
use gatesparse::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

/// Weight, gate and neuron sparsification of LSTM networks.
#[derive(Parser, Debug)]
#[command(name = "gatesparse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Collapse a trained checkpoint to its deterministic sparse form and
    /// attach structure masks.
    Finalize {
        #[arg(long)]
        ckpt: PathBuf,
        /// Output path; defaults to `<name>.final.<ext>` beside the input.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the compression report, gate maps and gradient-lag profiles
    /// of a finalized checkpoint.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory with `valid.txt`, `valid.tsv` or `valid.json`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 20)]
        max_lag: usize,
        /// Neurons per layer shown in the gate map; all kept neurons when
        /// absent.
        #[arg(long)]
        map_neurons: Option<usize>,
        /// Seed for the gate-map neuron sample.
        #[arg(long, default_value_t = 0, requires = "map_neurons")]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        lag_sequences: usize,
        #[arg(long, value_enum, default_value = "l2")]
        norm: NormArg,
        /// Output directory; defaults to `<name>.analysis` beside the
        /// checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train, finalize and report every point of a parameter grid.
    Gridsearch {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        /// Table output; defaults to `<grid file>.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum NormArg {
    L2,
    L1,
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else if e.is_data_error() || matches!(e, Error::Json(_)) {
        EXIT_DATA
    } else {
        EXIT_USAGE
    }
}

/// Writes to stdout; a reader that closed the pipe early is not an error.
fn emit(text: &str) -> Result<(), Error> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            let run = train_run(&cfg, &mut |m| {
                eprintln!(
                    "epoch {:>4}  lr {:.3e}  train {:.5}  valid {:.5}  {} {:.5}  nonzero {:.4}",
                    m.epoch, m.lr, m.train_loss, m.valid_loss, m.metric, m.valid_metric, m.nonzero_fraction
                );
            })?;
            emit(&format!("checkpoint: {}\n", run.checkpoint_path.display()))?;
            if let Some(e) = run.aborted {
                eprintln!("training aborted; the checkpoint holds the last completed epoch");
                return Err(e);
            }
        }
        Command::Finalize { ckpt, out } => {
            let (path, _) = finalize_file(&ckpt, out.as_deref())?;
            emit(&format!("finalized: {}\n", path.display()))?;
        }
        Command::Analyze {
            ckpt,
            data,
            max_lag,
            map_neurons,
            seed,
            lag_sequences,
            norm,
            out,
        } => {
            let opts = AnalyzeOptions {
                max_lag,
                map_neurons,
                seed,
                lag_sequences,
                norm: match norm {
                    NormArg::L2 => LagNorm::L2,
                    NormArg::L1 => LagNorm::L1,
                },
                out_dir: out,
            };
            let a = analyze_run(&ckpt, &data, &opts)?;
            emit(&format!("{}outputs: {}\n", a.report.to_text(), a.out_dir.display()))?;
        }
        Command::Gridsearch { config, grid, out } => {
            let table = gridsearch(&config, &grid)?;
            let csv = table.to_csv();
            let path = out.unwrap_or_else(|| {
                let mut p = grid.into_os_string();
                p.push(".csv");
                p.into()
            });
            std::fs::write(&path, &csv)?;
            emit(&format!("{csv}table: {}\n", path.display()))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
