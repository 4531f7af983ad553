use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adalea_core::data::DataError;
use adalea_core::eval::EvalError;
use adalea_core::loss::{dump_schedule, write_schedule_csv, LossConfig, LossError};
use adalea_core::model::ModelError;
use adalea_core::train::{
    compare, evaluate_checkpoint, generate_dataset, run_training, write_report, ErrorKind,
    GenDataConfig, TrainConfig, TrainError,
};
use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "adalea",
    version,
    about = "Train and evaluate accident risk anticipation models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset split into train/val/test.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset directory or the test split of a split root.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory for report.json and curve CSVs; the report goes to stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare finished runs.
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Directory for comparison.csv and history.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the penalty-weight schedule as CSV.
    Schedule {
        /// Loss config, or a full training config whose `loss` is used.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        epochs: u32,
        /// Accident frame T.
        #[arg(long)]
        frames: usize,
        /// Comma-separated Φ per epoch, in seconds.
        #[arg(long, value_delimiter = ',')]
        phi: Vec<f64>,
    },
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(|e| TrainError::Config(format!("{}: {e}", path.display())).into())
}

fn read_loss_config(path: &Path) -> Result<LossConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(train) = serde_json::from_str::<TrainConfig>(&text) {
        return Ok(train.loss);
    }
    serde_json::from_str(&text)
        .map_err(|e| TrainError::Config(format!("{}: {e}", path.display())).into())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg: GenDataConfig = read_config(&config)?;
            let meta = generate_dataset(&cfg, &out)?;
            eprintln!(
                "wrote {} clips to {} ({} train, {} val, {} test)",
                meta.num_clips,
                out.display(),
                meta.train_size,
                meta.val_size,
                meta.test_size
            );
        }
        Command::Train { config, data, out } => {
            let cfg: TrainConfig = read_config(&config)?;
            let summary = run_training(&cfg, &data, &out)?;
            for event in &summary.outcome.events {
                eprintln!("{event}");
            }
            let r = &summary.test_report;
            println!(
                "test AP {:.4}  ATTC {}",
                r.macro_ap,
                r.macro_attc.map_or("n/a".into(), |v| format!("{v:.4} s"))
            );
        }
        Command::Eval {
            checkpoint,
            data,
            out,
        } => {
            let report = evaluate_checkpoint(&checkpoint, &data)?;
            match out {
                Some(dir) => write_report(&dir, &report)?,
                None => print!("{}", report.to_json()),
            }
        }
        Command::Compare { runs, out } => {
            let cmp = compare(&runs)?;
            print!("{}", cmp.to_table());
            if let Some(dir) = out {
                fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                fs::write(dir.join("comparison.csv"), cmp.to_csv())?;
                fs::write(dir.join("history.csv"), cmp.history_csv())?;
            }
        }
        Command::Schedule {
            config,
            epochs,
            frames,
            phi,
        } => {
            let loss = read_loss_config(&config)?;
            let rows = dump_schedule(&loss, epochs, frames, &phi)?;
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            write_schedule_csv(&mut lock, &rows)?;
            lock.flush()?;
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let kind = if let Some(e) = err.downcast_ref::<TrainError>() {
        e.kind()
    } else if let Some(e) = err.downcast_ref::<DataError>() {
        match e {
            DataError::Config { .. } | DataError::Fractions { .. } => ErrorKind::Config,
            _ => ErrorKind::Data,
        }
    } else if err.downcast_ref::<LossError>().is_some()
        || err.downcast_ref::<ModelError>().is_some()
    {
        ErrorKind::Config
    } else if let Some(e) = err.downcast_ref::<EvalError>() {
        match e {
            EvalError::Config(_) => ErrorKind::Config,
            _ => ErrorKind::Data,
        }
    } else {
        ErrorKind::Other
    };
    kind.exit_code() as u8
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let mut msg = err.to_string();
            for cause in err.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&err))
        }
    }
}
