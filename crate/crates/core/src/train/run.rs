//! Dataset generation, run directories and cross-run comparison.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    generate_synthetic, load_dataset, load_splits, save_splits, split_dataset, DataError, Dataset,
    DatasetMeta, SyntheticConfig, META_FILE,
};
use crate::eval::{write_curve_csv, EvalReport};

use super::{
    evaluate_model, load_checkpoint, save_checkpoint, train, EpochRecord, Result, TrainConfig,
    TrainError, TrainOutcome,
};

pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.csv";
pub const REPORT_FILE: &str = "report.json";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Input of `gen-data`: a synthetic dataset and how to split it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub synthetic: SyntheticConfig,
    /// Train, validation and test fractions.
    #[serde(default = "default_fractions")]
    pub split_fractions: [f64; 3],
    /// Defaults to the generator seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_seed: Option<u64>,
}

fn default_name() -> String {
    "synthetic".into()
}

fn default_fractions() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

/// Generates, splits and writes a dataset under `out`.
pub fn generate_dataset(config: &GenDataConfig, out: &Path) -> Result<DatasetMeta> {
    let ds = generate_synthetic(&config.synthetic)?;
    let seed = config.split_seed.unwrap_or(config.synthetic.seed);
    let splits = split_dataset(&ds, config.split_fractions, seed)?;
    let meta = DatasetMeta {
        name: config.name.clone(),
        num_clips: ds.len(),
        train_size: splits.train.len(),
        val_size: splits.val.len(),
        test_size: splits.test.len(),
        frame_rate_f: config.synthetic.frame_rate_f,
        num_classes: config.synthetic.num_classes,
    };
    save_splits(out, &meta, &splits)?;
    Ok(meta)
}

/// One row of `history.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: u32,
    pub train_loss: f64,
    pub val_ap: f64,
    pub val_attc: Option<f64>,
    pub phi_used: f64,
}

impl From<&EpochRecord> for HistoryRow {
    fn from(r: &EpochRecord) -> Self {
        Self {
            epoch: r.epoch,
            train_loss: r.train_loss,
            val_ap: r.val_ap,
            val_attc: r.val_attc,
            phi_used: r.phi_used,
        }
    }
}

/// Writes `epoch,train_loss,val_ap,val_attc,phi_used`.
pub fn write_history_csv<W: std::io::Write>(
    out: W,
    history: &[EpochRecord],
) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in history {
        w.serialize(HistoryRow::from(r))?;
    }
    w.flush()
}

pub fn read_history_csv(path: &Path) -> Result<Vec<HistoryRow>> {
    let malformed = |reason: String| {
        TrainError::Data(DataError::Malformed {
            path: path.to_path_buf(),
            location: "history".into(),
            reason,
        })
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| malformed(e.to_string()))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<HistoryRow>, _>>()
        .map_err(|e| malformed(e.to_string()))
}

/// A finished training run with its test-split report.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub outcome: TrainOutcome,
    pub test_report: EvalReport,
}

/// Writes `config.json`, `checkpoint.bin`, `history.csv`, `report.json` and one
/// `curve_<class>.csv` per evaluated class.
pub fn write_run_dir(dir: &Path, outcome: &TrainOutcome, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(CONFIG_FILE);
    let config = serde_json::to_string_pretty(&outcome.config).expect("config serializes");
    fs::write(&path, config + "\n").map_err(io_err(&path))?;
    save_checkpoint(&dir.join(CHECKPOINT_FILE), &outcome.checkpoint)?;
    let path = dir.join(HISTORY_FILE);
    let mut buf = Vec::new();
    write_history_csv(&mut buf, &outcome.history).map_err(io_err(&path))?;
    fs::write(&path, buf).map_err(io_err(&path))?;
    write_report(dir, report)
}

/// Writes `report.json` and the per-class curves.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(REPORT_FILE);
    fs::write(&path, report.to_json()).map_err(io_err(&path))?;
    for class in &report.classes {
        let path = dir.join(format!("curve_{}.csv", class.class));
        let mut buf = Vec::new();
        write_curve_csv(&mut buf, &class.curve).map_err(io_err(&path))?;
        fs::write(&path, buf).map_err(io_err(&path))?;
    }
    Ok(())
}

/// Trains on `data_root` (as written by [`generate_dataset`]), reports on its
/// test split and writes the run directory.
pub fn run_training(config: &TrainConfig, data_root: &Path, out: &Path) -> Result<RunSummary> {
    config.validate()?;
    let (_, splits) = load_splits(data_root)?;
    let outcome = train(config, &splits.train, &splits.val)?;
    let test_report = evaluate_model(
        &outcome.model,
        &splits.test,
        &outcome.config.eval_config(),
        outcome.config.checked,
    )?;
    write_run_dir(out, &outcome, &test_report)?;
    Ok(RunSummary {
        outcome,
        test_report,
    })
}

fn load_eval_data(dir: &Path) -> Result<Dataset> {
    if dir.join(META_FILE).exists() {
        Ok(load_splits(dir)?.1.test)
    } else {
        Ok(load_dataset(dir)?)
    }
}

/// Evaluates a checkpoint on a dataset directory, or on the test split of a
/// split root.
pub fn evaluate_checkpoint(checkpoint: &Path, data: &Path) -> Result<EvalReport> {
    let ckpt = load_checkpoint(checkpoint)?;
    let model = ckpt.model()?;
    let dataset = load_eval_data(data)?;
    evaluate_model(
        &model,
        &dataset,
        &ckpt.config.eval_config(),
        ckpt.config.checked,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub run: String,
    pub loss: String,
    pub recurrent: String,
    pub epochs: usize,
    pub val_ap: f64,
    pub val_attc: Option<f64>,
    pub test_ap: f64,
    pub test_attc: Option<f64>,
    pub max_ap: bool,
    pub max_attc: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: Vec<CompareRow>,
    /// Per-run epoch histories, in the order of `rows`.
    pub histories: Vec<Vec<HistoryRow>>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

impl Comparison {
    /// One line per run with final metrics and max flags.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
    }

    /// All epoch histories, prefixed by run name.
    pub fn history_csv(&self) -> String {
        let mut out = String::from("run,epoch,train_loss,val_ap,val_attc,phi_used\n");
        for (row, hist) in self.rows.iter().zip(&self.histories) {
            for h in hist {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    row.run,
                    h.epoch,
                    h.train_loss,
                    h.val_ap,
                    opt(h.val_attc),
                    h.phi_used
                );
            }
        }
        out
    }

    /// Aligned text table; `*` marks the best test AP and ATTC.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let header = [
            "run",
            "loss",
            "recurrent",
            "epochs",
            "val AP",
            "val ATTC",
            "test AP",
            "test ATTC",
        ];
        let cells: Vec<[String; 8]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.run.clone(),
                    r.loss.clone(),
                    r.recurrent.clone(),
                    r.epochs.to_string(),
                    format!("{:.4}", r.val_ap),
                    fmt(r.val_attc),
                    format!("{:.4}{}", r.test_ap, if r.max_ap { " *" } else { "" }),
                    format!("{}{}", fmt(r.test_attc), if r.max_attc { " *" } else { "" }),
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, row: &[&str]| {
            let parts: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(c, &w)| format!("{c:<w$}"))
                .collect();
            out.push_str(parts.join("  ").trim_end());
            out.push('\n');
        };
        line(&mut out, &header);
        for row in &cells {
            line(
                &mut out,
                &row.iter().map(String::as_str).collect::<Vec<_>>(),
            );
        }
        out
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|_| TrainError::Data(DataError::MissingFile(path.to_path_buf())))?;
    serde_json::from_str(&text).map_err(|e| {
        TrainError::Data(DataError::Malformed {
            path: path.to_path_buf(),
            location: format!("line {}", e.line()),
            reason: e.to_string(),
        })
    })
}

/// Merges the histories and test reports of several run directories.
pub fn compare<P: AsRef<Path>>(run_dirs: &[P]) -> Result<Comparison> {
    let mut rows = Vec::new();
    let mut histories = Vec::new();
    for dir in run_dirs {
        let dir = dir.as_ref();
        if !dir.is_dir() {
            return Err(DataError::MissingFile(PathBuf::from(dir)).into());
        }
        let config: TrainConfig = read_json(&dir.join(CONFIG_FILE))?;
        let report: EvalReport = read_json(&dir.join(REPORT_FILE))?;
        let history = read_history_csv(&dir.join(HISTORY_FILE))?;
        let last = history.last();
        rows.push(CompareRow {
            run: dir.file_name().map_or_else(
                || dir.display().to_string(),
                |n| n.to_string_lossy().into_owned(),
            ),
            loss: config.loss.variant.to_string(),
            recurrent: serde_json::to_value(config.model.recurrent_kind)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default(),
            epochs: history.len(),
            val_ap: last.map_or(f64::NAN, |h| h.val_ap),
            val_attc: last.and_then(|h| h.val_attc),
            test_ap: report.macro_ap,
            test_attc: report.macro_attc,
            max_ap: false,
            max_attc: false,
        });
        histories.push(history);
    }
    let best_ap = rows
        .iter()
        .map(|r| r.test_ap)
        .fold(f64::NEG_INFINITY, f64::max);
    let best_attc = rows
        .iter()
        .filter_map(|r| r.test_attc)
        .fold(f64::NEG_INFINITY, f64::max);
    for r in &mut rows {
        r.max_ap = r.test_ap == best_ap;
        r.max_attc = r.test_attc == Some(best_attc);
    }
    Ok(Comparison { rows, histories })
}
