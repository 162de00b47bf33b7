//! Run directories, CSV tables and the line-oriented run log.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use hsa_core::data::LabelMap;
use hsa_core::metrics::EvalReport;
use hsa_core::train::TrainHistory;
use serde::Serialize;

use crate::error::{Error, Result};

/// Creates `<out>/<YYYYmmddTHHMMSS>-seed<seed>`, adding a numeric suffix
/// if that name is taken.
pub fn create_run_dir(out: &Path, seed: u64) -> Result<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S");
    let base = format!("{stamp}-seed{seed}");
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for k in 0.. {
        let name = if k == 0 { base.clone() } else { format!("{base}-{k}") };
        let dir = out.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    unreachable!()
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write_text(path, &text)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

pub fn history_csv(history: &TrainHistory) -> String {
    let mut s = String::from("epoch,loss,ce,ae,val_macro_f1\n");
    for e in &history.epochs {
        s.push_str(&format!("{},{:?},{:?},{:?},{}\n", e.epoch, e.loss, e.ce, e.ae, opt(e.val_macro_f1)));
    }
    s
}

pub fn ae_history_csv(history: &TrainHistory) -> String {
    let mut s = String::from("ae_epoch,elbo\n");
    for (i, l) in history.ae_epochs.iter().enumerate() {
        s.push_str(&format!("{},{l:?}\n", i + 1));
    }
    s
}

/// Class names for report tables: dataset label ids, plus `unseen` when
/// the matrix has one more row than `labels`.
pub fn class_names(labels: &LabelMap, classes: usize) -> Vec<String> {
    (0..classes).map(|i| labels.label(i).map_or_else(|| "unseen".to_string(), |l| l.to_string())).collect()
}

pub fn confusion_csv(report: &EvalReport, names: &[String]) -> String {
    let mut s = String::from("true\\predicted");
    for n in names {
        s.push(',');
        s.push_str(n);
    }
    s.push('\n');
    for (n, row) in names.iter().zip(&report.confusion.counts) {
        s.push_str(n);
        for c in row {
            s.push_str(&format!(",{c}"));
        }
        s.push('\n');
    }
    s
}

pub fn per_class_csv(report: &EvalReport, names: &[String]) -> String {
    let mut s = String::from("class,precision,recall,f1,support,degenerate\n");
    for (n, m) in names.iter().zip(&report.per_class) {
        s.push_str(&format!("{n},{:?},{:?},{:?},{},{}\n", m.precision, m.recall, m.f1, m.support, m.degenerate));
    }
    s
}

/// Writes `<stem>.json`, `<stem>_confusion.csv` and `<stem>_per_class.csv`.
pub fn write_eval(dir: &Path, stem: &str, report: &EvalReport, labels: &LabelMap) -> Result<()> {
    let names = class_names(labels, report.confusion.counts.len());
    write_json(&dir.join(format!("{stem}.json")), report)?;
    write_text(&dir.join(format!("{stem}_confusion.csv")), &confusion_csv(report, &names))?;
    write_text(&dir.join(format!("{stem}_per_class.csv")), &per_class_csv(report, &names))
}

/// Appends lines to `log.txt` in the run directory and echoes them to
/// stderr.
pub struct RunLog {
    file: Option<File>,
    echo: bool,
}

impl RunLog {
    pub fn create(dir: &Path, echo: bool) -> Result<Self> {
        let path = dir.join("log.txt");
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self { file: Some(file), echo })
    }

    pub fn stderr() -> Self {
        Self { file: None, echo: true }
    }

    /// Writes to the log file only.
    pub fn record(&mut self, msg: impl AsRef<str>) {
        if let Some(f) = &mut self.file {
            let _ = writeln!(f, "{}", msg.as_ref());
        }
    }

    pub fn line(&mut self, msg: impl AsRef<str>) {
        let msg = msg.as_ref();
        if self.echo {
            eprintln!("{msg}");
        }
        if let Some(f) = &mut self.file {
            let _ = writeln!(f, "{msg}");
        }
    }
}
