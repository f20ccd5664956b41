//! Experiment outputs: CSV plot data, the accuracy matrix, and the run
//! manifest. Every file is written to a temporary sibling and renamed into
//! place.
//!
//! Column layouts (fixed):
//!
//! | file | columns |
//! |------|---------|
//! | history | `task,epoch,train_loss,val_accuracy` |
//! | results | `kind,task,after_task,fraction,percent` |
//! | prune curves | `criterion,fraction,accuracy,drop` |
//! | cdf | `metric,value,cum_fraction` |
//!
//! In the results file `kind` is `r` for matrix cells (one row per
//! `task <= after_task`, empty value when unfilled), then one `acc` and one
//! `bwt` row with empty indices. Floats use the shortest representation
//! that parses back to the same value.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::metrics::ResultMatrix;
use crate::prune::{CdfMetric, CdfPoint, PruneCurve};
use crate::train::History;

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `bytes` to `path` via a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Invalid(format!("{} has no file name", path.display())))?;
    let mut tmp = PathBuf::from(dir);
    tmp.push(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn history_csv(histories: &[(usize, &History)]) -> String {
    let mut s = String::from("task,epoch,train_loss,val_accuracy\n");
    for (task, h) in histories {
        for e in &h.epochs {
            let _ = writeln!(s, "{task},{},{},{}", e.epoch, e.train_loss, e.val_accuracy);
        }
    }
    s
}

fn opt(v: Option<f64>) -> (String, String) {
    match v {
        Some(v) => (v.to_string(), (100.0 * v).to_string()),
        None => (String::new(), String::new()),
    }
}

pub fn results_csv(r: &ResultMatrix) -> String {
    let mut s = String::from("kind,task,after_task,fraction,percent\n");
    for j in 0..r.tasks() {
        for i in 0..=j {
            let (f, p) = opt(r.get(i, j));
            let _ = writeln!(s, "r,{i},{j},{f},{p}");
        }
    }
    let (f, p) = opt(r.acc().ok());
    let _ = writeln!(s, "acc,,,{f},{p}");
    let (f, p) = opt(r.bwt().ok());
    let _ = writeln!(s, "bwt,,,{f},{p}");
    s
}

/// Parsed form of [`results_csv`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedResults {
    pub results: ResultMatrix,
    pub acc: Option<f64>,
    pub bwt: Option<f64>,
}

pub fn parse_results_csv(text: &str) -> Result<ParsedResults> {
    let bad = |line: usize, what: &str| Error::Invalid(format!("results csv line {line}: {what}"));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "kind,task,after_task,fraction,percent")) => {}
        _ => return Err(bad(1, "unexpected header")),
    }
    let mut cells = Vec::new();
    let (mut acc, mut bwt) = (None, None);
    for (n, line) in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad(n + 1, "want 5 fields"));
        }
        let value = if f[3].is_empty() {
            None
        } else {
            Some(
                f[3].parse::<f64>()
                    .map_err(|_| bad(n + 1, "bad fraction"))?,
            )
        };
        match f[0] {
            "r" => {
                let i: usize = f[1].parse().map_err(|_| bad(n + 1, "bad task"))?;
                let j: usize = f[2].parse().map_err(|_| bad(n + 1, "bad after_task"))?;
                cells.push((i, j, value));
            }
            "acc" => acc = value,
            "bwt" => bwt = value,
            other => return Err(bad(n + 1, &format!("unknown kind {other:?}"))),
        }
    }
    let t = cells
        .iter()
        .map(|&(i, j, _)| i.max(j) + 1)
        .max()
        .unwrap_or(0);
    let mut results = ResultMatrix::new(t);
    for (i, j, v) in cells {
        if let Some(v) = v {
            results.set(i, j, v)?;
        }
    }
    Ok(ParsedResults { results, acc, bwt })
}

pub fn prune_csv(curves: &[PruneCurve]) -> String {
    let mut s = String::from("criterion,fraction,accuracy,drop\n");
    for c in curves {
        let name = c.criterion.name();
        for k in 0..c.fractions.len() {
            let _ = writeln!(
                s,
                "{name},{},{},{}",
                c.fractions[k], c.accuracy[k], c.accuracy_drop[k]
            );
        }
    }
    s
}

pub fn cdf_csv(cdfs: &[(CdfMetric, Vec<CdfPoint>)]) -> String {
    let mut s = String::from("metric,value,cum_fraction\n");
    for (m, points) in cdfs {
        for p in points {
            let _ = writeln!(s, "{},{},{}", m.name(), p.value, p.cum_fraction);
        }
    }
    s
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataFingerprint {
    pub path: String,
    pub sha256: String,
}

/// Run metadata. The only non-reproducible fields are the timestamps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub data: Vec<DataFingerprint>,
    pub normalization: Option<NormStats>,
    /// Seconds since the Unix epoch.
    pub started_at: u64,
    pub finished_at: u64,
    pub partial: bool,
    pub completed_tasks: usize,
    pub replayed_data: bool,
    pub error: Option<String>,
}

pub fn unix_time() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}
