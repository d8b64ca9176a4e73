//! Output directory handling, CSV writing and the run record.

use std::fs;
use std::path::{Path, PathBuf};

use diffblend::metrics::ParetoPoint;
use serde::{Deserialize, Serialize};

use crate::error::{RunError, RunResult};

/// Environment variable naming the default output root.
pub const OUT_DIR_ENV: &str = "DIFFBLEND_OUT_DIR";

/// Options that control where and what a run writes.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub plots: bool,
    pub command: String,
}

impl RunOptions {
    pub fn new(out_dir: impl Into<PathBuf>, command: &str) -> Self {
        Self { out_dir: out_dir.into(), plots: true, command: command.into() }
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.out_dir.join(file)
    }

    pub fn ensure_dir(&self) -> RunResult<()> {
        fs::create_dir_all(&self.out_dir).map_err(|e| RunError::io(&self.out_dir, e))
    }
}

/// Output directory precedence: explicit flag, config entry, `$DIFFBLEND_OUT_DIR/<name>`, `out/<name>`.
pub fn resolve_out_dir(flag: Option<&Path>, config: Option<&Path>, name: &str) -> PathBuf {
    if let Some(p) = flag.or(config) {
        return p.to_path_buf();
    }
    match std::env::var_os(OUT_DIR_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(name),
        _ => PathBuf::from("out").join(name),
    }
}

/// A CSV table with a fixed header; every row has a `status` column.
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:?}")
    }
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self { header: header.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write(&self, path: &Path) -> RunResult<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| RunError::Runtime(format!("{}: {e}", path.display())))?;
        let err = |e: csv::Error| RunError::Runtime(format!("{}: {e}", path.display()));
        w.write_record(&self.header).map_err(err)?;
        for r in &self.rows {
            w.write_record(r).map_err(err)?;
        }
        w.flush().map_err(|e| RunError::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodTiming {
    pub method: String,
    pub wall_clock_s: f64,
    pub tasks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discretization {
    pub steps: usize,
    pub samples: usize,
    pub grid: String,
    pub beta_min: f64,
    pub beta_max: f64,
    pub horizon: f64,
}

/// Provenance written to `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub name: String,
    pub config_hash: String,
    pub version: String,
    pub seeds: Vec<u64>,
    pub discretization: Discretization,
    pub methods: Vec<MethodTiming>,
    pub warnings: Vec<String>,
    pub outputs: Vec<String>,
    pub points: Vec<ParetoPoint>,
}

impl RunRecord {
    pub fn write(&self, opts: &RunOptions) -> RunResult<()> {
        let path = opts.path("run.json");
        let text = serde_json::to_string_pretty(self).expect("run records always serialise");
        fs::write(&path, text + "\n").map_err(|e| RunError::io(path, e))
    }
}
