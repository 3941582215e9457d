//! Result sets and their on-disk form: one CSV per series plus `summary.json`.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use crate::config::{Scenario, SCHEMA_VERSION};
use crate::error::CliError;

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<u32> for Cell {
    fn from(v: u32) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Int(v as i64)
    }
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            // shortest round-trip form, exponent only for extreme magnitudes
            Cell::Float(v) => format!("{v:?}"),
            Cell::Text(s) => s.clone(),
        }
    }
}

/// Tabular series. Every table starts with `seed` and `version` columns
/// except campaign aggregates, which start with `seed_count` and `version`.
#[derive(Debug, Clone)]
pub struct Table {
    pub name: String,
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&'static str]) -> Self {
        let mut all = vec!["seed", "version"];
        all.extend_from_slice(columns);
        Self {
            name: name.into(),
            columns: all,
            rows: vec![],
        }
    }

    pub fn aggregate(name: &str, columns: &[&'static str]) -> Self {
        let mut all = vec!["seed_count", "version"];
        all.extend_from_slice(columns);
        Self {
            name: name.into(),
            columns: all,
            rows: vec![],
        }
    }

    /// Appends a row; the leading seed (or seed count) and version are added here.
    pub fn push(&mut self, seed: u64, values: Vec<Cell>) {
        let mut row = vec![Cell::Int(seed as i64), Cell::Text(esp_core::VERSION.into())];
        row.extend(values);
        debug_assert_eq!(row.len(), self.columns.len(), "row width for {}", self.name);
        self.rows.push(row);
    }

    fn to_bytes(&self) -> Result<Vec<u8>, csv::Error> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(vec![]);
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::render))?;
        }
        w.into_inner().map_err(|e| e.into_error().into())
    }
}

/// Everything one scenario run produces.
#[derive(Debug, Clone)]
pub struct ResultSet {
    pub tables: Vec<Table>,
    /// One entry per seed: `seed`, `version`, `converged` plus metrics.
    pub runs: Vec<Map<String, Value>>,
    pub aggregate: Map<String, Value>,
    pub converged: bool,
}

impl Default for ResultSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ResultSet {
    pub fn new() -> Self {
        Self {
            tables: vec![],
            runs: vec![],
            aggregate: Map::new(),
            converged: true,
        }
    }

    pub fn run(&mut self, seed: u64, converged: bool, metrics: Value) {
        let mut rec = Map::new();
        rec.insert("seed".into(), json!(seed));
        rec.insert("version".into(), json!(esp_core::VERSION));
        rec.insert("converged".into(), json!(converged));
        if let Value::Object(m) = metrics {
            rec.extend(m);
        }
        self.converged &= converged;
        self.runs.push(rec);
    }

    fn summary(&self, scenario: &Scenario) -> Value {
        json!({
            "schema_version": SCHEMA_VERSION,
            "library_version": esp_core::VERSION,
            "kind": scenario.kind.name(),
            "status": if self.converged { "ok" } else { "partial" },
            "seeds": scenario.seeds,
            "scenario": scenario,
            "files": self.tables.iter().map(|t| format!("{}.csv", t.name)).collect::<Vec<_>>(),
            "runs": self.runs,
            "aggregate": self.aggregate,
        })
    }

    /// Writes every table and the summary into `dir`, each atomically.
    pub fn emit(&self, scenario: &Scenario, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
        if self.tables.iter().all(|t| t.rows.is_empty()) && self.runs.is_empty() {
            return Err(CliError::invalid("results", "nothing to write"));
        }
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let mut written = vec![];
        for t in &self.tables {
            let path = dir.join(format!("{}.csv", t.name));
            let bytes = t.to_bytes().map_err(|e| io(&path, e.into()))?;
            write_atomic(&path, &bytes)?;
            written.push(path);
        }
        let path = dir.join("summary.json");
        let mut bytes = serde_json::to_vec_pretty(&self.summary(scenario)).map_err(|e| io(&path, e.into()))?;
        bytes.push(b'\n');
        write_atomic(&path, &bytes)?;
        written.push(path);
        Ok(written)
    }
}

fn io(path: &Path, source: std::io::Error) -> CliError {
    CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Temp file in the target directory, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| io(path, e))?;
    tmp.persist(path).map_err(|e| io(path, e.error))?;
    Ok(())
}
