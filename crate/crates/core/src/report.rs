//! Canonical experiment reports: one structured text document per run plus
//! flat CSV tables for plotting.
//!
//! The document is line-oriented with a stable key order, so two runs with
//! the same configuration and seed produce byte-identical bodies. Lines
//! whose key starts with `time.` carry wall-clock metadata and are excluded
//! from the determinism body. The document is self-describing: `decode` plus
//! `write_tables` reproduce every CSV without recomputation.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const FORMAT: &str = "mfreport";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            columns: columns.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push_row(&mut self, cells: Vec<String>) {
        assert_eq!(cells.len(), self.columns.len(), "table {}", self.name);
        debug_assert!(
            cells.iter().all(|c| !c.contains(' ') && !c.is_empty()),
            "cells must be non-empty and space-free"
        );
        self.rows.push(cells);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Cell lookup by row label (first column) and column name.
    pub fn cell(&self, row_label: &str, column: &str) -> Option<&str> {
        let ci = self.columns.iter().position(|c| c == column)?;
        self.rows
            .iter()
            .find(|r| r[0] == row_label)
            .map(|r| r[ci].as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub experiment: String,
    pub meta: Vec<(String, String)>,
    pub time: Vec<(String, String)>,
    pub tables: Vec<Table>,
}

impl Report {
    pub fn new(experiment: &str) -> Self {
        Self {
            experiment: experiment.to_string(),
            meta: Vec::new(),
            time: Vec::new(),
            tables: Vec::new(),
        }
    }

    pub fn push_meta(&mut self, key: &str, value: impl std::fmt::Display) {
        let v = value.to_string();
        debug_assert!(!key.contains(' ') && !key.starts_with("time."));
        self.meta.push((key.to_string(), v));
    }

    pub fn push_time(&mut self, key: &str, value: impl std::fmt::Display) {
        self.time.push((format!("time.{key}"), value.to_string()));
    }

    pub fn push_table(&mut self, table: Table) {
        self.tables.push(table);
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn encode(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{FORMAT} {FORMAT_VERSION}");
        let _ = writeln!(out, "experiment {}", self.experiment);
        for (k, v) in &self.time {
            let _ = writeln!(out, "{k} {v}");
        }
        for (k, v) in &self.meta {
            let _ = writeln!(out, "{k} {v}");
        }
        for t in &self.tables {
            let _ = writeln!(out, "table {} {}", t.name, t.columns.join(","));
            for row in &t.rows {
                let _ = writeln!(out, "row {}", row.join(" "));
            }
            out.push_str("endtable\n");
        }
        out.push_str("end\n");
        out
    }

    /// The deterministic portion: everything except `time.*` lines.
    pub fn body(&self) -> String {
        self.encode()
            .lines()
            .filter(|l| !l.starts_with("time."))
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn decode(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty report".into()))?;
        match header.split_once(' ') {
            Some((FORMAT, v)) if v == FORMAT_VERSION.to_string() => {}
            _ => {
                return Err(Error::Format(format!(
                    "not a {FORMAT} v{FORMAT_VERSION} document"
                )))
            }
        }
        let exp_line = lines
            .next()
            .ok_or_else(|| Error::Format("missing experiment record".into()))?;
        let experiment = exp_line
            .strip_prefix("experiment ")
            .ok_or_else(|| Error::Format("missing experiment record".into()))?
            .to_string();

        let mut report = Report::new(&experiment);
        let mut current: Option<Table> = None;
        let mut ended = false;
        for line in lines {
            if let Some(t) = current.as_mut() {
                if line == "endtable" {
                    report.tables.push(current.take().expect("open table"));
                } else if let Some(rest) = line.strip_prefix("row ") {
                    let cells: Vec<String> = rest.split(' ').map(|s| s.to_string()).collect();
                    if cells.len() != t.columns.len() {
                        return Err(Error::Format(format!(
                            "table {}: row width {} vs {} columns",
                            t.name,
                            cells.len(),
                            t.columns.len()
                        )));
                    }
                    t.rows.push(cells);
                } else {
                    return Err(Error::Format(format!("unexpected line in table: '{line}'")));
                }
                continue;
            }
            if line == "end" {
                ended = true;
                break;
            }
            if let Some(rest) = line.strip_prefix("table ") {
                let (name, cols) = rest
                    .split_once(' ')
                    .ok_or_else(|| Error::Format(format!("bad table record '{line}'")))?;
                current = Some(Table {
                    name: name.to_string(),
                    columns: cols.split(',').map(|s| s.to_string()).collect(),
                    rows: Vec::new(),
                });
                continue;
            }
            let (k, v) = line
                .split_once(' ')
                .ok_or_else(|| Error::Format(format!("bad record '{line}'")))?;
            if k.starts_with("time.") {
                report.time.push((k.to_string(), v.to_string()));
            } else {
                report.meta.push((k.to_string(), v.to_string()));
            }
        }
        if !ended {
            return Err(Error::Format("truncated report (no end record)".into()));
        }
        Ok(report)
    }

    /// Writes `report.txt` and `tables/*.csv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("tables"))?;
        std::fs::write(dir.join("report.txt"), self.encode())?;
        self.write_tables(dir)?;
        Ok(())
    }

    pub fn write_tables(&self, dir: &Path) -> Result<()> {
        let tdir = dir.join("tables");
        std::fs::create_dir_all(&tdir)?;
        for t in &self.tables {
            std::fs::write(tdir.join(format!("{}.csv", t.name)), t.to_csv())?;
        }
        Ok(())
    }
}

/// Fixed-precision accuracy cell.
pub fn fmt_acc(v: f64) -> String {
    format!("{v:.6}")
}

/// Full-precision value cell (losses, interference).
pub fn fmt_val(v: f64) -> String {
    format!("{v}")
}
