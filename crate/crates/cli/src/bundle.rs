//! Report bundles: a directory with a manifest and payload files, written
//! through a temporary directory and renamed into place.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use bmolab::report::{Backend, SCHEMA_VERSION};

/// One typed report. `definition` says what the numbers in `data` measure.
#[derive(Debug, Clone, Serialize)]
pub struct TypedReport {
    pub kind: &'static str,
    pub name: String,
    pub backend: Backend,
    #[serde(serialize_with = "bmolab::report::finite_or_null")]
    pub p: Option<f64>,
    pub definition: &'static str,
    pub passed: Option<bool>,
    pub data: Value,
}

impl TypedReport {
    pub fn new(kind: &'static str, name: impl Into<String>, backend: Backend, definition: &'static str, data: impl Serialize) -> Self {
        TypedReport { kind, name: name.into(), backend, p: None, definition, passed: None, data: to_value(data) }
    }
    pub fn p(mut self, p: f64) -> Self {
        self.p = Some(p);
        self
    }
    pub fn check(mut self, ok: bool) -> Self {
        self.passed = Some(ok);
        self
    }
}

/// serde_json refuses non-finite floats; they become null here.
pub fn to_value(x: impl Serialize) -> Value {
    serde_json::to_value(x).unwrap_or(Value::Null)
}

#[derive(Debug, Clone, Default)]
pub struct Bundle {
    pub reports: Vec<TypedReport>,
    /// CSV files: (file name, contents)
    pub tables: Vec<(String, String)>,
    /// Extra JSON payload files: (file name, contents)
    pub extra: Vec<(String, String)>,
}

impl Bundle {
    pub fn push(&mut self, r: TypedReport) {
        self.reports.push(r);
    }

    pub fn table(&mut self, name: &str, header: &[&str], rows: Vec<Vec<String>>) {
        let mut s = header.join(",");
        s.push('\n');
        for r in rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        self.tables.push((name.to_string(), s));
    }

    pub fn failures(&self) -> Vec<String> {
        self.reports.iter().filter(|r| r.passed == Some(false)).map(|r| format!("{}:{}", r.kind, r.name)).collect()
    }

    pub fn checks(&self) -> usize {
        self.reports.iter().filter(|r| r.passed.is_some()).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Formats {
    pub json: bool,
    pub csv: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: String,
    pub config: Value,
    pub files: Vec<String>,
    pub checks: usize,
    pub failures: Vec<String>,
    pub passed: bool,
    pub started_unix_ms: u128,
    pub wall_clock_ms: u128,
}

#[derive(Serialize)]
struct Payload<'a> {
    schema_version: u32,
    subcommand: &'a str,
    reports: &'a [TypedReport],
}

/// Writes `dir/name` atomically and returns its path.
pub fn write(dir: &Path, name: &str, subcommand: &str, config: Value, bundle: &Bundle, formats: Formats, started_unix_ms: u128, wall_clock_ms: u128) -> std::io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let pid = std::process::id();
    let tmp = dir.join(format!(".{name}.tmp-{pid}"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir(&tmp)?;
    let mut files = Vec::new();
    if formats.json {
        let payload = Payload { schema_version: SCHEMA_VERSION, subcommand, reports: &bundle.reports };
        fs::write(tmp.join("report.json"), serde_json::to_string_pretty(&payload)?)?;
        files.push("report.json".to_string());
        for (f, body) in &bundle.extra {
            fs::write(tmp.join(f), body)?;
            files.push(f.clone());
        }
    }
    if formats.csv {
        for (f, body) in &bundle.tables {
            fs::write(tmp.join(f), body)?;
            files.push(f.clone());
        }
    }
    let failures = bundle.failures();
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        tool: "bmolab",
        version: env!("CARGO_PKG_VERSION"),
        subcommand: subcommand.to_string(),
        config,
        files,
        checks: bundle.checks(),
        passed: failures.is_empty(),
        failures,
        started_unix_ms,
        wall_clock_ms,
    };
    fs::write(tmp.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;

    let target = dir.join(name);
    let old = dir.join(format!(".{name}.old-{pid}"));
    let replaced = target.exists();
    if replaced {
        fs::rename(&target, &old)?;
    }
    fs::rename(&tmp, &target)?;
    if replaced {
        fs::remove_dir_all(&old)?;
    }
    Ok(target)
}
