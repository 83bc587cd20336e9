//! Experiment runner for the `syncrds` command.

pub mod config;
pub mod output;
pub mod runner;

use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

fn diagnostic_kind(doc: &toml::Table, requested: Option<&str>) -> Result<String, CliError> {
    let named = match doc.get("diagnostic").and_then(|d| d.get("kind")) {
        Some(toml::Value::String(s)) => Some(s.as_str()),
        Some(_) => return Err(CliError::Config("diagnostic.kind must be a string".into())),
        None => None,
    };
    let kind = match (requested, named) {
        (Some(r), _) => r,
        (None, Some(n)) => n,
        (None, None) => return Err(CliError::Config("missing key diagnostic.kind".into())),
    };
    let kind = kind.replace('_', "-");
    if !runner::DIAGNOSTICS.contains(&kind.as_str()) {
        return Err(CliError::Config(format!(
            "diagnostic.kind '{kind}' is not one of {}",
            runner::DIAGNOSTICS.join(", ")
        )));
    }
    Ok(kind)
}

/// Runs the experiment described by `config_path` and returns the output
/// directory. `kind` overrides `diagnostic.kind`.
pub fn execute(config_path: &Path, overrides: &[String], kind: Option<&str>) -> Result<PathBuf, CliError> {
    let doc = config::load_document(config_path, overrides)?;
    config::check_top_level(&doc)?;
    let kind = diagnostic_kind(&doc, kind)?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    let output = config::parse_output(&doc, base)?;
    let threads = config::parse_threads(&doc)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {threads} threads: {e}")))?;
    let outcome = pool.install(|| runner::run(&doc, base, &kind))?;

    let report = &outcome.report;
    let mut artifacts = Vec::new();
    if output.csv {
        artifacts.push((format!("{kind}.csv"), report.to_csv().into_bytes()));
    }
    if output.json {
        artifacts.push(("report.json".to_string(), report.to_json().into_bytes()));
    }
    if output.plot {
        if let Some(svg) = report.to_svg() {
            artifacts.push((format!("{kind}.svg"), svg.into_bytes()));
        }
    }
    let mut head = Map::new();
    head.insert("schema".into(), json!("syncrds-manifest/1"));
    head.insert("tool".into(), json!("syncrds"));
    head.insert("version".into(), json!(env!("CARGO_PKG_VERSION")));
    head.insert("diagnostic".into(), json!(kind));
    head.insert("seed".into(), json!(report.seed));
    head.insert("threads".into(), json!(threads));
    head.insert("config".into(), serde_json::to_value(&doc).unwrap_or(Value::Null));
    head.insert("resolved".into(), Value::Object(outcome.resolved));
    output::write_artifacts(&output.dir, &artifacts, head)?;
    Ok(output.dir)
}
