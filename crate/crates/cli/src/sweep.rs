//! Parameter sweeps: substitute values along a dotted path of the scenario
//! document, re-run, and collect one combined CSV with a stable column
//! order.

use crate::runner::{run_scenario, RunError};
use crate::scenario::{Scenario, ScenarioError};
use std::path::Path;

pub struct SweepResult {
    pub csv: String,
    pub any_violated: bool,
}

/// Set `path` (dot-separated keys) in a TOML document to a value parsed from
/// `raw` (number, boolean, or string).
fn set_path(doc: &mut toml::Value, path: &str, raw: &str) -> Result<(), RunError> {
    let mut cursor = doc;
    let keys: Vec<&str> = path.split('.').collect();
    for key in &keys[..keys.len() - 1] {
        cursor = cursor
            .get_mut(key)
            .ok_or_else(|| RunError::Unsupported(format!("no key `{key}` in scenario")))?;
    }
    let last = keys.last().unwrap();
    let slot = cursor
        .get_mut(last)
        .ok_or_else(|| RunError::Unsupported(format!("no key `{last}` in scenario")))?;
    let new_value = if let Ok(i) = raw.parse::<i64>() {
        toml::Value::Integer(i)
    } else if let Ok(f) = raw.parse::<f64>() {
        toml::Value::Float(f)
    } else if let Ok(b) = raw.parse::<bool>() {
        toml::Value::Boolean(b)
    } else {
        toml::Value::String(raw.to_string())
    };
    *slot = new_value;
    Ok(())
}

pub fn sweep(
    base: Scenario,
    axis: &str,
    values: &[String],
    out: Option<&Path>,
) -> Result<SweepResult, RunError> {
    let base_doc: toml::Value = toml::from_str(&base.to_toml())
        .map_err(|e| RunError::Scenario(ScenarioError::Schema(e)))?;
    let mut header: Vec<String> = vec![axis.to_string(), "hash".to_string()];
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut any_violated = false;
    for (idx, value) in values.iter().enumerate() {
        let mut doc = base_doc.clone();
        set_path(&mut doc, axis, value)?;
        let text =
            toml::to_string(&doc).map_err(|e| RunError::Unsupported(format!("re-encode: {e}")))?;
        let scenario = Scenario::from_toml(&text)?;
        let artifacts = run_scenario(scenario, out)?;
        any_violated |= artifacts.any_violated();
        let mut row = vec![value.clone(), artifacts.hash.clone()];
        // verdict and gap/bound columns in report-name order, fixed on the
        // first run
        let mut sorted: Vec<_> = artifacts.reports.iter().collect();
        sorted.sort_by(|a, b| a.0.cmp(&b.0));
        for (name, report) in sorted {
            if report.get("verdict").is_none() {
                continue;
            }
            if idx == 0 {
                header.push(format!("{name}_gap"));
                header.push(format!("{name}_bound"));
                header.push(format!("{name}_verdict"));
            }
            row.push(report["gap"].to_string());
            row.push(report["bound"].to_string());
            row.push(report["verdict"].as_str().unwrap_or("?").to_string());
        }
        rows.push(row);
    }
    let mut csv = header.join(",") + "\n";
    for row in rows {
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("sweep.csv"), &csv)?;
    }
    Ok(SweepResult { csv, any_violated })
}
