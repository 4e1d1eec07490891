//! Flattens run outputs into one long-format CSV (`source,series,x,y`) that
//! any plotting tool can pivot.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub source: String,
    pub series: String,
    pub x: f64,
    pub y: f64,
}

pub fn convert(inputs: &[PathBuf]) -> anyhow::Result<Vec<Row>> {
    let mut rows = Vec::new();
    for path in inputs {
        let source = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
        let is_csv = path.extension().is_some_and(|e| e == "csv");
        let found = if is_csv { from_csv(path, &source)? } else { from_json(path, &source)? };
        rows.extend(found);
    }
    Ok(rows)
}

fn unrecognized(path: &Path) -> anyhow::Error {
    UsageError(format!(
        "{}: not a sweep grid, embedding log, attack result or pilot report",
        path.display()
    ))
    .into()
}

fn from_csv(path: &Path, source: &str) -> anyhow::Result<Vec<Row>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let records = reader
        .records()
        .map(|r| {
            r?.iter()
                .map(|v| v.parse::<f64>().with_context(|| format!("{}: non-numeric value {v:?}", path.display())))
                .collect::<anyhow::Result<Vec<f64>>>()
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let row = |series: String, x: f64, y: f64| Row { source: source.to_owned(), series, x, y };
    match header.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
        ["eps_n", "eps_a", "metric"] => Ok(records.iter().map(|r| row(format!("eps_a={}", r[1]), r[0], r[2])).collect()),
        ["t", rest @ ..] => Ok(records
            .iter()
            .flat_map(|r| rest.iter().enumerate().map(move |(i, name)| (name.to_string(), r[0], r[i + 1])))
            .map(|(s, x, y)| row(s, x, y))
            .collect()),
        _ => Err(unrecognized(path)),
    }
}

fn num(v: &Value) -> Option<f64> {
    v.as_f64()
}

fn from_json(path: &Path, source: &str) -> anyhow::Result<Vec<Row>> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let doc: Value = serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))?;
    let row = |series: &str, x: f64, y: f64| Row { source: source.to_owned(), series: series.to_owned(), x, y };
    let mut rows = Vec::new();
    if let (Some(points), Some(kind)) = (doc.get("points").and_then(Value::as_array), doc.get("kind").and_then(Value::as_str)) {
        for p in points {
            if let (Some(b), Some(m)) = (p.get("budget").and_then(num), p.get("metric").and_then(num)) {
                rows.push(row(kind, b, m));
            }
        }
    } else if let Some(mean) = doc.get("mean_lfs").and_then(Value::as_array) {
        for (l, v) in mean.iter().enumerate() {
            rows.push(row("mean_lfs", l as f64, num(v).unwrap_or(f64::NAN)));
        }
        let stab = doc.get("rank_stability").unwrap_or(&Value::Null);
        for name in ["ecdf_rank_dispersion", "ecdf_stability"] {
            for pair in stab.get(name).and_then(Value::as_array).into_iter().flatten() {
                if let (Some(x), Some(y)) = (pair.get(0).and_then(num), pair.get(1).and_then(num)) {
                    rows.push(row(name, x, y));
                }
            }
        }
    } else if let (Some(s), Some(r)) = (doc.get("suspect_score").and_then(num), doc.get("reference_score").and_then(num)) {
        rows.push(row("suspect_score", 0.0, s));
        rows.push(row("reference_score", 0.0, r));
    } else {
        return Err(unrecognized(path));
    }
    Ok(rows)
}
