//! Dataset ingestion (JSONL and CSV) and output-file helpers.

use std::path::Path;

use diffreg::{generate, make_task, Row};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

/// Affine map from task units to a 0-100 percentage scale.
pub const PHYSICAL_CENTER: f64 = 50.0;
pub const PHYSICAL_SCALE: f64 = 12.5;

/// Which CSV columns hold what. Unset lists fall back to: attributes are the
/// columns whose name starts with `attr`, features are all remaining columns
/// other than the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvColumns {
    pub target: String,
    pub features: Option<Vec<String>>,
    pub attributes: Option<Vec<String>>,
}

impl Default for CsvColumns {
    fn default() -> Self {
        Self {
            target: "y".into(),
            features: None,
            attributes: None,
        }
    }
}

fn parse_err(path: &Path, message: impl Into<String>) -> CliError {
    CliError::DatasetParse {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Reads rows from `.csv` (via `columns`) or JSONL (any other extension).
pub fn load_rows(path: &Path, columns: &CsvColumns) -> Result<Vec<Row>> {
    if !path.exists() {
        return Err(CliError::DatasetNotFound(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        parse_csv(path, &text, columns)
    } else {
        parse_jsonl(path, &text)
    }
}

pub fn parse_jsonl(path: &Path, text: &str) -> Result<Vec<Row>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| parse_err(path, format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn parse_csv(path: &Path, text: &str, columns: &CsvColumns) -> Result<Vec<Row>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| parse_err(path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(path, format!("missing column {name:?}")))
    };
    let attributes: Vec<usize> = match &columns.attributes {
        Some(names) => names.iter().map(|n| find(n)).collect::<Result<_>>()?,
        None => (0..headers.len()).filter(|&i| headers[i].starts_with("attr")).collect(),
    };
    let target = headers.iter().position(|h| *h == columns.target);
    let features: Vec<usize> = match &columns.features {
        Some(names) => names.iter().map(|n| find(n)).collect::<Result<_>>()?,
        None => (0..headers.len())
            .filter(|i| Some(*i) != target && !attributes.contains(i))
            .collect(),
    };
    let mut rows = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(path, e.to_string()))?;
        let num = |i: usize| -> Result<f64> {
            let cell = rec.get(i).unwrap_or("").trim();
            cell.parse()
                .map_err(|_| parse_err(path, format!("row {}: {:?} in column {:?} is not a number", line + 1, cell, headers[i])))
        };
        let y = match target.map(|i| rec.get(i).unwrap_or("").trim()) {
            None | Some("") => None,
            Some(_) => Some(num(target.unwrap())?),
        };
        rows.push(Row {
            features: features.iter().map(|&i| num(i)).collect::<Result<_>>()?,
            attributes: attributes.iter().map(|&i| num(i)).collect::<Result<_>>()?,
            y,
        });
    }
    Ok(rows)
}

pub fn to_jsonl(rows: &[Row]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("row serializes") + "\n")
        .collect()
}

pub fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

pub fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn synthetic(cfg: &ExperimentConfig, n: usize, seed: u64) -> Result<Vec<Row>> {
    let task = cfg
        .task
        .ok_or_else(|| CliError::ConfigParse("test_dataset is required when no task is set".into()))?;
    let mut rows = generate(&make_task(task), n, seed)?.rows;
    if cfg.physical_units {
        for r in &mut rows {
            r.y = r.y.map(|y| PHYSICAL_CENTER + PHYSICAL_SCALE * y);
        }
    }
    Ok(rows)
}

fn finish(cfg: &ExperimentConfig, mut rows: Vec<Row>) -> Vec<Row> {
    if cfg.vision_only {
        rows.iter_mut().for_each(|r| r.attributes.clear());
    }
    rows
}

pub fn train_rows(cfg: &ExperimentConfig) -> Result<Vec<Row>> {
    let rows = match &cfg.dataset {
        Some(p) => load_rows(p, &cfg.columns)?,
        None => synthetic(cfg, cfg.n_train, cfg.data_seed)?,
    };
    Ok(finish(cfg, rows))
}

pub fn test_rows(cfg: &ExperimentConfig) -> Result<Vec<Row>> {
    let rows = match &cfg.test_dataset {
        Some(p) => load_rows(p, &cfg.columns)?,
        None => synthetic(cfg, cfg.n_test, cfg.test_seed)?,
    };
    Ok(finish(cfg, rows))
}
