//! CSV ingestion and export.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use log::{info, warn};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{GediError, Result};
use crate::indicators::Task;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: DMatrix<f64>,
    pub feature_names: Vec<String>,
    pub protected: Vec<f64>,
    pub protected_name: String,
    pub target: Vec<f64>,
    pub target_name: String,
    pub task: Task,
    /// Rows discarded for missing values while loading.
    pub dropped_rows: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct DatasetSummary {
    pub rows: usize,
    pub features: usize,
    pub dropped_rows: usize,
    pub protected: String,
    pub target: String,
    pub task: Task,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    pub fn summary(&self) -> DatasetSummary {
        DatasetSummary {
            rows: self.len(),
            features: self.features.ncols(),
            dropped_rows: self.dropped_rows,
            protected: self.protected_name.clone(),
            target: self.target_name.clone(),
            task: self.task,
        }
    }

    /// Rows `idx`, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            feature_names: self.feature_names.clone(),
            protected: idx.iter().map(|&i| self.protected[i]).collect(),
            protected_name: self.protected_name.clone(),
            target: idx.iter().map(|&i| self.target[i]).collect(),
            target_name: self.target_name.clone(),
            task: self.task,
            dropped_rows: 0,
        }
    }

    /// Writes features, the protected column (when it is not a feature) and
    /// the target, followed by any `extra` columns. Floats use the shortest
    /// representation that parses back to the same value.
    pub fn write_csv<W: Write>(&self, out: W, extra: &[(&str, &[f64])]) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let protected_is_feature = self.feature_names.contains(&self.protected_name);
        let mut header: Vec<&str> = self.feature_names.iter().map(String::as_str).collect();
        if !protected_is_feature {
            header.push(&self.protected_name);
        }
        header.push(&self.target_name);
        header.extend(extra.iter().map(|(name, _)| *name));
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut row: Vec<String> = self.features.row(i).iter().map(|v| v.to_string()).collect();
            if !protected_is_feature {
                row.push(self.protected[i].to_string());
            }
            row.push(self.target[i].to_string());
            row.extend(extra.iter().map(|(_, col)| col[i].to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path, extra: &[(&str, &[f64])]) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?, extra)
    }
}

#[derive(Debug, Clone)]
pub struct Schema {
    pub protected: String,
    pub target: String,
    /// Inferred from the target when absent.
    pub task: Option<Task>,
    /// Keep the protected attribute out of the feature matrix.
    pub drop_protected: bool,
}

impl Schema {
    pub fn new(protected: impl Into<String>, target: impl Into<String>) -> Self {
        Self {
            protected: protected.into(),
            target: target.into(),
            task: None,
            drop_protected: false,
        }
    }

    pub fn with_task(mut self, task: Option<Task>) -> Self {
        self.task = task;
        self
    }
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c == "?" || c.eq_ignore_ascii_case("na") || c.eq_ignore_ascii_case("nan")
}

fn parse_number(cell: &str) -> Option<f64> {
    cell.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Sorted distinct labels of a non-numeric column.
fn categories<'a>(cells: impl Iterator<Item = &'a str>) -> Vec<String> {
    cells.map(|c| c.trim().to_string()).collect::<BTreeSet<_>>().into_iter().collect()
}

pub fn load_dataset(path: &Path, schema: &Schema) -> Result<Dataset> {
    read_dataset(std::fs::File::open(path)?, schema)
}

pub fn read_dataset<R: Read>(input: R, schema: &Schema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::Headers).from_reader(input);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| GediError::MissingColumn(name.to_string()))
    };
    let p_col = find(&schema.protected)?;
    let t_col = find(&schema.target)?;

    let mut rows: Vec<(usize, csv::StringRecord)> = Vec::new();
    let mut dropped = 0;
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        // header is line 1
        let line = i + 2;
        if record.iter().any(is_missing) {
            dropped += 1;
            continue;
        }
        rows.push((line, record));
    }
    if dropped > 0 {
        info!("dropped {dropped} rows with missing values");
    }
    if rows.is_empty() {
        return Err(GediError::EmptyInput(0));
    }

    let numeric: Vec<bool> = (0..header.len())
        .map(|c| rows.iter().all(|(_, r)| parse_number(&r[c]).is_some()))
        .collect();

    let target = decode_target(&rows, t_col, &header[t_col], numeric[t_col], schema.task)?;
    let task = match schema.task {
        Some(t) => t,
        None if target.iter().all(|v| *v == 0.0 || *v == 1.0) => Task::Classification,
        None => Task::Regression,
    };

    let protected = if numeric[p_col] {
        rows.iter().map(|(_, r)| parse_number(&r[p_col]).unwrap()).collect()
    } else {
        let cats = categories(rows.iter().map(|(_, r)| &r[p_col]));
        if cats.len() > 2 {
            warn!("protected column `{}` is categorical; using sorted category codes", header[p_col]);
        }
        rows.iter()
            .map(|(_, r)| cats.iter().position(|c| c == r[p_col].trim()).unwrap() as f64)
            .collect::<Vec<f64>>()
    };

    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut names = Vec::new();
    for c in 0..header.len() {
        if c == t_col || (c == p_col && schema.drop_protected) {
            continue;
        }
        if c == p_col {
            columns.push(protected.clone());
            names.push(header[c].clone());
        } else if numeric[c] {
            columns.push(rows.iter().map(|(_, r)| parse_number(&r[c]).unwrap()).collect());
            names.push(header[c].clone());
        } else {
            for cat in categories(rows.iter().map(|(_, r)| &r[c])) {
                columns.push(rows.iter().map(|(_, r)| f64::from(u8::from(r[c].trim() == cat))).collect());
                names.push(format!("{}={}", header[c], cat));
            }
        }
    }
    let n = rows.len();
    let features = DMatrix::from_fn(n, columns.len(), |i, j| columns[j][i]);

    Ok(Dataset {
        features,
        feature_names: names,
        protected,
        protected_name: header[p_col].clone(),
        target,
        target_name: header[t_col].clone(),
        task,
        dropped_rows: dropped,
    })
}

/// Numeric targets pass through unless a two-valued column is declared a
/// classification target; text targets must have two labels, mapped to 0
/// and 1 in sorted order.
fn decode_target(
    rows: &[(usize, csv::StringRecord)],
    col: usize,
    name: &str,
    numeric: bool,
    task: Option<Task>,
) -> Result<Vec<f64>> {
    if numeric {
        let values: Vec<f64> = rows.iter().map(|(_, r)| parse_number(&r[col]).unwrap()).collect();
        if task == Some(Task::Classification) && values.iter().any(|v| *v != 0.0 && *v != 1.0) {
            let distinct: BTreeMap<u64, f64> = values.iter().map(|v| (v.to_bits(), *v)).collect();
            let mut levels: Vec<f64> = distinct.into_values().collect();
            levels.sort_by(f64::total_cmp);
            if levels.len() != 2 {
                return Err(GediError::InvalidSpec(format!(
                    "classification target `{name}` has {} distinct values",
                    levels.len()
                )));
            }
            return Ok(values.iter().map(|v| if *v == levels[1] { 1.0 } else { 0.0 }).collect());
        }
        return Ok(values);
    }
    let cats = categories(rows.iter().map(|(_, r)| &r[col]));
    if task == Some(Task::Regression) || cats.len() != 2 {
        let (line, record) = rows
            .iter()
            .find(|(_, r)| parse_number(&r[col]).is_none())
            .expect("a non-numeric cell exists");
        return Err(GediError::ParseError {
            line: *line,
            column: name.to_string(),
            message: format!("cannot use `{}` as a target value", record[col].trim()),
        });
    }
    Ok(rows
        .iter()
        .map(|(_, r)| if r[col].trim() == cats[1] { 1.0 } else { 0.0 })
        .collect())
}
