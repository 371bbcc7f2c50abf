//! CSV ingestion and output tables.
//!
//! A data directory holds one CSV per task (`<task id>.csv`): a header row
//! whose first column is `y`, then one column per feature. Every task must
//! share the same feature header.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::problem::{ModelFit, MtlProblem, TaskDataset};

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Clone)]
pub struct TaskDirectory {
    pub problem: MtlProblem,
    pub features: Vec<String>,
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path, line, format!("{other:?}")),
    }
}

/// Reads one task file; returns the feature header and the dataset.
pub fn read_task_csv(path: &Path) -> Result<(Vec<String>, TaskDataset)> {
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::parse(path, 0, "file name is not valid UTF-8"))?
        .to_string();
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(|e| csv_error(path, e))?;
    let header: Vec<String> = rdr.headers().map_err(|e| csv_error(path, e))?.iter().map(|s| s.trim().to_string()).collect();
    if header.first().map(String::as_str) != Some("y") {
        return Err(Error::parse(path, 1, "first column must be named 'y'"));
    }
    if header.len() < 2 {
        return Err(Error::parse(path, 1, "no feature columns"));
    }
    let features = header[1..].to_vec();
    let p = features.len();
    let mut ys = Vec::new();
    let mut xs = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() != p + 1 {
            return Err(Error::parse(path, line, format!("expected {} fields, found {}", p + 1, rec.len())));
        }
        for (c, cell) in rec.iter().enumerate() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| Error::parse(path, line, format!("non-numeric cell '{cell}' in column '{}'", header[c])))?;
            if !v.is_finite() {
                return Err(Error::parse(path, line, format!("non-finite value in column '{}'", header[c])));
            }
            if c == 0 {
                ys.push(v);
            } else {
                xs.push(v);
            }
        }
    }
    if ys.is_empty() {
        return Err(Error::parse(path, 1, "no data rows"));
    }
    let n = ys.len();
    let x = DMatrix::from_row_slice(n, p, &xs);
    let task = TaskDataset::new(id, x, DVector::from_vec(ys))?;
    Ok((features, task))
}

/// Reads every `*.csv` in `dir`, in file-name order.
pub fn read_task_dir(dir: &Path) -> Result<TaskDirectory> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::parse(dir, 0, "no task CSV files found"));
    }
    let mut tasks = Vec::with_capacity(files.len());
    let mut features: Option<Vec<String>> = None;
    for f in &files {
        let (h, t) = read_task_csv(f)?;
        match &features {
            None => features = Some(h),
            Some(first) if *first != h => {
                return Err(Error::parse(f, 1, format!("feature header differs from {}", files[0].display())));
            }
            _ => {}
        }
        tasks.push(t);
    }
    Ok(TaskDirectory { problem: MtlProblem::new(tasks)?, features: features.unwrap_or_default() })
}

/// Writes a table whose first column labels the rows.
pub fn write_table(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a labelled numeric table written by [`write_table`]: returns the
/// column header (without the label column) and the values.
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<String>, DMatrix<f64>)> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header: Vec<String> = rdr.headers().map_err(|e| csv_error(path, e))?.iter().skip(1).map(str::to_string).collect();
    let mut labels = Vec::new();
    let mut vals = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() != header.len() + 1 {
            return Err(Error::parse(path, line, "ragged row"));
        }
        labels.push(rec[0].to_string());
        for cell in rec.iter().skip(1) {
            vals.push(cell.trim().parse::<f64>().map_err(|_| Error::parse(path, line, format!("non-numeric cell '{cell}'")))?);
        }
    }
    let m = DMatrix::from_row_slice(labels.len(), header.len(), &vals);
    Ok((header, labels, m))
}

/// Writes `B.csv`, `Z.csv` and `intercepts.csv` for a fit.
pub fn write_fit(dir: &Path, fit: &ModelFit, task_ids: &[String], features: &[String]) -> Result<()> {
    let mut header = vec!["feature".to_string()];
    header.extend(task_ids.iter().cloned());
    let b_rows: Vec<Vec<String>> = (0..fit.p())
        .map(|j| std::iter::once(features[j].clone()).chain((0..fit.k()).map(|k| fmt17(fit.b[(j, k)]))).collect())
        .collect();
    write_table(&dir.join("B.csv"), &header, &b_rows)?;
    let z_rows: Vec<Vec<String>> = (0..fit.p())
        .map(|j| {
            std::iter::once(features[j].clone())
                .chain((0..fit.k()).map(|k| if fit.z[(j, k)] { "1".to_string() } else { "0".to_string() }))
                .collect()
        })
        .collect();
    write_table(&dir.join("Z.csv"), &header, &z_rows)?;
    let i_rows: Vec<Vec<String>> = task_ids.iter().enumerate().map(|(k, id)| vec![id.clone(), fmt17(fit.intercepts[k])]).collect();
    write_table(&dir.join("intercepts.csv"), &["task".to_string(), "intercept".to_string()], &i_rows)
}

/// Reads `B.csv` and `Z.csv` back into a fit (intercepts left at zero).
pub fn read_fit(b_path: &Path, z_path: &Path) -> Result<ModelFit> {
    let (_, _, b) = read_table(b_path)?;
    let (_, _, zf) = read_table(z_path)?;
    if b.shape() != zf.shape() {
        return Err(Error::Dimension(format!("B is {:?} but Z is {:?}", b.shape(), zf.shape())));
    }
    let z = zf.map(|v| v != 0.0);
    let k = b.ncols();
    Ok(ModelFit::from_parts(b, z, DVector::zeros(k)))
}

/// Writes `contents` to `path`, mapping failures to a structured error.
pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}
