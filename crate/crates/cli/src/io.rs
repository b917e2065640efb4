//! Curve files: a header row of times, then one curve per row.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use gpreg::TimeGrid;
use nalgebra::DMatrix;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub struct Curves {
    pub grid: TimeGrid,
    /// One curve per row.
    pub values: DMatrix<f64>,
}

fn parse_cell(path: &str, row: usize, col: usize, cell: &str) -> CliResult<f64> {
    cell.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| CliError::Parse {
            path: path.to_string(),
            row,
            col,
            cell: cell.to_string(),
        })
}

/// Parse curves from any reader. Rows and columns in errors are 1-based, the header being row 1.
pub fn read_curves<R: Read>(reader: R, name: &str) -> CliResult<Curves> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| CliError::Data(format!("{name}: {e}")))?,
        None => return Err(CliError::Data(format!("{name}: empty file"))),
    };
    let times = header
        .iter()
        .enumerate()
        .map(|(c, cell)| parse_cell(name, 1, c + 1, cell))
        .collect::<CliResult<Vec<f64>>>()?;
    let p = times.len();
    let mut flat = Vec::new();
    let mut n = 0;
    for (k, rec) in records.enumerate() {
        let row = k + 2;
        let rec = rec.map_err(|e| CliError::Data(format!("{name}: {e}")))?;
        if rec.iter().all(|c| c.is_empty()) {
            continue;
        }
        if rec.len() != p {
            return Err(CliError::RaggedRows {
                path: name.to_string(),
                row,
                expected: p,
                found: rec.len(),
            });
        }
        for (c, cell) in rec.iter().enumerate() {
            flat.push(parse_cell(name, row, c + 1, cell)?);
        }
        n += 1;
    }
    if n == 0 {
        return Err(CliError::Data(format!("{name}: no curves after the header row")));
    }
    let grid = gpreg::build_time_grid(times)?;
    Ok(Curves {
        grid,
        values: DMatrix::from_row_slice(n, p, &flat),
    })
}

pub fn load_curves(path: &Path) -> CliResult<Curves> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    read_curves(file, &path.display().to_string())
}

/// 17 significant digits, which round-trips every double.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_table(path: &Path, header: &[String], rows: &[Vec<f64>]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(row.iter().map(|v| fmt_f64(*v))).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Curves in the input layout: header of times, one curve per row.
pub fn write_curves(path: &Path, times: &[f64], values: &DMatrix<f64>) -> CliResult<()> {
    let header: Vec<String> = times.iter().map(|t| fmt_f64(*t)).collect();
    let rows: Vec<Vec<f64>> = (0..values.nrows()).map(|i| values.row(i).iter().copied().collect()).collect();
    write_table(path, &header, &rows)
}

/// Named columns of equal length.
pub fn write_columns(path: &Path, columns: &[(&str, &[f64])]) -> CliResult<()> {
    let header: Vec<String> = columns.iter().map(|(n, _)| n.to_string()).collect();
    let len = columns.first().map_or(0, |c| c.1.len());
    let rows: Vec<Vec<f64>> = (0..len).map(|k| columns.iter().map(|c| c.1[k]).collect()).collect();
    write_table(path, &header, &rows)
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::Data(format!("{}: {other:?}", path.display())),
    }
}
