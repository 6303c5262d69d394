//! CSV and plain PGM writers. Numbers carry 17 significant digits, which
//! round-trips every `f64` exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{CliError, CliResult};

pub fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.16e}")
    }
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_num).unwrap_or_default()
}

pub fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

pub fn write_json<S: serde::Serialize>(path: &Path, value: &S) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    text.push('\n');
    write_file(path, &text)
}

/// Matrix as headerless CSV, one line per row.
pub fn matrix_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for r in m.row_iter() {
        let line: Vec<String> = r.iter().map(|&v| fmt_num(v)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> CliResult<()> {
    write_file(path, &matrix_csv(m))
}

pub fn parse_matrix(text: &str) -> Result<DMatrix<f64>, String> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row = line
            .split(',')
            .map(|f| f.trim().parse::<f64>().map_err(|e| format!("line {}: {e}", i + 1)))
            .collect::<Result<Vec<f64>, String>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(format!("line {}: {} fields, expected {}", i + 1, row.len(), first.len()));
            }
        }
        rows.push(row);
    }
    let ncols = rows.first().map_or(0, Vec::len);
    Ok(DMatrix::from_row_iterator(rows.len(), ncols, rows.into_iter().flatten()))
}

pub fn read_matrix(path: &Path) -> CliResult<DMatrix<f64>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_matrix(&text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Long-format table builder.
pub struct Table {
    text: String,
    width: usize,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { text: format!("{}\n", header.join(",")), width: header.len() }
    }

    pub fn row(&mut self, fields: &[String]) {
        debug_assert_eq!(fields.len(), self.width);
        let _ = writeln!(self.text, "{}", fields.join(","));
    }

    pub fn finish(self) -> String {
        self.text
    }
}

/// Plain (P2) graymap of a row-major grid. Grid row 0 is written last so the
/// second coordinate grows upwards; values map linearly onto `1..=255` and
/// missing cells are `0`.
pub fn pgm(rows: usize, cols: usize, values: &[Option<f64>]) -> String {
    let present = values.iter().flatten().filter(|v| v.is_finite());
    let lo = present.clone().cloned().fold(f64::INFINITY, f64::min);
    let hi = present.cloned().fold(f64::NEG_INFINITY, f64::max);
    let level = |v: Option<f64>| -> u8 {
        match v {
            Some(v) if v.is_finite() => {
                let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
                1 + (t * 254.0).round() as u8
            }
            _ => 0,
        }
    };
    let mut out = format!("P2\n{cols} {rows}\n255\n");
    for r in (0..rows).rev() {
        let line: Vec<String> = (0..cols).map(|c| level(values[r * cols + c]).to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}
