//! Plain CSV output with fixed nine-significant-digit formatting.

use std::io::{BufRead, Write};

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Nine significant digits in scientific notation.
pub fn fmt9(v: f64) -> String {
    format!("{v:.8e}")
}

/// Columns `tr_index,re,im`.
pub fn write_signal_csv<W: Write>(mut out: W, signal: &[Complex64]) -> Result<()> {
    writeln!(out, "tr_index,re,im")?;
    for (i, s) in signal.iter().enumerate() {
        writeln!(out, "{i},{},{}", fmt9(s.re), fmt9(s.im))?;
    }
    Ok(())
}

pub fn read_signal_csv<R: BufRead>(input: R) -> Result<Vec<Complex64>> {
    let mut lines = input.lines();
    let head = lines.next().transpose()?;
    if head.as_deref().map(str::trim) != Some("tr_index,re,im") {
        return Err(Error::Format("expected header tr_index,re,im".into()));
    }
    let mut out = Vec::new();
    for (row, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let parse = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("row {row}: {e}")));
        if cols.len() != 3 {
            return Err(Error::Format(format!("row {row}: expected 3 columns")));
        }
        let idx: usize = cols[0].parse().map_err(|e| Error::Format(format!("row {row}: {e}")))?;
        if idx != out.len() {
            return Err(Error::Format(format!("row {row}: tr_index {idx} out of order")));
        }
        out.push(Complex64::new(parse(cols[1])?, parse(cols[2])?));
    }
    Ok(out)
}

/// Single-column CSV with a header row.
pub fn read_column_csv<R: BufRead>(input: R, header: &str) -> Result<Vec<f64>> {
    let mut lines = input.lines();
    let head = lines.next().transpose()?;
    if head.as_deref().map(str::trim) != Some(header) {
        return Err(Error::Format(format!("expected header {header}")));
    }
    let mut out = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(line.trim().parse::<f64>().map_err(|e| Error::Format(e.to_string()))?);
    }
    Ok(out)
}
