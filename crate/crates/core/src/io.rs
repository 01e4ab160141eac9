//! CSV helpers: sample matrices and generic tables with 17-digit floats.

use std::path::Path;

use crate::error::{LabError, Result};

/// Shortest format that round-trips every `f64` (17 significant digits).
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Samples as `x0,x1,...` rows.
pub fn write_samples(path: &Path, samples: &[f64], dim: usize) -> Result<()> {
    let header: Vec<String> = (0..dim).map(|k| format!("x{k}")).collect();
    let rows = samples.chunks_exact(dim).map(|r| r.iter().map(|v| fmt_f64(*v)).collect());
    write_table(path, &header, rows)
}

/// Inverse of [`write_samples`]; the dimension is the column count.
pub fn read_samples(path: &Path) -> Result<(Vec<f64>, usize)> {
    let mut rdr = csv::Reader::from_path(path)?;
    let dim = rdr.headers()?.len();
    if dim == 0 {
        return Err(LabError::InsufficientData(format!("{}: no columns", path.display())));
    }
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for field in rec.iter() {
            let v: f64 = field.trim().parse().map_err(|_| {
                LabError::Io(format!("{}: row {}: not a number: `{field}`", path.display(), line + 1))
            })?;
            out.push(v);
        }
    }
    if out.is_empty() {
        return Err(LabError::InsufficientData(format!("{}: no rows", path.display())));
    }
    Ok((out, dim))
}

/// RFC 4180 table with a header row.
pub fn write_table<S: AsRef<str>>(
    path: &Path,
    header: &[S],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header.iter().map(|h| h.as_ref()))?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}
