//! CSV and JSON output helpers.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::discrepancy::DiscrepancySeries;
use crate::error::{Error, Result};

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

pub fn fmt_opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.into(), source }
}

pub fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io { path: path.into(), source },
        kind => Error::Parse { line, reason: format!("{kind:?}") },
    }
}

/// Writes a header and rows of preformatted cells.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = File::create(path).map_err(io_err(path))?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n").map_err(io_err(path))
}

pub const SERIES_COLUMNS: [&str; 2] = ["rel_mae", "M_t"];

/// Reads `t` and `M_t` columns from a CSV file. The value column may be
/// named `rel_mae` or `M_t`; empty cells are gaps.
pub fn read_series(path: &Path, steps: usize) -> Result<DiscrepancySeries> {
    let file = File::open(path).map_err(io_err(path))?;
    read_series_from(file, steps)
}

pub fn read_series_from<R: std::io::Read>(reader: R, steps: usize) -> Result<DiscrepancySeries> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| csv_err(Path::new("<series>"), e))?.clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let t_col = col("t").ok_or_else(|| Error::Parse { line: 1, reason: "missing column `t`".into() })?;
    let m_col = SERIES_COLUMNS.iter().find_map(|c| col(c)).ok_or_else(|| Error::Parse {
        line: 1,
        reason: format!("missing value column, expected one of {SERIES_COLUMNS:?}"),
    })?;
    let mut pairs = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(Path::new("<series>"), e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |reason: String| Error::Parse { line, reason };
        let t_raw = rec.get(t_col).unwrap_or("");
        let t: usize = t_raw.parse().map_err(|_| bad(format!("bad timestep `{t_raw}`")))?;
        if t == 0 || t > steps {
            return Err(bad(format!("timestep {t} outside 1..={steps}")));
        }
        if !seen.insert(t) {
            return Err(bad(format!("duplicate timestep {t}")));
        }
        let m_raw = rec.get(m_col).unwrap_or("");
        if m_raw.is_empty() {
            continue;
        }
        let m: f64 = m_raw.parse().map_err(|_| bad(format!("bad value `{m_raw}`")))?;
        if !(m.is_finite() && m >= 0.0) {
            return Err(bad(format!("value {m} must be finite and >= 0")));
        }
        pairs.push((t, m));
    }
    DiscrepancySeries::from_pairs(pairs)
}
