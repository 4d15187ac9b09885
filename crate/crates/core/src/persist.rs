//! CSV and hashing helpers for stage outputs.
//!
//! Floats are written in Rust's shortest round-trip form so that reloading a
//! file reproduces the in-memory values bit for bit.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || !v.is_finite() || (1e-4..1e15).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        let _ = write!(s, "{b:02x}");
    }
    s
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Buffered CSV writer bound to its path for error reporting.
pub struct CsvOut {
    path: PathBuf,
    inner: csv::Writer<std::fs::File>,
}

impl CsvOut {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self> {
        let inner = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        let mut out = Self {
            path: path.to_path_buf(),
            inner,
        };
        out.row(header.iter().map(|s| s.to_string()))?;
        Ok(out)
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.inner.write_record(fields).map_err(|e| Error::csv(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Rows of a headed CSV, with typed accessors that report the offending line.
pub struct CsvIn {
    path: PathBuf,
    headers: csv::StringRecord,
    records: Vec<csv::StringRecord>,
}

pub struct Row<'a> {
    path: &'a Path,
    headers: &'a csv::StringRecord,
    record: &'a csv::StringRecord,
}

impl CsvIn {
    pub fn open(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
        let records = reader
            .records()
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::csv(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            headers,
            records,
        })
    }

    pub fn rows(&self) -> impl Iterator<Item = Row<'_>> {
        self.records.iter().map(|record| Row {
            path: &self.path,
            headers: &self.headers,
            record,
        })
    }
}

impl Row<'_> {
    fn err(&self, message: String) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line: self.record.position().map(|p| p.line()).unwrap_or(0),
            message,
        }
    }

    pub fn str(&self, name: &str) -> Result<&str> {
        let idx = self
            .headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| self.err(format!("missing column `{name}`")))?;
        self.record.get(idx).ok_or_else(|| self.err(format!("short row, no `{name}`")))
    }

    pub fn f64(&self, name: &str) -> Result<f64> {
        let raw = self.str(name)?;
        raw.parse().map_err(|_| self.err(format!("`{name}`: not a number: {raw:?}")))
    }

    pub fn opt_f64(&self, name: &str) -> Result<Option<f64>> {
        if self.str(name)?.is_empty() {
            Ok(None)
        } else {
            self.f64(name).map(Some)
        }
    }

    pub fn usize(&self, name: &str) -> Result<usize> {
        let raw = self.str(name)?;
        raw.parse().map_err(|_| self.err(format!("`{name}`: not a count: {raw:?}")))
    }

    pub fn bool(&self, name: &str) -> Result<bool> {
        let raw = self.str(name)?;
        raw.parse().map_err(|_| self.err(format!("`{name}`: not a bool: {raw:?}")))
    }

    pub fn date(&self, name: &str) -> Result<NaiveDate> {
        let raw = self.str(name)?;
        raw.parse().map_err(|_| self.err(format!("`{name}`: not a date: {raw:?}")))
    }
}

/// Read a headerless CSV of numbers as a dense matrix.
pub fn read_dense_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let row = rec
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line: i as u64 + 1,
                    message: format!("not a number: {f:?}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i as u64 + 1,
                    message: format!("expected {} columns, found {}", first.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }
    let ncols = rows.first().map_or(0, Vec::len);
    Ok(DMatrix::from_fn(rows.len(), ncols, |r, c| rows[r][c]))
}

/// Append a matrix in long form (`prefix..., row, col, value`).
pub fn write_matrix(out: &mut CsvOut, prefix: &[String], m: &DMatrix<f64>) -> Result<()> {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            let mut fields = prefix.to_vec();
            fields.push(r.to_string());
            fields.push(c.to_string());
            fields.push(fmt_f64(m[(r, c)]));
            out.row(fields)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        for v in [0.0, -0.0, 1.5, 1e-24, -3.3e-7, 123456.789, 1e300, f64::MIN_POSITIVE, 0.1 + 0.2] {
            let s = fmt_f64(v);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits(), "{s}");
        }
        assert!(fmt_f64(f64::NAN).parse::<f64>().unwrap().is_nan());
        assert_eq!(fmt_f64(f64::INFINITY).parse::<f64>().unwrap(), f64::INFINITY);
    }

    #[test]
    fn dense_matrix_reads_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, "1, 2\n3,4e-1\n").unwrap();
        let m = read_dense_matrix(&p).unwrap();
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 0.4]));
        std::fs::write(&p, "1,2\n3\n").unwrap();
        assert!(read_dense_matrix(&p).is_err());
    }

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
