//! Matrix files: CSV (optional header row, detected on read) and a raw
//! binary layout.
//!
//! Binary layout: the 8-byte magic `SINGMAT1`, rows and columns as
//! little-endian u64, then the entries row by row as little-endian f64.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::ValueEnum;
use nalgebra::DMatrix;
use serde::Serialize;

pub const MAGIC: &[u8; 8] = b"SINGMAT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Binary,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Binary => "bin",
        }
    }
}

/// Reads either format, telling them apart by the magic bytes.
pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .with_context(|| format!("cannot read {}", path.display()))?;
    let parsed = if bytes.starts_with(MAGIC) {
        parse_binary(&bytes)
    } else {
        parse_csv(&bytes)
    };
    parsed.with_context(|| format!("malformed matrix file {}", path.display()))
}

fn parse_binary(bytes: &[u8]) -> Result<DMatrix<f64>> {
    ensure!(bytes.len() >= 24, "truncated header");
    let word = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().expect("8 bytes"));
    let (rows, cols) = (word(8) as usize, word(16) as usize);
    let body = &bytes[24..];
    let expected = rows.checked_mul(cols).and_then(|k| k.checked_mul(8));
    ensure!(
        expected == Some(body.len()),
        "header says {rows}×{cols} but the payload has {} bytes",
        body.len()
    );
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    Ok(DMatrix::from_row_iterator(rows, cols, values))
}

fn parse_csv(bytes: &[u8]) -> Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let parsed: std::result::Result<Vec<f64>, _> =
            record.iter().map(str::parse::<f64>).collect();
        let parsed = match parsed {
            Ok(v) => v,
            // a first row that is not numeric is a header
            Err(_) if i == 0 => continue,
            Err(e) => bail!("line {}: {e}", i + 1),
        };
        match cols {
            None => cols = Some(parsed.len()),
            Some(c) if c != parsed.len() => {
                bail!("line {} has {} fields, expected {c}", i + 1, parsed.len())
            }
            _ => {}
        }
        values.extend(parsed);
        rows += 1;
    }
    let cols = cols.context("no numeric rows")?;
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

/// Shortest text that parses back to the same f64.
fn format_value(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_csv(path: &Path, m: &DMatrix<f64>, header: Option<&[&str]>) -> Result<()> {
    let mut out = BufWriter::new(
        File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
    );
    if let Some(names) = header {
        writeln!(out, "{}", names.join(","))?;
    }
    if m.ncols() > 0 {
        for row in m.row_iter() {
            let line: Vec<String> = row.iter().map(|&v| format_value(v)).collect();
            writeln!(out, "{}", line.join(","))?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_binary(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut out = BufWriter::new(
        File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
    );
    out.write_all(MAGIC)?;
    out.write_all(&(m.nrows() as u64).to_le_bytes())?;
    out.write_all(&(m.ncols() as u64).to_le_bytes())?;
    for row in m.row_iter() {
        for &v in row.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Record of one written matrix, for manifests.
#[derive(Debug, Clone, Serialize)]
pub struct Written {
    pub name: String,
    pub file: String,
    pub rows: usize,
    pub cols: usize,
}

/// Writes matrices named `<name>.<ext>` into one directory.
pub struct OutputDir {
    dir: PathBuf,
    format: Format,
    written: Vec<Written>,
}

impl OutputDir {
    pub fn create(dir: &Path, format: Format) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            format,
            written: Vec::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    /// `name` may contain a subdirectory, e.g. `truth/S_jx`.
    pub fn matrix(&mut self, name: &str, m: &DMatrix<f64>) -> Result<()> {
        let file = format!("{name}.{}", self.format.extension());
        let path = self.dir.join(&file);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        match self.format {
            Format::Csv => write_csv(&path, m, None)?,
            Format::Binary => write_binary(&path, m)?,
        }
        self.written.push(Written {
            name: name.to_string(),
            file,
            rows: m.nrows(),
            cols: m.ncols(),
        });
        Ok(())
    }

    pub fn into_written(self) -> Vec<Written> {
        self.written
    }
}

/// Finds `<dir>/<name>.csv` or `<dir>/<name>.bin`.
pub fn find_matrix(dir: &Path, name: &str) -> Result<PathBuf> {
    for format in [Format::Csv, Format::Binary] {
        let path = dir.join(format!("{name}.{}", format.extension()));
        if path.is_file() {
            return Ok(path);
        }
    }
    bail!("{} has no {name}.csv or {name}.bin", dir.display())
}
