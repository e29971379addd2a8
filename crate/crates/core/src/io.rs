//! Plain-text file formats.
//!
//! Dataset files:
//!
//! ```text
//! ncfr-dataset 1
//! p 3
//! q 2
//! n 4
//! missing 1 3
//! x
//! <p lines of n whitespace-separated numbers>
//! y
//! <q lines of n whitespace-separated numbers>
//! ```
//!
//! Missing indices are zero-based; the `missing` line may be empty. Numbers
//! are written in shortest round-trip form, so a write/read cycle is exact.
//! Trace and timing files are tab-separated with a version line and a
//! header line; matrix files carry their dimensions on the first line.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{NcfrError, Result};
use crate::eval::{TimingRecord, TraceRecord};
use crate::model::RegressionDataset;

pub const DATASET_MAGIC: &str = "ncfr-dataset";
pub const DATASET_VERSION: u32 = 1;

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| NcfrError::io(path, e))
}

/// Write `contents` to `path`, creating parent directories.
pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| NcfrError::io(dir, e))?;
        }
    }
    fs::write(path, contents).map_err(|e| NcfrError::io(path, e))
}

fn push_matrix_rows(out: &mut String, m: &DMatrix<f64>, sep: char) {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            if c > 0 {
                out.push(sep);
            }
            let _ = write!(out, "{:?}", m[(r, c)]);
        }
        out.push('\n');
    }
}

pub fn format_dataset(data: &RegressionDataset) -> String {
    let mut out = format!(
        "{DATASET_MAGIC} {DATASET_VERSION}\np {}\nq {}\nn {}\nmissing",
        data.p(),
        data.q(),
        data.n()
    );
    for m in data.missing() {
        let _ = write!(out, " {m}");
    }
    out.push_str("\nx\n");
    push_matrix_rows(&mut out, data.x(), ' ');
    out.push_str("y\n");
    push_matrix_rows(&mut out, data.y(), ' ');
    out
}

pub fn write_dataset(path: &Path, data: &RegressionDataset) -> Result<()> {
    write_file(path, &format_dataset(data))
}

struct Lines<'a> {
    path: &'a Path,
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next(&mut self, what: &'static str) -> Result<(usize, &'a str)> {
        match self.inner.next() {
            Some((i, l)) => Ok((i + 1, l)),
            None => Err(NcfrError::Parse {
                what,
                path: self.path.to_path_buf(),
                line: 0,
                reason: "unexpected end of file".into(),
            }),
        }
    }

    fn err(&self, what: &'static str, line: usize, reason: impl Into<String>) -> NcfrError {
        NcfrError::Parse {
            what,
            path: self.path.to_path_buf(),
            line,
            reason: reason.into(),
        }
    }

    fn keyed_usize(&mut self, key: &str) -> Result<usize> {
        let (ln, line) = self.next("dataset")?;
        match line.split_whitespace().collect::<Vec<_>>().as_slice() {
            [k, v] if *k == key => v.parse().map_err(|_| self.err("dataset", ln, format!("bad {key} value {v:?}"))),
            _ => Err(self.err("dataset", ln, format!("expected `{key} <count>`"))),
        }
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(rows, cols);
        for r in 0..rows {
            let (ln, line) = self.next("dataset")?;
            let values: Vec<&str> = line.split_whitespace().collect();
            if values.len() != cols {
                return Err(self.err("dataset", ln, format!("expected {cols} values, found {}", values.len())));
            }
            for (c, v) in values.iter().enumerate() {
                m[(r, c)] = v.parse().map_err(|_| self.err("dataset", ln, format!("bad number {v:?}")))?;
            }
        }
        Ok(m)
    }
}

pub fn parse_dataset(text: &str, path: &Path) -> Result<RegressionDataset> {
    let mut lines = Lines {
        path,
        inner: text.lines().enumerate(),
    };
    let (ln, header) = lines.next("dataset")?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(DATASET_MAGIC) {
        return Err(lines.err("dataset", ln, "missing ncfr-dataset header"));
    }
    let version: u32 = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| lines.err("dataset", ln, "missing version"))?;
    if version != DATASET_VERSION {
        return Err(NcfrError::Version {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let p = lines.keyed_usize("p")?;
    let q = lines.keyed_usize("q")?;
    let n = lines.keyed_usize("n")?;
    let (ln, miss) = lines.next("dataset")?;
    let mut miss_parts = miss.split_whitespace();
    if miss_parts.next() != Some("missing") {
        return Err(lines.err("dataset", ln, "expected `missing` line"));
    }
    let missing = miss_parts
        .map(|v| v.parse::<usize>().map_err(|_| lines.err("dataset", ln, format!("bad index {v:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let (ln, tag) = lines.next("dataset")?;
    if tag.trim() != "x" {
        return Err(lines.err("dataset", ln, "expected `x`"));
    }
    let x = lines.matrix(p, n)?;
    let (ln, tag) = lines.next("dataset")?;
    if tag.trim() != "y" {
        return Err(lines.err("dataset", ln, "expected `y`"));
    }
    let y = lines.matrix(q, n)?;
    RegressionDataset::new(x, y)?.with_missing(missing)
}

pub fn read_dataset(path: &Path) -> Result<RegressionDataset> {
    parse_dataset(&read(path)?, path)
}

pub const TRACE_MAGIC: &str = "# ncfr-trace 1";
pub const TIMING_MAGIC: &str = "# ncfr-timing 1";
pub const TRACE_HEADER: &str = "iteration\tk\tjoint_loglik\ttemperature\tpred_loglik";
pub const TIMING_HEADER: &str = "iteration\tcpu_seconds\twall_seconds";

pub fn format_trace_line(r: &TraceRecord) -> String {
    format!(
        "{}\t{}\t{:?}\t{:?}\t{:?}\n",
        r.iteration, r.k, r.joint_loglik, r.temperature, r.pred_loglik
    )
}

pub fn format_trace(records: &[TraceRecord]) -> String {
    let mut out = format!("{TRACE_MAGIC}\n{TRACE_HEADER}\n");
    for r in records {
        out.push_str(&format_trace_line(r));
    }
    out
}

pub fn format_timing(records: &[TimingRecord]) -> String {
    let mut out = format!("{TIMING_MAGIC}\n{TIMING_HEADER}\n");
    for r in records {
        let _ = writeln!(out, "{}\t{:?}\t{:?}", r.iteration, r.cpu_seconds, r.wall_seconds);
    }
    out
}

fn parse_tsv<T>(
    text: &str,
    path: &Path,
    what: &'static str,
    magic: &str,
    header: &str,
    fields: usize,
    build: impl Fn(&[&str]) -> Option<T>,
) -> Result<Vec<T>> {
    let err = |line: usize, reason: String| NcfrError::Parse {
        what,
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, m)) if m == magic => {}
        Some((_, m)) if m.starts_with(magic.rsplit_once(' ').map_or(magic, |(stem, _)| stem)) => {
            return Err(err(1, format!("unsupported format version {m:?}, expected {magic:?}")))
        }
        _ => return Err(err(1, format!("expected {magic:?}"))),
    }
    match lines.next() {
        Some((_, h)) if h == header => {}
        _ => return Err(err(2, format!("expected header {header:?}"))),
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let cols: Vec<&str> = l.split('\t').collect();
            if cols.len() != fields {
                return Err(err(i + 1, format!("expected {fields} fields, found {}", cols.len())));
            }
            build(&cols).ok_or_else(|| err(i + 1, "malformed record".into()))
        })
        .collect()
}

pub fn parse_trace(text: &str, path: &Path) -> Result<Vec<TraceRecord>> {
    parse_tsv(text, path, "trace", TRACE_MAGIC, TRACE_HEADER, 5, |c| {
        Some(TraceRecord {
            iteration: c[0].parse().ok()?,
            k: c[1].parse().ok()?,
            joint_loglik: c[2].parse().ok()?,
            temperature: c[3].parse().ok()?,
            pred_loglik: c[4].parse().ok()?,
        })
    })
}

pub fn parse_timing(text: &str, path: &Path) -> Result<Vec<TimingRecord>> {
    parse_tsv(text, path, "timing", TIMING_MAGIC, TIMING_HEADER, 3, |c| {
        Some(TimingRecord {
            iteration: c[0].parse().ok()?,
            cpu_seconds: c[1].parse().ok()?,
            wall_seconds: c[2].parse().ok()?,
        })
    })
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    parse_trace(&read(path)?, path)
}

pub fn read_timing(path: &Path) -> Result<Vec<TimingRecord>> {
    parse_timing(&read(path)?, path)
}

/// Matrix as TSV: a `rows cols` header and one line per row.
pub fn format_matrix(m: &DMatrix<f64>) -> String {
    let mut out = format!("{}\t{}\n", m.nrows(), m.ncols());
    push_matrix_rows(&mut out, m, '\t');
    out
}

pub fn parse_matrix(text: &str, path: &Path) -> Result<DMatrix<f64>> {
    let err = |line: usize, reason: String| NcfrError::Parse {
        what: "matrix",
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let dims: Vec<usize> = header.split('\t').filter_map(|v| v.parse().ok()).collect();
    let [rows, cols] = dims[..] else {
        return Err(err(1, "expected `rows<TAB>cols`".into()));
    };
    let mut m = DMatrix::zeros(rows, cols);
    for r in 0..rows {
        let line = lines.next().ok_or_else(|| err(r + 2, "missing row".into()))?;
        let vals: Vec<&str> = if cols == 0 { Vec::new() } else { line.split('\t').collect() };
        if vals.len() != cols {
            return Err(err(r + 2, format!("expected {cols} values")));
        }
        for (c, v) in vals.iter().enumerate() {
            m[(r, c)] = v.parse().map_err(|_| err(r + 2, format!("bad number {v:?}")))?;
        }
    }
    Ok(m)
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    parse_matrix(&read(path)?, path)
}
