//! CSV and JSON artifacts.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use nalgebra::DMatrix;
use serde::Serialize;

use atomsense_core::simulator::Trajectory;
use atomsense_core::spectroscopy::PsdEstimate;

/// Version stamped into every JSON report.
pub const SCHEMA_VERSION: u32 = 1;

pub const TRAJECTORY_HEADER: [&str; 7] = ["t", "Jy", "Jz", "q", "p", "E_true", "z"];

fn writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(csv::Writer::from_writer(BufWriter::new(f)))
}

// `{}` on f64 prints the shortest string that parses back to the same value.
fn fmt(x: f64) -> String {
    format!("{x}")
}

pub fn write_trajectory_csv(path: &Path, tr: &Trajectory) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(TRAJECTORY_HEADER)?;
    for k in 0..tr.len() {
        let s = tr.states[k];
        w.write_record([
            fmt(tr.times[k]),
            fmt(s[0]),
            fmt(s[1]),
            fmt(s[2]),
            fmt(s[3]),
            fmt(tr.waveform[k]),
            fmt(tr.observations[k]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Columns of a trajectory file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryTable {
    pub t: Vec<f64>,
    pub states: Vec<[f64; 4]>,
    pub e_true: Vec<f64>,
    pub z: Vec<f64>,
}

fn parse_row(rec: &csv::StringRecord, line: usize) -> Result<Vec<f64>> {
    rec.iter()
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .with_context(|| format!("line {line}: bad number {s:?}"))
        })
        .collect()
}

pub fn read_trajectory_csv(path: &Path) -> Result<TrajectoryTable> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != TRAJECTORY_HEADER {
        bail!("{}: expected header {}", path.display(), TRAJECTORY_HEADER.join(","));
    }
    let mut out = TrajectoryTable::default();
    for (i, rec) in r.records().enumerate() {
        let v = parse_row(&rec?, i + 2)?;
        out.t.push(v[0]);
        out.states.push([v[1], v[2], v[3], v[4]]);
        out.e_true.push(v[5]);
        out.z.push(v[6]);
    }
    if out.t.is_empty() {
        bail!("{}: no samples", path.display());
    }
    Ok(out)
}

/// One line of filter output. The first row (initialization) has no
/// innovation; those fields are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterRow {
    pub t: f64,
    pub x_hat: Vec<f64>,
    pub sigma: Vec<f64>,
    pub innovation: f64,
    pub s: f64,
    pub nis: f64,
    pub e_hat: f64,
    pub e_var: f64,
}

pub fn filter_header(dim_x: usize) -> Vec<String> {
    let mut h = vec!["t".to_owned()];
    h.extend((0..dim_x).map(|i| format!("x_hat_{i}")));
    h.extend((0..dim_x).map(|i| format!("sigma_{i}")));
    h.extend(["innovation", "S", "nis", "E_hat", "E_var"].map(str::to_owned));
    h
}

pub fn write_filter_csv(path: &Path, rows: &[FilterRow]) -> Result<()> {
    let dim = rows.first().map_or(0, |r| r.x_hat.len());
    let mut w = writer(path)?;
    w.write_record(filter_header(dim))?;
    for r in rows {
        let mut rec = vec![fmt(r.t)];
        rec.extend(r.x_hat.iter().map(|v| fmt(*v)));
        rec.extend(r.sigma.iter().map(|v| fmt(*v)));
        rec.extend([r.innovation, r.s, r.nis, r.e_hat, r.e_var].map(fmt));
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_filter_csv(path: &Path) -> Result<Vec<FilterRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let n = r.headers()?.len();
    if n < 8 || (n - 6) % 2 != 0 {
        bail!("{}: not a filter output file", path.display());
    }
    let dim = (n - 6) / 2;
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let v = parse_row(&rec?, i + 2)?;
        rows.push(FilterRow {
            t: v[0],
            x_hat: v[1..1 + dim].to_vec(),
            sigma: v[1 + dim..1 + 2 * dim].to_vec(),
            innovation: v[1 + 2 * dim],
            s: v[2 + 2 * dim],
            nis: v[3 + 2 * dim],
            e_hat: v[4 + 2 * dim],
            e_var: v[5 + 2 * dim],
        });
    }
    Ok(rows)
}

pub fn write_psd_csv(path: &Path, psd: &PsdEstimate, model: Option<&dyn Fn(f64) -> f64>) -> Result<()> {
    let mut w = writer(path)?;
    if model.is_some() {
        w.write_record(["f_hz", "psd", "fit"])?;
    } else {
        w.write_record(["f_hz", "psd"])?;
    }
    for (f, p) in psd.freqs.iter().zip(&psd.power) {
        match model {
            Some(m) => w.write_record([fmt(*f), fmt(*p), fmt(m(*f))])?,
            None => w.write_record([fmt(*f), fmt(*p)])?,
        }
    }
    w.flush()?;
    Ok(())
}

/// Generic columns with a header.
pub fn write_columns_csv(path: &Path, header: &[&str], cols: &[&[f64]]) -> Result<()> {
    if header.len() != cols.len() || cols.windows(2).any(|c| c[0].len() != c[1].len()) {
        bail!("column count or length mismatch");
    }
    let mut w = writer(path)?;
    w.write_record(header)?;
    for k in 0..cols.first().map_or(0, |c| c.len()) {
        w.write_record(cols.iter().map(|c| fmt(c[k])))?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    f.write_all(to_json(value)?.as_bytes())?;
    Ok(())
}

/// Row-major nested vectors for JSON.
pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    if nr == 0 || nc == 0 || rows.iter().any(|r| r.len() != nc) {
        bail!("matrix rows must be non-empty and of equal length");
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}
