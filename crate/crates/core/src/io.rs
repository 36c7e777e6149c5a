//! Delimited-text file formats.
//!
//! Field files carry a one-line header `n_rows n_cols resolution first_stamp`
//! followed by an optional `stamps ...` line (explicit per-column stamps,
//! validated against the declared grid) and one whitespace-separated row per
//! location. Coordinates travel in a sidecar file with `id lon lat` rows.
//! Plain `n_rows n_cols` matrices are used for cached artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::data::{CountField, ForcingField, Location, TimeAxis, TimeStamp};
use crate::error::{Error, Result};

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn write_string(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        }
    }
    fs::write(path, content).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, message: message.into() }
}

/// Resolution token in field headers: `monthly`, `yearly`, or `months=N`.
fn parse_resolution(token: &str, path: &Path) -> Result<u32> {
    match token {
        "monthly" => Ok(1),
        "yearly" => Ok(12),
        other => match other.strip_prefix("months=") {
            Some(n) => n
                .parse::<u32>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| parse_err(path, 1, format!("bad resolution `{other}`"))),
            None => Err(parse_err(path, 1, format!("unknown resolution `{other}`"))),
        },
    }
}

fn resolution_token(step_months: u32) -> String {
    match step_months {
        1 => "monthly".to_string(),
        12 => "yearly".to_string(),
        n => format!("months={n}"),
    }
}

struct FieldHeader {
    n_rows: usize,
    n_cols: usize,
    times: TimeAxis,
    body_start: usize,
}

/// Parse the header and optional stamps line; returns the header and the
/// index of the first data line.
fn parse_field_header(path: &Path, lines: &[&str]) -> Result<FieldHeader> {
    let header = lines
        .first()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let toks: Vec<&str> = header.split_whitespace().collect();
    if toks.len() != 4 {
        return Err(parse_err(
            path,
            1,
            "header must be `n_rows n_cols resolution first_stamp`",
        ));
    }
    let n_rows: usize = toks[0]
        .parse()
        .map_err(|_| parse_err(path, 1, format!("bad n_rows `{}`", toks[0])))?;
    let n_cols: usize = toks[1]
        .parse()
        .map_err(|_| parse_err(path, 1, format!("bad n_cols `{}`", toks[1])))?;
    let step_months = parse_resolution(toks[2], path)?;
    let first = TimeStamp::parse(toks[3]).map_err(|e| parse_err(path, 1, e.to_string()))?;
    let times = TimeAxis::new(first, step_months, n_cols)
        .map_err(|e| parse_err(path, 1, e.to_string()))?;

    let mut body_start = 1;
    if let Some(line) = lines.get(1) {
        if line.split_whitespace().next() == Some("stamps") {
            body_start = 2;
            let stamps: Vec<&str> = line.split_whitespace().skip(1).collect();
            if stamps.len() != n_cols {
                return Err(parse_err(
                    path,
                    2,
                    format!("{} stamps declared but n_cols = {n_cols}", stamps.len()),
                ));
            }
            for (i, s) in stamps.iter().enumerate() {
                let stamp = TimeStamp::parse(s).map_err(|e| parse_err(path, 2, e.to_string()))?;
                let expected = times.stamp(i);
                if stamp != expected {
                    return Err(Error::TimeGap {
                        path: path.to_path_buf(),
                        expected: expected.to_string(),
                        found: stamp.to_string(),
                    });
                }
            }
        }
    }
    Ok(FieldHeader { n_rows, n_cols, times, body_start })
}

fn parse_rows<T, F>(path: &Path, lines: &[&str], header: &FieldHeader, parse_cell: F) -> Result<DMatrix<T>>
where
    T: nalgebra::Scalar + Copy + num_zero::Zero,
    F: Fn(&str, usize, usize) -> Result<T>,
{
    let data_lines: Vec<(usize, &str)> = lines
        .iter()
        .enumerate()
        .skip(header.body_start)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, *l))
        .collect();
    if data_lines.len() != header.n_rows {
        return Err(parse_err(
            path,
            lines.len(),
            format!("{} data rows found but header declares {}", data_lines.len(), header.n_rows),
        ));
    }
    let mut m = DMatrix::<T>::from_element(header.n_rows, header.n_cols, T::zero());
    for (r, (line_no, line)) in data_lines.iter().enumerate() {
        let cells: Vec<&str> = line.split_whitespace().collect();
        if cells.len() != header.n_cols {
            return Err(parse_err(
                path,
                *line_no,
                format!("ragged row: {} cells, expected {}", cells.len(), header.n_cols),
            ));
        }
        for (c, cell) in cells.iter().enumerate() {
            m[(r, c)] = parse_cell(cell, r + 1, c + 1)?;
        }
    }
    Ok(m)
}

// Minimal zero trait so parse_rows can allocate either matrix type.
mod num_zero {
    pub trait Zero {
        fn zero() -> Self;
    }
    impl Zero for f64 {
        fn zero() -> Self {
            0.0
        }
    }
    impl Zero for u64 {
        fn zero() -> Self {
            0
        }
    }
}

/// Read `id lon lat` rows.
pub fn read_coords(path: &Path) -> Result<Vec<Location>> {
    let content = read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(parse_err(path, i + 1, "expected `id lon lat`"));
        }
        let lon: f64 = toks[1]
            .parse()
            .map_err(|_| parse_err(path, i + 1, format!("bad longitude `{}`", toks[1])))?;
        let lat: f64 = toks[2]
            .parse()
            .map_err(|_| parse_err(path, i + 1, format!("bad latitude `{}`", toks[2])))?;
        out.push(Location { id: toks[0].to_string(), lon, lat });
    }
    Ok(out)
}

pub fn write_coords(path: &Path, locations: &[Location]) -> Result<()> {
    let mut s = String::new();
    for loc in locations {
        writeln!(s, "{} {} {}", loc.id, loc.lon, loc.lat).unwrap();
    }
    write_string(path, &s)
}

/// Load a count field; every cell must be a nonnegative integer.
pub fn load_count_field(path: &Path, coords_path: &Path) -> Result<CountField> {
    let content = read_to_string(path)?;
    let lines: Vec<&str> = content.lines().collect();
    let header = parse_field_header(path, &lines)?;
    let counts = parse_rows(path, &lines, &header, |cell, row, col| {
        let v: f64 = cell.parse().map_err(|_| Error::InvalidCell {
            path: path.to_path_buf(),
            row,
            col,
            message: format!("`{cell}` is not a number"),
        })?;
        if !v.is_finite() || v < 0.0 || v.fract() != 0.0 {
            return Err(Error::InvalidCell {
                path: path.to_path_buf(),
                row,
                col,
                message: format!("`{cell}` is not a nonnegative integer"),
            });
        }
        Ok(v as u64)
    })?;
    let locations = read_coords(coords_path)?;
    CountField::new(counts, locations, header.times)
}

/// Load a forcing field; NaN or missing cells are a hard error, never imputed.
pub fn load_forcing_field(path: &Path, coords_path: &Path) -> Result<ForcingField> {
    let content = read_to_string(path)?;
    let lines: Vec<&str> = content.lines().collect();
    let header = parse_field_header(path, &lines)?;
    let values = parse_rows(path, &lines, &header, |cell, row, col| {
        let v: f64 = cell.parse().map_err(|_| Error::InvalidCell {
            path: path.to_path_buf(),
            row,
            col,
            message: format!("`{cell}` is not a number"),
        })?;
        if !v.is_finite() {
            return Err(Error::InvalidCell {
                path: path.to_path_buf(),
                row,
                col,
                message: "missing or non-finite value (no imputation)".to_string(),
            });
        }
        Ok(v)
    })?;
    let locations = read_coords(coords_path)?;
    ForcingField::new(values, locations, header.times)
}

fn field_text<T: std::fmt::Display + nalgebra::Scalar>(m: &DMatrix<T>, times: &TimeAxis) -> String {
    let mut s = String::new();
    writeln!(
        s,
        "{} {} {} {}",
        m.nrows(),
        m.ncols(),
        resolution_token(times.step_months),
        times.first
    )
    .unwrap();
    write!(s, "stamps").unwrap();
    for stamp in times.iter() {
        write!(s, " {stamp}").unwrap();
    }
    s.push('\n');
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            if c > 0 {
                s.push(' ');
            }
            write!(s, "{}", m[(r, c)]).unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn write_count_field(path: &Path, coords_path: &Path, field: &CountField) -> Result<()> {
    write_string(path, &field_text(&field.counts, &field.times))?;
    write_coords(coords_path, &field.locations)
}

pub fn write_forcing_field(path: &Path, coords_path: &Path, field: &ForcingField) -> Result<()> {
    write_string(path, &field_text(&field.values, &field.times))?;
    write_coords(coords_path, &field.locations)
}

/// Plain matrix format for cached artifacts: `n_rows n_cols` header, then
/// rows. Values print with Rust's shortest round-trip formatting, so a
/// write/read cycle is bit-exact.
pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut s = String::new();
    writeln!(s, "{} {}", m.nrows(), m.ncols()).unwrap();
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            if c > 0 {
                s.push(' ');
            }
            write!(s, "{}", m[(r, c)]).unwrap();
        }
        s.push('\n');
    }
    write_string(path, &s)
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let content = read_to_string(path)?;
    let lines: Vec<&str> = content.lines().collect();
    let header = lines
        .first()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let toks: Vec<&str> = header.split_whitespace().collect();
    if toks.len() != 2 {
        return Err(parse_err(path, 1, "matrix header must be `n_rows n_cols`"));
    }
    let n_rows: usize = toks[0]
        .parse()
        .map_err(|_| parse_err(path, 1, "bad n_rows"))?;
    let n_cols: usize = toks[1]
        .parse()
        .map_err(|_| parse_err(path, 1, "bad n_cols"))?;
    let mut m = DMatrix::zeros(n_rows, n_cols);
    let data_lines: Vec<(usize, &str)> = lines
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, *l))
        .collect();
    if data_lines.len() != n_rows {
        return Err(parse_err(
            path,
            lines.len(),
            format!("{} data rows, header declares {n_rows}", data_lines.len()),
        ));
    }
    for (r, (line_no, line)) in data_lines.iter().enumerate() {
        let cells: Vec<&str> = line.split_whitespace().collect();
        if cells.len() != n_cols {
            return Err(parse_err(path, *line_no, "ragged row"));
        }
        for (c, cell) in cells.iter().enumerate() {
            m[(r, c)] = cell
                .parse()
                .map_err(|_| parse_err(path, *line_no, format!("bad value `{cell}`")))?;
        }
    }
    Ok(m)
}
