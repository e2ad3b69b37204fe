//! Artifact serialization: the `.sr` separated-representation container,
//! CSV reports, trajectory tables, and PGM heatmaps.
//!
//! Every write goes through a temp-file-plus-rename so reruns either replace
//! an artifact atomically or leave the old one intact. Binary payloads are
//! little-endian f64; text payloads print one shortest-round-trip decimal
//! per line so artifacts diff cleanly.

use ndarray::{Array1, Array2};
use std::fmt::Write as _;
use std::io::{BufRead, Read, Write};
use std::path::Path;
use thiserror::Error;

use crate::als::AlsReport;
use crate::sep_tensor::{SepError, SepOperator, SepVector};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: bad container: {reason}")]
    Format { path: String, reason: String },
    #[error(transparent)]
    Shape(#[from] SepError),
}

fn io_err(path: &Path, source: std::io::Error) -> IoError {
    IoError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn fmt_err(path: &Path, reason: impl Into<String>) -> IoError {
    IoError::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Atomic write: contents land in a sibling temp file first, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| io_err(path, e))?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        path.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "artifact".into()),
        std::process::id()
    ));
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
        f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
        f.sync_all().map_err(|e| io_err(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SrMode {
    Binary,
    Text,
}

/// Contents of an `.sr` file.
#[derive(Debug, Clone)]
pub enum SrData {
    Vector(SepVector),
    Operator(SepOperator),
}

impl SrData {
    pub fn kind(&self) -> &'static str {
        match self {
            SrData::Vector(_) => "vector",
            SrData::Operator(_) => "operator",
        }
    }

    pub fn rank(&self) -> usize {
        match self {
            SrData::Vector(v) => v.rank(),
            SrData::Operator(a) => a.rank(),
        }
    }
}

/// Serialize a separated vector or operator.
///
/// Layout: an ASCII header (`sephjb-sr 1`, kind, mode, dims, sizes, rank,
/// `data`), then the scales followed by the factors dimension-major — for
/// each dimension, each term's column (vectors) or row-major matrix
/// (operators).
pub fn write_sr(path: &Path, data: &SrData, mode: SrMode) -> Result<(), IoError> {
    let (kind, sizes, rank) = match data {
        SrData::Vector(v) => ("vector", v.mode_sizes().to_vec(), v.rank()),
        SrData::Operator(a) => ("operator", a.mode_sizes().to_vec(), a.rank()),
    };
    let mut header = String::new();
    let _ = writeln!(header, "sephjb-sr 1");
    let _ = writeln!(header, "kind {kind}");
    let _ = writeln!(
        header,
        "mode {}",
        match mode {
            SrMode::Binary => "binary",
            SrMode::Text => "text",
        }
    );
    let _ = writeln!(header, "dims {}", sizes.len());
    let _ = writeln!(
        header,
        "sizes {}",
        sizes
            .iter()
            .map(|m| m.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    );
    let _ = writeln!(header, "rank {rank}");
    let _ = writeln!(header, "data");

    let mut values: Vec<f64> = Vec::new();
    match data {
        SrData::Vector(v) => {
            values.extend_from_slice(v.scales());
            for dim in 0..sizes.len() {
                let f = v.factor(dim);
                for l in 0..rank {
                    values.extend(f.column(l).iter());
                }
            }
        }
        SrData::Operator(a) => {
            values.extend_from_slice(a.scales());
            for dim in 0..sizes.len() {
                for l in 0..rank {
                    values.extend(a.factor(dim, l).iter());
                }
            }
        }
    }

    let mut bytes = header.into_bytes();
    match mode {
        SrMode::Binary => {
            bytes.reserve(values.len() * 8);
            for v in &values {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        SrMode::Text => {
            let mut body = String::with_capacity(values.len() * 8);
            for v in &values {
                let _ = writeln!(body, "{v}");
            }
            bytes.extend_from_slice(body.as_bytes());
        }
    }
    write_atomic(path, &bytes)
}

/// Read an `.sr` container written by [`write_sr`].
pub fn read_sr(path: &Path) -> Result<SrData, IoError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = std::io::BufReader::new(file);
    let mut line = String::new();
    let next_line = |reader: &mut std::io::BufReader<std::fs::File>,
                         line: &mut String|
     -> Result<String, IoError> {
        line.clear();
        reader.read_line(line).map_err(|e| io_err(path, e))?;
        Ok(line.trim_end_matches(['\n', '\r']).to_string())
    };
    let magic = next_line(&mut reader, &mut line)?;
    if magic != "sephjb-sr 1" {
        return Err(fmt_err(path, format!("unknown magic `{magic}`")));
    }
    let mut kind = String::new();
    let mut mode = String::new();
    let mut dims = 0usize;
    let mut sizes: Vec<usize> = Vec::new();
    let mut rank = 0usize;
    loop {
        let l = next_line(&mut reader, &mut line)?;
        if l == "data" {
            break;
        }
        let (key, rest) = l
            .split_once(' ')
            .ok_or_else(|| fmt_err(path, format!("bad header line `{l}`")))?;
        match key {
            "kind" => kind = rest.to_string(),
            "mode" => mode = rest.to_string(),
            "dims" => {
                dims = rest
                    .parse()
                    .map_err(|_| fmt_err(path, "bad dims"))?
            }
            "sizes" => {
                sizes = rest
                    .split_whitespace()
                    .map(|t| t.parse::<usize>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| fmt_err(path, "bad sizes"))?
            }
            "rank" => {
                rank = rest
                    .parse()
                    .map_err(|_| fmt_err(path, "bad rank"))?
            }
            other => return Err(fmt_err(path, format!("unknown header key `{other}`"))),
        }
    }
    if sizes.len() != dims {
        return Err(fmt_err(path, "sizes do not match dims"));
    }
    let per_dim: usize = match kind.as_str() {
        "vector" => sizes.iter().sum::<usize>(),
        "operator" => sizes.iter().map(|m| m * m).sum::<usize>(),
        other => return Err(fmt_err(path, format!("unknown kind `{other}`"))),
    };
    let count = rank + rank * per_dim;
    let mut values = Vec::with_capacity(count);
    match mode.as_str() {
        "binary" => {
            let mut buf = Vec::new();
            reader.read_to_end(&mut buf).map_err(|e| io_err(path, e))?;
            if buf.len() != count * 8 {
                return Err(fmt_err(
                    path,
                    format!("expected {} payload bytes, found {}", count * 8, buf.len()),
                ));
            }
            for chunk in buf.chunks_exact(8) {
                values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
        }
        "text" => {
            for l in reader.lines() {
                let l = l.map_err(|e| io_err(path, e))?;
                let t = l.trim();
                if t.is_empty() {
                    continue;
                }
                values.push(
                    t.parse::<f64>()
                        .map_err(|_| fmt_err(path, format!("bad value `{t}`")))?,
                );
            }
            if values.len() != count {
                return Err(fmt_err(
                    path,
                    format!("expected {count} values, found {}", values.len()),
                ));
            }
        }
        other => return Err(fmt_err(path, format!("unknown mode `{other}`"))),
    }

    let scales = values[..rank].to_vec();
    let mut at = rank;
    match kind.as_str() {
        "vector" => {
            let mut factors = Vec::with_capacity(dims);
            for &m in &sizes {
                let mut f = Array2::<f64>::zeros((m, rank));
                for l in 0..rank {
                    for row in 0..m {
                        f[[row, l]] = values[at];
                        at += 1;
                    }
                }
                factors.push(f);
            }
            // terms were stored normalized; rebuild term-major
            let terms: Vec<Vec<Array1<f64>>> = (0..rank)
                .map(|l| factors.iter().map(|f| f.column(l).to_owned()).collect())
                .collect();
            Ok(SrData::Vector(
                SepVector::from_terms(&sizes, scales, terms).map_err(IoError::Shape)?,
            ))
        }
        _ => {
            let mut terms: Vec<Vec<Array2<f64>>> = vec![Vec::with_capacity(dims); rank];
            for &m in &sizes {
                for (l, term) in terms.iter_mut().enumerate() {
                    let _ = l;
                    let mut mat = Array2::<f64>::zeros((m, m));
                    for row in 0..m {
                        for col in 0..m {
                            mat[[row, col]] = values[at];
                            at += 1;
                        }
                    }
                    term.push(mat);
                }
            }
            Ok(SrData::Operator(
                SepOperator::from_terms(&sizes, scales, terms).map_err(IoError::Shape)?,
            ))
        }
    }
}

/// `report.csv`: one row per recorded sweep.
pub fn report_csv(report: &AlsReport) -> String {
    let mut out = String::from("sweep,residual,rank,wall_ms\n");
    for (i, r) in report.residual_history.iter().enumerate() {
        let wall = report
            .sweep_wall
            .get(i)
            .map(|d| d.as_millis())
            .unwrap_or(0);
        let _ = writeln!(out, "{i},{r:e},{},{wall}", report.rank_history[i]);
    }
    out
}

/// `trajectories.csv`: header then one row per step per seed; the terminal
/// row of each seed carries the exit reason.
pub fn trajectories_csv(trajectories: &[crate::policy_sim::Trajectory], d: usize, m: usize) -> String {
    let mut out = String::from("seed,step,t");
    for i in 0..d {
        let _ = write!(out, ",x{i}");
    }
    for j in 0..m {
        let _ = write!(out, ",u{j}");
    }
    out.push_str(",exit\n");
    for tr in trajectories {
        let last = tr.samples.len().saturating_sub(1);
        for (step, (t, x, u)) in tr.samples.iter().enumerate() {
            let _ = write!(out, "{},{step},{t}", tr.seed);
            for v in x {
                let _ = write!(out, ",{v}");
            }
            for v in u {
                let _ = write!(out, ",{v}");
            }
            if step == last {
                let _ = writeln!(out, ",{}", tr.exit);
            } else {
                out.push_str(",\n");
            }
        }
    }
    out
}

/// Slice CSV: header row carries the second free dimension's coordinates,
/// each data row starts with the first free dimension's coordinate.
pub fn slice_csv(slice: &Array2<f64>, rows: &Array1<f64>, cols: &Array1<f64>) -> String {
    let mut out = String::from("coord");
    for c in cols.iter() {
        let _ = write!(out, ",{c}");
    }
    out.push('\n');
    for (i, r) in rows.iter().enumerate() {
        let _ = write!(out, "{r}");
        for j in 0..cols.len() {
            let _ = write!(out, ",{}", slice[[i, j]]);
        }
        out.push('\n');
    }
    out
}

/// 8-bit binary PGM, min-max normalized; row 0 holds the lowest coordinate
/// of the second free dimension.
pub fn slice_pgm(slice: &Array2<f64>) -> Vec<u8> {
    let (np, nq) = slice.dim();
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in slice.iter() {
        min = min.min(v);
        max = max.max(v);
    }
    let span = (max - min).max(f64::MIN_POSITIVE);
    let mut out = format!("P5\n{np} {nq}\n255\n").into_bytes();
    for q in 0..nq {
        for p in 0..np {
            let v = ((slice[[p, q]] - min) / span * 255.0).round().clamp(0.0, 255.0);
            out.push(v as u8);
        }
    }
    out
}

/// Parse a slice CSV back into its matrix (round-trip checks).
pub fn parse_slice_csv(text: &str) -> Option<(Array2<f64>, Vec<f64>, Vec<f64>)> {
    let mut lines = text.lines();
    let header = lines.next()?;
    let cols: Vec<f64> = header
        .split(',')
        .skip(1)
        .map(|t| t.parse().ok())
        .collect::<Option<_>>()?;
    let mut rows = Vec::new();
    let mut values = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        rows.push(parts.next()?.parse().ok()?);
        for t in parts {
            values.push(t.parse().ok()?);
        }
    }
    let matrix = Array2::from_shape_vec((rows.len(), cols.len()), values).ok()?;
    Some((matrix, rows, cols))
}
