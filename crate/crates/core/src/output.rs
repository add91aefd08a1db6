//! CSV and summary writers. Numbers are written with 17 significant digits
//! so every `f64` reads back to the same bits.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::diagnostics::{DiagnosticsRecord, ErrorNorms};
use crate::error::{Error, Result};
use crate::field::SpeciesState;
use crate::grid::Grid;

/// `x` in scientific notation with 17 significant digits.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

pub fn diagnostics_header(species: usize) -> String {
    let mut cols = vec!["t".to_string(), "E".into(), "D".into()];
    cols.extend((1..=species).map(|m| format!("mass_{m}")));
    cols.extend((1..=species).map(|m| format!("linf_{m}")));
    cols.push("clamped".into());
    cols.push("iters".into());
    cols.join(",")
}

fn diagnostics_row(r: &DiagnosticsRecord) -> String {
    let mut cols = vec![fmt17(r.t), fmt17(r.energy), fmt17(r.dissipation)];
    cols.extend(r.masses.iter().map(|v| fmt17(*v)));
    cols.extend(r.linf.iter().map(|v| fmt17(*v)));
    cols.push(fmt17(r.clamped));
    cols.push(r.iterations.to_string());
    cols.join(",")
}

/// Streams diagnostics rows to a CSV file as a run progresses.
pub struct DiagnosticsWriter {
    path: PathBuf,
    out: BufWriter<File>,
    species: usize,
}

impl DiagnosticsWriter {
    pub fn create(path: impl AsRef<Path>, species: usize) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut out = create(&path)?;
        writeln!(out, "{}", diagnostics_header(species)).map_err(|e| Error::io(&path, e))?;
        Ok(Self { path, out, species })
    }

    pub fn push(&mut self, record: &DiagnosticsRecord) -> Result<()> {
        if record.masses.len() != self.species || record.linf.len() != self.species {
            return Err(Error::ShapeMismatch {
                expected: self.species,
                got: record.masses.len(),
            });
        }
        writeln!(self.out, "{}", diagnostics_row(record)).map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn write_diagnostics(path: impl AsRef<Path>, species: usize, records: &[DiagnosticsRecord]) -> Result<()> {
    let mut w = DiagnosticsWriter::create(path, species)?;
    for r in records {
        w.push(r)?;
    }
    w.finish()
}

pub fn snapshot_header(dim: usize, species: usize) -> String {
    let mut cols = vec!["x".to_string()];
    if dim == 2 {
        cols.push("y".into());
    }
    cols.extend((1..=species).map(|m| format!("c_{m}")));
    cols.join(",")
}

/// One row per node: coordinates then the concentration of each species.
pub fn write_snapshot(path: impl AsRef<Path>, state: &SpeciesState) -> Result<()> {
    let path = path.as_ref();
    let mut out = create(path)?;
    let dim = state.grid.dim();
    let io = |e| Error::io(path, e);
    writeln!(out, "{}", snapshot_header(dim, state.species_count())).map_err(io)?;
    for (j, (x, y)) in state.grid.coords().into_iter().enumerate() {
        let mut line = fmt17(x);
        if dim == 2 {
            line.push(',');
            line.push_str(&fmt17(y));
        }
        for c in &state.conc {
            line.push(',');
            line.push_str(&fmt17(c[j]));
        }
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Columns of a snapshot file.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub x: Vec<f64>,
    pub y: Option<Vec<f64>>,
    pub conc: Vec<Vec<f64>>,
}

pub fn read_snapshot(path: impl AsRef<Path>) -> Result<Snapshot> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = match lines.next() {
        Some(h) => h.map_err(|e| Error::io(path, e))?,
        None => return Err(Error::invalid(format!("{}: empty snapshot", path.display()))),
    };
    let cols: Vec<&str> = header.trim().split(',').collect();
    let has_y = cols.get(1) == Some(&"y");
    let first_c = if has_y { 2 } else { 1 };
    if cols.first() != Some(&"x") || cols.len() <= first_c || cols[first_c..].iter().any(|c| !c.starts_with("c_")) {
        return Err(Error::invalid(format!("{}: unexpected header {header:?}", path.display())));
    }
    let species = cols.len() - first_c;
    let mut snap = Snapshot {
        x: Vec::new(),
        y: has_y.then(Vec::new),
        conc: vec![Vec::new(); species],
    };
    for (k, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::invalid(format!("{}: line {}: {e}", path.display(), k + 2)))?;
        if vals.len() != cols.len() {
            return Err(Error::invalid(format!(
                "{}: line {} has {} columns, expected {}",
                path.display(),
                k + 2,
                vals.len(),
                cols.len()
            )));
        }
        snap.x.push(vals[0]);
        if let Some(y) = &mut snap.y {
            y.push(vals[1]);
        }
        for (m, c) in snap.conc.iter_mut().enumerate() {
            c.push(vals[first_c + m]);
        }
    }
    Ok(snap)
}

impl Snapshot {
    /// Rebuilds a state after checking the node coordinates against `grid`.
    pub fn into_state(self, grid: Grid, valences: Vec<i32>, time: f64) -> Result<SpeciesState> {
        let coords = grid.coords();
        if coords.len() != self.x.len() {
            return Err(Error::ShapeMismatch {
                expected: coords.len(),
                got: self.x.len(),
            });
        }
        let tol = 1e-12 * grid.h().max(1.0);
        for (j, (x, y)) in coords.iter().enumerate() {
            let ys = self.y.as_ref().map_or(0.0, |v| v[j]);
            if (x - self.x[j]).abs() > tol || (y - ys).abs() > tol {
                return Err(Error::invalid(format!("snapshot node {j} does not match the grid")));
            }
        }
        SpeciesState::new(grid, valences, self.conc, time)
    }
}

/// Error table row for a convergence study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceRow {
    /// Mesh size or time step.
    pub h: f64,
    pub err: ErrorNorms,
}

pub fn write_convergence(path: impl AsRef<Path>, rows: &[ConvergenceRow]) -> Result<()> {
    let table: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| vec![r.h, r.err.linf, r.err.l1, r.err.l2])
        .collect();
    write_table(path, &["h", "err_linf", "err_l1", "err_l2"], &table)
}

/// Plain numeric CSV.
pub fn write_table(path: impl AsRef<Path>, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let path = path.as_ref();
    let mut out = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(out, "{}", header.join(",")).map_err(io)?;
    for row in rows {
        if row.len() != header.len() {
            return Err(Error::ShapeMismatch {
                expected: header.len(),
                got: row.len(),
            });
        }
        let line: Vec<String> = row.iter().map(|v| fmt17(*v)).collect();
        writeln!(out, "{}", line.join(",")).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// `key=value` lines, in the given order.
pub fn write_summary(path: impl AsRef<Path>, entries: &[(String, String)]) -> Result<()> {
    let path = path.as_ref();
    let mut out = create(path)?;
    let io = |e| Error::io(path, e);
    for (k, v) in entries {
        writeln!(out, "{k}={v}").map_err(io)?;
    }
    out.flush().map_err(io)
}
