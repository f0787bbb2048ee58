//! Output files: CSV time series and binary field snapshots.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use dualgrid_core::mesh::UniformGrid;

use crate::BenchError;

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"DGSNAP01";

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BenchError + '_ {
    move |source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Append-only CSV file with a fixed header.
pub struct CsvWriter {
    path: PathBuf,
    out: BufWriter<File>,
    columns: usize,
}

impl CsvWriter {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self, BenchError> {
        let file = File::create(path).map_err(io_err(path))?;
        let mut w = Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            columns: header.len(),
        };
        w.line(header.iter().map(|s| s.to_string()))?;
        Ok(w)
    }

    fn line(&mut self, cells: impl Iterator<Item = String>) -> Result<(), BenchError> {
        let row: Vec<String> = cells.collect();
        debug_assert_eq!(row.len(), self.columns, "{}", self.path.display());
        writeln!(self.out, "{}", row.join(",")).map_err(io_err(&self.path))
    }

    /// Writes one row; floats use the shortest representation that reads back exactly.
    pub fn row(&mut self, cells: &[Cell]) -> Result<(), BenchError> {
        self.line(cells.iter().map(Cell::to_string))
    }

    pub fn finish(mut self) -> Result<(), BenchError> {
        self.out.flush().map_err(io_err(&self.path))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    U(u64),
    F(f64),
    S(String),
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Cell::U(v) => write!(f, "{v}"),
            Cell::F(v) => write!(f, "{v:?}"),
            Cell::S(v) => f.write_str(v),
        }
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::U(v as u64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::U(v)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::F(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::S(v.to_string())
    }
}

/// A full field on a uniform grid in global cell order.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub dims: [usize; 3],
    pub origin: [f64; 3],
    pub spacing: [f64; 3],
    pub step: u64,
    pub time: f64,
    pub components: usize,
    pub values: Vec<f64>,
}

impl Snapshot {
    pub fn new(grid: &UniformGrid<f64>, step: usize, time: f64, components: usize, values: Vec<f64>) -> Self {
        Self {
            dims: grid.dims(),
            origin: grid.origin().into(),
            spacing: grid.spacing().into(),
            step: step as u64,
            time,
            components,
            values,
        }
    }

    /// Layout: magic, 3 x u64 dims, 3 x f64 origin, 3 x f64 spacing, u64 step,
    /// f64 time, u32 components, then the values, all little-endian.
    pub fn write(&self, path: &Path) -> Result<(), BenchError> {
        let mut b = Vec::with_capacity(96 + 8 * self.values.len());
        b.extend_from_slice(SNAPSHOT_MAGIC);
        for d in self.dims {
            b.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in self.origin.iter().chain(&self.spacing) {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&self.step.to_le_bytes());
        b.extend_from_slice(&self.time.to_le_bytes());
        b.extend_from_slice(&(self.components as u32).to_le_bytes());
        for v in &self.values {
            b.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, b).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self, BenchError> {
        let mut buf = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(io_err(path))?;
        let bad = |m: &str| BenchError::Format {
            path: path.to_path_buf(),
            message: m.to_string(),
        };
        if buf.len() < 84 || &buf[..8] != SNAPSHOT_MAGIC {
            return Err(bad("not a snapshot file"));
        }
        let mut at = 8;
        let mut take8 = || {
            let v: [u8; 8] = buf[at..at + 8].try_into().unwrap();
            at += 8;
            v
        };
        let dims = [0; 3].map(|_| u64::from_le_bytes(take8()) as usize);
        let origin = [0; 3].map(|_| f64::from_le_bytes(take8()));
        let spacing = [0; 3].map(|_| f64::from_le_bytes(take8()));
        let step = u64::from_le_bytes(take8());
        let time = f64::from_le_bytes(take8());
        let components = u32::from_le_bytes(buf[at..at + 4].try_into().unwrap()) as usize;
        at += 4;
        let n = dims.iter().product::<usize>() * components;
        if buf.len() != at + 8 * n {
            return Err(bad("size does not match the header"));
        }
        let values = buf[at..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            dims,
            origin,
            spacing,
            step,
            time,
            components,
            values,
        })
    }
}

/// Parsed numeric CSV: header plus rows of raw cell strings.
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| BenchError::Format {
                path: path.to_path_buf(),
                message: "empty file".into(),
            })?
            .split(',')
            .map(str::to_string)
            .collect::<Vec<_>>();
        let rows = lines
            .filter(|l| !l.is_empty())
            .map(|l| l.split(',').map(str::to_string).collect())
            .collect();
        Ok(Self { header, rows })
    }
}
