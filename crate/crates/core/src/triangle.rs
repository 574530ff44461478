//! Run-off triangles.
//!
//! A triangle of size `I` holds one amount per observed cell `(i, j)` with
//! `i + j <= I + 1` (1-based occurrence period `i`, development period `j`).
//! Amounts are either incremental payments `Y_{i,j}` or cumulative paid
//! amounts `C_{i,j} = Y_{i,1} + ... + Y_{i,j}`.
//!
//! The text format is a header line `I=<n>` followed by `n` comma-separated
//! rows of `n` fields each; cells below the anti-diagonal are left blank.

use std::collections::BTreeSet;
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TriangleKind {
    Incremental,
    Cumulative,
}

impl fmt::Display for TriangleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TriangleKind::Incremental => f.write_str("incremental"),
            TriangleKind::Cumulative => f.write_str("cumulative"),
        }
    }
}

/// A cell of the `I x I` square, 1-based on both axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    /// Occurrence period `i`.
    pub origin: usize,
    /// Development period `j`.
    pub dev: usize,
}

impl Cell {
    pub fn new(origin: usize, dev: usize) -> Self {
        Cell { origin, dev }
    }

    /// Whether the cell lies on or above the anti-diagonal of a size-`size` triangle.
    pub fn is_observed(&self, size: usize) -> bool {
        self.origin + self.dev <= size + 1
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.origin, self.dev)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triangle {
    size: usize,
    kind: TriangleKind,
    /// `rows[i]` has `size - i` entries (0-based `i`).
    rows: Vec<Vec<f64>>,
}

impl Triangle {
    /// Builds a triangle from its observed rows; row `i` (0-based) must hold
    /// exactly `rows.len() - i` amounts.
    pub fn new(kind: TriangleKind, rows: Vec<Vec<f64>>) -> Result<Self> {
        let size = rows.len();
        if size == 0 {
            return Err(Error::InvalidInput("triangle needs at least one period".into()));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != size - i {
                return Err(Error::Dimension(format!(
                    "row {} has {} cells, expected {}",
                    i + 1,
                    row.len(),
                    size - i
                )));
            }
            if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "cell ({},{}) is not finite",
                    i + 1,
                    j + 1
                )));
            }
        }
        Ok(Triangle { size, kind, rows })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn kind(&self) -> TriangleKind {
        self.kind
    }

    /// Observed amount at 1-based `(origin, dev)`; `None` outside the observed region.
    pub fn get(&self, origin: usize, dev: usize) -> Option<f64> {
        if origin == 0 || dev == 0 {
            return None;
        }
        self.rows.get(origin - 1).and_then(|r| r.get(dev - 1)).copied()
    }

    pub fn at(&self, cell: Cell) -> Option<f64> {
        self.get(cell.origin, cell.dev)
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Observed cells in row-major order, paired with their amounts.
    pub fn observed(&self) -> impl Iterator<Item = (Cell, f64)> + '_ {
        self.rows.iter().enumerate().flat_map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(move |(j, &v)| (Cell::new(i + 1, j + 1), v))
        })
    }

    /// Multiplies every amount by `factor`.
    pub fn scaled(&self, factor: f64) -> Triangle {
        Triangle {
            size: self.size,
            kind: self.kind,
            rows: self
                .rows
                .iter()
                .map(|r| r.iter().map(|v| v * factor).collect())
                .collect(),
        }
    }

    pub fn to_cumulative(&self) -> Result<Triangle> {
        self.expect_kind(TriangleKind::Incremental)?;
        let rows = self
            .rows
            .iter()
            .map(|row| {
                row.iter()
                    .scan(0.0, |acc, &v| {
                        *acc += v;
                        Some(*acc)
                    })
                    .collect()
            })
            .collect();
        Ok(Triangle {
            size: self.size,
            kind: TriangleKind::Cumulative,
            rows,
        })
    }

    pub fn to_incremental(&self) -> Result<Triangle> {
        self.expect_kind(TriangleKind::Cumulative)?;
        let rows = self
            .rows
            .iter()
            .map(|row| {
                let mut prev = 0.0;
                row.iter()
                    .map(|&c| {
                        let y = c - prev;
                        prev = c;
                        y
                    })
                    .collect()
            })
            .collect();
        Ok(Triangle {
            size: self.size,
            kind: TriangleKind::Incremental,
            rows,
        })
    }

    /// Latest observed cumulative amount per origin, `C_{i, I-i+1}`.
    pub fn latest_diagonal(&self) -> Vec<f64> {
        match self.kind {
            TriangleKind::Cumulative => self.rows.iter().map(|r| r[r.len() - 1]).collect(),
            TriangleKind::Incremental => self.rows.iter().map(|r| r.iter().sum()).collect(),
        }
    }

    pub fn index_sets(&self) -> CellIndexSets {
        CellIndexSets::new(self.size)
    }

    /// Writes the triangle in the `I=<n>` text format.
    pub fn to_csv_string(&self) -> String {
        let mut out = format!("I={}\n", self.size);
        for row in &self.rows {
            let mut fields: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            fields.resize(self.size, String::new());
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    fn expect_kind(&self, expected: TriangleKind) -> Result<()> {
        if self.kind != expected {
            return Err(Error::KindMismatch {
                expected,
                found: self.kind,
            });
        }
        Ok(())
    }
}

/// Partition of the `I x I` square into observed and unobserved clusters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellIndexSets {
    pub size: usize,
    /// Cells with `i + j <= I + 1`.
    pub observed: BTreeSet<Cell>,
    /// Cells with `i + j > I + 1`; these all have `i >= 2`.
    pub unobserved: BTreeSet<Cell>,
}

impl CellIndexSets {
    pub fn new(size: usize) -> Self {
        let mut observed = BTreeSet::new();
        let mut unobserved = BTreeSet::new();
        for origin in 1..=size {
            for dev in 1..=size {
                let cell = Cell::new(origin, dev);
                if cell.is_observed(size) {
                    observed.insert(cell);
                } else {
                    unobserved.insert(cell);
                }
            }
        }
        CellIndexSets {
            size,
            observed,
            unobserved,
        }
    }
}

/// Reads an incremental triangle in the `I=<n>` format, multiplying amounts by `scale`.
pub fn load_triangle<R: BufRead>(source: R, scale: f64) -> Result<Triangle> {
    let mut lines = source
        .lines()
        .enumerate()
        .map(|(n, l)| l.map(|s| (n + 1, s)));

    let (header_line, header) = loop {
        match lines.next() {
            None => {
                return Err(Error::Parse {
                    line: 1,
                    column: 1,
                    message: "empty input, expected `I=<n>` header".into(),
                })
            }
            Some(l) => {
                let (n, s) = l?;
                if !s.trim().is_empty() {
                    break (n, s);
                }
            }
        }
    };
    let size = header
        .trim()
        .strip_prefix("I=")
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .ok_or_else(|| Error::Parse {
            line: header_line,
            column: 1,
            message: format!("expected `I=<n>` header with n >= 1, got `{}`", header.trim()),
        })?;

    let mut rows = Vec::with_capacity(size);
    let mut last_line = header_line;
    for origin in 1..=size {
        let (line_no, text) = match lines.next() {
            Some(l) => l?,
            None => {
                return Err(Error::Parse {
                    line: last_line + 1,
                    column: 1,
                    message: format!("expected {size} rows, found {}", origin - 1),
                })
            }
        };
        last_line = line_no;
        let fields: Vec<&str> = text.split(',').collect();
        if fields.len() != size {
            return Err(Error::Parse {
                line: line_no,
                column: fields.len().min(size) + 1,
                message: format!("row has {} fields, expected {size}", fields.len()),
            });
        }
        let mut row = Vec::with_capacity(size + 1 - origin);
        for (k, raw) in fields.iter().enumerate() {
            let dev = k + 1;
            let raw = raw.trim();
            let observed = origin + dev <= size + 1;
            match (observed, raw.is_empty()) {
                (true, true) => {
                    return Err(Error::Parse {
                        line: line_no,
                        column: dev,
                        message: format!("observed cell ({origin},{dev}) is blank"),
                    })
                }
                (false, false) => {
                    return Err(Error::Parse {
                        line: line_no,
                        column: dev,
                        message: format!("cell ({origin},{dev}) lies below the anti-diagonal and must be blank"),
                    })
                }
                (false, true) => {}
                (true, false) => {
                    let v: f64 = raw.parse().map_err(|_| Error::Parse {
                        line: line_no,
                        column: dev,
                        message: format!("`{raw}` is not a number"),
                    })?;
                    if !v.is_finite() {
                        return Err(Error::Parse {
                            line: line_no,
                            column: dev,
                            message: format!("`{raw}` is not finite"),
                        });
                    }
                    row.push(v * scale);
                }
            }
        }
        rows.push(row);
    }
    for l in lines {
        let (n, s) = l?;
        if !s.trim().is_empty() {
            return Err(Error::Parse {
                line: n,
                column: 1,
                message: "unexpected content after the last row".into(),
            });
        }
    }
    Triangle::new(TriangleKind::Incremental, rows)
}

pub fn load_triangle_file(path: impl AsRef<Path>, scale: f64) -> Result<Triangle> {
    let file = std::fs::File::open(path)?;
    load_triangle(std::io::BufReader::new(file), scale)
}
