//! Grid-shaped domain types: descriptor grids, binary masks, cost maps,
//! flow fields, and correspondence sets.
//!
//! Coordinates are `(x, y)` with `x` the column and `y` the row; the linear
//! (row-major) index of a cell is `y * width + x`. Distances between
//! coordinates are plain Euclidean distances in cell units.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{CoralError, Result};

/// Integer cell coordinate on a grid, `x` = column, `y` = row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridCoord {
    pub x: usize,
    pub y: usize,
}

impl GridCoord {
    pub fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }

    /// Row-major linear index on a grid of the given width.
    pub fn linear(&self, width: usize) -> usize {
        self.y * width + self.x
    }

    pub fn from_linear(idx: usize, width: usize) -> Self {
        Self {
            x: idx % width,
            y: idx / width,
        }
    }

    /// Euclidean distance to a real-valued point.
    pub fn dist(&self, other: (f64, f64)) -> f64 {
        let dx = self.x as f64 - other.0;
        let dy = self.y as f64 - other.1;
        (dx * dx + dy * dy).sqrt()
    }

    pub fn as_f64(&self) -> (f64, f64) {
        (self.x as f64, self.y as f64)
    }
}

/// An `h×w` grid of `c`-dimensional feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorGrid {
    data: Array3<f64>,
}

impl DescriptorGrid {
    /// Wraps an `h×w×c` array, rejecting empty shapes and non-finite values.
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(CoralError::DimensionMismatch(format!(
                "descriptor grid must be non-empty, got {h}x{w}x{c}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CoralError::NonFinite(
                "descriptor grid contains a non-finite value".into(),
            ));
        }
        Ok(Self { data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            data: Array3::zeros((height, width, channels)),
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    /// Feature vector at a cell.
    pub fn vector(&self, at: GridCoord) -> ndarray::ArrayView1<'_, f64> {
        self.data.slice(ndarray::s![at.y, at.x, ..])
    }

    pub fn same_shape(&self, other: &DescriptorGrid) -> bool {
        self.data.dim() == other.data.dim()
    }
}

/// Boolean mask over an `h×w` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    bits: Array2<bool>,
}

impl BinaryMask {
    pub fn new(bits: Array2<bool>) -> Self {
        Self { bits }
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            bits: Array2::from_elem((height, width), value),
        }
    }

    pub fn height(&self) -> usize {
        self.bits.dim().0
    }

    pub fn width(&self) -> usize {
        self.bits.dim().1
    }

    pub fn get(&self, at: GridCoord) -> bool {
        self.bits[[at.y, at.x]]
    }

    pub fn set(&mut self, at: GridCoord, value: bool) {
        self.bits[[at.y, at.x]] = value;
    }

    pub fn bits(&self) -> &Array2<bool> {
        &self.bits
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Masked-in coordinates in row-major order.
    pub fn ones(&self) -> Vec<GridCoord> {
        let (h, w) = self.bits.dim();
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if self.bits[[y, x]] {
                    out.push(GridCoord::new(x, y));
                }
            }
        }
        out
    }

    pub fn matches_grid(&self, grid: &DescriptorGrid) -> bool {
        self.height() == grid.height() && self.width() == grid.width()
    }

    /// True when every set bit of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.bits.dim() == other.bits.dim()
            && self
                .bits
                .iter()
                .zip(other.bits.iter())
                .all(|(a, b)| !*a || *b)
    }
}

/// Pairwise similarity between query locations and key locations.
///
/// Rows follow `query_locations`, columns follow `key_locations`. The same
/// container holds cosine costs (entries in `[-1, 1]`) and attention-derived
/// costs (entries in `[0, 1]`).
#[derive(Debug, Clone)]
pub struct CostMap {
    pub query_shape: (usize, usize),
    pub key_shape: (usize, usize),
    pub query_locations: Vec<GridCoord>,
    pub key_locations: Vec<GridCoord>,
    pub values: Array2<f64>,
}

impl CostMap {
    pub fn new(
        query_shape: (usize, usize),
        key_shape: (usize, usize),
        query_locations: Vec<GridCoord>,
        key_locations: Vec<GridCoord>,
        values: Array2<f64>,
    ) -> Result<Self> {
        if values.dim() != (query_locations.len(), key_locations.len()) {
            return Err(CoralError::DimensionMismatch(format!(
                "cost values {:?} do not match {} queries x {} keys",
                values.dim(),
                query_locations.len(),
                key_locations.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CoralError::NonFinite("cost map entry".into()));
        }
        Ok(Self {
            query_shape,
            key_shape,
            query_locations,
            key_locations,
            values,
        })
    }

    pub fn num_queries(&self) -> usize {
        self.query_locations.len()
    }

    pub fn num_keys(&self) -> usize {
        self.key_locations.len()
    }

    /// Transposed map: keys become queries and vice versa.
    pub fn transposed(&self) -> CostMap {
        CostMap {
            query_shape: self.key_shape,
            key_shape: self.query_shape,
            query_locations: self.key_locations.clone(),
            key_locations: self.query_locations.clone(),
            values: self.values.t().to_owned(),
        }
    }
}

/// Per-location 2D target coordinates over a source grid.
///
/// Targets are real-valued `(x, y)` points into some target grid; locations
/// with `valid = false` carry no target.
#[derive(Debug, Clone)]
pub struct FlowField {
    target_x: Array2<f64>,
    target_y: Array2<f64>,
    valid: BinaryMask,
}

impl FlowField {
    pub fn invalid(height: usize, width: usize) -> Self {
        Self {
            target_x: Array2::zeros((height, width)),
            target_y: Array2::zeros((height, width)),
            valid: BinaryMask::filled(height, width, false),
        }
    }

    pub fn height(&self) -> usize {
        self.valid.height()
    }

    pub fn width(&self) -> usize {
        self.valid.width()
    }

    pub fn set_target(&mut self, at: GridCoord, target: (f64, f64)) {
        self.target_x[[at.y, at.x]] = target.0;
        self.target_y[[at.y, at.x]] = target.1;
        self.valid.set(at, true);
    }

    pub fn target(&self, at: GridCoord) -> Option<(f64, f64)> {
        if self.valid.get(at) {
            Some((self.target_x[[at.y, at.x]], self.target_y[[at.y, at.x]]))
        } else {
            None
        }
    }

    pub fn valid(&self) -> &BinaryMask {
        &self.valid
    }

    /// Checks that every valid target lies inside the given target grid.
    pub fn targets_within(&self, target_shape: (usize, usize)) -> bool {
        let (th, tw) = target_shape;
        self.valid.ones().iter().all(|&c| {
            let (tx, ty) = self.target(c).expect("valid target");
            tx >= 0.0 && ty >= 0.0 && tx <= (tw - 1) as f64 && ty <= (th - 1) as f64
        })
    }
}

/// One query→match pair with its reliability flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Correspondence {
    pub query: GridCoord,
    pub matched: GridCoord,
    pub reliable: bool,
}

/// A list of correspondences with unique query coordinates.
///
/// Unreliable entries keep their `matched` coordinate for inspection but are
/// excluded from every loss and metric.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrespondenceSet {
    entries: Vec<Correspondence>,
}

impl CorrespondenceSet {
    pub fn new(entries: Vec<Correspondence>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if !seen.insert(e.query) {
                return Err(CoralError::DimensionMismatch(format!(
                    "duplicate query coordinate ({}, {})",
                    e.query.x, e.query.y
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[Correspondence] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn reliable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.reliable).count()
    }

    pub fn get(&self, query: GridCoord) -> Option<&Correspondence> {
        self.entries.iter().find(|e| e.query == query)
    }
}
