//! Robot-centric multi-layer grid map.
//!
//! ## Axis convention
//!
//! The map frame is right handed with `z` up. The row index grows with `+x`
//! and the column index grows with `+y`. A map has `height_cells` rows
//! spanning the `x` extent and `width_cells` columns spanning the `y` extent,
//! so cell `(0, 0)` is the corner cell at minimum `x` and minimum `y`.
//! Cell footprints are half-open: a point on the upper edge of a cell belongs
//! to the next cell.
//!
//! Every layer stores one `f32` per cell, row-major. The base layers
//! `elevation`, `variance` and `valid` always exist. Invalid cells carry
//! `valid == 0` and NaN in `elevation` and `variance`.

use std::fmt;

use crate::error::{Error, Result};

pub const ELEVATION: &str = "elevation";
pub const VARIANCE: &str = "variance";
pub const VALID: &str = "valid";

pub const BASE_LAYERS: [&str; 3] = [ELEVATION, VARIANCE, VALID];

/// Bytes used by one stored cell value.
pub const CELL_BYTES: usize = std::mem::size_of::<f32>();

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapGeometry {
    /// Meters per cell.
    pub resolution: f64,
    /// Number of columns (extent along `y`).
    pub width_cells: usize,
    /// Number of rows (extent along `x`).
    pub height_cells: usize,
    /// Map center in the map frame, meters.
    pub center: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellIndex {
    pub row: usize,
    pub col: usize,
}

impl CellIndex {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

impl fmt::Display for CellIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.row, self.col)
    }
}

impl MapGeometry {
    pub fn new(
        resolution: f64,
        width_cells: usize,
        height_cells: usize,
        center: [f64; 2],
    ) -> Result<Self> {
        let geometry = Self {
            resolution,
            width_cells,
            height_cells,
            center,
        };
        geometry.validate()?;
        Ok(geometry)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.resolution.is_finite() && self.resolution > 0.0) {
            return Err(Error::InvalidGeometry(format!(
                "resolution must be positive, got {}",
                self.resolution
            )));
        }
        if self.width_cells == 0 || self.height_cells == 0 {
            return Err(Error::InvalidGeometry(format!(
                "grid must have at least one cell, got {}x{}",
                self.height_cells, self.width_cells
            )));
        }
        if !(self.center[0].is_finite() && self.center[1].is_finite()) {
            return Err(Error::InvalidGeometry("center must be finite".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn cell_count(&self) -> usize {
        self.width_cells * self.height_cells
    }

    /// World extent `(width_cells * r, height_cells * r)`, i.e. (`y` span, `x` span).
    pub fn extent(&self) -> [f64; 2] {
        [
            self.width_cells as f64 * self.resolution,
            self.height_cells as f64 * self.resolution,
        ]
    }

    /// Continuous `(row, col)` coordinates of a map-frame point. Integer
    /// values fall on cell corners.
    #[inline]
    pub fn continuous_index(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.center[0]) / self.resolution + self.height_cells as f64 * 0.5,
            (y - self.center[1]) / self.resolution + self.width_cells as f64 * 0.5,
        )
    }

    /// Index of the cell whose footprint contains `(x, y)`, or `None` when
    /// the point lies outside the map window.
    #[inline]
    pub fn cell_index(&self, x: f64, y: f64) -> Option<CellIndex> {
        let (row, col) = self.continuous_index(x, y);
        let (row, col) = (row.floor(), col.floor());
        // NaN fails both comparisons.
        if row >= 0.0
            && col >= 0.0
            && row < self.height_cells as f64
            && col < self.width_cells as f64
        {
            Some(CellIndex::new(row as usize, col as usize))
        } else {
            None
        }
    }

    pub fn cell_center(&self, idx: CellIndex) -> Result<[f64; 2]> {
        self.check_index(idx)?;
        Ok(self.cell_center_unchecked(idx))
    }

    #[inline]
    pub(crate) fn cell_center_unchecked(&self, idx: CellIndex) -> [f64; 2] {
        [
            self.center[0]
                + (idx.row as f64 + 0.5 - self.height_cells as f64 * 0.5) * self.resolution,
            self.center[1]
                + (idx.col as f64 + 0.5 - self.width_cells as f64 * 0.5) * self.resolution,
        ]
    }

    pub fn check_index(&self, idx: CellIndex) -> Result<()> {
        if idx.row < self.height_cells && idx.col < self.width_cells {
            Ok(())
        } else {
            Err(Error::IndexOutOfRange {
                row: idx.row,
                col: idx.col,
                rows: self.height_cells,
                cols: self.width_cells,
            })
        }
    }

    /// Row-major linear offset of a cell.
    #[inline]
    pub fn linear(&self, idx: CellIndex) -> usize {
        idx.row * self.width_cells + idx.col
    }

    #[inline]
    pub fn unlinear(&self, offset: usize) -> CellIndex {
        CellIndex::new(offset / self.width_cells, offset % self.width_cells)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Geometric,
    Multimodal,
    PluginOutput,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Geometric => "geometric",
            LayerKind::Multimodal => "multimodal",
            LayerKind::PluginOutput => "plugin",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "geometric" => Some(LayerKind::Geometric),
            "multimodal" => Some(LayerKind::Multimodal),
            "plugin" => Some(LayerKind::PluginOutput),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    name: String,
    kind: LayerKind,
    /// Value written into cells that scroll into the window.
    fill: f32,
    values: Vec<f32>,
}

impl Layer {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> LayerKind {
        self.kind
    }

    pub fn fill(&self) -> f32 {
        self.fill
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }
}

pub(crate) fn validate_name(name: &str) -> Result<()> {
    if name.is_empty() || name.chars().any(|c| c.is_whitespace() || c.is_control()) {
        return Err(Error::InvalidName(name.to_owned()));
    }
    Ok(())
}

fn default_fill(name: &str) -> f32 {
    match name {
        ELEVATION | VARIANCE => f32::NAN,
        _ => 0.0,
    }
}

/// Robot-centric 2.5D map: geometry plus an ordered set of named layers.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMap {
    geometry: MapGeometry,
    layers: Vec<Layer>,
}

impl GridMap {
    /// Creates an empty map (every cell invalid) with the base layers and
    /// zero-filled multi-modal layers.
    pub fn new<S: AsRef<str>>(geometry: MapGeometry, multimodal_layers: &[S]) -> Result<Self> {
        geometry.validate()?;
        let mut map = Self {
            geometry,
            layers: Vec::with_capacity(BASE_LAYERS.len() + multimodal_layers.len()),
        };
        for name in BASE_LAYERS {
            map.add_layer(name, LayerKind::Geometric, default_fill(name))?;
        }
        for name in multimodal_layers {
            map.add_layer(name.as_ref(), LayerKind::Multimodal, 0.0)?;
        }
        Ok(map)
    }

    /// Rebuilds a map from raw layers, checking shapes and names.
    pub fn from_layers(
        geometry: MapGeometry,
        layers: Vec<(String, LayerKind, Vec<f32>)>,
    ) -> Result<Self> {
        geometry.validate()?;
        let mut map = Self {
            geometry,
            layers: Vec::with_capacity(layers.len()),
        };
        for (name, kind, values) in layers {
            validate_name(&name)?;
            if map.layer_index(&name).is_some() {
                return Err(Error::DuplicateLayer(name));
            }
            if values.len() != geometry.cell_count() {
                return Err(Error::Format(format!(
                    "layer `{name}` has {} values, expected {}",
                    values.len(),
                    geometry.cell_count()
                )));
            }
            let fill = default_fill(&name);
            map.layers.push(Layer {
                name,
                kind,
                fill,
                values,
            });
        }
        for base in BASE_LAYERS {
            if map.layer_index(base).is_none() {
                return Err(Error::Format(format!("missing base layer `{base}`")));
            }
        }
        Ok(map)
    }

    pub fn geometry(&self) -> &MapGeometry {
        &self.geometry
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.name.clone()).collect()
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut Layer> {
        self.layers.iter_mut().find(|l| l.name == name)
    }

    pub(crate) fn layer_at(&self, index: usize) -> &Layer {
        &self.layers[index]
    }

    pub(crate) fn layer_at_mut(&mut self, index: usize) -> &mut Layer {
        &mut self.layers[index]
    }

    pub(crate) fn unknown_layer(&self, name: &str) -> Error {
        Error::UnknownLayer {
            name: name.to_owned(),
            available: self.layer_names(),
        }
    }

    /// Values of a layer, or an error naming the missing layer.
    pub fn values(&self, name: &str) -> Result<&[f32]> {
        self.layer(name)
            .map(Layer::values)
            .ok_or_else(|| self.unknown_layer(name))
    }

    pub fn values_mut(&mut self, name: &str) -> Result<&mut [f32]> {
        match self.layer_index(name) {
            Some(i) => Ok(&mut self.layers[i].values),
            None => Err(self.unknown_layer(name)),
        }
    }

    /// Appends a layer initialized to `fill`. Returns its position.
    pub fn add_layer(&mut self, name: &str, kind: LayerKind, fill: f32) -> Result<usize> {
        validate_name(name)?;
        if self.layer_index(name).is_some() {
            return Err(Error::DuplicateLayer(name.to_owned()));
        }
        self.layers.push(Layer {
            name: name.to_owned(),
            kind,
            fill,
            values: vec![fill; self.geometry.cell_count()],
        });
        Ok(self.layers.len() - 1)
    }

    /// Returns the position of `name`, creating it with `fill` if absent.
    pub fn ensure_layer(&mut self, name: &str, kind: LayerKind, fill: f32) -> Result<usize> {
        match self.layer_index(name) {
            Some(i) => Ok(i),
            None => self.add_layer(name, kind, fill),
        }
    }

    pub(crate) fn set_fill(&mut self, index: usize, fill: f32) {
        self.layers[index].fill = fill;
    }

    pub fn is_valid(&self, idx: CellIndex) -> bool {
        let offset = self.geometry.linear(idx);
        self.values(VALID).map(|v| v[offset] != 0.0).unwrap_or(false)
    }

    pub fn valid_count(&self) -> usize {
        self.values(VALID)
            .map(|v| v.iter().filter(|&&x| x != 0.0).count())
            .unwrap_or(0)
    }

    pub fn cell_index(&self, x: f64, y: f64) -> Option<CellIndex> {
        self.geometry.cell_index(x, y)
    }

    pub fn cell_center(&self, idx: CellIndex) -> Result<[f64; 2]> {
        self.geometry.cell_center(idx)
    }

    /// Exactly `n_layers * width * height * 4` bytes.
    pub fn memory_footprint(&self) -> usize {
        self.layers.len() * self.geometry.cell_count() * CELL_BYTES
    }

    /// Moves the window so that its center lands on the lattice point
    /// nearest `new_center`. Cells that stay inside the window keep their
    /// values; cells that scroll in take each layer's fill value, which
    /// leaves them invalid.
    pub fn recenter(&mut self, new_center: [f64; 2]) {
        let r = self.geometry.resolution;
        let shift = |delta: f64| -> i64 {
            // floor(d + 1/2) keeps a second call with the same target a no-op,
            // including exact half-cell targets.
            (delta / r + 0.5 + 1e-9).floor() as i64
        };
        let d_row = shift(new_center[0] - self.geometry.center[0]);
        let d_col = shift(new_center[1] - self.geometry.center[1]);
        if d_row == 0 && d_col == 0 {
            return;
        }
        self.geometry.center[0] += d_row as f64 * r;
        self.geometry.center[1] += d_col as f64 * r;

        let rows = self.geometry.height_cells as i64;
        let cols = self.geometry.width_cells as i64;
        // New cell (i, j) holds old cell (i + d_row, j + d_col).
        let row_range = (0.max(-d_row), rows.min(rows - d_row));
        let col_range = (0.max(-d_col), cols.min(cols - d_col));
        for layer in &mut self.layers {
            let mut shifted = vec![layer.fill; layer.values.len()];
            if row_range.0 < row_range.1 && col_range.0 < col_range.1 {
                let n = (col_range.1 - col_range.0) as usize;
                for i in row_range.0..row_range.1 {
                    let dst = (i * cols + col_range.0) as usize;
                    let src = ((i + d_row) * cols + col_range.0 + d_col) as usize;
                    shifted[dst..dst + n].copy_from_slice(&layer.values[src..src + n]);
                }
            }
            layer.values = shifted;
        }
    }
}
