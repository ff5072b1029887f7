//! Gridded field model: the (level, lat, lon) scalar cube, climatology removal,
//! min-max normalization and the unit-sphere coordinate embedding used as
//! network input.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{check_shape, HihaError, Result};

/// (levels, lats, lons)
pub type Shape = [usize; 3];

pub fn voxel_count(shape: Shape) -> usize {
    shape[0] * shape[1] * shape[2]
}

/// A single-variable scalar field indexed (level, lat, lon).
#[derive(Clone, Debug, PartialEq)]
pub struct GridField {
    values: Array3<f32>,
    pub variable_name: String,
    pub units: String,
    pub frame_index: u32,
}

impl GridField {
    /// Builds a field, rejecting NaN/Inf and empty extents.
    pub fn new(values: Array3<f32>, variable_name: impl Into<String>, units: impl Into<String>) -> Result<Self> {
        let dim = values.dim();
        for (axis, n) in [("level", dim.0), ("lat", dim.1), ("lon", dim.2)] {
            if n == 0 {
                return Err(HihaError::ZeroExtent { axis });
            }
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(HihaError::NonFinite { index });
        }
        Ok(Self {
            values,
            variable_name: variable_name.into(),
            units: units.into(),
            frame_index: 0,
        })
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        let expected = voxel_count(shape);
        if data.len() != expected {
            return Err(HihaError::invalid(format!(
                "{} values supplied for shape {:?} ({} voxels)",
                data.len(),
                shape,
                expected
            )));
        }
        let values = Array3::from_shape_vec((shape[0], shape[1], shape[2]), data)
            .map_err(|e| HihaError::invalid(e.to_string()))?;
        Self::new(values, "", "")
    }

    pub fn zeros(shape: Shape) -> Self {
        Self {
            values: Array3::zeros((shape[0], shape[1], shape[2])),
            variable_name: String::new(),
            units: String::new(),
            frame_index: 0,
        }
    }

    pub fn constant(shape: Shape, value: f32) -> Self {
        let mut f = Self::zeros(shape);
        f.values.fill(value);
        f
    }

    /// Internal constructor for arrays produced by finite arithmetic on valid fields.
    pub(crate) fn from_array(values: Array3<f32>) -> Self {
        Self {
            values,
            variable_name: String::new(),
            units: String::new(),
            frame_index: 0,
        }
    }

    pub fn with_meta_of(mut self, other: &GridField) -> Self {
        self.variable_name = other.variable_name.clone();
        self.units = other.units.clone();
        self.frame_index = other.frame_index;
        self
    }

    pub fn shape(&self) -> Shape {
        let d = self.values.dim();
        [d.0, d.1, d.2]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &Array3<f32> {
        &self.values
    }

    pub fn view(&self) -> ArrayView3<'_, f32> {
        self.values.view()
    }

    pub fn as_slice(&self) -> &[f32] {
        self.values
            .as_slice()
            .expect("grid fields are always standard layout")
    }

    pub fn into_array(self) -> Array3<f32> {
        self.values
    }

    pub fn max_abs(&self) -> f32 {
        self.values.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.values
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum::<f64>() / self.len() as f64
    }

    pub fn std_dev(&self) -> f64 {
        let mean = self.mean();
        let var = self
            .values
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / self.len() as f64;
        var.sqrt()
    }

    /// Elementwise sum; shapes must agree.
    pub fn add(&self, other: &GridField) -> Result<GridField> {
        check_shape(self.shape(), other.shape())?;
        Ok(GridField::from_array(&self.values + &other.values).with_meta_of(self))
    }

    pub fn sub(&self, other: &GridField) -> Result<GridField> {
        check_shape(self.shape(), other.shape())?;
        Ok(GridField::from_array(&self.values - &other.values).with_meta_of(self))
    }

    pub(crate) fn add_assign(&mut self, other: &GridField) {
        self.values += &other.values;
    }

    pub fn scaled(&self, factor: f32) -> GridField {
        GridField::from_array(self.values.mapv(|v| v * factor)).with_meta_of(self)
    }

    /// Copies the sub-cube covered by `bounds`.
    pub fn extract(&self, bounds: &Bounds) -> GridField {
        let v = self
            .values
            .slice(ndarray::s![
                bounds.level.0..bounds.level.1,
                bounds.lat.0..bounds.lat.1,
                bounds.lon.0..bounds.lon.1
            ])
            .to_owned();
        GridField::from_array(v)
    }

    /// Adds `patch` into the sub-cube covered by `bounds`.
    pub fn add_patch(&mut self, bounds: &Bounds, patch: &GridField) {
        let mut dst = self.values.slice_mut(ndarray::s![
            bounds.level.0..bounds.level.1,
            bounds.lat.0..bounds.lat.1,
            bounds.lon.0..bounds.lon.1
        ]);
        dst += &patch.values;
    }
}

/// Half-open index ranges along (level, lat, lon).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Bounds {
    pub level: (usize, usize),
    pub lat: (usize, usize),
    pub lon: (usize, usize),
}

impl Bounds {
    pub fn full(shape: Shape) -> Self {
        Self {
            level: (0, shape[0]),
            lat: (0, shape[1]),
            lon: (0, shape[2]),
        }
    }

    pub fn shape(&self) -> Shape {
        [
            self.level.1 - self.level.0,
            self.lat.1 - self.lat.0,
            self.lon.1 - self.lon.0,
        ]
    }

    pub fn voxel_count(&self) -> usize {
        voxel_count(self.shape())
    }

    pub fn is_empty(&self) -> bool {
        self.voxel_count() == 0
    }

    pub fn ranges(&self) -> [(usize, usize); 3] {
        [self.level, self.lat, self.lon]
    }

    pub fn contains(&self, idx: [usize; 3]) -> bool {
        self.ranges()
            .iter()
            .zip(idx)
            .all(|(&(lo, hi), i)| lo <= i && i < hi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub v_min: f64,
    pub v_max: f64,
    pub climatology_id: Option<String>,
}

impl NormalizationParams {
    /// Constant source field: everything normalizes to zero.
    pub fn is_degenerate(&self) -> bool {
        !(self.v_max > self.v_min)
    }

    pub fn range(&self) -> f64 {
        self.v_max - self.v_min
    }

    #[inline]
    pub fn apply(&self, v: f32) -> f32 {
        if self.is_degenerate() {
            return 0.0;
        }
        let n = 2.0 * (v as f64 - self.v_min) / self.range() - 1.0;
        n.clamp(-1.0, 1.0) as f32
    }

    #[inline]
    pub fn invert(&self, n: f32) -> f32 {
        if self.is_degenerate() {
            return self.v_min as f32;
        }
        ((n as f64 + 1.0) * 0.5 * self.range() + self.v_min) as f32
    }
}

/// A reference mean state matching the field shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Climatology {
    pub values: Array3<f32>,
    pub epoch_label: String,
}

/// What was removed from a field before normalization, needed to add it back.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ClimatologyRemoval {
    Reference { epoch_label: String },
    ScalarMean(f64),
}

/// Y - c elementwise, or Y - mean(Y) when no climatology is supplied.
pub fn subtract_climatology(field: &GridField, clim: Option<&Climatology>) -> Result<(GridField, ClimatologyRemoval)> {
    match clim {
        Some(c) => {
            let d = c.values.dim();
            check_shape(field.shape(), [d.0, d.1, d.2])?;
            let out = GridField::from_array(&field.values - &c.values).with_meta_of(field);
            Ok((
                out,
                ClimatologyRemoval::Reference {
                    epoch_label: c.epoch_label.clone(),
                },
            ))
        }
        None => {
            let mean = field.mean();
            let m = mean as f32;
            let out = GridField::from_array(field.values.mapv(|v| v - m)).with_meta_of(field);
            Ok((out, ClimatologyRemoval::ScalarMean(mean)))
        }
    }
}

/// Inverse of [`subtract_climatology`].
pub fn add_climatology(anomaly: &GridField, removal: &ClimatologyRemoval, clim: Option<&Climatology>) -> Result<GridField> {
    match removal {
        ClimatologyRemoval::ScalarMean(mean) => {
            let m = *mean as f32;
            Ok(GridField::from_array(anomaly.values.mapv(|v| v + m)).with_meta_of(anomaly))
        }
        ClimatologyRemoval::Reference { epoch_label } => {
            let c = clim.ok_or_else(|| {
                HihaError::invalid(format!("climatology '{epoch_label}' required to restore this field"))
            })?;
            let d = c.values.dim();
            check_shape(anomaly.shape(), [d.0, d.1, d.2])?;
            Ok(GridField::from_array(&anomaly.values + &c.values).with_meta_of(anomaly))
        }
    }
}

/// Per-field min-max map onto [-1, 1].
pub fn normalize(field: &GridField) -> Result<(GridField, NormalizationParams)> {
    if let Some(index) = field.values.iter().position(|v| !v.is_finite()) {
        return Err(HihaError::NonFinite { index });
    }
    let (lo, hi) = field.min_max();
    let params = NormalizationParams {
        v_min: lo as f64,
        v_max: hi as f64,
        climatology_id: None,
    };
    Ok((apply_normalization(field, &params), params))
}

pub fn apply_normalization(field: &GridField, params: &NormalizationParams) -> GridField {
    GridField::from_array(field.values.mapv(|v| params.apply(v))).with_meta_of(field)
}

pub fn denormalize(field: &GridField, params: &NormalizationParams) -> GridField {
    GridField::from_array(field.values.mapv(|v| params.invert(v))).with_meta_of(field)
}

/// Latitude in radians at a (possibly fractional) grid index.
pub fn latitude_at(index: f64, n_lat: usize) -> f64 {
    if n_lat < 2 {
        0.0
    } else {
        -PI / 2.0 + PI * index / (n_lat - 1) as f64
    }
}

/// Longitude in radians; periodic, endpoint excluded.
pub fn longitude_at(index: f64, n_lon: usize) -> f64 {
    2.0 * PI * index / n_lon as f64
}

pub fn level_at(index: f64, n_level: usize) -> f64 {
    if n_level < 2 {
        0.0
    } else {
        -1.0 + 2.0 * index / (n_level - 1) as f64
    }
}

/// Per-voxel (x, y, z, p) network inputs, row-major over (level, lat, lon).
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateTensor {
    shape: Shape,
    data: Array2<f32>,
}

impl CoordinateTensor {
    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn row(&self, i: usize) -> [f32; 4] {
        let r = self.data.row(i);
        [r[0], r[1], r[2], r[3]]
    }

    /// Coordinates at fractional positions of a `full_shape` grid, one list
    /// of positions per axis; the result is their Cartesian product.
    pub fn at_positions(full_shape: Shape, level_pos: &[f64], lat_pos: &[f64], lon_pos: &[f64]) -> Self {
        let n = level_pos.len() * lat_pos.len() * lon_pos.len();
        let mut data = Array2::<f32>::zeros((n, 4));
        let last_lat = full_shape[1].saturating_sub(1) as f64;
        let lat_trig: Vec<(f64, f64)> = lat_pos
            .iter()
            .map(|&i| {
                let theta = latitude_at(i, full_shape[1]);
                // exact zero at the poles so every longitude lands on one point
                let at_pole = full_shape[1] >= 2 && (i == 0.0 || i == last_lat);
                let c = if at_pole { 0.0 } else { theta.cos() };
                (c, theta.sin())
            })
            .collect();
        let lon_trig: Vec<(f64, f64)> = lon_pos
            .iter()
            .map(|&j| {
                let phi = longitude_at(j, full_shape[2]);
                (phi.cos(), phi.sin())
            })
            .collect();
        let mut row = 0;
        for &k in level_pos {
            let p = level_at(k, full_shape[0]) as f32;
            for &(ct, st) in &lat_trig {
                for &(cp, sp) in &lon_trig {
                    let mut r = data.row_mut(row);
                    r[0] = (ct * cp) as f32;
                    r[1] = (ct * sp) as f32;
                    r[2] = st as f32;
                    r[3] = p;
                    row += 1;
                }
            }
        }
        Self {
            shape: [level_pos.len(), lat_pos.len(), lon_pos.len()],
            data,
        }
    }

    /// Rows belonging to `bounds`, in (level, lat, lon) order.
    pub fn subset(&self, bounds: &Bounds) -> CoordinateTensor {
        let [_, nt, nf] = self.shape;
        let mut data = Array2::<f32>::zeros((bounds.voxel_count(), 4));
        let mut row = 0;
        for k in bounds.level.0..bounds.level.1 {
            for i in bounds.lat.0..bounds.lat.1 {
                let base = (k * nt + i) * nf;
                for j in bounds.lon.0..bounds.lon.1 {
                    data.row_mut(row).assign(&self.data.row(base + j));
                    row += 1;
                }
            }
        }
        CoordinateTensor {
            shape: bounds.shape(),
            data,
        }
    }

    pub fn select_rows(&self, rows: &[usize]) -> Array2<f32> {
        self.data.select(Axis(0), rows)
    }
}

/// Integer-grid coordinates for a field of `shape`.
pub fn build_coordinates(shape: Shape) -> Result<CoordinateTensor> {
    for (axis, n) in [("level", shape[0]), ("lat", shape[1]), ("lon", shape[2])] {
        if n == 0 {
            return Err(HihaError::ZeroExtent { axis });
        }
    }
    let pos = |n: usize| (0..n).map(|i| i as f64).collect::<Vec<_>>();
    Ok(CoordinateTensor::at_positions(
        shape,
        &pos(shape[0]),
        &pos(shape[1]),
        &pos(shape[2]),
    ))
}

/// JSON sidecar describing a raw `.grd` payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldHeader {
    pub shape: Shape,
    pub variable_name: String,
    pub units: String,
    pub frame_index: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch_label: Option<String>,
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("json")
}

/// Reads a little-endian f32 C-order payload plus its JSON sidecar.
pub fn read_field(path: &Path) -> Result<GridField> {
    let header: FieldHeader = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    let bytes = fs::read(path)?;
    let data = decode_f32_le(&bytes, voxel_count(header.shape))?;
    let mut field = GridField::from_vec(header.shape, data)?;
    field.variable_name = header.variable_name;
    field.units = header.units;
    field.frame_index = header.frame_index;
    Ok(field)
}

pub fn write_field(path: &Path, field: &GridField) -> Result<()> {
    write_raw(path, field, None)
}

pub fn read_climatology(path: &Path) -> Result<Climatology> {
    let header: FieldHeader = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    let bytes = fs::read(path)?;
    let data = decode_f32_le(&bytes, voxel_count(header.shape))?;
    let field = GridField::from_vec(header.shape, data)?;
    Ok(Climatology {
        values: field.into_array(),
        epoch_label: header.epoch_label.unwrap_or(header.variable_name),
    })
}

pub fn write_climatology(path: &Path, clim: &Climatology) -> Result<()> {
    let field = GridField::new(clim.values.clone(), "climatology", "")?;
    write_raw(path, &field, Some(clim.epoch_label.clone()))
}

fn write_raw(path: &Path, field: &GridField, epoch_label: Option<String>) -> Result<()> {
    let mut bytes = Vec::with_capacity(field.len() * 4);
    for v in field.values.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    let header = FieldHeader {
        shape: field.shape(),
        variable_name: field.variable_name.clone(),
        units: field.units.clone(),
        frame_index: field.frame_index,
        epoch_label,
    };
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(&header)?)?;
    Ok(())
}

fn decode_f32_le(bytes: &[u8], expected: usize) -> Result<Vec<f32>> {
    if bytes.len() != expected * 4 {
        return Err(HihaError::invalid(format!(
            "payload holds {} bytes, header declares {} values",
            bytes.len(),
            expected
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}
