//! Reference solutions: CSV import/export, exact plane-wave fields,
//! boundary subsampling and the NRMSE error metric.
//!
//! Units are mm, s, MPa and kg/mm^3 throughout.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{concatenate, s, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::layout::Dimension;
use crate::physics::{FieldJets, MaterialParams, ScaleSet};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("line {line}, column `{column}`: `{value}` is not a number")]
    NonNumeric { line: u64, column: String, value: String },
    #[error("dataset file is empty")]
    Empty,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("invalid plane wave: {0}")]
    InvalidWave(String),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("dataset has no boundary points")]
    NoBoundary,
    #[error("fraction must lie in (0, 1], got {0}")]
    Fraction(f64),
    #[error("nrmse needs equal lengths of at least 2 (got {pred} and {reference})")]
    Length { pred: usize, reference: usize },
    #[error("reference field is constant; nrmse undefined")]
    ZeroRange,
    #[error("datasets are incompatible: {0}")]
    Incompatible(String),
}

/// Axis-aligned box, one `[lo, hi]` pair per spatial axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Geometry {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self, DataError> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(DataError::InvalidGeometry("lo/hi length mismatch".into()));
        }
        if lo
            .iter()
            .zip(&hi)
            .any(|(a, b)| !(a < b) || !a.is_finite() || !b.is_finite())
        {
            return Err(DataError::InvalidGeometry(format!(
                "every axis needs lo < hi, got {lo:?} / {hi:?}"
            )));
        }
        Ok(Geometry { lo, hi })
    }

    /// The 200 mm x 10 mm (x 10 mm) cantilever box.
    pub fn beam(dim: Dimension) -> Self {
        let hi = match dim {
            Dimension::Plane => vec![200.0, 10.0],
            Dimension::Solid => vec![200.0, 10.0, 10.0],
        };
        Geometry {
            lo: vec![0.0; hi.len()],
            hi,
        }
    }

    pub fn n_axes(&self) -> usize {
        self.lo.len()
    }

    /// Largest absolute coordinate.
    pub fn extent(&self) -> f64 {
        self.lo.iter().chain(&self.hi).map(|x| x.abs()).fold(0.0, f64::max)
    }

    pub fn on_boundary(&self, x: &[f64], tol: f64) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .any(|(&v, (&lo, &hi))| (v - lo).abs() <= tol || (v - hi).abs() <= tol)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Imported(String),
    Manufactured,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Imported(p) => write!(f, "imported from {p}"),
            Provenance::Manufactured => f.write_str("manufactured"),
        }
    }
}

/// Column layout of a dataset file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schema {
    pub dimension: Dimension,
    /// Carries a `mu` column.
    pub surrogate: bool,
}

impl Schema {
    pub const PLANE: Schema = Schema {
        dimension: Dimension::Plane,
        surrogate: false,
    };
    pub const SOLID: Schema = Schema {
        dimension: Dimension::Solid,
        surrogate: false,
    };
    pub const PLANE_SURROGATE: Schema = Schema {
        dimension: Dimension::Plane,
        surrogate: true,
    };
    pub const SOLID_SURROGATE: Schema = Schema {
        dimension: Dimension::Solid,
        surrogate: true,
    };

    pub fn point_columns(&self) -> Vec<&'static str> {
        let mut cols: Vec<&str> = self.dimension.space_names().to_vec();
        cols.push("t");
        if self.surrogate {
            cols.push("mu");
        }
        cols
    }

    pub fn columns(&self) -> Vec<&'static str> {
        let mut cols = self.point_columns();
        cols.extend(self.dimension.field_names());
        cols
    }
}

/// Labeled field samples at space-time(-parameter) points.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceDataset {
    pub dimension: Dimension,
    pub surrogate: bool,
    /// `(x, y, [z], t, [mu])` per row.
    pub points: Array2<f64>,
    /// Fields in layout order per row.
    pub fields: Array2<f64>,
    pub geometry: Geometry,
    pub boundary: Vec<bool>,
    pub provenance: Provenance,
    /// Material the data was generated with, when known; used for default
    /// modulus and density scales.
    pub material_hint: Option<MaterialParams>,
}

impl ReferenceDataset {
    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn schema(&self) -> Schema {
        Schema {
            dimension: self.dimension,
            surrogate: self.surrogate,
        }
    }

    pub fn boundary_count(&self) -> usize {
        self.boundary.iter().filter(|&&b| b).count()
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> ReferenceDataset {
        ReferenceDataset {
            points: self.points.select(Axis(0), indices),
            fields: self.fields.select(Axis(0), indices),
            boundary: indices.iter().map(|&i| self.boundary[i]).collect(),
            ..self.clone()
        }
    }

    /// Column of field `name`.
    pub fn field(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.dimension.field_index(name)?;
        Some(self.fields.column(j).to_vec())
    }

    /// Appends a constant `mu` input column.
    pub fn with_mu(&self, mu: f64) -> ReferenceDataset {
        assert!(!self.surrogate, "dataset already carries mu");
        let col = Array2::from_elem((self.len(), 1), mu);
        ReferenceDataset {
            points: concatenate![Axis(1), self.points, col],
            surrogate: true,
            ..self.clone()
        }
    }

    /// Stacks datasets row-wise. Geometries are merged to their bounding box.
    pub fn concat(parts: &[ReferenceDataset]) -> Result<ReferenceDataset, DataError> {
        let first = parts
            .first()
            .ok_or_else(|| DataError::Incompatible("nothing to concatenate".into()))?;
        if parts.iter().any(|p| p.schema() != first.schema()) {
            return Err(DataError::Incompatible("schemas differ".into()));
        }
        let points: Vec<_> = parts.iter().map(|p| p.points.view()).collect();
        let fields: Vec<_> = parts.iter().map(|p| p.fields.view()).collect();
        let mut geometry = first.geometry.clone();
        for p in &parts[1..] {
            for a in 0..geometry.n_axes() {
                geometry.lo[a] = geometry.lo[a].min(p.geometry.lo[a]);
                geometry.hi[a] = geometry.hi[a].max(p.geometry.hi[a]);
            }
        }
        let hint = parts
            .iter()
            .filter_map(|p| p.material_hint)
            .reduce(|a, b| MaterialParams {
                lambda: a.lambda.max(b.lambda),
                mu: a.mu.max(b.mu),
                rho: a.rho.max(b.rho),
            });
        Ok(ReferenceDataset {
            dimension: first.dimension,
            surrogate: first.surrogate,
            points: concatenate(Axis(0), &points).expect("same column count"),
            fields: concatenate(Axis(0), &fields).expect("same column count"),
            geometry,
            boundary: parts.iter().flat_map(|p| p.boundary.iter().copied()).collect(),
            provenance: first.provenance.clone(),
            material_hint: hint,
        })
    }
}

/// Boundary tolerance relative to the largest coordinate.
const BOUNDARY_TOL: f64 = 1e-9;

pub fn load_csv(path: impl AsRef<Path>, schema: Schema) -> Result<ReferenceDataset, DataError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    read_csv(file, schema, Provenance::Imported(path.display().to_string()))
}

pub fn read_csv(reader: impl Read, schema: Schema, provenance: Provenance) -> Result<ReferenceDataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(DataError::Empty);
    }
    let columns = schema.columns();
    let index: Vec<usize> = columns
        .iter()
        .map(|&c| {
            headers
                .iter()
                .position(|h| h == c)
                .ok_or_else(|| DataError::MissingColumn(c.to_string()))
        })
        .collect::<Result<_, _>>()?;

    let mut values = Vec::new();
    let mut rows = 0;
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        for (&j, &name) in index.iter().zip(&columns) {
            let cell = record.get(j).unwrap_or("");
            let v: f64 = cell.parse().map_err(|_| DataError::NonNumeric {
                line,
                column: name.to_string(),
                value: cell.to_string(),
            })?;
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(DataError::Empty);
    }
    let all = Array2::from_shape_vec((rows, columns.len()), values).expect("row-major table");
    let n_pts = schema.point_columns().len();
    let points = all.slice(s![.., ..n_pts]).to_owned();
    let fields = all.slice(s![.., n_pts..]).to_owned();

    let n_space = schema.dimension.n_space();
    let mut lo = vec![f64::INFINITY; n_space];
    let mut hi = vec![f64::NEG_INFINITY; n_space];
    for row in points.rows() {
        for a in 0..n_space {
            lo[a] = lo[a].min(row[a]);
            hi[a] = hi[a].max(row[a]);
        }
    }
    let geometry = Geometry { lo, hi };
    let tol = BOUNDARY_TOL * geometry.extent();
    let boundary = points
        .rows()
        .into_iter()
        .map(|r| geometry.on_boundary(&r.as_slice().unwrap()[..n_space], tol))
        .collect();
    Ok(ReferenceDataset {
        dimension: schema.dimension,
        surrogate: schema.surrogate,
        points,
        fields,
        geometry,
        boundary,
        provenance,
        material_hint: None,
    })
}

pub fn write_csv(path: impl AsRef<Path>, ds: &ReferenceDataset) -> Result<(), DataError> {
    let file = std::fs::File::create(path)?;
    write_csv_to(std::io::BufWriter::new(file), ds)
}

/// Values are written in shortest round-trip form.
pub fn write_csv_to(writer: impl Write, ds: &ReferenceDataset) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(ds.schema().columns())?;
    let mut row = Vec::new();
    for (p, f) in ds.points.rows().into_iter().zip(ds.fields.rows()) {
        row.clear();
        row.extend(p.iter().chain(f.iter()).map(|x| format!("{x:?}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WaveKind {
    /// Longitudinal: displacement along the propagation axis.
    P,
    /// Transverse: displacement along a perpendicular axis.
    S,
}

/// Exact traveling plane wave of the homogeneous elastodynamic equations:
/// `u = A p sin(s k x_a - omega t + phase)` with `omega = k c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneWaveSpec {
    pub kind: WaveKind,
    /// mm
    pub amplitude: f64,
    /// 1/mm
    pub wavenumber: f64,
    /// Propagation axis.
    pub axis: usize,
    /// Displacement axis (equals `axis` for P waves).
    pub polarization: usize,
    /// Propagates toward negative `axis`.
    pub backward: bool,
    /// rad
    pub phase: f64,
    pub material: MaterialParams,
    /// mm/s, derived from the kind and material.
    pub speed: f64,
}

impl PlaneWaveSpec {
    pub fn p(material: MaterialParams, amplitude: f64, wavenumber: f64, axis: usize) -> Result<Self, DataError> {
        Self::new(WaveKind::P, material, amplitude, wavenumber, axis, axis)
    }

    pub fn s(
        material: MaterialParams,
        amplitude: f64,
        wavenumber: f64,
        axis: usize,
        polarization: usize,
    ) -> Result<Self, DataError> {
        Self::new(WaveKind::S, material, amplitude, wavenumber, axis, polarization)
    }

    pub fn new(
        kind: WaveKind,
        material: MaterialParams,
        amplitude: f64,
        wavenumber: f64,
        axis: usize,
        polarization: usize,
    ) -> Result<Self, DataError> {
        material.validate().map_err(|e| DataError::InvalidWave(e.to_string()))?;
        if !(wavenumber > 0.0 && wavenumber.is_finite()) {
            return Err(DataError::InvalidWave("wavenumber must be positive".into()));
        }
        if !amplitude.is_finite() {
            return Err(DataError::InvalidWave("amplitude must be finite".into()));
        }
        if axis > 2 || polarization > 2 {
            return Err(DataError::InvalidWave("axes must be 0, 1 or 2".into()));
        }
        let speed = match kind {
            WaveKind::P if polarization != axis => {
                return Err(DataError::InvalidWave("P wave polarization must equal its axis".into()))
            }
            WaveKind::S if polarization == axis => {
                return Err(DataError::InvalidWave(
                    "S wave polarization must differ from its axis".into(),
                ))
            }
            WaveKind::P => (material.p_modulus() / material.rho).sqrt(),
            WaveKind::S => (material.mu / material.rho).sqrt(),
        };
        Ok(PlaneWaveSpec {
            kind,
            amplitude,
            wavenumber,
            axis,
            polarization,
            backward: false,
            phase: 0.0,
            material,
            speed,
        })
    }

    pub fn reversed(mut self) -> Self {
        self.backward = !self.backward;
        self
    }

    pub fn with_phase(mut self, phase: f64) -> Self {
        self.phase = phase;
        self
    }

    pub fn angular_frequency(&self) -> f64 {
        self.wavenumber * self.speed
    }

    fn sign(&self) -> f64 {
        if self.backward {
            -1.0
        } else {
            1.0
        }
    }

    fn add_to(&self, x: &[f64; 3], t: f64, out: &mut WaveSample) {
        let (a, p) = (self.axis, self.polarization);
        let k = self.wavenumber;
        let s = self.sign();
        let w = self.angular_frequency();
        let theta = s * k * x[a] - w * t + self.phase;
        let (sin, cos) = theta.sin_cos();
        let amp = self.amplitude;
        let MaterialParams { lambda, mu, .. } = self.material;

        out.u[p] += amp * sin;
        out.grad_u[p][a] += amp * s * k * cos;
        out.accel[p] -= amp * w * w * sin;
        // sigma_ij = Sigma_ij cos(theta)
        let delta = |i: usize, j: usize| if i == j { 1.0 } else { 0.0 };
        for i in 0..3 {
            for j in 0..3 {
                let big = amp
                    * s
                    * k
                    * (lambda * delta(p, a) * delta(i, j)
                        + mu * (delta(i, p) * delta(j, a) + delta(j, p) * delta(i, a)));
                out.stress[i][j] += big * cos;
                out.grad_stress[i][j][a] -= big * s * k * sin;
            }
        }
    }
}

/// Superposed wave state at one space-time point (3D components).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WaveSample {
    pub u: [f64; 3],
    /// `grad_u[i][j] = du_i/dx_j`
    pub grad_u: [[f64; 3]; 3],
    pub accel: [f64; 3],
    pub stress: [[f64; 3]; 3],
    /// `grad_stress[i][j][m] = d sigma_ij / dx_m`
    pub grad_stress: [[[f64; 3]; 3]; 3],
}

impl WaveSample {
    /// Field values in layout order.
    pub fn fields(&self, dim: Dimension) -> Vec<f64> {
        self.map_fields(dim, |i| self.u[i], |i, j| self.stress[i][j])
    }

    fn map_fields(
        &self,
        dim: Dimension,
        disp: impl Fn(usize) -> f64,
        stress: impl Fn(usize, usize) -> f64,
    ) -> Vec<f64> {
        let n = dim.n_space();
        let mut out = vec![0.0; dim.n_fields()];
        for (i, slot) in out.iter_mut().enumerate().take(n) {
            *slot = disp(i);
        }
        for i in 0..n {
            for j in i..n {
                out[dim.stress_index(i, j)] = stress(i, j);
            }
        }
        out
    }
}

/// Superposition of plane waves sharing one material.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveField {
    pub waves: Vec<PlaneWaveSpec>,
}

impl WaveField {
    pub fn new(waves: Vec<PlaneWaveSpec>) -> Result<Self, DataError> {
        let first = waves.first().ok_or_else(|| DataError::InvalidWave("no waves".into()))?;
        if waves.iter().any(|w| w.material != first.material) {
            return Err(DataError::InvalidWave("superposed waves must share a material".into()));
        }
        Ok(WaveField { waves })
    }

    pub fn material(&self) -> MaterialParams {
        self.waves[0].material
    }

    fn check_dimension(&self, dim: Dimension) -> Result<(), DataError> {
        let n = dim.n_space();
        if self.waves.iter().any(|w| w.axis >= n || w.polarization >= n) {
            return Err(DataError::InvalidWave(format!(
                "wave axes must lie within the {dim} coordinate axes"
            )));
        }
        Ok(())
    }

    /// `x` holds the spatial coordinates (missing axes are zero).
    pub fn sample(&self, x: &[f64], t: f64) -> WaveSample {
        let mut p = [0.0; 3];
        p[..x.len()].copy_from_slice(x);
        let mut out = WaveSample::default();
        for w in &self.waves {
            w.add_to(&p, t, &mut out);
        }
        out
    }

    /// Scaled values and derivatives at a physical point.
    pub fn jets(&self, dim: Dimension, x: &[f64], t: f64, scales: &ScaleSet) -> FieldJets<f64> {
        let smp = self.sample(x, t);
        let n = dim.n_space();
        let c = &scales.fields;
        let values = smp.fields(dim).iter().zip(c).map(|(v, c)| v / c).collect();
        let gradient = (0..n)
            .map(|m| {
                smp.map_fields(dim, |i| smp.grad_u[i][m], |i, j| smp.grad_stress[i][j][m])
                    .iter()
                    .zip(c)
                    .map(|(v, c)| v * scales.length / c)
                    .collect()
            })
            .collect();
        let accel = (0..n)
            .map(|i| smp.accel[i] * scales.time * scales.time / c[i])
            .collect();
        FieldJets {
            values,
            gradient,
            accel,
        }
    }
}

/// Regular space-time sampling grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeGrid {
    pub geometry: Geometry,
    /// Nodes per spatial axis (each at least 2).
    pub nodes: Vec<usize>,
    pub times: Vec<f64>,
}

impl SpaceTimeGrid {
    pub fn new(geometry: Geometry, nodes: Vec<usize>, times: Vec<f64>) -> Result<Self, DataError> {
        if nodes.len() != geometry.n_axes() || nodes.iter().any(|&n| n < 2) {
            return Err(DataError::InvalidGeometry("need at least 2 nodes on every axis".into()));
        }
        if times.is_empty() {
            return Err(DataError::InvalidGeometry("no time instants".into()));
        }
        Ok(SpaceTimeGrid { geometry, nodes, times })
    }

    /// `n` equally spaced instants over `[t0, t1]`.
    pub fn linspace(t0: f64, t1: f64, n: usize) -> Vec<f64> {
        match n {
            0 => vec![],
            1 => vec![t0],
            _ => (0..n).map(|i| t0 + (t1 - t0) * i as f64 / (n - 1) as f64).collect(),
        }
    }

    /// Spatial nodes with x varying fastest.
    pub fn space_nodes(&self) -> Vec<Vec<f64>> {
        let g = &self.geometry;
        let total: usize = self.nodes.iter().product();
        (0..total)
            .map(|mut idx| {
                self.nodes
                    .iter()
                    .enumerate()
                    .map(|(a, &n)| {
                        let i = idx % n;
                        idx /= n;
                        g.lo[a] + (g.hi[a] - g.lo[a]) * i as f64 / (n - 1) as f64
                    })
                    .collect()
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.iter().product::<usize>() * self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows `(x, y, [z], t)`, time-major.
    pub fn points(&self) -> Array2<f64> {
        let space = self.space_nodes();
        let n_cols = self.geometry.n_axes() + 1;
        let mut out = Vec::with_capacity(self.len() * n_cols);
        for &t in &self.times {
            for x in &space {
                out.extend_from_slice(x);
                out.push(t);
            }
        }
        Array2::from_shape_vec((self.len(), n_cols), out).expect("grid shape")
    }
}

/// Samples the exact field on every grid node and instant.
pub fn manufactured(field: &WaveField, dim: Dimension, grid: &SpaceTimeGrid) -> Result<ReferenceDataset, DataError> {
    field.check_dimension(dim)?;
    if grid.geometry.n_axes() != dim.n_space() {
        return Err(DataError::InvalidGeometry(format!(
            "{dim} data needs {} axes",
            dim.n_space()
        )));
    }
    let points = grid.points();
    let n_space = dim.n_space();
    let tol = BOUNDARY_TOL * grid.geometry.extent();
    let mut fields = Array2::zeros((points.nrows(), dim.n_fields()));
    let mut boundary = Vec::with_capacity(points.nrows());
    for (row, mut out) in points.rows().into_iter().zip(fields.rows_mut()) {
        let x = &row.as_slice().unwrap()[..n_space];
        let smp = field.sample(x, row[n_space]);
        for (o, v) in out.iter_mut().zip(smp.fields(dim)) {
            *o = v;
        }
        boundary.push(grid.geometry.on_boundary(x, tol));
    }
    Ok(ReferenceDataset {
        dimension: dim,
        surrogate: false,
        points,
        fields,
        geometry: grid.geometry.clone(),
        boundary,
        provenance: Provenance::Manufactured,
        material_hint: Some(field.material()),
    })
}

fn subsample_where(
    ds: &ReferenceDataset,
    keep: impl Fn(bool) -> bool,
    fraction: f64,
    seed: u64,
) -> Result<ReferenceDataset, DataError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::Fraction(fraction));
    }
    let candidates: Vec<usize> = (0..ds.len()).filter(|&i| keep(ds.boundary[i])).collect();
    let k = (fraction * candidates.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = rand::seq::index::sample(&mut rng, candidates.len(), k)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    chosen.sort_unstable();
    Ok(ds.select(&chosen))
}

/// Uniform random subset of `round(fraction * N_boundary)` boundary points.
pub fn subsample_boundary(ds: &ReferenceDataset, fraction: f64, seed: u64) -> Result<ReferenceDataset, DataError> {
    if ds.boundary_count() == 0 {
        return Err(DataError::NoBoundary);
    }
    subsample_where(ds, |b| b, fraction, seed)
}

/// Uniform random subset of `round(fraction * N_interior)` interior points.
pub fn subsample_interior(ds: &ReferenceDataset, fraction: f64, seed: u64) -> Result<ReferenceDataset, DataError> {
    subsample_where(ds, |b| !b, fraction, seed)
}

/// Root-mean-square error normalized by the range of `reference`.
pub fn nrmse(pred: &[f64], reference: &[f64]) -> Result<f64, DataError> {
    if pred.len() != reference.len() || pred.len() < 2 {
        return Err(DataError::Length {
            pred: pred.len(),
            reference: reference.len(),
        });
    }
    let (lo, hi) = reference
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    let range = hi - lo;
    if !(range > 0.0) {
        return Err(DataError::ZeroRange);
    }
    let mse = pred.iter().zip(reference).map(|(p, r)| (p - r) * (p - r)).sum::<f64>() / pred.len() as f64;
    Ok(mse.sqrt() / range)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn material() -> MaterialParams {
        MaterialParams::new(0.533334, 0.1, 0.92e-6).unwrap()
    }

    #[test]
    fn p_wave_at_origin() {
        let m = material();
        let (a, k) = (0.3, 0.05);
        let w = WaveField::new(vec![PlaneWaveSpec::p(m, a, k, 0).unwrap()]).unwrap();
        let f = w.sample(&[0.0, 0.0], 0.0).fields(Dimension::Plane);
        assert_eq!(f[0], 0.0);
        assert!((f[2] - m.p_modulus() * a * k).abs() < 1e-15);
        assert!((f[3] - m.lambda * a * k).abs() < 1e-15);
        assert_eq!(f[4], 0.0);
    }

    #[test]
    fn s_wave_speed() {
        let m = material();
        let w = PlaneWaveSpec::s(m, 1.0, 0.03, 0, 1).unwrap();
        assert_eq!(w.speed, (0.1f64 / 0.92e-6).sqrt());
    }

    #[test]
    fn wave_polarization_validated() {
        let m = material();
        assert!(PlaneWaveSpec::new(WaveKind::S, m, 1.0, 0.1, 0, 0).is_err());
        assert!(PlaneWaveSpec::new(WaveKind::P, m, 1.0, 0.1, 0, 1).is_err());
        assert!(PlaneWaveSpec::p(m, 1.0, -0.1, 0).is_err());
    }

    #[test]
    fn nrmse_examples() {
        assert_eq!(nrmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((nrmse(&[1.0, 2.0], &[0.0, 2.0]).unwrap() - 0.5f64.sqrt() / 2.0).abs() < 1e-15);
        assert!(matches!(nrmse(&[1.0, 2.0], &[3.0, 3.0]), Err(DataError::ZeroRange)));
        assert!(matches!(nrmse(&[1.0], &[3.0]), Err(DataError::Length { .. })));
    }

    #[test]
    fn nrmse_scale_equivariance() {
        let p = [0.3, -1.2, 2.5, 0.7];
        let r = [0.1, -1.0, 2.9, 0.5];
        let a = nrmse(&p, &r).unwrap();
        let b = nrmse(&p.map(|x| 7.0 * x), &r.map(|x| 7.0 * x)).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn grid_boundary_count() {
        let g = SpaceTimeGrid::new(Geometry::beam(Dimension::Plane), vec![51, 11], vec![0.0, 1.0]).unwrap();
        let field = WaveField::new(vec![PlaneWaveSpec::p(material(), 1.0, 0.03, 0).unwrap()]).unwrap();
        let ds = manufactured(&field, Dimension::Plane, &g).unwrap();
        assert_eq!(ds.len(), 51 * 11 * 2);
        assert_eq!(ds.boundary_count(), (2 * 51 + 2 * 9) * 2);
    }

    #[test]
    fn boundary_fraction_size() {
        let g = SpaceTimeGrid::new(Geometry::beam(Dimension::Plane), vec![11, 3], vec![0.0]).unwrap();
        let field = WaveField::new(vec![PlaneWaveSpec::p(material(), 1.0, 0.03, 0).unwrap()]).unwrap();
        let ds = manufactured(&field, Dimension::Plane, &g).unwrap();
        let nb = ds.boundary_count();
        let all = subsample_boundary(&ds, 1.0, 3).unwrap();
        assert_eq!(all.len(), nb);
        assert!(all.boundary.iter().all(|&b| b));
        let a = subsample_boundary(&ds, 0.3, 9).unwrap();
        let b = subsample_boundary(&ds, 0.3, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), (0.3 * nb as f64).round() as usize);
        assert!(matches!(subsample_boundary(&ds, 0.0, 1), Err(DataError::Fraction(_))));
    }

    #[test]
    fn csv_missing_column_named() {
        let text = "x,y,t,u_x,u_y,s_xx,s_yy\n0,0,0,1,2,3,4\n";
        let err = read_csv(text.as_bytes(), Schema::PLANE, Provenance::Manufactured).unwrap_err();
        assert!(matches!(err, DataError::MissingColumn(ref c) if c == "s_xy"), "{err}");
    }

    #[test]
    fn csv_non_numeric_reports_line() {
        let text = "x,y,t,u_x,u_y,s_xx,s_yy,s_xy\n0,0,0,1,2,3,4,5\n1,0,0,1,oops,3,4,5\n";
        let err = read_csv(text.as_bytes(), Schema::PLANE, Provenance::Manufactured).unwrap_err();
        match err {
            DataError::NonNumeric { line, column, .. } => {
                assert_eq!(line, 3);
                assert_eq!(column, "u_y");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn csv_empty_file() {
        assert!(matches!(
            read_csv("".as_bytes(), Schema::PLANE, Provenance::Manufactured),
            Err(DataError::Empty)
        ));
        assert!(matches!(
            read_csv(
                "x,y,t,u_x,u_y,s_xx,s_yy,s_xy\n".as_bytes(),
                Schema::PLANE,
                Provenance::Manufactured
            ),
            Err(DataError::Empty)
        ));
    }

    #[test]
    fn csv_three_rows() {
        let text = "x,y,t,u_x,u_y,s_xx,s_yy,s_xy\n\
                    0,0,0,1,2,3,4,5\n\
                    1,0.5,0,1,2,3,4,5\n\
                    2,1,0.1,1,2,3,4,5\n";
        let ds = read_csv(text.as_bytes(), Schema::PLANE, Provenance::Manufactured).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.boundary, vec![true, false, true]);
    }
}
