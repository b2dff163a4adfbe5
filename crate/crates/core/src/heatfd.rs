//! Steady-state heat conduction on rasterized plates.
//!
//! The steady limit of `ρC ∂T/∂t = ∇·(k∇T)` is the Laplace problem
//! `∇·(k∇T) = 0`, discretized with the 5-point stencil on interior solid
//! pixels. The outer pixel ring is held at `t_outer`, hole pixels at
//! `t_hole`. `ρ` and `C` are carried in the config but never enter the
//! assembled system.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geomgen::{self, DatasetManifest, FailedSample, FieldSet, GeometryRaster, Split};
use crate::hash::sha256_hex;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("invalid thermal config: {0}")]
    InvalidConfig(String),
    #[error("singular system: no interior unknowns")]
    SingularSystem,
    #[error("matrix not positive definite at row {0}")]
    NotPositiveDefinite(usize),
    #[error("no convergence after {iterations} iterations (relative residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("malformed field file: {0}")]
    Format(String),
    #[error("manifest has no solved fields")]
    MissingFields,
    #[error(transparent)]
    Geometry(#[from] geomgen::GeomError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetField {
    Temperature,
    GradientMagnitude,
}

impl TargetField {
    pub fn code(self) -> u8 {
        match self {
            TargetField::Temperature => 0,
            TargetField::GradientMagnitude => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(TargetField::Temperature),
            1 => Some(TargetField::GradientMagnitude),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    /// Direct up to [`DIRECT_LIMIT`] unknowns, conjugate gradient above.
    Auto,
    Direct,
    ConjugateGradient,
}

/// Largest system solved directly by [`SolverKind::Auto`] (128×128 grid).
pub const DIRECT_LIMIT: usize = 128 * 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThermalConfig {
    pub t_outer: f64,
    pub t_hole: f64,
    /// Conductivity, W/(m·K).
    pub conductivity: f64,
    /// Density, kg/m³.
    pub density: f64,
    /// Heat capacity, J/(kg·K).
    pub heat_capacity: f64,
    /// Plate side, meters.
    pub plate_extent: f64,
    pub target_field: TargetField,
    pub solver: SolverKind,
    /// Relative residual target for the iterative path.
    pub tol: f64,
    pub max_iterations: usize,
}

impl Default for ThermalConfig {
    fn default() -> Self {
        ThermalConfig {
            t_outer: 100.0,
            t_hole: 0.0,
            conductivity: 237.0,
            density: 2700.0,
            heat_capacity: 900.0,
            plate_extent: 4.0,
            target_field: TargetField::GradientMagnitude,
            solver: SolverKind::Auto,
            tol: 1e-7,
            max_iterations: 20_000,
        }
    }
}

impl ThermalConfig {
    /// Outer edges held at 20 °C instead of 100 °C, holes at 0 °C.
    pub fn paper_alt() -> Self {
        ThermalConfig { t_outer: 20.0, ..Default::default() }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "default" => Some(Self::default()),
            "paper-alt" => Some(Self::paper_alt()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), SolveError> {
        if self.t_outer == self.t_hole {
            return Err(SolveError::InvalidConfig("t_outer equals t_hole; the field would be constant".into()));
        }
        if !(self.conductivity > 0.0) {
            return Err(SolveError::InvalidConfig("conductivity must be positive".into()));
        }
        if !(self.plate_extent > 0.0) || !(self.tol > 0.0) {
            return Err(SolveError::InvalidConfig("plate_extent and tol must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelClass {
    /// Solid pixel with an unknown temperature.
    Interior,
    /// Outer ring, Dirichlet.
    Boundary,
    /// Cooling hole, Dirichlet.
    Hole,
}

/// Classify every pixel of a raster.
pub fn classify(raster: &GeometryRaster) -> Vec<PixelClass> {
    let (m, n) = raster.dims();
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            out.push(if i == 0 || j == 0 || i == m - 1 || j == n - 1 {
                PixelClass::Boundary
            } else if raster.is_hole(i, j) {
                PixelClass::Hole
            } else {
                PixelClass::Interior
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrid {
    pub m: usize,
    pub n: usize,
    pub values: Vec<f64>,
    pub mask: Vec<PixelClass>,
}

impl FieldGrid {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    /// Values on interior pixels, row-major.
    pub fn interior_values(&self) -> Vec<f64> {
        self.values.iter().zip(&self.mask).filter(|(_, c)| **c == PixelClass::Interior).map(|(v, _)| *v).collect()
    }

    pub fn interior_indices(&self) -> Vec<usize> {
        self.mask.iter().enumerate().filter(|(_, c)| **c == PixelClass::Interior).map(|(i, _)| i).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub unknowns: usize,
    pub method: String,
    /// Half-bandwidth for the direct path, CG iterations otherwise.
    pub bandwidth_or_iterations: usize,
    /// `‖A·T − b‖∞ / ‖b‖∞` (0 when `b = 0`).
    pub relative_residual: f64,
    pub wall_seconds: f64,
}

/// Symmetric 5-point operator on the interior unknowns, unknowns numbered
/// row-major.
struct LaplaceSystem {
    /// Pixel index → unknown index.
    unknown_of: Vec<Option<usize>>,
    /// Unknown index → pixel index.
    pixel_of: Vec<usize>,
    diag: Vec<f64>,
    /// Off-diagonal couplings `(u, v, weight)` with `u > v`, `A[u][v] = -weight`.
    lower: Vec<(usize, usize, f64)>,
    rhs: Vec<f64>,
}

impl LaplaceSystem {
    /// `dirichlet[p]` gives the imposed value on non-interior pixels.
    /// Values are shifted by `reference` so a uniform boundary gives `b = 0`.
    fn assemble(m: usize, n: usize, mask: &[PixelClass], dirichlet: &[f64], cx: f64, cy: f64, reference: f64) -> Self {
        let mut unknown_of = vec![None; m * n];
        let mut pixel_of = Vec::new();
        for (p, c) in mask.iter().enumerate() {
            if *c == PixelClass::Interior {
                unknown_of[p] = Some(pixel_of.len());
                pixel_of.push(p);
            }
        }
        let nu = pixel_of.len();
        let mut diag = vec![0.0; nu];
        let mut rhs = vec![0.0; nu];
        let mut lower = Vec::with_capacity(2 * nu);
        for (u, &p) in pixel_of.iter().enumerate() {
            let (i, j) = (p / n, p % n);
            let nbrs = [(i - 1, j, cy), (i + 1, j, cy), (i, j - 1, cx), (i, j + 1, cx)];
            for (a, b, c) in nbrs {
                let q = a * n + b;
                diag[u] += c;
                match unknown_of[q] {
                    Some(v) if v < u => lower.push((u, v, c)),
                    Some(_) => {}
                    None => rhs[u] += c * (dirichlet[q] - reference),
                }
            }
        }
        LaplaceSystem { unknown_of, pixel_of, diag, lower, rhs }
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (o, (d, v)) in out.iter_mut().zip(self.diag.iter().zip(x)) {
            *o = d * v;
        }
        for &(u, v, c) in &self.lower {
            out[u] -= c * x[v];
            out[v] -= c * x[u];
        }
    }

    fn relative_residual(&self, x: &[f64]) -> f64 {
        let mut ax = vec![0.0; x.len()];
        self.apply(x, &mut ax);
        let res = ax.iter().zip(&self.rhs).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let bn = self.rhs.iter().fold(0.0f64, |m, b| m.max(b.abs()));
        if bn == 0.0 {
            res
        } else {
            res / bn
        }
    }

    fn half_bandwidth(&self) -> usize {
        self.lower.iter().map(|(u, v, _)| u - v).max().unwrap_or(0)
    }

    /// Banded Cholesky `A = L Lᵀ`.
    fn solve_direct(&self) -> Result<(Vec<f64>, usize), SolveError> {
        let nu = self.diag.len();
        let bw = self.half_bandwidth();
        let w = bw + 1;
        // band[i*w + d] = A[i][i-d]
        let mut band = vec![0.0; nu * w];
        for (i, d) in self.diag.iter().enumerate() {
            band[i * w] = *d;
        }
        for &(u, v, c) in &self.lower {
            band[u * w + (u - v)] = -c;
        }
        for i in 0..nu {
            let lo = i.saturating_sub(bw);
            for j in lo..=i {
                let klo = lo.max(j.saturating_sub(bw));
                let mut sum = band[i * w + (i - j)];
                for k in klo..j {
                    sum -= band[i * w + (i - k)] * band[j * w + (j - k)];
                }
                if i == j {
                    if !(sum > 0.0) {
                        return Err(SolveError::NotPositiveDefinite(i));
                    }
                    band[i * w] = sum.sqrt();
                } else {
                    band[i * w + (i - j)] = sum / band[j * w];
                }
            }
        }
        let mut y = self.rhs.clone();
        for i in 0..nu {
            let lo = i.saturating_sub(bw);
            let mut s = y[i];
            for k in lo..i {
                s -= band[i * w + (i - k)] * y[k];
            }
            y[i] = s / band[i * w];
        }
        for i in (0..nu).rev() {
            let hi = (i + bw).min(nu - 1);
            let mut s = y[i];
            for k in i + 1..=hi {
                s -= band[k * w + (k - i)] * y[k];
            }
            y[i] = s / band[i * w];
        }
        Ok((y, bw))
    }

    /// Jacobi-preconditioned conjugate gradient.
    fn solve_cg(&self, tol: f64, max_iter: usize) -> Result<(Vec<f64>, usize), SolveError> {
        let nu = self.diag.len();
        let mut x = vec![0.0; nu];
        let mut r = self.rhs.clone();
        let bn = r.iter().fold(0.0f64, |m, b| m.max(b.abs()));
        if bn == 0.0 {
            return Ok((x, 0));
        }
        let mut z: Vec<f64> = r.iter().zip(&self.diag).map(|(r, d)| r / d).collect();
        let mut p = z.clone();
        let mut ap = vec![0.0; nu];
        let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        for it in 1..=max_iter {
            self.apply(&p, &mut ap);
            let alpha = rz / p.iter().zip(&ap).map(|(a, b)| a * b).sum::<f64>();
            for k in 0..nu {
                x[k] += alpha * p[k];
                r[k] -= alpha * ap[k];
            }
            if r.iter().fold(0.0f64, |m, v| m.max(v.abs())) / bn <= tol * 0.5 {
                // Recurrence residual drifts from the true one; confirm.
                if self.relative_residual(&x) <= tol {
                    return Ok((x, it));
                }
            }
            for k in 0..nu {
                z[k] = r[k] / self.diag[k];
            }
            let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
            let beta = rz_new / rz;
            rz = rz_new;
            for k in 0..nu {
                p[k] = z[k] + beta * p[k];
            }
        }
        Err(SolveError::NoConvergence { iterations: max_iter, residual: self.relative_residual(&x) })
    }
}

/// Solve the Laplace problem with arbitrary Dirichlet data on the
/// non-interior pixels. `spacing = (hx, hy)` in meters.
pub fn solve_dirichlet(
    m: usize,
    n: usize,
    mask: &[PixelClass],
    dirichlet: &[f64],
    spacing: (f64, f64),
    config: &ThermalConfig,
) -> Result<(FieldGrid, SolveReport), SolveError> {
    let start = Instant::now();
    let reference = config.t_outer;
    let k = config.conductivity;
    let sys = LaplaceSystem::assemble(m, n, mask, dirichlet, k / (spacing.0 * spacing.0), k / (spacing.1 * spacing.1), reference);
    let nu = sys.pixel_of.len();
    if nu == 0 {
        return Err(SolveError::SingularSystem);
    }
    let use_direct = match config.solver {
        SolverKind::Direct => true,
        SolverKind::ConjugateGradient => false,
        SolverKind::Auto => nu <= DIRECT_LIMIT,
    };
    let (x, stat, method) = if use_direct {
        let (x, bw) = sys.solve_direct()?;
        (x, bw, "banded_cholesky")
    } else {
        let (x, it) = sys.solve_cg(config.tol, config.max_iterations)?;
        (x, it, "jacobi_pcg")
    };
    let relative_residual = sys.relative_residual(&x);
    let mut values: Vec<f64> = dirichlet.to_vec();
    for (p, c) in mask.iter().enumerate() {
        if let (PixelClass::Interior, Some(u)) = (c, sys.unknown_of[p]) {
            values[p] = reference + x[u];
        }
    }
    let field = FieldGrid { m, n, values, mask: mask.to_vec() };
    let report = SolveReport {
        unknowns: nu,
        method: method.into(),
        bandwidth_or_iterations: stat,
        relative_residual,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((field, report))
}

pub fn grid_spacing(m: usize, n: usize, plate_extent: f64) -> (f64, f64) {
    (plate_extent / (n - 1) as f64, plate_extent / (m - 1) as f64)
}

/// Steady temperature on a plate raster.
pub fn solve_steady(raster: &GeometryRaster, config: &ThermalConfig) -> Result<(FieldGrid, SolveReport), SolveError> {
    config.validate()?;
    let (m, n) = raster.dims();
    let mask = classify(raster);
    let dirichlet: Vec<f64> = mask
        .iter()
        .map(|c| match c {
            PixelClass::Hole => config.t_hole,
            _ => config.t_outer,
        })
        .collect();
    solve_dirichlet(m, n, &mask, &dirichlet, grid_spacing(m, n, config.plate_extent), config)
}

/// `|∇T|` per pixel. Central differences where both axis neighbours are
/// interior; otherwise a one-sided difference toward the Dirichlet
/// neighbour. Hole and ring pixels are 0.
pub fn gradient_field(temperature: &FieldGrid, config: &ThermalConfig) -> FieldGrid {
    let (m, n) = (temperature.m, temperature.n);
    let (hx, hy) = grid_spacing(m, n, config.plate_extent);
    let t = &temperature.values;
    let mask = &temperature.mask;
    let interior = |p: usize| mask[p] == PixelClass::Interior;
    let mut out = vec![0.0; m * n];
    for i in 1..m - 1 {
        for j in 1..n - 1 {
            let p = i * n + j;
            if !interior(p) {
                continue;
            }
            let axis = |lo: usize, hi: usize, h: f64| match (interior(lo), interior(hi)) {
                (true, true) | (false, false) => (t[hi] - t[lo]) / (2.0 * h),
                (true, false) => (t[hi] - t[p]) / h,
                (false, true) => (t[p] - t[lo]) / h,
            };
            let gx = axis(p - 1, p + 1, hx);
            let gy = axis(p - n, p + n, hy);
            out[p] = (gx * gx + gy * gy).sqrt();
        }
    }
    FieldGrid { m, n, values: out, mask: mask.clone() }
}

/// Temperature or gradient-magnitude field for one raster, per `config.target_field`.
pub fn solve_target(raster: &GeometryRaster, config: &ThermalConfig) -> Result<(FieldGrid, SolveReport), SolveError> {
    let (t, report) = solve_steady(raster, config)?;
    Ok(match config.target_field {
        TargetField::Temperature => (t, report),
        TargetField::GradientMagnitude => (gradient_field(&t, config), report),
    })
}

/// Dataset indices with solved fields: the first samples of each split in
/// 80/10/10 proportion.
pub fn select_subset(manifest: &DatasetManifest, subset_count: usize) -> Vec<usize> {
    if subset_count >= manifest.count {
        return (0..manifest.count).collect();
    }
    let (nt, nv, ns) = geomgen::split_sizes(subset_count);
    let mut picked: Vec<usize> = [(Split::Train, nt), (Split::Val, nv), (Split::Test, ns)]
        .iter()
        .flat_map(|(s, k)| manifest.indices(*s).into_iter().take(*k))
        .collect();
    picked.sort_unstable();
    picked
}

const FIELD_MAGIC: &[u8; 4] = b"TFF1";

pub fn encode_field_file(kind: TargetField, m: usize, n: usize, fields: &[Vec<f64>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(17 + fields.len() * m * n * 4);
    out.extend_from_slice(FIELD_MAGIC);
    for v in [fields.len(), m, n] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(kind.code());
    for f in fields {
        assert_eq!(f.len(), m * n);
        for v in f {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

/// Decoded field file: kind, dimensions and per-sample `f32` values widened to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldFile {
    pub kind: TargetField,
    pub m: usize,
    pub n: usize,
    pub fields: Vec<Vec<f64>>,
}

pub fn decode_field_file(bytes: &[u8]) -> Result<FieldFile, SolveError> {
    if bytes.len() < 17 || &bytes[..4] != FIELD_MAGIC {
        return Err(SolveError::Format("bad magic or truncated header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (count, m, n) = (word(0), word(1), word(2));
    let kind = TargetField::from_code(bytes[16]).ok_or_else(|| SolveError::Format(format!("unknown field kind {}", bytes[16])))?;
    let payload = &bytes[17..];
    if payload.len() != count * m * n * 4 {
        return Err(SolveError::Format(format!("expected {} payload bytes, got {}", count * m * n * 4, payload.len())));
    }
    let fields = payload
        .chunks((m * n * 4).max(1))
        .take(count)
        .map(|c| c.chunks(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect())
        .collect();
    Ok(FieldFile { kind, m, n, fields })
}

/// Solve fields for a subset of a dataset, write `<stem>.tff` beside the
/// manifest and attach a [`FieldSet`] to it. Failed samples are recorded
/// (their slot in the file is all zeros) rather than dropped.
pub fn solve_batch(manifest_path: &Path, config: &ThermalConfig, subset_count: usize, stem: &str) -> Result<DatasetManifest, SolveError> {
    config.validate()?;
    let mut manifest = DatasetManifest::load(manifest_path)?;
    let rasters = geomgen::read_geometry_file(&DatasetManifest::resolve(manifest_path, &manifest.geometry_file))?;
    let indices = select_subset(&manifest, subset_count);
    let results: Vec<Result<FieldGrid, SolveError>> = indices.par_iter().map(|&i| solve_target(&rasters[i], config).map(|(f, _)| f)).collect();
    let (m, n) = (manifest.spec.grid_m, manifest.spec.grid_n);
    let mut fields = Vec::with_capacity(indices.len());
    let mut failed = Vec::new();
    for (&i, r) in indices.iter().zip(results) {
        match r {
            Ok(f) => fields.push(f.values),
            Err(e) => {
                failed.push(FailedSample { index: i, error: e.to_string() });
                fields.push(vec![0.0; m * n]);
            }
        }
    }
    let bytes = encode_field_file(config.target_field, m, n, &fields);
    let name = format!("{stem}.tff");
    std::fs::File::create(DatasetManifest::resolve(manifest_path, &name))?.write_all(&bytes)?;
    manifest.field = Some(FieldSet {
        field_file: name,
        thermal: config.clone(),
        subset_count,
        sample_indices: indices,
        failed,
        field_file_sha256: sha256_hex(&bytes),
    });
    manifest.save(manifest_path)?;
    Ok(manifest)
}

/// Geometry + target field pairs of a solved manifest, grouped by split.
#[derive(Debug, Clone)]
pub struct FieldDataset {
    pub kind: TargetField,
    pub samples: Vec<FieldSample>,
}

#[derive(Debug, Clone)]
pub struct FieldSample {
    pub index: usize,
    pub split: Split,
    pub raster: GeometryRaster,
    pub field: FieldGrid,
}

impl FieldDataset {
    pub fn load(manifest_path: &Path) -> Result<(DatasetManifest, Self), SolveError> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let fs = manifest.field.clone().ok_or(SolveError::MissingFields)?;
        let rasters = geomgen::read_geometry_file(&DatasetManifest::resolve(manifest_path, &manifest.geometry_file))?;
        let file = decode_field_file(&std::fs::read(DatasetManifest::resolve(manifest_path, &fs.field_file))?)?;
        if file.fields.len() != fs.sample_indices.len() {
            return Err(SolveError::Format("field count disagrees with manifest".into()));
        }
        let failed: std::collections::HashSet<usize> = fs.failed.iter().map(|f| f.index).collect();
        let samples = fs
            .sample_indices
            .iter()
            .zip(file.fields)
            .filter(|(i, _)| !failed.contains(i))
            .map(|(&i, values)| {
                let raster = rasters[i].clone();
                let mask = classify(&raster);
                FieldSample { index: i, split: manifest.split[i], field: FieldGrid { m: file.m, n: file.n, values, mask }, raster }
            })
            .collect();
        Ok((manifest, FieldDataset { kind: file.kind, samples }))
    }

    pub fn split(&self, split: Split) -> Vec<&FieldSample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }
}
