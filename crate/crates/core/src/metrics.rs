//! Evaluation: pointwise field errors, the structural-consistency test for
//! generated geometries, validity rates of a generative model and the 2×2
//! encoder × head study.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geomgen::{DatasetManifest, GeometryRaster};
use crate::heatfd::{FieldSample, PixelClass, TargetField};
use crate::vrrae::{interpolate, ModelError, Vrrae};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("reference has zero variance; NMSE is undefined")]
    ZeroVariance,
    #[error("reference is identically zero; inf_nrm is undefined")]
    ZeroReference,
    #[error("no points to evaluate")]
    Empty,
    #[error("study cell {0} is missing")]
    MissingCell(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn check_lengths(y_hat: &[f64], y: &[f64]) -> Result<(), MetricError> {
    if y_hat.len() != y.len() {
        return Err(MetricError::LengthMismatch(y_hat.len(), y.len()));
    }
    if y.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

pub fn mse(y_hat: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    check_lengths(y_hat, y)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64)
}

/// `Σ(y−ŷ)² / Σ(y−ȳ)²`.
pub fn nmse(y_hat: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    check_lengths(y_hat, y)?;
    if y.len() < 2 {
        return Err(MetricError::ZeroVariance);
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let den: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if den == 0.0 {
        return Err(MetricError::ZeroVariance);
    }
    let num: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(num / den)
}

/// `‖y−ŷ‖∞ / ‖y‖∞`.
pub fn inf_nrm(y_hat: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    check_lengths(y_hat, y)?;
    let den = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if den == 0.0 {
        return Err(MetricError::ZeroReference);
    }
    Ok(y.iter().zip(y_hat).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / den)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorTriple {
    pub mse: f64,
    pub nmse: f64,
    pub inf_nrm: f64,
}

pub fn errors(y_hat: &[f64], y: &[f64]) -> Result<ErrorTriple, MetricError> {
    Ok(ErrorTriple { mse: mse(y_hat, y)?, nmse: nmse(y_hat, y)?, inf_nrm: inf_nrm(y_hat, y)? })
}

/// Mean and sample standard deviation of per-sample errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mean: ErrorTriple,
    pub std: ErrorTriple,
    pub count: usize,
}

impl ErrorStats {
    pub fn from_samples(per: &[ErrorTriple]) -> Result<Self, MetricError> {
        if per.is_empty() {
            return Err(MetricError::Empty);
        }
        let n = per.len() as f64;
        let stat = |f: fn(&ErrorTriple) -> f64| {
            let mean = per.iter().map(f).sum::<f64>() / n;
            let var = if per.len() > 1 { per.iter().map(|e| (f(e) - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
            (mean, var.sqrt())
        };
        let (a, b, c) = (stat(|e| e.mse), stat(|e| e.nmse), stat(|e| e.inf_nrm));
        Ok(ErrorStats {
            mean: ErrorTriple { mse: a.0, nmse: b.0, inf_nrm: c.0 },
            std: ErrorTriple { mse: a.1, nmse: b.1, inf_nrm: c.1 },
            count: per.len(),
        })
    }
}

/// Training-set hole-area range with a multiplicative tolerance on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRange {
    pub lo: f64,
    pub hi: f64,
    pub tolerance: f64,
}

impl ReferenceRange {
    pub fn new(lo: f64, hi: f64) -> Self {
        ReferenceRange { lo, hi, tolerance: 0.05 }
    }

    pub fn from_manifest(m: &DatasetManifest) -> Self {
        Self::new(m.train_hole_fraction.0, m.train_hole_fraction.1)
    }

    pub fn contains(&self, area: f64) -> bool {
        area >= self.lo * (1.0 - self.tolerance) && area <= self.hi * (1.0 + self.tolerance)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityReport {
    /// Hole components not touching the outer ring.
    pub figure_count: usize,
    /// Hole components touching the outer ring (reported, not counted).
    pub boundary_defects: usize,
    /// All hole pixels over `m·n`.
    pub area_fraction: f64,
    pub valid: bool,
    pub reference_range: ReferenceRange,
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let p = parent[x as usize];
        parent[x as usize] = parent[p as usize];
        x = p;
    }
    x
}

/// 4-connected hole components as `(figures, boundary_touching)`.
pub fn count_components(raster: &GeometryRaster) -> (usize, usize) {
    let (m, n) = raster.dims();
    let mut parent: Vec<u32> = (0..(m * n) as u32).collect();
    for i in 0..m {
        for j in 0..n {
            if !raster.is_hole(i, j) {
                continue;
            }
            let here = (i * n + j) as u32;
            for (di, dj) in [(1usize, 0usize), (0, 1)] {
                let (a, b) = (i + di, j + dj);
                if a < m && b < n && raster.is_hole(a, b) {
                    let (r1, r2) = (find(&mut parent, here), find(&mut parent, (a * n + b) as u32));
                    if r1 != r2 {
                        parent[r1.max(r2) as usize] = r1.min(r2);
                    }
                }
            }
        }
    }
    let mut roots: BTreeMap<u32, bool> = BTreeMap::new();
    for i in 0..m {
        for j in 0..n {
            if raster.is_hole(i, j) {
                let r = find(&mut parent, (i * n + j) as u32);
                let edge = i == 0 || j == 0 || i + 1 == m || j + 1 == n;
                *roots.entry(r).or_insert(false) |= edge;
            }
        }
    }
    let touching = roots.values().filter(|t| **t).count();
    (roots.len() - touching, touching)
}

pub fn structural_consistency(raster: &GeometryRaster, range: &ReferenceRange) -> ValidityReport {
    let (figure_count, boundary_defects) = count_components(raster);
    let area_fraction = raster.hole_fraction();
    ValidityReport { figure_count, boundary_defects, area_fraction, valid: figure_count == 4 && range.contains(area_fraction), reference_range: *range }
}

/// Binarize a soft output at 0.5 and check it.
pub fn structural_consistency_soft(m: usize, n: usize, soft: &[f64], range: &ReferenceRange) -> ValidityReport {
    structural_consistency(&GeometryRaster::binarize(m, n, soft), range)
}

/// How interpolation parameters are drawn in [`validity_rates`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpMode {
    /// `t ~ U(0, 1)`.
    Uniform,
    /// `t ∈ {0, 1}` with equal probability.
    Endpoints,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidityRates {
    pub interp_rate: f64,
    pub random_rate: f64,
    pub n_pairs: usize,
    pub n_samples: usize,
}

fn valid_fraction(model: &Vrrae<f32>, alphas: &[Vec<f64>], range: &ReferenceRange) -> Result<f64, MetricError> {
    if alphas.is_empty() {
        return Ok(0.0);
    }
    let (m, n) = (model.config.grid_m, model.config.grid_n);
    let mut valid = 0usize;
    for chunk in alphas.chunks(64) {
        let refs: Vec<&[f64]> = chunk.iter().map(|a| a.as_slice()).collect();
        for soft in model.decode_alphas(&refs)? {
            valid += structural_consistency_soft(m, n, &soft, range).valid as usize;
        }
    }
    Ok(valid as f64 / alphas.len() as f64)
}

/// Fraction of valid decodes over `n_pairs` interpolations between random
/// distinct pairs from `pool`, and over `n_samples` prior draws. Pair
/// indices and `t` are drawn before any model call, so two models given
/// equally seeded RNGs see the same pairs.
pub fn validity_rates<R: Rng>(
    model: &Vrrae<f32>,
    pool: &[&GeometryRaster],
    range: &ReferenceRange,
    n_pairs: usize,
    n_samples: usize,
    mode: InterpMode,
    rng: &mut R,
) -> Result<ValidityRates, MetricError> {
    if pool.len() < 2 && n_pairs > 0 {
        return Err(MetricError::Empty);
    }
    let plan: Vec<(usize, usize, f64)> = (0..n_pairs)
        .map(|_| {
            let a = rng.random_range(0..pool.len());
            let mut b = rng.random_range(0..pool.len() - 1);
            if b >= a {
                b += 1;
            }
            let t = match mode {
                InterpMode::Uniform => rng.random::<f64>(),
                InterpMode::Endpoints => f64::from(rng.random::<bool>() as u8),
            };
            (a, b, t)
        })
        .collect();
    let codes = model.project_all(pool, 64)?;
    let interp: Vec<Vec<f64>> = plan.iter().map(|&(a, b, t)| interpolate(&codes[a], &codes[b], t).map(|c| c.alpha)).collect::<Result<_, _>>()?;
    let prior: Vec<Vec<f64>> = model.sample_prior(rng, n_samples)?.into_iter().map(|c| c.alpha).collect();
    Ok(ValidityRates { interp_rate: valid_fraction(model, &interp, range)?, random_rate: valid_fraction(model, &prior, range)?, n_pairs, n_samples })
}

/// Fraction of `rasters` whose eval-mode reconstruction is valid.
pub fn reconstruction_validity_rate(model: &Vrrae<f32>, rasters: &[&GeometryRaster], range: &ReferenceRange) -> Result<f64, MetricError> {
    let codes: Vec<Vec<f64>> = model.project_all(rasters, 64)?.into_iter().map(|c| c.alpha).collect();
    valid_fraction(model, &codes, range)
}

/// Mean reconstruction MSE over `rasters` with the frozen code space.
pub fn reconstruction_mse(model: &Vrrae<f32>, rasters: &[&GeometryRaster]) -> Result<f64, MetricError> {
    if rasters.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut total = 0.0;
    for chunk in rasters.chunks(64) {
        for (soft, r) in model.reconstruct(chunk)?.iter().zip(chunk) {
            total += mse(soft, &r.to_f64())?;
        }
    }
    Ok(total / rasters.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EncoderKind {
    #[serde(rename = "AE")]
    Ae,
    #[serde(rename = "VRRAE")]
    Vrrae,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum HeadKind {
    #[serde(rename = "CNN")]
    Cnn,
    #[serde(rename = "DeepONet")]
    DeepOnet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellId {
    pub encoder: EncoderKind,
    pub head: HeadKind,
}

impl CellId {
    pub const ALL: [CellId; 4] = [
        CellId { encoder: EncoderKind::Ae, head: HeadKind::Cnn },
        CellId { encoder: EncoderKind::Ae, head: HeadKind::DeepOnet },
        CellId { encoder: EncoderKind::Vrrae, head: HeadKind::Cnn },
        CellId { encoder: EncoderKind::Vrrae, head: HeadKind::DeepOnet },
    ];

    pub fn label(&self) -> String {
        let e = match self.encoder {
            EncoderKind::Ae => "AE",
            EncoderKind::Vrrae => "VRRAE",
        };
        let h = match self.head {
            HeadKind::Cnn => "CNN",
            HeadKind::DeepOnet => "DeepONet",
        };
        format!("{e}+{h}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub cell: CellId,
    pub label: String,
    pub per_sample: Vec<ErrorTriple>,
    pub stats: ErrorStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub target: TargetField,
    pub test_count: usize,
    pub cells: Vec<CellReport>,
}

/// Interior-pixel errors of full-grid predictions against sample fields.
pub fn field_errors(predictions: &[Vec<f64>], samples: &[&FieldSample]) -> Result<Vec<ErrorTriple>, MetricError> {
    if predictions.len() != samples.len() {
        return Err(MetricError::LengthMismatch(predictions.len(), samples.len()));
    }
    predictions
        .iter()
        .zip(samples)
        .map(|(p, s)| {
            if p.len() != s.field.values.len() {
                return Err(MetricError::LengthMismatch(p.len(), s.field.values.len()));
            }
            let (yh, y): (Vec<f64>, Vec<f64>) =
                p.iter().zip(&s.field.values).zip(&s.field.mask).filter(|(_, c)| **c == PixelClass::Interior).map(|((a, b), _)| (*a, *b)).unzip();
            errors(&yh, &y)
        })
        .collect()
}

/// Aggregate per-cell predictions over the same test samples.
pub fn run_2x2_study(target: TargetField, predictions: &BTreeMap<CellId, Vec<Vec<f64>>>, samples: &[&FieldSample]) -> Result<StudyReport, MetricError> {
    let mut cells = Vec::with_capacity(4);
    for id in CellId::ALL {
        let preds = predictions.get(&id).ok_or_else(|| MetricError::MissingCell(id.label()))?;
        let per_sample = field_errors(preds, samples)?;
        let stats = ErrorStats::from_samples(&per_sample)?;
        cells.push(CellReport { cell: id, label: id.label(), per_sample, stats });
    }
    Ok(StudyReport { target, test_count: samples.len(), cells })
}

impl StudyReport {
    /// Cell with the lowest mean NMSE.
    pub fn best_cell(&self) -> Option<&CellReport> {
        self.cells.iter().min_by(|a, b| a.stats.mean.nmse.total_cmp(&b.stats.mean.nmse))
    }

    pub fn cell(&self, id: CellId) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.cell == id)
    }

    /// Aligned plaintext table, one row per cell, `mean ± std`.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "target: {:?}, test samples: {}", self.target, self.test_count);
        let _ = writeln!(s, "{:<16} {:>24} {:>24} {:>24}", "Model", "MSE", "NMSE", "inf_nrm");
        for c in &self.cells {
            let pm = |m: f64, d: f64| format!("{m:.3e} ± {d:.2e}");
            let _ = writeln!(
                s,
                "{:<16} {:>24} {:>24} {:>24}",
                c.label,
                pm(c.stats.mean.mse, c.stats.std.mse),
                pm(c.stats.mean.nmse, c.stats.std.nmse),
                pm(c.stats.mean.inf_nrm, c.stats.std.inf_nrm)
            );
        }
        s
    }
}
