//! Wall-clock comparison of the finite-difference solve against the
//! surrogate (encoder projection + cached DeepONet evaluation).

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::deeponet::{CachedDeepOnet, HeadError};
use crate::geomgen::GeometryRaster;
use crate::heatfd::{classify, solve_target, SolveError, ThermalConfig};
use crate::vrrae::{ModelError, Vrrae};

pub const WARMUP: usize = 3;
pub const MIN_SAMPLES: usize = 20;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("bench needs at least one geometry")]
    EmptyBench,
    #[error("grid mismatch: geometry {geometry:?}, models {model:?}")]
    GridMismatch { geometry: (usize, usize), model: (usize, usize) },
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Head(#[from] HeadError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub grid_m: usize,
    pub grid_n: usize,
    pub samples: usize,
    pub warmup: usize,
    /// Which solver the baseline timing refers to.
    pub baseline: String,
    pub solver_s_per_sample: f64,
    pub surrogate_s_per_sample: f64,
    /// One-off trunk-cache build, excluded from the per-sample figure.
    pub trunk_cache_s: f64,
    pub speedup_factor: f64,
    /// True when `samples` meets the minimum for a reportable timing.
    pub meets_sample_minimum: bool,
}

/// Solve and predict each geometry one at a time. The first [`WARMUP`]
/// geometries (cycled if fewer) are run untimed on both paths.
pub fn run_bench(rasters: &[GeometryRaster], thermal: &ThermalConfig, encoder: &Vrrae<f32>, head: &CachedDeepOnet) -> Result<BenchReport, BenchError> {
    let Some(first) = rasters.first() else { return Err(BenchError::EmptyBench) };
    let (m, n) = first.dims();
    let model = (encoder.config.grid_m, encoder.config.grid_n);
    if model != (m, n) || (head.model.config.grid_m, head.model.config.grid_n) != (m, n) || rasters.iter().any(|r| r.dims() != (m, n)) {
        return Err(BenchError::GridMismatch { geometry: (m, n), model });
    }
    let surrogate = |r: &GeometryRaster| -> Result<f64, BenchError> {
        let code = encoder.project(r)?;
        let field = head.model.predict_field(&code.alpha, &head.cache, classify(r))?;
        Ok(field.values[0])
    };
    for r in rasters.iter().cycle().take(WARMUP) {
        solve_target(r, thermal)?;
        surrogate(r)?;
    }
    let t0 = Instant::now();
    for r in rasters {
        std::hint::black_box(solve_target(r, thermal)?);
    }
    let solver = t0.elapsed().as_secs_f64() / rasters.len() as f64;
    let t1 = Instant::now();
    for r in rasters {
        std::hint::black_box(surrogate(r)?);
    }
    let surr = t1.elapsed().as_secs_f64() / rasters.len() as f64;
    let t2 = Instant::now();
    std::hint::black_box(head.model.build_trunk_cache(m, n));
    let cache_s = t2.elapsed().as_secs_f64();
    Ok(BenchReport {
        grid_m: m,
        grid_n: n,
        samples: rasters.len(),
        warmup: WARMUP,
        baseline: "in-house finite-difference solver (not Abaqus)".into(),
        solver_s_per_sample: solver,
        surrogate_s_per_sample: surr,
        trunk_cache_s: cache_s,
        speedup_factor: solver / surr.max(f64::MIN_POSITIVE),
        meets_sample_minimum: rasters.len() >= MIN_SAMPLES,
    })
}
