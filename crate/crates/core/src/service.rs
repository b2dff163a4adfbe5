//! Stateless JSON inference API over a VRRAE + DeepONet pair.
//!
//! [`Service::handle`] maps `(method, path?query, body)` to a status code
//! and response body. It has no transport; the CLI mounts it on HTTP.
//! Responses depend only on the request, so identical bodies give
//! byte-identical answers.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deeponet::{CachedDeepOnet, FieldPredictor, HeadError};
use crate::geomgen::GeometryRaster;
use crate::heatfd::{classify, PixelClass, TargetField};
use crate::metrics::{structural_consistency_soft, ReferenceRange, ValidityReport};
use crate::vrrae::{interpolate, CoeffStats, LatentCode, ModelError, Vrrae};

/// Upper bound on `GET /samples?n=`.
pub const MAX_SAMPLES: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaResponse {
    pub k_star: usize,
    pub grid_m: usize,
    pub grid_n: usize,
    pub basis_id: String,
    pub stats: CoeffStats,
    pub target_field: TargetField,
    pub reference_range: ReferenceRange,
}

#[derive(Debug, Clone, Deserialize)]
pub struct AlphaRequest {
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct InterpolateRequest {
    pub alpha_a: Vec<f64>,
    pub alpha_b: Vec<f64>,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResponse {
    /// Bit-packed raster, row-major, MSB first, rows padded to a byte.
    pub raster: String,
    pub validity: ValidityReport,
    /// Dimensions of alpha outside the training coefficient range.
    pub out_of_range: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    /// Little-endian `f32` grid, `m·n` values, row-major.
    pub field: String,
    /// Range over interior pixels of the decoded geometry.
    pub min: f64,
    pub max: f64,
    pub out_of_range: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolateResponse {
    pub alpha: Vec<f64>,
    pub decode: DecodeResponse,
    pub predict: PredictResponse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    /// Position of the geometry in the service's sample pool.
    pub index: usize,
    pub alpha: Vec<f64>,
    pub raster: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplesResponse {
    pub samples: Vec<SampleEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub status: u16,
    pub body: Vec<u8>,
}

impl Response {
    fn json<T: Serialize>(status: u16, value: &T) -> Self {
        Response { status, body: serde_json::to_vec(value).expect("response serializes") }
    }

    fn error(status: u16, class: &str, message: impl Into<String>) -> Self {
        Self::json(status, &ErrorBody { error: class.into(), message: message.into() })
    }
}

/// Little-endian `f32` bytes of a field, base64-encoded.
pub fn encode_field(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
    B64.encode(bytes)
}

pub fn decode_field(s: &str) -> Option<Vec<f32>> {
    let bytes = B64.decode(s).ok()?;
    (bytes.len() % 4 == 0).then(|| bytes.chunks(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn encode_raster(r: &GeometryRaster) -> String {
    B64.encode(r.pack_bits())
}

pub struct Service {
    vrrae: Vrrae<f32>,
    head: CachedDeepOnet,
    range: ReferenceRange,
    pool: Vec<GeometryRaster>,
    pool_codes: Vec<LatentCode>,
}

#[derive(Debug)]
pub enum BadRequest {
    Malformed(String),
    Model(ModelError),
    Head(HeadError),
}

impl From<ModelError> for BadRequest {
    fn from(e: ModelError) -> Self {
        BadRequest::Model(e)
    }
}

impl From<HeadError> for BadRequest {
    fn from(e: HeadError) -> Self {
        BadRequest::Head(e)
    }
}

impl Service {
    /// `pool` holds the geometries `/samples` draws from (the test split).
    pub fn new(vrrae: Vrrae<f32>, head: CachedDeepOnet, range: ReferenceRange, pool: Vec<GeometryRaster>) -> Result<Self, ModelError> {
        if vrrae.stats.is_none() {
            return Err(ModelError::MissingStats);
        }
        let (m, n) = (vrrae.config.grid_m, vrrae.config.grid_n);
        if head.grid() != (m, n) || head.model.config.k_star != vrrae.config.k_star {
            return Err(ModelError::ShapeMismatch(format!("head grid {:?} / k* {} vs encoder {m}x{n} / k* {}", head.grid(), head.model.config.k_star, vrrae.config.k_star)));
        }
        let refs: Vec<&GeometryRaster> = pool.iter().collect();
        let pool_codes = vrrae.project_all(&refs, 64)?;
        Ok(Service { vrrae, head, range, pool, pool_codes })
    }

    pub fn vrrae(&self) -> &Vrrae<f32> {
        &self.vrrae
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.vrrae.config.grid_m, self.vrrae.config.grid_n)
    }

    pub fn meta(&self) -> MetaResponse {
        MetaResponse {
            k_star: self.vrrae.config.k_star,
            grid_m: self.vrrae.config.grid_m,
            grid_n: self.vrrae.config.grid_n,
            basis_id: self.pool_codes.first().map(|c| c.basis_id.clone()).unwrap_or_else(|| self.vrrae.basis.as_ref().map(|b| b.id.clone()).unwrap_or_default()),
            stats: self.vrrae.stats.clone().expect("checked at construction"),
            target_field: self.head.target(),
            reference_range: self.range,
        }
    }

    fn check_alpha(&self, alpha: &[f64]) -> Result<Vec<usize>, BadRequest> {
        let k = self.vrrae.config.k_star;
        if alpha.len() != k {
            return Err(BadRequest::Malformed(format!("alpha has {} entries, expected {k}", alpha.len())));
        }
        if let Some(i) = alpha.iter().position(|v| !v.is_finite()) {
            return Err(BadRequest::Malformed(format!("alpha[{i}] is not finite")));
        }
        Ok(self.vrrae.stats.as_ref().expect("checked at construction").out_of_range(alpha))
    }

    fn soft_raster(&self, alpha: &[f64]) -> Result<(Vec<f64>, GeometryRaster), BadRequest> {
        let (m, n) = self.grid();
        let soft = self.vrrae.decode_alphas(&[alpha])?.remove(0);
        let raster = GeometryRaster::binarize(m, n, &soft);
        Ok((soft, raster))
    }

    pub fn decode(&self, alpha: &[f64]) -> Result<DecodeResponse, BadRequest> {
        let out_of_range = self.check_alpha(alpha)?;
        let (m, n) = self.grid();
        let (soft, raster) = self.soft_raster(alpha)?;
        Ok(DecodeResponse { raster: encode_raster(&raster), validity: structural_consistency_soft(m, n, &soft, &self.range), out_of_range })
    }

    pub fn predict(&self, alpha: &[f64]) -> Result<PredictResponse, BadRequest> {
        let out_of_range = self.check_alpha(alpha)?;
        let (_, raster) = self.soft_raster(alpha)?;
        let field = self.head.predict_fields(&[alpha])?.remove(0);
        let mask = classify(&raster);
        let interior: Vec<f64> = field.iter().zip(&mask).filter(|(_, c)| **c == PixelClass::Interior).map(|(v, _)| *v).collect();
        let over = if interior.is_empty() { &field } else { &interior };
        let min = over.iter().copied().fold(f64::INFINITY, f64::min);
        let max = over.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(PredictResponse { field: encode_field(&field), min, max, out_of_range })
    }

    pub fn interpolate(&self, req: &InterpolateRequest) -> Result<InterpolateResponse, BadRequest> {
        self.check_alpha(&req.alpha_a)?;
        self.check_alpha(&req.alpha_b)?;
        if !(0.0..=1.0).contains(&req.t) {
            return Err(BadRequest::Malformed(format!("t = {} outside [0, 1]", req.t)));
        }
        let id = self.meta().basis_id;
        let a = LatentCode { alpha: req.alpha_a.clone(), basis_id: id.clone() };
        let b = LatentCode { alpha: req.alpha_b.clone(), basis_id: id };
        let alpha = interpolate(&a, &b, req.t)?.alpha;
        Ok(InterpolateResponse { decode: self.decode(&alpha)?, predict: self.predict(&alpha)?, alpha })
    }

    /// `n` distinct pool geometries chosen by an RNG seeded with `n`.
    pub fn samples(&self, n: usize) -> Result<SamplesResponse, BadRequest> {
        if n == 0 || n > MAX_SAMPLES.min(self.pool.len()) {
            return Err(BadRequest::Malformed(format!("n must be in 1..={}", MAX_SAMPLES.min(self.pool.len()))));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let mut picks = sample(&mut rng, self.pool.len(), n).into_vec();
        picks.sort_unstable();
        Ok(SamplesResponse {
            samples: picks.into_iter().map(|i| SampleEntry { index: i, alpha: self.pool_codes[i].alpha.clone(), raster: encode_raster(&self.pool[i]) }).collect(),
        })
    }

    pub fn handle(&self, method: &str, target: &str, body: &[u8]) -> Response {
        let (path, query) = target.split_once('?').unwrap_or((target, ""));
        let result = match (method, path) {
            ("GET", "/meta") => Ok(Response::json(200, &self.meta())),
            ("GET", "/samples") => {
                let n = query.split('&').find_map(|kv| kv.strip_prefix("n=")).map(|v| v.parse::<usize>());
                match n {
                    Some(Ok(n)) => self.samples(n).map(|r| Response::json(200, &r)),
                    _ => Err(BadRequest::Malformed("expected ?n=<count>".into())),
                }
            }
            ("POST", "/decode") => parse::<AlphaRequest>(body).and_then(|r| self.decode(&r.alpha)).map(|r| Response::json(200, &r)),
            ("POST", "/predict") => parse::<AlphaRequest>(body).and_then(|r| self.predict(&r.alpha)).map(|r| Response::json(200, &r)),
            ("POST", "/interpolate") => parse::<InterpolateRequest>(body).and_then(|r| self.interpolate(&r)).map(|r| Response::json(200, &r)),
            (_, "/meta" | "/samples" | "/decode" | "/predict" | "/interpolate") => return Response::error(405, "MethodNotAllowed", format!("{method} {path}")),
            _ => return Response::error(404, "NotFound", path.to_string()),
        };
        match result {
            Ok(r) => r,
            Err(BadRequest::Malformed(m)) => Response::error(400, "BadRequest", m),
            Err(BadRequest::Model(e)) => Response::error(400, "ModelError", e.to_string()),
            Err(BadRequest::Head(e)) => Response::error(400, "HeadError", e.to_string()),
        }
    }
}

fn parse<T: for<'de> Deserialize<'de>>(body: &[u8]) -> Result<T, BadRequest> {
    // serde_json rejects NaN/Infinity literals, so those arrive as 400s too.
    serde_json::from_slice(body).map_err(|e| BadRequest::Malformed(format!("invalid JSON body: {e}")))
}
