//! Operator surrogate heads mapping a latent geometry code to a field.
//!
//! [`DeepOnet`] is the unstacked branch/trunk network
//! `G(α)(x) = Σ_k b_k(α) t_k(x) + b₀`; [`CnnHead`] is the convolutional
//! decoder baseline. Both consume deterministic codes from a frozen encoder
//! and predict z-scored targets that are mapped back to physical units at
//! the output.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::heatfd::{FieldGrid, FieldSample, PixelClass, TargetField};
use crate::ndmath::{adam_step, AdamConfig, Gradients, Layer, MathError, Objective, OptimizerState, ParamId, ParamStore, Scalar, Sequential, Tensor};
use crate::vrrae::{build_decoder, DecoderConfig, ModelError};

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("trunk cache built for {cache:?}, grid is {grid:?}")]
    CacheGridMismatch { cache: (usize, usize), grid: (usize, usize) },
    #[error("no solved fields in the training split")]
    MissingFields,
    #[error("missing encoder checkpoint: {0}")]
    MissingCheckpoint(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Math(#[from] MathError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepOnetConfig {
    pub grid_m: usize,
    pub grid_n: usize,
    pub k_star: usize,
    /// Hidden widths of the branch; the last dense layer maps to `p`.
    pub branch_hidden: Vec<usize>,
    pub trunk_hidden: Vec<usize>,
    pub p: usize,
    /// Scalar output bias `b₀`.
    pub output_bias: bool,
}

impl DeepOnetConfig {
    pub fn new(grid_m: usize, grid_n: usize, k_star: usize) -> Self {
        DeepOnetConfig { grid_m, grid_n, k_star, branch_hidden: vec![128, 128], trunk_hidden: vec![128, 128, 128], p: 128, output_bias: true }
    }

    fn validate(&self) -> Result<(), HeadError> {
        if self.p == 0 || self.k_star == 0 || self.grid_m < 2 || self.grid_n < 2 {
            return Err(HeadError::InvalidConfig("p, k* must be positive and the grid at least 2x2".into()));
        }
        Ok(())
    }
}

/// Code and target standardization fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub code_mean: Vec<f64>,
    pub code_std: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
}

impl Normalization {
    pub fn identity(k: usize) -> Self {
        Normalization { code_mean: vec![0.0; k], code_std: vec![1.0; k], target_mean: 0.0, target_std: 1.0 }
    }

    /// Fit from training codes and the interior target values of the same samples.
    pub fn fit(codes: &[Vec<f64>], samples: &[&FieldSample]) -> Self {
        let k = codes.first().map_or(0, |c| c.len());
        let n = codes.len().max(1) as f64;
        let code_mean: Vec<f64> = (0..k).map(|d| codes.iter().map(|c| c[d]).sum::<f64>() / n).collect();
        let raw: Vec<f64> = (0..k).map(|d| (codes.iter().map(|c| (c[d] - code_mean[d]).powi(2)).sum::<f64>() / n).sqrt()).collect();
        // Collapsed dimensions are floored relative to the widest one, so
        // their residual noise is not blown up to unit variance.
        let floor = (1e-3 * raw.iter().cloned().fold(0.0, f64::max)).max(1e-8);
        let code_std = raw.into_iter().map(|s| s.max(floor)).collect();
        let (mut sum, mut sq, mut cnt) = (0.0, 0.0, 0usize);
        for s in samples {
            for v in s.field.interior_values() {
                sum += v;
                sq += v * v;
                cnt += 1;
            }
        }
        let mean = sum / cnt.max(1) as f64;
        let var = (sq / cnt.max(1) as f64 - mean * mean).max(0.0);
        Normalization { code_mean, code_std, target_mean: mean, target_std: var.sqrt().max(1e-12) }
    }

    pub fn code(&self, alpha: &[f64]) -> Vec<f64> {
        alpha.iter().zip(&self.code_mean).zip(&self.code_std).map(|((a, m), s)| (a - m) / s).collect()
    }

    pub fn target(&self, y: f64) -> f64 {
        (y - self.target_mean) / self.target_std
    }

    pub fn untarget(&self, z: f64) -> f64 {
        z * self.target_std + self.target_mean
    }
}

/// Trunk input for pixel `(i, j)`: `x = j/(n−1)`, `y = i/(m−1)`.
pub fn pixel_coordinate(i: usize, j: usize, m: usize, n: usize) -> [f64; 2] {
    [j as f64 / (n - 1) as f64, i as f64 / (m - 1) as f64]
}

/// Encoder the head was trained against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderRef {
    pub path: String,
    pub sha256: String,
    pub kind: String,
}

/// Trunk features for every pixel of one grid, row-major `m·n × p`.
#[derive(Debug, Clone)]
pub struct TrunkCache<S> {
    pub m: usize,
    pub n: usize,
    features: Tensor<S>,
}

impl<S: Scalar> TrunkCache<S> {
    pub fn features(&self) -> &Tensor<S> {
        &self.features
    }
}

#[derive(Debug)]
pub struct DeepOnet<S> {
    pub config: DeepOnetConfig,
    pub params: ParamStore<S>,
    branch: Sequential,
    trunk: Sequential,
    b0: Option<ParamId>,
    pub norm: Normalization,
    pub target: TargetField,
    pub encoder: Option<EncoderRef>,
    trunk_passes: AtomicUsize,
}

impl<S: Scalar> Clone for DeepOnet<S> {
    fn clone(&self) -> Self {
        DeepOnet {
            config: self.config.clone(),
            params: self.params.clone(),
            branch: self.branch.clone(),
            trunk: self.trunk.clone(),
            b0: self.b0,
            norm: self.norm.clone(),
            target: self.target,
            encoder: self.encoder.clone(),
            trunk_passes: AtomicUsize::new(self.trunk_passes.load(Ordering::Relaxed)),
        }
    }
}

/// Row-wise inner products `out[q] = B[g_q] · T[c_q]`.
fn pair_dots<S: Scalar>(b: &Tensor<S>, t: &Tensor<S>, pairs: &[(usize, usize)]) -> Vec<f64> {
    let p = b.sample_len();
    pairs
        .iter()
        .map(|&(g, c)| {
            let (br, tr) = (&b.data()[g * p..(g + 1) * p], &t.data()[c * p..(c + 1) * p]);
            br.iter().zip(tr).map(|(x, y)| x.as_f64() * y.as_f64()).sum()
        })
        .collect()
}

impl<S: Scalar> DeepOnet<S> {
    pub fn new(config: DeepOnetConfig, target: TargetField, seed: u64) -> Result<Self, HeadError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut bw = vec![config.k_star];
        bw.extend(&config.branch_hidden);
        bw.push(config.p);
        let branch = Sequential::mlp(&mut params, "branch", &bw, Layer::Relu, &mut rng);
        let mut tw = vec![2];
        tw.extend(&config.trunk_hidden);
        tw.push(config.p);
        let trunk = Sequential::mlp(&mut params, "trunk", &tw, Layer::Relu, &mut rng);
        let b0 = config.output_bias.then(|| params.zeros("b0", &[1]));
        let norm = Normalization::identity(config.k_star);
        Ok(DeepOnet { config, params, branch, trunk, b0, norm, target, encoder: None, trunk_passes: AtomicUsize::new(0) })
    }

    pub fn cast<T: Scalar>(&self) -> DeepOnet<T> {
        DeepOnet {
            config: self.config.clone(),
            params: self.params.cast(),
            branch: self.branch.clone(),
            trunk: self.trunk.clone(),
            b0: self.b0,
            norm: self.norm.clone(),
            target: self.target,
            encoder: self.encoder.clone(),
            trunk_passes: AtomicUsize::new(0),
        }
    }

    /// Number of trunk network evaluations so far (any batch size counts once).
    pub fn trunk_passes(&self) -> usize {
        self.trunk_passes.load(Ordering::Relaxed)
    }

    fn bias(&self) -> f64 {
        self.b0.map_or(0.0, |id| self.params.get(id)[0].as_f64())
    }

    fn code_tensor(&self, alphas: &[&[f64]]) -> Result<Tensor<S>, HeadError> {
        let k = self.config.k_star;
        let mut data = Vec::with_capacity(alphas.len() * k);
        for a in alphas {
            if a.len() != k {
                return Err(HeadError::ShapeMismatch(format!("code of length {}, k* = {k}", a.len())));
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(HeadError::NonFinite("latent code".into()));
            }
            data.extend(self.norm.code(a).into_iter().map(S::of));
        }
        Ok(Tensor::from_vec(&[alphas.len(), k], data)?)
    }

    fn coord_tensor(xs: &[[f64; 2]]) -> Tensor<S> {
        Tensor::from_vec(&[xs.len(), 2], xs.iter().flat_map(|c| [S::of(c[0]), S::of(c[1])]).collect()).expect("2 columns")
    }

    /// Branch features `G × p` for raw (unstandardized) codes.
    pub fn branch_features(&self, alphas: &[&[f64]]) -> Result<Tensor<S>, HeadError> {
        Ok(self.branch.infer(&self.params, &self.code_tensor(alphas)?))
    }

    /// Trunk features `Q × p` for normalized coordinates.
    pub fn trunk_features(&self, xs: &[[f64; 2]]) -> Tensor<S> {
        self.trunk_passes.fetch_add(1, Ordering::Relaxed);
        self.trunk.infer(&self.params, &Self::coord_tensor(xs))
    }

    pub fn build_trunk_cache(&self, m: usize, n: usize) -> TrunkCache<S> {
        let xs: Vec<[f64; 2]> = (0..m * n).map(|q| pixel_coordinate(q / n, q % n, m, n)).collect();
        TrunkCache { m, n, features: self.trunk_features(&xs) }
    }

    /// Standardized-unit network output at each coordinate for one code.
    /// Branch and trunk are each evaluated once over the whole batch.
    pub fn forward_standardized(&self, alpha: &[f64], xs: &[[f64; 2]]) -> Result<Vec<f64>, HeadError> {
        let b = self.branch_features(&[alpha])?;
        let t = self.trunk_features(xs);
        let pairs: Vec<(usize, usize)> = (0..xs.len()).map(|q| (0, q)).collect();
        let b0 = self.bias();
        Ok(pair_dots(&b, &t, &pairs).into_iter().map(|v| v + b0).collect())
    }

    /// `G(α)(x)` in physical units at each coordinate.
    pub fn forward(&self, alpha: &[f64], xs: &[[f64; 2]]) -> Result<Vec<f64>, HeadError> {
        Ok(self.forward_standardized(alpha, xs)?.into_iter().map(|z| self.norm.untarget(z)).collect())
    }

    /// Reference path: one branch and one trunk evaluation per point.
    pub fn forward_naive(&self, alpha: &[f64], xs: &[[f64; 2]]) -> Result<Vec<f64>, HeadError> {
        xs.iter().map(|x| Ok(self.forward(alpha, std::slice::from_ref(x))?[0])).collect()
    }

    /// Field over the cache's full grid. `mask` classifies the pixels of the
    /// geometry (metrics read interior pixels only).
    pub fn predict_field(&self, alpha: &[f64], cache: &TrunkCache<S>, mask: Vec<PixelClass>) -> Result<FieldGrid, HeadError> {
        if mask.len() != cache.m * cache.n {
            return Err(HeadError::CacheGridMismatch { cache: (cache.m, cache.n), grid: (mask.len(), 1) });
        }
        Ok(self.predict_many(&[alpha], cache)?.into_iter().map(|values| FieldGrid { m: cache.m, n: cache.n, values, mask: mask.clone() }).next().unwrap())
    }

    /// Full-grid fields for many codes: one branch batch and a
    /// `G × p · p × m·n` product against the cached trunk.
    pub fn predict_many(&self, alphas: &[&[f64]], cache: &TrunkCache<S>) -> Result<Vec<Vec<f64>>, HeadError> {
        if (cache.m, cache.n) != (self.config.grid_m, self.config.grid_n) {
            return Err(HeadError::CacheGridMismatch { cache: (cache.m, cache.n), grid: (self.config.grid_m, self.config.grid_n) });
        }
        if alphas.is_empty() {
            return Ok(Vec::new());
        }
        let b = self.branch_features(alphas)?;
        let (g, p, q) = (alphas.len(), self.config.p, cache.m * cache.n);
        let mut out = vec![S::zero(); g * q];
        crate::ndmath::gemm(g, p, q, S::one(), b.data(), false, cache.features.data(), true, S::zero(), &mut out);
        let b0 = self.bias();
        Ok(out.chunks(q).map(|row| row.iter().map(|v| self.norm.untarget(v.as_f64() + b0)).collect()).collect())
    }

    /// Mean squared error in standardized units over `(code row, coordinate
    /// row)` pairs, with gradients. `codes` are already standardized.
    pub fn pair_loss(&self, codes: &Tensor<S>, coords: &Tensor<S>, pairs: &[(usize, usize)], targets: &[f64], want_grad: bool) -> (f64, Option<Gradients<S>>) {
        let bt = self.branch.forward(&self.params, codes.clone());
        self.trunk_passes.fetch_add(1, Ordering::Relaxed);
        let tt = self.trunk.forward(&self.params, coords.clone());
        let (b, t) = (bt.output(), tt.output());
        let b0 = self.bias();
        let out = pair_dots(b, t, pairs);
        let q = pairs.len() as f64;
        let resid: Vec<f64> = out.iter().zip(targets).map(|(o, y)| o + b0 - y).collect();
        let loss = resid.iter().map(|r| r * r).sum::<f64>() / q;
        if !want_grad {
            return (loss, None);
        }
        let p = self.config.p;
        let mut db = vec![0.0f64; b.len()];
        let mut dt = vec![0.0f64; t.len()];
        let mut db0 = 0.0;
        for (&(g, c), r) in pairs.iter().zip(&resid) {
            let d = 2.0 * r / q;
            db0 += d;
            let (br, tr) = (&b.data()[g * p..(g + 1) * p], &t.data()[c * p..(c + 1) * p]);
            for k in 0..p {
                db[g * p + k] += d * tr[k].as_f64();
                dt[c * p + k] += d * br[k].as_f64();
            }
        }
        let mut grads = self.params.zero_grads();
        let to_t = |v: Vec<f64>, like: &Tensor<S>| Tensor::from_vec(like.shape(), v.into_iter().map(S::of).collect()).expect("same shape");
        self.branch.backward(&self.params, &bt, to_t(db, b), &mut grads);
        self.trunk.backward(&self.params, &tt, to_t(dt, t), &mut grads);
        if let Some(id) = self.b0 {
            grads.get_mut(id)[0] = S::of(db0);
        }
        (loss, Some(grads))
    }
}

/// Finite-difference objective for [`DeepOnet::pair_loss`].
pub struct DeepOnetObjective<'a> {
    pub model: &'a DeepOnet<f64>,
    pub codes: Tensor<f64>,
    pub coords: Tensor<f64>,
    pub pairs: Vec<(usize, usize)>,
    pub targets: Vec<f64>,
}

impl Objective for DeepOnetObjective<'_> {
    fn loss(&self, params: &ParamStore<f64>) -> f64 {
        let mut m = self.model.clone();
        m.params = params.clone();
        m.pair_loss(&self.codes, &self.coords, &self.pairs, &self.targets, false).0
    }

    fn loss_and_grad(&self, params: &ParamStore<f64>) -> (f64, Gradients<f64>) {
        let mut m = self.model.clone();
        m.params = params.clone();
        let (l, g) = m.pair_loss(&self.codes, &self.coords, &self.pairs, &self.targets, true);
        (l, g.unwrap())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadTrainConfig {
    pub epochs: usize,
    /// Query points per step (DeepONet) or geometries per step (CNN head).
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl HeadTrainConfig {
    pub fn deeponet_desk(seed: u64) -> Self {
        HeadTrainConfig { epochs: 30, batch_size: 10_000, lr: 1e-3, seed }
    }

    pub fn cnn_desk(seed: u64) -> Self {
        HeadTrainConfig { epochs: 30, batch_size: 16, lr: 1e-3, seed }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadTrainReport {
    /// Mean standardized training loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub first_step_loss: f64,
    pub steps: usize,
}

fn check_training_inputs(codes: &[Vec<f64>], samples: &[&FieldSample], m: usize, n: usize) -> Result<(), HeadError> {
    if samples.is_empty() {
        return Err(HeadError::MissingFields);
    }
    if codes.len() != samples.len() {
        return Err(HeadError::ShapeMismatch(format!("{} codes for {} samples", codes.len(), samples.len())));
    }
    if samples.iter().any(|s| (s.field.m, s.field.n) != (m, n)) {
        return Err(HeadError::ShapeMismatch("field grid differs from the model grid".into()));
    }
    Ok(())
}

impl DeepOnet<f32> {
    /// Adam on random `(geometry, interior pixel)` batches; fits the
    /// normalization first. `codes[i]` is the encoder code of `samples[i]`.
    pub fn train(&mut self, codes: &[Vec<f64>], samples: &[&FieldSample], cfg: &HeadTrainConfig, mut log: impl FnMut(usize, f64)) -> Result<HeadTrainReport, HeadError> {
        let (m, n) = (self.config.grid_m, self.config.grid_n);
        check_training_inputs(codes, samples, m, n)?;
        self.norm = Normalization::fit(codes, samples);
        let mut all: Vec<(u32, u32)> = Vec::new();
        for (g, s) in samples.iter().enumerate() {
            all.extend(s.field.interior_indices().into_iter().map(|q| (g as u32, q as u32)));
        }
        if all.is_empty() {
            return Err(HeadError::MissingFields);
        }
        let targets_std: Vec<Vec<f64>> = samples.iter().map(|s| s.field.values.iter().map(|v| self.norm.target(*v)).collect()).collect();
        let code_rows: Vec<Vec<f64>> = codes.iter().map(|c| self.norm.code(c)).collect();
        let mut opt = OptimizerState::new(&self.params, AdamConfig::with_lr(cfg.lr));
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let batch = cfg.batch_size.max(1).min(all.len());
        let mut report = HeadTrainReport::default();
        // Stamp arrays map global ids to batch-local rows.
        let mut geo_slot = vec![usize::MAX; samples.len()];
        let mut pix_slot = vec![usize::MAX; m * n];
        for epoch in 0..cfg.epochs {
            all.shuffle(&mut rng);
            let mut sum = 0.0;
            let mut cnt = 0;
            for chunk in all.chunks(batch) {
                let (mut geos, mut pixs) = (Vec::new(), Vec::new());
                let mut pairs = Vec::with_capacity(chunk.len());
                let mut targets = Vec::with_capacity(chunk.len());
                for &(g, q) in chunk {
                    let (g, q) = (g as usize, q as usize);
                    if geo_slot[g] == usize::MAX {
                        geo_slot[g] = geos.len();
                        geos.push(g);
                    }
                    if pix_slot[q] == usize::MAX {
                        pix_slot[q] = pixs.len();
                        pixs.push(q);
                    }
                    pairs.push((geo_slot[g], pix_slot[q]));
                    targets.push(targets_std[g][q]);
                }
                let code_t = Tensor::from_vec(&[geos.len(), self.config.k_star], geos.iter().flat_map(|&g| code_rows[g].iter().map(|v| *v as f32)).collect())?;
                let coord_t = Tensor::from_vec(
                    &[pixs.len(), 2],
                    pixs.iter().flat_map(|&q| pixel_coordinate(q / n, q % n, m, n).map(|v| v as f32)).collect(),
                )?;
                geos.iter().for_each(|&g| geo_slot[g] = usize::MAX);
                pixs.iter().for_each(|&q| pix_slot[q] = usize::MAX);
                let (loss, grads) = self.pair_loss(&code_t, &coord_t, &pairs, &targets, true);
                if !loss.is_finite() {
                    return Err(HeadError::NonFinite("training loss".into()));
                }
                if report.steps == 0 {
                    report.first_step_loss = loss;
                }
                adam_step(&mut self.params, &grads.unwrap(), &mut opt)?;
                report.steps += 1;
                sum += loss;
                cnt += 1;
            }
            let mean = sum / cnt.max(1) as f64;
            log(epoch, mean);
            report.epoch_loss.push(mean);
        }
        Ok(report)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({ "norm": self.norm, "target": self.target, "encoder": self.encoder });
        let mut c = Checkpoint::new("deeponet", serde_json::to_value(&self.config).expect("config serializes"), meta);
        c.push_params(&self.params);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self, HeadError> {
        c.expect_kind(&["deeponet"])?;
        let config: DeepOnetConfig = serde_json::from_value(c.architecture.clone()).map_err(CheckpointError::from)?;
        let target: TargetField = serde_json::from_value(c.meta["target"].clone()).map_err(CheckpointError::from)?;
        let mut model = DeepOnet::new(config, target, 0)?;
        c.load_params(&mut model.params)?;
        model.norm = serde_json::from_value(c.meta["norm"].clone()).map_err(CheckpointError::from)?;
        model.encoder = serde_json::from_value(c.meta["encoder"].clone()).map_err(CheckpointError::from)?;
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnHeadConfig {
    pub grid_m: usize,
    pub grid_n: usize,
    pub k_star: usize,
    pub decoder: DecoderConfig,
}

impl CnnHeadConfig {
    pub fn new(grid_m: usize, grid_n: usize, k_star: usize) -> Self {
        CnnHeadConfig { grid_m, grid_n, k_star, decoder: DecoderConfig::default() }
    }
}

/// Decoder-style convolutional head with a linear output.
#[derive(Debug, Clone)]
pub struct CnnHead<S> {
    pub config: CnnHeadConfig,
    pub params: ParamStore<S>,
    net: Sequential,
    pub norm: Normalization,
    pub target: TargetField,
    pub encoder: Option<EncoderRef>,
}

/// Per-pixel squared error over interior pixels of each field, averaged over
/// all interior pixels in the batch. Returns the loss and `d loss / d pred`.
pub fn masked_mse(pred: &[f64], target: &[f64], mask: &[bool]) -> (f64, Vec<f64>) {
    let cnt = mask.iter().filter(|m| **m).count().max(1) as f64;
    let mut grad = vec![0.0; pred.len()];
    let mut loss = 0.0;
    for i in 0..pred.len() {
        if mask[i] {
            let r = pred[i] - target[i];
            loss += r * r;
            grad[i] = 2.0 * r / cnt;
        }
    }
    (loss / cnt, grad)
}

impl<S: Scalar> CnnHead<S> {
    pub fn new(config: CnnHeadConfig, target: TargetField, seed: u64) -> Result<Self, HeadError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let net = build_decoder(&mut params, "head", config.k_star, config.grid_m, config.grid_n, &config.decoder, None, &mut rng)?;
        let norm = Normalization::identity(config.k_star);
        Ok(CnnHead { config, params, net, norm, target, encoder: None })
    }

    fn code_tensor(&self, alphas: &[&[f64]]) -> Result<Tensor<S>, HeadError> {
        let k = self.config.k_star;
        let mut data = Vec::with_capacity(alphas.len() * k);
        for a in alphas {
            if a.len() != k {
                return Err(HeadError::ShapeMismatch(format!("code of length {}, k* = {k}", a.len())));
            }
            data.extend(self.norm.code(a).into_iter().map(S::of));
        }
        Ok(Tensor::from_vec(&[alphas.len(), k], data)?)
    }

    pub fn predict_many(&self, alphas: &[&[f64]]) -> Result<Vec<Vec<f64>>, HeadError> {
        if alphas.is_empty() {
            return Ok(Vec::new());
        }
        let out = self.net.infer(&self.params, &self.code_tensor(alphas)?);
        Ok(out.data().chunks(out.sample_len()).map(|c| c.iter().map(|v| self.norm.untarget(v.as_f64())).collect()).collect())
    }

    /// Masked standardized-unit loss for a batch of codes and sample fields.
    pub fn batch_loss(&self, alphas: &[&[f64]], samples: &[&FieldSample], want_grad: bool) -> Result<(f64, Option<Gradients<S>>), HeadError> {
        let x = self.code_tensor(alphas)?;
        let tape = self.net.forward(&self.params, x);
        let out = tape.output();
        let pred: Vec<f64> = out.data().iter().map(|v| v.as_f64()).collect();
        let mut target = Vec::with_capacity(pred.len());
        let mut mask = Vec::with_capacity(pred.len());
        for s in samples {
            target.extend(s.field.values.iter().map(|v| self.norm.target(*v)));
            mask.extend(s.field.mask.iter().map(|c| *c == PixelClass::Interior));
        }
        if target.len() != pred.len() {
            return Err(HeadError::ShapeMismatch("field grid differs from the head output".into()));
        }
        let (loss, grad) = masked_mse(&pred, &target, &mask);
        if !want_grad {
            return Ok((loss, None));
        }
        let mut grads = self.params.zero_grads();
        let dy = Tensor::from_vec(out.shape(), grad.into_iter().map(S::of).collect())?;
        self.net.backward(&self.params, &tape, dy, &mut grads);
        Ok((loss, Some(grads)))
    }
}

impl CnnHead<f32> {
    pub fn train(&mut self, codes: &[Vec<f64>], samples: &[&FieldSample], cfg: &HeadTrainConfig, mut log: impl FnMut(usize, f64)) -> Result<HeadTrainReport, HeadError> {
        check_training_inputs(codes, samples, self.config.grid_m, self.config.grid_n)?;
        self.norm = Normalization::fit(codes, samples);
        let mut opt = OptimizerState::new(&self.params, AdamConfig::with_lr(cfg.lr));
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut report = HeadTrainReport::default();
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let (mut sum, mut cnt) = (0.0, 0);
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let a: Vec<&[f64]> = chunk.iter().map(|&i| codes[i].as_slice()).collect();
                let s: Vec<&FieldSample> = chunk.iter().map(|&i| samples[i]).collect();
                let (loss, grads) = self.batch_loss(&a, &s, true)?;
                if !loss.is_finite() {
                    return Err(HeadError::NonFinite("training loss".into()));
                }
                if report.steps == 0 {
                    report.first_step_loss = loss;
                }
                adam_step(&mut self.params, &grads.unwrap(), &mut opt)?;
                report.steps += 1;
                sum += loss;
                cnt += 1;
            }
            let mean = sum / cnt.max(1) as f64;
            log(epoch, mean);
            report.epoch_loss.push(mean);
        }
        Ok(report)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({ "norm": self.norm, "target": self.target, "encoder": self.encoder });
        let mut c = Checkpoint::new("cnn_head", serde_json::to_value(&self.config).expect("config serializes"), meta);
        c.push_params(&self.params);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self, HeadError> {
        c.expect_kind(&["cnn_head"])?;
        let config: CnnHeadConfig = serde_json::from_value(c.architecture.clone()).map_err(CheckpointError::from)?;
        let target: TargetField = serde_json::from_value(c.meta["target"].clone()).map_err(CheckpointError::from)?;
        let mut head = CnnHead::new(config, target, 0)?;
        c.load_params(&mut head.params)?;
        head.norm = serde_json::from_value(c.meta["norm"].clone()).map_err(CheckpointError::from)?;
        head.encoder = serde_json::from_value(c.meta["encoder"].clone()).map_err(CheckpointError::from)?;
        Ok(head)
    }
}

/// A trained head of either kind, seen as a code → full-grid field map.
pub trait FieldPredictor: Sync {
    fn grid(&self) -> (usize, usize);
    fn target(&self) -> TargetField;
    fn encoder(&self) -> Option<&EncoderRef>;
    fn predict_fields(&self, alphas: &[&[f64]]) -> Result<Vec<Vec<f64>>, HeadError>;
}

/// DeepONet paired with the trunk cache for its grid.
pub struct CachedDeepOnet {
    pub model: DeepOnet<f32>,
    pub cache: TrunkCache<f32>,
}

impl CachedDeepOnet {
    pub fn new(model: DeepOnet<f32>) -> Self {
        let cache = model.build_trunk_cache(model.config.grid_m, model.config.grid_n);
        CachedDeepOnet { model, cache }
    }
}

impl FieldPredictor for CachedDeepOnet {
    fn grid(&self) -> (usize, usize) {
        (self.model.config.grid_m, self.model.config.grid_n)
    }

    fn target(&self) -> TargetField {
        self.model.target
    }

    fn encoder(&self) -> Option<&EncoderRef> {
        self.model.encoder.as_ref()
    }

    fn predict_fields(&self, alphas: &[&[f64]]) -> Result<Vec<Vec<f64>>, HeadError> {
        self.model.predict_many(alphas, &self.cache)
    }
}

impl FieldPredictor for CnnHead<f32> {
    fn grid(&self) -> (usize, usize) {
        (self.config.grid_m, self.config.grid_n)
    }

    fn target(&self) -> TargetField {
        self.target
    }

    fn encoder(&self) -> Option<&EncoderRef> {
        self.encoder.as_ref()
    }

    fn predict_fields(&self, alphas: &[&[f64]]) -> Result<Vec<Vec<f64>>, HeadError> {
        let mut out = Vec::with_capacity(alphas.len());
        for c in alphas.chunks(32) {
            out.extend(self.predict_many(c)?);
        }
        Ok(out)
    }
}
