//! Variational rank-reduction autoencoder and its plain-AE ablation.
//!
//! The encoder maps a batch of `N` rasters to `Y ∈ R^{L×N}`. In
//! [`BottleneckMode::Vrrae`] a rank-`k*` truncated SVD of `Y` fixes the
//! posterior mean to the SVD coefficients `ᾱ = ŪᵀY = S̄V̄ᵀ`, a dense head
//! predicts `log σ`, and the decoder sees `Ū(ᾱ + σ ⊙ ε)`. The basis is a
//! stop-gradient quantity recomputed per training batch and frozen once over
//! the full training set at the end of training. [`BottleneckMode::PlainAe`]
//! replaces the SVD block with a dense `L → k* → L` pair.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::geomgen::GeometryRaster;
use crate::hash::sha256_hex;
use crate::ndmath::{
    adam_step, conv_out_dim, truncated_svd, AdamConfig, ConvGeom, Gradients, Layer, MathError, Matrix, Objective, OptimizerState,
    ParamStore, Scalar, Sequential, Tensor, TruncatedSvd,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("batch of {n} is smaller than k* = {k}")]
    BatchTooSmall { n: usize, k: usize },
    #[error("model has no frozen basis")]
    MissingBasis,
    #[error("model has no coefficient statistics")]
    MissingStats,
    #[error("latent codes come from different bases ({0} vs {1})")]
    BasisMismatch(String, String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("interpolation parameter {0} outside [0, 1]")]
    InvalidT(f64),
    #[error(transparent)]
    Math(#[from] MathError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { channels: vec![32, 64, 128], kernel: 5, stride: 2, padding: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Channels of the seed tensor produced by the first dense layer.
    pub seed_channels: usize,
    /// Output channels of the transposed convolutions.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { seed_channels: 128, channels: vec![256, 128, 32, 8], kernel: 3, stride: 2, padding: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BottleneckMode {
    Vrrae,
    PlainAe,
}

impl BottleneckMode {
    pub fn tag(self) -> &'static str {
        match self {
            BottleneckMode::Vrrae => "vrrae",
            BottleneckMode::PlainAe => "plain_ae",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VrraeConfig {
    pub grid_m: usize,
    pub grid_n: usize,
    /// Pre-truncation latent width `L`.
    pub latent_dim: usize,
    pub k_star: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub mode: BottleneckMode,
    pub log_sigma_min: f64,
    pub log_sigma_max: f64,
}

impl VrraeConfig {
    pub fn new(grid_m: usize, grid_n: usize, mode: BottleneckMode) -> Self {
        VrraeConfig {
            grid_m,
            grid_n,
            latent_dim: 64,
            k_star: 8,
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            mode,
            log_sigma_min: -6.0,
            log_sigma_max: 2.0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.latent_dim < self.k_star || self.k_star == 0 {
            return Err(ModelError::InvalidConfig(format!("need L ({}) >= k* ({}) >= 1", self.latent_dim, self.k_star)));
        }
        if self.log_sigma_min >= self.log_sigma_max {
            return Err(ModelError::InvalidConfig("empty log-sigma clamp range".into()));
        }
        encoder_dims(self)?;
        decoder_plan(self.grid_m, self.grid_n, &self.decoder)?;
        Ok(())
    }
}

/// Spatial size after each encoder convolution.
pub fn encoder_dims(cfg: &VrraeConfig) -> Result<Vec<(usize, usize)>, ModelError> {
    let e = &cfg.encoder;
    let mut dims = vec![(cfg.grid_m, cfg.grid_n)];
    for _ in &e.channels {
        let (h, w) = *dims.last().unwrap();
        let nh = conv_out_dim(h, e.kernel, e.stride, e.padding);
        let nw = conv_out_dim(w, e.kernel, e.stride, e.padding);
        match (nh, nw) {
            (Some(a), Some(b)) => dims.push((a, b)),
            _ => return Err(ModelError::InvalidConfig(format!("encoder spatial size collapses below 1 from {h}x{w}"))),
        }
    }
    Ok(dims)
}

/// Decoder seed size and per-layer output padding that land exactly on
/// `m×n`, solved backwards from the target.
pub fn decoder_plan(m: usize, n: usize, d: &DecoderConfig) -> Result<((usize, usize), Vec<(usize, usize)>), ModelError> {
    let step = |out: usize| -> Option<(usize, usize)> {
        let base = (out + 2 * d.padding).checked_sub(d.kernel)?;
        let op = base % d.stride;
        let inp = (base - op) / d.stride + 1;
        (inp >= 1).then_some((inp, op))
    };
    let mut size = (m, n);
    let mut pads = Vec::with_capacity(d.channels.len());
    for _ in &d.channels {
        let (h, ph) = step(size.0).ok_or_else(|| ModelError::InvalidConfig("decoder cannot reach target height".into()))?;
        let (w, pw) = step(size.1).ok_or_else(|| ModelError::InvalidConfig("decoder cannot reach target width".into()))?;
        pads.push((ph, pw));
        size = (h, w);
    }
    pads.reverse();
    Ok((size, pads))
}

/// Dense seed layer, transposed convolutions and a final 3×3 convolution
/// to one channel. `final_act` is appended last (sigmoid for geometry,
/// nothing for field regression).
pub fn build_decoder<S: Scalar, R: Rng>(
    store: &mut ParamStore<S>,
    prefix: &str,
    in_dim: usize,
    m: usize,
    n: usize,
    d: &DecoderConfig,
    final_act: Option<Layer>,
    rng: &mut R,
) -> Result<Sequential, ModelError> {
    let ((sh, sw), pads) = decoder_plan(m, n, d)?;
    let mut net = Sequential::new();
    net.push(Layer::dense(store, &format!("{prefix}.seed"), in_dim, d.seed_channels * sh * sw, rng));
    net.push(Layer::Relu);
    net.push(Layer::Reshape { shape: vec![d.seed_channels, sh, sw] });
    let (mut ch, mut h, mut w) = (d.seed_channels, sh, sw);
    for (i, (&co, &op)) in d.channels.iter().zip(&pads).enumerate() {
        let g = ConvGeom::transposed(ch, co, d.kernel, d.stride, d.padding, h, w, op)
            .ok_or_else(|| ModelError::InvalidConfig(format!("invalid transposed conv {i}")))?;
        net.push(Layer::conv_transpose(store, &format!("{prefix}.tconv{i}"), g, rng));
        net.push(Layer::Relu);
        (ch, h, w) = (co, g.out_h, g.out_w);
    }
    debug_assert_eq!((h, w), (m, n));
    let g = ConvGeom::conv(ch, 1, 3, 1, 1, h, w).expect("3x3 same conv");
    net.push(Layer::conv(store, &format!("{prefix}.out"), g, rng));
    if let Some(a) = final_act {
        net.push(a);
    }
    Ok(net)
}

fn build_encoder<S: Scalar, R: Rng>(store: &mut ParamStore<S>, cfg: &VrraeConfig, rng: &mut R) -> Result<Sequential, ModelError> {
    let dims = encoder_dims(cfg)?;
    let e = &cfg.encoder;
    let mut net = Sequential::new();
    let mut ch = 1;
    for (i, &co) in e.channels.iter().enumerate() {
        let (h, w) = dims[i];
        let g = ConvGeom::conv(ch, co, e.kernel, e.stride, e.padding, h, w).expect("dims checked");
        net.push(Layer::conv(store, &format!("encoder.conv{i}"), g, rng));
        net.push(Layer::Relu);
        ch = co;
    }
    let (h, w) = *dims.last().unwrap();
    net.push(Layer::Reshape { shape: vec![ch * h * w] });
    net.push(Layer::dense(store, "encoder.latent", ch * h * w, cfg.latent_dim, rng));
    Ok(net)
}

/// Frozen orthonormal basis `Ū` (`L × k*`).
#[derive(Debug, Clone, PartialEq)]
pub struct Basis {
    pub id: String,
    pub u: Matrix,
}

impl Basis {
    /// Values are rounded to `f32` so a reloaded checkpoint reproduces them exactly.
    pub fn new(u: &Matrix) -> Self {
        let rounded = Matrix::from_fn(u.rows(), u.cols(), |i, j| u.get(i, j) as f32 as f64);
        let bytes: Vec<u8> = rounded.data().iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
        Basis { id: sha256_hex(&bytes)[..16].to_string(), u: rounded }
    }
}

/// Per-dimension statistics of training-set codes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoeffStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    /// Uncentered second moment `E[α_i²]`.
    pub second_moment: Vec<f64>,
    pub count: usize,
}

impl CoeffStats {
    pub fn from_codes(codes: &[Vec<f64>]) -> Self {
        let k = codes.first().map(|c| c.len()).unwrap_or(0);
        let n = codes.len().max(1) as f64;
        let mut mean = vec![0.0; k];
        let mut sq = vec![0.0; k];
        let mut min = vec![f64::INFINITY; k];
        let mut max = vec![f64::NEG_INFINITY; k];
        for c in codes {
            for d in 0..k {
                mean[d] += c[d] / n;
                sq[d] += c[d] * c[d] / n;
                min[d] = min[d].min(c[d]);
                max[d] = max[d].max(c[d]);
            }
        }
        let std = (0..k)
            .map(|d| {
                let var: f64 = codes.iter().map(|c| (c[d] - mean[d]).powi(2)).sum::<f64>() / (codes.len().max(2) - 1) as f64;
                var.sqrt()
            })
            .collect();
        CoeffStats { mean, std, min, max, second_moment: sq, count: codes.len() }
    }

    /// Dimensions of `alpha` outside the observed `[min, max]`.
    pub fn out_of_range(&self, alpha: &[f64]) -> Vec<usize> {
        alpha.iter().enumerate().filter(|(d, a)| **a < self.min[*d] || **a > self.max[*d]).map(|(d, _)| d).collect()
    }
}

/// A point in a model's `k*`-dimensional code space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub alpha: Vec<f64>,
    pub basis_id: String,
}

/// Loss decomposition of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub rec: f64,
    pub kl: f64,
}

/// `(0.5/N) Σ (σ² + μ² − 1 − log σ²)` over a `N × k*` block, the KL
/// divergence from `N(μ, σ²)` to the standard normal averaged over samples.
pub fn kl_term(mu: &[f64], log_sigma: &[f64], n: usize) -> f64 {
    assert_eq!(mu.len(), log_sigma.len());
    let s: f64 = mu.iter().zip(log_sigma).map(|(m, ls)| (2.0 * ls).exp() + m * m - 1.0 - 2.0 * ls).sum();
    0.5 * s / n as f64
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len().max(1) as f64
}

/// Reconstruction MSE plus `β`·KL. `log_sigma` holds `log σ`.
pub fn loss_vrrae(x: &[f64], x_tilde: &[f64], mu: &[f64], log_sigma: &[f64], n: usize, beta: f64) -> Result<LossParts, ModelError> {
    if x.len() != x_tilde.len() {
        return Err(ModelError::ShapeMismatch(format!("{} vs {} pixels", x.len(), x_tilde.len())));
    }
    let rec = mse(x, x_tilde);
    let kl = kl_term(mu, log_sigma, n);
    let total = rec + beta * kl;
    if !total.is_finite() {
        return Err(ModelError::NonFinite("loss".into()));
    }
    Ok(LossParts { total, rec, kl })
}

/// Output of the SVD bottleneck on a batch (row `b` = sample `b`).
#[derive(Debug, Clone)]
pub struct BottleneckOut {
    /// `N × k*`, the SVD coefficients `ᾱ`.
    pub alpha_mu: Matrix,
    /// `N × k*`, clamped `log σ`.
    pub log_sigma: Matrix,
    /// `N × k*`, `ᾱ + σ ⊙ ε` in training mode, `ᾱ` otherwise.
    pub alpha_tilde: Matrix,
    pub svd: TruncatedSvd,
}

#[derive(Debug, Clone)]
enum Bottleneck {
    Svd { sigma_head: Sequential },
    Dense { down: Sequential, up: Sequential },
}

#[derive(Debug, Clone)]
pub struct Vrrae<S: Scalar> {
    pub config: VrraeConfig,
    pub params: ParamStore<S>,
    encoder: Sequential,
    decoder: Sequential,
    bottleneck: Bottleneck,
    pub basis: Option<Basis>,
    pub stats: Option<CoeffStats>,
    /// Manifest the model was trained on.
    pub manifest_hash: Option<String>,
}

fn to_rows<S: Scalar>(m: &Matrix) -> Tensor<S> {
    Tensor::from_vec(&[m.rows(), m.cols()], m.data().iter().map(|v| S::of(*v)).collect()).expect("matrix shape")
}

fn from_rows<S: Scalar>(t: &Tensor<S>) -> Matrix {
    Matrix::from_vec(t.batch(), t.sample_len(), t.data().iter().map(|v| v.as_f64()).collect()).expect("tensor shape")
}

/// `a (r×p) · b (p×c)` or with `b` transposed.
fn mat_mul<S: Scalar>(a: &Tensor<S>, b: &Matrix, trans_b: bool) -> Tensor<S> {
    let (r, p) = (a.batch(), a.sample_len());
    let bt: Vec<S> = b.data().iter().map(|v| S::of(*v)).collect();
    let c = if trans_b { b.rows() } else { b.cols() };
    let mut out = Tensor::zeros(&[r, c]);
    crate::ndmath::gemm(r, p, c, S::one(), a.data(), false, &bt, trans_b, S::zero(), out.data_mut());
    out
}

pub fn rasters_to_tensor<S: Scalar>(rasters: &[&GeometryRaster]) -> Result<Tensor<S>, ModelError> {
    let (m, n) = rasters.first().map(|r| r.dims()).ok_or_else(|| ModelError::ShapeMismatch("empty batch".into()))?;
    let mut data = Vec::with_capacity(rasters.len() * m * n);
    for r in rasters {
        if r.dims() != (m, n) {
            return Err(ModelError::ShapeMismatch("mixed raster sizes in batch".into()));
        }
        data.extend(r.pixels().iter().map(|p| S::of(*p as f64)));
    }
    Ok(Tensor::from_vec(&[rasters.len(), 1, m, n], data)?)
}

impl<S: Scalar> Vrrae<S> {
    pub fn new(config: VrraeConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = build_encoder(&mut params, &config, &mut rng)?;
        let decoder = build_decoder(&mut params, "decoder", config.latent_dim, config.grid_m, config.grid_n, &config.decoder, Some(Layer::Sigmoid), &mut rng)?;
        let (l, k) = (config.latent_dim, config.k_star);
        let bottleneck = match config.mode {
            BottleneckMode::Vrrae => {
                let mut head = Sequential::new();
                head.push(Layer::dense(&mut params, "sigma_head", l, k, &mut rng));
                Bottleneck::Svd { sigma_head: head }
            }
            BottleneckMode::PlainAe => {
                let mut down = Sequential::new();
                down.push(Layer::dense(&mut params, "bottleneck.down", l, k, &mut rng));
                let mut up = Sequential::new();
                up.push(Layer::dense(&mut params, "bottleneck.up", k, l, &mut rng));
                Bottleneck::Dense { down, up }
            }
        };
        Ok(Vrrae { config, params, encoder, decoder, bottleneck, basis: None, stats: None, manifest_hash: None })
    }

    pub fn mode(&self) -> BottleneckMode {
        self.config.mode
    }

    /// Copy of the model in another precision.
    pub fn cast<T: Scalar>(&self) -> Vrrae<T> {
        Vrrae {
            config: self.config.clone(),
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            bottleneck: self.bottleneck.clone(),
            basis: self.basis.clone(),
            stats: self.stats.clone(),
            manifest_hash: self.manifest_hash.clone(),
        }
    }

    /// Parameter counts `(encoder, decoder, bottleneck)`.
    pub fn census(&self) -> (usize, usize, usize) {
        let mut c = (0, 0, 0);
        for p in self.params.params() {
            let n = p.value.len();
            if p.name.starts_with("encoder.") {
                c.0 += n;
            } else if p.name.starts_with("decoder.") {
                c.1 += n;
            } else {
                c.2 += n;
            }
        }
        c
    }

    fn check_input(&self, x: &Tensor<S>) -> Result<(), ModelError> {
        let want = [1, self.config.grid_m, self.config.grid_n];
        if x.shape().len() != 4 || x.shape()[1..] != want {
            return Err(ModelError::ShapeMismatch(format!("input {:?}, model expects [N, 1, {}, {}]", x.shape(), want[1], want[2])));
        }
        Ok(())
    }

    /// Encoder latents, `N × L` (row `b` is column `b` of `Y`).
    pub fn encode_tensor(&self, x: &Tensor<S>) -> Result<Tensor<S>, ModelError> {
        self.check_input(x)?;
        Ok(self.encoder.infer(&self.params, x))
    }

    /// `Y ∈ R^{L×N}` for a batch of rasters.
    pub fn encode_batch(&self, rasters: &[&GeometryRaster]) -> Result<Matrix, ModelError> {
        let y = self.encode_tensor(&rasters_to_tensor(rasters)?)?;
        Ok(from_rows(&y).transpose())
    }

    fn log_sigma_of(&self, y: &Tensor<S>) -> (Tensor<S>, Option<crate::ndmath::Tape<S>>) {
        match &self.bottleneck {
            Bottleneck::Svd { sigma_head } => {
                let tape = sigma_head.forward(&self.params, y.clone());
                let mut ls = tape.output().clone();
                let (lo, hi) = (S::of(self.config.log_sigma_min), S::of(self.config.log_sigma_max));
                ls.data_mut().iter_mut().for_each(|v| *v = v.max(lo).min(hi));
                (ls, Some(tape))
            }
            Bottleneck::Dense { .. } => unreachable!("plain AE has no sigma head"),
        }
    }

    /// Batch SVD bottleneck on `Y` (`L × N`). Requires `N ≥ k*` in training
    /// mode; in eval mode smaller batches truncate to rank `N`.
    pub fn bottleneck<R: Rng>(&self, y: &Matrix, rng: &mut R, train_mode: bool) -> Result<BottleneckOut, ModelError> {
        if self.config.mode != BottleneckMode::Vrrae {
            return Err(ModelError::InvalidConfig("SVD bottleneck requested on a plain AE".into()));
        }
        let (l, n) = (y.rows(), y.cols());
        if l != self.config.latent_dim {
            return Err(ModelError::ShapeMismatch(format!("Y has {l} rows, L = {}", self.config.latent_dim)));
        }
        let k = self.config.k_star;
        if train_mode && n < k {
            return Err(ModelError::BatchTooSmall { n, k });
        }
        let svd = truncated_svd(y, k.min(n))?;
        let yr: Tensor<S> = to_rows(&y.transpose());
        let mu = y.transpose().matmul(&svd.u);
        let (ls, _) = self.log_sigma_of(&yr);
        let log_sigma = from_rows(&ls);
        let ls_k = Matrix::from_fn(n, svd.rank(), |i, j| log_sigma.get(i, j));
        let alpha_tilde = if train_mode {
            Matrix::from_fn(n, svd.rank(), |i, j| {
                let e: f64 = StandardNormal.sample(rng);
                mu.get(i, j) + ls_k.get(i, j).exp() * e
            })
        } else {
            mu.clone()
        };
        Ok(BottleneckOut { alpha_mu: mu, log_sigma: ls_k, alpha_tilde, svd })
    }

    /// Loss and parameter gradients for one batch.
    ///
    /// `noise` (`N × k*`, row-major) enables sampling; `None` is the
    /// zero-noise evaluation path. `basis` overrides the batch SVD with a
    /// fixed `Ū`, which is how finite-difference checks see the same
    /// stop-gradient objective the analytic gradient differentiates.
    pub fn loss_and_grad(&self, x: &Tensor<S>, noise: Option<&[f64]>, beta: f64, basis: Option<&Matrix>) -> Result<(LossParts, Gradients<S>), ModelError> {
        self.forward_backward(x, noise, beta, basis, true).map(|(l, g)| (l, g.expect("requested")))
    }

    /// Loss only (same forward path as [`Vrrae::loss_and_grad`]).
    pub fn loss(&self, x: &Tensor<S>, noise: Option<&[f64]>, beta: f64, basis: Option<&Matrix>) -> Result<LossParts, ModelError> {
        self.forward_backward(x, noise, beta, basis, false).map(|(l, _)| l)
    }

    fn forward_backward(
        &self,
        x: &Tensor<S>,
        noise: Option<&[f64]>,
        beta: f64,
        basis: Option<&Matrix>,
        want_grad: bool,
    ) -> Result<(LossParts, Option<Gradients<S>>), ModelError> {
        self.check_input(x)?;
        let n = x.batch();
        let k = self.config.k_star;
        let npix = (self.config.grid_m * self.config.grid_n) as f64;
        let enc_tape = self.encoder.forward(&self.params, x.clone());
        let y = enc_tape.output().clone();
        let mut grads = want_grad.then(|| self.params.zero_grads());

        let rec_and_dx = |xt: &Tensor<S>| -> (f64, Tensor<S>) {
            let scale = 2.0 / (n as f64 * npix);
            let mut d = Tensor::zeros(xt.shape());
            let mut rec = 0.0;
            for ((dv, a), b) in d.data_mut().iter_mut().zip(xt.data()).zip(x.data()) {
                let diff = a.as_f64() - b.as_f64();
                rec += diff * diff;
                *dv = S::of(scale * diff);
            }
            (rec / (n as f64 * npix), d)
        };

        match &self.bottleneck {
            Bottleneck::Svd { sigma_head } => {
                if basis.is_none() && n < k {
                    return Err(ModelError::BatchTooSmall { n, k });
                }
                let u = match basis {
                    Some(u) => u.clone(),
                    None => truncated_svd(&from_rows(&y).transpose(), k)?.u,
                };
                if u.rows() != self.config.latent_dim || u.cols() != k {
                    return Err(ModelError::ShapeMismatch(format!("basis {}x{}", u.rows(), u.cols())));
                }
                let mu = mat_mul(&y, &u, false);
                let head_tape = sigma_head.forward(&self.params, y.clone());
                let raw = head_tape.output();
                let (lo, hi) = (self.config.log_sigma_min, self.config.log_sigma_max);
                let ls: Vec<f64> = raw.data().iter().map(|v| v.as_f64().clamp(lo, hi)).collect();
                let mut alpha = mu.clone();
                if let Some(eps) = noise {
                    if eps.len() != n * k {
                        return Err(ModelError::ShapeMismatch(format!("noise has {} entries, need {}", eps.len(), n * k)));
                    }
                    for ((a, l), e) in alpha.data_mut().iter_mut().zip(&ls).zip(eps) {
                        *a = S::of(a.as_f64() + l.exp() * e);
                    }
                }
                let z = mat_mul(&alpha, &u, true);
                let dec_tape = self.decoder.forward(&self.params, z);
                let (rec, dxt) = rec_and_dx(dec_tape.output());
                let mu64: Vec<f64> = mu.data().iter().map(|v| v.as_f64()).collect();
                let kl = kl_term(&mu64, &ls, n);
                let total = rec + beta * kl;
                if !total.is_finite() {
                    return Err(ModelError::NonFinite("loss".into()));
                }
                let parts = LossParts { total, rec, kl };
                let Some(g) = grads.as_mut() else { return Ok((parts, None)) };

                let dz = self.decoder.backward(&self.params, &dec_tape, dxt, g);
                let dalpha = mat_mul(&dz, &u, false);
                let inv_n = 1.0 / n as f64;
                let mut dmu = Tensor::<S>::zeros(&[n, k]);
                let mut ds = Tensor::<S>::zeros(&[n, k]);
                for idx in 0..n * k {
                    let da = dalpha.data()[idx].as_f64();
                    dmu.data_mut()[idx] = S::of(da + beta * mu64[idx] * inv_n);
                    let r = raw.data()[idx].as_f64();
                    if r > lo && r < hi {
                        let sigma = ls[idx].exp();
                        let from_noise = noise.map_or(0.0, |e| da * e[idx] * sigma);
                        ds.data_mut()[idx] = S::of(from_noise + beta * (sigma * sigma - 1.0) * inv_n);
                    }
                }
                let mut dy = sigma_head.backward(&self.params, &head_tape, ds, g);
                let dy_mu = mat_mul(&dmu, &u, true);
                for (a, b) in dy.data_mut().iter_mut().zip(dy_mu.data()) {
                    *a = *a + *b;
                }
                self.encoder.backward(&self.params, &enc_tape, dy, g);
                Ok((parts, grads))
            }
            Bottleneck::Dense { down, up } => {
                let down_tape = down.forward(&self.params, y);
                let up_tape = up.forward(&self.params, down_tape.output().clone());
                let dec_tape = self.decoder.forward(&self.params, up_tape.output().clone());
                let (rec, dxt) = rec_and_dx(dec_tape.output());
                if !rec.is_finite() {
                    return Err(ModelError::NonFinite("loss".into()));
                }
                let parts = LossParts { total: rec, rec, kl: 0.0 };
                let Some(g) = grads.as_mut() else { return Ok((parts, None)) };
                let dz = self.decoder.backward(&self.params, &dec_tape, dxt, g);
                let dcode = up.backward(&self.params, &up_tape, dz, g);
                let dy = down.backward(&self.params, &down_tape, dcode, g);
                self.encoder.backward(&self.params, &enc_tape, dy, g);
                Ok((parts, grads))
            }
        }
    }

    fn code_space_id(&self) -> Result<String, ModelError> {
        match self.config.mode {
            BottleneckMode::Vrrae => Ok(self.basis.as_ref().ok_or(ModelError::MissingBasis)?.id.clone()),
            BottleneckMode::PlainAe => {
                let mut bytes = Vec::new();
                for p in self.params.params().iter().filter(|p| p.name.starts_with("bottleneck.")) {
                    bytes.extend(p.value.iter().flat_map(|v| (v.as_f64() as f32).to_le_bytes()));
                }
                Ok(format!("ae-{}", &sha256_hex(&bytes)[..13]))
            }
        }
    }

    /// Deterministic codes for a batch: `Ūᵀ·encode(X)` (VRRAE) or the dense
    /// bottleneck output (plain AE).
    pub fn project_batch(&self, rasters: &[&GeometryRaster]) -> Result<Vec<LatentCode>, ModelError> {
        let id = self.code_space_id()?;
        let y = self.encode_tensor(&rasters_to_tensor(rasters)?)?;
        let codes = match &self.bottleneck {
            Bottleneck::Svd { .. } => mat_mul(&y, &self.basis.as_ref().ok_or(ModelError::MissingBasis)?.u, false),
            Bottleneck::Dense { down, .. } => down.infer(&self.params, &y),
        };
        Ok(codes
            .data()
            .chunks(self.config.k_star)
            .map(|c| LatentCode { alpha: c.iter().map(|v| v.as_f64()).collect(), basis_id: id.clone() })
            .collect())
    }

    pub fn project(&self, raster: &GeometryRaster) -> Result<LatentCode, ModelError> {
        Ok(self.project_batch(&[raster])?.remove(0))
    }

    /// Project many rasters in chunks of `chunk`.
    pub fn project_all(&self, rasters: &[&GeometryRaster], chunk: usize) -> Result<Vec<LatentCode>, ModelError> {
        let mut out = Vec::with_capacity(rasters.len());
        for c in rasters.chunks(chunk.max(1)) {
            out.extend(self.project_batch(c)?);
        }
        Ok(out)
    }

    /// Decode `N × k*` codes to soft images in `(0, 1)`, one `m·n` vector each.
    pub fn decode_alphas(&self, alphas: &[&[f64]]) -> Result<Vec<Vec<f64>>, ModelError> {
        let k = self.config.k_star;
        if alphas.is_empty() {
            return Ok(Vec::new());
        }
        let mut data = Vec::with_capacity(alphas.len() * k);
        for a in alphas {
            if a.len() != k {
                return Err(ModelError::ShapeMismatch(format!("code of length {}, k* = {k}", a.len())));
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite("latent code".into()));
            }
            data.extend(a.iter().map(|v| S::of(*v)));
        }
        let codes = Tensor::from_vec(&[alphas.len(), k], data)?;
        let z = match &self.bottleneck {
            Bottleneck::Svd { .. } => mat_mul(&codes, &self.basis.as_ref().ok_or(ModelError::MissingBasis)?.u, true),
            Bottleneck::Dense { up, .. } => up.infer(&self.params, &codes),
        };
        let out = self.decoder.infer(&self.params, &z);
        Ok(out.data().chunks(out.sample_len()).map(|c| c.iter().map(|v| v.as_f64()).collect()).collect())
    }

    pub fn decode(&self, code: &LatentCode) -> Result<Vec<f64>, ModelError> {
        let id = self.code_space_id()?;
        if code.basis_id != id {
            return Err(ModelError::BasisMismatch(code.basis_id.clone(), id));
        }
        Ok(self.decode_alphas(&[&code.alpha])?.remove(0))
    }

    /// Deterministic encode → bottleneck → decode with the frozen code space.
    pub fn reconstruct(&self, rasters: &[&GeometryRaster]) -> Result<Vec<Vec<f64>>, ModelError> {
        let codes = self.project_batch(rasters)?;
        let refs: Vec<&[f64]> = codes.iter().map(|c| c.alpha.as_slice()).collect();
        self.decode_alphas(&refs)
    }

    pub fn sample_prior<R: Rng>(&self, rng: &mut R, count: usize) -> Result<Vec<LatentCode>, ModelError> {
        let stats = self.stats.as_ref().ok_or(ModelError::MissingStats)?;
        let id = self.code_space_id()?;
        Ok((0..count)
            .map(|_| {
                let alpha = stats
                    .mean
                    .iter()
                    .zip(&stats.std)
                    .map(|(m, s)| {
                        let e: f64 = StandardNormal.sample(rng);
                        m + s * e
                    })
                    .collect();
                LatentCode { alpha, basis_id: id.clone() }
            })
            .collect())
    }

    /// Recompute the frozen basis (VRRAE) and coefficient statistics from
    /// the full training set.
    pub fn freeze(&mut self, train: &[&GeometryRaster], chunk: usize) -> Result<(), ModelError> {
        if self.config.mode == BottleneckMode::Vrrae {
            let mut cols: Vec<Matrix> = Vec::new();
            for c in train.chunks(chunk.max(1)) {
                cols.push(self.encode_batch(c)?);
            }
            let n: usize = cols.iter().map(|m| m.cols()).sum();
            let l = self.config.latent_dim;
            let mut y = Matrix::zeros(l, n);
            let mut off = 0;
            for m in &cols {
                for i in 0..l {
                    for j in 0..m.cols() {
                        y.set(i, off + j, m.get(i, j));
                    }
                }
                off += m.cols();
            }
            let svd = truncated_svd(&y, self.config.k_star)?;
            self.basis = Some(Basis::new(&svd.u));
        }
        let codes = self.project_all(train, chunk)?;
        self.stats = Some(CoeffStats::from_codes(&codes.into_iter().map(|c| c.alpha).collect::<Vec<_>>()));
        Ok(())
    }
}

/// Linear interpolation `(1−t)·a + t·b` between two codes of one basis.
pub fn interpolate(a: &LatentCode, b: &LatentCode, t: f64) -> Result<LatentCode, ModelError> {
    if a.basis_id != b.basis_id {
        return Err(ModelError::BasisMismatch(a.basis_id.clone(), b.basis_id.clone()));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(ModelError::InvalidT(t));
    }
    if a.alpha.len() != b.alpha.len() {
        return Err(ModelError::ShapeMismatch("codes of different length".into()));
    }
    Ok(LatentCode { alpha: a.alpha.iter().zip(&b.alpha).map(|(x, y)| (1.0 - t) * x + t * y).collect(), basis_id: a.basis_id.clone() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta_final: f64,
    /// Fraction of the steps over which β ramps linearly from 0.
    pub anneal_fraction: f64,
    pub seed: u64,
    /// Validation MSE is logged every this many epochs.
    pub eval_every_epochs: usize,
}

impl TrainSchedule {
    /// 20,000-step desk budget; `steps = 450_000` is the full-scale run.
    pub fn desk(seed: u64) -> Self {
        TrainSchedule { steps: 20_000, batch_size: 64, lr: 1e-4, beta_final: 0.2, anneal_fraction: 0.5, seed, eval_every_epochs: 1 }
    }

    pub fn beta_at(&self, step: usize) -> f64 {
        let ramp = (self.anneal_fraction * self.steps as f64).max(1.0);
        self.beta_final * (step as f64 / ramp).min(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub beta: f64,
    pub loss: LossParts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    pub val_mse: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

impl Vrrae<f32> {
    /// Eval-mode reconstruction MSE with per-chunk batch SVD (used before
    /// the basis is frozen).
    pub fn batch_eval_mse(&self, rasters: &[&GeometryRaster], chunk: usize) -> Result<f64, ModelError> {
        let mut total = 0.0;
        let mut count = 0usize;
        for c in rasters.chunks(chunk.max(self.config.k_star)) {
            let x = rasters_to_tensor::<f32>(c)?;
            let parts = if self.config.mode == BottleneckMode::Vrrae && c.len() < self.config.k_star {
                let y = self.encode_batch(c)?;
                let basis = truncated_svd(&y, c.len())?.u;
                let mut padded = Matrix::zeros(basis.rows(), self.config.k_star);
                for i in 0..basis.rows() {
                    for j in 0..basis.cols() {
                        padded.set(i, j, basis.get(i, j));
                    }
                }
                self.loss(&x, None, 0.0, Some(&padded))?
            } else {
                self.loss(&x, None, 0.0, None)?
            };
            total += parts.rec * c.len() as f64;
            count += c.len();
        }
        Ok(total / count.max(1) as f64)
    }

    /// Sets the output-conv bias to the logit of the mean training pixel, so
    /// the sigmoid starts at the class balance instead of being driven into
    /// saturation by the solid majority.
    pub fn init_output_bias(&mut self, train: &[&GeometryRaster]) {
        let Some(id) = self.params.find("decoder.out.bias") else { return };
        let pixels: usize = train.iter().map(|r| r.pixels().len()).sum();
        let solid: usize = train.iter().map(|r| r.pixels().iter().filter(|&&p| p != 0).count()).sum();
        let p = (solid as f64 / pixels.max(1) as f64).clamp(1e-3, 1.0 - 1e-3);
        self.params.get_mut(id).fill((p / (1.0 - p)).ln() as f32);
    }

    /// Adam training on `train`, then [`Vrrae::freeze`]. `log` receives
    /// every step.
    pub fn train(
        &mut self,
        train: &[&GeometryRaster],
        val: &[&GeometryRaster],
        schedule: &TrainSchedule,
        mut log: impl FnMut(&StepLog),
    ) -> Result<TrainReport, ModelError> {
        let k = self.config.k_star;
        let batch = schedule.batch_size.min(train.len());
        if self.config.mode == BottleneckMode::Vrrae && batch < k {
            return Err(ModelError::BatchTooSmall { n: batch, k });
        }
        if self.stats.is_none() {
            self.init_output_bias(train);
        }
        let mut opt = OptimizerState::new(&self.params, AdamConfig::with_lr(schedule.lr));
        let mut order_rng = ChaCha8Rng::seed_from_u64(schedule.seed);
        order_rng.set_stream(1);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(schedule.seed);
        noise_rng.set_stream(2);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut cursor = order.len();
        let mut epoch = 0;
        let mut report = TrainReport::default();
        for step in 0..schedule.steps {
            if cursor + batch > order.len() {
                if epoch > 0 && epoch % schedule.eval_every_epochs.max(1) == 0 {
                    let val_mse = if val.is_empty() { None } else { Some(self.batch_eval_mse(val, 64)?) };
                    report.epochs.push(EpochLog { epoch, step, val_mse });
                }
                order.shuffle(&mut order_rng);
                cursor = 0;
                epoch += 1;
            }
            let idx = &order[cursor..cursor + batch];
            cursor += batch;
            let rs: Vec<&GeometryRaster> = idx.iter().map(|&i| train[i]).collect();
            let x = rasters_to_tensor::<f32>(&rs)?;
            let beta = schedule.beta_at(step);
            let noise: Option<Vec<f64>> = (self.config.mode == BottleneckMode::Vrrae).then(|| (0..batch * k).map(|_| StandardNormal.sample(&mut noise_rng)).collect());
            let (parts, grads) = self.loss_and_grad(&x, noise.as_deref(), beta, None)?;
            adam_step(&mut self.params, &grads, &mut opt)?;
            let entry = StepLog { step, beta, loss: parts };
            log(&entry);
            report.steps.push(entry);
        }
        let val_mse = if val.is_empty() { None } else { Some(self.batch_eval_mse(val, 64)?) };
        report.epochs.push(EpochLog { epoch, step: schedule.steps, val_mse });
        self.freeze(train, 64)?;
        Ok(report)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint, ModelError> {
        let meta = serde_json::json!({
            "stats": self.stats,
            "basis_id": self.basis.as_ref().map(|b| b.id.clone()),
            "manifest_hash": self.manifest_hash,
        });
        let mut c = Checkpoint::new(self.config.mode.tag(), serde_json::to_value(&self.config).expect("config serializes"), meta);
        c.push_params(&self.params);
        if let Some(b) = &self.basis {
            c.push_tensor("bottleneck.basis", &[b.u.rows(), b.u.cols()], b.u.data().iter().map(|v| *v as f32).collect());
        }
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self, ModelError> {
        c.expect_kind(&["vrrae", "plain_ae"])?;
        let config: VrraeConfig = serde_json::from_value(c.architecture.clone()).map_err(CheckpointError::from)?;
        if config.mode.tag() != c.kind {
            return Err(ModelError::InvalidConfig(format!("kind {} with mode {:?}", c.kind, config.mode)));
        }
        let mut model = Vrrae::<f32>::new(config, 0)?;
        c.load_params(&mut model.params)?;
        if let Some((shape, values)) = c.tensor("bottleneck.basis") {
            let u = Matrix::from_vec(shape[0], shape[1], values.iter().map(|v| *v as f64).collect())?;
            let defect = crate::ndmath::orthonormality_defect(&u);
            if defect > 1e-5 {
                return Err(ModelError::InvalidConfig(format!("stored basis is not orthonormal (defect {defect:e})")));
            }
            let basis = Basis::new(&u);
            if let Some(id) = c.meta.get("basis_id").and_then(|v| v.as_str()) {
                if id != basis.id {
                    return Err(ModelError::BasisMismatch(id.to_string(), basis.id));
                }
            }
            model.basis = Some(basis);
        } else if model.config.mode == BottleneckMode::Vrrae {
            return Err(ModelError::MissingBasis);
        }
        model.stats = c.meta.get("stats").cloned().and_then(|v| serde_json::from_value(v).ok());
        model.manifest_hash = c.meta.get("manifest_hash").and_then(|v| v.as_str()).map(String::from);
        Ok(model)
    }
}

/// Finite-difference objective over a fixed batch, noise draw and basis.
pub struct VrraeObjective<'a> {
    pub model: &'a Vrrae<f64>,
    pub x: Tensor<f64>,
    pub noise: Option<Vec<f64>>,
    pub beta: f64,
    pub basis: Option<Matrix>,
}

impl Objective for VrraeObjective<'_> {
    fn loss(&self, params: &ParamStore<f64>) -> f64 {
        let mut m = self.model.clone();
        m.params = params.clone();
        m.loss(&self.x, self.noise.as_deref(), self.beta, self.basis.as_ref()).expect("finite loss").total
    }

    fn loss_and_grad(&self, params: &ParamStore<f64>) -> (f64, Gradients<f64>) {
        let mut m = self.model.clone();
        m.params = params.clone();
        let (l, g) = m.loss_and_grad(&self.x, self.noise.as_deref(), self.beta, self.basis.as_ref()).expect("finite loss");
        (l.total, g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndmath::grad_check;

    fn tiny_config(mode: BottleneckMode) -> VrraeConfig {
        VrraeConfig {
            grid_m: 16,
            grid_n: 16,
            latent_dim: 8,
            k_star: 3,
            encoder: EncoderConfig { channels: vec![2, 3], ..Default::default() },
            decoder: DecoderConfig { seed_channels: 3, channels: vec![3, 2], ..Default::default() },
            mode,
            log_sigma_min: -6.0,
            log_sigma_max: 2.0,
        }
    }

    fn rasters(n: usize) -> Vec<GeometryRaster> {
        let spec = crate::geomgen::GeometrySpec { shape_size: 2, ..crate::geomgen::GeometrySpec::new(16, 16, 1) };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        (0..n).map(|_| crate::geomgen::rasterize(&crate::geomgen::place_shapes(&spec, &mut rng).unwrap(), &spec)).collect()
    }

    #[test]
    fn paper_decoder_plan_lands_on_grid() {
        let ((h, w), pads) = decoder_plan(128, 128, &DecoderConfig::default()).unwrap();
        assert_eq!((h, w), (8, 8));
        assert_eq!(pads, vec![(1, 1); 4]);
        let ((h, _), pads) = decoder_plan(50, 64, &DecoderConfig::default()).unwrap();
        assert_eq!(h, 4);
        assert_eq!(pads.last().unwrap().0, 1);
        let cfg = VrraeConfig::new(128, 128, BottleneckMode::Vrrae);
        let dims = encoder_dims(&cfg).unwrap();
        assert_eq!(dims, vec![(128, 128), (63, 63), (31, 31), (15, 15)]);
    }

    #[test]
    fn kl_analytic_values() {
        assert_eq!(kl_term(&[0.0; 6], &[0.0; 6], 2), 0.0);
        assert!((kl_term(&[1.0], &[0.0], 1) - 0.5).abs() < 1e-15);
        let x = [0.2, 0.9, 1.0];
        let l = loss_vrrae(&x, &x, &[1.0], &[0.0], 1, 0.2).unwrap();
        assert_eq!(l.rec, 0.0);
        assert!((l.total - 0.2 * 0.5).abs() < 1e-15);
    }

    #[test]
    fn encode_batch_shape_and_duplicates() {
        let model = Vrrae::<f32>::new(tiny_config(BottleneckMode::Vrrae), 1).unwrap();
        let rs = rasters(2);
        let y = model.encode_batch(&[&rs[0], &rs[1], &rs[0]]).unwrap();
        assert_eq!((y.rows(), y.cols()), (8, 3));
        assert_eq!(y.column(0), y.column(2));
        let bad = GeometryRaster::solid(20, 20);
        assert!(matches!(model.encode_batch(&[&bad]), Err(ModelError::ShapeMismatch(_))));
    }

    #[test]
    fn bottleneck_requires_enough_columns() {
        let model = Vrrae::<f64>::new(tiny_config(BottleneckMode::Vrrae), 1).unwrap();
        let y = Matrix::from_fn(8, 2, |i, j| (i + j) as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(model.bottleneck(&y, &mut rng, true), Err(ModelError::BatchTooSmall { n: 2, k: 3 })));
    }

    #[test]
    fn bottleneck_zero_sigma_and_determinism() {
        let mut model = Vrrae::<f64>::new(tiny_config(BottleneckMode::Vrrae), 2).unwrap();
        let y = Matrix::from_fn(8, 6, |i, j| ((i * 3 + j * 7) as f64).sin());
        let run = |m: &Vrrae<f64>| m.bottleneck(&y, &mut ChaCha8Rng::seed_from_u64(9), true).unwrap();
        let a = run(&model);
        let b = run(&model);
        assert_eq!(a.alpha_tilde, b.alpha_tilde);
        // Drive the head to the floor of the clamp: σ = e^-6 ≈ 0.0025; test the
        // exact zero-noise limit through the eval path instead.
        let ev = model.bottleneck(&y, &mut ChaCha8Rng::seed_from_u64(9), false).unwrap();
        assert_eq!(ev.alpha_tilde, ev.alpha_mu);
        let pid = model.params.find("sigma_head.bias").unwrap();
        model.params.get_mut(pid).iter_mut().for_each(|v| *v = -1e6);
        let w = model.params.find("sigma_head.weight").unwrap();
        model.params.get_mut(w).iter_mut().for_each(|v| *v = 0.0);
        let c = run(&model);
        let max_dev = c.alpha_tilde.sub(&c.alpha_mu).max_abs();
        assert!(max_dev <= 4.0 * (-6.0f64).exp() * 5.0, "{max_dev}");
    }

    #[test]
    fn known_rank_latent_is_recovered() {
        let model = Vrrae::<f64>::new(tiny_config(BottleneckMode::Vrrae), 2).unwrap();
        let a = Matrix::from_fn(8, 3, |i, j| ((i * 5 + j) as f64 * 0.3).cos());
        let b = Matrix::from_fn(3, 10, |i, j| ((i + j * 2) as f64 * 0.7).sin());
        let y = a.matmul(&b);
        let out = model.bottleneck(&y, &mut ChaCha8Rng::seed_from_u64(0), false).unwrap();
        let recon = out.svd.u.matmul(&out.alpha_mu.transpose());
        assert!(recon.sub(&y).frobenius() <= 1e-5 * y.frobenius());
    }

    #[test]
    fn census_matches_across_modes() {
        let v = Vrrae::<f32>::new(tiny_config(BottleneckMode::Vrrae), 3).unwrap();
        let a = Vrrae::<f32>::new(tiny_config(BottleneckMode::PlainAe), 3).unwrap();
        let (ve, vd, vb) = v.census();
        let (ae, ad, ab) = a.census();
        assert_eq!((ve, vd), (ae, ad));
        assert_eq!(vb, 8 * 3 + 3);
        assert_eq!(ab, 8 * 3 + 3 + 3 * 8 + 8);
        // Shared init: encoder/decoder weights identical for equal seeds.
        assert_eq!(v.params.params()[0], a.params.params()[0]);
    }

    #[test]
    fn plain_ae_has_no_kl() {
        let model = Vrrae::<f32>::new(tiny_config(BottleneckMode::PlainAe), 4).unwrap();
        let rs = rasters(4);
        let refs: Vec<&GeometryRaster> = rs.iter().collect();
        let x = rasters_to_tensor::<f32>(&refs).unwrap();
        let (l, _) = model.loss_and_grad(&x, None, 0.2, None).unwrap();
        assert_eq!(l.kl, 0.0);
        assert_eq!(l.total, l.rec);
    }

    #[test]
    fn vrrae_loss_gradient_check() {
        let model = Vrrae::<f64>::new(tiny_config(BottleneckMode::Vrrae), 6).unwrap();
        let rs = rasters(4);
        let refs: Vec<&GeometryRaster> = rs.iter().collect();
        let x = rasters_to_tensor::<f64>(&refs).unwrap();
        let basis = truncated_svd(&model.encode_batch(&refs).unwrap(), 3).unwrap().u;
        let noise: Vec<f64> = (0..12).map(|i| ((i as f64) * 1.3).sin()).collect();
        let obj = VrraeObjective { model: &model, x, noise: Some(noise), beta: 0.7, basis: Some(basis) };
        let r = grad_check(&obj, &model.params, 80, 17);
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn plain_ae_gradient_check() {
        let model = Vrrae::<f64>::new(tiny_config(BottleneckMode::PlainAe), 7).unwrap();
        let rs = rasters(3);
        let refs: Vec<&GeometryRaster> = rs.iter().collect();
        let obj = VrraeObjective { model: &model, x: rasters_to_tensor(&refs).unwrap(), noise: None, beta: 0.0, basis: None };
        let r = grad_check(&obj, &model.params, 60, 18);
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn output_bias_starts_at_the_solid_fraction() {
        let mut model = Vrrae::<f32>::new(tiny_config(BottleneckMode::PlainAe), 8).unwrap();
        let rs = rasters(6);
        let refs: Vec<&GeometryRaster> = rs.iter().collect();
        model.init_output_bias(&refs);
        let solid = 1.0 - rs.iter().map(|r| r.hole_fraction()).sum::<f64>() / rs.len() as f64;
        let b = model.params.get(model.params.find("decoder.out.bias").unwrap())[0] as f64;
        assert!((1.0 / (1.0 + (-b).exp()) - solid).abs() < 1e-6, "{b} vs {solid}");
    }

    #[test]
    fn training_reduces_loss_and_freezes() {
        let mut model = Vrrae::<f32>::new(tiny_config(BottleneckMode::Vrrae), 8).unwrap();
        let rs = rasters(24);
        let refs: Vec<&GeometryRaster> = rs.iter().collect();
        let schedule = TrainSchedule { steps: 60, batch_size: 8, lr: 3e-3, ..TrainSchedule::desk(1) };
        let rep = model.train(&refs[..20], &refs[20..], &schedule, |_| {}).unwrap();
        let first: f64 = rep.steps[..5].iter().map(|s| s.loss.rec).sum();
        let last: f64 = rep.steps[55..].iter().map(|s| s.loss.rec).sum();
        assert!(last < first, "{first} -> {last}");
        let basis = model.basis.as_ref().unwrap();
        assert!(crate::ndmath::orthonormality_defect(&basis.u) <= 1e-5);
        let stats = model.stats.as_ref().unwrap();
        for r in &refs[..20] {
            let c = model.project(r).unwrap();
            assert!(model.stats.as_ref().unwrap().out_of_range(&c.alpha).is_empty());
            let y = model.encode_batch(&[r]).unwrap();
            let ny: f64 = y.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            let na: f64 = c.alpha.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(na <= ny * (1.0 + 1e-5));
        }
        assert_eq!(stats.count, 20);
        let ck = model.to_checkpoint().unwrap();
        let back = Vrrae::<f32>::from_checkpoint(&Checkpoint::decode(&ck.encode()).unwrap()).unwrap();
        assert_eq!(back.project(&rs[0]).unwrap(), model.project(&rs[0]).unwrap());
        assert_eq!(back.reconstruct(&[&rs[1]]).unwrap(), model.reconstruct(&[&rs[1]]).unwrap());
    }

    #[test]
    fn interpolation_endpoints_and_errors() {
        let a = LatentCode { alpha: vec![1.0, -2.0], basis_id: "b".into() };
        let b = LatentCode { alpha: vec![3.0, 0.5], basis_id: "b".into() };
        assert_eq!(interpolate(&a, &b, 0.0).unwrap(), a);
        assert_eq!(interpolate(&a, &b, 1.0).unwrap(), b);
        assert_eq!(interpolate(&a, &b, 0.5).unwrap().alpha, vec![2.0, -0.75]);
        let c = LatentCode { basis_id: "other".into(), ..b.clone() };
        assert!(matches!(interpolate(&a, &c, 0.5), Err(ModelError::BasisMismatch(..))));
        assert!(matches!(interpolate(&a, &b, 1.5), Err(ModelError::InvalidT(_))));
    }

    #[test]
    fn untrained_model_lacks_basis_and_stats() {
        let model = Vrrae::<f32>::new(tiny_config(BottleneckMode::Vrrae), 1).unwrap();
        let rs = rasters(1);
        assert!(matches!(model.project(&rs[0]), Err(ModelError::MissingBasis)));
        assert!(matches!(model.sample_prior(&mut ChaCha8Rng::seed_from_u64(0), 3), Err(ModelError::MissingStats)));
    }

    #[test]
    fn beta_ramps_over_first_half() {
        let s = TrainSchedule { steps: 100, ..TrainSchedule::desk(0) };
        assert_eq!(s.beta_at(0), 0.0);
        assert!((s.beta_at(25) - 0.1).abs() < 1e-12);
        assert!((s.beta_at(50) - 0.2).abs() < 1e-12);
        assert!((s.beta_at(99) - 0.2).abs() < 1e-12);
        assert_eq!(TrainSchedule::desk(0).batch_size, 64);
    }
}
