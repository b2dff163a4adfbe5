//! Subcommand implementations. Each returns a JSON summary that `main`
//! prints to stdout, and writes a `*.run.json` log next to its artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use thermoforge::bench::run_bench;
use thermoforge::checkpoint::Checkpoint;
use thermoforge::deeponet::{CachedDeepOnet, CnnHead, CnnHeadConfig, DeepOnet, DeepOnetConfig, EncoderRef, FieldPredictor, HeadTrainConfig};
use thermoforge::geomgen::{read_geometry_file, write_dataset, DatasetManifest, GeometryRaster, GeometrySpec, Split};
use thermoforge::heatfd::{solve_batch, FieldDataset, FieldSample, SolverKind, TargetField, ThermalConfig};
use thermoforge::metrics::{
    reconstruction_mse, reconstruction_validity_rate, run_2x2_study, structural_consistency_soft, validity_rates, CellId, EncoderKind, HeadKind, InterpMode,
    ReferenceRange,
};
use thermoforge::service::Service;
use thermoforge::vrrae::{interpolate, BottleneckMode, EncoderConfig, TrainSchedule, Vrrae, VrraeConfig};

use crate::config::{config_hash, pick, PipelineConfig};
use crate::errors::CliError;

#[derive(Debug, Parser)]
#[command(name = "thermoforge", version, about = "Generative thermal design: geometry data, FD fields, VRRAE and DeepONet surrogates")]
pub struct Cli {
    /// TOML pipeline config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Accept checkpoints bound to a different dataset or encoder.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a geometry dataset and its manifest.
    GenData(GenDataArgs),
    /// Solve thermal fields for a generated dataset.
    SolveFields(SolveArgs),
    /// Train the variational rank-reduction autoencoder.
    TrainVrrae(TrainArgs),
    /// Train the plain autoencoder ablation.
    TrainAe(TrainArgs),
    /// Train a DeepONet head on encoder codes.
    TrainDeeponet(HeadArgs),
    /// Train the convolutional head baseline on encoder codes.
    TrainCnn(HeadArgs),
    /// Run the encoder x head study and the latent validity metrics.
    Eval(EvalArgs),
    /// Decode a linear path between two dataset geometries.
    Interpolate(InterpolateArgs),
    /// Decode random draws from the latent prior.
    Sample(SampleArgs),
    /// Time the FD solver against the surrogate.
    Bench(BenchArgs),
    /// Serve the JSON inference API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub shape_size: Option<usize>,
    #[arg(long)]
    pub margin: Option<usize>,
    #[arg(long)]
    pub allow_overlap: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "dataset")]
    pub stem: String,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
pub enum TargetArg {
    Temperature,
    GradientMagnitude,
}

impl From<TargetArg> for TargetField {
    fn from(t: TargetArg) -> Self {
        match t {
            TargetArg::Temperature => TargetField::Temperature,
            TargetArg::GradientMagnitude => TargetField::GradientMagnitude,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SolverArg {
    Auto,
    Direct,
    Cg,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Number of samples to solve (default: all).
    #[arg(long)]
    pub subset: Option<usize>,
    #[arg(long, value_enum)]
    pub target: Option<TargetArg>,
    /// `default` or `paper-alt`.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub t_outer: Option<f64>,
    #[arg(long)]
    pub t_hole: Option<f64>,
    #[arg(long, value_enum)]
    pub solver: Option<SolverArg>,
    #[arg(long, default_value = "fields")]
    pub stem: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub beta_final: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct HeadArgs {
    /// Manifest with solved fields.
    #[arg(long)]
    pub fields: PathBuf,
    #[arg(long)]
    pub encoder_ckpt: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// `ae+cnn=PATH`, `ae+deeponet=PATH`, `vrrae+cnn=PATH`, `vrrae+deeponet=PATH`.
    #[arg(long = "cells", num_args = 1.., value_delimiter = ',')]
    pub cells: Vec<String>,
    #[arg(long)]
    pub fields: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Skip the interpolation/random validity rates.
    #[arg(long)]
    pub skip_validity: bool,
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Dataset index of the first endpoint.
    #[arg(long)]
    pub a: usize,
    #[arg(long)]
    pub b: usize,
    /// Number of evenly spaced t values including both endpoints.
    #[arg(long, default_value_t = 5)]
    pub steps: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub encoder_ckpt: PathBuf,
    #[arg(long)]
    pub deeponet_ckpt: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub n: usize,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub encoder_ckpt: PathBuf,
    #[arg(long)]
    pub deeponet_ckpt: PathBuf,
    /// Dataset whose test split backs `/samples`.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub bind: Option<String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(thermoforge::sha256_hex(&std::fs::read(path).with_context(|| format!("reading {}", path.display()))?))
}

#[derive(Debug, Serialize)]
struct RunLog<'a, C: Serialize> {
    command: &'a str,
    version: &'a str,
    seed: Option<u64>,
    config_hash: String,
    config: &'a C,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    wall_seconds: f64,
}

fn hash_paths(paths: &[&Path]) -> Result<BTreeMap<String, String>> {
    paths.iter().map(|p| Ok((p.display().to_string(), sha256_file(p)?))).collect()
}

fn write_run_log<C: Serialize>(path: &Path, command: &str, seed: Option<u64>, config: &C, inputs: &[&Path], outputs: &[&Path], started: Instant) -> Result<()> {
    let log = RunLog {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed,
        config_hash: config_hash(config),
        config,
        inputs: hash_paths(inputs)?,
        outputs: hash_paths(outputs)?,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&log)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_rasters(manifest_path: &Path) -> Result<(DatasetManifest, Vec<GeometryRaster>)> {
    let manifest = DatasetManifest::load(manifest_path).with_context(|| format!("loading {}", manifest_path.display()))?;
    let rasters = read_geometry_file(&DatasetManifest::resolve(manifest_path, &manifest.geometry_file))?;
    if rasters.len() != manifest.count {
        bail!(thermoforge::geomgen::GeomError::Format("geometry file count disagrees with manifest".into()));
    }
    Ok((manifest, rasters))
}

fn save_checkpoint(mut ckpt: Checkpoint, path: &Path, cfg_hash: &str) -> Result<String> {
    if let Some(obj) = ckpt.meta.as_object_mut() {
        obj.insert("config_hash".into(), json!(cfg_hash));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(ckpt.save(path).with_context(|| format!("writing {}", path.display()))?)
}

pub fn load_encoder(path: &Path) -> Result<(Vrrae<f32>, String)> {
    let (ckpt, sha) = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok((Vrrae::from_checkpoint(&ckpt)?, sha))
}

/// Error unless the encoder was trained on this dataset's geometry.
fn check_binding(encoder: &Vrrae<f32>, manifest: &DatasetManifest, force: bool) -> Result<()> {
    let current = manifest.geometry_hash();
    match &encoder.manifest_hash {
        Some(h) if *h == current || force => Ok(()),
        None if force => Ok(()),
        recorded => Err(CliError::ConfigMismatch {
            what: "encoder checkpoint".into(),
            recorded: recorded.clone().unwrap_or_else(|| "<none>".into()),
            current,
        }
        .into()),
    }
}

pub fn run(cli: Cli) -> Result<Value> {
    let cfg = PipelineConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenData(a) => gen_data(a, &cfg),
        Command::SolveFields(a) => solve_fields(a, &cfg),
        Command::TrainVrrae(a) => train_encoder(a, &cfg, BottleneckMode::Vrrae),
        Command::TrainAe(a) => train_encoder(a, &cfg, BottleneckMode::PlainAe),
        Command::TrainDeeponet(a) => train_head(a, &cfg, HeadKind::DeepOnet, cli.force),
        Command::TrainCnn(a) => train_head(a, &cfg, HeadKind::Cnn, cli.force),
        Command::Eval(a) => eval(a, &cfg, cli.force),
        Command::Interpolate(a) => interpolate_cmd(a),
        Command::Sample(a) => sample_cmd(a, &cfg),
        Command::Bench(a) => bench_cmd(a, &cfg, cli.force),
        Command::Serve(a) => serve_cmd(a, &cfg, cli.force),
    }
}

fn gen_data(a: GenDataArgs, cfg: &PipelineConfig) -> Result<Value> {
    let started = Instant::now();
    let g = &cfg.geometry;
    let m = pick(a.m, &g.m, 64);
    let n = pick(a.n, &g.n, 64);
    let seed = pick(a.seed, &cfg.seed, 0);
    let mut spec = GeometrySpec::new(m, n, seed);
    spec.shape_size = pick(a.shape_size, &g.shape_size, spec.shape_size);
    spec.margin = pick(a.margin, &g.margin, spec.margin);
    spec.allow_overlap = a.allow_overlap || g.allow_overlap.unwrap_or(false);
    let count = pick(a.count, &g.count, 2000);
    let out = a.out.or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("."));
    let (path, manifest) = write_dataset(&spec, count, &out, &a.stem)?;
    let geo = DatasetManifest::resolve(&path, &manifest.geometry_file);
    let effective = json!({ "spec": spec, "count": count });
    write_run_log(&out.join(format!("{}.gen-data.run.json", a.stem)), "gen-data", Some(seed), &effective, &[], &[&path, &geo], started)?;
    Ok(json!({ "manifest": path, "count": count, "geometry_sha256": manifest.geometry_file_sha256, "train_hole_fraction": manifest.train_hole_fraction }))
}

pub fn thermal_config(preset: Option<&str>, section: &crate::config::ThermalSection) -> Result<ThermalConfig> {
    let name = preset.map(String::from).or_else(|| section.preset.clone()).unwrap_or_else(|| "default".into());
    let mut t = ThermalConfig::preset(&name).ok_or_else(|| CliError::InvalidArgument(format!("unknown thermal preset `{name}` (default, paper-alt)")))?;
    if let Some(v) = section.t_outer {
        t.t_outer = v;
    }
    if let Some(v) = section.t_hole {
        t.t_hole = v;
    }
    if let Some(v) = section.target {
        t.target_field = v;
    }
    if let Some(v) = section.solver {
        t.solver = v;
    }
    if let Some(v) = section.tol {
        t.tol = v;
    }
    Ok(t)
}

fn solve_fields(a: SolveArgs, cfg: &PipelineConfig) -> Result<Value> {
    let started = Instant::now();
    let mut thermal = thermal_config(a.preset.as_deref(), &cfg.thermal)?;
    if let Some(v) = a.t_outer {
        thermal.t_outer = v;
    }
    if let Some(v) = a.t_hole {
        thermal.t_hole = v;
    }
    if let Some(t) = a.target {
        thermal.target_field = t.into();
    }
    if let Some(s) = a.solver {
        thermal.solver = match s {
            SolverArg::Auto => SolverKind::Auto,
            SolverArg::Direct => SolverKind::Direct,
            SolverArg::Cg => SolverKind::ConjugateGradient,
        };
    }
    let before = DatasetManifest::load(&a.manifest)?;
    let subset = pick(a.subset, &cfg.thermal.subset, before.count);
    let manifest = solve_batch(&a.manifest, &thermal, subset, &a.stem)?;
    let fs = manifest.field.as_ref().expect("attached by solve_batch");
    let field_path = DatasetManifest::resolve(&a.manifest, &fs.field_file);
    let effective = json!({ "thermal": thermal, "subset": subset });
    let geo = DatasetManifest::resolve(&a.manifest, &manifest.geometry_file);
    write_run_log(&sidecar(&field_path, ".run.json"), "solve-fields", None, &effective, &[&geo], &[&field_path, &a.manifest], started)?;
    Ok(json!({ "fields": field_path, "solved": fs.sample_indices.len() - fs.failed.len(), "failed": fs.failed.len(), "sha256": fs.field_file_sha256 }))
}

pub fn vrrae_config(m: usize, n: usize, mode: BottleneckMode, s: &crate::config::VrraeSection) -> VrraeConfig {
    let mut c = VrraeConfig::new(m, n, mode);
    c.latent_dim = s.latent_dim.unwrap_or(c.latent_dim);
    c.k_star = s.k_star.unwrap_or(c.k_star);
    if let Some(ch) = &s.encoder_channels {
        c.encoder = EncoderConfig { channels: ch.clone(), ..c.encoder };
    }
    if let Some(ch) = &s.decoder_channels {
        c.decoder.channels = ch.clone();
    }
    c.decoder.seed_channels = s.seed_channels.unwrap_or(c.decoder.seed_channels);
    c
}

fn train_encoder(a: TrainArgs, cfg: &PipelineConfig, mode: BottleneckMode) -> Result<Value> {
    let started = Instant::now();
    let (manifest, rasters) = load_rasters(&a.manifest)?;
    let s = &cfg.vrrae;
    let model_cfg = vrrae_config(manifest.spec.grid_m, manifest.spec.grid_n, mode, s);
    let seed = pick(a.seed, &cfg.seed, 0);
    let d = TrainSchedule::desk(seed);
    let schedule = TrainSchedule {
        steps: pick(a.steps, &s.steps, d.steps),
        batch_size: pick(a.batch_size, &s.batch_size, d.batch_size),
        lr: pick(a.lr, &s.lr, d.lr),
        beta_final: pick(a.beta_final, &s.beta_final, d.beta_final),
        anneal_fraction: s.anneal_fraction.unwrap_or(d.anneal_fraction),
        ..d
    };
    let train: Vec<&GeometryRaster> = manifest.indices(Split::Train).into_iter().map(|i| &rasters[i]).collect();
    let val: Vec<&GeometryRaster> = manifest.indices(Split::Val).into_iter().map(|i| &rasters[i]).collect();
    let mut model = Vrrae::<f32>::new(model_cfg.clone(), seed)?;
    model.manifest_hash = Some(manifest.geometry_hash());
    let steps_path = sidecar(&a.out, ".steps.jsonl");
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut steps_log = String::new();
    let total = schedule.steps;
    let report = model.train(&train, &val, &schedule, |s| {
        steps_log.push_str(&serde_json::to_string(s).expect("step log serializes"));
        steps_log.push('\n');
        if (s.step + 1) % 500 == 0 || s.step + 1 == total {
            eprintln!("step {}/{total} loss {:.5} rec {:.5} kl {:.4} beta {:.3}", s.step + 1, s.loss.total, s.loss.rec, s.loss.kl, s.beta);
        }
    })?;
    std::fs::write(&steps_path, steps_log)?;
    let effective = json!({ "model": model_cfg, "schedule": schedule });
    let h = config_hash(&effective);
    let sha = save_checkpoint(model.to_checkpoint()?, &a.out, &h)?;
    let geo = DatasetManifest::resolve(&a.manifest, &manifest.geometry_file);
    write_run_log(&sidecar(&a.out, ".run.json"), mode.tag(), Some(seed), &effective, &[&a.manifest, &geo], &[&a.out], started)?;
    let test: Vec<&GeometryRaster> = manifest.indices(Split::Test).into_iter().map(|i| &rasters[i]).collect();
    let test_mse = if test.is_empty() { None } else { Some(reconstruction_mse(&model, &test)?) };
    Ok(json!({ "checkpoint": a.out, "sha256": sha, "final_val_mse": report.epochs.last().and_then(|e| e.val_mse), "test_mse": test_mse }))
}

fn codes_for(encoder: &Vrrae<f32>, samples: &[&FieldSample]) -> Result<Vec<Vec<f64>>> {
    let rasters: Vec<&GeometryRaster> = samples.iter().map(|s| &s.raster).collect();
    Ok(encoder.project_all(&rasters, 64)?.into_iter().map(|c| c.alpha).collect())
}

fn train_head(a: HeadArgs, cfg: &PipelineConfig, kind: HeadKind, force: bool) -> Result<Value> {
    let started = Instant::now();
    let (manifest, data) = FieldDataset::load(&a.fields).with_context(|| format!("loading fields of {}", a.fields.display()))?;
    let (encoder, enc_sha) = load_encoder(&a.encoder_ckpt).map_err(|e| e.context(thermoforge::deeponet::HeadError::MissingCheckpoint(a.encoder_ckpt.display().to_string())))?;
    check_binding(&encoder, &manifest, force)?;
    let train = data.split(Split::Train);
    let codes = codes_for(&encoder, &train)?;
    let (m, n, k) = (manifest.spec.grid_m, manifest.spec.grid_n, encoder.config.k_star);
    let seed = pick(a.seed, &cfg.seed, 0);
    let enc_ref = EncoderRef { path: a.encoder_ckpt.display().to_string(), sha256: enc_sha, kind: encoder.config.mode.tag().into() };
    let log = |e: usize, l: f64| eprintln!("epoch {} loss {l:.6}", e + 1);
    let (ckpt, effective, report) = match kind {
        HeadKind::DeepOnet => {
            let s = &cfg.deeponet;
            let mut c = DeepOnetConfig::new(m, n, k);
            c.branch_hidden = s.branch_hidden.clone().unwrap_or(c.branch_hidden);
            c.trunk_hidden = s.trunk_hidden.clone().unwrap_or(c.trunk_hidden);
            c.p = s.p.unwrap_or(c.p);
            c.output_bias = s.output_bias.unwrap_or(c.output_bias);
            let d = HeadTrainConfig::deeponet_desk(seed);
            let t = HeadTrainConfig { epochs: pick(a.epochs, &s.epochs, d.epochs), batch_size: pick(a.batch_size, &s.batch_size, d.batch_size), lr: pick(a.lr, &s.lr, d.lr), seed };
            let mut model = DeepOnet::<f32>::new(c.clone(), data.kind, seed)?;
            model.encoder = Some(enc_ref);
            let report = model.train(&codes, &train, &t, log)?;
            (model.to_checkpoint(), json!({ "model": c, "train": t }), report)
        }
        HeadKind::Cnn => {
            let s = &cfg.cnn;
            let mut c = CnnHeadConfig::new(m, n, k);
            if let Some(ch) = &s.decoder_channels {
                c.decoder.channels = ch.clone();
            }
            c.decoder.seed_channels = s.seed_channels.unwrap_or(c.decoder.seed_channels);
            let d = HeadTrainConfig::cnn_desk(seed);
            let t = HeadTrainConfig { epochs: pick(a.epochs, &s.epochs, d.epochs), batch_size: pick(a.batch_size, &s.batch_size, d.batch_size), lr: pick(a.lr, &s.lr, d.lr), seed };
            let mut head = CnnHead::<f32>::new(c.clone(), data.kind, seed)?;
            head.encoder = Some(enc_ref);
            let report = head.train(&codes, &train, &t, log)?;
            (head.to_checkpoint(), json!({ "model": c, "train": t }), report)
        }
    };
    let sha = save_checkpoint(ckpt, &a.out, &config_hash(&effective))?;
    let fields_file = DatasetManifest::resolve(&a.fields, &manifest.field.as_ref().expect("loaded").field_file);
    write_run_log(&sidecar(&a.out, ".run.json"), if kind == HeadKind::DeepOnet { "train-deeponet" } else { "train-cnn" }, Some(seed), &effective, &[&a.fields, &fields_file, &a.encoder_ckpt], &[&a.out], started)?;
    Ok(json!({ "checkpoint": a.out, "sha256": sha, "final_loss": report.epoch_loss.last(), "steps": report.steps }))
}

/// A trained head loaded with its encoder.
pub struct LoadedHead {
    pub predictor: Box<dyn FieldPredictor + Send>,
    pub encoder: Vrrae<f32>,
    pub encoder_path: PathBuf,
}

/// Head encoders are recorded by the path given at training time; relative
/// paths are tried as-is and then against the head checkpoint's directory.
fn resolve_encoder(head_path: &Path, recorded: &str) -> PathBuf {
    let p = PathBuf::from(recorded);
    if p.is_absolute() || p.exists() {
        return p;
    }
    head_path.parent().map(|d| d.join(p.file_name().unwrap_or_default())).unwrap_or(p)
}

pub fn load_head(path: &Path, force: bool) -> Result<LoadedHead> {
    let (ckpt, _) = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let predictor: Box<dyn FieldPredictor + Send> = match ckpt.kind.as_str() {
        "deeponet" => Box::new(CachedDeepOnet::new(DeepOnet::<f32>::from_checkpoint(&ckpt)?)),
        "cnn_head" => Box::new(CnnHead::<f32>::from_checkpoint(&ckpt)?),
        other => bail!(thermoforge::checkpoint::CheckpointError::WrongKind { expected: "deeponet or cnn_head".into(), found: other.into() }),
    };
    let enc = predictor.encoder().cloned().ok_or_else(|| thermoforge::deeponet::HeadError::MissingCheckpoint(format!("{} records no encoder", path.display())))?;
    let encoder_path = resolve_encoder(path, &enc.path);
    let (encoder, sha) = load_encoder(&encoder_path).map_err(|e| e.context(thermoforge::deeponet::HeadError::MissingCheckpoint(encoder_path.display().to_string())))?;
    if sha != enc.sha256 && !force {
        return Err(CliError::ConfigMismatch { what: format!("encoder of {}", path.display()), recorded: enc.sha256, current: sha }.into());
    }
    Ok(LoadedHead { predictor, encoder, encoder_path })
}

fn parse_cells(specs: &[String]) -> Result<BTreeMap<CellId, PathBuf>> {
    let mut out = BTreeMap::new();
    for s in specs {
        let (key, path) = s.split_once('=').ok_or_else(|| CliError::InvalidArgument(format!("cell `{s}` is not KEY=PATH")))?;
        let id = match key.to_ascii_lowercase().as_str() {
            "ae+cnn" => CellId::ALL[0],
            "ae+deeponet" => CellId::ALL[1],
            "vrrae+cnn" => CellId::ALL[2],
            "vrrae+deeponet" => CellId::ALL[3],
            _ => return Err(CliError::InvalidArgument(format!("unknown cell `{key}`")).into()),
        };
        out.insert(id, PathBuf::from(path));
    }
    for id in CellId::ALL {
        if !out.contains_key(&id) {
            return Err(CliError::MissingCell(id.label()).into());
        }
    }
    Ok(out)
}

fn eval(a: EvalArgs, cfg: &PipelineConfig, force: bool) -> Result<Value> {
    let started = Instant::now();
    let cells = parse_cells(&a.cells)?;
    let (manifest, data) = FieldDataset::load(&a.fields)?;
    let test = data.split(Split::Test);
    let mut preds = BTreeMap::new();
    let mut encoders: BTreeMap<EncoderKind, (Vrrae<f32>, PathBuf)> = BTreeMap::new();
    for (id, path) in &cells {
        let head = load_head(path, force)?;
        let want = match id.encoder {
            EncoderKind::Ae => BottleneckMode::PlainAe,
            EncoderKind::Vrrae => BottleneckMode::Vrrae,
        };
        if head.encoder.config.mode != want {
            return Err(CliError::InvalidArgument(format!("cell {} uses a {} encoder", id.label(), head.encoder.config.mode.tag())).into());
        }
        if head.predictor.target() != data.kind {
            return Err(CliError::InvalidArgument(format!("cell {} predicts {:?}, fields are {:?}", id.label(), head.predictor.target(), data.kind)).into());
        }
        check_binding(&head.encoder, &manifest, force)?;
        let codes = codes_for(&head.encoder, &test)?;
        let refs: Vec<&[f64]> = codes.iter().map(|c| c.as_slice()).collect();
        preds.insert(*id, head.predictor.predict_fields(&refs)?);
        encoders.entry(id.encoder).or_insert((head.encoder, head.encoder_path));
    }
    let study = run_2x2_study(data.kind, &preds, &test)?;
    let mut report = json!({ "study": study });
    if !a.skip_validity {
        let (_, rasters) = load_rasters(&a.fields)?;
        let pool: Vec<&GeometryRaster> = manifest.indices(Split::Test).into_iter().map(|i| &rasters[i]).collect();
        let range = ReferenceRange::from_manifest(&manifest);
        let pairs = pick(a.pairs, &cfg.eval.pairs, 500);
        let samples = pick(a.samples, &cfg.eval.samples, 500);
        let seed = pick(a.seed, &cfg.seed, 0);
        let mut table1 = serde_json::Map::new();
        for (kind, (enc, _)) in &encoders {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rates = validity_rates(enc, &pool, &range, pairs, samples, InterpMode::Uniform, &mut rng)?;
            let label = if *kind == EncoderKind::Vrrae { "VRRAE" } else { "AE" };
            table1.insert(
                label.into(),
                json!({
                    "reconstruction_mse": reconstruction_mse(enc, &pool)?,
                    "reconstruction_validity": reconstruction_validity_rate(enc, &pool, &range)?,
                    "interp_rate": rates.interp_rate,
                    "random_rate": rates.random_rate,
                    "pairs": pairs,
                    "samples": samples,
                }),
            );
        }
        report["table1"] = Value::Object(table1);
    }
    if let Some(dir) = a.report.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&a.report, serde_json::to_string_pretty(&report)? + "\n")?;
    let table = study.to_table();
    std::fs::write(a.report.with_extension("txt"), &table)?;
    eprint!("{table}");
    let inputs: Vec<&Path> = cells.values().map(|p| p.as_path()).chain([a.fields.as_path()]).collect();
    let effective = json!({ "cells": cells.iter().map(|(k, v)| (k.label(), v)).collect::<BTreeMap<_, _>>(), "pairs": a.pairs, "samples": a.samples });
    write_run_log(&sidecar(&a.report, ".run.json"), "eval", a.seed, &effective, &inputs, &[&a.report], started)?;
    Ok(json!({ "report": a.report, "best": study.best_cell().map(|c| c.label.clone()) }))
}

fn write_png(path: &Path, m: usize, n: usize, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::GrayImage::from_raw(n as u32, m as u32, bytes).expect("buffer matches dimensions").save(path).with_context(|| format!("writing {}", path.display()))
}

fn interpolate_cmd(a: InterpolateArgs) -> Result<Value> {
    let started = Instant::now();
    let (model, _) = load_encoder(&a.ckpt)?;
    let (manifest, rasters) = load_rasters(&a.manifest)?;
    for idx in [a.a, a.b] {
        if idx >= rasters.len() {
            return Err(CliError::InvalidArgument(format!("index {idx} outside dataset of {}", rasters.len())).into());
        }
    }
    if a.steps < 2 {
        return Err(CliError::InvalidArgument("--steps must be at least 2".into()).into());
    }
    let range = ReferenceRange::from_manifest(&manifest);
    let ca = model.project(&rasters[a.a])?;
    let cb = model.project(&rasters[a.b])?;
    std::fs::create_dir_all(&a.out)?;
    let (m, n) = (model.config.grid_m, model.config.grid_n);
    let mut entries = Vec::new();
    let mut outputs = Vec::new();
    for s in 0..a.steps {
        let t = s as f64 / (a.steps - 1) as f64;
        let code = interpolate(&ca, &cb, t)?;
        let soft = model.decode(&code)?;
        let validity = structural_consistency_soft(m, n, &soft, &range);
        let png = a.out.join(format!("interp_{s:02}.png"));
        write_png(&png, m, n, &GeometryRaster::binarize(m, n, &soft).to_f64())?;
        outputs.push(png);
        entries.push(json!({ "t": t, "alpha": code.alpha, "validity": validity }));
    }
    let summary = a.out.join("interpolation.json");
    std::fs::write(&summary, serde_json::to_string_pretty(&entries)? + "\n")?;
    outputs.push(summary);
    let outs: Vec<&Path> = outputs.iter().map(|p| p.as_path()).collect();
    write_run_log(&a.out.join("interpolate.run.json"), "interpolate", None, &json!({ "a": a.a, "b": a.b, "steps": a.steps }), &[&a.ckpt, &a.manifest], &outs, started)?;
    let valid = entries.iter().filter(|e| e["validity"]["valid"] == true).count();
    Ok(json!({ "out": a.out, "steps": a.steps, "valid": valid }))
}

fn sample_cmd(a: SampleArgs, cfg: &PipelineConfig) -> Result<Value> {
    let started = Instant::now();
    let (model, _) = load_encoder(&a.ckpt)?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let range = ReferenceRange::from_manifest(&manifest);
    let seed = pick(a.seed, &cfg.seed, 0);
    let codes = model.sample_prior(&mut ChaCha8Rng::seed_from_u64(seed), a.count)?;
    std::fs::create_dir_all(&a.out)?;
    let (m, n) = (model.config.grid_m, model.config.grid_n);
    let mut entries = Vec::new();
    let mut outputs = Vec::new();
    for (i, code) in codes.iter().enumerate() {
        let soft = model.decode(code)?;
        let png = a.out.join(format!("sample_{i:03}.png"));
        write_png(&png, m, n, &GeometryRaster::binarize(m, n, &soft).to_f64())?;
        outputs.push(png);
        entries.push(json!({ "alpha": code.alpha, "validity": structural_consistency_soft(m, n, &soft, &range) }));
    }
    let summary = a.out.join("samples.json");
    std::fs::write(&summary, serde_json::to_string_pretty(&entries)? + "\n")?;
    outputs.push(summary);
    let outs: Vec<&Path> = outputs.iter().map(|p| p.as_path()).collect();
    write_run_log(&a.out.join("sample.run.json"), "sample", Some(seed), &json!({ "count": a.count }), &[&a.ckpt, &a.manifest], &outs, started)?;
    let valid = entries.iter().filter(|e| e["validity"]["valid"] == true).count();
    Ok(json!({ "out": a.out, "count": a.count, "valid": valid }))
}

fn load_deeponet(path: &Path) -> Result<CachedDeepOnet> {
    let (ckpt, _) = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(CachedDeepOnet::new(DeepOnet::<f32>::from_checkpoint(&ckpt)?))
}

fn bench_cmd(a: BenchArgs, cfg: &PipelineConfig, force: bool) -> Result<Value> {
    let started = Instant::now();
    let (manifest, rasters) = load_rasters(&a.manifest)?;
    let (encoder, _) = load_encoder(&a.encoder_ckpt)?;
    check_binding(&encoder, &manifest, force)?;
    let head = load_deeponet(&a.deeponet_ckpt)?;
    let thermal = match &manifest.field {
        Some(fs) => fs.thermal.clone(),
        None => thermal_config(None, &cfg.thermal)?,
    };
    let pool: Vec<GeometryRaster> = manifest.indices(Split::Test).into_iter().chain(manifest.indices(Split::Train)).take(a.n).map(|i| rasters[i].clone()).collect();
    let report = run_bench(&pool, &thermal, &encoder, &head)?;
    if !report.meets_sample_minimum {
        eprintln!("warning: {} samples is below the reporting minimum of {}", report.samples, thermoforge::bench::MIN_SAMPLES);
    }
    let value = serde_json::to_value(&report)?;
    if let Some(path) = &a.report {
        std::fs::write(path, serde_json::to_string_pretty(&report)? + "\n")?;
        write_run_log(&sidecar(path, ".run.json"), "bench", None, &json!({ "n": a.n, "thermal": thermal }), &[&a.manifest, &a.encoder_ckpt, &a.deeponet_ckpt], &[path], started)?;
    }
    Ok(value)
}

/// Build the inference service from checkpoints (slow; run off the async runtime).
pub fn build_service(encoder_ckpt: &Path, deeponet_ckpt: &Path, manifest_path: &Path, force: bool) -> Result<Service> {
    let (manifest, rasters) = load_rasters(manifest_path)?;
    let (encoder, _) = load_encoder(encoder_ckpt)?;
    check_binding(&encoder, &manifest, force)?;
    let head = load_deeponet(deeponet_ckpt)?;
    let pool = manifest.indices(Split::Test).into_iter().map(|i| rasters[i].clone()).collect();
    Ok(Service::new(encoder, head, ReferenceRange::from_manifest(&manifest), pool)?)
}

fn serve_cmd(a: ServeArgs, cfg: &PipelineConfig, force: bool) -> Result<Value> {
    let bind = a.bind.or_else(|| cfg.serve.bind.clone()).unwrap_or_else(|| "127.0.0.1:8080".into());
    let runtime = crate::serve::runtime()?;
    runtime.block_on(crate::serve::serve(&bind, move || build_service(&a.encoder_ckpt, &a.deeponet_ckpt, &a.manifest, force)))?;
    Ok(json!({ "stopped": bind }))
}
