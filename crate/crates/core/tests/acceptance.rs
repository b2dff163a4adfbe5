//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and exits
//! non-zero if any fails.
//!
//! `cargo test --test acceptance -- P1 P4` runs a subset. The trained
//! criteria (P5, P6) use the reduced-scale protocol by default; set
//! `THERMOFORGE_ACCEPTANCE_SCALE=desk` for the 64×64, 20k-step protocol.

use std::collections::{BTreeMap, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use thermoforge::bench::run_bench;
use thermoforge::deeponet::{CachedDeepOnet, CnnHead, CnnHeadConfig, DeepOnet, DeepOnetConfig, DeepOnetObjective, EncoderRef, FieldPredictor, HeadTrainConfig};
use thermoforge::geomgen::{generate_dataset, place_shapes, rasterize, write_dataset, GeometryRaster, GeometrySpec, Split};
use thermoforge::heatfd::{
    classify, grid_spacing, solve_batch, solve_dirichlet, solve_steady, solve_target, FieldDataset, FieldSample, PixelClass, SolverKind, TargetField,
    ThermalConfig,
};
use thermoforge::metrics::{
    nmse, reconstruction_mse, run_2x2_study, structural_consistency, validity_rates, CellId, EncoderKind, HeadKind, InterpMode, ReferenceRange, StudyReport,
};
use thermoforge::ndmath::{adam_step, grad_check, orthonormality_defect, truncated_svd, AdamConfig, Matrix, OptimizerState, ParamStore, Tensor};
use thermoforge::vrrae::{
    kl_term, rasters_to_tensor, Basis, BottleneckMode, DecoderConfig, EncoderConfig, TrainSchedule, Vrrae, VrraeConfig, VrraeObjective,
};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- P1

fn p1_solver() -> Check {
    let start = Instant::now();
    let cfg = ThermalConfig { solver: SolverKind::Direct, ..ThermalConfig::default() };

    let solid = GeometryRaster::solid(32, 32);
    let (t, _) = solve_steady(&solid, &cfg).map_err(e2s)?;
    let dev = t.values.iter().map(|v| (v - cfg.t_outer).abs()).fold(0.0, f64::max);
    let (g, _) = solve_target(&solid, &ThermalConfig { target_field: TargetField::GradientMagnitude, ..cfg.clone() }).map_err(e2s)?;
    let gmax = g.values.iter().cloned().fold(0.0, f64::max);
    ensure(dev == 0.0 && gmax <= 1e-10, format!("hole-free plate: |T - T_outer| {dev:e}, |grad T| {gmax:e}"))?;

    let (_, rasters) = generate_dataset(&GeometrySpec::new(16, 16, 3), 10).map_err(e2s)?;
    let mut dense_err: f64 = 0.0;
    for r in &rasters {
        let (t, _) = solve_steady(r, &cfg).map_err(e2s)?;
        let dense = dense_solve(r, &cfg);
        dense_err = dense_err.max(t.values.iter().zip(&dense).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    ensure(dense_err <= 1e-8, format!("16x16 sparse vs dense: {dense_err:e}"))?;

    let (_, rasters) = generate_dataset(&GeometrySpec::new(32, 32, 11), 100).map_err(e2s)?;
    let mut violations = 0;
    for r in &rasters {
        let (t, _) = solve_steady(r, &cfg).map_err(e2s)?;
        violations += t
            .interior_values()
            .iter()
            .filter(|v| **v < cfg.t_hole - 1e-9 || **v > cfg.t_outer + 1e-9)
            .count();
    }
    ensure(violations == 0, format!("maximum principle violated at {violations} pixels"))?;

    let errs: Vec<f64> = [17, 33, 65].iter().map(|&s| harmonic_error(s, &cfg)).collect::<Result<_, _>>()?;
    let ratios = [errs[0] / errs[1], errs[1] / errs[2]];
    ensure(ratios.iter().all(|r| (3.0..=5.0).contains(r)), format!("refinement ratios {ratios:?}"))?;

    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 5.0, format!("runtime {secs:.2}s"))?;
    Ok(format!("dense diff {dense_err:.1e}, 100 samples within bounds, refinement ratios {:.2}/{:.2}, {secs:.2}s", ratios[0], ratios[1]))
}

/// Independent dense assembly of the 5-point Laplacian on interior pixels.
fn dense_solve(r: &GeometryRaster, cfg: &ThermalConfig) -> Vec<f64> {
    let (m, n) = r.dims();
    let (hx, hy) = grid_spacing(m, n, cfg.plate_extent);
    let (cx, cy) = (1.0 / (hx * hx), 1.0 / (hy * hy));
    let fixed = |i: usize, j: usize| {
        if i == 0 || j == 0 || i == m - 1 || j == n - 1 {
            Some(cfg.t_outer)
        } else if r.is_hole(i, j) {
            Some(cfg.t_hole)
        } else {
            None
        }
    };
    let mut index = vec![usize::MAX; m * n];
    let mut unknowns = Vec::new();
    for i in 0..m {
        for j in 0..n {
            if fixed(i, j).is_none() {
                index[i * n + j] = unknowns.len();
                unknowns.push((i, j));
            }
        }
    }
    let u = unknowns.len();
    let mut a = DMatrix::<f64>::zeros(u, u);
    let mut b = DVector::<f64>::zeros(u);
    for (row, &(i, j)) in unknowns.iter().enumerate() {
        a[(row, row)] = 2.0 * cx + 2.0 * cy;
        for (ni, nj, c) in [(i, j - 1, cx), (i, j + 1, cx), (i - 1, j, cy), (i + 1, j, cy)] {
            match fixed(ni, nj) {
                Some(v) => b[row] += c * v,
                None => a[(row, index[ni * n + nj])] -= c,
            }
        }
    }
    let x = a.lu().solve(&b).expect("nonsingular");
    let mut out: Vec<f64> = (0..m * n).map(|p| fixed(p / n, p % n).unwrap_or(0.0)).collect();
    for (row, &(i, j)) in unknowns.iter().enumerate() {
        out[i * n + j] = x[row];
    }
    out
}

/// Max error against `sin(πx)·sinh(πy)/sinh(π)` on the unit square.
fn harmonic_error(side: usize, cfg: &ThermalConfig) -> Result<f64, String> {
    let h = 1.0 / (side - 1) as f64;
    let exact = |i: usize, j: usize| {
        let (x, y) = (j as f64 * h, i as f64 * h);
        (std::f64::consts::PI * x).sin() * (std::f64::consts::PI * y).sinh() / std::f64::consts::PI.sinh()
    };
    let mask = classify(&GeometryRaster::solid(side, side));
    let dirichlet: Vec<f64> = (0..side * side).map(|p| if mask[p] == PixelClass::Interior { 0.0 } else { exact(p / side, p % side) }).collect();
    let (t, _) = solve_dirichlet(side, side, &mask, &dirichlet, (h, h), cfg).map_err(e2s)?;
    Ok((0..side * side).filter(|p| mask[*p] == PixelClass::Interior).map(|p| (t.values[p] - exact(p / side, p % side)).abs()).fold(0.0, f64::max))
}

// ---------------------------------------------------------------- P2

fn tiny_vrrae(mode: BottleneckMode) -> VrraeConfig {
    VrraeConfig {
        latent_dim: 8,
        k_star: 3,
        encoder: EncoderConfig { channels: vec![2, 3], ..Default::default() },
        decoder: DecoderConfig { seed_channels: 3, channels: vec![3, 2], ..Default::default() },
        ..VrraeConfig::new(16, 16, mode)
    }
}

fn small_rasters(count: usize, seed: u64) -> Vec<GeometryRaster> {
    let spec = GeometrySpec { shape_size: 2, ..GeometrySpec::new(16, 16, seed) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rasterize(&place_shapes(&spec, &mut rng).unwrap(), &spec)).collect()
}

fn p2_linear_algebra() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let left = Matrix::from_fn(60, 6, |_, _| rng.random_range(-1.0..1.0));
    let right = Matrix::from_fn(6, 200, |_, _| rng.random_range(-1.0..1.0));
    let y = left.matmul(&right);
    let svd = truncated_svd(&y, 6).map_err(e2s)?;
    let rel = svd.reconstruct().sub(&y).frobenius() / y.frobenius();
    ensure(rel <= 1e-5, format!("known-rank reconstruction {rel:e}"))?;
    let defect = orthonormality_defect(&svd.u).max(orthonormality_defect(&Basis::new(&svd.u).u));
    ensure(defect <= 1e-5, format!("orthonormality {defect:e}"))?;

    let mut store = ParamStore::<f64>::new();
    store.add("w", &[5, 4], (0..20).map(|_| rng.random_range(-1.0..1.0)).collect());
    store.add("b", &[4], (0..4).map(|_| rng.random_range(-1.0..1.0)).collect());
    let before = store.clone();
    let mut opt = OptimizerState::new(&store, AdamConfig::with_lr(0.0));
    for _ in 0..5 {
        let mut g = store.zero_grads();
        for buf in 0..store.len() {
            g.get_mut(thermoforge::ndmath::ParamId(buf)).iter_mut().for_each(|v| *v = rng.random_range(-3.0..3.0));
        }
        adam_step(&mut store, &g, &mut opt).map_err(e2s)?;
    }
    ensure(store == before, "Adam with lr=0 moved parameters")?;

    let model = Vrrae::<f64>::new(tiny_vrrae(BottleneckMode::Vrrae), 6).map_err(e2s)?;
    let rs = small_rasters(4, 1);
    let refs: Vec<&GeometryRaster> = rs.iter().collect();
    let basis = truncated_svd(&model.encode_batch(&refs).map_err(e2s)?, 3).map_err(e2s)?.u;
    let noise: Vec<f64> = (0..12).map(|i| ((i as f64) * 1.3).sin()).collect();
    let obj = VrraeObjective { model: &model, x: rasters_to_tensor(&refs).map_err(e2s)?, noise: Some(noise), beta: 0.7, basis: Some(basis) };
    let rv = grad_check(&obj, &model.params, 80, 17);
    ensure(rv.passes(1e-4), format!("VRRAE grad check {rv:?}"))?;

    let don = DeepOnet::<f64>::new(
        DeepOnetConfig { grid_m: 6, grid_n: 5, k_star: 3, branch_hidden: vec![5, 4], trunk_hidden: vec![6, 5, 4], p: 4, output_bias: true },
        TargetField::Temperature,
        5,
    )
    .map_err(e2s)?;
    let codes = Tensor::from_vec(&[3, 3], (0..9).map(|_| rng.random_range(-1.0..1.0)).collect()).map_err(e2s)?;
    let coords = Tensor::from_vec(&[4, 2], (0..8).map(|_| rng.random_range(0.0..1.0)).collect()).map_err(e2s)?;
    let pairs: Vec<(usize, usize)> = (0..10).map(|i| (i % 3, (i * 7) % 4)).collect();
    let targets: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
    let obj = DeepOnetObjective { model: &don, codes, coords, pairs, targets };
    let rd = grad_check(&obj, &don.params, 80, 1);
    ensure(rd.passes(1e-4), format!("DeepONet grad check {rd:?}"))?;

    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, format!("runtime {secs:.1}s"))?;
    Ok(format!(
        "rank-6 rel {rel:.1e}, orthonormality {defect:.1e}, grad check VRRAE {:.1e} DeepONet {:.1e}, {secs:.1}s",
        rv.max_rel_error, rd.max_rel_error
    ))
}

// ---------------------------------------------------------------- P3

fn p3_losses() -> Check {
    let k0 = kl_term(&[0.0], &[0.0], 1);
    let k1 = kl_term(&[1.0], &[0.0], 1);
    ensure(k0.abs() < 1e-15 && (k1 - 0.5).abs() < 1e-15, format!("kl(0,1) = {k0}, kl(1,1) = {k1}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut min_kl = f64::INFINITY;
    for _ in 0..1000 {
        let len = rng.random_range(1..20);
        let n = rng.random_range(1..6);
        let mu: Vec<f64> = (0..len).map(|_| rng.random_range(-5.0..5.0)).collect();
        let ls: Vec<f64> = (0..len).map(|_| rng.random_range(-6.0..2.0)).collect();
        min_kl = min_kl.min(kl_term(&mu, &ls, n));
    }
    ensure(min_kl >= 0.0, format!("negative KL {min_kl}"))?;

    let y: Vec<f64> = (0..500).map(|_| rng.random_range(-2.0..7.0)).collect();
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let base = nmse(&vec![mean; y.len()], &y).map_err(e2s)?;
    ensure((base - 1.0).abs() <= 1e-10, format!("mean predictor NMSE {base}"))?;
    let y_hat: Vec<f64> = y.iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
    let plain = nmse(&y_hat, &y).map_err(e2s)?;
    let (a, b) = (-3.7, 12.5);
    let scaled = nmse(&y_hat.iter().map(|v| a * v + b).collect::<Vec<_>>(), &y.iter().map(|v| a * v + b).collect::<Vec<_>>()).map_err(e2s)?;
    ensure((plain - scaled).abs() <= 1e-10, format!("affine NMSE {plain} vs {scaled}"))?;
    Ok(format!("min KL over 1000 draws {min_kl:.3e}, mean-predictor NMSE {base:.12}, affine diff {:.1e}", (plain - scaled).abs()))
}

// ---------------------------------------------------------------- P4

fn p4_trunk_reuse() -> Check {
    let (m, n) = (20, 24);
    let mut model = DeepOnet::<f64>::new(
        DeepOnetConfig { branch_hidden: vec![32, 32], trunk_hidden: vec![32, 32, 32], p: 32, ..DeepOnetConfig::new(m, n, 8) },
        TargetField::GradientMagnitude,
        41,
    )
    .map_err(e2s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for p in model.params.params_mut() {
        p.value.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    }
    let alphas: Vec<Vec<f64>> = (0..10).map(|_| (0..8).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let coords: Vec<[f64; 2]> = (0..m * n).map(|q| thermoforge::deeponet::pixel_coordinate(q / n, q % n, m, n)).collect();
    let before = model.trunk_passes();
    let cache = model.build_trunk_cache(m, n);
    let after_cache = model.trunk_passes();
    let refs: Vec<&[f64]> = alphas.iter().map(|a| a.as_slice()).collect();
    let cached = model.predict_many(&refs, &cache).map_err(e2s)?;
    let mask = vec![PixelClass::Interior; m * n];
    let single = model.predict_field(&alphas[0], &cache, mask).map_err(e2s)?;
    let after_predict = model.trunk_passes();
    let mut diff: f64 = 0.0;
    for (a, c) in alphas.iter().zip(&cached) {
        let naive = model.forward_naive(a, &coords).map_err(e2s)?;
        diff = diff.max(naive.iter().zip(c).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
    }
    diff = diff.max(single.values.iter().zip(&cached[0]).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
    ensure(diff <= 1e-12, format!("cached vs naive {diff:e}"))?;
    ensure(after_cache - before == 1 && after_predict == after_cache, format!("trunk passes: cache {} then {}", after_cache - before, after_predict - after_cache))?;
    Ok(format!("cached vs naive {diff:.1e} over 10 codes, 1 trunk pass for {} predictions", alphas.len() + 1))
}

// ---------------------------------------------------------------- P5 / P6

#[derive(Debug, Clone)]
struct Scale {
    name: &'static str,
    m: usize,
    count: usize,
    fields: usize,
    steps: usize,
    lr: f64,
    encoder: Vec<usize>,
    decoder: Vec<usize>,
    seed_channels: usize,
    head_epochs: usize,
    pairs: usize,
    cnn_decoder: Vec<usize>,
}

impl Scale {
    fn from_env() -> Self {
        match std::env::var("THERMOFORGE_ACCEPTANCE_SCALE").as_deref() {
            Ok("desk") => Scale {
                name: "desk",
                m: 64,
                count: 2000,
                fields: 500,
                steps: 20_000,
                lr: 1e-4,
                encoder: vec![32, 64, 128],
                decoder: vec![256, 128, 32, 8],
                seed_channels: 128,
                head_epochs: 30,
                pairs: 500,
                cnn_decoder: vec![256, 128, 32, 8],
            },
            _ => Scale {
                name: "reduced",
                m: 32,
                count: 2000,
                fields: 500,
                steps: 3000,
                lr: 1e-3,
                encoder: vec![8, 16, 32],
                decoder: vec![32, 16],
                seed_channels: 32,
                head_epochs: 30,
                pairs: 500,
                cnn_decoder: vec![32, 16],
            },
        }
    }

    fn vrrae(&self, mode: BottleneckMode) -> VrraeConfig {
        let mut c = VrraeConfig::new(self.m, self.m, mode);
        c.encoder.channels = self.encoder.clone();
        c.decoder = DecoderConfig { channels: self.decoder.clone(), seed_channels: self.seed_channels, ..DecoderConfig::default() };
        c
    }
}

struct SeedRun {
    seed: u64,
    table1: BTreeMap<EncoderKind, (f64, f64, f64)>,
    study: StudyReport,
    seconds: f64,
}

const SEEDS: [u64; 3] = [1, 2, 3];

fn desk_runs() -> &'static Result<Vec<SeedRun>, String> {
    static RUNS: OnceLock<Result<Vec<SeedRun>, String>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let scale = Scale::from_env();
        eprintln!("training {} scale: {:?}", scale.name, scale);
        SEEDS.iter().map(|&s| desk_run(&scale, s)).collect()
    })
}

fn desk_run(scale: &Scale, seed: u64) -> Result<SeedRun, String> {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(e2s)?;
    let spec = GeometrySpec::new(scale.m, scale.m, seed);
    let (manifest_path, _) = write_dataset(&spec, scale.count, dir.path(), "desk").map_err(e2s)?;
    solve_batch(&manifest_path, &ThermalConfig::default(), scale.fields, "fields").map_err(e2s)?;
    let (manifest, data) = FieldDataset::load(&manifest_path).map_err(e2s)?;
    let rasters = thermoforge::geomgen::read_geometry_file(&dir.path().join(&manifest.geometry_file)).map_err(e2s)?;
    let split = |s: Split| -> Vec<&GeometryRaster> { manifest.indices(s).into_iter().map(|i| &rasters[i]).collect() };
    let (train, val, test) = (split(Split::Train), split(Split::Val), split(Split::Test));
    let range = ReferenceRange::from_manifest(&manifest);
    let field_train = data.split(Split::Train);
    let field_test = data.split(Split::Test);

    let mut table1 = BTreeMap::new();
    let mut predictions = BTreeMap::new();
    for (kind, mode) in [(EncoderKind::Vrrae, BottleneckMode::Vrrae), (EncoderKind::Ae, BottleneckMode::PlainAe)] {
        let mut enc = Vrrae::<f32>::new(scale.vrrae(mode), seed).map_err(e2s)?;
        let schedule = TrainSchedule { steps: scale.steps, lr: scale.lr, ..TrainSchedule::desk(seed) };
        let t0 = Instant::now();
        enc.train(&train, &val, &schedule, |_| {}).map_err(e2s)?;
        let rec = reconstruction_mse(&enc, &test).map_err(e2s)?;
        let rates = validity_rates(&enc, &test, &range, scale.pairs, scale.pairs, InterpMode::Uniform, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(e2s)?;
        eprintln!(
            "seed {seed} {:?}: rec mse {rec:.4}, interp {:.3}, random {:.3} ({:.0}s)",
            kind,
            rates.interp_rate,
            rates.random_rate,
            t0.elapsed().as_secs_f64()
        );
        table1.insert(kind, (rec, rates.interp_rate, rates.random_rate));

        let codes_of = |samples: &[&FieldSample]| -> Result<Vec<Vec<f64>>, String> {
            let rs: Vec<&GeometryRaster> = samples.iter().map(|s| &s.raster).collect();
            Ok(enc.project_all(&rs, 64).map_err(e2s)?.into_iter().map(|c| c.alpha).collect())
        };
        let train_codes = codes_of(&field_train)?;
        let test_codes = codes_of(&field_test)?;
        let test_refs: Vec<&[f64]> = test_codes.iter().map(|c| c.as_slice()).collect();
        let k = enc.config.k_star;

        let t0 = Instant::now();
        let mut don = DeepOnet::<f32>::new(DeepOnetConfig::new(scale.m, scale.m, k), data.kind, seed).map_err(e2s)?;
        don.train(&train_codes, &field_train, &HeadTrainConfig { epochs: scale.head_epochs, ..HeadTrainConfig::deeponet_desk(seed) }, |_, _| {}).map_err(e2s)?;
        let don = CachedDeepOnet::new(don);
        predictions.insert(CellId { encoder: kind, head: HeadKind::DeepOnet }, don.predict_fields(&test_refs).map_err(e2s)?);
        let don_secs = t0.elapsed().as_secs_f64();

        let t0 = Instant::now();
        let mut cfg = CnnHeadConfig::new(scale.m, scale.m, k);
        cfg.decoder = DecoderConfig { channels: scale.cnn_decoder.clone(), seed_channels: scale.seed_channels, ..DecoderConfig::default() };
        let mut cnn = CnnHead::<f32>::new(cfg, data.kind, seed).map_err(e2s)?;
        cnn.train(&train_codes, &field_train, &HeadTrainConfig { epochs: scale.head_epochs, ..HeadTrainConfig::cnn_desk(seed) }, |_, _| {}).map_err(e2s)?;
        predictions.insert(CellId { encoder: kind, head: HeadKind::Cnn }, cnn.predict_fields(&test_refs).map_err(e2s)?);
        eprintln!("seed {seed} {:?}: heads trained (DeepONet {don_secs:.0}s, CNN {:.0}s)", kind, t0.elapsed().as_secs_f64());
    }
    let study = run_2x2_study(data.kind, &predictions, &field_test).map_err(e2s)?;
    eprint!("{}", study.to_table());
    Ok(SeedRun { seed, table1, study, seconds: start.elapsed().as_secs_f64() })
}

fn p5_table1() -> Check {
    let runs = desk_runs().as_ref().map_err(Clone::clone)?;
    let mut wins = 0;
    let mut lines = Vec::new();
    let mut worst_rec: f64 = 0.0;
    for r in runs {
        let (vr, vi, vs) = r.table1[&EncoderKind::Vrrae];
        let (ar, ai, as_) = r.table1[&EncoderKind::Ae];
        worst_rec = worst_rec.max(vr).max(ar);
        wins += (vi >= ai && vs >= as_) as usize;
        lines.push(format!("seed {}: interp {vi:.3}/{ai:.3} random {vs:.3}/{as_:.3} rec {vr:.4}/{ar:.4}", r.seed));
    }
    let detail = format!("VRRAE/AE {}; direction holds in {wins}/3", lines.join("; "));
    ensure(wins >= 2 && worst_rec < 0.05, detail.clone())?;
    Ok(detail)
}

fn p6_table2() -> Check {
    let runs = desk_runs().as_ref().map_err(Clone::clone)?;
    let best = CellId { encoder: EncoderKind::Vrrae, head: HeadKind::DeepOnet };
    let mut wins = 0;
    let mut worst: f64 = 0.0;
    let mut lines = Vec::new();
    for r in runs {
        let winner = r.study.best_cell().map(|c| c.cell);
        wins += (winner == Some(best)) as usize;
        let means: Vec<String> = r.study.cells.iter().map(|c| format!("{} {:.2e}", c.label, c.stats.mean.nmse)).collect();
        worst = r.study.cells.iter().map(|c| c.stats.mean.nmse).fold(worst, f64::max);
        lines.push(format!("seed {} [{}] ({:.0}s)", r.seed, means.join(", "), r.seconds));
    }
    let detail = format!("{}; VRRAE+DeepONet best in {wins}/3, worst cell NMSE {worst:.2e}", lines.join("; "));
    ensure(wins >= 2 && worst < 1e-2, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- P7

fn p7_speedup() -> Check {
    let (manifest, rasters) = generate_dataset(&GeometrySpec::new(128, 128, 71), 40).map_err(e2s)?;
    let mut enc = Vrrae::<f32>::new(VrraeConfig::new(128, 128, BottleneckMode::Vrrae), 7).map_err(e2s)?;
    let train: Vec<&GeometryRaster> = manifest.indices(Split::Train).into_iter().map(|i| &rasters[i]).collect();
    enc.freeze(&train, 16).map_err(e2s)?;
    let head = CachedDeepOnet::new(DeepOnet::<f32>::new(DeepOnetConfig::new(128, 128, 8), TargetField::GradientMagnitude, 7).map_err(e2s)?);
    let report = run_bench(&rasters[..20], &ThermalConfig::default(), &enc, &head).map_err(e2s)?;
    let detail = format!(
        "128x128, {} samples: FD {:.4}s vs surrogate {:.5}s per sample, {:.1}x (trunk cache {:.4}s once)",
        report.samples, report.solver_s_per_sample, report.surrogate_s_per_sample, report.speedup_factor, report.trunk_cache_s
    );
    ensure(report.speedup_factor >= 10.0 && report.solver_s_per_sample > 0.0 && report.surrogate_s_per_sample > 0.0, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- P8

fn pipeline_hashes(dir: &Path) -> Result<Vec<String>, String> {
    let spec = GeometrySpec::new(32, 32, 81);
    let (manifest_path, manifest) = write_dataset(&spec, 200, dir, "det").map_err(e2s)?;
    let solved = solve_batch(&manifest_path, &ThermalConfig::default(), 60, "fields").map_err(e2s)?;
    let (_, data) = FieldDataset::load(&manifest_path).map_err(e2s)?;
    let rasters = thermoforge::geomgen::read_geometry_file(&dir.join(&manifest.geometry_file)).map_err(e2s)?;
    let train: Vec<&GeometryRaster> = manifest.indices(Split::Train).into_iter().map(|i| &rasters[i]).collect();
    let cfg = VrraeConfig {
        latent_dim: 16,
        k_star: 4,
        encoder: EncoderConfig { channels: vec![4, 8], ..Default::default() },
        decoder: DecoderConfig { seed_channels: 8, channels: vec![8, 4], ..Default::default() },
        ..VrraeConfig::new(32, 32, BottleneckMode::Vrrae)
    };
    let mut enc = Vrrae::<f32>::new(cfg, 81).map_err(e2s)?;
    enc.train(&train, &[], &TrainSchedule { steps: 30, batch_size: 16, lr: 1e-3, ..TrainSchedule::desk(81) }, |_| {}).map_err(e2s)?;
    let enc_ckpt = enc.to_checkpoint().map_err(e2s)?;
    let field_train = data.split(Split::Train);
    let rs: Vec<&GeometryRaster> = field_train.iter().map(|s| &s.raster).collect();
    let codes: Vec<Vec<f64>> = enc.project_all(&rs, 64).map_err(e2s)?.into_iter().map(|c| c.alpha).collect();
    let mut don = DeepOnet::<f32>::new(DeepOnetConfig { branch_hidden: vec![16], trunk_hidden: vec![16, 16], p: 16, ..DeepOnetConfig::new(32, 32, 4) }, data.kind, 81)
        .map_err(e2s)?;
    don.encoder = Some(EncoderRef { path: "vrrae.tfck".into(), sha256: enc_ckpt.hash(), kind: "vrrae".into() });
    don.train(&codes, &field_train, &HeadTrainConfig { epochs: 2, batch_size: 2000, lr: 1e-3, seed: 81 }, |_, _| {}).map_err(e2s)?;
    Ok(vec![manifest.geometry_file_sha256, solved.field.expect("solved").field_file_sha256, enc_ckpt.hash(), don.to_checkpoint().hash()])
}

fn p8_determinism() -> Check {
    let a = tempfile::tempdir().map_err(e2s)?;
    let b = tempfile::tempdir().map_err(e2s)?;
    let ha = pipeline_hashes(a.path())?;
    let hb = pipeline_hashes(b.path())?;
    ensure(ha == hb, format!("hashes differ: {ha:?} vs {hb:?}"))?;
    Ok(format!("geometry, fields, VRRAE and DeepONet checkpoints identical ({})", ha.iter().map(|h| &h[..12]).collect::<Vec<_>>().join(", ")))
}

// ---------------------------------------------------------------- P9

struct Case {
    raster: GeometryRaster,
    figures: usize,
    touching: usize,
}

/// Square blobs in a 4×4 cell layout, optionally with an edge blob and a
/// diagonal-only contact that must not merge under 4-connectivity.
fn hand_cases() -> Vec<Case> {
    let m = 32;
    (0..50)
        .map(|c| {
            let mut r = GeometryRaster::solid(m, m);
            let figures = [3, 4, 5][c % 3];
            let size = 2 + (c / 3) % 4;
            let mut fill = |i0: usize, j0: usize, h: usize, w: usize| {
                for i in i0..i0 + h {
                    for j in j0..j0 + w {
                        r.set(i, j, 0);
                    }
                }
            };
            for f in 0..figures {
                let (ci, cj) = (1 + f / 3, f % 3);
                fill(ci * 7 + 2, cj * 9 + 2, size, size + c % 2);
            }
            let touching = usize::from(c % 5 == 0);
            if touching == 1 {
                fill(0, 20 + c % 7, 3, 2);
            }
            let diagonal = c % 7 == 3;
            if diagonal {
                fill(2, 2, 2, 2);
                fill(4, 4, 2, 2);
            }
            Case { raster: r, figures: figures + 2 * usize::from(diagonal), touching }
        })
        .collect()
}

/// Breadth-first flood fill over 4-neighbors.
fn brute_force(r: &GeometryRaster) -> (usize, usize) {
    let (m, n) = r.dims();
    let mut seen = vec![false; m * n];
    let (mut inner, mut edge) = (0, 0);
    for start in 0..m * n {
        if seen[start] || r.pixels()[start] != 0 {
            continue;
        }
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        let mut touches = false;
        while let Some(p) = queue.pop_front() {
            let (i, j) = (p / n, p % n);
            touches |= i == 0 || j == 0 || i == m - 1 || j == n - 1;
            let mut push = |q: usize| {
                if !seen[q] && r.pixels()[q] == 0 {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if i > 0 {
                push(p - n);
            }
            if i + 1 < m {
                push(p + n);
            }
            if j > 0 {
                push(p - 1);
            }
            if j + 1 < n {
                push(p + 1);
            }
        }
        if touches {
            edge += 1;
        } else {
            inner += 1;
        }
    }
    (inner, edge)
}

fn p9_structural_oracle() -> Check {
    let range = ReferenceRange::new(0.03, 0.06);
    let cases = hand_cases();
    let mut mismatches = Vec::new();
    let mut outcomes = BTreeMap::new();
    for (c, case) in cases.iter().enumerate() {
        let (inner, edge) = brute_force(&case.raster);
        let holes = case.raster.pixels().iter().filter(|p| **p == 0).count();
        let area = holes as f64 / (32.0 * 32.0);
        let valid = inner == 4 && area >= 0.03 * 0.95 && area <= 0.06 * 1.05;
        let report = structural_consistency(&case.raster, &range);
        if (inner, edge) != (case.figures, case.touching)
            || (report.figure_count, report.boundary_defects) != (inner, edge)
            || report.area_fraction != area
            || report.valid != valid
        {
            mismatches.push(format!("{c}: built {}/{} flood {inner}/{edge} lib {}/{} area {area}/{} valid {valid}/{}", case.figures, case.touching, report.figure_count, report.boundary_defects, report.area_fraction, report.valid));
        }
        *outcomes.entry((inner.min(6), range.contains(area), edge > 0)).or_insert(0) += 1;
    }
    let counts: Vec<usize> = outcomes.keys().map(|k| k.0).collect();
    let covered = [3, 4, 5].iter().all(|k| counts.contains(k)) && outcomes.keys().any(|k| k.1) && outcomes.keys().any(|k| !k.1) && outcomes.keys().any(|k| k.2);
    ensure(mismatches.is_empty(), format!("mismatched cases {mismatches:?}"))?;
    ensure(covered, format!("case mix too narrow: {outcomes:?}"))?;
    let valid = cases.iter().filter(|c| structural_consistency(&c.raster, &range).valid).count();
    Ok(format!("50 rasters agree with flood fill ({valid} valid, {} case classes)", outcomes.len()))
}

// ----------------------------------------------------------------

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, &str, fn() -> Check); 9] = [
        ("P1", "solver correctness", p1_solver),
        ("P2", "SVD / optimizer / gradient suite", p2_linear_algebra),
        ("P3", "loss analytics", p3_losses),
        ("P4", "trunk-reuse equivalence", p4_trunk_reuse),
        ("P5", "Table 1 direction", p5_table1),
        ("P6", "Table 2 direction", p6_table2),
        ("P7", "speedup", p7_speedup),
        ("P8", "determinism", p8_determinism),
        ("P9", "structural metric oracle", p9_structural_oracle),
    ];
    let mut failed = 0;
    for (id, title, run) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| f == id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("{id} PASS {title} [{secs:.1}s]: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("{id} FAIL {title} [{secs:.1}s]: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
