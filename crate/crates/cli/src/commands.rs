use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use p2p_core::data::kitti::{load_kitti_root, write_kitti_sequence};
use p2p_core::data::synthetic::{gen_synthetic_tracklet, SyntheticSceneConfig};
use p2p_core::data::Tracklet;
use p2p_core::eval::{
    constant_velocity_baseline, evaluate_tracker, summarize, track_sequence, write_sequence_json, write_summary_csv,
    NetworkPredictor, OpeResult, OraclePredictor, SequenceResult, ZeroMotionPredictor, DEFAULT_PRECISION_CAP,
};
use p2p_core::loss::{regression_loss, LossConfig};
use p2p_core::model::{count_params_flops, load_model, zero_inputs, ModelConfig, P2PNet, Variant};
use p2p_core::pointcloud::{farthest_point_sample, voxelize};
use p2p_core::train::{train as train_model, TrainConfig};
use p2p_core::{iou3d, Box3D, MotionDelta, PointCloud, SearchRegion};
use p2p_nn::{finite_diff_check, GradCheckConfig, Mode, ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::manifest::{input_hash, now, RunManifest};
use crate::{TrackerKind, Usage};

/// State of one command invocation, collected for the manifest.
pub struct Run {
    pub name: &'static str,
    pub cfg: RunConfig,
    pub out: PathBuf,
    started: String,
    args: Vec<String>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run {
    pub fn start(name: &'static str, cfg: RunConfig, out: PathBuf) -> Result<Self> {
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Self {
            name,
            cfg,
            out,
            started: now(),
            args: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    fn arg(&mut self, a: impl Into<String>) {
        self.args.push(a.into());
    }

    fn input(&mut self, p: &Path) {
        self.inputs.push(p.to_path_buf());
    }

    fn output(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.outputs.push(p.clone());
        p
    }

    pub fn finish(self) -> Result<()> {
        let config_text = self.cfg.to_toml();
        let mut parts: Vec<&str> = vec![self.name, &config_text];
        parts.extend(self.args.iter().map(String::as_str));
        let manifest = RunManifest {
            command: self.name.to_string(),
            argv: std::env::args().collect(),
            seed: self.cfg.seed,
            config: serde_json::to_value(&self.cfg)?,
            input_hash: input_hash(&parts, &self.inputs)?,
            started: self.started,
            finished: now(),
            outputs: self.outputs,
        };
        manifest.write(&self.out)?;
        Ok(())
    }
}

/// `synthetic:N` or `synthetic:N@SEED`; anything else is a KITTI-layout
/// directory.
fn load_data(run: &mut Run, src: &str) -> Result<Vec<Tracklet>> {
    run.arg(src);
    let set = if let Some(spec) = src.strip_prefix("synthetic:") {
        let bad = || Usage(format!("bad synthetic source `{src}`, expected synthetic:N[@SEED]"));
        let (n, seed) = match spec.split_once('@') {
            Some((n, s)) => (n.parse().map_err(|_| bad())?, s.parse().map_err(|_| bad())?),
            None => (spec.parse().map_err(|_| bad())?, run.cfg.synthetic.seed),
        };
        (0..n)
            .into_par_iter()
            .map(|i: u64| {
                let cfg = SyntheticSceneConfig {
                    seed: seed.wrapping_add(i),
                    ..run.cfg.synthetic.clone()
                };
                gen_synthetic_tracklet(&cfg).map(|s| s.tracklet)
            })
            .collect::<p2p_core::Result<Vec<_>>>()?
    } else {
        let root = PathBuf::from(src);
        if !root.join("label_02").is_dir() {
            return Err(Usage(format!("{src} is neither synthetic:N nor a directory with label_02/")).into());
        }
        run.input(&root);
        let ty = run.cfg.train.category.kitti_type();
        load_kitti_root(&root, Some(ty)).with_context(|| format!("loading {src}"))?
    };
    if set.is_empty() {
        bail!("{src} holds no tracklets");
    }
    Ok(set)
}

pub fn gen_synthetic(run: &mut Run, n: usize) -> Result<()> {
    run.arg(format!("n={n}"));
    let cfg = run.cfg.synthetic.clone();
    let ty = cfg.category.kitti_type();
    for i in 0..n {
        let t = gen_synthetic_tracklet(&SyntheticSceneConfig {
            seed: cfg.seed.wrapping_add(i as u64),
            ..cfg.clone()
        })?;
        write_kitti_sequence(&run.out, &format!("{i:04}"), &t.tracklet, ty)?;
    }
    for d in ["label_02", "calib", "velodyne"] {
        run.output(d);
    }
    println!("wrote {n} {ty} tracklets to {}", run.out.display());
    Ok(())
}

#[derive(Serialize)]
struct EpochRow {
    epoch: usize,
    mean_loss: f64,
    lr: f64,
    samples: usize,
    skipped: usize,
}

pub fn train(run: &mut Run, data: &str) -> Result<()> {
    let set = load_data(run, data)?;
    let cfg = run.cfg.train.clone();
    let t = Instant::now();
    let out = train_model(&cfg, &set, Some(&run.out))?;
    let mut w = csv::Writer::from_path(run.output("epochs.csv"))?;
    for e in &out.epochs {
        w.serialize(EpochRow {
            epoch: e.epoch,
            mean_loss: e.mean_loss,
            lr: e.lr,
            samples: e.samples,
            skipped: e.skipped,
        })?;
        println!(
            "epoch {:>3}  loss {:.5}  lr {:.2e}  samples {}  skipped {}",
            e.epoch, e.mean_loss, e.lr, e.samples, e.skipped
        );
    }
    w.flush()?;
    for name in ["metrics.csv", "best.ckpt", "last.ckpt"] {
        run.output(name);
    }
    println!(
        "{} on {} tracklets: best epoch {}, {:.0} s, checkpoints in {}",
        cfg.model.variant,
        set.len(),
        out.best_epoch,
        t.elapsed().as_secs_f64(),
        run.out.display()
    );
    Ok(())
}

struct Tracker {
    kind: TrackerKind,
    model: Option<(P2PNet, ParamStore)>,
    seed: u64,
    region: SearchRegion,
    cfg: crate::config::EvalConfig,
}

impl Tracker {
    fn new(run: &mut Run, kind: TrackerKind, checkpoint: Option<&Path>) -> Result<Self> {
        run.arg(format!("{kind:?}"));
        let model = match (kind, checkpoint) {
            (TrackerKind::P2p, None) => return Err(Usage("the p2p tracker needs --checkpoint".into()).into()),
            (TrackerKind::P2p, Some(p)) => {
                run.input(p);
                let (net, store, _) = load_model(p).with_context(|| format!("loading {}", p.display()))?;
                Some((net, store))
            }
            _ => None,
        };
        Ok(Self {
            kind,
            model,
            seed: run.cfg.seed,
            region: run.cfg.train.category.region(),
            cfg: run.cfg.eval.clone(),
        })
    }

    fn name(&self) -> String {
        match &self.model {
            Some((net, _)) => net.config.variant.to_string(),
            None => format!("{:?}", self.kind).to_lowercase(),
        }
    }

    fn track(&self, t: &Tracklet) -> p2p_core::Result<Vec<Box3D>> {
        let init = t.frames[0].gt;
        let fallback = self.cfg.fallback;
        match (self.kind, &self.model) {
            (TrackerKind::P2p, Some((net, store))) => {
                let pred = NetworkPredictor {
                    net,
                    store,
                    seed: self.seed,
                };
                track_sequence(&pred, t, init, fallback)
            }
            (TrackerKind::Oracle, _) => {
                let gt = t.gt_boxes();
                let pred = OraclePredictor {
                    gt: &gt,
                    region: self.region,
                };
                track_sequence(&pred, t, init, fallback)
            }
            (TrackerKind::Zero, _) => track_sequence(&ZeroMotionPredictor { region: self.region }, t, init, fallback),
            _ => Ok(constant_velocity_baseline(t, init, &self.cfg.cv)),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TrackRecord {
    id: String,
    tracker: String,
    boxes: Vec<Box3D>,
}

pub fn track(run: &mut Run, data: &str, kind: TrackerKind, checkpoint: Option<&Path>) -> Result<()> {
    let set = load_data(run, data)?;
    let tracker = Tracker::new(run, kind, checkpoint)?;
    let name = tracker.name();
    let records = set
        .par_iter()
        .map(|t| {
            Ok(TrackRecord {
                id: t.id.clone(),
                tracker: name.clone(),
                boxes: tracker.track(t)?,
            })
        })
        .collect::<p2p_core::Result<Vec<_>>>()?;
    let path = run.output("tracks.json");
    fs::write(&path, serde_json::to_string_pretty(&records)? + "\n")?;
    println!("tracked {} tracklets with {name} -> {}", records.len(), path.display());
    Ok(())
}

#[derive(Serialize)]
struct CurveRow {
    tracker: String,
    curve: &'static str,
    threshold: f64,
    fraction: f64,
}

fn write_eval_outputs(run: &mut Run, name: &str, results: &[SequenceResult]) -> Result<()> {
    write_sequence_json(&run.output("sequences.json"), results)?;
    let rows = summarize(name, results, &run.cfg.eval.sparsity_edges);
    write_summary_csv(&run.output("summary.csv"), &rows)?;
    let pooled = OpeResult::aggregate(&results.iter().map(|r| r.ope.clone()).collect::<Vec<_>>())
        .context("no frames to score")?;
    let mut w = csv::Writer::from_path(run.output("curves.csv"))?;
    let success = pooled.success_curve().into_iter().map(|p| ("success", p));
    let precision = pooled
        .precision_curve(DEFAULT_PRECISION_CAP)
        .into_iter()
        .map(|p| ("precision", p));
    for (curve, (threshold, fraction)) in success.chain(precision) {
        w.serialize(CurveRow {
            tracker: name.to_string(),
            curve,
            threshold,
            fraction,
        })?;
    }
    w.flush()?;
    for r in &rows {
        println!(
            "{:<14} {:<10} tracklets {:>4}  frames {:>6}  success {:>7.3}  precision {:>7.3}",
            r.tracker, r.bin, r.n_tracklets, r.n_frames, r.success, r.precision
        );
    }
    Ok(())
}

pub fn eval(
    run: &mut Run,
    data: &str,
    kind: TrackerKind,
    checkpoint: Option<&Path>,
    pred: Option<&Path>,
) -> Result<()> {
    let set = load_data(run, data)?;
    let (name, results) = match pred {
        Some(p) => {
            run.input(p);
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let records: Vec<TrackRecord> =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            let name = records
                .first()
                .map_or_else(|| "pred".to_string(), |r| r.tracker.clone());
            let by_id: HashMap<String, Vec<Box3D>> = records.into_iter().map(|r| (r.id, r.boxes)).collect();
            let results = evaluate_tracker(&name, &set, |t| {
                by_id.get(&t.id).cloned().ok_or_else(|| {
                    p2p_core::CoreError::InvalidConfig(format!("{} has no boxes for tracklet {}", p.display(), t.id))
                })
            })?;
            (name, results)
        }
        None => {
            let tracker = Tracker::new(run, kind, checkpoint)?;
            let name = tracker.name();
            let results = evaluate_tracker(&name, &set, |t| tracker.track(t))?;
            (name, results)
        }
    };
    write_eval_outputs(run, &name, &results)
}

#[derive(Serialize)]
struct AblationRow {
    variant: String,
    seed: u64,
    success: f64,
    precision: f64,
}

#[derive(Serialize)]
struct AblationSummary {
    variant: String,
    seeds: usize,
    mean_success: f64,
    mean_precision: f64,
}

pub fn ablate(run: &mut Run, train_data: &str, test_data: &str, seeds: u64, variants: &[Variant]) -> Result<()> {
    if seeds == 0 || variants.is_empty() {
        return Err(Usage("ablate needs at least one seed and one variant".into()).into());
    }
    let train_set = load_data(run, train_data)?;
    let test_set = load_data(run, test_data)?;
    run.arg(format!("seeds={seeds} variants={variants:?}"));
    let mut rows_csv = csv::Writer::from_path(run.output("ablation.csv"))?;
    let mut summary = Vec::new();
    for &variant in variants {
        let mut runs = Vec::new();
        for s in 0..seeds {
            let seed = run.cfg.seed.wrapping_add(s);
            let base = run.cfg.train.clone();
            let cfg = TrainConfig {
                seed,
                model: ModelConfig {
                    variant,
                    ..base.model.clone()
                },
                ..base
            };
            cfg.validate().map_err(|e| Usage(format!("{variant}: {e}")))?;
            let t = Instant::now();
            let out = train_model(&cfg, &train_set, None)?;
            let pred = NetworkPredictor {
                net: &out.net,
                store: &out.store,
                seed,
            };
            let results = evaluate_tracker(variant.name(), &test_set, |t| {
                track_sequence(&pred, t, t.frames[0].gt, run.cfg.eval.fallback)
            })?;
            let pooled = OpeResult::aggregate(&results.iter().map(|r| r.ope.clone()).collect::<Vec<_>>())
                .context("no frames to score")?;
            println!(
                "{variant:<20} seed {seed:<4} success {:>7.3}  precision {:>7.3}  ({:.0} s)",
                pooled.success,
                pooled.precision,
                t.elapsed().as_secs_f64()
            );
            rows_csv.serialize(AblationRow {
                variant: variant.to_string(),
                seed,
                success: pooled.success,
                precision: pooled.precision,
            })?;
            rows_csv.flush()?;
            runs.push((pooled.success, pooled.precision));
        }
        let n = runs.len() as f64;
        summary.push(AblationSummary {
            variant: variant.to_string(),
            seeds: runs.len(),
            mean_success: runs.iter().map(|r| r.0).sum::<f64>() / n,
            mean_precision: runs.iter().map(|r| r.1).sum::<f64>() / n,
        });
    }
    let mut w = csv::Writer::from_path(run.output("ablation_summary.csv"))?;
    for s in &summary {
        println!(
            "{:<20} mean over {} seeds: success {:>7.3}  precision {:>7.3}",
            s.variant, s.seeds, s.mean_success, s.mean_precision
        );
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches data")
}

pub fn gradcheck(
    run: &mut Run,
    variant: Variant,
    full: bool,
    tolerance: f64,
    abs_floor: f64,
    max_coords: usize,
) -> Result<()> {
    run.arg(format!(
        "{variant} full={full} tol={tolerance} floor={abs_floor} coords={max_coords}"
    ));
    let base = if full {
        run.cfg.train.model.clone()
    } else if variant.uses_voxels() {
        ModelConfig::tiny_voxel()
    } else {
        ModelConfig::tiny_point()
    };
    let cfg = ModelConfig {
        variant,
        zero_init_final: false,
        probabilistic: true,
        init_seed: run.cfg.seed,
        ..base
    };
    cfg.validate().map_err(|e| Usage(e.to_string()))?;
    let (net, mut store) = P2PNet::build(&cfg)?;
    let batch = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(run.cfg.seed);
    let (shape, _) = zero_inputs(&cfg, batch);
    let (lo, hi) = if variant.uses_voxels() { (0.0, 1.0) } else { (-2.0, 2.0) };
    let prev = random_tensor(&mut rng, shape.shape(), lo, hi);
    let curr = random_tensor(&mut rng, shape.shape(), lo, hi);
    let targets: Vec<MotionDelta> = (0..batch)
        .map(|_| MotionDelta::new(rng.random_range(-0.5..0.5), rng.random_range(-0.2..0.2), 0.05, 0.1))
        .collect();
    let loss_cfg = LossConfig::default();
    let t = Instant::now();
    let report = finite_diff_check(
        &mut store,
        |s, tape: &mut Tape| -> p2p_core::Result<_> {
            let p = tape.input(&prev);
            let c = tape.input(&curr);
            let out = net.forward(s, tape, p, c)?;
            regression_loss(tape, out, &targets, &loss_cfg)
        },
        &GradCheckConfig {
            tolerance,
            abs_floor,
            max_coords,
            mode: Mode::Train,
            seed: run.cfg.seed,
            ..GradCheckConfig::default()
        },
    )?;
    for p in &report.params {
        println!(
            "{:<40} checked {:>4}  kinks {:>3}  floored {:>4}  max rel err {:.3e}{}",
            p.name,
            p.checked,
            p.excluded_kinks,
            p.below_floor,
            p.max_rel_err,
            if p.passed { "" } else { "  FAIL" }
        );
    }
    let path = run.output("gradcheck.json");
    fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
    println!(
        "{variant}: {} coordinates, max relative error {:.3e} (tolerance {tolerance:.0e}), {:.1} s",
        report.total_checked(),
        report.max_rel_err(),
        t.elapsed().as_secs_f64()
    );
    if !report.passed() {
        bail!("gradient check failed");
    }
    Ok(())
}

#[derive(Serialize)]
struct ParamsReport {
    variant: String,
    parameters: usize,
    multiply_adds: u64,
    reference_parameters_m: Option<f64>,
    reference_flops_g: Option<f64>,
}

pub fn params(run: &mut Run, variant: Option<Variant>) -> Result<()> {
    let base = run.cfg.train.model.clone();
    let cfg = ModelConfig {
        variant: variant.unwrap_or(base.variant),
        ..base
    };
    run.arg(cfg.variant.to_string());
    cfg.validate().map_err(|e| Usage(e.to_string()))?;
    let (n, macs) = count_params_flops(&cfg)?;
    let reference = match cfg.variant {
        Variant::P2pPoint => Some((7.39, 1.38)),
        Variant::P2pVoxel => Some((32.00, 1.23)),
        _ => None,
    };
    let m = n as f64 / 1e6;
    print!("{}: {n} parameters ({m:.2} M", cfg.variant);
    if let Some((r, _)) = reference {
        print!("; reference {r:.2} M, {:+.1}%", 100.0 * (m - r) / r);
    }
    print!("), {:.3} G multiply-adds", macs as f64 / 1e9);
    if let Some((_, f)) = reference {
        print!(" (reference {f:.2} G FLOPs)");
    }
    println!();
    let report = ParamsReport {
        variant: cfg.variant.to_string(),
        parameters: n,
        multiply_adds: macs,
        reference_parameters_m: reference.map(|r| r.0),
        reference_flops_g: reference.map(|r| r.1),
    };
    fs::write(run.output("params.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(())
}

#[derive(Serialize)]
struct BenchRow {
    kernel: String,
    reps: usize,
    mean_ms: f64,
    min_ms: f64,
}

fn time_it(name: &str, reps: usize, mut f: impl FnMut()) -> BenchRow {
    f();
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f();
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let row = BenchRow {
        kernel: name.to_string(),
        reps,
        mean_ms: times.iter().sum::<f64>() / reps as f64,
        min_ms: times.iter().copied().fold(f64::INFINITY, f64::min),
    };
    println!(
        "{:<36} mean {:>10.3} ms  min {:>10.3} ms",
        row.kernel, row.mean_ms, row.min_ms
    );
    row
}

pub fn bench(run: &mut Run, reps: usize) -> Result<()> {
    if reps == 0 {
        return Err(Usage("--reps must be positive".into()).into());
    }
    run.arg(format!("reps={reps}"));
    let mut rng = ChaCha8Rng::seed_from_u64(run.cfg.seed);
    let mut rows = Vec::new();

    let n = 256;
    let a: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut c = vec![0.0; n * n];
    rows.push(time_it("gemm 256x256x256", reps, || {
        p2p_nn::kernels::gemm(n, n, n, 1.0, &a, false, &b, false, 0.0, &mut c)
    }));

    let boxes: Vec<(Box3D, Box3D)> = (0..10_000)
        .map(|_| {
            let mut random_box = || {
                Box3D::new(
                    [
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-0.3..0.3),
                    ],
                    rng.random_range(1.0..2.0),
                    rng.random_range(3.0..5.0),
                    rng.random_range(1.0..2.0),
                    rng.random_range(-3.1..3.1),
                )
                .expect("positive sizes")
            };
            (random_box(), random_box())
        })
        .collect();
    rows.push(time_it("iou3d x10000", reps, || {
        std::hint::black_box(boxes.iter().map(|(p, q)| iou3d(p, q)).sum::<f64>());
    }));

    let pts: Vec<[f64; 3]> = (0..4096)
        .map(|_| {
            [
                rng.random_range(-2.0..2.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-1.0..1.0),
            ]
        })
        .collect();
    let cloud = PointCloud::from_xyz(&pts);
    rows.push(time_it("fps 4096 -> 1024", reps, || {
        std::hint::black_box(farthest_point_sample(&cloud, 1024, 0).expect("non-empty cloud"));
    }));
    let region = SearchRegion::CAR;
    rows.push(time_it("voxelize 4096 -> 16x16x8", reps, || {
        std::hint::black_box(voxelize(&cloud, [16, 16, 8], &region).expect("valid dims"));
    }));

    for variant in [Variant::P2pPoint, Variant::P2pVoxel] {
        let cfg = ModelConfig {
            variant,
            ..run.cfg.train.model.clone()
        };
        let (net, store) = P2PNet::build(&cfg)?;
        let (prev, curr) = zero_inputs(&cfg, 1);
        let prev = random_tensor(&mut rng, prev.shape(), 0.0, 1.0);
        let curr = random_tensor(&mut rng, curr.shape(), 0.0, 1.0);
        let mut failed = None;
        rows.push(time_it(&format!("{variant} forward, batch 1"), reps, || {
            if let Err(e) = net.predict(&store, &prev, &curr) {
                failed = Some(e);
            }
        }));
        if let Some(e) = failed {
            return Err(e.into());
        }
    }

    let mut w = csv::Writer::from_path(run.output("bench.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
