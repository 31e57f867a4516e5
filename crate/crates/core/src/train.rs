//! Pair sampling, batching and the AdamW training loop.

use std::fs;
use std::path::{Path, PathBuf};

use p2p_nn::{adamw_step, AdamWConfig, Mode, OptimizerState, ParamStore, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_pair, AugmentConfig, FramePair, RotateScope};
use crate::data::{Category, Tracklet};
use crate::error::{CoreError, Result};
use crate::geometry::{relative_motion, MotionDelta, MotionFrame};
use crate::loss::{regression_loss, LossConfig, LossKind};
use crate::model::{encode_frame, save_model, stack, ModelConfig, P2PNet};
use crate::pointcloud::crop_search_region;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub weight_decay: f64,
    /// Clip the global gradient norm to this value when set.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub category: Category,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    /// Train on this many randomly drawn pairs per epoch instead of all.
    pub pairs_per_epoch: Option<usize>,
    /// Draw fresh FPS and augmentation randomness every epoch; otherwise
    /// each pair is prepared identically in every epoch.
    pub resample_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 16,
            lr: 1e-4,
            lr_decay_factor: 5.0,
            lr_decay_every: 20,
            weight_decay: 1e-2,
            grad_clip: None,
            seed: 0,
            category: Category::Car,
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            model: ModelConfig::default(),
            pairs_per_epoch: None,
            resample_each_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.lr_decay_factor > 1.0) || self.lr_decay_every == 0 || self.batch_size < 2 {
            return Err(CoreError::InvalidConfig(format!(
                "lr {} decay {} every {} batch {}",
                self.lr, self.lr_decay_factor, self.lr_decay_every, self.batch_size
            )));
        }
        if self.model.probabilistic != (self.loss.kind == LossKind::GaussianNll) {
            return Err(CoreError::InvalidConfig(
                "model.probabilistic must be set exactly when the loss is gaussian_nll".into(),
            ));
        }
        self.augment.validate()?;
        self.model.validate()
    }

    /// Short single-core schedule: L1 loss on the desk point network,
    /// target-only rotation, 40 epochs of 640 pairs.
    pub fn desk() -> Self {
        Self {
            epochs: 40,
            lr: 1e-3,
            lr_decay_every: 26,
            loss: LossConfig::l1(),
            augment: AugmentConfig {
                rotate_scope: RotateScope::TargetOnly,
                ..AugmentConfig::default()
            },
            model: ModelConfig {
                probabilistic: false,
                ..ModelConfig::desk_point()
            },
            pairs_per_epoch: Some(640),
            ..Self::default()
        }
    }

    /// Model config with the category's search region.
    pub fn effective_model(&self) -> ModelConfig {
        ModelConfig {
            region: self.category.region(),
            init_seed: self.seed,
            ..self.model.clone()
        }
    }

    /// Step decay: `lr / factor^floor((epoch - 1) / every)` for 1-based epochs.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr
            / self
                .lr_decay_factor
                .powi(((epoch.max(1) - 1) / self.lr_decay_every) as i32)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-sample seed from `(seed, epoch, index)`.
pub fn derive_seed(seed: u64, epoch: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ epoch) ^ index)
}

/// Network inputs and motion label of one consecutive-frame pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub prev: p2p_nn::Tensor,
    pub curr: p2p_nn::Tensor,
    pub target: MotionDelta,
}

/// Crops frames `t - 1` and `t` about the ground truth of frame `t - 1`,
/// augments them, and encodes both for the network. The label is the
/// motion between the (augmented) ground-truth boxes.
pub fn sample_training_pair(
    tracklet: &Tracklet,
    t: usize,
    model: &ModelConfig,
    augment: &AugmentConfig,
    seed: u64,
) -> Result<TrainingSample> {
    if t == 0 || t >= tracklet.len() {
        return Err(CoreError::InvalidConfig(format!(
            "pair index {t} of {} frames",
            tracklet.len()
        )));
    }
    let (f0, f1) = (&tracklet.frames[t - 1], &tracklet.frames[t]);
    let reference = f0.gt;
    let region = model.region;
    let pair = FramePair {
        prev_points: crop_search_region(&f0.points, &reference, &region)?,
        prev_box: f0.gt.relative_to(&reference),
        curr_points: crop_search_region(&f1.points, &reference, &region)?,
        curr_box: f1.gt.relative_to(&reference),
    };
    let aug = AugmentConfig { seed, ..*augment };
    let (pair, canonical) = augment_pair(&pair, &aug, MotionFrame::Canonical)?;
    let target = match model.motion_frame {
        MotionFrame::Canonical => canonical,
        MotionFrame::World => relative_motion(
            &pair.prev_box.from_frame_of(&reference),
            &pair.curr_box.from_frame_of(&reference),
            MotionFrame::World,
        ),
    };
    let keep = |pc: &crate::pointcloud::PointCloud| pc.filter(|_, r| region.contains([r[0], r[1], r[2]]));
    let (prev_pts, curr_pts) = (keep(&pair.prev_points), keep(&pair.curr_points));
    if prev_pts.is_empty() {
        return Err(CoreError::EmptyRegion { frame: f0.index });
    }
    if curr_pts.is_empty() {
        return Err(CoreError::EmptyRegion { frame: f1.index });
    }
    Ok(TrainingSample {
        prev: encode_frame(model, &prev_pts, splitmix(seed ^ 1), 0.0)?,
        curr: encode_frame(model, &curr_pts, splitmix(seed ^ 2), 1.0)?,
        target,
    })
}

/// Every `(tracklet, t)` with `t >= 1`.
pub fn enumerate_pairs(tracklets: &[Tracklet]) -> Vec<(usize, usize)> {
    tracklets
        .iter()
        .enumerate()
        .flat_map(|(i, tr)| (1..tr.len()).map(move |t| (i, t)))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub samples: usize,
    pub skipped: usize,
}

pub struct TrainOutcome {
    pub net: P2PNet,
    pub store: ParamStore,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_checkpoint: Option<PathBuf>,
    pub last_checkpoint: Option<PathBuf>,
    pub metrics_csv: Option<PathBuf>,
}

/// Assembles samples in parallel; the order follows `pairs` and does not
/// depend on the thread count. Pairs with an empty crop are dropped and
/// counted.
pub fn assemble(
    tracklets: &[Tracklet],
    pairs: &[(usize, usize)],
    seeds: &[u64],
    model: &ModelConfig,
    augment: &AugmentConfig,
) -> Result<(Vec<TrainingSample>, usize)> {
    let results: Vec<Result<TrainingSample>> = pairs
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(&(i, t), &seed)| sample_training_pair(&tracklets[i], t, model, augment, seed))
        .collect();
    let mut out = Vec::with_capacity(results.len());
    let mut skipped = 0;
    for r in results {
        match r {
            Ok(s) => out.push(s),
            Err(CoreError::EmptyRegion { .. }) | Err(CoreError::EmptyCloud) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((out, skipped))
}

fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) {
    let ids: Vec<_> = store.ids().collect();
    let total: f64 = ids
        .iter()
        .filter_map(|&id| store.tensor(id).grad())
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if total > max_norm {
        let s = max_norm / total;
        for id in ids {
            if let Some(g) = store.get_mut(id).tensor.grad_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
}

/// One optimizer step on a batch; returns the loss before the update.
pub fn train_step(
    net: &P2PNet,
    store: &mut ParamStore,
    opt: &mut OptimizerState,
    batch: &[TrainingSample],
    loss_cfg: &LossConfig,
    grad_clip: Option<f64>,
) -> Result<f64> {
    let prev = stack(&batch.iter().map(|s| s.prev.clone()).collect::<Vec<_>>())?;
    let curr = stack(&batch.iter().map(|s| s.curr.clone()).collect::<Vec<_>>())?;
    let targets: Vec<MotionDelta> = batch.iter().map(|s| s.target).collect();
    let mut tape = Tape::new(Mode::Train);
    let p = tape.input(&prev);
    let c = tape.input(&curr);
    let out = net.forward(store, &mut tape, p, c)?;
    let loss = regression_loss(&mut tape, out, &targets, loss_cfg)?;
    let value = tape.value(loss)[0];
    if !value.is_finite() {
        return Ok(value);
    }
    store.zero_grad();
    tape.backward(loss, store)?;
    if let Some(m) = grad_clip {
        clip_grad_norm(store, m);
    }
    adamw_step(store, opt)?;
    store.apply_buffer_updates(tape.take_buffer_updates());
    Ok(value)
}

/// Mean loss and mean translation error (meters) of eval-mode predictions.
pub fn evaluate_samples(
    net: &P2PNet,
    store: &ParamStore,
    samples: &[TrainingSample],
    loss_cfg: &LossConfig,
) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut err_sum = 0.0;
    for chunk in samples.chunks(32) {
        let prev = stack(&chunk.iter().map(|s| s.prev.clone()).collect::<Vec<_>>())?;
        let curr = stack(&chunk.iter().map(|s| s.curr.clone()).collect::<Vec<_>>())?;
        let targets: Vec<MotionDelta> = chunk.iter().map(|s| s.target).collect();
        let rows = net.predict(store, &prev, &curr)?;
        loss_sum += crate::loss::loss_value(&rows, &targets, loss_cfg)? * chunk.len() as f64;
        for (r, t) in rows.iter().zip(&targets) {
            err_sum += ((r[0] - t.dx).powi(2) + (r[1] - t.dy).powi(2) + (r[2] - t.dz).powi(2)).sqrt();
        }
    }
    let n = samples.len().max(1) as f64;
    Ok((loss_sum / n, err_sum / n))
}

fn write_metrics(path: &Path, steps: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in steps {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

/// Trains a fresh model. With `out_dir`, writes `metrics.csv`,
/// `best.ckpt` (lowest epoch-mean loss) and `last.ckpt`; on a non-finite
/// loss it writes `nonfinite.ckpt` and fails.
pub fn train(cfg: &TrainConfig, tracklets: &[Tracklet], out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if tracklets.is_empty() {
        return Err(CoreError::NoSamples);
    }
    if let Some(d) = out_dir {
        fs::create_dir_all(d)?;
    }
    let model_cfg = cfg.effective_model();
    let (net, mut store) = P2PNet::build(&model_cfg)?;
    let mut opt = OptimizerState::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let all_pairs = enumerate_pairs(tracklets);
    if all_pairs.is_empty() {
        return Err(CoreError::NoSamples);
    }
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut best = (f64::INFINITY, 0usize);
    let path = |name: &str| out_dir.map(|d| d.join(name));
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        opt.set_lr(lr);
        let mut order: Vec<usize> = (0..all_pairs.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, u64::MAX));
        order.shuffle(&mut rng);
        if let Some(n) = cfg.pairs_per_epoch {
            order.truncate(n);
        }
        let seed_epoch = if cfg.resample_each_epoch { epoch as u64 } else { 0 };
        let (mut loss_sum, mut n_samples, mut skipped) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let pairs: Vec<(usize, usize)> = chunk.iter().map(|&k| all_pairs[k]).collect();
            let seeds: Vec<u64> = chunk
                .iter()
                .map(|&k| derive_seed(cfg.seed, seed_epoch, k as u64))
                .collect();
            let (batch, sk) = assemble(tracklets, &pairs, &seeds, &model_cfg, &cfg.augment)?;
            skipped += sk;
            // batch statistics need two samples
            if batch.len() < 2 {
                skipped += batch.len();
                continue;
            }
            step += 1;
            let loss = train_step(&net, &mut store, &mut opt, &batch, &cfg.loss, cfg.grad_clip)?;
            if !loss.is_finite() {
                let dump = path("nonfinite.ckpt").unwrap_or_else(|| std::env::temp_dir().join("p2p-nonfinite.ckpt"));
                save_model(
                    &dump,
                    &model_cfg,
                    &store,
                    serde_json::json!({ "epoch": epoch, "step": step }),
                )?;
                if let Some(p) = path("metrics.csv") {
                    write_metrics(&p, &steps)?;
                }
                return Err(CoreError::NonFiniteLoss { epoch, step, dump });
            }
            steps.push(StepRecord { epoch, step, loss, lr });
            loss_sum += loss * batch.len() as f64;
            n_samples += batch.len();
        }
        let mean_loss = if n_samples > 0 {
            loss_sum / n_samples as f64
        } else {
            f64::NAN
        };
        epochs.push(EpochStats {
            epoch,
            mean_loss,
            lr,
            samples: n_samples,
            skipped,
        });
        if mean_loss < best.0 {
            best = (mean_loss, epoch);
            if let Some(p) = path("best.ckpt") {
                save_model(&p, &model_cfg, &store, serde_json::json!({ "epoch": epoch }))?;
            }
        }
    }
    if let Some(p) = path("last.ckpt") {
        save_model(&p, &model_cfg, &store, serde_json::json!({ "epoch": cfg.epochs }))?;
    }
    if let Some(p) = path("metrics.csv") {
        write_metrics(&p, &steps)?;
    }
    Ok(TrainOutcome {
        net,
        store,
        steps,
        epochs,
        best_epoch: best.1,
        best_checkpoint: path("best.ckpt").filter(|_| best.1 > 0),
        last_checkpoint: path("last.ckpt"),
        metrics_csv: path("metrics.csv"),
    })
}
