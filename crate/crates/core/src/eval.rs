//! Sequence tracking, one-pass evaluation, sparsity bins and the
//! constant-velocity reference tracker.

use std::io::Write;
use std::path::Path;

use p2p_nn::ParamStore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Tracklet;
use crate::error::{CoreError, Result};
use crate::geometry::{
    apply_motion, center_distance, iou3d, points_in_box, relative_motion, Box3D, MotionDelta, MotionFrame,
};
use crate::model::{encode_frame, output_to_delta, stack, P2PNet};
use crate::pointcloud::{crop_search_region, PointCloud, SearchRegion};
use crate::train::derive_seed;

/// Number of thresholds of both OPE curves.
pub const OPE_THRESHOLDS: usize = 101;
/// Upper end of the center-distance thresholds, meters.
pub const DEFAULT_PRECISION_CAP: f64 = 2.0;

/// Inputs of one tracking step, both crops in the canonical frame of
/// `ref_box`.
#[derive(Debug)]
pub struct TrackStep<'a> {
    /// Index of the current frame within the tracklet.
    pub frame: usize,
    pub ref_box: &'a Box3D,
    pub prev_crop: &'a PointCloud,
    pub curr_crop: &'a PointCloud,
}

pub trait MotionPredictor: Sync {
    fn region(&self) -> SearchRegion;

    fn motion_frame(&self) -> MotionFrame {
        MotionFrame::Canonical
    }

    fn predict(&self, step: &TrackStep<'_>) -> Result<MotionDelta>;
}

/// Returns the ground-truth motion from the reference box.
pub struct OraclePredictor<'a> {
    pub gt: &'a [Box3D],
    pub region: SearchRegion,
}

impl MotionPredictor for OraclePredictor<'_> {
    fn region(&self) -> SearchRegion {
        self.region
    }

    fn predict(&self, step: &TrackStep<'_>) -> Result<MotionDelta> {
        Ok(relative_motion(
            step.ref_box,
            &self.gt[step.frame],
            MotionFrame::Canonical,
        ))
    }
}

pub struct ZeroMotionPredictor {
    pub region: SearchRegion,
}

impl MotionPredictor for ZeroMotionPredictor {
    fn region(&self) -> SearchRegion {
        self.region
    }

    fn predict(&self, _: &TrackStep<'_>) -> Result<MotionDelta> {
        Ok(MotionDelta::zero())
    }
}

/// A trained network in inference mode.
pub struct NetworkPredictor<'a> {
    pub net: &'a P2PNet,
    pub store: &'a ParamStore,
    pub seed: u64,
}

impl MotionPredictor for NetworkPredictor<'_> {
    fn region(&self) -> SearchRegion {
        self.net.config.region
    }

    fn motion_frame(&self) -> MotionFrame {
        self.net.config.motion_frame
    }

    fn predict(&self, step: &TrackStep<'_>) -> Result<MotionDelta> {
        let cfg = &self.net.config;
        let s = derive_seed(self.seed, 0, step.frame as u64);
        let prev = encode_frame(cfg, step.prev_crop, s ^ 1, 0.0)?;
        let curr = encode_frame(cfg, step.curr_crop, s ^ 2, 1.0)?;
        let rows = self.net.predict(self.store, &stack(&[prev])?, &stack(&[curr])?)?;
        Ok(output_to_delta(&rows[0]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyCropFallback {
    /// Keep the previous box.
    #[default]
    CarryForward,
    /// Repeat the previous world-frame motion.
    ConstantVelocity,
}

/// Runs the tracker from `init_box`; the result has one box per frame,
/// starting with `init_box`.
pub fn track_sequence(
    predictor: &dyn MotionPredictor,
    tracklet: &Tracklet,
    init_box: Box3D,
    fallback: EmptyCropFallback,
) -> Result<Vec<Box3D>> {
    let region = predictor.region();
    let mut boxes = vec![init_box];
    for t in 1..tracklet.len() {
        let reference = boxes[t - 1];
        let prev_crop = crop_search_region(&tracklet.frames[t - 1].points, &reference, &region)?;
        let curr_crop = crop_search_region(&tracklet.frames[t].points, &reference, &region)?;
        let next = if prev_crop.is_empty() || curr_crop.is_empty() {
            match fallback {
                EmptyCropFallback::CarryForward => reference,
                EmptyCropFallback::ConstantVelocity if t >= 2 => {
                    let d = relative_motion(&boxes[t - 2], &reference, MotionFrame::World);
                    apply_motion(&reference, &d, MotionFrame::World)
                }
                EmptyCropFallback::ConstantVelocity => reference,
            }
        } else {
            let step = TrackStep {
                frame: t,
                ref_box: &reference,
                prev_crop: &prev_crop,
                curr_crop: &curr_crop,
            };
            let d = predictor.predict(&step)?;
            apply_motion(&reference, &d, predictor.motion_frame())
        };
        boxes.push(next);
    }
    Ok(boxes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpeResult {
    /// Area under the IoU-threshold curve, percent.
    pub success: f64,
    /// Area under the center-distance-threshold curve, percent.
    pub precision: f64,
    pub ious: Vec<f64>,
    pub distances: Vec<f64>,
}

impl OpeResult {
    /// Pools the frames of several sequences.
    pub fn aggregate(results: &[OpeResult]) -> Option<OpeResult> {
        let ious: Vec<f64> = results.iter().flat_map(|r| r.ious.iter().copied()).collect();
        let distances: Vec<f64> = results.iter().flat_map(|r| r.distances.iter().copied()).collect();
        ope_from_errors(ious, distances, DEFAULT_PRECISION_CAP).ok()
    }

    /// `(threshold, fraction)` pairs of the success curve.
    pub fn success_curve(&self) -> Vec<(f64, f64)> {
        curve(&self.ious, 1.0, |v, th| v > th)
    }

    pub fn precision_curve(&self, cap: f64) -> Vec<(f64, f64)> {
        curve(&self.distances, cap, |v, th| v <= th)
    }
}

fn curve(values: &[f64], hi: f64, pass: impl Fn(f64, f64) -> bool) -> Vec<(f64, f64)> {
    let n = values.len().max(1) as f64;
    (0..OPE_THRESHOLDS)
        .map(|i| {
            let th = hi * i as f64 / (OPE_THRESHOLDS - 1) as f64;
            (th, values.iter().filter(|&&v| pass(v, th)).count() as f64 / n)
        })
        .collect()
}

fn ope_from_errors(ious: Vec<f64>, distances: Vec<f64>, cap: f64) -> Result<OpeResult> {
    if ious.is_empty() || ious.len() != distances.len() {
        return Err(CoreError::LengthMismatch {
            pred: ious.len(),
            gt: distances.len(),
        });
    }
    let mean = |c: Vec<(f64, f64)>| 100.0 * c.iter().map(|p| p.1).sum::<f64>() / c.len() as f64;
    let success = mean(curve(&ious, 1.0, |v, th| v > th));
    let precision = mean(curve(&distances, cap, |v, th| v <= th));
    Ok(OpeResult {
        success,
        precision,
        ious,
        distances,
    })
}

/// Success averages `fraction(IoU > th)` over 101 thresholds in `[0, 1]`;
/// precision averages `fraction(distance <= th)` over 101 thresholds in
/// `[0, 2]` meters. Both are percentages.
pub fn compute_ope(pred: &[Box3D], gt: &[Box3D]) -> Result<OpeResult> {
    compute_ope_with_cap(pred, gt, DEFAULT_PRECISION_CAP)
}

pub fn compute_ope_with_cap(pred: &[Box3D], gt: &[Box3D], cap: f64) -> Result<OpeResult> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(CoreError::LengthMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    let ious = pred.iter().zip(gt).map(|(p, g)| iou3d(p, g)).collect();
    let distances = pred.iter().zip(gt).map(|(p, g)| center_distance(p, g)).collect();
    ope_from_errors(ious, distances, cap)
}

pub const DEFAULT_SPARSITY_EDGES: [usize; 5] = [10, 20, 30, 40, 50];

/// Groups tracklet indices by the number of first-frame points inside the
/// first ground-truth box. `edges` of length `k` give `k + 1` bins
/// `[0, e0), [e0, e1), ..., [e_{k-1}, inf)`.
pub fn bin_by_sparsity(tracklets: &[Tracklet], edges: &[usize]) -> Result<Vec<Vec<usize>>> {
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CoreError::InvalidConfig(format!("edges {edges:?} not increasing")));
    }
    let mut bins = vec![Vec::new(); edges.len() + 1];
    for (i, t) in tracklets.iter().enumerate() {
        let f = &t.frames[0];
        let n = points_in_box(&f.points, &f.gt).iter().filter(|&&v| v).count();
        bins[edges.iter().take_while(|&&e| n >= e).count()].push(i);
    }
    Ok(bins)
}

pub fn bin_labels(edges: &[usize]) -> Vec<String> {
    let mut lo = 0;
    let mut out = Vec::new();
    for &e in edges {
        out.push(format!("[{lo},{e})"));
        lo = e;
    }
    out.push(format!("[{lo},inf)"));
    out
}

/// Parameters of [`constant_velocity_baseline`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvConfig {
    /// Box inflation used to gather target points, meters.
    pub gate_margin: f64,
    /// Acceleration noise variance per frame.
    pub process_noise: f64,
    pub measurement_noise: f64,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            gate_margin: 0.5,
            process_noise: 0.05,
            measurement_noise: 0.05,
        }
    }
}

/// Constant-velocity Kalman tracker on the box center, one position and
/// velocity state per axis, yaw held at the initial value.
///
/// Frame `t` predicts `center + velocity` (zero velocity before the first
/// update), then measures the center as the previous estimate plus the
/// displacement between the centroid of frame-`t` points inside the
/// inflated predicted box and the centroid of frame-`t-1` points inside
/// the inflated previous box. Steps without points skip the update.
pub fn constant_velocity_baseline(tracklet: &Tracklet, init_box: Box3D, cfg: &CvConfig) -> Vec<Box3D> {
    let mut pos = init_box.center();
    let mut vel = [0.0; 3];
    // covariance [[p00, p01], [p01, p11]] per axis
    let mut cov = [[1e-4, 0.0, 1.0]; 3];
    let (q, r) = (cfg.process_noise, cfg.measurement_noise);
    let mut boxes = vec![init_box];
    for t in 1..tracklet.len() {
        let prev_box = boxes[t - 1];
        let prior_center = [0, 1, 2].map(|k| pos[k] + vel[k]);
        for c in cov.iter_mut() {
            let [p00, p01, p11] = *c;
            // F = [[1, 1], [0, 1]], Q = q * [[1/4, 1/2], [1/2, 1]]
            *c = [p00 + 2.0 * p01 + p11 + q / 4.0, p01 + p11 + q / 2.0, p11 + q];
        }
        pos = prior_center;
        let prior_box = prev_box.with_center(prior_center);
        let gather = |pc: &PointCloud, b: &Box3D| {
            let gate = b.inflated(cfg.gate_margin);
            pc.xyz_only()
                .filter(|_, row| gate.contains([row[0], row[1], row[2]]))
                .centroid()
        };
        let c_prev = gather(&tracklet.frames[t - 1].points, &prev_box);
        let c_curr = gather(&tracklet.frames[t].points, &prior_box);
        if let (Some(a), Some(b)) = (c_prev, c_curr) {
            let prev_center = prev_box.center();
            for k in 0..3 {
                let z = prev_center[k] + b[k] - a[k];
                let [p00, p01, p11] = cov[k];
                let s = p00 + r;
                let (k0, k1) = (p00 / s, p01 / s);
                let innov = z - pos[k];
                pos[k] += k0 * innov;
                vel[k] += k1 * innov;
                cov[k] = [(1.0 - k0) * p00, (1.0 - k0) * p01, p11 - k1 * p01];
            }
        }
        boxes.push(init_box.with_center(pos));
    }
    boxes
}

/// Result of one tracked sequence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceResult {
    pub id: String,
    pub tracker: String,
    pub first_frame_points: usize,
    #[serde(flatten)]
    pub ope: OpeResult,
}

/// Tracks every tracklet from its first ground-truth box, in parallel.
pub fn evaluate_tracker(
    name: &str,
    tracklets: &[Tracklet],
    track: impl Fn(&Tracklet) -> Result<Vec<Box3D>> + Sync,
) -> Result<Vec<SequenceResult>> {
    tracklets
        .par_iter()
        .map(|t| {
            let pred = track(t)?;
            let f = &t.frames[0];
            Ok(SequenceResult {
                id: t.id.clone(),
                tracker: name.to_string(),
                first_frame_points: points_in_box(&f.points, &f.gt).iter().filter(|&&v| v).count(),
                ope: compute_ope(&pred, &t.gt_boxes())?,
            })
        })
        .collect()
}

pub fn write_sequence_json(path: &Path, results: &[SequenceResult]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, results)?;
    w.flush()?;
    Ok(())
}

/// One row of the aggregate CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub tracker: String,
    pub bin: String,
    pub n_tracklets: usize,
    pub n_frames: usize,
    pub success: f64,
    pub precision: f64,
}

/// Overall row (bin `all`) followed by one row per sparsity bin.
pub fn summarize(tracker: &str, results: &[SequenceResult], edges: &[usize]) -> Vec<SummaryRow> {
    let row = |bin: String, rs: Vec<&SequenceResult>| {
        let pooled = OpeResult::aggregate(&rs.iter().map(|r| r.ope.clone()).collect::<Vec<_>>());
        SummaryRow {
            tracker: tracker.to_string(),
            bin,
            n_tracklets: rs.len(),
            n_frames: rs.iter().map(|r| r.ope.ious.len()).sum(),
            success: pooled.as_ref().map_or(f64::NAN, |p| p.success),
            precision: pooled.as_ref().map_or(f64::NAN, |p| p.precision),
        }
    };
    let mut rows = vec![row("all".into(), results.iter().collect())];
    for (b, label) in bin_labels(edges).into_iter().enumerate() {
        let members = results
            .iter()
            .filter(|r| edges.iter().take_while(|&&e| r.first_frame_points >= e).count() == b)
            .collect();
        rows.push(row(label, members));
    }
    rows
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
