//! Synthetic single-target scenes: a cuboid-shell target following a random
//! walk of motion deltas, static clutter and optional distractor objects.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Category, Frame, Tracklet};
use crate::error::{CoreError, Result};
use crate::geometry::{apply_motion, Box3D, MotionDelta, MotionFrame};
use crate::pointcloud::PointCloud;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSceneConfig {
    pub category: Category,
    pub n_frames: usize,
    /// Mean per-frame translation in the target's canonical frame.
    pub motion_mu: [f64; 3],
    /// Per-frame translation std in the target's canonical frame.
    pub motion_sigma: [f64; 3],
    pub yaw_rate_sigma: f64,
    pub surface_points_per_frame: usize,
    pub clutter_points_per_frame: usize,
    pub n_distractors: usize,
    /// Minimum BEV gap between the bounding circles of target and
    /// distractor, meters.
    pub distractor_min_gap: f64,
    /// Target point count, used in every frame when set.
    pub sparsity_level: Option<usize>,
    pub seed: u64,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        Self {
            category: Category::Car,
            n_frames: 20,
            motion_mu: [0.0; 3],
            motion_sigma: [0.3, 0.1, 0.1],
            yaw_rate_sigma: 0.05,
            surface_points_per_frame: 150,
            clutter_points_per_frame: 1500,
            n_distractors: 0,
            distractor_min_gap: 0.5,
            sparsity_level: None,
            seed: 0,
        }
    }
}

impl SyntheticSceneConfig {
    /// Lighter clutter so a car search region holds roughly as many points
    /// as [`ModelConfig::desk_point`](crate::model::ModelConfig::desk_point) samples.
    pub fn desk() -> Self {
        Self {
            clutter_points_per_frame: 300,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_frames < 2
            || self.motion_sigma.iter().any(|s| !(*s >= 0.0))
            || !(self.yaw_rate_sigma >= 0.0)
            || self.distractor_min_gap < 0.0
        {
            return Err(CoreError::InvalidConfig(format!("synthetic scene {self:?}")));
        }
        Ok(())
    }
}

/// A generated tracklet and the deltas that produced its boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTracklet {
    pub tracklet: Tracklet,
    /// `deltas[t - 1]` moves box `t - 1` to box `t` (canonical frame).
    pub deltas: Vec<MotionDelta>,
}

/// `(w, l, h)` ranges per category, meters.
fn size_ranges(c: Category) -> [(f64, f64); 3] {
    match c {
        Category::Car => [(1.6, 2.0), (3.8, 4.8), (1.4, 1.7)],
        Category::Human => [(0.5, 0.8), (0.5, 0.9), (1.5, 1.9)],
    }
}

fn random_size(rng: &mut ChaCha8Rng, c: Category) -> [f64; 3] {
    size_ranges(c).map(|(lo, hi)| rng.random_range(lo..hi))
}

/// `n` points uniform over the surface of `b`.
fn sample_shell(rng: &mut ChaCha8Rng, b: &Box3D, n: usize) -> Vec<[f64; 3]> {
    let (l, w, h) = (b.l, b.w, b.h);
    // faces normal to x, y, z, two of each
    let areas = [w * h, l * h, l * w];
    let total: f64 = 2.0 * areas.iter().sum::<f64>();
    (0..n)
        .map(|_| {
            let mut u = rng.random_range(0.0..total);
            let mut axis = 2;
            for (k, a) in areas.iter().enumerate() {
                if u < 2.0 * a {
                    axis = k;
                    break;
                }
                u -= 2.0 * a;
            }
            let sign = if rng.random::<bool>() { 0.5 } else { -0.5 };
            let ext = [l, w, h];
            let mut p = [0.0; 3];
            for k in 0..3 {
                p[k] = if k == axis {
                    sign * ext[k]
                } else {
                    rng.random_range(-0.5..0.5) * ext[k]
                };
            }
            b.local_to_world(p)
        })
        .collect()
}

fn bev_radius(b: &Box3D) -> f64 {
    0.5 * (b.l * b.l + b.w * b.w).sqrt()
}

/// Generates one tracklet. Boxes follow `box_t = apply_motion(box_{t-1},
/// delta_t)` with Gaussian canonical-frame deltas.
pub fn gen_synthetic_tracklet(cfg: &SyntheticSceneConfig) -> Result<SyntheticTracklet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = |mu: f64, s: f64| Normal::new(mu, s).map_err(|e| CoreError::InvalidConfig(e.to_string()));
    let [w, l, h] = random_size(&mut rng, cfg.category);
    let start = [
        rng.random_range(-10.0..10.0),
        rng.random_range(-10.0..10.0),
        -1.0 + h / 2.0,
    ];
    let yaw0 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let mut boxes = vec![Box3D::new(start, w, l, h, yaw0)?];
    let dists = [
        normal(cfg.motion_mu[0], cfg.motion_sigma[0])?,
        normal(cfg.motion_mu[1], cfg.motion_sigma[1])?,
        normal(cfg.motion_mu[2], cfg.motion_sigma[2])?,
        normal(0.0, cfg.yaw_rate_sigma)?,
    ];
    let mut deltas = Vec::with_capacity(cfg.n_frames - 1);
    for _ in 1..cfg.n_frames {
        let d = MotionDelta::new(
            dists[0].sample(&mut rng),
            dists[1].sample(&mut rng),
            dists[2].sample(&mut rng),
            dists[3].sample(&mut rng),
        );
        boxes.push(apply_motion(boxes.last().unwrap(), &d, MotionFrame::Canonical));
        deltas.push(d);
    }

    // Distractors keep a fixed world offset from the target.
    let r_t = bev_radius(&boxes[0]);
    let distractors: Vec<([f64; 2], [f64; 3])> = (0..cfg.n_distractors)
        .map(|_| {
            let size = random_size(&mut rng, cfg.category);
            let r_d = 0.5 * (size[0] * size[0] + size[1] * size[1]).sqrt();
            let dist = r_t + r_d + cfg.distractor_min_gap + rng.random_range(0.0..3.0);
            let ang = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            ([dist * ang.cos(), dist * ang.sin()], size)
        })
        .collect();
    let distractor_boxes = |b: &Box3D| -> Vec<Box3D> {
        distractors
            .iter()
            .map(|(off, [w, l, h])| Box3D {
                cx: b.cx + off[0],
                cy: b.cy + off[1],
                cz: b.cz - b.h / 2.0 + h / 2.0,
                w: *w,
                l: *l,
                h: *h,
                yaw: b.yaw,
            })
            .collect()
    };

    // Static clutter over the trajectory extent.
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for b in &boxes {
        for k in 0..2 {
            let c = b.center()[k];
            lo[k] = lo[k].min(c - 6.0);
            hi[k] = hi[k].max(c + 6.0);
        }
    }
    let zc = boxes[0].cz;
    let clutter: Vec<[f64; 3]> = (0..cfg.clutter_points_per_frame)
        .map(|_| {
            [
                rng.random_range(lo[0]..hi[0]),
                rng.random_range(lo[1]..hi[1]),
                rng.random_range(zc - 1.5..zc + 1.5),
            ]
        })
        .collect();
    let jitter = normal(0.0, 0.02)?;
    let n_target = cfg.sparsity_level.unwrap_or(cfg.surface_points_per_frame);

    let mut frames = Vec::with_capacity(cfg.n_frames);
    for (t, b) in boxes.iter().enumerate() {
        let others = distractor_boxes(b);
        let mut pts = sample_shell(&mut rng, b, n_target);
        for d in &others {
            pts.extend(sample_shell(&mut rng, d, cfg.surface_points_per_frame));
        }
        let keep_out: Vec<Box3D> = std::iter::once(b).chain(&others).map(|x| x.inflated(0.05)).collect();
        for c in &clutter {
            let p = [
                c[0] + jitter.sample(&mut rng),
                c[1] + jitter.sample(&mut rng),
                c[2] + jitter.sample(&mut rng),
            ];
            if !keep_out.iter().any(|k| k.contains(p)) {
                pts.push(p);
            }
        }
        frames.push(Frame {
            index: t,
            points: PointCloud::from_xyz(&pts),
            gt: *b,
        });
    }
    let id = format!("synthetic:{}", cfg.seed);
    Ok(SyntheticTracklet {
        tracklet: Tracklet::new(id, cfg.category.kitti_type(), frames)?,
        deltas,
    })
}

/// `n` tracklets with seeds `base.seed, base.seed + 1, ...`.
pub fn gen_synthetic_set(base: &SyntheticSceneConfig, n: usize) -> Result<Vec<SyntheticTracklet>> {
    (0..n)
        .map(|i| {
            gen_synthetic_tracklet(&SyntheticSceneConfig {
                seed: base.seed.wrapping_add(i as u64),
                ..base.clone()
            })
        })
        .collect()
}
