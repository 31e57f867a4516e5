//! Training-pair augmentation: mirror, per-frame rotation about the up
//! axis, and a random shift of the current target.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geometry::{relative_motion, wrap_angle, Box3D, MotionDelta, MotionFrame};
use crate::pointcloud::PointCloud;

/// What the per-frame rotation applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotateScope {
    /// Every point of the crop and the box, about the crop origin.
    #[default]
    WholeCrop,
    /// Points inside the (inflated) box and the box, about the box center.
    TargetOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub rot_range_deg: (f64, f64),
    /// `(mean, std)` of the current-target shift along x, y, z in meters.
    pub translate_mu_sigma: [(f64, f64); 3],
    pub rotate_scope: RotateScope,
    /// Box inflation used to select target points, meters.
    pub target_margin: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            rot_range_deg: (-5.0, 5.0),
            translate_mu_sigma: [(0.0, 0.3), (0.0, 0.1), (0.0, 0.1)],
            rotate_scope: RotateScope::WholeCrop,
            target_margin: 0.2,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Leaves every input untouched.
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            rot_range_deg: (0.0, 0.0),
            translate_mu_sigma: [(0.0, 0.0); 3],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.rot_range_deg;
        if !(0.0..=1.0).contains(&self.flip_prob)
            || lo > hi
            || (lo + hi).abs() > 1e-12
            || self.translate_mu_sigma.iter().any(|&(_, s)| !(s >= 0.0))
            || self.target_margin < 0.0
        {
            return Err(CoreError::InvalidConfig(format!("augmentation {self:?}")));
        }
        Ok(())
    }
}

/// Two consecutive frames in the canonical frame of the previous box.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePair {
    pub prev_points: PointCloud,
    pub prev_box: Box3D,
    pub curr_points: PointCloud,
    pub curr_box: Box3D,
}

fn mirror(pc: &PointCloud, b: &Box3D) -> (PointCloud, Box3D) {
    let pts = pc.map_xyz(|p| [p[0], -p[1], p[2]]);
    let b = Box3D {
        cy: -b.cy,
        yaw: wrap_angle(-b.yaw),
        ..*b
    };
    (pts, b)
}

fn rotate_xy(p: [f64; 3], pivot: [f64; 2], s: f64, c: f64) -> [f64; 3] {
    let (x, y) = (p[0] - pivot[0], p[1] - pivot[1]);
    [c * x - s * y + pivot[0], s * x + c * y + pivot[1], p[2]]
}

fn rotate(pc: &PointCloud, b: &Box3D, angle: f64, scope: RotateScope, margin: f64) -> (PointCloud, Box3D) {
    let (s, c) = angle.sin_cos();
    let (pivot, select) = match scope {
        RotateScope::WholeCrop => ([0.0, 0.0], None),
        RotateScope::TargetOnly => ([b.cx, b.cy], Some(b.inflated(margin))),
    };
    let pts = pc.map_xyz(|p| match &select {
        Some(sel) if !sel.contains(p) => p,
        _ => rotate_xy(p, pivot, s, c),
    });
    let ctr = rotate_xy(b.center(), pivot, s, c);
    let b = Box3D {
        yaw: wrap_angle(b.yaw + angle),
        ..b.with_center(ctr)
    };
    (pts, b)
}

fn shift_target(pc: &PointCloud, b: &Box3D, t: [f64; 3], margin: f64) -> (PointCloud, Box3D) {
    let sel = b.inflated(margin);
    let pts = pc.map_xyz(|p| {
        if sel.contains(p) {
            [p[0] + t[0], p[1] + t[1], p[2] + t[2]]
        } else {
            p
        }
    });
    (pts, b.with_center([b.cx + t[0], b.cy + t[1], b.cz + t[2]]))
}

/// Augments `pair` with randomness drawn from `cfg.seed` and returns the
/// new pair with its motion label recomputed from the augmented boxes.
pub fn augment_pair(pair: &FramePair, cfg: &AugmentConfig, frame: MotionFrame) -> Result<(FramePair, MotionDelta)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Draw everything up front so the stream does not depend on the config.
    let flip_u: f64 = rng.random();
    let (lo, hi) = (cfg.rot_range_deg.0.to_radians(), cfg.rot_range_deg.1.to_radians());
    let mut angle = || if hi > lo { rng.random_range(lo..hi) } else { lo };
    let (a_prev, a_curr) = (angle(), angle());
    let mut shift = [0.0; 3];
    for (k, &(mu, sigma)) in cfg.translate_mu_sigma.iter().enumerate() {
        let n = Normal::new(mu, sigma).map_err(|e| CoreError::InvalidConfig(e.to_string()))?;
        shift[k] = n.sample(&mut rng);
    }

    let (mut pp, mut pb) = (pair.prev_points.clone(), pair.prev_box);
    let (mut cp, mut cb) = (pair.curr_points.clone(), pair.curr_box);
    if flip_u < cfg.flip_prob {
        (pp, pb) = mirror(&pp, &pb);
        (cp, cb) = mirror(&cp, &cb);
    }
    if a_prev != 0.0 {
        (pp, pb) = rotate(&pp, &pb, a_prev, cfg.rotate_scope, cfg.target_margin);
    }
    if a_curr != 0.0 {
        (cp, cb) = rotate(&cp, &cb, a_curr, cfg.rotate_scope, cfg.target_margin);
    }
    if shift != [0.0; 3] {
        (cp, cb) = shift_target(&cp, &cb, shift, cfg.target_margin);
    }
    let delta = relative_motion(&pb, &cb, frame);
    Ok((
        FramePair {
            prev_points: pp,
            prev_box: pb,
            curr_points: cp,
            curr_box: cb,
        },
        delta,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::apply_motion;

    fn pair() -> FramePair {
        let prev_box = Box3D::new([0.0; 3], 1.8, 4.2, 1.5, 0.0).unwrap();
        let curr_box = Box3D::new([0.6, 0.2, 0.05], 1.8, 4.2, 1.5, 0.1).unwrap();
        FramePair {
            prev_points: PointCloud::from_xyz(&[[0.5, 0.3, 0.1], [3.0, -2.0, 0.0]]),
            prev_box,
            curr_points: PointCloud::from_xyz(&[[1.0, 0.1, 0.2], [-3.0, 3.0, 0.5]]),
            curr_box,
        }
    }

    #[test]
    fn identity_config() {
        let p = pair();
        let (out, d) = augment_pair(&p, &AugmentConfig::identity(), MotionFrame::Canonical).unwrap();
        assert_eq!(out, p);
        assert_eq!(d, relative_motion(&p.prev_box, &p.curr_box, MotionFrame::Canonical));
    }

    #[test]
    fn pure_shift_adds_to_dx() {
        let p = pair();
        let cfg = AugmentConfig {
            translate_mu_sigma: [(0.3, 0.0), (0.0, 0.0), (0.0, 0.0)],
            ..AugmentConfig::identity()
        };
        let base = relative_motion(&p.prev_box, &p.curr_box, MotionFrame::Canonical);
        let (out, d) = augment_pair(&p, &cfg, MotionFrame::Canonical).unwrap();
        assert_eq!(d.dx, base.dx + 0.3);
        assert_eq!((d.dy, d.dz, d.dyaw), (base.dy, base.dz, base.dyaw));
        // the target point moved, the far clutter point did not
        assert_eq!(out.curr_points.xyz(0), [1.3, 0.1, 0.2]);
        assert_eq!(out.curr_points.xyz(1), p.curr_points.xyz(1));
    }

    #[test]
    fn flip_negates_dy_and_dyaw() {
        let p = pair();
        let cfg = AugmentConfig {
            flip_prob: 1.0,
            ..AugmentConfig::identity()
        };
        let base = relative_motion(&p.prev_box, &p.curr_box, MotionFrame::Canonical);
        let (out, d) = augment_pair(&p, &cfg, MotionFrame::Canonical).unwrap();
        assert!((d.dx - base.dx).abs() < 1e-12);
        assert!((d.dy + base.dy).abs() < 1e-12);
        assert!((d.dz - base.dz).abs() < 1e-12);
        assert!((d.dyaw + base.dyaw).abs() < 1e-12);
        assert_eq!(out.prev_points.xyz(0), [0.5, -0.3, 0.1]);
    }

    #[test]
    fn labels_stay_consistent() {
        let p = pair();
        for seed in 0..50 {
            for scope in [RotateScope::WholeCrop, RotateScope::TargetOnly] {
                let cfg = AugmentConfig {
                    seed,
                    rotate_scope: scope,
                    ..AugmentConfig::default()
                };
                let (out, d) = augment_pair(&p, &cfg, MotionFrame::Canonical).unwrap();
                let rebuilt = apply_motion(&out.prev_box, &d, MotionFrame::Canonical);
                for (a, b) in rebuilt.center().iter().zip(out.curr_box.center()) {
                    assert!((a - b).abs() < 1e-9);
                }
                assert!(wrap_angle(rebuilt.yaw - out.curr_box.yaw).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let p = pair();
        let cfg = AugmentConfig {
            seed: 7,
            ..AugmentConfig::default()
        };
        let a = augment_pair(&p, &cfg, MotionFrame::Canonical).unwrap();
        let b = augment_pair(&p, &cfg, MotionFrame::Canonical).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_asymmetric_rotation() {
        let cfg = AugmentConfig {
            rot_range_deg: (-5.0, 3.0),
            ..AugmentConfig::default()
        };
        assert!(augment_pair(&pair(), &cfg, MotionFrame::Canonical).is_err());
    }
}
