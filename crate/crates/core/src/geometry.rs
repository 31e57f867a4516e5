//! Oriented-box algebra about the up (z) axis.
//!
//! Box-local axes: `x` runs along the heading and spans the length `l`,
//! `y` spans the width `w`, `z` spans the height `h`.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pointcloud::PointCloud;

/// Containment slack so points constructed on a face (e.g. face centers
/// reconstructed from rotated corners) stay inside the closed box.
pub const CONTAINMENT_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid box: {0}")]
    InvalidBox(String),
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a - TAU * (a / TAU).round();
    if r <= -PI {
        r += TAU;
    } else if r > PI {
        r -= TAU;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub yaw: f64,
}

impl Box3D {
    /// Validates sizes and wraps `yaw`.
    pub fn new(center: [f64; 3], w: f64, l: f64, h: f64, yaw: f64) -> Result<Self, GeometryError> {
        let b = Self {
            cx: center[0],
            cy: center[1],
            cz: center[2],
            w,
            l,
            h,
            yaw: wrap_angle(yaw),
        };
        if !(w > 0.0 && l > 0.0 && h > 0.0) {
            return Err(GeometryError::InvalidBox(format!(
                "sizes must be positive, got w={w} l={l} h={h}"
            )));
        }
        if !(center.iter().all(|c| c.is_finite()) && yaw.is_finite() && w.is_finite() && l.is_finite() && h.is_finite())
        {
            return Err(GeometryError::InvalidBox("non-finite value".into()));
        }
        Ok(b)
    }

    pub fn center(&self) -> [f64; 3] {
        [self.cx, self.cy, self.cz]
    }

    pub fn with_center(mut self, c: [f64; 3]) -> Self {
        self.cx = c[0];
        self.cy = c[1];
        self.cz = c[2];
        self
    }

    pub fn volume(&self) -> f64 {
        self.w * self.l * self.h
    }

    /// Same box grown by `margin` on every face.
    pub fn inflated(&self, margin: f64) -> Self {
        Self {
            w: self.w + 2.0 * margin,
            l: self.l + 2.0 * margin,
            h: self.h + 2.0 * margin,
            ..*self
        }
    }

    /// Point in world coordinates expressed in this box's frame.
    pub fn world_to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (p[0] - self.cx, p[1] - self.cy);
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.cz]
    }

    pub fn local_to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [
            c * p[0] - s * p[1] + self.cx,
            s * p[0] + c * p[1] + self.cy,
            p[2] + self.cz,
        ]
    }

    /// This box expressed in the frame of `reference`.
    pub fn relative_to(&self, reference: &Box3D) -> Box3D {
        let c = reference.world_to_local(self.center());
        Box3D {
            cx: c[0],
            cy: c[1],
            cz: c[2],
            yaw: wrap_angle(self.yaw - reference.yaw),
            ..*self
        }
    }

    /// Inverse of [`Box3D::relative_to`].
    pub fn from_frame_of(&self, reference: &Box3D) -> Box3D {
        let c = reference.local_to_world(self.center());
        Box3D {
            cx: c[0],
            cy: c[1],
            cz: c[2],
            yaw: wrap_angle(self.yaw + reference.yaw),
            ..*self
        }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let q = self.world_to_local(p);
        q[0].abs() <= self.l / 2.0 + CONTAINMENT_EPS
            && q[1].abs() <= self.w / 2.0 + CONTAINMENT_EPS
            && q[2].abs() <= self.h / 2.0 + CONTAINMENT_EPS
    }

    /// Bird's-eye-view footprint, counter-clockwise starting at the
    /// front-left corner `(+l/2, +w/2)`.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (hl, hw) = (self.l / 2.0, self.w / 2.0);
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[x, y]| {
            let p = self.local_to_world([x, y, 0.0]);
            [p[0], p[1]]
        })
    }
}

/// The eight vertices of `b`: the bottom face (`z = cz - h/2`) in
/// [`Box3D::bev_corners`] order, then the top face in the same order.
pub fn box_corners(b: &Box3D) -> [[f64; 3]; 8] {
    let bev = b.bev_corners();
    let (z0, z1) = (b.cz - b.h / 2.0, b.cz + b.h / 2.0);
    let mut out = [[0.0; 3]; 8];
    for (i, [x, y]) in bev.into_iter().enumerate() {
        out[i] = [x, y, z0];
        out[i + 4] = [x, y, z1];
    }
    out
}

pub fn points_in_box(points: &PointCloud, b: &Box3D) -> Vec<bool> {
    points.iter_xyz().map(|p| b.contains(p)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionFrame {
    /// Translation is expressed in the previous box's yaw-aligned frame.
    #[default]
    Canonical,
    /// Translation is expressed in sensor coordinates.
    World,
}

/// 4-DOF relative motion between consecutive boxes.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MotionDelta {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub dyaw: f64,
}

impl MotionDelta {
    pub fn new(dx: f64, dy: f64, dz: f64, dyaw: f64) -> Self {
        Self {
            dx,
            dy,
            dz,
            dyaw: wrap_angle(dyaw),
        }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dz, self.dyaw]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn translation_norm(&self) -> f64 {
        (self.dx * self.dx + self.dy * self.dy + self.dz * self.dz).sqrt()
    }

    /// Delta that undoes `self` in canonical mode:
    /// `apply_motion(apply_motion(b, d), d.inverse_canonical()) == b`.
    pub fn inverse_canonical(&self) -> Self {
        let (s, c) = self.dyaw.sin_cos();
        // rotate -t by -dyaw
        Self::new(
            -(c * self.dx + s * self.dy),
            -(-s * self.dx + c * self.dy),
            -self.dz,
            -self.dyaw,
        )
    }
}

/// Rigid update of `prev` by `delta`; the size is kept.
pub fn apply_motion(prev: &Box3D, delta: &MotionDelta, frame: MotionFrame) -> Box3D {
    let (tx, ty) = match frame {
        MotionFrame::Canonical => {
            let (s, c) = prev.yaw.sin_cos();
            (c * delta.dx - s * delta.dy, s * delta.dx + c * delta.dy)
        }
        MotionFrame::World => (delta.dx, delta.dy),
    };
    Box3D {
        cx: prev.cx + tx,
        cy: prev.cy + ty,
        cz: prev.cz + delta.dz,
        yaw: wrap_angle(prev.yaw + delta.dyaw),
        ..*prev
    }
}

/// The delta with `apply_motion(prev, delta, frame) == curr` (up to size).
pub fn relative_motion(prev: &Box3D, curr: &Box3D, frame: MotionFrame) -> MotionDelta {
    let (dx, dy) = (curr.cx - prev.cx, curr.cy - prev.cy);
    let (tx, ty) = match frame {
        MotionFrame::Canonical => {
            let (s, c) = prev.yaw.sin_cos();
            (c * dx + s * dy, -s * dx + c * dy)
        }
        MotionFrame::World => (dx, dy),
    };
    MotionDelta::new(tx, ty, curr.cz - prev.cz, curr.yaw - prev.yaw)
}

/// Points translated by `-center` then rotated by `-yaw`. Extra channels
/// are carried through untouched.
pub fn to_canonical(points: &PointCloud, b: &Box3D) -> PointCloud {
    points.map_xyz(|p| b.world_to_local(p))
}

pub fn from_canonical(points: &PointCloud, b: &Box3D) -> PointCloud {
    points.map_xyz(|p| b.local_to_world(p))
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - a[1] * b[0]
        })
        .sum();
    twice.abs() / 2.0
}

/// Sutherland-Hodgman clip of `subject` against the convex
/// counter-clockwise polygon `clip`.
fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let side = |a: [f64; 2], b: [f64; 2], p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (sc, sp) = (side(a, b, cur), side(a, b, prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    output.push(intersect(prev, cur, sp, sc));
                }
                output.push(cur);
            } else if sp >= 0.0 {
                output.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    output
}

fn intersect(p: [f64; 2], q: [f64; 2], sp: f64, sq: f64) -> [f64; 2] {
    let t = sp / (sp - sq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Area of the BEV footprint intersection of two boxes.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    polygon_area(&clip_convex(&a.bev_corners(), &b.bev_corners()))
}

/// Volume IoU of two yaw-rotated boxes: BEV polygon intersection times
/// height-interval overlap over the union volume.
pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    let z_overlap = ((a.cz + a.h / 2.0).min(b.cz + b.h / 2.0) - (a.cz - a.h / 2.0).max(b.cz - b.h / 2.0)).max(0.0);
    if z_overlap <= 0.0 {
        return 0.0;
    }
    let area = bev_intersection_area(a, b);
    if area <= 0.0 {
        return 0.0;
    }
    let inter = area * z_overlap;
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

pub fn center_distance(a: &Box3D, b: &Box3D) -> f64 {
    let d = [a.cx - b.cx, a.cy - b.cy, a.cz - b.cz];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}
