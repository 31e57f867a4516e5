use std::f64::consts::PI;

use p2p_core::geometry::{box_corners, center_distance, from_canonical, to_canonical, wrap_angle};
use p2p_core::{apply_motion, iou3d, relative_motion, Box3D, MotionDelta, MotionFrame, PointCloud};
use proptest::prelude::*;

fn boxes() -> impl Strategy<Value = Box3D> {
    (
        -20.0..20.0f64,
        -20.0..20.0f64,
        -2.0..2.0f64,
        0.3..3.0f64,
        0.3..6.0f64,
        0.3..2.5f64,
        -PI..PI,
    )
        .prop_map(|(x, y, z, w, l, h, yaw)| Box3D::new([x, y, z], w, l, h, yaw).unwrap())
}

/// A second box near the first so overlaps are common.
fn box_pairs() -> impl Strategy<Value = (Box3D, Box3D)> {
    (boxes(), -2.0..2.0f64, -2.0..2.0f64, -0.5..0.5f64, 0.5..1.5f64, -PI..PI).prop_map(|(a, dx, dy, dz, s, yaw)| {
        let b = Box3D::new([a.cx + dx, a.cy + dy, a.cz + dz], a.w * s, a.l, a.h * s, yaw).unwrap();
        (a, b)
    })
}

fn deltas() -> impl Strategy<Value = MotionDelta> {
    (-3.0..3.0f64, -3.0..3.0f64, -1.0..1.0f64, -PI..PI).prop_map(|(a, b, c, d)| MotionDelta::new(a, b, c, d))
}

fn rigid(b: &Box3D, t: [f64; 3], angle: f64) -> Box3D {
    let (s, c) = angle.sin_cos();
    Box3D::new(
        [c * b.cx - s * b.cy + t[0], s * b.cx + c * b.cy + t[1], b.cz + t[2]],
        b.w,
        b.l,
        b.h,
        b.yaw + angle,
    )
    .unwrap()
}

fn close(a: &Box3D, b: &Box3D, tol: f64) -> bool {
    [
        a.cx - b.cx,
        a.cy - b.cy,
        a.cz - b.cz,
        a.w - b.w,
        a.l - b.l,
        a.h - b.h,
        wrap_angle(a.yaw - b.yaw),
    ]
    .iter()
    .all(|v| v.abs() <= tol)
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded((a, b) in box_pairs()) {
        let ab = iou3d(&a, &b);
        let ba = iou3d(&b, &a);
        prop_assert!((ab - ba).abs() <= 1e-9);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
    }

    #[test]
    fn iou_of_a_box_with_itself_is_one(a in boxes()) {
        prop_assert!((iou3d(&a, &a) - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn iou_is_rigid_invariant(
        (a, b) in box_pairs(),
        tx in -50.0..50.0f64,
        ty in -50.0..50.0f64,
        tz in -5.0..5.0f64,
        angle in -PI..PI,
    ) {
        let before = iou3d(&a, &b);
        let after = iou3d(&rigid(&a, [tx, ty, tz], angle), &rigid(&b, [tx, ty, tz], angle));
        prop_assert!((before - after).abs() <= 1e-9, "{before} vs {after}");
    }

    #[test]
    fn iou_shrinks_as_boxes_separate(a in boxes(), d in 0.0..1.0f64) {
        let (s, c) = a.yaw.sin_cos();
        let near = a.with_center([a.cx + c * d * a.l, a.cy + s * d * a.l, a.cz]);
        let far = a.with_center([a.cx + c * (d + 0.1) * a.l, a.cy + s * (d + 0.1) * a.l, a.cz]);
        prop_assert!(iou3d(&a, &far) <= iou3d(&a, &near) + 1e-12);
    }

    #[test]
    fn motion_round_trips_in_both_frames(a in boxes(), d in deltas()) {
        for frame in [MotionFrame::Canonical, MotionFrame::World] {
            let b = apply_motion(&a, &d, frame);
            let back = relative_motion(&a, &b, frame);
            prop_assert!((back.dx - d.dx).abs() <= 1e-9);
            prop_assert!((back.dy - d.dy).abs() <= 1e-9);
            prop_assert!((back.dz - d.dz).abs() <= 1e-12);
            prop_assert!(wrap_angle(back.dyaw - d.dyaw).abs() <= 1e-12);
            prop_assert!(close(&apply_motion(&a, &back, frame), &b, 1e-9));
        }
    }

    #[test]
    fn canonical_delta_is_pose_independent(a in boxes(), d in deltas(), t in -30.0..30.0f64, angle in -PI..PI) {
        let moved = rigid(&a, [t, -t, 0.5], angle);
        let b1 = apply_motion(&a, &d, MotionFrame::Canonical);
        let b2 = apply_motion(&moved, &d, MotionFrame::Canonical);
        prop_assert!(close(&rigid(&b1, [t, -t, 0.5], angle), &b2, 1e-9));
    }

    #[test]
    fn inverse_canonical_undoes_a_delta(a in boxes(), d in deltas()) {
        let b = apply_motion(&a, &d, MotionFrame::Canonical);
        prop_assert!(close(&apply_motion(&b, &d.inverse_canonical(), MotionFrame::Canonical), &a, 1e-9));
    }

    #[test]
    fn canonical_points_round_trip(a in boxes(), pts in prop::collection::vec(prop::array::uniform3(-30.0..30.0f64), 1..40)) {
        let pc = PointCloud::from_xyz(&pts);
        let back = from_canonical(&to_canonical(&pc, &a), &a);
        for (p, q) in pc.iter_xyz().zip(back.iter_xyz()) {
            for k in 0..3 {
                prop_assert!((p[k] - q[k]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn corners_lie_on_the_box(a in boxes()) {
        let corners = box_corners(&a);
        for c in corners {
            prop_assert!(a.contains(c));
            let l = a.world_to_local(c);
            prop_assert!((l[0].abs() - a.l / 2.0).abs() <= 1e-9);
            prop_assert!((l[1].abs() - a.w / 2.0).abs() <= 1e-9);
            prop_assert!((l[2].abs() - a.h / 2.0).abs() <= 1e-9);
        }
        let centroid = corners.iter().fold([0.0; 3], |s, c| [s[0] + c[0] / 8.0, s[1] + c[1] / 8.0, s[2] + c[2] / 8.0]);
        prop_assert!((centroid[0] - a.cx).abs() <= 1e-9 && (centroid[1] - a.cy).abs() <= 1e-9);
    }

    #[test]
    fn relative_box_frames_invert(a in boxes(), r in boxes()) {
        prop_assert!(close(&a.relative_to(&r).from_frame_of(&r), &a, 1e-9));
    }

    #[test]
    fn center_distance_is_a_metric((a, b) in box_pairs(), c in boxes()) {
        prop_assert!((center_distance(&a, &b) - center_distance(&b, &a)).abs() <= 1e-12);
        prop_assert!(center_distance(&a, &c) <= center_distance(&a, &b) + center_distance(&b, &c) + 1e-9);
    }
}

#[test]
fn iou_of_disjoint_boxes_is_zero() {
    let a = Box3D::new([0.0, 0.0, 0.0], 1.0, 2.0, 1.0, 0.3).unwrap();
    assert_eq!(iou3d(&a, &a.with_center([10.0, 0.0, 0.0])), 0.0);
    assert_eq!(iou3d(&a, &a.with_center([0.0, 0.0, 1.5])), 0.0);
}
