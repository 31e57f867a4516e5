use p2p_core::data::synthetic::{gen_synthetic_set, gen_synthetic_tracklet, SyntheticSceneConfig};
use p2p_core::data::Tracklet;
use p2p_core::eval::{
    bin_by_sparsity, compute_ope, constant_velocity_baseline, evaluate_tracker, summarize, track_sequence, CvConfig,
    EmptyCropFallback, OpeResult, OraclePredictor, DEFAULT_SPARSITY_EDGES,
};
use p2p_core::geometry::{center_distance, points_in_box};
use p2p_core::{Box3D, SearchRegion};
use proptest::prelude::*;

fn gt_box() -> Box3D {
    Box3D::new([0.0, 0.0, 0.0], 1.8, 4.0, 1.5, 0.0).unwrap()
}

/// Predictions with the given center offsets along x.
fn shifted(offsets: &[f64]) -> (Vec<Box3D>, Vec<Box3D>) {
    let gt = vec![gt_box(); offsets.len()];
    let pred = offsets.iter().map(|&d| gt_box().with_center([d, 0.0, 0.0])).collect();
    (pred, gt)
}

/// Area under the curve by explicit summation over 101 thresholds.
fn brute_force(ious: &[f64], dists: &[f64]) -> (f64, f64) {
    let n = ious.len() as f64;
    let (mut s, mut p) = (0.0, 0.0);
    for i in 0..=100 {
        let th = i as f64 / 100.0;
        s += ious.iter().filter(|&&v| v > th).count() as f64 / n;
        p += dists.iter().filter(|&&v| v <= 2.0 * th).count() as f64 / n;
    }
    (100.0 * s / 101.0, 100.0 * p / 101.0)
}

proptest! {
    #[test]
    fn ope_matches_brute_force(offsets in prop::collection::vec(0.0..5.0f64, 1..30)) {
        let (pred, gt) = shifted(&offsets);
        let r = compute_ope(&pred, &gt).unwrap();
        // x spans the 4 m length, so IoU = (4 - d) / (4 + d) for d < 4
        for (iou, d) in r.ious.iter().zip(&offsets) {
            let want = if *d < 4.0 { (4.0 - d) / (4.0 + d) } else { 0.0 };
            prop_assert!((iou - want).abs() <= 1e-9);
        }
        let (s, p) = brute_force(&r.ious, &r.distances);
        prop_assert!((r.success - s).abs() <= 1e-9 && (r.precision - p).abs() <= 1e-9);
        prop_assert!((0.0..=100.0).contains(&r.success) && (0.0..=100.0).contains(&r.precision));
    }

    #[test]
    fn better_frames_never_lower_the_score(offsets in prop::collection::vec(0.0..5.0f64, 1..30), k in 0usize..30, f in 0.0..1.0f64) {
        let k = k % offsets.len();
        let (pred, gt) = shifted(&offsets);
        let before = compute_ope(&pred, &gt).unwrap();
        let mut improved = offsets.clone();
        improved[k] *= f;
        let (pred, gt) = shifted(&improved);
        let after = compute_ope(&pred, &gt).unwrap();
        prop_assert!(after.success >= before.success && after.precision >= before.precision);
    }

    #[test]
    fn curves_are_monotone(offsets in prop::collection::vec(0.0..5.0f64, 1..30)) {
        let (pred, gt) = shifted(&offsets);
        let r = compute_ope(&pred, &gt).unwrap();
        let s = r.success_curve();
        let p = r.precision_curve(2.0);
        prop_assert_eq!(s.len(), 101);
        prop_assert!(s.windows(2).all(|w| w[1].1 <= w[0].1 && w[1].0 > w[0].0));
        prop_assert!(p.windows(2).all(|w| w[1].1 >= w[0].1));
    }

    #[test]
    fn aggregate_pools_frames(a in prop::collection::vec(0.0..5.0f64, 1..20), b in prop::collection::vec(0.0..5.0f64, 1..20)) {
        let (pa, ga) = shifted(&a);
        let (pb, gb) = shifted(&b);
        let pooled = OpeResult::aggregate(&[compute_ope(&pa, &ga).unwrap(), compute_ope(&pb, &gb).unwrap()]).unwrap();
        let all: Vec<f64> = a.iter().chain(&b).copied().collect();
        let (p, g) = shifted(&all);
        let direct = compute_ope(&p, &g).unwrap();
        prop_assert!((pooled.success - direct.success).abs() <= 1e-9);
        prop_assert!((pooled.precision - direct.precision).abs() <= 1e-9);
    }
}

fn oracle_track(t: &Tracklet) -> Vec<Box3D> {
    let gt = t.gt_boxes();
    let oracle = OraclePredictor {
        gt: &gt,
        region: SearchRegion::CAR,
    };
    track_sequence(&oracle, t, gt[0], EmptyCropFallback::CarryForward).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn oracle_scores_near_perfect_on_any_synthetic_tracklet(seed in any::<u64>(), distractors in 0usize..3, sparse in 1usize..40) {
        let s = gen_synthetic_tracklet(&SyntheticSceneConfig {
            n_distractors: distractors,
            sparsity_level: Some(sparse),
            clutter_points_per_frame: 200,
            seed,
            ..SyntheticSceneConfig::default()
        })
        .unwrap();
        let r = compute_ope(&oracle_track(&s.tracklet), &s.tracklet.gt_boxes()).unwrap();
        prop_assert!(r.success >= 99.0 && r.precision >= 99.0, "{} {}", r.success, r.precision);
    }
}

#[test]
fn constant_velocity_trails_the_oracle() {
    let set: Vec<Tracklet> = gen_synthetic_set(
        &SyntheticSceneConfig {
            seed: 77,
            ..SyntheticSceneConfig::desk()
        },
        12,
    )
    .unwrap()
    .into_iter()
    .map(|s| s.tracklet)
    .collect();
    let oracle = evaluate_tracker("oracle", &set, |t| Ok(oracle_track(t))).unwrap();
    let cv = evaluate_tracker("cv", &set, |t| {
        Ok(constant_velocity_baseline(t, t.frames[0].gt, &CvConfig::default()))
    })
    .unwrap();
    let o = &summarize("oracle", &oracle, &DEFAULT_SPARSITY_EDGES)[0];
    let c = &summarize("cv", &cv, &DEFAULT_SPARSITY_EDGES)[0];
    assert_eq!(o.n_tracklets, 12);
    assert_eq!(o.n_frames, 12 * 20);
    assert!(
        c.success < o.success && c.precision < o.precision,
        "cv {c:?} oracle {o:?}"
    );
}

#[test]
fn first_frame_is_the_given_box() {
    let s = gen_synthetic_tracklet(&SyntheticSceneConfig::desk()).unwrap();
    let init = s.tracklet.frames[0].gt;
    let cv = constant_velocity_baseline(&s.tracklet, init, &CvConfig::default());
    assert_eq!(cv.len(), s.tracklet.len());
    assert_eq!(cv[0], init);
    assert_eq!(center_distance(&oracle_track(&s.tracklet)[0], &init), 0.0);
}

#[test]
fn sparsity_bins_partition_the_tracklets() {
    let set: Vec<Tracklet> = (0..30)
        .map(|i| {
            gen_synthetic_tracklet(&SyntheticSceneConfig {
                n_frames: 2,
                sparsity_level: Some(i * 2),
                clutter_points_per_frame: 50,
                seed: i as u64,
                ..SyntheticSceneConfig::default()
            })
            .unwrap()
            .tracklet
        })
        .collect();
    let edges = DEFAULT_SPARSITY_EDGES;
    let bins = bin_by_sparsity(&set, &edges).unwrap();
    let mut seen: Vec<usize> = bins.iter().flatten().copied().collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..30).collect::<Vec<_>>());
    for (b, members) in bins.iter().enumerate() {
        let lo = if b == 0 { 0 } else { edges[b - 1] };
        let hi = edges.get(b).copied().unwrap_or(usize::MAX);
        for &i in members {
            let f = &set[i].frames[0];
            let n = points_in_box(&f.points, &f.gt).iter().filter(|&&v| v).count();
            assert!(n >= lo && n < hi, "tracklet {i} with {n} points in bin {b}");
        }
    }
    assert!(bin_by_sparsity(&set, &[20, 10]).is_err());
}
