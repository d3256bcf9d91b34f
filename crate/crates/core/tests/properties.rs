use nalgebra::Vector3;
use proptest::prelude::*;

use pointmbf::eval::report::Accuracy;
use pointmbf::eval::{aggregate, rotation_error, translation_error, PairResult};
use pointmbf::gather::{gather_v2g, Direction, GatherSpec, PixelGrid};
use pointmbf::matching::{build_correspondences, lowe_ratio};
use pointmbf::rgbd::{CameraIntrinsics, DepthImage, RigidTransform};
use pointmbf::robust::{weighted_procrustes, WeightedPair};
use pointmbf::tape::Tensor;

fn vec3(range: f64) -> impl Strategy<Value = Vector3<f64>> {
    prop::array::uniform3(-range..range).prop_map(|a| Vector3::new(a[0], a[1], a[2]))
}

fn transform() -> impl Strategy<Value = RigidTransform> {
    (vec3(1.0), 0.0..3.1f64, vec3(2.0)).prop_filter_map("degenerate axis", |(axis, angle, t)| {
        (axis.norm() > 1e-3).then(|| RigidTransform::from_axis_angle(&axis, angle, t))
    })
}

fn close(a: &RigidTransform, b: &RigidTransform, tol: f64) -> bool {
    (a.rotation - b.rotation).abs().max() < tol && (a.translation - b.translation).abs().max() < tol
}

proptest! {
    #[test]
    fn pixel_depth_round_trip(u in -0.5..63.4f64, v in -0.5..47.4f64, z in 0.1..10.0f64) {
        let intr = CameraIntrinsics::default_for(64, 48);
        let p = intr.unproject(u, v, z);
        let q = intr.project(&p);
        prop_assert!(q.valid);
        prop_assert!((q.u - u).abs() < 1e-9 && (q.v - v).abs() < 1e-9);
        prop_assert!((intr.unproject(q.u, q.v, p.z) - p).norm() < 1e-9);
    }

    #[test]
    fn compose_with_inverse_is_identity(t in transform(), p in vec3(5.0)) {
        let id = RigidTransform::identity();
        prop_assert!(close(&t.compose(&t.inverse()), &id, 1e-9));
        prop_assert!(close(&t.inverse().compose(&t), &id, 1e-9));
        prop_assert!((t.inverse().apply(&t.apply(&p)) - p).norm() < 1e-9);
    }

    #[test]
    fn matrix_round_trip(t in transform()) {
        let back = RigidTransform::from_matrix4(&t.to_matrix4()).unwrap();
        prop_assert!(close(&back, &t, 1e-12));
    }

    #[test]
    fn composed_error_matches_angle(t in transform()) {
        let id = RigidTransform::identity();
        prop_assert!(rotation_error(&t, &t) < 1e-5);
        prop_assert!((rotation_error(&t, &id) - t.angle().to_degrees()).abs() < 1e-6);
        prop_assert!((rotation_error(&t, &id) - rotation_error(&id, &t)).abs() < 1e-6);
        prop_assert!((translation_error(&t, &id) - t.translation.norm() * 100.0).abs() < 1e-9);
    }

    #[test]
    fn procrustes_is_equivariant(
        t in transform(),
        g in transform(),
        pts in prop::collection::vec((vec3(1.0), 0.1..1.0f64), 4..20),
    ) {
        let pairs: Vec<WeightedPair> = pts.iter().map(|(p, w)| WeightedPair { src: t.apply(p), tgt: *p, w: *w }).collect();
        let moved: Vec<WeightedPair> = pairs.iter().map(|q| WeightedPair { src: g.apply(&q.src), ..*q }).collect();
        let fit = weighted_procrustes(&pairs).unwrap();
        let fit_moved = weighted_procrustes(&moved).unwrap();
        prop_assert!(close(&fit, &t, 1e-6));
        prop_assert!(close(&fit_moved, &g.compose(&fit), 1e-6));
    }

    #[test]
    fn ratio_is_scale_invariant(
        data in prop::collection::vec(-1.0..1.0f64, 4 * 6),
        query in prop::collection::vec(-1.0..1.0f64, 4),
        c in 0.01..100.0f64,
    ) {
        let targets = Tensor::new(6, 4, data.clone());
        let scaled = Tensor::new(6, 4, data.iter().map(|v| v * c).collect());
        let q2: Vec<f64> = query.iter().map(|v| v * c).collect();
        let a = lowe_ratio(&query, &targets).unwrap();
        let b = lowe_ratio(&q2, &scaled).unwrap();
        prop_assert_eq!((a.nearest, a.second), (b.nearest, b.second));
        prop_assert!((a.r - b.r).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&a.r));
    }

    #[test]
    fn correspondences_ignore_feature_scale(
        src in prop::collection::vec(-1.0..1.0f64, 8 * 3),
        tgt in prop::collection::vec(-1.0..1.0f64, 8 * 3),
        c in 0.1..10.0f64,
        k in 1usize..5,
    ) {
        let pts: Vec<_> = (0..8).map(|i| Vector3::new(i as f64, 0.0, 1.0)).collect();
        let s = Tensor::new(8, 3, src.clone());
        let t = Tensor::new(8, 3, tgt.clone());
        let s2 = Tensor::new(8, 3, src.iter().map(|v| v * c).collect());
        let t2 = Tensor::new(8, 3, tgt.iter().map(|v| v * c).collect());
        let a = build_correspondences(&s, &pts, &t, &pts, k).unwrap();
        let b = build_correspondences(&s2, &pts, &t2, &pts, k).unwrap();
        prop_assert_eq!(a.len(), 2 * k);
        let idx = |set: &pointmbf::matching::CorrespondenceSet| -> Vec<(usize, usize)> {
            set.entries.iter().map(|e| (e.src_idx, e.tgt_idx)).collect()
        };
        prop_assert_eq!(idx(&a), idx(&b));
        for e in &a.entries {
            prop_assert!(e.w >= 0.0 && e.w <= 1.0);
        }
    }

    #[test]
    fn gather_grows_with_radius(
        depth in prop::collection::vec(prop_oneof![1 => Just(0.0), 4 => 0.8..1.6f64], 12 * 10),
        queries in prop::collection::vec(vec3(0.3), 1..8),
        r in 0.02..0.2f64,
        k in 1usize..12,
    ) {
        let intr = CameraIntrinsics::default_for(12, 10);
        let depth = DepthImage::new(12, 10, depth).unwrap();
        let grid = PixelGrid::new(&depth, &intr, 1).unwrap();
        let queries: Vec<_> = queries.iter().map(|q| q + Vector3::new(0.0, 0.0, 1.2)).collect();
        let small = gather_v2g(&queries, &grid, &GatherSpec::new(Direction::V2G, k, r).unwrap()).unwrap();
        let large = gather_v2g(&queries, &grid, &GatherSpec::new(Direction::V2G, k, 2.0 * r).unwrap()).unwrap();
        for q in 0..queries.len() {
            prop_assert!(small.valid_count(q) <= large.valid_count(q));
            let d = &small.distances[q * k..(q + 1) * k];
            prop_assert!(d.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(d.iter().all(|&x| x <= r || x.is_infinite()));
            // Valid slots come first, pads last.
            let slots = small.query_slots(q);
            let n = small.valid_count(q);
            prop_assert!(slots[..n].iter().all(Option::is_some) && slots[n..].iter().all(Option::is_none));
        }
    }

    #[test]
    fn aggregate_ignores_order(
        rows in prop::collection::vec((0.0..60.0f64, 0.0..30.0f64, 0.0..15.0f64), 1..30),
        shift in 0usize..30,
    ) {
        let results: Vec<PairResult> = rows
            .iter()
            .enumerate()
            .map(|(i, &(r, t, c))| PairResult { id: format!("{i:03}"), rotation_deg: r, translation_cm: t, chamfer_mm: c })
            .collect();
        let mut rotated = results.clone();
        rotated.rotate_left(shift % results.len());
        rotated.reverse();
        let a = aggregate(&results).unwrap();
        let b = aggregate(&rotated).unwrap();
        prop_assert_eq!(a.pairs, b.pairs);
        for (x, y) in [(&a.rotation_deg, &b.rotation_deg), (&a.translation_cm, &b.translation_cm), (&a.chamfer_mm, &b.chamfer_mm)] {
            prop_assert_eq!(x.median, y.median);
            prop_assert!((x.mean - y.mean).abs() < 1e-9);
            prop_assert_eq!(&x.accuracy, &y.accuracy);
            // Accuracy is monotone in the threshold.
            prop_assert!(x.accuracy.windows(2).all(|w: &[Accuracy]| w[0].percent <= w[1].percent));
        }
    }
}
