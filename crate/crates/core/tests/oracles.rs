use pointsea::geom::{fixed_test_viewpoints, fps, knn, nearest_distance_field, viewpoint_crop, PointCloud, Viewpoint};
use pointsea::metrics::{chamfer, dcd, f1_score, mmd, ChamferVariant};
use pointsea::reference;
use pointsea::synth::uniform_cube;
use proptest::prelude::*;

fn cloud_strategy(min: usize, max: usize) -> impl Strategy<Value = PointCloud> {
    prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), min..=max).prop_map(|v| PointCloud::new(v).unwrap())
}

/// Coarse grid coordinates so that exact distance ties actually occur.
fn grid_cloud(min: usize, max: usize) -> impl Strategy<Value = PointCloud> {
    prop::collection::vec(prop::array::uniform3(-3i32..=3), min..=max)
        .prop_map(|v| PointCloud::new(v.into_iter().map(|p| p.map(|c| c as f64 * 0.25)).collect()).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn knn_matches_full_sort(r in cloud_strategy(1, 300), q in cloud_strategy(1, 30), k in 1usize..20) {
        let k = k.min(r.len());
        let fast: Vec<Vec<usize>> = knn(&q, &r, k).unwrap().into_iter().map(|s| s.into_vec()).collect();
        prop_assert_eq!(fast, reference::knn(&q, &r, k));
    }

    #[test]
    fn knn_ties_resolve_by_index(r in grid_cloud(64, 200), q in grid_cloud(1, 20), k in 1usize..12) {
        let fast: Vec<Vec<usize>> = knn(&q, &r, k).unwrap().into_iter().map(|s| s.into_vec()).collect();
        prop_assert_eq!(fast, reference::knn(&q, &r, k));
    }

    #[test]
    fn fps_matches_recomputation(c in grid_cloud(1, 150), m in 1usize..40) {
        let m = m.min(c.len());
        prop_assert_eq!(fps(&c, m).unwrap().into_vec(), reference::fps(&c, m));
    }

    #[test]
    fn crop_matches_sort(c in grid_cloud(4, 200), vi in 0usize..8, miss in 1usize..100, keep in 1usize..100) {
        let miss = miss.min(c.len() - 1);
        let keep = keep.min(c.len() - miss);
        let vp = fixed_test_viewpoints()[vi];
        let (partial, missing) = viewpoint_crop(&c, &vp, miss, keep).unwrap();
        let (rp, rm) = reference::viewpoint_crop(&c, &vp, miss, keep);
        prop_assert_eq!(partial.points(), rp.as_slice());
        prop_assert_eq!(missing.points(), rm.as_slice());
    }

    #[test]
    fn distance_field_matches_scan(q in cloud_strategy(1, 300), a in cloud_strategy(1, 300)) {
        let fast = nearest_distance_field(&q, &a).unwrap();
        let slow = reference::nearest_distance_field(&q, &a);
        for (x, y) in fast.iter().zip(&slow) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn metrics_match_literal_loops(x in cloud_strategy(1, 128), y in cloud_strategy(1, 128)) {
        for v in ChamferVariant::ALL {
            let (a, b) = (chamfer(&x, &y, v).unwrap(), reference::chamfer(&x, &y, v));
            prop_assert!((a - b).abs() <= 1e-10, "{v}: {a} vs {b}");
        }
        let (a, b) = (dcd(&x, &y, 1000.0).unwrap(), reference::dcd(&x, &y, 1000.0));
        prop_assert!((a - b).abs() <= 1e-10);
        prop_assert_eq!(f1_score(&x, &y, 0.1).unwrap(), reference::f1_score(&x, &y, 0.1));
    }
}

#[test]
fn crop_removes_farthest_collinear() {
    let gt = PointCloud::new((1..=4).map(|x| [x as f64, 0.0, 0.0]).collect()).unwrap();
    let vp = Viewpoint::new([0.0; 3], [1.0, 0.0, 0.0]).unwrap();
    let (partial, missing) = viewpoint_crop(&gt, &vp, 2, 2).unwrap();
    let mut kept: Vec<f64> = partial.points().iter().map(|p| p[0]).collect();
    kept.sort_by(f64::total_cmp);
    assert_eq!(kept, vec![1.0, 2.0]);
    assert_eq!(missing.points(), &[[3.0, 0.0, 0.0], [4.0, 0.0, 0.0]]);
}

#[test]
fn crop_top_256_of_1024() {
    let gt = uniform_cube(1024, 0.5, 3);
    let vp = fixed_test_viewpoints()[5];
    let (_, missing) = viewpoint_crop(&gt, &vp, 256, 512).unwrap();
    let mut by_dist: Vec<usize> = (0..1024).collect();
    let d = |i: usize| pointsea::geom::sq_dist(&gt.points()[i], &vp.position);
    by_dist.sort_by(|&a, &b| d(b).total_cmp(&d(a)));
    let mut top: Vec<usize> = by_dist[..256].to_vec();
    top.sort_unstable();
    let expect: Vec<[f64; 3]> = top.iter().map(|&i| gt.points()[i]).collect();
    assert_eq!(missing.points(), expect.as_slice());
}

#[test]
fn protocol_sizes() {
    let gt = uniform_cube(8192, 0.5, 4);
    for n in [2048, 4096, 6144] {
        let (p, m) = viewpoint_crop(&gt, &fixed_test_viewpoints()[0], n, 2048).unwrap();
        assert_eq!((p.len(), m.len()), (2048, n));
    }
}

#[test]
fn mmd_matches_exhaustive_scan() {
    for seed in 0..10 {
        let pred = uniform_cube(128, 0.5, seed);
        let gallery: Vec<PointCloud> = (0..10).map(|g| uniform_cube(100, 0.5, 1000 + seed * 10 + g)).collect();
        let (a, i) = mmd(&pred, &gallery).unwrap();
        let (b, j) = reference::mmd(&pred, &gallery);
        assert_eq!(i, j);
        assert!((a - b).abs() <= 1e-10);
        let single = mmd(&pred, &gallery[3..4]).unwrap();
        assert_eq!(
            single,
            (chamfer(&pred, &gallery[3], ChamferVariant::L2Squared).unwrap(), 0)
        );
    }
    assert!(mmd(&uniform_cube(4, 1.0, 0), &[]).is_err());
}

#[test]
fn large_chamfer_matches_oracle() {
    let x = uniform_cube(512, 1.0, 77);
    let y = uniform_cube(512, 1.0, 78);
    for v in ChamferVariant::ALL {
        assert!((chamfer(&x, &y, v).unwrap() - reference::chamfer(&x, &y, v)).abs() <= 1e-10);
    }
}
