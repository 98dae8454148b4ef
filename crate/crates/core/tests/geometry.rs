mod common;

use common::{camera, point_in_front, random_pose, random_rotation, random_vec, rodrigues};
use featslam::geometry::{
    estimate_two_view, exp_so3, log_so3, triangulate, umeyama, Pose, RansacConfig, SimTransform, TriangulationConfig,
};
use nalgebra::{Vector2, Vector3, Vector6};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn triangulation_round_trip_over_random_pairs() {
    let k = camera();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    let mut solved = 0;
    for _ in 0..500 {
        let p1 = random_pose(&mut rng);
        let step = Pose::from_parts(random_rotation(&mut rng, 0.2), random_vec(&mut rng, 1.0) + Vector3::new(0.8, 0.0, 0.0));
        let p2 = step.compose(&p1);
        let x = point_in_front(&mut rng, &p1, 2.0, 8.0);
        let (c1, c2) = (p1.transform(&x), p2.transform(&x));
        if c2.z < 0.5 {
            continue;
        }
        let o1 = k.project_unchecked(&c1);
        let o2 = k.project_unchecked(&c2);
        let cfg = TriangulationConfig { min_parallax_deg: 0.5 };
        if let Ok(l) = triangulate(&o1, &o2, &p1, &p2, &k, &cfg) {
            worst = worst.max((l.position - x).norm() / x.norm().max(1.0));
            solved += 1;
        }
    }
    assert!(solved > 300, "only {solved} pairs triangulated");
    assert!(worst < 1e-9, "worst relative error {worst:e}");
}

fn two_view_scene(seed: u64, outlier_rate: f64) -> (Vec<(Vector2<f64>, Vector2<f64>)>, Pose, Vec<bool>) {
    let k = camera();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rel = Pose::from_axis_angle(Vector3::new(0.02, -0.1, 0.03), Vector3::new(-0.9, 0.1, 0.2).normalize());
    let mut matches = Vec::new();
    let mut truth = Vec::new();
    while matches.len() < 300 {
        let x = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-2.0..2.0), rng.random_range(4.0..10.0));
        let (a, b) = (k.project_unchecked(&x), k.project_unchecked(&rel.transform(&x)));
        if !(k.in_image(&a) && k.in_image(&b)) {
            continue;
        }
        if rng.random_bool(outlier_rate) {
            let junk = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            matches.push((a, junk));
            truth.push(false);
        } else {
            matches.push((a, b));
            truth.push(true);
        }
    }
    (matches, rel, truth)
}

#[test]
fn two_view_ransac_recovers_pose_with_thirty_percent_outliers() {
    for seed in 0..5 {
        let (matches, rel, _) = two_view_scene(seed, 0.3);
        let est = estimate_two_view(&matches, &camera(), &RansacConfig { seed, ..Default::default() }).unwrap();
        let dr = (est.relative.rotation() - rel.rotation()).abs().max();
        let dt = (est.relative.translation() - rel.translation()).abs().max();
        assert!(dr < 1e-6 && dt < 1e-6, "seed {seed}: rotation {dr:e} translation {dt:e}");
    }
}

#[test]
fn two_view_inliers_match_planted_labels() {
    let (matches, _, truth) = two_view_scene(3, 0.3);
    let est = estimate_two_view(&matches, &camera(), &RansacConfig::default()).unwrap();
    // a junk match can land on its epipolar line by chance, so allow a handful
    let wrong = est.inliers.iter().zip(&truth).filter(|(a, b)| a != b).count();
    assert!(wrong <= 3, "{wrong} misclassified");
    assert!(truth.iter().zip(&est.inliers).all(|(t, e)| !t || *e), "every true match is an inlier");
}

#[test]
fn two_view_needs_eight_matches() {
    let (matches, _, _) = two_view_scene(1, 0.0);
    assert!(estimate_two_view(&matches[..7], &camera(), &RansacConfig::default()).is_err());
}

#[test]
fn umeyama_recovers_planted_similarity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let s = rng.random_range(0.1..10.0);
        let r = random_rotation(&mut rng, std::f64::consts::PI);
        let t = random_vec(&mut rng, 20.0);
        let src: Vec<_> = (0..40).map(|_| random_vec(&mut rng, 5.0)).collect();
        let dst: Vec<_> = src.iter().map(|p| s * (r * p) + t).collect();
        let a = umeyama(&src, &dst, true).unwrap();
        assert!((a.scale() - s).abs() < 1e-9 * s);
        assert!((a.rotation() - r).abs().max() < 1e-9);
        assert!((a.translation() - t).abs().max() < 1e-9 * t.norm().max(1.0));
    }
}

#[test]
fn umeyama_rigid_keeps_unit_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let r = random_rotation(&mut rng, 3.0);
    let src: Vec<_> = (0..20).map(|_| random_vec(&mut rng, 5.0)).collect();
    let dst: Vec<_> = src.iter().map(|p| 2.0 * (r * p)).collect();
    assert_eq!(umeyama(&src, &dst, false).unwrap().scale(), 1.0);
}

#[test]
fn umeyama_rejects_collinear_points() {
    let src: Vec<_> = (0..10).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
    assert!(umeyama(&src, &src, true).is_err());
}

fn small_vec3() -> impl Strategy<Value = Vector3<f64>> {
    (-3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64).prop_map(|(a, b, c)| Vector3::new(a, b, c))
}

proptest! {
    #[test]
    fn exp_matches_longhand_rodrigues(w in small_vec3()) {
        prop_assert!((exp_so3(&w) - rodrigues(&w)).abs().max() < 1e-12);
    }

    #[test]
    fn log_inverts_exp_below_pi(w in small_vec3()) {
        prop_assume!(w.norm() < 3.1);
        prop_assert!((log_so3(&exp_so3(&w)) - w).norm() < 1e-9);
    }

    #[test]
    fn pose_inverse_composes_to_identity(w in small_vec3(), t in small_vec3()) {
        let p = Pose::from_axis_angle(w, t);
        prop_assert!(p.compose(&p.inverse()).max_difference(&Pose::identity()) < 1e-12);
    }

    #[test]
    fn retract_by_zero_is_identity(w in small_vec3(), t in small_vec3()) {
        let p = Pose::from_axis_angle(w, t);
        prop_assert!(p.retract(&Vector6::zeros()).max_difference(&p) < 1e-15);
    }

    #[test]
    fn similarity_inverse_round_trips_points(w in small_vec3(), t in small_vec3(), ls in -2.0..2.0f64, x in small_vec3()) {
        let s = SimTransform::from_params(&w, &t, ls);
        prop_assert!((s.inverse().apply(&s.apply(&x)) - x).norm() < 1e-10 * (1.0 + x.norm()));
    }

    #[test]
    fn similarity_compose_matches_sequential_application(
        w1 in small_vec3(), t1 in small_vec3(), l1 in -1.0..1.0f64,
        w2 in small_vec3(), t2 in small_vec3(), l2 in -1.0..1.0f64,
        x in small_vec3(),
    ) {
        let a = SimTransform::from_params(&w1, &t1, l1);
        let b = SimTransform::from_params(&w2, &t2, l2);
        prop_assert!((a.compose(&b).apply(&x) - a.apply(&b.apply(&x))).norm() < 1e-9);
    }

    #[test]
    fn projection_reprojects_normalized_coordinates(x in -2.0..2.0f64, y in -2.0..2.0f64, z in 0.5..20.0f64) {
        let k = camera();
        let px = k.project_unchecked(&Vector3::new(x, y, z));
        let n = k.normalize(&px);
        prop_assert!((n - Vector2::new(x / z, y / z)).norm() < 1e-12);
    }
}
