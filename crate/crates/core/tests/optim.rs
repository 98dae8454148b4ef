mod common;

use common::{camera, numeric_jacobians, point_in_front, random_ba_problem, random_pose};
use featslam::geometry::SimTransform;
use featslam::optim::{huber_cost, huber_weight, optimize_pose, reprojection_jacobians, LmConfig, PoseGraph, CHI2_2DOF};
use nalgebra::{Matrix2xX, Vector2, Vector3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn relative_error(a: &Matrix2xX<f64>, b: &Matrix2xX<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-12)
}

#[test]
fn reprojection_jacobians_match_finite_differences() {
    let k = camera();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let pose = random_pose(&mut rng);
        let x = point_in_front(&mut rng, &pose, 0.5, 20.0);
        let (_, jp, jx) = reprojection_jacobians(&pose, &x, &k).expect("point in front");
        let (np, nx) = numeric_jacobians(&pose, &x, &k, 1e-6);
        let ep = relative_error(&Matrix2xX::from_iterator(6, jp.iter().copied()), &Matrix2xX::from_iterator(6, np.iter().copied()));
        let ex = relative_error(&Matrix2xX::from_iterator(3, jx.iter().copied()), &Matrix2xX::from_iterator(3, nx.iter().copied()));
        worst = worst.max(ep).max(ex);
    }
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn jacobians_unavailable_behind_camera() {
    let pose = featslam::geometry::Pose::identity();
    assert!(reprojection_jacobians(&pose, &Vector3::new(0.0, 0.0, -1.0), &camera()).is_none());
}

#[test]
fn levenberg_marquardt_cost_never_increases() {
    let k = camera();
    for seed in 0..20 {
        let (mut problem, _, _) = random_ba_problem(seed, 1.0, 0.05);
        let report = problem.optimize(&k, &LmConfig { max_iterations: 20, ..Default::default() });
        assert!(report.is_monotone(), "seed {seed}: {:?}", report.costs);
        assert!(report.final_cost() < report.initial_cost());
    }
}

#[test]
fn noiseless_bundle_adjustment_reaches_truth() {
    let k = camera();
    let (mut problem, poses, points) = random_ba_problem(7, 0.0, 0.03);
    let cfg = LmConfig {
        max_iterations: 50,
        huber_delta: None,
        ..Default::default()
    };
    problem.optimize(&k, &cfg);
    assert!(problem.rmse(&k) < 1e-6, "rmse {}", problem.rmse(&k));
    for (est, truth) in problem.poses.iter().zip(&poses) {
        assert!(est.max_difference(truth) < 1e-6);
    }
    for (est, truth) in problem.points.iter().zip(&points) {
        assert!((est - truth).norm() < 1e-5);
    }
}

#[test]
fn motion_only_refinement_flags_planted_outliers() {
    let k = camera();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let truth = random_pose(&mut rng);
    let mut corr = Vec::new();
    for i in 0..100 {
        let x = point_in_front(&mut rng, &truth, 2.0, 10.0);
        let mut px = k.project_unchecked(&truth.transform(&x));
        if i % 10 == 0 {
            px += Vector2::new(40.0, -30.0);
        }
        corr.push((x, px, 1.0));
    }
    let start = truth.retract(&nalgebra::Vector6::new(0.01, -0.01, 0.005, 0.05, 0.02, -0.03));
    let (pose, inliers) = optimize_pose(start, &corr, &k, 4, 10, CHI2_2DOF);
    assert!(pose.max_difference(&truth) < 1e-6);
    for (i, ok) in inliers.iter().enumerate() {
        assert_eq!(*ok, i % 10 != 0, "correspondence {i}");
    }
}

#[test]
fn pose_graph_pulls_drifted_node_back_onto_consistent_edges() {
    // four similarities tied in a cycle by edges measured at the truth
    let truth: Vec<SimTransform> = (0..4)
        .map(|i| SimTransform::from_params(&Vector3::new(0.0, 0.5 * i as f64, 0.0), &Vector3::new(i as f64, 0.0, 0.0), 0.0))
        .collect();
    let mut g = PoseGraph::default();
    for (i, s) in truth.iter().enumerate() {
        g.add_node(*s, i == 0);
    }
    for i in 0..3 {
        g.add_current_edge(i, i + 1, 1.0);
    }
    g.add_current_edge(3, 0, 1.0);
    // drift the last node so the loop edge is violated
    g.nodes[3] = SimTransform::from_params(&Vector3::new(0.0, 0.05, 0.0), &Vector3::new(0.2, 0.0, 0.0), 0.1).compose(&g.nodes[3]);
    let before = g.cost();
    let report = g.optimize(20);
    assert!(report.final_cost < 1e-12 * before.max(1.0), "{report:?}");
    for (n, t) in g.nodes.iter().zip(&truth) {
        assert!(n.max_difference(t) < 1e-6);
    }
}

proptest! {
    #[test]
    fn huber_is_continuous_and_bounded_by_quadratic(s in 0.0..100.0f64, d in 0.1..5.0f64) {
        let c = huber_cost(s, Some(d));
        prop_assert!(c <= s + 1e-12);
        let eps = 1e-9;
        prop_assert!((huber_cost(d * d + eps, Some(d)) - huber_cost(d * d - eps, Some(d))).abs() < 1e-6);
        let w = huber_weight(s, Some(d));
        prop_assert!(w > 0.0 && w <= 1.0);
    }

    #[test]
    fn huber_without_threshold_is_identity(s in 0.0..1e6f64) {
        prop_assert_eq!(huber_cost(s, None), s);
        prop_assert_eq!(huber_weight(s, None), 1.0);
    }
}
