//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! The process exits non-zero if any check fails, except for checks listed in
//! `KNOWN_UNATTAINABLE`, which are printed as FAIL but do not fail the build.

mod common;

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use common::{
    camera, clustered_corpus, gamma_value, leaf_by_enumeration, numeric_jacobians, point_in_front, random_ba_problem,
    random_bits, random_pose, random_rotation, random_vec, rodrigues, rpe_exhaustive,
};
use featslam::dataset::{PathKind, SceneConfig};
use featslam::evaluation::{align_trajectory, compute_ate, compute_rpe, Trajectory};
use featslam::experiment::{run_experiment, RunConfig};
use featslam::features::Descriptor;
use featslam::geometry::{estimate_two_view, triangulate, umeyama, Pose, RansacConfig, SimTransform, TriangulationConfig};
use featslam::imaging::{gamma_transform, GammaParam, GrayImage};
use featslam::optim::{reprojection_jacobians, LmConfig};
use featslam::pipeline::SlamConfig;
use featslam::place_recognition::{score, train_vocabulary, Vocabulary};
use featslam::scenarios::{run_drift_scenario, DriftScenario};
use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Checks that cannot pass by construction. Dividing by a large gamma maps the darkest
/// input levels onto a handful of outputs, so no inverse can recover them.
const KNOWN_UNATTAINABLE: &[&str] = &["gamma.round_trip_darkening"];

const GAMMA_GRID: [f64; 4] = [0.25, 0.5, 2.0, 4.0];

struct Check {
    id: &'static str,
    ok: bool,
    detail: String,
}

fn check(id: &'static str, ok: bool, detail: impl Into<String>) -> Check {
    Check { id, ok, detail: detail.into() }
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Vec<Check>); 9] = [
        ("noiseless arc", noiseless_arc),
        ("planted drift loop", planted_drift),
        ("bundle adjustment", bundle_adjustment),
        ("geometry oracles", geometry_oracles),
        ("metric oracles", metric_oracles),
        ("gamma transform", gamma_checks),
        ("bag of words", bag_of_words),
        ("aggregation and gamma grid", aggregation),
        ("determinism", determinism),
    ];
    let mut unexpected = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let checks = run();
        let failed: Vec<&Check> = checks.iter().filter(|c| !c.ok).collect();
        unexpected += failed.iter().filter(|c| !KNOWN_UNATTAINABLE.contains(&c.id)).count();
        let verdict = if failed.is_empty() { "PASS" } else { "FAIL" };
        let detail: Vec<String> = if failed.is_empty() {
            checks.iter().map(|c| c.detail.clone()).collect()
        } else {
            failed
                .iter()
                .map(|c| {
                    let known = if KNOWN_UNATTAINABLE.contains(&c.id) { " (known)" } else { "" };
                    format!("{}{known}: {}", c.id, c.detail)
                })
                .collect()
        };
        println!("{verdict} {} {name} [{:.1}s] {}", i + 1, started.elapsed().as_secs_f64(), detail.join("; "));
    }
    if unexpected == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{unexpected} unexpected failure(s)");
        ExitCode::FAILURE
    }
}

fn tempdir() -> tempfile::TempDir {
    tempfile::tempdir().expect("temporary directory")
}

fn noiseless_arc() -> Vec<Check> {
    let dir = tempdir();
    let cfg = RunConfig {
        out: dir.path().to_path_buf(),
        ..Default::default()
    };
    let started = Instant::now();
    let summary = run_experiment(&cfg);
    let secs = started.elapsed().as_secs_f64();
    let Ok(summary) = summary else {
        return vec![check("arc.run", false, format!("{:?}", summary.err()))];
    };
    let ate = summary.aggregate.map(|a| a.ate_rmse).unwrap_or(f64::INFINITY);
    vec![
        check("arc.ate", ate < 1e-3, format!("ate {ate:.3e}")),
        check("arc.runtime", secs < 30.0, format!("runtime {secs:.2}s")),
    ]
}

fn planted_drift() -> Vec<Check> {
    match run_drift_scenario(&DriftScenario::default(), 1) {
        Ok(out) => {
            let reduction = 1.0 - out.correction.residual_after / out.correction.residual_before;
            vec![
                check(
                    "drift.ate",
                    out.ate_after < out.ate_before,
                    format!("ate {:.4} -> {:.4}", out.ate_before, out.ate_after),
                ),
                check("drift.residual", reduction >= 0.9, format!("loop residual reduced {:.1}%", 100.0 * reduction)),
            ]
        }
        Err(e) => vec![check("drift.run", false, e)],
    }
}

fn bundle_adjustment() -> Vec<Check> {
    let k = camera();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut configs = 0;
    for _ in 0..1000 {
        let pose = random_pose(&mut rng);
        let x = point_in_front(&mut rng, &pose, 0.5, 20.0);
        let Some((_, jp, jx)) = reprojection_jacobians(&pose, &x, &k) else { continue };
        let (np, nx) = numeric_jacobians(&pose, &x, &k, 1e-6);
        worst = worst.max((jp - np).norm() / np.norm()).max((jx - nx).norm() / nx.norm());
        configs += 1;
    }
    let mut non_monotone = Vec::new();
    for seed in 0..20 {
        let (mut problem, _, _) = random_ba_problem(seed, 1.0, 0.05);
        let report = problem.optimize(&k, &LmConfig { max_iterations: 20, ..Default::default() });
        if !report.is_monotone() {
            non_monotone.push(seed);
        }
    }
    vec![
        check("ba.jacobians", configs >= 1000 && worst < 1e-4, format!("{configs} configurations, worst relative error {worst:.2e}")),
        check("ba.monotone", non_monotone.is_empty(), format!("20 problems, non-monotone seeds {non_monotone:?}")),
    ]
}

fn geometry_oracles() -> Vec<Check> {
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
        let cfg = TriangulationConfig { min_parallax_deg: 0.5 };
        if let Ok(l) = triangulate(&k.project_unchecked(&c1), &k.project_unchecked(&c2), &p1, &p2, &k, &cfg) {
            worst = worst.max((l.position - x).norm() / x.norm().max(1.0));
            solved += 1;
        }
    }
    let tri = check("geometry.triangulation", solved > 300 && worst < 1e-9, format!("{solved} points, worst {worst:.1e}"));

    let rel = Pose::from_axis_angle(Vector3::new(0.02, -0.1, 0.03), Vector3::new(-0.9, 0.1, 0.2).normalize());
    let mut worst_tv: f64 = 0.0;
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut matches = Vec::new();
        while matches.len() < 300 {
            let x = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-2.0..2.0), rng.random_range(4.0..10.0));
            let (a, b) = (k.project_unchecked(&x), k.project_unchecked(&rel.transform(&x)));
            if !(k.in_image(&a) && k.in_image(&b)) {
                continue;
            }
            if rng.random_bool(0.3) {
                matches.push((a, Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0))));
            } else {
                matches.push((a, b));
            }
        }
        match estimate_two_view(&matches, &k, &RansacConfig { seed, ..Default::default() }) {
            Ok(est) => {
                let dr = (est.relative.rotation() - rel.rotation()).abs().max();
                let dt = (est.relative.translation() - rel.translation()).abs().max();
                worst_tv = worst_tv.max(dr).max(dt);
            }
            Err(_) => worst_tv = f64::INFINITY,
        }
    }
    let two_view = check("geometry.two_view", worst_tv < 1e-6, format!("30% outliers, worst {worst_tv:.1e}"));

    let mut worst_um: f64 = 0.0;
    for _ in 0..50 {
        let s = rng.random_range(0.1..10.0);
        let r = rodrigues(&random_vec(&mut rng, 1.8));
        let t = random_vec(&mut rng, 20.0);
        let src: Vec<_> = (0..40).map(|_| random_vec(&mut rng, 5.0)).collect();
        let dst: Vec<_> = src.iter().map(|p| s * (r * p) + t).collect();
        match umeyama(&src, &dst, true) {
            Ok(a) => {
                let e = ((a.scale() - s) / s).abs().max((a.rotation() - r).abs().max()).max((a.translation() - t).abs().max() / t.norm().max(1.0));
                worst_um = worst_um.max(e);
            }
            Err(_) => worst_um = f64::INFINITY,
        }
    }
    let um = check("geometry.umeyama", worst_um < 1e-9, format!("umeyama worst {worst_um:.1e}"));
    vec![tri, two_view, um]
}

fn random_walk(rng: &mut ChaCha8Rng, n: usize) -> Trajectory {
    let mut r = Matrix3::identity();
    let mut c = Vector3::zeros();
    let mut poses = Vec::with_capacity(n);
    for _ in 0..n {
        poses.push(Pose::from_camera_to_world(r, c));
        r *= rodrigues(&random_vec(rng, 0.05));
        c += r * Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(0.2..0.6));
    }
    Trajectory::from_poses(poses)
}

fn perturb(rng: &mut ChaCha8Rng, t: &Trajectory, sigma: f64) -> Trajectory {
    Trajectory::from_poses(t.entries().iter().map(|e| {
        let twc = e.pose.inverse();
        Pose::from_camera_to_world(twc.rotation() * rodrigues(&random_vec(rng, sigma)), twc.translation() + random_vec(rng, sigma))
    }))
}

fn metric_oracles() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst_rpe: f64 = 0.0;
    for _ in 0..25 {
        let reference = random_walk(&mut rng, 50);
        let est = perturb(&mut rng, &reference, 0.02);
        let lengths = [0.5, 1.0, 2.5, 5.0];
        match (compute_rpe(&est, &reference, &lengths, 1e-6), rpe_exhaustive(&est, &reference, &lengths)) {
            (Ok(lib), Some((t, r, n))) if lib.samples == n => {
                worst_rpe = worst_rpe.max((lib.trans_percent - t).abs()).max((lib.rot_deg_per_unit - r).abs());
            }
            _ => worst_rpe = f64::INFINITY,
        }
    }

    let mut worst_ate: f64 = 0.0;
    for _ in 0..20 {
        let reference = random_walk(&mut rng, 60);
        let est = perturb(&mut rng, &reference, 0.05);
        let g = SimTransform::new(rng.random_range(0.2..5.0), random_rotation(&mut rng, 3.0), random_vec(&mut rng, 10.0)).unwrap();
        let base = compute_ate(&est, &reference, true, 1e-6).map(|r| r.rmse);
        let moved = compute_ate(&align_trajectory(&est, &g), &reference, true, 1e-6).map(|r| r.rmse);
        match (base, moved) {
            (Ok(a), Ok(b)) => worst_ate = worst_ate.max((a - b).abs() / a.max(1.0)),
            _ => worst_ate = f64::INFINITY,
        }
    }

    let line = |scale: f64| {
        Trajectory::from_poses((0..200).map(|i| Pose::from_camera_to_world(Matrix3::identity(), Vector3::new(0.5 * i as f64 * scale, 0.0, 0.0))))
    };
    let line_rpe = compute_rpe(&line(1.01), &line(1.0), &[10.0, 20.0, 40.0], 1e-6).map(|r| r.trans_percent).unwrap_or(f64::NAN);

    vec![
        check("metrics.rpe_oracle", worst_rpe < 1e-9, format!("rpe vs exhaustive worst {worst_rpe:.1e}")),
        check("metrics.ate_similarity", worst_ate < 1e-9, format!("ate similarity drift {worst_ate:.1e}")),
        check("metrics.line_scale", (line_rpe - 1.0).abs() < 1e-6, format!("1% scale line rpe {line_rpe:.9}%")),
    ]
}

fn ramp() -> GrayImage {
    GrayImage::new(256, 1, (0..=255u8).collect()).unwrap()
}

fn gamma_checks() -> Vec<Check> {
    let apply = |img: &GrayImage, g: f64| gamma_transform(img, GammaParam::new(g).unwrap());
    let identity = apply(&ramp(), 1.0) == ramp();
    let mut endpoints = true;
    let mut monotone = true;
    let mut closed_form = true;
    let mut brighten_err = 0u8;
    let mut darken_err = 0u8;
    for g in GAMMA_GRID {
        let out = apply(&ramp(), g);
        endpoints &= out.data()[0] == 0 && out.data()[255] == 255;
        monotone &= out.data().windows(2).all(|w| w[0] <= w[1]);
        closed_form &= (0..=255u8).all(|p| out.data()[p as usize] == gamma_value(p, g));
        let back = apply(&out, 1.0 / g);
        let err = ramp().data().iter().zip(back.data()).map(|(a, b)| a.abs_diff(*b)).max().unwrap();
        if g < 1.0 {
            brighten_err = brighten_err.max(err);
        } else {
            darken_err = darken_err.max(err);
        }
    }
    vec![
        check("gamma.identity", identity, "unit gamma identity"),
        check("gamma.endpoints", endpoints, "endpoints fixed"),
        check("gamma.monotone", monotone, "monotone on grid"),
        check("gamma.closed_form", closed_form, "matches closed form"),
        check("gamma.round_trip_brightening", brighten_err <= 3, format!("round trip gamma<1 max error {brighten_err}")),
        check("gamma.round_trip_darkening", darken_err <= 3, format!("round trip gamma>1 max error {darken_err}")),
    ]
}

fn bag_of_words() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let corpus: Vec<Vec<Descriptor>> = (0..20).map(|_| (0..50).map(|_| random_bits(&mut rng, 256)).collect()).collect();
    let self_score = train_vocabulary(&corpus, 4, 3, 0).ok().map(|v| {
        corpus
            .iter()
            .map(|d| v.to_bow(d).map(|b| (score(&b, &b) - 1.0).abs()).unwrap_or(f64::INFINITY))
            .fold(0.0f64, f64::max)
    });
    let self_score = self_score.unwrap_or(f64::INFINITY);

    let (docs, _) = clustered_corpus(3);
    let (toy_ok, toy_detail) = match train_vocabulary(&docs, 2, 2, 9) {
        Ok(v) => {
            let training: Vec<&Descriptor> = docs.iter().flatten().collect();
            let trained = training.iter().filter(|d| v.descend(d).0 == leaf_by_enumeration(&v, d)).count();
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let random = (0..500)
                .filter(|_| {
                    let d = random_bits(&mut rng, 64);
                    v.descend(&d).0 == leaf_by_enumeration(&v, &d)
                })
                .count();
            (
                v.word_count() == 4 && trained == training.len() && random == 500,
                format!(
                    "toy tree {} leaves, training {trained}/{}, random {random}/500 agree",
                    v.word_count(),
                    training.len()
                ),
            )
        }
        Err(e) => (false, e.to_string()),
    };

    let round_trip = train_vocabulary(&corpus, 3, 3, 5).is_ok_and(|v| {
        let dir = tempdir();
        let path = dir.path().join("voc.fslv");
        let bytes = v.to_bytes();
        v.write(&path).is_ok()
            && std::fs::read(&path).is_ok_and(|b| b == bytes)
            && Vocabulary::read(&path).is_ok_and(|back| back == v && back.to_bytes() == bytes)
    });

    vec![
        check("bow.self_score", self_score < 1e-12, format!("self score error {self_score:.1e}")),
        check("bow.toy_tree", toy_ok, toy_detail),
        check("bow.round_trip", round_trip, "file round trip bit-exact"),
    ]
}

fn aggregation() -> Vec<Check> {
    let dir = tempdir();
    let cfg = RunConfig {
        runs: 5,
        scene: SceneConfig { frames: 40, ..Default::default() },
        out: dir.path().join("runs"),
        ..Default::default()
    };
    let five = match run_experiment(&cfg) {
        Ok(s) => {
            let report = std::fs::read_to_string(&s.report_file).unwrap_or_default();
            let per_run = (0..5).all(|i| report.contains(&format!("run{i}.ate_rmse")));
            let files = s.trajectory_files.iter().filter(|f| f.is_file()).count();
            let mean = s.aggregate.as_ref().map(|a| a.ate_rmse);
            check(
                "aggregate.five_runs",
                per_run && files == 5 && mean.is_some(),
                format!("{files} trajectories, mean ate {:.2e}", mean.unwrap_or(f64::NAN)),
            )
        }
        Err(e) => check("aggregate.five_runs", false, e.to_string()),
    };

    let mut grid = Vec::new();
    let mut grid_ok = true;
    for g in GAMMA_GRID {
        let cfg = RunConfig {
            gamma: Some(g),
            scene: SceneConfig {
                frames: 30,
                render: true,
                ..Default::default()
            },
            slam: SlamConfig {
                features_per_frame: 1000,
                ..Default::default()
            },
            plot: false,
            out: dir.path().join(format!("gamma-{g}")),
            ..Default::default()
        };
        match run_experiment(&cfg) {
            Ok(s) if s.aggregate.is_some() => {
                let a = s.aggregate.unwrap();
                grid.push(format!("g{g} ate {:.4} coverage {:.2}", a.ate_rmse, a.coverage));
            }
            Ok(_) => {
                grid_ok = false;
                grid.push(format!("g{g} no metrics"));
            }
            Err(e) => {
                // a run that never initializes still completes end to end
                grid_ok &= matches!(e, featslam::experiment::ExperimentError::NeverInitialized(_));
                grid.push(format!("g{g} coverage 0.00 ({e})"));
            }
        }
    }
    vec![five, check("aggregate.gamma_grid", grid_ok, grid.join(", "))]
}

fn trajectory_bytes(out: &Path) -> Option<Vec<u8>> {
    let cfg = RunConfig {
        scene: SceneConfig {
            path: PathKind::Loop,
            landmarks: 1500,
            noise_sigma: 0.5,
            outlier_rate: 0.05,
            ..Default::default()
        },
        seed: 3,
        out: out.to_path_buf(),
        ..Default::default()
    };
    let summary = run_experiment(&cfg).ok()?;
    std::fs::read(summary.trajectory_files.first()?).ok()
}

fn determinism() -> Vec<Check> {
    let (a, b) = (tempdir(), tempdir());
    let (x, y) = (trajectory_bytes(a.path()), trajectory_bytes(b.path()));
    let same = x.is_some() && x == y;
    vec![check("determinism.bytes", same, format!("{} bytes, identical {same}", x.map_or(0, |v| v.len())))]
}
