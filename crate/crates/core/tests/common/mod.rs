//! Independent reference implementations shared by the integration and acceptance tests.
//! They avoid the library's own pose algebra where practical so that a bug there cannot
//! hide in both sides of a comparison.
#![allow(dead_code)]

use featslam::evaluation::Trajectory;
use featslam::features::{BitDescriptor, Descriptor};
use featslam::geometry::{CameraIntrinsics, Pose};
use featslam::optim::{BaObservation, BaProblem};
use featslam::place_recognition::{Vocabulary, WordId};
use nalgebra::{Matrix2x3, Matrix2x6, Matrix3, Matrix4, Vector2, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_chacha::ChaCha8Rng;

pub fn camera() -> CameraIntrinsics {
    CameraIntrinsics::new(450.0, 460.0, 320.0, 240.0, 640, 480).unwrap()
}

/// Rotation from an axis-angle vector by Rodrigues' formula, written out longhand.
pub fn rodrigues(w: &Vector3<f64>) -> Matrix3<f64> {
    let th = w.norm();
    if th < 1e-300 {
        return Matrix3::identity();
    }
    let a = w / th;
    let k = Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0);
    Matrix3::identity() + th.sin() * k + (1.0 - th.cos()) * k * k
}

pub fn random_rotation(rng: &mut ChaCha8Rng, max_angle: f64) -> Matrix3<f64> {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let axis = if axis.norm() < 1e-6 { Vector3::x() } else { axis.normalize() };
    rodrigues(&(axis * rng.random_range(0.0..max_angle)))
}

pub fn random_vec(rng: &mut ChaCha8Rng, r: f64) -> Vector3<f64> {
    Vector3::new(rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(-r..r))
}

pub fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    Pose::from_parts(random_rotation(rng, std::f64::consts::PI), random_vec(rng, 5.0))
}

/// A world point between `near` and `far` in front of `pose`.
pub fn point_in_front(rng: &mut ChaCha8Rng, pose: &Pose, near: f64, far: f64) -> Vector3<f64> {
    let pc = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0) * rng.random_range(near..far);
    pose.rotation().transpose() * (pc - pose.translation())
}

/// Pinhole projection from raw matrices.
pub fn project(r: &Matrix3<f64>, t: &Vector3<f64>, x: &Vector3<f64>, k: &CameraIntrinsics) -> Vector2<f64> {
    let pc = r * x + t;
    Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy)
}

/// Central finite differences of the projection with respect to the right-multiplied
/// rotation increment `R Exp(w)`, the additive translation increment and the world point.
pub fn numeric_jacobians(pose: &Pose, x: &Vector3<f64>, k: &CameraIntrinsics, h: f64) -> (Matrix2x6<f64>, Matrix2x3<f64>) {
    let r = *pose.rotation();
    let t = *pose.translation();
    let mut jp = Matrix2x6::zeros();
    for i in 0..6 {
        let mut d = Vector6::zeros();
        d[i] = h;
        let f = |s: f64| {
            let w = Vector3::new(d[0], d[1], d[2]) * s;
            let v = Vector3::new(d[3], d[4], d[5]) * s;
            project(&(r * rodrigues(&w)), &(t + v), x, k)
        };
        jp.set_column(i, &((f(1.0) - f(-1.0)) / (2.0 * h)));
    }
    let mut jx = Matrix2x3::zeros();
    for i in 0..3 {
        let mut e = Vector3::zeros();
        e[i] = h;
        jx.set_column(i, &((project(&r, &t, &(x + e), k) - project(&r, &t, &(x - e), k)) / (2.0 * h)));
    }
    (jp, jx)
}

/// Camera-to-world 4x4 matrices of a trajectory, built from the stored rotation and
/// translation without the library's inverse.
pub fn camera_to_world(t: &Trajectory) -> Vec<Matrix4<f64>> {
    t.entries()
        .iter()
        .map(|e| {
            let m = e.pose.to_matrix();
            m.try_inverse().expect("rigid transforms are invertible")
        })
        .collect()
}

fn rot_angle(m: &Matrix4<f64>) -> f64 {
    let tr = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
    ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// Relative pose error by exhaustive pair enumeration. Both trajectories must have the
/// same timestamps. For each start `i` and length `l` the end is the first `j` (scanning
/// every later frame) whose travelled reference distance from `i` is at least `l`.
pub fn rpe_exhaustive(est: &Trajectory, reference: &Trajectory, lengths: &[f64]) -> Option<(f64, f64, usize)> {
    let e = camera_to_world(est);
    let r = camera_to_world(reference);
    let n = r.len();
    let step: Vec<f64> = (1..n)
        .map(|k| (r[k].fixed_view::<3, 1>(0, 3) - r[k - 1].fixed_view::<3, 1>(0, 3)).norm())
        .collect();
    let (mut ts, mut rs, mut count) = (0.0, 0.0, 0usize);
    for i in 0..n {
        for &len in lengths.iter().filter(|l| **l > 0.0) {
            let mut travelled = 0.0;
            let mut end = None;
            for j in (i + 1)..n {
                travelled += step[j - 1];
                if travelled >= len {
                    end = Some(j);
                    break;
                }
            }
            let Some(j) = end else { continue };
            let dr = r[i].try_inverse()? * r[j];
            let de = e[i].try_inverse()? * e[j];
            let err = dr.try_inverse()? * de;
            ts += err.fixed_view::<3, 1>(0, 3).norm() / len;
            rs += rot_angle(&err).to_degrees() / len;
            count += 1;
        }
    }
    (count > 0).then(|| (100.0 * ts / count as f64, rs / count as f64, count))
}

/// Leaf for `d` found by enumerating every root-to-leaf path and keeping the one whose
/// every step picks the nearest child (first on ties).
pub fn leaf_by_enumeration(v: &Vocabulary, d: &Descriptor) -> WordId {
    let nodes = v.nodes();
    let mut found = Vec::new();
    let mut stack: Vec<Vec<u32>> = vec![vec![0]];
    while let Some(path) = stack.pop() {
        let last = *path.last().unwrap() as usize;
        if nodes[last].children.is_empty() {
            let ok = path.windows(2).all(|w| {
                let siblings = &nodes[w[0] as usize].children;
                let chosen = nodes[w[1] as usize].centroid.distance(d);
                let pos = siblings.iter().position(|&c| c == w[1]).unwrap();
                siblings.iter().enumerate().all(|(i, &c)| {
                    let other = nodes[c as usize].centroid.distance(d);
                    other > chosen || (other == chosen && i >= pos)
                })
            });
            if ok {
                found.push(nodes[last].word.unwrap());
            }
            continue;
        }
        for &c in &nodes[last].children {
            let mut p = path.clone();
            p.push(c);
            stack.push(p);
        }
    }
    assert_eq!(found.len(), 1, "exactly one greedy path");
    found[0]
}

/// Gamma curve on one 8-bit value.
pub fn gamma_value(p: u8, g: f64) -> u8 {
    (255.0 * (p as f64 / 255.0).powf(g)).round() as u8
}

/// Cameras on a gentle arc looking at a point cloud, with `noise_px` pixel noise on every
/// observation and the free variables displaced from the truth. The first two cameras are
/// fixed to remove the similarity gauge. Returns the problem with the true poses and points.
pub fn random_ba_problem(seed: u64, noise_px: f64, displacement: f64) -> (BaProblem, Vec<Pose>, Vec<Vector3<f64>>) {
    let k = camera();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_px.max(1e-300)).unwrap();
    let poses: Vec<Pose> = (0..6)
        .map(|i| Pose::from_axis_angle(Vector3::new(0.0, 0.04 * i as f64, 0.0), Vector3::new(-0.3 * i as f64, 0.0, 0.0)))
        .collect();
    let points: Vec<Vector3<f64>> = (0..80)
        .map(|_| Vector3::new(rng.random_range(-3.0..4.0), rng.random_range(-2.0..2.0), rng.random_range(4.0..9.0)))
        .collect();
    let mut problem = BaProblem::default();
    for (i, p) in poses.iter().enumerate() {
        let start = if i < 2 {
            *p
        } else {
            Pose::from_parts(p.rotation() * rodrigues(&random_vec(&mut rng, displacement * 0.1)), p.translation() + random_vec(&mut rng, displacement))
        };
        problem.add_pose(start, i < 2);
    }
    for x in &points {
        problem.add_point(x + random_vec(&mut rng, displacement), false);
    }
    for (ci, p) in poses.iter().enumerate() {
        for (pi, x) in points.iter().enumerate() {
            let pc = p.transform(x);
            let px = k.project_unchecked(&pc);
            if pc.z > 0.1 && k.in_image(&px) {
                let n = if noise_px > 0.0 { Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng)) } else { Vector2::zeros() };
                problem.add_observation(BaObservation { pose: ci, point: pi, pixel: px + n, inv_sigma2: 1.0 });
            }
        }
    }
    (problem, poses, points)
}

/// Vocabulary trained on every fifth frame of a feature source.
pub fn sequence_vocabulary(source: &featslam::dataset::SequenceSource, seed: u64) -> Vocabulary {
    let corpus: Vec<Vec<Descriptor>> = source
        .iter()
        .step_by(5)
        .filter_map(|f| match &f.payload {
            featslam::dataset::FramePayload::Features { descriptors, .. } => Some(descriptors.clone()),
            _ => None,
        })
        .collect();
    featslam::place_recognition::train_vocabulary(&corpus, 10, 3, seed).unwrap()
}

/// Feeds every frame of a feature source through a fresh system.
pub fn run_features(
    config: featslam::pipeline::SlamConfig,
    source: &featslam::dataset::SequenceSource,
    vocab: Option<Vocabulary>,
    seed: u64,
) -> featslam::pipeline::System {
    let mut system = featslam::pipeline::System::new(config, source.intrinsics, vocab, seed);
    for f in source.iter() {
        let featslam::dataset::FramePayload::Features { keypoints, descriptors } = &f.payload else {
            panic!("feature payload expected");
        };
        system.process_features(f.index, f.timestamp, keypoints.clone(), descriptors.clone()).unwrap();
    }
    system.finish();
    system
}

pub fn random_bits(rng: &mut ChaCha8Rng, bits: usize) -> Descriptor {
    let mut b = BitDescriptor::zeros(bits);
    for i in 0..bits {
        b.set(i, rng.random_bool(0.5));
    }
    Descriptor::Binary(b)
}

/// Four 64-bit prototypes in two groups: the groups differ in 32 bits, the members of a
/// group in 12. Samples flip two random bits of their prototype.
pub fn clustered_corpus(seed: u64) -> (Vec<Vec<Descriptor>>, Vec<Descriptor>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let protos: Vec<Descriptor> = (0..4)
        .map(|c| {
            let mut b = BitDescriptor::zeros(64);
            for i in 0..64 {
                b.set(i, (c >= 2 && i >= 32) || (c % 2 == 1 && i < 12));
            }
            Descriptor::Binary(b)
        })
        .collect();
    let jitter = |rng: &mut ChaCha8Rng, d: &Descriptor| {
        let Descriptor::Binary(b) = d else { unreachable!() };
        let mut b = b.clone();
        for _ in 0..2 {
            let i = rng.random_range(0..64);
            b.set(i, !b.get(i));
        }
        Descriptor::Binary(b)
    };
    let docs = (0..10).map(|_| protos.iter().map(|p| jitter(&mut rng, p)).collect()).collect();
    (docs, protos)
}
