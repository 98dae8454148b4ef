use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix2x6, Matrix3, Matrix6x3, Vector2, Vector3, Vector6};

use crate::geometry::{skew, CameraIntrinsics, Pose};

/// Smallest camera-frame depth at which an observation is still linearized.
const MIN_DEPTH: f64 = 1e-9;

/// Huber loss of a whitened squared error `s`.
#[inline]
pub fn huber_cost(s: f64, delta: Option<f64>) -> f64 {
    match delta {
        Some(d) if s > d * d => 2.0 * d * s.sqrt() - d * d,
        _ => s,
    }
}

/// Derivative of [`huber_cost`] with respect to `s`, the IRLS weight.
#[inline]
pub fn huber_weight(s: f64, delta: Option<f64>) -> f64 {
    match delta {
        Some(d) if s > d * d => d / s.sqrt(),
        _ => 1.0,
    }
}

/// Predicted pixel and its Jacobians with respect to the pose increment `(omega, v)` of
/// [`Pose::retract`] and the world point. `None` when the point is not in front.
pub fn reprojection_jacobians(
    pose: &Pose,
    point: &Vector3<f64>,
    k: &CameraIntrinsics,
) -> Option<(Vector2<f64>, Matrix2x6<f64>, Matrix2x3<f64>)> {
    let pc = pose.transform(point);
    if pc.z <= MIN_DEPTH {
        return None;
    }
    let iz = 1.0 / pc.z;
    let iz2 = iz * iz;
    let proj = Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * pc.x * iz2,
        0.0,
        k.fy * iz,
        -k.fy * pc.y * iz2,
    );
    let r = pose.rotation();
    let mut d_pose = Matrix2x6::zeros();
    d_pose.fixed_view_mut::<2, 3>(0, 0).copy_from(&(proj * (-r * skew(point))));
    d_pose.fixed_view_mut::<2, 3>(0, 3).copy_from(&proj);
    let d_point = proj * r;
    let px = Vector2::new(k.fx * pc.x * iz + k.cx, k.fy * pc.y * iz + k.cy);
    Some((px, d_pose, d_point))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaObservation {
    pub pose: usize,
    pub point: usize,
    pub pixel: Vector2<f64>,
    /// Inverse variance of the measurement (1 / sigma^2 of its pyramid level).
    pub inv_sigma2: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LmConfig {
    pub max_iterations: usize,
    /// Huber threshold on the whitened residual norm; `None` for plain least squares.
    pub huber_delta: Option<f64>,
    pub initial_lambda: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 10,
            huber_delta: Some(super::CHI2_2DOF.sqrt()),
            initial_lambda: 1e-4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LmReport {
    /// Robust cost at the start and after every accepted step.
    pub costs: Vec<f64>,
    pub iterations: usize,
}

impl LmReport {
    pub fn initial_cost(&self) -> f64 {
        self.costs.first().copied().unwrap_or(0.0)
    }

    pub fn final_cost(&self) -> f64 {
        self.costs.last().copied().unwrap_or(0.0)
    }

    pub fn is_monotone(&self) -> bool {
        self.costs.windows(2).all(|w| w[1] <= w[0])
    }
}

/// Reprojection bundle adjustment problem. Fixed poses and points are held constant;
/// inactive observations are ignored.
#[derive(Clone, Debug, Default)]
pub struct BaProblem {
    pub poses: Vec<Pose>,
    pub fixed_poses: Vec<bool>,
    pub points: Vec<Vector3<f64>>,
    pub fixed_points: Vec<bool>,
    pub observations: Vec<BaObservation>,
    pub active: Vec<bool>,
}

impl BaProblem {
    pub fn add_pose(&mut self, pose: Pose, fixed: bool) -> usize {
        self.poses.push(pose);
        self.fixed_poses.push(fixed);
        self.poses.len() - 1
    }

    pub fn add_point(&mut self, p: Vector3<f64>, fixed: bool) -> usize {
        self.points.push(p);
        self.fixed_points.push(fixed);
        self.points.len() - 1
    }

    pub fn add_observation(&mut self, obs: BaObservation) -> usize {
        self.observations.push(obs);
        self.active.push(true);
        self.observations.len() - 1
    }

    /// Whitened squared reprojection error, `None` when the point is behind the camera.
    pub fn whitened_error(&self, i: usize, k: &CameraIntrinsics) -> Option<f64> {
        let o = &self.observations[i];
        let pc = self.poses[o.pose].transform(&self.points[o.point]);
        if pc.z <= MIN_DEPTH {
            return None;
        }
        Some((k.project_unchecked(&pc) - o.pixel).norm_squared() * o.inv_sigma2)
    }

    /// Robust objective over active observations; infinite if any of them is behind a camera.
    pub fn cost(&self, k: &CameraIntrinsics, delta: Option<f64>) -> f64 {
        let mut total = 0.0;
        for i in 0..self.observations.len() {
            if !self.active[i] {
                continue;
            }
            match self.whitened_error(i, k) {
                Some(s) => total += huber_cost(s, delta),
                None => return f64::INFINITY,
            }
        }
        total
    }

    /// Root mean square pixel error over active observations.
    pub fn rmse(&self, k: &CameraIntrinsics) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (i, o) in self.observations.iter().enumerate() {
            if !self.active[i] {
                continue;
            }
            let pc = self.poses[o.pose].transform(&self.points[o.point]);
            sum += (k.project_unchecked(&pc) - o.pixel).norm_squared();
            n += 1;
        }
        if n == 0 {
            0.0
        } else {
            (sum / n as f64).sqrt()
        }
    }

    /// Deactivates observations behind their camera and those whose whitened error exceeds
    /// `chi2`. Returns the number of active observations left.
    pub fn classify_outliers(&mut self, k: &CameraIntrinsics, chi2: f64) -> usize {
        for i in 0..self.observations.len() {
            let keep = self.whitened_error(i, k).is_some_and(|s| s <= chi2);
            self.active[i] = keep;
        }
        self.active.iter().filter(|&&a| a).count()
    }

    /// Levenberg-Marquardt over the free poses and points, with the point blocks
    /// eliminated through the Schur complement.
    pub fn optimize(&mut self, k: &CameraIntrinsics, cfg: &LmConfig) -> LmReport {
        for i in 0..self.observations.len() {
            if self.active[i] && self.whitened_error(i, k).is_none() {
                self.active[i] = false;
            }
        }
        let pose_index = free_index(&self.fixed_poses);
        let point_index = free_index(&self.fixed_points);
        let n_pose = pose_index.iter().flatten().count();
        let n_point = point_index.iter().flatten().count();

        let mut report = LmReport::default();
        let mut cost = self.cost(k, cfg.huber_delta);
        report.costs.push(cost);
        if n_pose + n_point == 0 || cost == 0.0 {
            return report;
        }
        let mut lambda = cfg.initial_lambda;
        let mut iteration = 0;
        while iteration < cfg.max_iterations {
            iteration += 1;
            let system = self.linearize(k, cfg.huber_delta, &pose_index, &point_index, n_pose, n_point);
            let mut accepted = false;
            while lambda < 1e12 {
                let Some((dp, dl)) = system.solve(lambda) else {
                    lambda *= 10.0;
                    continue;
                };
                let saved_poses = self.poses.clone();
                let saved_points = self.points.clone();
                self.apply_step(&pose_index, &point_index, &dp, &dl);
                let new_cost = self.cost(k, cfg.huber_delta);
                if new_cost < cost {
                    let rel = (cost - new_cost) / cost.max(1e-300);
                    cost = new_cost;
                    report.costs.push(cost);
                    lambda = (lambda / 3.0).max(1e-12);
                    accepted = true;
                    if rel < 1e-14 {
                        iteration = cfg.max_iterations;
                    }
                    break;
                }
                self.poses = saved_poses;
                self.points = saved_points;
                lambda *= 4.0;
            }
            if !accepted || cost == 0.0 {
                break;
            }
        }
        report.iterations = iteration;
        report
    }

    fn apply_step(
        &mut self,
        pose_index: &[Option<usize>],
        point_index: &[Option<usize>],
        dp: &DVector<f64>,
        dl: &[Vector3<f64>],
    ) {
        for (i, idx) in pose_index.iter().enumerate() {
            if let Some(c) = idx {
                let d = Vector6::from_iterator(dp.rows(6 * c, 6).iter().copied());
                self.poses[i] = self.poses[i].retract(&d);
            }
        }
        for (j, idx) in point_index.iter().enumerate() {
            if let Some(c) = idx {
                self.points[j] += dl[*c];
            }
        }
    }

    fn linearize(
        &self,
        k: &CameraIntrinsics,
        delta: Option<f64>,
        pose_index: &[Option<usize>],
        point_index: &[Option<usize>],
        n_pose: usize,
        n_point: usize,
    ) -> NormalEquations {
        let mut eq = NormalEquations {
            hpp: DMatrix::zeros(6 * n_pose, 6 * n_pose),
            bp: DVector::zeros(6 * n_pose),
            hll: vec![Matrix3::zeros(); n_point],
            bl: vec![Vector3::zeros(); n_point],
            hpl: vec![Vec::new(); n_point],
        };
        for (i, o) in self.observations.iter().enumerate() {
            if !self.active[i] {
                continue;
            }
            let Some((px, jp, jl)) = reprojection_jacobians(&self.poses[o.pose], &self.points[o.point], k) else {
                continue;
            };
            let r = px - o.pixel;
            let s = r.norm_squared() * o.inv_sigma2;
            let w = huber_weight(s, delta) * o.inv_sigma2;
            let pi = pose_index[o.pose];
            let li = point_index[o.point];
            if let Some(c) = pi {
                let h = jp.transpose() * jp * w;
                let mut block = eq.hpp.view_mut((6 * c, 6 * c), (6, 6));
                block += h;
                let g = jp.transpose() * r * w;
                let mut gb = eq.bp.rows_mut(6 * c, 6);
                gb += g;
            }
            if let Some(l) = li {
                eq.hll[l] += jl.transpose() * jl * w;
                eq.bl[l] += jl.transpose() * r * w;
                if let Some(c) = pi {
                    let cross: Matrix6x3<f64> = jp.transpose() * jl * w;
                    match eq.hpl[l].iter_mut().find(|(p, _)| *p == c) {
                        Some((_, b)) => *b += cross,
                        None => eq.hpl[l].push((c, cross)),
                    }
                }
            }
        }
        eq
    }
}

fn free_index(fixed: &[bool]) -> Vec<Option<usize>> {
    let mut next = 0;
    fixed
        .iter()
        .map(|&f| {
            if f {
                None
            } else {
                next += 1;
                Some(next - 1)
            }
        })
        .collect()
}

struct NormalEquations {
    hpp: DMatrix<f64>,
    bp: DVector<f64>,
    hll: Vec<Matrix3<f64>>,
    bl: Vec<Vector3<f64>>,
    /// Pose-point coupling blocks, grouped by point.
    hpl: Vec<Vec<(usize, Matrix6x3<f64>)>>,
}

impl NormalEquations {
    /// Solves the damped system `(H + lambda diag(H)) dx = -b` through the Schur complement.
    fn solve(&self, lambda: f64) -> Option<(DVector<f64>, Vec<Vector3<f64>>)> {
        let np = self.bp.len();
        let damp = |d: f64| d + lambda * d.max(1e-9);
        let mut v_inv = Vec::with_capacity(self.hll.len());
        for h in &self.hll {
            let mut v = *h;
            for d in 0..3 {
                v[(d, d)] = damp(v[(d, d)]);
            }
            v_inv.push(v.try_inverse()?);
        }
        let mut s = self.hpp.clone();
        for d in 0..np {
            s[(d, d)] = damp(s[(d, d)]);
        }
        let mut rhs = -self.bp.clone();
        for (l, blocks) in self.hpl.iter().enumerate() {
            for (a, wa) in blocks {
                let wv = wa * v_inv[l];
                for (b, wb) in blocks {
                    let mut blk = s.view_mut((6 * a, 6 * b), (6, 6));
                    blk -= wv * wb.transpose();
                }
                let mut r = rhs.rows_mut(6 * a, 6);
                r += wv * self.bl[l];
            }
        }
        let dp = if np > 0 { s.cholesky()?.solve(&rhs) } else { rhs };
        if !dp.iter().all(|v| v.is_finite()) {
            return None;
        }
        let dl = self
            .hpl
            .iter()
            .enumerate()
            .map(|(l, blocks)| {
                let mut g = -self.bl[l];
                for (a, wa) in blocks {
                    g -= wa.transpose() * dp.rows(6 * a, 6);
                }
                v_inv[l] * g
            })
            .collect();
        Some((dp, dl))
    }
}

/// Motion-only refinement of `pose` against fixed 3D-2D correspondences
/// `(world point, pixel, inv_sigma2)`. Runs `rounds` passes of LM, re-classifying outliers
/// at `chi2` after each; returns the refined pose and the final inlier mask.
pub fn optimize_pose(
    pose: Pose,
    correspondences: &[(Vector3<f64>, Vector2<f64>, f64)],
    k: &CameraIntrinsics,
    rounds: usize,
    iterations: usize,
    chi2: f64,
) -> (Pose, Vec<bool>) {
    let mut problem = BaProblem::default();
    let slot = problem.add_pose(pose, false);
    for (x, px, w) in correspondences {
        let p = problem.add_point(*x, true);
        problem.add_observation(BaObservation {
            pose: slot,
            point: p,
            pixel: *px,
            inv_sigma2: *w,
        });
    }
    if correspondences.is_empty() {
        return (pose, Vec::new());
    }
    let cfg = LmConfig {
        max_iterations: iterations,
        ..Default::default()
    };
    for round in 0..rounds.max(1) {
        let active = problem.active.iter().filter(|&&a| a).count();
        if active < 3 {
            break;
        }
        // the last round runs without the robust kernel
        let cfg = if round + 1 == rounds && rounds > 1 {
            LmConfig { huber_delta: None, ..cfg }
        } else {
            cfg
        };
        problem.optimize(k, &cfg);
        problem.classify_outliers(k, chi2);
    }
    (problem.poses[slot], problem.active.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn camera() -> CameraIntrinsics {
        CameraIntrinsics::new(400.0, 400.0, 320.0, 240.0, 640, 480).unwrap()
    }

    #[test]
    fn huber_is_continuous() {
        let d = Some(2.0);
        assert_eq!(huber_cost(4.0, d), 4.0);
        assert!((huber_cost(4.0 + 1e-9, d) - 4.0).abs() < 1e-8);
        assert_eq!(huber_cost(9.0, d), 8.0);
        assert_eq!(huber_weight(16.0, d), 0.5);
    }

    #[test]
    fn motion_only_recovers_pose() {
        let k = camera();
        let truth = Pose::from_axis_angle(Vector3::new(0.05, -0.02, 0.01), Vector3::new(0.1, 0.0, 0.2));
        let mut p = BaProblem::default();
        let pose = p.add_pose(truth.retract(&Vector6::new(0.02, -0.01, 0.03, 0.05, -0.05, 0.02)), false);
        for i in 0..40 {
            let x = Vector3::new((i % 8) as f64 - 3.5, (i / 8) as f64 - 2.0, 6.0 + (i % 3) as f64);
            let px = k.project_unchecked(&truth.transform(&x));
            let pt = p.add_point(x, true);
            p.add_observation(BaObservation {
                pose,
                point: pt,
                pixel: px,
                inv_sigma2: 1.0,
            });
        }
        let rep = p.optimize(&k, &LmConfig { max_iterations: 30, ..Default::default() });
        assert!(rep.is_monotone());
        assert!(p.poses[0].max_difference(&truth) < 1e-9);
    }
}
