use nalgebra::{DMatrix, DVector, SVector, Vector3};

use crate::geometry::{log_so3, SimTransform};

type Vector7 = SVector<f64, 7>;

const STEP: f64 = 1e-6;

/// Relative constraint `S_from * S_to^-1` between two world-to-camera similarities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimEdge {
    pub from: usize,
    pub to: usize,
    pub measurement: SimTransform,
    pub weight: f64,
}

#[derive(Clone, Debug, Default)]
pub struct PoseGraph {
    pub nodes: Vec<SimTransform>,
    pub fixed: Vec<bool>,
    pub edges: Vec<SimEdge>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PoseGraphReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
}

fn increment(d: &[f64]) -> SimTransform {
    SimTransform::from_params(&Vector3::new(d[0], d[1], d[2]), &Vector3::new(d[3], d[4], d[5]), d[6])
}

impl PoseGraph {
    pub fn add_node(&mut self, s: SimTransform, fixed: bool) -> usize {
        self.nodes.push(s);
        self.fixed.push(fixed);
        self.nodes.len() - 1
    }

    /// Adds an edge whose measurement is the current relative transform of its nodes.
    pub fn add_current_edge(&mut self, from: usize, to: usize, weight: f64) {
        let measurement = self.nodes[from].compose(&self.nodes[to].inverse());
        self.edges.push(SimEdge {
            from,
            to,
            measurement,
            weight,
        });
    }

    /// Error vector `(log R, t, ln s)` of `measurement * S_to * S_from^-1`; zero when the
    /// nodes agree with the measurement.
    pub fn edge_residual(edge: &SimEdge, from: &SimTransform, to: &SimTransform) -> Vector7 {
        let e = edge.measurement.compose(&to.compose(&from.inverse()));
        let w = log_so3(e.rotation());
        let t = e.translation();
        Vector7::from_column_slice(&[w.x, w.y, w.z, t.x, t.y, t.z, e.scale().ln()])
    }

    /// Euclidean norm of one edge's residual at the current estimate.
    pub fn residual_norm(&self, edge: usize) -> f64 {
        let e = &self.edges[edge];
        Self::edge_residual(e, &self.nodes[e.from], &self.nodes[e.to]).norm()
    }

    /// Weighted total squared residual over all edges.
    pub fn cost(&self) -> f64 {
        self.edges
            .iter()
            .map(|e| e.weight * Self::edge_residual(e, &self.nodes[e.from], &self.nodes[e.to]).norm_squared())
            .sum()
    }

    /// Levenberg-Marquardt with left-multiplicative increments `S <- Exp(d) * S` and
    /// central-difference Jacobians.
    pub fn optimize(&mut self, max_iterations: usize) -> PoseGraphReport {
        let mut index = Vec::with_capacity(self.nodes.len());
        let mut n = 0;
        for &f in &self.fixed {
            index.push(if f { None } else { Some(n) });
            if !f {
                n += 1;
            }
        }
        let mut cost = self.cost();
        let mut report = PoseGraphReport {
            initial_cost: cost,
            final_cost: cost,
            iterations: 0,
        };
        if n == 0 || cost == 0.0 {
            return report;
        }
        let dim = 7 * n;
        let mut lambda = 1e-6;
        for it in 0..max_iterations {
            report.iterations = it + 1;
            let mut h = DMatrix::<f64>::zeros(dim, dim);
            let mut b = DVector::<f64>::zeros(dim);
            for e in &self.edges {
                let (ia, ib) = (index[e.from], index[e.to]);
                if ia.is_none() && ib.is_none() {
                    continue;
                }
                let r = Self::edge_residual(e, &self.nodes[e.from], &self.nodes[e.to]);
                let mut jac = nalgebra::SMatrix::<f64, 7, 14>::zeros();
                for side in 0..2 {
                    if (side == 0 && ia.is_none()) || (side == 1 && ib.is_none()) {
                        continue;
                    }
                    for p in 0..7 {
                        let mut d = [0.0; 7];
                        d[p] = STEP;
                        let plus = increment(&d);
                        d[p] = -STEP;
                        let minus = increment(&d);
                        let (rp, rm) = if side == 0 {
                            (
                                Self::edge_residual(e, &plus.compose(&self.nodes[e.from]), &self.nodes[e.to]),
                                Self::edge_residual(e, &minus.compose(&self.nodes[e.from]), &self.nodes[e.to]),
                            )
                        } else {
                            (
                                Self::edge_residual(e, &self.nodes[e.from], &plus.compose(&self.nodes[e.to])),
                                Self::edge_residual(e, &self.nodes[e.from], &minus.compose(&self.nodes[e.to])),
                            )
                        };
                        jac.set_column(7 * side + p, &((rp - rm) / (2.0 * STEP)));
                    }
                }
                let blocks = [(0usize, ia), (1usize, ib)];
                for &(sa, ca) in &blocks {
                    let Some(ca) = ca else { continue };
                    let ja = jac.fixed_view::<7, 7>(0, 7 * sa);
                    let mut bb = b.rows_mut(7 * ca, 7);
                    bb += ja.transpose() * r * e.weight;
                    for &(sb, cb) in &blocks {
                        let Some(cb) = cb else { continue };
                        let jb = jac.fixed_view::<7, 7>(0, 7 * sb);
                        let mut blk = h.view_mut((7 * ca, 7 * cb), (7, 7));
                        blk += ja.transpose() * jb * e.weight;
                    }
                }
            }
            let mut accepted = false;
            while lambda < 1e10 {
                let mut damped = h.clone();
                for d in 0..dim {
                    damped[(d, d)] += lambda * h[(d, d)].max(1e-6);
                }
                let Some(chol) = damped.cholesky() else {
                    lambda *= 10.0;
                    continue;
                };
                let step = chol.solve(&(-&b));
                let saved = self.nodes.clone();
                for (i, idx) in index.iter().enumerate() {
                    if let Some(c) = idx {
                        let d: Vec<f64> = step.rows(7 * c, 7).iter().copied().collect();
                        self.nodes[i] = increment(&d).compose(&self.nodes[i]);
                    }
                }
                let new_cost = self.cost();
                if new_cost < cost {
                    let rel = (cost - new_cost) / cost;
                    cost = new_cost;
                    lambda = (lambda / 3.0).max(1e-12);
                    accepted = rel > 1e-12;
                    break;
                }
                self.nodes = saved;
                lambda *= 4.0;
            }
            if !accepted {
                break;
            }
        }
        report.final_cost = cost;
        report
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn consistent_graph_is_fixed_point() {
        let mut g = PoseGraph::default();
        for i in 0..4 {
            let s = SimTransform::from_params(&Vector3::new(0.0, 0.1 * i as f64, 0.0), &Vector3::new(i as f64, 0.0, 0.0), 0.0);
            g.add_node(s, i == 0);
        }
        for i in 0..3 {
            g.add_current_edge(i, i + 1, 1.0);
        }
        let before = g.nodes.clone();
        let rep = g.optimize(10);
        assert!(rep.initial_cost < 1e-25);
        for (a, b) in g.nodes.iter().zip(&before) {
            assert!(a.max_difference(b) < 1e-12);
        }
    }

    #[test]
    fn loop_error_is_distributed() {
        // square loop of four nodes with a scale-drifted closing measurement
        let mut g = PoseGraph::default();
        for i in 0..8 {
            let a = i as f64 * std::f64::consts::FRAC_PI_4;
            g.add_node(SimTransform::from_params(&Vector3::new(0.0, a, 0.0), &Vector3::new(0.0, 0.0, 3.0), 0.0), i == 0);
        }
        for i in 0..7 {
            g.add_current_edge(i, i + 1, 1.0);
        }
        let mut closing = g.nodes[7].compose(&g.nodes[0].inverse());
        closing = SimTransform::from_params(&Vector3::new(0.0, 0.05, 0.0), &Vector3::new(0.2, 0.0, 0.0), 0.1).compose(&closing);
        g.edges.push(SimEdge {
            from: 7,
            to: 0,
            measurement: closing,
            weight: 1.0,
        });
        let before = g.residual_norm(7);
        let rep = g.optimize(30);
        assert!(rep.final_cost < rep.initial_cost);
        assert!(g.residual_norm(7) < 0.25 * before);
    }
}
