//! Levenberg–Marquardt bundle adjustment with a Huber loss, solved through
//! the Schur complement on the camera block.

use std::collections::{BTreeSet, HashMap};

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Matrix6, Matrix6x3, SMatrix, Vector6};

use super::{PointId, Reconstruction};
use crate::correspondence::ViewId;
use crate::geometry::{skew, CameraPose, Intrinsics, Vec2, Vec3, DEPTH_EPS};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaOptions {
    pub max_iterations: usize,
    /// Stop when an accepted step lowers the cost by less than this
    /// relative amount.
    pub function_tolerance: f64,
    pub huber_px: f64,
    pub fix_first_camera: bool,
}

impl Default for BaOptions {
    fn default() -> Self {
        BaOptions {
            max_iterations: 50,
            function_tolerance: 1e-10,
            huber_px: 2.0,
            fix_first_camera: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BaReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Residuals whose point fell behind the camera at the final state.
    pub behind_camera: usize,
}

type Mat2x6 = SMatrix<f64, 2, 6>;

/// Cost charged to a residual whose point is behind its camera.
const BEHIND_PENALTY_PX: f64 = 1e4;

fn huber(sq: f64, delta: f64) -> f64 {
    if sq <= delta * delta {
        sq
    } else {
        2.0 * delta * sq.sqrt() - delta * delta
    }
}

fn huber_weight(norm: f64, delta: f64) -> f64 {
    if norm <= delta {
        1.0
    } else {
        delta / norm
    }
}

struct Term {
    cam: Option<usize>,
    view: ViewId,
    pt: Option<usize>,
    point: PointId,
    pixel: Vec2,
    k: Intrinsics,
}

struct Problem<'a> {
    recon: &'a Reconstruction,
    cams: Vec<ViewId>,
    pts: Vec<PointId>,
    terms: Vec<Term>,
    /// Terms grouped by variable point.
    by_point: Vec<Vec<usize>>,
    delta: f64,
}

#[derive(Clone)]
struct State {
    poses: Vec<CameraPose>,
    points: Vec<Vec3>,
}

impl<'a> Problem<'a> {
    fn pose<'s>(&'s self, s: &'s State, t: &Term) -> &'s CameraPose {
        match t.cam {
            Some(c) => &s.poses[c],
            None => &self.recon.poses[&t.view],
        }
    }

    fn point(&self, s: &State, t: &Term) -> Vec3 {
        match t.pt {
            Some(p) => s.points[p],
            None => self.recon.points[&t.point].position,
        }
    }

    fn cost(&self, s: &State) -> (f64, usize) {
        let mut c = 0.0;
        let mut behind = 0;
        for t in &self.terms {
            let pc = self.pose(s, t).transform_point(&self.point(s, t));
            if pc.z <= DEPTH_EPS {
                behind += 1;
                c += huber(BEHIND_PENALTY_PX * BEHIND_PENALTY_PX, self.delta);
                continue;
            }
            let proj = Vec2::new(t.k.fx * pc.x / pc.z + t.k.cx, t.k.fy * pc.y / pc.z + t.k.cy);
            c += huber((proj - t.pixel).norm_squared(), self.delta);
        }
        (c, behind)
    }

    /// Solves the damped normal equations; returns camera and point steps.
    fn step(&self, s: &State, mu: f64) -> Option<(Vec<Vector6<f64>>, Vec<Vec3>)> {
        let nc = self.cams.len();
        let np = self.pts.len();
        let mut b_blocks = vec![Matrix6::<f64>::zeros(); nc];
        let mut g_c = vec![Vector6::<f64>::zeros(); nc];
        let mut c_blocks = vec![Matrix3::<f64>::zeros(); np];
        let mut g_p = vec![Vec3::zeros(); np];
        // per term camera-point coupling, only when both are variable
        let mut e_blocks: HashMap<usize, Matrix6x3<f64>> = HashMap::new();

        for (ti, t) in self.terms.iter().enumerate() {
            let pose = self.pose(s, t);
            let x = self.point(s, t);
            let rx = pose.rotation() * x;
            let pc = rx + pose.translation();
            if pc.z <= DEPTH_EPS {
                continue;
            }
            let proj = Vec2::new(t.k.fx * pc.x / pc.z + t.k.cx, t.k.fy * pc.y / pc.z + t.k.cy);
            let r = proj - t.pixel;
            let w = huber_weight(r.norm(), self.delta);
            let jpi: Matrix2x3<f64> = t.k.projection_jacobian(&pc);
            let jc: Option<Mat2x6> = t.cam.map(|_| {
                let jr = jpi * (-skew(&rx));
                let mut m = Mat2x6::zeros();
                m.fixed_view_mut::<2, 3>(0, 0).copy_from(&jr);
                m.fixed_view_mut::<2, 3>(0, 3).copy_from(&jpi);
                m
            });
            let jp: Option<Matrix2x3<f64>> = t.pt.map(|_| jpi * pose.rotation());
            if let (Some(c), Some(jc)) = (t.cam, jc.as_ref()) {
                b_blocks[c] += w * jc.transpose() * jc;
                g_c[c] -= w * jc.transpose() * r;
            }
            if let (Some(p), Some(jp)) = (t.pt, jp.as_ref()) {
                c_blocks[p] += w * jp.transpose() * jp;
                g_p[p] -= w * jp.transpose() * r;
            }
            if let (Some(jc), Some(jp)) = (jc, jp) {
                e_blocks.insert(ti, w * jc.transpose() * jp);
            }
        }

        let damp6 = |m: &mut Matrix6<f64>| {
            for i in 0..6 {
                m[(i, i)] += mu * (m[(i, i)] + 1e-9);
            }
        };
        let damp3 = |m: &mut Matrix3<f64>| {
            for i in 0..3 {
                m[(i, i)] += mu * (m[(i, i)] + 1e-9);
            }
        };
        for b in &mut b_blocks {
            damp6(b);
        }
        let mut c_inv = Vec::with_capacity(np);
        for c in &mut c_blocks {
            damp3(c);
            c_inv.push(c.try_inverse()?);
        }

        let n = 6 * nc;
        let mut sys = DMatrix::<f64>::zeros(n, n);
        let mut rhs = DVector::<f64>::zeros(n);
        for c in 0..nc {
            sys.fixed_view_mut::<6, 6>(6 * c, 6 * c).copy_from(&b_blocks[c]);
            rhs.fixed_rows_mut::<6>(6 * c).copy_from(&g_c[c]);
        }
        for (p, terms) in self.by_point.iter().enumerate() {
            let coupled: Vec<(usize, &Matrix6x3<f64>)> = terms
                .iter()
                .filter_map(|ti| Some((self.terms[*ti].cam?, e_blocks.get(ti)?)))
                .collect();
            if coupled.is_empty() {
                continue;
            }
            let ci = &c_inv[p];
            let ecinv: Vec<Matrix6x3<f64>> = coupled.iter().map(|(_, e)| *e * ci).collect();
            for (a, (ca, _)) in coupled.iter().enumerate() {
                let v = ecinv[a] * g_p[p];
                let mut r = rhs.fixed_rows_mut::<6>(6 * ca);
                r -= v;
                for (cb, eb) in coupled.iter() {
                    let blk = ecinv[a] * eb.transpose();
                    let mut s = sys.fixed_view_mut::<6, 6>(6 * ca, 6 * cb);
                    s -= blk;
                }
            }
        }
        let dc: DVector<f64> = if n > 0 {
            sys.cholesky()?.solve(&rhs)
        } else {
            DVector::zeros(0)
        };
        let cam_steps: Vec<Vector6<f64>> = (0..nc).map(|c| dc.fixed_rows::<6>(6 * c).into_owned()).collect();
        let mut pt_steps = Vec::with_capacity(np);
        for (p, terms) in self.by_point.iter().enumerate() {
            let mut g = g_p[p];
            for ti in terms {
                if let (Some(c), Some(e)) = (self.terms[*ti].cam, e_blocks.get(ti)) {
                    g -= e.transpose() * cam_steps[c];
                }
            }
            pt_steps.push(c_inv[p] * g);
        }
        Some((cam_steps, pt_steps))
    }
}

fn apply_step(s: &State, dc: &[Vector6<f64>], dp: &[Vec3]) -> State {
    State {
        poses: s
            .poses
            .iter()
            .zip(dc)
            .map(|(p, d)| p.retract(&d.fixed_rows::<3>(0).into_owned(), &d.fixed_rows::<3>(3).into_owned()))
            .collect(),
        points: s.points.iter().zip(dp).map(|(x, d)| x + d).collect(),
    }
}

/// Optimizes the given cameras and points; every other quantity is held
/// fixed but still contributes residuals that touch a variable.
pub fn bundle_adjust_subset(
    recon: &Reconstruction,
    variable_views: &BTreeSet<ViewId>,
    variable_points: &BTreeSet<PointId>,
    opts: &BaOptions,
) -> (Reconstruction, BaReport) {
    let cams: Vec<ViewId> = variable_views.iter().copied().filter(|v| recon.poses.contains_key(v)).collect();
    let pts: Vec<PointId> = variable_points.iter().copied().filter(|p| recon.points.contains_key(p)).collect();
    let cam_idx: HashMap<ViewId, usize> = cams.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let pt_idx: HashMap<PointId, usize> = pts.iter().enumerate().map(|(i, &p)| (p, i)).collect();
    let mut terms = Vec::new();
    let mut by_point = vec![Vec::new(); pts.len()];
    for o in &recon.observations {
        let cam = cam_idx.get(&o.view).copied();
        let pt = pt_idx.get(&o.point).copied();
        if cam.is_none() && pt.is_none() {
            continue;
        }
        if !recon.poses.contains_key(&o.view) || !recon.points.contains_key(&o.point) {
            continue;
        }
        if let Some(p) = pt {
            by_point[p].push(terms.len());
        }
        terms.push(Term {
            cam,
            view: o.view,
            pt,
            point: o.point,
            pixel: o.pixel,
            k: recon.intrinsics[&o.view],
        });
    }
    let problem = Problem {
        recon,
        cams: cams.clone(),
        pts: pts.clone(),
        terms,
        by_point,
        delta: opts.huber_px,
    };
    let mut state = State {
        poses: cams.iter().map(|v| recon.poses[v]).collect(),
        points: pts.iter().map(|p| recon.points[p].position).collect(),
    };
    let (mut cost, mut behind) = problem.cost(&state);
    let mut report = BaReport {
        initial_cost: cost,
        cost_history: vec![cost],
        ..Default::default()
    };
    let mut mu = 1e-4;
    let mut iterations = 0;
    let mut converged = problem.terms.is_empty() || (cams.is_empty() && pts.is_empty());
    while !converged && iterations < opts.max_iterations {
        iterations += 1;
        let mut accepted = false;
        for _ in 0..12 {
            let Some((dc, dp)) = problem.step(&state, mu) else {
                mu *= 10.0;
                continue;
            };
            let cand = apply_step(&state, &dc, &dp);
            let (c, b) = problem.cost(&cand);
            if c < cost {
                let rel = (cost - c) / cost.max(1e-300);
                state = cand;
                cost = c;
                behind = b;
                report.cost_history.push(cost);
                mu = (mu / 3.0).max(1e-12);
                accepted = true;
                if rel < opts.function_tolerance {
                    converged = true;
                }
                break;
            }
            mu *= 8.0;
        }
        if !accepted {
            // no decrease possible at any damping: stationary to machine precision
            converged = true;
        }
    }
    let mut out = recon.clone();
    for (v, pose) in cams.iter().zip(&state.poses) {
        out.poses.insert(*v, *pose);
    }
    for (p, x) in pts.iter().zip(&state.points) {
        if let Some(pt) = out.points.get_mut(p) {
            pt.position = *x;
        }
    }
    report.final_cost = cost;
    report.iterations = iterations;
    report.converged = converged;
    report.behind_camera = behind;
    (out, report)
}

/// Global bundle adjustment over every registered camera (optionally
/// holding the anchor camera fixed) and every point.
pub fn bundle_adjust(recon: &Reconstruction, opts: &BaOptions) -> (Reconstruction, BaReport) {
    let anchor = if opts.fix_first_camera { recon.anchor_view() } else { None };
    let views: BTreeSet<ViewId> = recon.poses.keys().copied().filter(|v| Some(*v) != anchor).collect();
    let points: BTreeSet<PointId> = recon.points.keys().copied().collect();
    bundle_adjust_subset(recon, &views, &points, opts)
}
