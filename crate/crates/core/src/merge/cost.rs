use nalgebra::{DMatrix, DVector, SMatrix};

use super::PairwiseAlignment;
use crate::geometry::{exp_so3, skew, SimilarityTransform, Vec2, Vec3, DEPTH_EPS};
use crate::sfm::Reconstruction;

type Mat2x7 = SMatrix<f64, 2, 7>;

/// Number of parameters shared by every residual: rotation tangent,
/// translation and log scale.
const GLOBAL: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostReport {
    pub cost: f64,
    pub terms: usize,
    /// Residuals skipped because a point fell behind its camera.
    pub dropped: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefineOptions {
    pub max_iterations: usize,
    /// Stop once a step changes every parameter by less than this.
    pub parameter_tolerance: f64,
}

impl Default for RefineOptions {
    fn default() -> Self {
        RefineOptions {
            max_iterations: 100,
            parameter_tolerance: 1e-13,
        }
    }
}

struct Term {
    pair: usize,
    r: Vec2,
    jg: Mat2x7,
    jl: Vec2,
}

fn pi(k: &crate::geometry::Intrinsics, p: &Vec3) -> Vec2 {
    Vec2::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy)
}

/// Visits every forward and reverse residual of the cost, scaled by the
/// square root of the pair weight. Returns the number of dropped terms.
fn for_each_term(al: &PairwiseAlignment, a: &Reconstruction, b: &Reconstruction, mut f: impl FnMut(Term)) -> usize {
    let r = al.transform.rotation;
    let t = al.transform.translation;
    let s = al.transform.scale;
    let mut dropped = 0;
    for c in &al.correspondences {
        for &m in &c.pairs {
            let p = &al.pairs[m];
            let (Some(pose_i), Some(pose_j)) = (a.poses.get(&p.cam_a), b.poses.get(&p.cam_b)) else {
                dropped += 2;
                continue;
            };
            let (ki, kj) = (a.intrinsics[&p.cam_a], b.intrinsics[&p.cam_b]);
            let (ri, ti) = (pose_i.rotation(), pose_i.translation());
            let (rj, tj) = (pose_j.rotation(), pose_j.translation());
            let sw = p.weight.max(0.0).sqrt();
            let (rij, tij, lambda) = (&p.rotation, &p.direction, p.lambda);

            // a -> b through the similarity vs. through the camera pair
            let rx = r * c.point_a;
            let pf = rj * (s * rx + t) + tj;
            let u = ri * c.point_a + ti;
            let qf = s * (rij * u) + lambda * tij;
            if pf.z > DEPTH_EPS && qf.z > DEPTH_EPS {
                let jp = kj.projection_jacobian(&pf);
                let jq = kj.projection_jacobian(&qf);
                let mut jg = Mat2x7::zeros();
                jg.fixed_view_mut::<2, 3>(0, 0).copy_from(&(jp * (-s * rj * skew(&rx))));
                jg.fixed_view_mut::<2, 3>(0, 3).copy_from(&(jp * rj));
                jg.set_column(6, &(jp * (s * (rj * rx)) - jq * (s * (rij * u))));
                f(Term {
                    pair: m,
                    r: sw * (pi(&kj, &pf) - pi(&kj, &qf)),
                    jg: sw * jg,
                    jl: sw * -(jq * (lambda * tij)),
                });
            } else {
                dropped += 1;
            }

            // b -> a through the inverse similarity vs. the reversed pair
            let v = c.point_b - t;
            let rirt = ri * r.transpose();
            let pr = (rirt * v) / s + ti;
            let y = rj * c.point_b + tj;
            let qr = (rij.transpose() * (y - lambda * tij)) / s;
            if pr.z > DEPTH_EPS && qr.z > DEPTH_EPS {
                let jp = ki.projection_jacobian(&pr);
                let jq = ki.projection_jacobian(&qr);
                let mut jg = Mat2x7::zeros();
                jg.fixed_view_mut::<2, 3>(0, 0).copy_from(&(jp * (rirt * skew(&v) / s)));
                jg.fixed_view_mut::<2, 3>(0, 3).copy_from(&(jp * (-rirt / s)));
                jg.set_column(6, &(jp * -(pr - ti) + jq * qr));
                f(Term {
                    pair: m,
                    r: sw * (pi(&ki, &pr) - pi(&ki, &qr)),
                    jg: sw * jg,
                    jl: sw * (jq * (rij.transpose() * tij * (lambda / s))),
                });
            } else {
                dropped += 1;
            }
        }
    }
    dropped
}

/// `E = Σ w_ij (d_ab + d_ba)` over every correspondence and camera pair.
pub fn bidirectional_cost(al: &PairwiseAlignment, a: &Reconstruction, b: &Reconstruction) -> CostReport {
    let mut cost = 0.0;
    let mut terms = 0;
    let dropped = for_each_term(al, a, b, |t| {
        cost += t.r.norm_squared();
        terms += 1;
    });
    CostReport { cost, terms, dropped }
}

/// Analytic gradient of `E` with respect to
/// `[ω (3), t (3), log s, log λ_0 .. log λ_{m-1}]`.
pub fn cost_gradient(al: &PairwiseAlignment, a: &Reconstruction, b: &Reconstruction) -> DVector<f64> {
    let mut g = DVector::zeros(GLOBAL + al.pairs.len());
    for_each_term(al, a, b, |t| {
        let gg = 2.0 * t.jg.transpose() * t.r;
        for i in 0..GLOBAL {
            g[i] += gg[i];
        }
        g[GLOBAL + t.pair] += 2.0 * t.jl.dot(&t.r);
    });
    g
}

/// Applies a step in the tangent parameterization.
pub fn retract(al: &PairwiseAlignment, delta: &DVector<f64>) -> PairwiseAlignment {
    let mut out = al.clone();
    let w = Vec3::new(delta[0], delta[1], delta[2]);
    out.transform = SimilarityTransform {
        rotation: exp_so3(&w) * al.transform.rotation,
        translation: al.transform.translation + Vec3::new(delta[3], delta[4], delta[5]),
        scale: al.transform.scale * delta[6].exp(),
    };
    for (m, p) in out.pairs.iter_mut().enumerate() {
        p.lambda *= delta[GLOBAL + m].exp();
    }
    out
}

/// Central finite differences of `E`, for checking the analytic gradient.
pub fn numeric_gradient(al: &PairwiseAlignment, a: &Reconstruction, b: &Reconstruction, h: f64) -> DVector<f64> {
    let n = GLOBAL + al.pairs.len();
    let mut g = DVector::zeros(n);
    for i in 0..n {
        let mut d = DVector::zeros(n);
        d[i] = h;
        let plus = bidirectional_cost(&retract(al, &d), a, b).cost;
        d[i] = -h;
        let minus = bidirectional_cost(&retract(al, &d), a, b).cost;
        g[i] = (plus - minus) / (2.0 * h);
    }
    g
}

/// Levenberg–Marquardt on `E` over the similarity and every `λ`.
pub fn refine_alignment(
    al: &PairwiseAlignment,
    a: &Reconstruction,
    b: &Reconstruction,
    opts: &RefineOptions,
) -> PairwiseAlignment {
    let n = GLOBAL + al.pairs.len();
    let mut cur = al.clone();
    let mut cost = bidirectional_cost(&cur, a, b).cost;
    let mut mu = 1e-4;
    for _ in 0..opts.max_iterations {
        if cost == 0.0 {
            break;
        }
        let mut h = DMatrix::<f64>::zeros(n, n);
        let mut g = DVector::<f64>::zeros(n);
        for_each_term(&cur, a, b, |t| {
            let l = GLOBAL + t.pair;
            let hg = t.jg.transpose() * t.jg;
            let hl = t.jg.transpose() * t.jl;
            let gg = t.jg.transpose() * t.r;
            for i in 0..GLOBAL {
                for j in 0..GLOBAL {
                    h[(i, j)] += hg[(i, j)];
                }
                h[(i, l)] += hl[i];
                h[(l, i)] += hl[i];
                g[i] -= gg[i];
            }
            h[(l, l)] += t.jl.norm_squared();
            g[l] -= t.jl.dot(&t.r);
        });
        let mut accepted = false;
        let mut small = false;
        for _ in 0..12 {
            let mut hd = h.clone();
            for i in 0..n {
                hd[(i, i)] += mu * (h[(i, i)] + 1e-12);
            }
            let Some(ch) = hd.cholesky() else {
                mu *= 10.0;
                continue;
            };
            let step = ch.solve(&g);
            let cand = retract(&cur, &step);
            let c = bidirectional_cost(&cand, a, b).cost;
            if c < cost {
                small = step.amax() < opts.parameter_tolerance;
                cur = cand;
                cost = c;
                mu = (mu / 3.0).max(1e-12);
                accepted = true;
                break;
            }
            mu *= 8.0;
        }
        if !accepted || small {
            break;
        }
    }
    cur.transform.rotation = crate::geometry::project_to_rotation(&cur.transform.rotation);
    cur.cost = bidirectional_cost(&cur, a, b).cost;
    cur
}
