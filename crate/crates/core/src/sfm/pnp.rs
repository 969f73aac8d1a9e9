//! Absolute pose from 2D-3D correspondences: P3P inside RANSAC followed
//! by nonlinear refinement.

use nalgebra::{Matrix4, Matrix6, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ransac::{adaptive_iterations, draw};
use crate::error::{Error, Result};
use crate::geometry::{skew, umeyama, CameraPose, Intrinsics, Mat3, Vec2, Vec3, DEPTH_EPS};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PnpOptions {
    pub threshold_px: f64,
    pub confidence: f64,
    pub max_iterations: usize,
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for PnpOptions {
    fn default() -> Self {
        PnpOptions {
            threshold_px: 4.0,
            confidence: 0.9999,
            max_iterations: 2000,
            min_inliers: 12,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PnpResult {
    pub pose: CameraPose,
    pub inliers: Vec<usize>,
}

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_add(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len().max(b.len())];
    for (i, x) in a.iter().enumerate() {
        out[i] += x;
    }
    for (i, x) in b.iter().enumerate() {
        out[i] += x;
    }
    out
}

fn poly_eval(p: &[f64], x: f64) -> f64 {
    p.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

/// Real roots of a polynomial with coefficients in ascending order, up to
/// degree four.
fn real_roots(p: &[f64]) -> Vec<f64> {
    let mut p = p.to_vec();
    let scale = p.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if scale < 1e-300 {
        return Vec::new();
    }
    while p.len() > 1 && p.last().unwrap().abs() < 1e-14 * scale {
        p.pop();
    }
    let deg = p.len() - 1;
    let candidates: Vec<f64> = match deg {
        0 => Vec::new(),
        1 => vec![-p[0] / p[1]],
        _ => {
            // companion matrix, padded to 4x4 with zero roots when lower degree
            let lead = p[deg];
            let mut c = Matrix4::<f64>::zeros();
            for i in 1..deg {
                c[(i, i - 1)] = 1.0;
            }
            for i in 0..deg {
                c[(i, deg - 1)] = -p[i] / lead;
            }
            c.complex_eigenvalues()
                .iter()
                .take(4)
                .filter(|z| z.im.abs() <= 1e-6 * (1.0 + z.re.abs()))
                .map(|z| z.re)
                .collect()
        }
    };
    let dp: Vec<f64> = (1..p.len()).map(|i| i as f64 * p[i]).collect();
    candidates
        .into_iter()
        .map(|mut x| {
            for _ in 0..8 {
                let d = poly_eval(&dp, x);
                if d.abs() < 1e-300 {
                    break;
                }
                let step = poly_eval(&p, x) / d;
                x -= step;
                if step.abs() < 1e-15 * (1.0 + x.abs()) {
                    break;
                }
            }
            x
        })
        .collect()
}

/// Minimal solver: up to four poses consistent with three bearing/point
/// pairs.
pub fn p3p(bearings: &[Vec3; 3], points: &[Vec3; 3]) -> Vec<CameraPose> {
    let f: Vec<Vec3> = bearings.iter().map(|b| b.normalize()).collect();
    let a2 = (points[1] - points[2]).norm_squared();
    let b2 = (points[0] - points[2]).norm_squared();
    let c2 = (points[0] - points[1]).norm_squared();
    if a2 < 1e-18 || b2 < 1e-18 || c2 < 1e-18 {
        return Vec::new();
    }
    let ca = f[1].dot(&f[2]);
    let cb = f[0].dot(&f[2]);
    let cg = f[0].dot(&f[1]);
    // d2 = u d1, d3 = v d1; u = N(v) / D(v)
    let k1 = (c2 - a2) / b2;
    let kc = c2 / b2;
    let q = [1.0, -2.0 * cb, 1.0]; // 1 + v^2 - 2 v cb
    let n = poly_add(&q.map(|x| k1 * x), &[-1.0, 0.0, 1.0]);
    let d = [-2.0 * cg, 2.0 * ca];
    // D^2 + N^2 - 2 cg N D - kc q D^2 = 0
    let d2 = poly_mul(&d, &d);
    let quartic = poly_add(
        &poly_add(&d2, &poly_mul(&n, &n)),
        &poly_add(
            &poly_mul(&n, &d).iter().map(|x| -2.0 * cg * x).collect::<Vec<_>>(),
            &poly_mul(&q, &d2).iter().map(|x| -kc * x).collect::<Vec<_>>(),
        ),
    );
    let mut out = Vec::new();
    for v in real_roots(&quartic) {
        if !(v > 0.0) {
            continue;
        }
        let dv = poly_eval(&d, v);
        if dv.abs() < 1e-12 {
            continue;
        }
        let u = poly_eval(&n, v) / dv;
        if !(u > 0.0) {
            continue;
        }
        let qv = poly_eval(&q, v);
        if !(qv > 0.0) {
            continue;
        }
        let d1 = (b2 / qv).sqrt();
        let cam = [f[0] * d1, f[1] * (u * d1), f[2] * (v * d1)];
        let Ok(sim) = umeyama(points, &cam) else { continue };
        let mu_s = points.iter().sum::<Vec3>() / 3.0;
        let mu_d = cam.iter().sum::<Vec3>() / 3.0;
        let t = mu_d - sim.rotation * mu_s;
        out.push(CameraPose::from_rotation_translation(sim.rotation, t));
    }
    out
}

fn reprojection(pose: &CameraPose, k: &Intrinsics, px: &Vec2, x: &Vec3) -> f64 {
    let pc = pose.transform_point(x);
    if pc.z <= DEPTH_EPS {
        return f64::INFINITY;
    }
    (Vec2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy) - px).norm()
}

/// Levenberg–Marquardt on the summed squared reprojection error of the
/// given correspondences.
pub fn refine_pose(pose: &CameraPose, k: &Intrinsics, corr: &[(Vec2, Vec3)], iterations: usize) -> CameraPose {
    let cost = |p: &CameraPose| corr.iter().map(|(px, x)| reprojection(p, k, px, x).powi(2)).sum::<f64>();
    let mut pose = *pose;
    let mut current = cost(&pose);
    let mut mu = 1e-4;
    for _ in 0..iterations {
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for (px, x) in corr {
            let rx = pose.rotation() * x;
            let pc = rx + pose.translation();
            if pc.z <= DEPTH_EPS {
                continue;
            }
            let r = Vec2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy) - px;
            let jp = k.projection_jacobian(&pc);
            let mut j = nalgebra::SMatrix::<f64, 2, 6>::zeros();
            j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(jp * -skew(&rx)));
            j.fixed_view_mut::<2, 3>(0, 3).copy_from(&jp);
            h += j.transpose() * j;
            g -= j.transpose() * r;
        }
        let mut accepted = false;
        for _ in 0..10 {
            let mut hd = h;
            for i in 0..6 {
                hd[(i, i)] += mu * (h[(i, i)] + 1e-12);
            }
            let Some(step) = hd.cholesky().map(|c| c.solve(&g)) else {
                mu *= 10.0;
                continue;
            };
            let cand = pose.retract(&step.fixed_rows::<3>(0).into_owned(), &step.fixed_rows::<3>(3).into_owned());
            let c = cost(&cand);
            if c < current {
                let done = current - c <= 1e-14 * current;
                pose = cand;
                current = c;
                mu = (mu / 3.0).max(1e-12);
                accepted = true;
                if done {
                    return pose;
                }
                break;
            }
            mu *= 8.0;
        }
        if !accepted {
            break;
        }
    }
    pose
}

/// Robust absolute pose. Fails with `TooFewInliers` when the consensus is
/// smaller than `min_inliers`.
pub fn estimate_pose_pnp(corr: &[(Vec2, Vec3)], k: &Intrinsics, opts: &PnpOptions) -> Result<PnpResult> {
    if corr.len() < 4 {
        return Err(Error::TooFewCorrespondences {
            required: 4,
            found: corr.len(),
        });
    }
    let bearings: Vec<Vec3> = corr.iter().map(|(px, _)| k.bearing(px)).collect();
    let inliers_of = |p: &CameraPose| -> Vec<usize> {
        (0..corr.len())
            .filter(|&i| reprojection(p, k, &corr[i].0, &corr[i].1) < opts.threshold_px)
            .collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<(CameraPose, Vec<usize>)> = None;
    let mut needed = opts.max_iterations;
    let mut it = 0;
    while it < needed {
        it += 1;
        let s = draw(&mut rng, corr.len(), 3);
        let b = [bearings[s[0]], bearings[s[1]], bearings[s[2]]];
        let x = [corr[s[0]].1, corr[s[1]].1, corr[s[2]].1];
        for pose in p3p(&b, &x) {
            let inl = inliers_of(&pose);
            if best.as_ref().is_none_or(|(_, bi)| inl.len() > bi.len()) {
                needed = adaptive_iterations(inl.len() as f64 / corr.len() as f64, 3, opts.confidence, opts.max_iterations);
                best = Some((pose, inl));
            }
        }
    }
    let Some((mut pose, mut inliers)) = best else {
        return Err(Error::TooFewInliers {
            required: opts.min_inliers,
            found: 0,
        });
    };
    for _ in 0..3 {
        if inliers.len() < 3 {
            break;
        }
        let sub: Vec<(Vec2, Vec3)> = inliers.iter().map(|&i| corr[i]).collect();
        pose = refine_pose(&pose, k, &sub, 30);
        let next = inliers_of(&pose);
        if next == inliers {
            break;
        }
        inliers = next;
    }
    if inliers.len() < opts.min_inliers {
        return Err(Error::TooFewInliers {
            required: opts.min_inliers,
            found: inliers.len(),
        });
    }
    let r: Mat3 = crate::geometry::project_to_rotation(pose.rotation());
    let pose = CameraPose::from_rotation_translation(r, *pose.translation());
    Ok(PnpResult { pose, inliers })
}
