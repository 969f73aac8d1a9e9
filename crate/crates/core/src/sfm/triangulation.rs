use nalgebra::{Matrix3, Matrix4, SymmetricEigen, Vector4};

use crate::error::{Error, Result};
use crate::geometry::{CameraPose, Intrinsics, Vec2, Vec3};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TriangulationOptions {
    /// Minimum angle between any two viewing rays, degrees.
    pub min_angle_deg: f64,
    pub max_residual_px: f64,
}

impl Default for TriangulationOptions {
    fn default() -> Self {
        TriangulationOptions {
            min_angle_deg: 1.0,
            max_residual_px: 4.0,
        }
    }
}

/// Largest angle (radians) between the world-frame viewing rays.
pub fn max_ray_angle(obs: &[(CameraPose, Intrinsics, Vec2)]) -> f64 {
    let rays: Vec<Vec3> = obs
        .iter()
        .map(|(pose, k, px)| pose.rotation().transpose() * k.bearing(px))
        .collect();
    let mut best: f64 = 0.0;
    for i in 0..rays.len() {
        for j in i + 1..rays.len() {
            best = best.max(rays[i].dot(&rays[j]).clamp(-1.0, 1.0).acos());
        }
    }
    best
}

/// Linear triangulation from normalized coordinates.
pub fn triangulate_dlt(obs: &[(CameraPose, Intrinsics, Vec2)]) -> Option<Vec3> {
    let mut ata = Matrix4::<f64>::zeros();
    for (pose, k, px) in obs {
        let n = k.normalize(px);
        let r = pose.rotation();
        let t = pose.translation();
        let row = |i: usize| Vector4::new(r[(i, 0)], r[(i, 1)], r[(i, 2)], t[i]);
        let p3 = row(2);
        for a in [n.x * p3 - row(0), n.y * p3 - row(1)] {
            let a = a.normalize();
            ata += a * a.transpose();
        }
    }
    let eig = SymmetricEigen::new(ata);
    let (imin, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let x = eig.eigenvectors.column(imin);
    if x[3].abs() < 1e-14 {
        return None;
    }
    Some(Vec3::new(x[0] / x[3], x[1] / x[3], x[2] / x[3]))
}

/// Gauss–Newton on the summed squared reprojection error.
pub fn refine_point(obs: &[(CameraPose, Intrinsics, Vec2)], mut x: Vec3, iterations: usize) -> Vec3 {
    let cost = |x: &Vec3| -> f64 {
        obs.iter()
            .map(|(pose, k, px)| {
                k.project_camera_point(&pose.transform_point(x))
                    .map_or(f64::INFINITY, |p| (p - px).norm_squared())
            })
            .sum()
    };
    let mut current = cost(&x);
    for _ in 0..iterations {
        let mut h = Matrix3::<f64>::zeros();
        let mut g = Vec3::zeros();
        for (pose, k, px) in obs {
            let pc = pose.transform_point(&x);
            if pc.z <= 1e-9 {
                return x;
            }
            let proj = Vec2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy);
            let r = proj - px;
            let j = k.projection_jacobian(&pc) * pose.rotation();
            h += j.transpose() * j;
            g += j.transpose() * r;
        }
        let Some(step) = h.cholesky().map(|c| c.solve(&(-g))) else { break };
        let cand = x + step;
        let c = cost(&cand);
        if c < current {
            let done = (current - c) <= 1e-15 * current.max(1e-300) || step.norm() <= 1e-14 * x.norm().max(1.0);
            x = cand;
            current = c;
            if done {
                break;
            }
        } else {
            break;
        }
    }
    x
}

/// DLT estimate refined by minimizing reprojection error, subject to
/// parallax, cheirality and residual checks.
pub fn triangulate_track(obs: &[(CameraPose, Intrinsics, Vec2)], opts: &TriangulationOptions) -> Result<Vec3> {
    if obs.len() < 2 {
        return Err(Error::TooFewCorrespondences {
            required: 2,
            found: obs.len(),
        });
    }
    if max_ray_angle(obs) < opts.min_angle_deg.to_radians() {
        return Err(Error::LowParallax);
    }
    let x0 = triangulate_dlt(obs).ok_or(Error::LowParallax)?;
    if obs.iter().any(|(pose, _, _)| pose.transform_point(&x0).z <= 1e-9) {
        return Err(Error::CheiralityViolation);
    }
    let x = refine_point(obs, x0, 20);
    let mut worst: f64 = 0.0;
    for (pose, k, px) in obs {
        let pc = pose.transform_point(&x);
        if pc.z <= 1e-9 {
            return Err(Error::CheiralityViolation);
        }
        let r = (k.project_camera_point(&pc)? - px).norm();
        worst = worst.max(r);
    }
    if worst > opts.max_residual_px {
        return Err(Error::HighResidual(worst));
    }
    Ok(x)
}
