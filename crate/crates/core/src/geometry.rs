//! Cameras, poses, similarity transforms and the angular error measures
//! shared by every stage of the pipeline.
//!
//! Pose convention: `x_cam = R * x_world + t`, with the camera centre
//! `c = -Rᵀ t` stored alongside so that both forms are available without
//! recomputation.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Camera-frame depth below which a projection is rejected.
pub const DEPTH_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Intrinsics { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::InvalidInput(format!(
                "intrinsics need positive focal lengths, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    /// Pixel to normalized image-plane coordinates.
    pub fn normalize(&self, px: &Vec2) -> Vec2 {
        Vec2::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy)
    }

    pub fn denormalize(&self, xy: &Vec2) -> Vec2 {
        Vec2::new(self.fx * xy.x + self.cx, self.fy * xy.y + self.cy)
    }

    /// Unit bearing vector in the camera frame.
    pub fn bearing(&self, px: &Vec2) -> Vec3 {
        let n = self.normalize(px);
        Vec3::new(n.x, n.y, 1.0).normalize()
    }

    /// Projects a point already expressed in the camera frame.
    pub fn project_camera_point(&self, p: &Vec3) -> Result<Vec2> {
        if p.z <= DEPTH_EPS {
            return Err(Error::NonPositiveDepth { depth: p.z });
        }
        Ok(Vec2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// 2×3 Jacobian of the pinhole projection with respect to the
    /// camera-frame point.
    pub fn projection_jacobian(&self, p: &Vec3) -> nalgebra::Matrix2x3<f64> {
        let iz = 1.0 / p.z;
        let iz2 = iz * iz;
        nalgebra::Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * p.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * p.y * iz2,
        )
    }
}

/// World-to-camera rigid transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    rotation: Mat3,
    translation: Vec3,
    center: Vec3,
}

impl Default for CameraPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl CameraPose {
    pub fn identity() -> Self {
        CameraPose {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
            center: Vec3::zeros(),
        }
    }

    pub fn from_rotation_translation(rotation: Mat3, translation: Vec3) -> Self {
        CameraPose {
            rotation,
            translation,
            center: -rotation.transpose() * translation,
        }
    }

    pub fn from_rotation_center(rotation: Mat3, center: Vec3) -> Self {
        CameraPose {
            rotation,
            translation: -rotation * center,
            center,
        }
    }

    /// Camera at `center` looking at `target`, with image y pointing
    /// along `-up` (so that `up` appears at the top of the image).
    pub fn look_at(center: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let z = target - center;
        let zn = z.norm();
        if zn < 1e-12 {
            return Err(Error::ZeroVector);
        }
        let z = z / zn;
        let x = z.cross(&up);
        let xn = x.norm();
        if xn < 1e-12 {
            return Err(Error::InvalidInput("up vector parallel to viewing direction".into()));
        }
        let x = x / xn;
        let y = z.cross(&x);
        let r = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Ok(Self::from_rotation_center(r, center))
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self::from_rotation_translation(q.to_rotation_matrix().into_inner(), translation)
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn center(&self) -> &Vec3 {
        &self.center
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Left-multiplicative update: `R ← exp(ω) R`, `t ← t + δt`.
    pub fn retract(&self, omega: &Vec3, delta_t: &Vec3) -> Self {
        let r = Rotation3::new(*omega).into_inner() * self.rotation;
        Self::from_rotation_translation(r, self.translation + delta_t)
    }

    /// Relative transform taking camera-`self` coordinates to
    /// camera-`other` coordinates: `x_other = R x_self + t`.
    pub fn relative_to(&self, other: &CameraPose) -> (Mat3, Vec3) {
        let r = other.rotation * self.rotation.transpose();
        let t = other.translation - r * self.translation;
        (r, t)
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        is_rotation(&self.rotation, tol)
            && (self.center + self.rotation.transpose() * self.translation).norm() <= tol
    }
}

pub fn is_rotation(r: &Mat3, tol: f64) -> bool {
    (r.transpose() * r - Mat3::identity()).amax() <= tol && (r.determinant() - 1.0).abs() <= tol
}

/// Nearest rotation in the Frobenius sense.
pub fn project_to_rotation(m: &Mat3) -> Mat3 {
    let svd = SVD::new(*m, true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let d = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        r = u * d * vt;
    }
    r
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn exp_so3(omega: &Vec3) -> Mat3 {
    Rotation3::new(*omega).into_inner()
}

/// Axis-angle vector of a rotation matrix.
pub fn log_so3(r: &Mat3) -> Vec3 {
    Rotation3::from_matrix_unchecked(*r).scaled_axis()
}

pub fn project(pose: &CameraPose, k: &Intrinsics, p: &Vec3) -> Result<Vec2> {
    k.project_camera_point(&pose.transform_point(p))
}

/// Geodesic angle between two rotations, in radians.
///
/// Equal to `acos((tr(R1ᵀR2) − 1) / 2)`; evaluated through `atan2` so that
/// near-identical rotations keep full precision.
pub fn rotation_error(r1: &Mat3, r2: &Mat3) -> f64 {
    let m = r1.transpose() * r2;
    let c = ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let s = 0.5 * Vec3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]).norm();
    s.min(1.0).atan2(c)
}

/// Angle between two translation directions, in radians, as
/// `atan2(‖t1 × t2‖, t1 · t2)`.
pub fn translation_direction_error(t1: &Vec3, t2: &Vec3) -> Result<f64> {
    let n1 = t1.norm();
    let n2 = t2.norm();
    if n1 < 1e-12 || n2 < 1e-12 {
        return Err(Error::ZeroVector);
    }
    Ok(t1.cross(t2).norm().atan2(t1.dot(t2)))
}

/// `x ↦ s R x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub scale: f64,
}

impl Default for SimilarityTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        SimilarityTransform {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
            scale: 1.0,
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3, scale: f64) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::InvalidInput(format!("similarity scale must be positive, got {scale}")));
        }
        if !is_rotation(&rotation, 1e-9) {
            return Err(Error::InvalidInput("similarity rotation is not in SO(3)".into()));
        }
        Ok(SimilarityTransform {
            rotation,
            translation,
            scale,
        })
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.scale * (self.rotation * p) + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        SimilarityTransform {
            rotation: rt,
            translation: -(rt * self.translation) / self.scale,
            scale: 1.0 / self.scale,
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &SimilarityTransform) -> Self {
        SimilarityTransform {
            rotation: self.rotation * other.rotation,
            translation: self.scale * (self.rotation * other.translation) + self.translation,
            scale: self.scale * other.scale,
        }
    }

    /// Re-expresses a camera pose of the source frame in the target frame.
    /// The camera frame is rescaled so that depths are in target units.
    pub fn transform_pose(&self, pose: &CameraPose) -> CameraPose {
        let r = pose.rotation() * self.rotation.transpose();
        CameraPose::from_rotation_center(r, self.apply(pose.center()))
    }
}

pub fn apply_sim3(t: &SimilarityTransform, p: &Vec3) -> Vec3 {
    t.apply(p)
}

pub fn invert_sim3(t: &SimilarityTransform) -> SimilarityTransform {
    t.inverse()
}

/// Verified relative geometry between two cameras, taking camera-`i`
/// coordinates to camera-`j` coordinates up to the baseline length:
/// `x_j = R_ij x_i + λ t_ij`, `‖t_ij‖ = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelativeGeometry {
    pub rotation: Mat3,
    pub direction: Vec3,
}

impl RelativeGeometry {
    pub fn reversed(&self) -> RelativeGeometry {
        let rt = self.rotation.transpose();
        RelativeGeometry {
            rotation: rt,
            direction: -(rt * self.direction),
        }
    }
}

/// A camera pair spanning two reconstructions: `cam_a` registered in model
/// a, `cam_b` in model b, with their two-view geometry and the unknown
/// baseline length `lambda` in model-b units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossPair {
    pub cam_a: usize,
    pub cam_b: usize,
    pub rotation: Mat3,
    pub direction: Vec3,
    pub lambda: f64,
    pub weight: f64,
}

impl CrossPair {
    pub fn new(cam_a: usize, cam_b: usize, geometry: &RelativeGeometry, weight: f64) -> Result<Self> {
        let n = geometry.direction.norm();
        if n < 1e-12 {
            return Err(Error::ZeroVector);
        }
        Ok(CrossPair {
            cam_a,
            cam_b,
            rotation: geometry.rotation,
            direction: geometry.direction / n,
            lambda: 1.0,
            weight,
        })
    }
}

/// Closed-form least-squares similarity mapping `src` onto `dst`
/// (Umeyama). Needs at least three non-collinear points.
pub fn umeyama(src: &[Vec3], dst: &[Vec3]) -> Result<SimilarityTransform> {
    if src.len() != dst.len() {
        return Err(Error::InvalidInput("point sets differ in size".into()));
    }
    let n = src.len();
    if n < 3 {
        return Err(Error::TooFewCorrespondences { required: 3, found: n });
    }
    let nf = n as f64;
    let mu_s = src.iter().sum::<Vec3>() / nf;
    let mu_d = dst.iter().sum::<Vec3>() / nf;
    let mut cov = Mat3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let ds = s - mu_s;
        cov += (d - mu_d) * ds.transpose();
        var_s += ds.norm_squared();
    }
    cov /= nf;
    var_s /= nf;
    if var_s < 1e-300 {
        return Err(Error::SingularSystem("source points coincide".into()));
    }
    let svd = SVD::new(cov, true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let mut sign = Vec3::new(1.0, 1.0, 1.0);
    if (u * vt).determinant() < 0.0 {
        sign.z = -1.0;
    }
    let r = u * Mat3::from_diagonal(&sign) * vt;
    let s = svd.singular_values.component_mul(&sign).sum() / var_s;
    let t = mu_d - s * (r * mu_s);
    Ok(SimilarityTransform {
        rotation: r,
        translation: t,
        scale: s,
    })
}
