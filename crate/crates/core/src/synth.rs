//! Synthetic scenes with duplicated structures, injected cross-instance
//! mismatches and a ground-truth evaluation harness.
//!
//! Scene layout: cameras on a horizontal ring looking at the origin, a
//! textured cylindrical shell around the origin as the distinct backdrop, and a
//! planar facade patch replicated under rigid placements. Patches are
//! opaque and hide whatever lies behind them.

use std::collections::{BTreeMap, HashSet};

use nalgebra::{Rotation3, Unit, UnitQuaternion};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::correspondence::{Match, View, ViewId};
use crate::error::{Error, Result};
use crate::geometry::{rotation_error, umeyama, CameraPose, Intrinsics, Mat3, Vec2, Vec3};
use crate::sfm::Reconstruction;

/// Rigid placement of one duplicate instance: rotation about `axis` by
/// `angle_deg` followed by `translation`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub axis: [f64; 3],
    pub angle_deg: f64,
    pub translation: [f64; 3],
}

impl Placement {
    pub fn identity() -> Self {
        Placement {
            axis: [0.0, 0.0, 1.0],
            angle_deg: 0.0,
            translation: [0.0; 3],
        }
    }

    pub fn about_z(angle_deg: f64) -> Self {
        Placement {
            angle_deg,
            ..Self::identity()
        }
    }

    pub fn rotation(&self) -> Result<Mat3> {
        let axis = Vec3::from(self.axis);
        if axis.norm() < 1e-12 {
            return Err(Error::InvalidSpec("placement axis is zero".into()));
        }
        Ok(Rotation3::from_axis_angle(&Unit::new_normalize(axis), self.angle_deg.to_radians()).into_inner())
    }

    pub fn apply(&self, p: &Vec3) -> Result<Vec3> {
        Ok(self.rotation()? * p + Vec3::from(self.translation))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub cameras: usize,
    pub ring_radius: f64,
    /// Camera heights are uniform in `[-height_jitter, height_jitter]`.
    pub height_jitter: f64,
    pub image_width: f64,
    pub image_height: f64,
    /// Horizontal field of view in degrees.
    pub fov_deg: f64,
    /// Points farther than this from a camera are not observed.
    pub max_depth: f64,
    /// Largest angle between a surface normal and the direction to the
    /// camera at which the surface is still observed, degrees.
    pub max_incidence_deg: f64,
    pub backdrop_points: usize,
    pub backdrop_radius: f64,
    pub backdrop_height: f64,
    /// Radial thickness of the backdrop shell.
    pub backdrop_relief: f64,
    /// Points per duplicate instance.
    pub duplicate_points: usize,
    /// Distance of the template facade from the origin along +x; the
    /// facade faces +x.
    pub patch_distance: f64,
    pub patch_width: f64,
    pub patch_height: f64,
    /// One placement per instance, applied to the template facade.
    pub placements: Vec<Placement>,
    /// Pixel noise standard deviation.
    pub sigma: f64,
    /// Fraction of eligible cross-instance keypoint pairs matched falsely.
    pub rho: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            cameras: 40,
            ring_radius: 10.0,
            height_jitter: 0.3,
            image_width: 640.0,
            image_height: 480.0,
            fov_deg: 60.0,
            max_depth: 16.0,
            max_incidence_deg: 70.0,
            backdrop_points: 600,
            backdrop_radius: 4.0,
            backdrop_height: 4.0,
            backdrop_relief: 1.5,
            duplicate_points: 200,
            patch_distance: 6.0,
            patch_width: 2.0,
            patch_height: 1.4,
            placements: vec![Placement::identity(), Placement::about_z(90.0)],
            sigma: 1.0,
            rho: 0.1,
            seed: 7,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.into()));
        if self.cameras < 2 || self.backdrop_points == 0 {
            return bad("camera and backdrop point counts must be positive");
        }
        if !self.placements.is_empty() && self.duplicate_points == 0 {
            return bad("duplicate point count must be positive");
        }
        if !(0.0..1.0).contains(&self.rho) {
            return bad("rho must lie in [0, 1)");
        }
        if !(self.sigma >= 0.0) {
            return bad("sigma must be non-negative");
        }
        for (name, v) in [
            ("ring_radius", self.ring_radius),
            ("image_width", self.image_width),
            ("image_height", self.image_height),
            ("max_depth", self.max_depth),
            ("backdrop_radius", self.backdrop_radius),
            ("backdrop_height", self.backdrop_height),
            ("patch_width", self.patch_width),
            ("patch_height", self.patch_height),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidSpec(format!("{name} must be positive")));
            }
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return bad("fov_deg must lie in (0, 180)");
        }
        if !(self.max_incidence_deg > 0.0 && self.max_incidence_deg <= 90.0) {
            return bad("max_incidence_deg must lie in (0, 90]");
        }
        if !(self.backdrop_relief >= 0.0 && self.backdrop_relief < 2.0 * self.backdrop_radius) {
            return bad("backdrop_relief must lie in [0, 2 * backdrop_radius)");
        }
        if self.height_jitter < 0.0 || self.height_jitter >= self.ring_radius {
            return bad("height_jitter out of range");
        }
        for p in &self.placements {
            p.rotation()?;
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        let f = 0.5 * self.image_width / (0.5 * self.fov_deg.to_radians()).tan();
        Intrinsics {
            fx: f,
            fy: f,
            cx: 0.5 * self.image_width,
            cy: 0.5 * self.image_height,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtPose {
    pub view: ViewId,
    /// Unit quaternion `[w, x, y, z]` of the world-to-camera rotation.
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

impl GtPose {
    pub fn from_pose(view: ViewId, pose: &CameraPose) -> Self {
        let q = pose.quaternion();
        let t = pose.translation();
        GtPose {
            view,
            rotation: [q.w, q.i, q.j, q.k],
            translation: [t.x, t.y, t.z],
        }
    }

    pub fn pose(&self) -> CameraPose {
        let [w, x, y, z] = self.rotation;
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z));
        CameraPose::from_quaternion(&q, Vec3::from(self.translation))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct InjectedMatch {
    pub view_i: ViewId,
    pub keypoint_i: usize,
    pub view_j: ViewId,
    pub keypoint_j: usize,
    /// True points behind the two keypoints (paired duplicates).
    pub point_i: usize,
    pub point_j: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub poses: Vec<GtPose>,
    pub points: Vec<[f64; 3]>,
    /// Duplicate instance of each point; `None` for backdrop points.
    pub instance: Vec<Option<usize>>,
    /// Observations `(view, keypoint)` of each point.
    pub tracks: Vec<Vec<(ViewId, usize)>>,
    /// Points that look alike across instances.
    pub pairing: Vec<(usize, usize)>,
    pub injected: Vec<InjectedMatch>,
}

impl GroundTruth {
    pub fn pose_map(&self) -> BTreeMap<ViewId, CameraPose> {
        self.poses.iter().map(|p| (p.view, p.pose())).collect()
    }

    /// Largest distance between two true camera centres.
    pub fn diameter(&self) -> f64 {
        let c: Vec<Vec3> = self.poses.iter().map(|p| *p.pose().center()).collect();
        let mut d: f64 = 0.0;
        for i in 0..c.len() {
            for j in i + 1..c.len() {
                d = d.max((c[i] - c[j]).norm());
            }
        }
        d
    }

    /// `(view, keypoint) → point` for every observed keypoint.
    pub fn keypoint_points(&self) -> BTreeMap<(ViewId, usize), usize> {
        let mut out = BTreeMap::new();
        for (p, obs) in self.tracks.iter().enumerate() {
            for &o in obs {
                out.insert(o, p);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub views: Vec<View>,
    pub matches: Vec<Match>,
    pub truth: GroundTruth,
}

fn cylinder_point(rng: &mut ChaCha8Rng, radius: f64, height: f64, relief: f64) -> (Vec3, Vec3) {
    let a = rng.random_range(0.0..std::f64::consts::TAU);
    let z = rng.random_range(-0.5 * height..0.5 * height);
    let r = radius + relief * (rng.random::<f64>() - 0.5);
    let n = Vec3::new(a.cos(), a.sin(), 0.0);
    (r * n + Vec3::new(0.0, 0.0, z), n)
}

/// Opaque rectangle: centre, unit normal, in-plane half extents along `u`
/// and `v`.
struct Facade {
    center: Vec3,
    normal: Vec3,
    u: Vec3,
    v: Vec3,
    half_u: f64,
    half_v: f64,
}

impl Facade {
    /// Whether the open segment from `a` to `b` crosses the rectangle.
    fn blocks(&self, a: &Vec3, b: &Vec3) -> bool {
        let d = b - a;
        let den = self.normal.dot(&d);
        if den.abs() < 1e-12 {
            return false;
        }
        let s = self.normal.dot(&(self.center - a)) / den;
        if !(1e-6..1.0 - 1e-6).contains(&s) {
            return false;
        }
        let q = a + s * d - self.center;
        q.dot(&self.u).abs() <= self.half_u && q.dot(&self.v).abs() <= self.half_v
    }
}

/// Samples the scene without mismatches. Deterministic in `spec.seed`.
pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.intrinsics();

    let mut poses = Vec::with_capacity(spec.cameras);
    for i in 0..spec.cameras {
        let a = std::f64::consts::TAU * i as f64 / spec.cameras as f64;
        let h = if spec.height_jitter > 0.0 {
            rng.random_range(-spec.height_jitter..spec.height_jitter)
        } else {
            0.0
        };
        let c = Vec3::new(spec.ring_radius * a.cos(), spec.ring_radius * a.sin(), h);
        poses.push(CameraPose::look_at(c, Vec3::zeros(), Vec3::z())?);
    }

    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut instance = Vec::new();
    for _ in 0..spec.backdrop_points {
        let (p, n) = cylinder_point(&mut rng, spec.backdrop_radius, spec.backdrop_height, spec.backdrop_relief);
        points.push(p);
        normals.push(n);
        instance.push(None);
    }
    let template: Vec<Vec3> = (0..spec.duplicate_points)
        .map(|_| {
            Vec3::new(
                spec.patch_distance,
                rng.random_range(-0.5 * spec.patch_width..0.5 * spec.patch_width),
                rng.random_range(-0.5 * spec.patch_height..0.5 * spec.patch_height),
            )
        })
        .collect();
    let mut facades = Vec::new();
    let mut pairing = Vec::new();
    let first_dup = points.len();
    for (m, pl) in spec.placements.iter().enumerate() {
        let r = pl.rotation()?;
        facades.push(Facade {
            center: pl.apply(&Vec3::new(spec.patch_distance, 0.0, 0.0))?,
            normal: r * Vec3::x(),
            u: r * Vec3::y(),
            v: r * Vec3::z(),
            half_u: 0.5 * spec.patch_width,
            half_v: 0.5 * spec.patch_height,
        });
        for p in &template {
            points.push(pl.apply(p)?);
            normals.push(r * Vec3::x());
            instance.push(Some(m));
        }
    }
    let nd = spec.duplicate_points;
    for m in 0..spec.placements.len() {
        for m2 in m + 1..spec.placements.len() {
            for i in 0..nd {
                pairing.push((first_dup + m * nd + i, first_dup + m2 * nd + i));
            }
        }
    }

    let cos_inc = spec.max_incidence_deg.to_radians().cos();
    let noise = Normal::new(0.0, spec.sigma.max(0.0)).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let mut views = Vec::with_capacity(spec.cameras);
    let mut tracks: Vec<Vec<(ViewId, usize)>> = vec![Vec::new(); points.len()];
    for (vid, pose) in poses.iter().enumerate() {
        let c = pose.center();
        let mut visible: Vec<(usize, Vec2)> = Vec::new();
        for (pid, p) in points.iter().enumerate() {
            let to_cam = c - p;
            let dist = to_cam.norm();
            if dist > spec.max_depth || normals[pid].dot(&to_cam) < cos_inc * dist {
                continue;
            }
            let Ok(px) = crate::geometry::project(pose, &k, p) else { continue };
            if px.x < 0.0 || px.y < 0.0 || px.x >= spec.image_width || px.y >= spec.image_height {
                continue;
            }
            let own = instance[pid];
            if facades.iter().enumerate().any(|(m, f)| own != Some(m) && f.blocks(c, p)) {
                continue;
            }
            visible.push((pid, px));
        }
        visible.shuffle(&mut rng);
        let mut keypoints = Vec::with_capacity(visible.len());
        for (kp, (pid, px)) in visible.into_iter().enumerate() {
            let mut obs = px;
            if spec.sigma > 0.0 {
                obs += Vec2::new(noise.sample(&mut rng), noise.sample(&mut rng));
            }
            keypoints.push(obs);
            tracks[pid].push((vid, kp));
        }
        views.push(View::new(vid, k, keypoints));
    }

    let mut by_pair: BTreeMap<(ViewId, ViewId), Vec<(usize, usize)>> = BTreeMap::new();
    for obs in &tracks {
        for a in 0..obs.len() {
            for b in a + 1..obs.len() {
                let (x, y) = if obs[a].0 < obs[b].0 { (obs[a], obs[b]) } else { (obs[b], obs[a]) };
                by_pair.entry((x.0, y.0)).or_default().push((x.1, y.1));
            }
        }
    }
    let matches = by_pair
        .into_iter()
        .map(|((i, j), mut pairs)| {
            pairs.sort_unstable();
            Match {
                view_i: i,
                view_j: j,
                pairs,
            }
        })
        .collect();

    let truth = GroundTruth {
        poses: poses.iter().enumerate().map(|(v, p)| GtPose::from_pose(v, p)).collect(),
        points: points.iter().map(|p| [p.x, p.y, p.z]).collect(),
        instance,
        tracks,
        pairing,
        injected: Vec::new(),
    };
    Ok(SyntheticScene { views, matches, truth })
}

/// Cross-instance keypoint pairs a false match may connect: a keypoint
/// of one point of a pair in view `u` and a keypoint of the other point
/// in a different view `w`, where neither view sees both points.
pub fn eligible_mismatches(gt: &GroundTruth) -> Vec<InjectedMatch> {
    let mut out = Vec::new();
    for &(a, b) in &gt.pairing {
        let views_a: HashSet<ViewId> = gt.tracks[a].iter().map(|o| o.0).collect();
        let views_b: HashSet<ViewId> = gt.tracks[b].iter().map(|o| o.0).collect();
        for &(u, ka) in &gt.tracks[a] {
            if views_b.contains(&u) {
                continue;
            }
            for &(w, kb) in &gt.tracks[b] {
                if views_a.contains(&w) {
                    continue;
                }
                let m = if u < w {
                    InjectedMatch { view_i: u, keypoint_i: ka, view_j: w, keypoint_j: kb, point_i: a, point_j: b }
                } else {
                    InjectedMatch { view_i: w, keypoint_i: kb, view_j: u, keypoint_j: ka, point_i: b, point_j: a }
                };
                out.push(m);
            }
        }
    }
    out.sort_unstable();
    out
}

/// Adds false matches for `round(rho · N)` of the `N` eligible
/// cross-instance pairs, chosen uniformly without replacement, and
/// records them in `gt.injected`.
pub fn inject_mismatches(matches: &[Match], gt: &mut GroundTruth, rho: f64, seed: u64) -> Result<Vec<Match>> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::InvalidSpec("rho must lie in [0, 1)".into()));
    }
    let eligible = eligible_mismatches(gt);
    let count = (rho * eligible.len() as f64).round() as usize;
    if count == 0 {
        return Ok(matches.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d69_736d_6174_6368);
    let mut chosen: Vec<InjectedMatch> =
        rand::seq::index::sample(&mut rng, eligible.len(), count).into_iter().map(|i| eligible[i]).collect();
    chosen.sort_unstable();
    let mut by_pair: BTreeMap<(ViewId, ViewId), Vec<(usize, usize)>> =
        matches.iter().map(|m| ((m.view_i, m.view_j), m.pairs.clone())).collect();
    for m in &chosen {
        by_pair.entry((m.view_i, m.view_j)).or_default().push((m.keypoint_i, m.keypoint_j));
    }
    gt.injected.extend_from_slice(&chosen);
    gt.injected.sort_unstable();
    Ok(by_pair
        .into_iter()
        .map(|((i, j), mut pairs)| {
            pairs.sort_unstable();
            Match { view_i: i, view_j: j, pairs }
        })
        .collect())
}

/// `generate_scene` followed by mismatch injection at `spec.rho`.
pub fn synthesize(spec: &SceneSpec) -> Result<SyntheticScene> {
    let mut scene = generate_scene(spec)?;
    scene.matches = inject_mismatches(&scene.matches, &mut scene.truth, spec.rho, spec.seed)?;
    Ok(scene)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewError {
    pub view: ViewId,
    pub rotation_deg: f64,
    pub center: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub registered: usize,
    pub ground_truth_views: usize,
    pub rotation_mean_deg: f64,
    pub rotation_median_deg: f64,
    pub center_mean: f64,
    pub center_median: f64,
    pub center_mean_pct: f64,
    pub center_median_pct: f64,
    pub diameter: f64,
    pub per_view: Vec<ViewError>,
}

impl Metrics {
    /// Registered views whose centre error exceeds `pct` percent of the
    /// scene diameter.
    pub fn center_outliers(&self, pct: f64) -> usize {
        self.per_view.iter().filter(|e| e.center > pct / 100.0 * self.diameter).count()
    }
}

fn mean_median(v: &[f64]) -> (f64, f64) {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
    (s.iter().sum::<f64>() / n as f64, median)
}

/// Aligns the estimated camera centres to the true ones with a closed-form
/// similarity and reports per-camera rotation and centre errors.
pub fn evaluate_against_gt(recon: &Reconstruction, gt: &GroundTruth) -> Result<Metrics> {
    let truth = gt.pose_map();
    let common: Vec<ViewId> = recon.poses.keys().copied().filter(|v| truth.contains_key(v)).collect();
    if common.len() < 3 {
        return Err(Error::TooFewCommonViews(common.len()));
    }
    let est: Vec<Vec3> = common.iter().map(|v| *recon.poses[v].center()).collect();
    let tru: Vec<Vec3> = common.iter().map(|v| *truth[v].center()).collect();
    let g = umeyama(&est, &tru)?;
    let per_view: Vec<ViewError> = common
        .iter()
        .zip(&tru)
        .map(|(v, c)| {
            let p = g.transform_pose(&recon.poses[v]);
            ViewError {
                view: *v,
                rotation_deg: rotation_error(p.rotation(), truth[v].rotation()).to_degrees(),
                center: (p.center() - c).norm(),
            }
        })
        .collect();
    let rot: Vec<f64> = per_view.iter().map(|e| e.rotation_deg).collect();
    let cen: Vec<f64> = per_view.iter().map(|e| e.center).collect();
    let (rotation_mean_deg, rotation_median_deg) = mean_median(&rot);
    let (center_mean, center_median) = mean_median(&cen);
    let diameter = gt.diameter();
    Ok(Metrics {
        registered: common.len(),
        ground_truth_views: truth.len(),
        rotation_mean_deg,
        rotation_median_deg,
        center_mean,
        center_median,
        center_mean_pct: 100.0 * center_mean / diameter,
        center_median_pct: 100.0 * center_median / diameter,
        diameter,
        per_view,
    })
}

/// Ground-truth reconstruction of a scene: true poses and points with the
/// true observations (mismatches excluded). Point ids equal point indices.
pub fn ground_truth_reconstruction(scene: &SyntheticScene) -> Reconstruction {
    use crate::sfm::{Observation, Point3D};
    let mut r = Reconstruction::new(0);
    for p in &scene.truth.poses {
        r.poses.insert(p.view, p.pose());
        r.intrinsics.insert(p.view, scene.views[p.view].intrinsics);
    }
    for (pid, obs) in scene.truth.tracks.iter().enumerate() {
        if obs.len() < 2 {
            continue;
        }
        r.points.insert(pid, Point3D { position: Vec3::from(scene.truth.points[pid]), track: pid });
        for &(v, k) in obs {
            r.observations.push(Observation { view: v, keypoint: k, point: pid, pixel: scene.views[v].keypoints[k] });
        }
    }
    r
}
