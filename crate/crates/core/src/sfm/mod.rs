//! Incremental reconstruction: two-view initialization, PnP registration,
//! triangulation and bundle adjustment.

pub mod bundle;
pub mod incremental;
pub mod pnp;
pub mod ransac;
pub mod triangulation;
pub mod two_view;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::correspondence::{TrackId, ViewId};
use crate::geometry::{project, CameraPose, Intrinsics, SimilarityTransform, Vec2, Vec3};

pub use bundle::{bundle_adjust, BaOptions, BaReport};
pub use incremental::{
    merge_overlapping_clusters, reconstruct_cluster, register_remaining, retriangulate, ClusterContext, ViewCluster,
};
pub use pnp::{estimate_pose_pnp, PnpOptions, PnpResult};
pub use triangulation::{triangulate_track, TriangulationOptions};
pub use two_view::initialize_two_view;

pub type PointId = usize;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point3D {
    pub position: Vec3,
    pub track: TrackId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub view: ViewId,
    pub keypoint: usize,
    pub point: PointId,
    pub pixel: Vec2,
}

/// One partial model. Point ids equal the id of the track they were
/// triangulated from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Reconstruction {
    pub id: usize,
    pub poses: BTreeMap<ViewId, CameraPose>,
    pub intrinsics: BTreeMap<ViewId, Intrinsics>,
    pub points: BTreeMap<PointId, Point3D>,
    pub observations: Vec<Observation>,
    /// Views of the initial pair: the first is held at the identity pose
    /// and the centre of the second at unit distance.
    pub gauge: Option<(ViewId, ViewId)>,
}

impl Reconstruction {
    pub fn new(id: usize) -> Self {
        Reconstruction {
            id,
            ..Default::default()
        }
    }

    pub fn is_registered(&self, view: ViewId) -> bool {
        self.poses.contains_key(&view)
    }

    pub fn registered_views(&self) -> Vec<ViewId> {
        self.poses.keys().copied().collect()
    }

    pub fn num_registered(&self) -> usize {
        self.poses.len()
    }

    /// Camera held fixed during bundle adjustment.
    pub fn anchor_view(&self) -> Option<ViewId> {
        self.gauge
            .map(|g| g.0)
            .filter(|v| self.poses.contains_key(v))
            .or_else(|| self.poses.keys().next().copied())
    }

    pub fn observations_by_point(&self) -> HashMap<PointId, Vec<usize>> {
        let mut map: HashMap<PointId, Vec<usize>> = HashMap::new();
        for (i, o) in self.observations.iter().enumerate() {
            map.entry(o.point).or_default().push(i);
        }
        map
    }

    pub fn observations_by_view(&self) -> BTreeMap<ViewId, Vec<usize>> {
        let mut map: BTreeMap<ViewId, Vec<usize>> = BTreeMap::new();
        for (i, o) in self.observations.iter().enumerate() {
            map.entry(o.view).or_default().push(i);
        }
        map
    }

    /// Reprojection error of one observation, `None` when the point is
    /// behind the camera.
    pub fn residual(&self, obs: &Observation) -> Option<f64> {
        let pose = self.poses.get(&obs.view)?;
        let k = self.intrinsics.get(&obs.view)?;
        let p = self.points.get(&obs.point)?;
        project(pose, k, &p.position).ok().map(|px| (px - obs.pixel).norm())
    }

    pub fn rms_reprojection(&self) -> f64 {
        if self.observations.is_empty() {
            return 0.0;
        }
        let mut sum = 0.0;
        for o in &self.observations {
            let r = self.residual(o).unwrap_or(f64::INFINITY);
            sum += r * r;
        }
        (sum / self.observations.len() as f64).sqrt()
    }

    pub fn mean_reprojection(&self) -> f64 {
        if self.observations.is_empty() {
            return 0.0;
        }
        self.observations
            .iter()
            .map(|o| self.residual(o).unwrap_or(f64::INFINITY))
            .sum::<f64>()
            / self.observations.len() as f64
    }

    /// Drops observations with residual above `max_px` (or behind the
    /// camera), then points left with fewer than two observations.
    /// Returns the number of observations removed.
    pub fn filter_observations(&mut self, max_px: f64) -> usize {
        let before = self.observations.len();
        let keep: Vec<bool> = self
            .observations
            .iter()
            .map(|o| self.residual(o).is_some_and(|r| r <= max_px))
            .collect();
        let mut it = keep.iter();
        self.observations.retain(|_| *it.next().unwrap());
        let removed = before - self.observations.len();
        self.prune_points();
        removed
    }

    /// Removes points with fewer than two observations together with
    /// their remaining observations.
    pub fn prune_points(&mut self) {
        let mut counts: HashMap<PointId, usize> = HashMap::new();
        for o in &self.observations {
            *counts.entry(o.point).or_insert(0) += 1;
        }
        self.points.retain(|id, _| counts.get(id).copied().unwrap_or(0) >= 2);
        let points = &self.points;
        self.observations.retain(|o| points.contains_key(&o.point));
    }

    /// Applies a similarity to the whole model.
    pub fn transform(&mut self, t: &SimilarityTransform) {
        for pose in self.poses.values_mut() {
            *pose = t.transform_pose(pose);
        }
        for p in self.points.values_mut() {
            p.position = t.apply(&p.position);
        }
    }

    /// Re-imposes the gauge: anchor camera at identity, second gauge
    /// camera centre at unit distance.
    pub fn normalize_gauge(&mut self) {
        let Some((a, b)) = self.gauge else { return };
        let (Some(pa), Some(pb)) = (self.poses.get(&a).copied(), self.poses.get(&b).copied()) else {
            return;
        };
        // world -> anchor camera frame is a rigid similarity
        let to_anchor = SimilarityTransform {
            rotation: *pa.rotation(),
            translation: *pa.translation(),
            scale: 1.0,
        };
        let baseline = (to_anchor.apply(pb.center())).norm();
        if baseline < 1e-12 {
            return;
        }
        let scale = SimilarityTransform {
            rotation: crate::geometry::Mat3::identity(),
            translation: Vec3::zeros(),
            scale: 1.0 / baseline,
        };
        self.transform(&scale.compose(&to_anchor));
    }

    /// Checks the structural invariants; returns a description of the
    /// first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut counts: HashMap<PointId, usize> = HashMap::new();
        let mut seen: BTreeSet<(ViewId, PointId)> = BTreeSet::new();
        for o in &self.observations {
            if !self.poses.contains_key(&o.view) {
                return Err(format!("observation in unregistered view {}", o.view));
            }
            if !self.points.contains_key(&o.point) {
                return Err(format!("observation of missing point {}", o.point));
            }
            if !seen.insert((o.view, o.point)) {
                return Err(format!("point {} observed twice in view {}", o.point, o.view));
            }
            *counts.entry(o.point).or_insert(0) += 1;
        }
        for id in self.points.keys() {
            if counts.get(id).copied().unwrap_or(0) < 2 {
                return Err(format!("point {id} has fewer than two observations"));
            }
        }
        for (v, pose) in &self.poses {
            if !pose.is_valid(1e-9) {
                return Err(format!("pose of view {v} is not a valid rigid transform"));
            }
            if !self.intrinsics.contains_key(v) {
                return Err(format!("view {v} has no intrinsics"));
            }
        }
        if !self.mean_reprojection().is_finite() {
            return Err("mean reprojection error is not finite".into());
        }
        Ok(())
    }
}
