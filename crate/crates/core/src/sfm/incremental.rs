//! Per-cluster incremental reconstruction and the cluster overlap merge.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use log::{debug, info};

use super::bundle::{bundle_adjust, bundle_adjust_subset, BaOptions};
use super::pnp::{estimate_pose_pnp, PnpOptions, PnpResult};
use super::triangulation::{triangulate_track, TriangulationOptions};
use super::two_view::{initialize_two_view, PairMatch, TwoViewOptions};
use super::{Observation, Point3D, PointId, Reconstruction};
use crate::config::PipelineConfig;
use crate::correspondence::{Track, TrackId, View, ViewGraph, ViewId};
use crate::error::{Error, Result};
use crate::geometry::{CameraPose, Vec2, Vec3};

/// A set of views reconstructed together.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViewCluster {
    pub id: usize,
    /// Segment the cluster was derived from, if any.
    pub segment: Option<usize>,
    pub views: BTreeSet<ViewId>,
}

/// Read-only inputs shared by every cluster reconstruction.
#[derive(Clone, Copy)]
pub struct ClusterContext<'a> {
    pub views: &'a [View],
    pub tracks: &'a [Track],
    pub view_graph: &'a ViewGraph,
    pub config: &'a PipelineConfig,
}

impl<'a> ClusterContext<'a> {
    pub fn ba_options(&self) -> BaOptions {
        BaOptions {
            max_iterations: self.config.ba_max_iterations,
            huber_px: self.config.huber_px,
            ..Default::default()
        }
    }

    pub fn pnp_options(&self, view: ViewId) -> PnpOptions {
        PnpOptions {
            threshold_px: self.config.ransac_threshold_px,
            confidence: self.config.ransac_confidence,
            max_iterations: self.config.ransac_max_iterations,
            min_inliers: self.config.min_pnp_inliers,
            seed: self.config.seed ^ (view as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        }
    }

    pub fn two_view_options(&self, i: ViewId, j: ViewId) -> TwoViewOptions {
        TwoViewOptions {
            threshold_px: self.config.ransac_threshold_px,
            confidence: self.config.ransac_confidence,
            max_iterations: self.config.ransac_max_iterations,
            seed: self.config.seed ^ ((i as u64) << 32 | j as u64),
            ba: self.ba_options(),
            ..Default::default()
        }
    }
}

/// Minimum shared points for a camera to join the local BA window.
const LOCAL_BA_COVISIBILITY: usize = 20;
/// Initial pairs tried before giving up.
const MAX_INIT_ATTEMPTS: usize = 30;

pub(crate) struct IncrementalMapper<'a> {
    pub ctx: ClusterContext<'a>,
    pub views: BTreeSet<ViewId>,
    view_data: HashMap<ViewId, &'a View>,
    /// Track observations restricted to the cluster views.
    view_tracks: BTreeMap<ViewId, Vec<(TrackId, usize)>>,
    track_obs: HashMap<TrackId, Vec<(ViewId, usize)>>,
    pub recon: Reconstruction,
    last_global: usize,
}

impl<'a> IncrementalMapper<'a> {
    pub fn new(ctx: ClusterContext<'a>, views: &BTreeSet<ViewId>, id: usize) -> Self {
        let view_data: HashMap<ViewId, &View> =
            ctx.views.iter().filter(|v| views.contains(&v.id)).map(|v| (v.id, v)).collect();
        let mut view_tracks: BTreeMap<ViewId, Vec<(TrackId, usize)>> = BTreeMap::new();
        let mut track_obs: HashMap<TrackId, Vec<(ViewId, usize)>> = HashMap::new();
        for t in ctx.tracks {
            let obs: Vec<(ViewId, usize)> = t.observations.iter().copied().filter(|(v, _)| views.contains(v)).collect();
            if obs.len() < 2 {
                continue;
            }
            for &(v, k) in &obs {
                view_tracks.entry(v).or_default().push((t.id, k));
            }
            track_obs.insert(t.id, obs);
        }
        IncrementalMapper {
            ctx,
            views: views.clone(),
            view_data,
            view_tracks,
            track_obs,
            recon: Reconstruction::new(id),
            last_global: 0,
        }
    }

    /// Continues from an existing model over `views`.
    pub fn resume(ctx: ClusterContext<'a>, views: &BTreeSet<ViewId>, recon: Reconstruction) -> Self {
        let mut m = Self::new(ctx, views, recon.id);
        m.last_global = recon.num_registered();
        m.recon = recon;
        m
    }

    pub fn pixel(&self, view: ViewId, keypoint: usize) -> Vec2 {
        self.view_data[&view].keypoints[keypoint]
    }

    pub fn pair_matches(&self, i: ViewId, j: ViewId) -> Vec<PairMatch> {
        let Some(ti) = self.view_tracks.get(&i) else { return Vec::new() };
        ti.iter()
            .filter_map(|&(t, ki)| {
                let kj = self.track_obs[&t].iter().find(|(v, _)| *v == j)?.1;
                Some(PairMatch {
                    track: t,
                    keypoint_i: ki,
                    keypoint_j: kj,
                    pixel_i: self.pixel(i, ki),
                    pixel_j: self.pixel(j, kj),
                })
            })
            .collect()
    }

    /// Two-view model from the heaviest view-graph edge that yields one.
    pub fn initialize(&mut self, excluded: &BTreeSet<ViewId>) -> Result<(ViewId, ViewId)> {
        let allowed: BTreeSet<ViewId> = self.views.difference(excluded).copied().collect();
        let edges = self.ctx.view_graph.sorted_subgraph_edges(&allowed);
        let mut last = String::from("no view-graph edge inside the cluster");
        for e in edges.into_iter().take(MAX_INIT_ATTEMPTS) {
            let m = self.pair_matches(e.i, e.j);
            if m.len() < 8 {
                continue;
            }
            let ki = self.view_data[&e.i].intrinsics;
            let kj = self.view_data[&e.j].intrinsics;
            match initialize_two_view((e.i, e.j), &m, (&ki, &kj), &self.ctx.two_view_options(e.i, e.j)) {
                Ok(mut r) => {
                    r.id = self.recon.id;
                    self.recon = r;
                    self.last_global = 2;
                    debug!("cluster {}: initialized from ({}, {})", self.recon.id, e.i, e.j);
                    return Ok((e.i, e.j));
                }
                Err(err) => last = format!("({}, {}): {err}", e.i, e.j),
            }
        }
        Err(Error::InitializationFailed(last))
    }

    pub fn unregistered(&self) -> impl Iterator<Item = ViewId> + '_ {
        self.views.iter().copied().filter(|v| !self.recon.is_registered(*v))
    }

    /// 2D-3D correspondences of a view against triangulated points whose
    /// track passes `keep`.
    pub fn correspondences(&self, view: ViewId, keep: &dyn Fn(TrackId) -> bool) -> Vec<(TrackId, usize, Vec2, Vec3)> {
        let Some(ts) = self.view_tracks.get(&view) else { return Vec::new() };
        ts.iter()
            .filter(|(t, _)| keep(*t))
            .filter_map(|&(t, k)| Some((t, k, self.pixel(view, k), self.recon.points.get(&t)?.position)))
            .collect()
    }

    pub fn estimate_pose(&self, view: ViewId, corr: &[(TrackId, usize, Vec2, Vec3)]) -> Result<PnpResult> {
        let c: Vec<(Vec2, Vec3)> = corr.iter().map(|(_, _, px, x)| (*px, *x)).collect();
        estimate_pose_pnp(&c, &self.view_data[&view].intrinsics, &self.ctx.pnp_options(view))
    }

    /// Adds a registered view: inlier observations of existing points,
    /// newly triangulated tracks, local BA and, on enough growth, global BA.
    pub fn register(&mut self, view: ViewId, pose: CameraPose) {
        let k = self.view_data[&view].intrinsics;
        self.recon.poses.insert(view, pose);
        self.recon.intrinsics.insert(view, k);
        let thr = self.ctx.config.ransac_threshold_px;
        let tri = TriangulationOptions {
            max_residual_px: thr,
            ..Default::default()
        };
        let tracks = self.view_tracks.get(&view).cloned().unwrap_or_default();
        for (t, kp) in tracks {
            let px = self.pixel(view, kp);
            if self.recon.points.contains_key(&t) {
                let obs = Observation {
                    view,
                    keypoint: kp,
                    point: t,
                    pixel: px,
                };
                if self.recon.residual(&obs).is_some_and(|r| r < thr) {
                    self.recon.observations.push(obs);
                }
                continue;
            }
            let registered: Vec<(ViewId, usize)> =
                self.track_obs[&t].iter().copied().filter(|(v, _)| self.recon.is_registered(*v)).collect();
            if registered.len() < 2 {
                continue;
            }
            let obs: Vec<(CameraPose, crate::geometry::Intrinsics, Vec2)> = registered
                .iter()
                .map(|&(v, kk)| (self.recon.poses[&v], self.recon.intrinsics[&v], self.pixel(v, kk)))
                .collect();
            let Ok(x) = triangulate_track(&obs, &tri) else { continue };
            self.recon.points.insert(t, Point3D { position: x, track: t });
            for (v, kk) in registered {
                let px = self.pixel(v, kk);
                self.recon.observations.push(Observation {
                    view: v,
                    keypoint: kk,
                    point: t,
                    pixel: px,
                });
            }
        }
        self.local_bundle_adjust(view);
        let n = self.recon.num_registered();
        if n as f64 >= 1.1 * self.last_global as f64 {
            self.global_bundle_adjust();
        }
    }

    fn local_bundle_adjust(&mut self, view: ViewId) {
        let by_point = self.recon.observations_by_point();
        let points: BTreeSet<PointId> = self
            .recon
            .observations
            .iter()
            .filter(|o| o.view == view)
            .map(|o| o.point)
            .collect();
        let mut shared: BTreeMap<ViewId, usize> = BTreeMap::new();
        for p in &points {
            for &i in &by_point[p] {
                *shared.entry(self.recon.observations[i].view).or_insert(0) += 1;
            }
        }
        let anchor = self.recon.anchor_view();
        let cams: BTreeSet<ViewId> = shared
            .into_iter()
            .filter(|&(v, c)| v == view || c >= LOCAL_BA_COVISIBILITY)
            .map(|(v, _)| v)
            .filter(|v| Some(*v) != anchor)
            .collect();
        let (r, _) = bundle_adjust_subset(&self.recon, &cams, &points, &self.ctx.ba_options());
        self.recon = r;
    }

    /// Rebuilds every point from the registered observations of its track.
    pub fn retriangulate(&mut self, max_residual_px: f64) {
        let tri = TriangulationOptions {
            max_residual_px,
            ..Default::default()
        };
        self.recon.points.clear();
        self.recon.observations.clear();
        let mut ids: Vec<TrackId> = self.track_obs.keys().copied().collect();
        ids.sort_unstable();
        for t in ids {
            let registered: Vec<(ViewId, usize)> =
                self.track_obs[&t].iter().copied().filter(|(v, _)| self.recon.is_registered(*v)).collect();
            if registered.len() < 2 {
                continue;
            }
            let obs: Vec<(CameraPose, crate::geometry::Intrinsics, Vec2)> = registered
                .iter()
                .map(|&(v, k)| (self.recon.poses[&v], self.recon.intrinsics[&v], self.pixel(v, k)))
                .collect();
            let Ok(x) = triangulate_track(&obs, &tri) else { continue };
            self.recon.points.insert(t, Point3D { position: x, track: t });
            for (v, k) in registered {
                let pixel = self.pixel(v, k);
                self.recon.observations.push(Observation {
                    view: v,
                    keypoint: k,
                    point: t,
                    pixel,
                });
            }
        }
    }

    pub fn global_bundle_adjust(&mut self) {
        let (r, _) = bundle_adjust(&self.recon, &self.ctx.ba_options());
        self.recon = r;
        self.recon.filter_observations(self.ctx.config.ransac_threshold_px);
        self.last_global = self.recon.num_registered();
    }

    /// Tries the unregistered views in order of most 2D-3D matches and
    /// registers the first one PnP accepts. Returns the view registered.
    pub fn register_next(&mut self, skip: &BTreeSet<ViewId>) -> Option<ViewId> {
        let mut cands: Vec<(usize, ViewId)> = self
            .unregistered()
            .filter(|v| !skip.contains(v))
            .map(|v| (self.correspondences(v, &|_| true).len(), v))
            .filter(|&(c, _)| c >= 4)
            .collect();
        cands.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        for (_, v) in cands {
            let corr = self.correspondences(v, &|_| true);
            match self.estimate_pose(v, &corr) {
                Ok(res) => {
                    self.register(v, res.pose);
                    return Some(v);
                }
                Err(e) => debug!("cluster {}: view {v} not registered: {e}", self.recon.id),
            }
        }
        None
    }

    pub fn finish(mut self) -> Reconstruction {
        self.global_bundle_adjust();
        self.recon.prune_points();
        self.recon.normalize_gauge();
        self.recon
    }
}

/// Incremental SfM over the views of one cluster, using every track
/// observation that falls inside the cluster.
pub fn reconstruct_cluster(cluster: &ViewCluster, ctx: &ClusterContext) -> Result<Reconstruction> {
    let mut mapper = IncrementalMapper::new(*ctx, &cluster.views, cluster.id);
    mapper.initialize(&BTreeSet::new())?;
    let skip = BTreeSet::new();
    while mapper.register_next(&skip).is_some() {}
    let recon = mapper.finish();
    info!(
        "cluster {}: {}/{} views registered, {} points",
        cluster.id,
        recon.num_registered(),
        cluster.views.len(),
        recon.points.len()
    );
    Ok(recon)
}

/// Registers every further view of `views` that PnP accepts against an
/// existing model. Returns the grown model and the views added.
pub fn register_remaining(
    recon: Reconstruction,
    views: &BTreeSet<ViewId>,
    ctx: &ClusterContext,
) -> (Reconstruction, Vec<ViewId>) {
    let mut mapper = IncrementalMapper::resume(*ctx, views, recon);
    let skip = BTreeSet::new();
    let mut added = Vec::new();
    while let Some(v) = mapper.register_next(&skip) {
        added.push(v);
    }
    if added.is_empty() {
        return (mapper.recon, added);
    }
    (mapper.finish(), added)
}

/// Re-triangulates every track of `views` against the poses of `recon`,
/// keeping points whose worst residual stays under `max_residual_px`.
pub fn retriangulate(
    recon: Reconstruction,
    views: &BTreeSet<ViewId>,
    ctx: &ClusterContext,
    max_residual_px: f64,
) -> Reconstruction {
    let mut mapper = IncrementalMapper::resume(*ctx, views, recon);
    mapper.retriangulate(max_residual_px);
    mapper.recon
}

/// Sorts clusters by size (descending, ties by id) and unions any pair
/// sharing more than `min_common_images` views, until nothing changes.
/// Output ids are renumbered from 0 in the final order.
pub fn merge_overlapping_clusters(clusters: Vec<ViewCluster>, min_common_images: usize) -> Vec<ViewCluster> {
    let mut cs = clusters;
    loop {
        cs.sort_by(|a, b| b.views.len().cmp(&a.views.len()).then(a.id.cmp(&b.id)));
        let mut changed = false;
        'outer: for i in 0..cs.len() {
            for j in i + 1..cs.len() {
                if cs[i].views.intersection(&cs[j].views).count() > min_common_images {
                    let other = cs.remove(j);
                    cs[i].views.extend(other.views);
                    if cs[i].segment != other.segment {
                        cs[i].segment = None;
                    }
                    changed = true;
                    break 'outer;
                }
            }
        }
        if !changed {
            break;
        }
    }
    for (i, c) in cs.iter_mut().enumerate() {
        c.id = i;
    }
    cs
}
