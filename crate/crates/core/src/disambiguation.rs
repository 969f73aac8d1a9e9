//! Gini–Simpson scoring of tracks, ambiguous-community flagging and the
//! dual-pose consistency correction of ambiguous image clusters.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use log::{debug, info, warn};
use serde::Serialize;

use crate::community::CommunityLabeling;
use crate::config::PipelineConfig;
use crate::correspondence::{Track, TrackGraph, TrackId, View, ViewId};
use crate::error::{Error, Result};
use crate::geometry::{rotation_error, translation_direction_error, CameraPose};
use crate::sfm::incremental::IncrementalMapper;
use crate::sfm::ClusterContext;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GsiReport {
    pub track: TrackId,
    /// Foreign community → number of adjacent tracks in it.
    pub counts: BTreeMap<usize, usize>,
    pub n_adj: usize,
    pub n_species: usize,
    pub gsi: f64,
}

/// `gsi = 1 − Σ (n_i / N_adj)²` over the foreign communities among the
/// track's neighbours; 0 without foreign neighbours.
pub fn gini_simpson_index(track: TrackId, graph: &TrackGraph, labeling: &CommunityLabeling) -> Result<GsiReport> {
    let own = labeling.label_of(track).ok_or(Error::UnknownTrack(track))?;
    let neighbors = graph.neighbors(track).ok_or(Error::UnknownTrack(track))?;
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for n in neighbors {
        let Some(l) = labeling.label_of(n) else { continue };
        if l != own {
            *counts.entry(l).or_insert(0) += 1;
        }
    }
    let n_adj: usize = counts.values().sum();
    let gsi = if n_adj == 0 {
        0.0
    } else {
        1.0 - counts.values().map(|&c| (c as f64 / n_adj as f64).powi(2)).sum::<f64>()
    };
    Ok(GsiReport {
        track,
        n_species: counts.len(),
        counts,
        n_adj,
        gsi,
    })
}

pub fn all_gsi(graph: &TrackGraph, labeling: &CommunityLabeling) -> Result<Vec<GsiReport>> {
    labeling.tracks.iter().map(|&t| gini_simpson_index(t, graph, labeling)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AmbiguityVerdict {
    pub community: usize,
    pub members: usize,
    pub erroneous: usize,
    pub erroneous_ratio: f64,
    pub ambiguous: bool,
}

/// A track is potentially erroneous when its GSI exceeds `tau_gs`; a
/// community is ambiguous when more than `xi` of its tracks are.
pub fn flag_ambiguous(labeling: &CommunityLabeling, reports: &[GsiReport], config: &PipelineConfig) -> Vec<AmbiguityVerdict> {
    let gsi: HashMap<TrackId, f64> = reports.iter().map(|r| (r.track, r.gsi)).collect();
    let mut members = vec![0usize; labeling.count];
    let mut erroneous = vec![0usize; labeling.count];
    for (t, &l) in labeling.tracks.iter().zip(&labeling.labels) {
        members[l] += 1;
        if gsi.get(t).is_some_and(|&g| g > config.tau_gs) {
            erroneous[l] += 1;
        }
    }
    (0..labeling.count)
        .map(|c| {
            let ratio = if members[c] == 0 { 0.0 } else { erroneous[c] as f64 / members[c] as f64 };
            AmbiguityVerdict {
                community: c,
                members: members[c],
                erroneous: erroneous[c],
                erroneous_ratio: ratio,
                ambiguous: ratio > config.xi,
            }
        })
        .collect()
}

/// Poses agree when their rotations differ by at most `eps_r` and their
/// translation directions by at most `eps_t` (radians).
pub fn check_pose_consistency(omega1: &CameraPose, omega2: &CameraPose, config: &PipelineConfig) -> Result<bool> {
    let er = rotation_error(omega1.rotation(), omega2.rotation());
    let et = translation_direction_error(omega1.translation(), omega2.translation())?;
    Ok(er <= config.eps_r && et <= config.eps_t)
}

/// Segment of every track: the community label for sampled tracks, and a
/// majority vote of the sampled tracks sharing a superpixel for the rest
/// (adjacent superpixels when the own ones hold none). Ties go to the
/// smaller label.
pub fn assign_track_segments(tracks: &[Track], labeling: &CommunityLabeling, views: &[View]) -> HashMap<TrackId, usize> {
    let view_of: HashMap<ViewId, &View> = views.iter().map(|v| (v.id, v)).collect();
    let mut cells: HashMap<(ViewId, u32), BTreeMap<usize, usize>> = HashMap::new();
    let mut out = HashMap::new();
    for t in tracks {
        let Some(s) = labeling.label_of(t.id) else { continue };
        out.insert(t.id, s);
        for &(v, k) in &t.observations {
            if let Some(l) = view_of.get(&v).and_then(|view| view.label(k)) {
                *cells.entry((v, l)).or_default().entry(s).or_insert(0) += 1;
            }
        }
    }
    let vote = |votes: &BTreeMap<usize, usize>| votes.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|x| *x.0);
    for t in tracks {
        if out.contains_key(&t.id) {
            continue;
        }
        let mut own: BTreeMap<usize, usize> = BTreeMap::new();
        let mut near: BTreeMap<usize, usize> = BTreeMap::new();
        for &(v, k) in &t.observations {
            let Some(view) = view_of.get(&v) else { continue };
            let (Some(l), Some(sp)) = (view.label(k), view.superpixels.as_ref()) else { continue };
            if let Some(c) = cells.get(&(v, l)) {
                for (s, n) in c {
                    *own.entry(*s).or_insert(0) += n;
                }
            }
            for nl in sp.neighbors(l) {
                if let Some(c) = cells.get(&(v, nl)) {
                    for (s, n) in c {
                        *near.entry(*s).or_insert(0) += n;
                    }
                }
            }
        }
        if let Some(s) = vote(&own).or_else(|| vote(&near)) {
            out.insert(t.id, s);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct RemovedMatch {
    pub view: ViewId,
    pub keypoint: usize,
    pub segment: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConsistencyCheck {
    pub view: ViewId,
    pub rotation_error: f64,
    pub direction_error: f64,
    pub consistent: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorrectionOutcome {
    pub segment: usize,
    /// Pairwise disjoint, in the order they were grown.
    pub sub_clusters: Vec<BTreeSet<ViewId>>,
    /// Views of the input cluster that ended in no sub-cluster.
    pub rejected: BTreeSet<ViewId>,
    pub checks: Vec<ConsistencyCheck>,
    /// Views registered on primary matches alone.
    pub warnings: Vec<ViewId>,
}

/// Grows consistent sub-clusters of an ambiguous cluster. Each candidate
/// view is posed twice, from matches to primary points (tracks of the
/// segment) and from matches to auxiliary points (tracks of other,
/// unambiguous segments); disagreeing views are rejected from the current
/// sub-cluster and seed the next one.
pub fn correct_ambiguous_cluster(
    cluster_views: &BTreeSet<ViewId>,
    segment: usize,
    ctx: &ClusterContext,
    track_segment: &HashMap<TrackId, usize>,
    ambiguous: &BTreeSet<usize>,
) -> Result<CorrectionOutcome> {
    let primary = |t: TrackId| track_segment.get(&t) == Some(&segment);
    let auxiliary = |t: TrackId| track_segment.get(&t).is_some_and(|s| *s != segment && !ambiguous.contains(s));
    let mut remaining = cluster_views.clone();
    let mut out = CorrectionOutcome {
        segment,
        sub_clusters: Vec::new(),
        rejected: BTreeSet::new(),
        checks: Vec::new(),
        warnings: Vec::new(),
    };
    while remaining.len() >= 2 {
        let mut mapper = IncrementalMapper::new(*ctx, &remaining, out.sub_clusters.len());
        if let Err(e) = mapper.initialize(&BTreeSet::new()) {
            if out.sub_clusters.is_empty() {
                return Err(e);
            }
            debug!("segment {segment}: no further sub-cluster: {e}");
            break;
        }
        let mut rejected_here: BTreeSet<ViewId> = BTreeSet::new();
        let mut deferred: BTreeSet<ViewId> = BTreeSet::new();
        // unverifiable views are only admitted once no later sub-cluster could take them
        let mut last_round = false;
        loop {
            let mut cands: Vec<(bool, usize, ViewId)> = mapper
                .unregistered()
                .filter(|v| !rejected_here.contains(v))
                .map(|v| (deferred.contains(&v), mapper.correspondences(v, &primary).len(), v))
                .filter(|c| c.1 >= 4)
                .collect();
            cands.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2)));
            let deferred_before = deferred.clone();
            let mut registered = None;
            for (_, _, v) in cands {
                let m1 = mapper.correspondences(v, &primary);
                let Ok(omega1) = mapper.estimate_pose(v, &m1) else { continue };
                let m2 = mapper.correspondences(v, &auxiliary);
                let omega2 = if m2.len() >= 4 { mapper.estimate_pose(v, &m2).ok() } else { None };
                match omega2 {
                    None => {
                        if last_round && deferred_before.contains(&v) {
                            warn!("segment {segment}: view {v} accepted without auxiliary verification");
                            out.warnings.push(v);
                            let all = mapper.correspondences(v, &|_| true);
                            let pose = mapper.estimate_pose(v, &all).map(|r| r.pose).unwrap_or(omega1.pose);
                            mapper.register(v, pose);
                            registered = Some(v);
                            break;
                        }
                        deferred.insert(v);
                    }
                    Some(omega2) => {
                        let er = rotation_error(omega1.pose.rotation(), omega2.pose.rotation());
                        let et = translation_direction_error(omega1.pose.translation(), omega2.pose.translation())
                            .unwrap_or(std::f64::consts::PI);
                        let consistent = er <= ctx.config.eps_r && et <= ctx.config.eps_t;
                        out.checks.push(ConsistencyCheck {
                            view: v,
                            rotation_error: er,
                            direction_error: et,
                            consistent,
                        });
                        if !consistent {
                            info!("segment {segment}: view {v} rejected (e_r {er:.3}, e_t {et:.3})");
                            rejected_here.insert(v);
                            continue;
                        }
                        let all = mapper.correspondences(v, &|_| true);
                        let pose = mapper.estimate_pose(v, &all).map(|r| r.pose).unwrap_or(omega2.pose);
                        mapper.register(v, pose);
                        registered = Some(v);
                        break;
                    }
                }
            }
            if registered.is_some() || deferred != deferred_before {
                continue;
            }
            let pending = deferred.iter().any(|v| !mapper.recon.poses.contains_key(v));
            if last_round || !pending {
                break;
            }
            let leftover: BTreeSet<ViewId> =
                remaining.iter().filter(|v| !mapper.recon.poses.contains_key(v)).copied().collect();
            let next = leftover.len() >= 2
                && IncrementalMapper::new(*ctx, &leftover, out.sub_clusters.len() + 1)
                    .initialize(&BTreeSet::new())
                    .is_ok();
            if next {
                break;
            }
            last_round = true;
        }
        let views: BTreeSet<ViewId> = mapper.recon.poses.keys().copied().collect();
        remaining = remaining.difference(&views).copied().collect();
        out.sub_clusters.push(views);
    }
    out.rejected = remaining;
    Ok(out)
}

/// Splits every segment track whose observations span several
/// sub-clusters of its segment: the piece in the sub-cluster holding most
/// of its observations keeps the id, the others become new tracks, and
/// observations in views of no sub-cluster are dropped. Returns the new
/// track list and the detached observations.
pub fn apply_corrections(
    tracks: &[Track],
    outcomes: &[CorrectionOutcome],
    track_segment: &mut HashMap<TrackId, usize>,
) -> (Vec<Track>, Vec<RemovedMatch>) {
    let by_segment: BTreeMap<usize, &CorrectionOutcome> = outcomes.iter().map(|o| (o.segment, o)).collect();
    let mut out: Vec<Track> = Vec::with_capacity(tracks.len());
    let mut extra: Vec<(Vec<(ViewId, usize)>, usize)> = Vec::new();
    let mut removed = Vec::new();
    for t in tracks {
        let seg = track_segment.get(&t.id).copied();
        let Some(o) = seg.and_then(|s| by_segment.get(&s)) else {
            out.push(t.clone());
            continue;
        };
        let sub_of = |v: ViewId| o.sub_clusters.iter().position(|c| c.contains(&v));
        let mut pieces: BTreeMap<usize, Vec<(ViewId, usize)>> = BTreeMap::new();
        let mut outside = Vec::new();
        for &(v, k) in &t.observations {
            match sub_of(v) {
                Some(c) => pieces.entry(c).or_default().push((v, k)),
                None => outside.push((v, k)),
            }
        }
        if pieces.len() <= 1 {
            out.push(t.clone());
            continue;
        }
        let keep = *pieces
            .iter()
            .max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(a.0)))
            .expect("non-empty")
            .0;
        let segment = o.segment;
        for &(v, k) in &outside {
            removed.push(RemovedMatch { view: v, keypoint: k, segment });
        }
        let mut kept = Track {
            id: t.id,
            observations: Vec::new(),
        };
        for (c, obs) in pieces {
            if c == keep {
                kept.observations = obs;
            } else {
                for &(v, k) in &obs {
                    removed.push(RemovedMatch { view: v, keypoint: k, segment });
                }
                extra.push((obs, segment));
            }
        }
        out.push(kept);
    }
    let mut next = tracks.iter().map(|t| t.id + 1).max().unwrap_or(0);
    for (obs, segment) in extra {
        if obs.len() >= 2 {
            track_segment.insert(next, segment);
            out.push(Track {
                id: next,
                observations: obs,
            });
            next += 1;
        }
    }
    out.retain(|t| t.observations.len() >= 2);
    removed.sort();
    (out, removed)
}
