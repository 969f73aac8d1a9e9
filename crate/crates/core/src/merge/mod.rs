//! Alignment of partial reconstructions: closed-form SIM(3) initialization
//! from cross-model camera pairs, bidirectional refinement and MST merging.

mod cost;
mod mst;

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::correspondence::{TrackId, ViewGraph, ViewId};
use crate::error::{Error, Result};
use crate::geometry::{project_to_rotation, CrossPair, Mat3, SimilarityTransform, Vec3};
use crate::sfm::Reconstruction;

pub use cost::{bidirectional_cost, cost_gradient, numeric_gradient, refine_alignment, retract, CostReport, RefineOptions};
pub use mst::{components, final_bundle_adjust, merge_all, MergeOptions};

/// A track triangulated in both models, with the cross-model camera pairs
/// observing it (indices into the alignment's pair list).
#[derive(Clone, Debug, PartialEq)]
pub struct CrossCorrespondence {
    pub track: TrackId,
    pub point_a: Vec3,
    pub point_b: Vec3,
    pub pairs: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairwiseAlignment {
    pub a: usize,
    pub b: usize,
    /// Maps model-a coordinates to model-b coordinates.
    pub transform: SimilarityTransform,
    pub pairs: Vec<CrossPair>,
    pub correspondences: Vec<CrossCorrespondence>,
    pub cost: f64,
    pub support: usize,
}

/// Line of the alignment audit file.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignmentRecord {
    pub a: usize,
    pub b: usize,
    /// `[w, x, y, z]`
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
    pub scale: f64,
    pub cost: f64,
    pub support: usize,
}

impl PairwiseAlignment {
    pub fn record(&self) -> AlignmentRecord {
        let q = nalgebra::UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(self.transform.rotation));
        let t = self.transform.translation;
        AlignmentRecord {
            a: self.a,
            b: self.b,
            rotation: [q.w, q.i, q.j, q.k],
            translation: [t.x, t.y, t.z],
            scale: self.transform.scale,
            cost: self.cost,
            support: self.support,
        }
    }
}

fn views_per_point(r: &Reconstruction) -> BTreeMap<TrackId, Vec<ViewId>> {
    let mut m: BTreeMap<TrackId, Vec<ViewId>> = BTreeMap::new();
    for o in &r.observations {
        m.entry(o.point).or_default().push(o.view);
    }
    for v in m.values_mut() {
        v.sort_unstable();
        v.dedup();
    }
    m
}

/// Tracks triangulated in both models, each with every (camera in a,
/// camera in b) pair that observes it and has verified two-view geometry.
/// Pairs of the same view are skipped.
pub fn find_cross_model_correspondences(
    a: &Reconstruction,
    b: &Reconstruction,
    view_graph: &ViewGraph,
) -> (Vec<CrossPair>, Vec<CrossCorrespondence>) {
    let va = views_per_point(a);
    let vb = views_per_point(b);
    let mut pairs: Vec<CrossPair> = Vec::new();
    let mut index: BTreeMap<(ViewId, ViewId), Option<usize>> = BTreeMap::new();
    let mut out = Vec::new();
    for (track, pa) in &a.points {
        let Some(pb) = b.points.get(track) else { continue };
        let (Some(cams_a), Some(cams_b)) = (va.get(track), vb.get(track)) else { continue };
        let mut used = Vec::new();
        for &i in cams_a {
            for &j in cams_b {
                if i == j {
                    continue;
                }
                let slot = *index.entry((i, j)).or_insert_with(|| {
                    let e = view_graph.edge(i, j)?;
                    let g = e.geometry?;
                    let g = if e.i == i { g } else { g.reversed() };
                    let p = CrossPair::new(i, j, &g, e.weight).ok()?;
                    pairs.push(p);
                    Some(pairs.len() - 1)
                });
                if let Some(s) = slot {
                    used.push(s);
                }
            }
        }
        if !used.is_empty() {
            out.push(CrossCorrespondence {
                track: *track,
                point_a: pa.position,
                point_b: pb.position,
                pairs: used,
            });
        }
    }
    (pairs, out)
}

/// Weighted chordal mean of the per-pair candidates `R_jᵀ R_ij R_i`.
pub fn estimate_relative_rotation(pairs: &[CrossPair], a: &Reconstruction, b: &Reconstruction) -> Result<Mat3> {
    let mut sum = Mat3::zeros();
    let mut n = 0;
    for p in pairs {
        let (Some(pi), Some(pj)) = (a.poses.get(&p.cam_a), b.poses.get(&p.cam_b)) else { continue };
        sum += p.weight.max(1e-12) * (pj.rotation().transpose() * p.rotation * pi.rotation());
        n += 1;
    }
    if n == 0 {
        return Err(Error::NoCrossPairs);
    }
    Ok(project_to_rotation(&sum))
}

fn weighted_median(mut v: Vec<(f64, f64)>) -> f64 {
    v.sort_by(|x, y| x.0.total_cmp(&y.0));
    let total: f64 = v.iter().map(|x| x.1).sum();
    let mut acc = 0.0;
    for (x, w) in &v {
        acc += w;
        if acc >= 0.5 * total {
            return *x;
        }
    }
    v.last().map_or(1.0, |x| x.0)
}

/// Per pair: the least-squares `(s, λ)` of
/// `s R_ij (R_i p_a + t_i) + λ t_ij = R_j p_b + t_j` over that pair's
/// points. The global scale is the weighted median of the per-pair values;
/// each `λ` is then re-solved with the scale fixed. Pairs are updated in
/// place.
pub fn estimate_scale(
    pairs: &mut [CrossPair],
    corr: &[CrossCorrespondence],
    a: &Reconstruction,
    b: &Reconstruction,
) -> Result<f64> {
    let mut per_pair: Vec<Vec<(Vec3, Vec3)>> = vec![Vec::new(); pairs.len()];
    for c in corr {
        for &m in &c.pairs {
            let p = &pairs[m];
            let (pi, pj) = (a.poses[&p.cam_a], b.poses[&p.cam_b]);
            let u = p.rotation * pi.transform_point(&c.point_a);
            let rhs = pj.transform_point(&c.point_b);
            per_pair[m].push((u, rhs));
        }
    }
    let mut estimates = Vec::new();
    let mut singular = 0;
    for (m, rows) in per_pair.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let t = pairs[m].direction;
        let (mut a11, mut a12, mut a22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (u, r) in rows {
            a11 += u.dot(u);
            a12 += u.dot(&t);
            a22 += t.dot(&t);
            b1 += u.dot(r);
            b2 += t.dot(r);
        }
        let det = a11 * a22 - a12 * a12;
        if det.abs() <= 1e-12 * a11 * a22 {
            singular += 1;
            continue;
        }
        let s = (b1 * a22 - a12 * b2) / det;
        if s > 0.0 && s.is_finite() {
            estimates.push((s, pairs[m].weight.max(1e-12) * rows.len() as f64));
        }
    }
    if estimates.is_empty() {
        return Err(if singular > 0 {
            Error::SingularSystem("every cross pair system is rank-deficient".into())
        } else {
            Error::NoCrossPairs
        });
    }
    let s = weighted_median(estimates);
    for (m, rows) in per_pair.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let t = pairs[m].direction;
        let lambda = rows.iter().map(|(u, r)| t.dot(&(r - s * u))).sum::<f64>() / rows.len() as f64;
        pairs[m].lambda = lambda.max(1e-9);
    }
    Ok(s)
}

/// Weighted mean of `c_j − s R_ab c_i + λ R_jᵀ t_ij` over the pairs.
pub fn estimate_relative_translation(
    pairs: &[CrossPair],
    rotation: &Mat3,
    scale: f64,
    a: &Reconstruction,
    b: &Reconstruction,
) -> Result<Vec3> {
    let mut sum = Vec3::zeros();
    let mut wsum = 0.0;
    for p in pairs {
        let (Some(pi), Some(pj)) = (a.poses.get(&p.cam_a), b.poses.get(&p.cam_b)) else { continue };
        let w = p.weight.max(1e-12);
        sum += w * (pj.center() - scale * (rotation * pi.center()) + p.lambda * (pj.rotation().transpose() * p.direction));
        wsum += w;
    }
    if wsum == 0.0 {
        return Err(Error::NoCrossPairs);
    }
    Ok(sum / wsum)
}

/// Closed-form alignment of model `ia` onto model `ib`. Pairs that do not
/// participate in any correspondence are dropped.
pub fn estimate_alignment(
    (ia, a): (usize, &Reconstruction),
    (ib, b): (usize, &Reconstruction),
    view_graph: &ViewGraph,
) -> Result<PairwiseAlignment> {
    let (pairs, corr) = find_cross_model_correspondences(a, b, view_graph);
    if corr.is_empty() || pairs.is_empty() {
        return Err(Error::NoCrossPairs);
    }
    // keep only pairs referenced by some correspondence, renumbered
    let used: BTreeSet<usize> = corr.iter().flat_map(|c| c.pairs.iter().copied()).collect();
    let remap: BTreeMap<usize, usize> = used.iter().enumerate().map(|(n, &o)| (o, n)).collect();
    let mut pairs: Vec<CrossPair> = used.iter().map(|&i| pairs[i]).collect();
    let corr: Vec<CrossCorrespondence> = corr
        .into_iter()
        .map(|mut c| {
            c.pairs = c.pairs.iter().map(|p| remap[p]).collect();
            c
        })
        .collect();
    let rotation = estimate_relative_rotation(&pairs, a, b)?;
    let scale = estimate_scale(&mut pairs, &corr, a, b)?;
    let translation = estimate_relative_translation(&pairs, &rotation, scale, a, b)?;
    let transform = SimilarityTransform::new(rotation, translation, scale)?;
    let mut al = PairwiseAlignment {
        a: ia,
        b: ib,
        transform,
        support: corr.len(),
        pairs,
        correspondences: corr,
        cost: 0.0,
    };
    al.cost = bidirectional_cost(&al, a, b).cost;
    Ok(al)
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use crate::correspondence::ViewEdge;
    use crate::geometry::{exp_so3, project, CameraPose, Intrinsics, RelativeGeometry};
    use crate::sfm::{Observation, Point3D};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub struct Split {
        pub a: Reconstruction,
        pub b: Reconstruction,
        pub graph: ViewGraph,
        /// Ground-truth map from model a to model b.
        pub truth: SimilarityTransform,
    }

    pub fn intrinsics() -> Intrinsics {
        Intrinsics::new(800.0, 800.0, 512.0, 384.0).unwrap()
    }

    /// Ring of 12 cameras around a point cloud. Model a holds cameras
    /// 0..7 in the world frame; model b holds cameras 5..12 in the frame
    /// `truth(world)`. Observations are exact.
    pub fn split(scale: f64, angle_deg: f64, seed: u64) -> Split {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = intrinsics();
        let poses: Vec<CameraPose> = (0..12)
            .map(|i| {
                let a = i as f64 * 0.18;
                let c = Vec3::new(8.0 * a.cos(), 8.0 * a.sin(), 1.0 + 0.3 * (i as f64 * 1.7).sin());
                CameraPose::look_at(c, Vec3::zeros(), Vec3::z()).unwrap()
            })
            .collect();
        let pts: Vec<Vec3> = (0..120)
            .map(|_| Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-1.5..1.5)))
            .collect();
        let truth = SimilarityTransform::new(
            exp_so3(&(Vec3::new(0.3, -0.5, 0.8).normalize() * angle_deg.to_radians())),
            Vec3::new(1.5, -2.0, 0.7),
            scale,
        )
        .unwrap();
        let build = |views: std::ops::Range<usize>, t: &SimilarityTransform, id: usize| {
            let mut r = Reconstruction::new(id);
            for v in views.clone() {
                r.poses.insert(v, t.transform_pose(&poses[v]));
                r.intrinsics.insert(v, k);
            }
            r.gauge = Some((views.start, views.start + 1));
            for (pid, x) in pts.iter().enumerate() {
                r.points.insert(pid, Point3D { position: t.apply(x), track: pid });
                for v in views.clone() {
                    r.observations.push(Observation {
                        view: v,
                        keypoint: pid,
                        point: pid,
                        pixel: project(&poses[v], &k, x).unwrap(),
                    });
                }
            }
            r
        };
        let a = build(0..7, &SimilarityTransform::identity(), 0);
        let b = build(5..12, &truth, 1);
        let mut edges = Vec::new();
        for i in 0..12 {
            for j in i + 1..12 {
                let (r, t) = poses[i].relative_to(&poses[j]);
                edges.push(ViewEdge {
                    i,
                    j,
                    weight: 0.2 + 0.01 * ((i + j) % 7) as f64,
                    ratio_i: 0.2,
                    ratio_j: 0.2,
                    match_count: pts.len(),
                    geometry: Some(RelativeGeometry {
                        rotation: r,
                        direction: t.normalize(),
                    }),
                });
            }
        }
        let graph = ViewGraph::from_edges((0..12).collect(), edges);
        Split { a, b, graph, truth }
    }
}
