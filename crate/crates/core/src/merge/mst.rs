use std::collections::{BTreeMap, BTreeSet, HashSet};

use super::PairwiseAlignment;
use crate::error::{Error, Result};
use crate::geometry::SimilarityTransform;
use crate::sfm::{bundle_adjust, BaOptions, BaReport, Reconstruction};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MergeOptions {
    /// Alignments supported by fewer correspondences are ignored.
    pub min_support: usize,
    /// Alignments resting on fewer distinct camera pairs are ignored.
    pub min_pairs: usize,
}

impl MergeOptions {
    pub fn accepts(&self, al: &PairwiseAlignment) -> bool {
        al.support >= self.min_support && al.pairs.len() >= self.min_pairs
    }
}

impl Default for MergeOptions {
    fn default() -> Self {
        MergeOptions { min_support: 5, min_pairs: 1 }
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Moves `src` (already expressed in the frame of `dst`) into `dst`.
/// Views present in both keep the pose of `dst`; points with the same
/// track id are averaged.
fn fuse(dst: &mut Reconstruction, src: Reconstruction) {
    for (v, pose) in src.poses {
        dst.poses.entry(v).or_insert(pose);
    }
    for (v, k) in src.intrinsics {
        dst.intrinsics.entry(v).or_insert(k);
    }
    for (id, p) in src.points {
        dst.points
            .entry(id)
            .and_modify(|q| q.position = 0.5 * (q.position + p.position))
            .or_insert(p);
    }
    let mut seen: HashSet<(usize, usize)> = dst.observations.iter().map(|o| (o.view, o.point)).collect();
    for o in src.observations {
        if seen.insert((o.view, o.point)) {
            dst.observations.push(o);
        }
    }
}

/// Minimum spanning tree over the alignment graph (edge weight = refined
/// cost), then repeated leaf merges that fold the model with fewer views
/// into the other until one model remains.
pub fn merge_all(models: &[Reconstruction], alignments: &[PairwiseAlignment], opts: &MergeOptions) -> Result<Reconstruction> {
    let n = models.len();
    if n == 0 {
        return Err(Error::InvalidInput("no models to merge".into()));
    }
    if n == 1 {
        return Ok(models[0].clone());
    }
    let mut edges: Vec<&PairwiseAlignment> = alignments
        .iter()
        .filter(|al| opts.accepts(al) && al.a < n && al.b < n && al.a != al.b && al.cost.is_finite())
        .collect();
    edges.sort_by(|x, y| x.cost.total_cmp(&y.cost).then((x.a, x.b).cmp(&(y.a, y.b))));
    let mut parent: Vec<usize> = (0..n).collect();
    let mut tree: Vec<&PairwiseAlignment> = Vec::new();
    for e in edges {
        let (ra, rb) = (find(&mut parent, e.a), find(&mut parent, e.b));
        if ra != rb {
            parent[ra] = rb;
            tree.push(e);
        }
    }
    if tree.len() + 1 < n {
        let mut comps: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for m in 0..n {
            let r = find(&mut parent, m);
            comps.entry(r).or_default().push(m);
        }
        let mut comps: Vec<Vec<usize>> = comps.into_values().collect();
        comps.sort();
        return Err(Error::DisconnectedModels(comps));
    }

    // node id -> (current model, original model ids in it)
    let mut nodes: BTreeMap<usize, (Reconstruction, Vec<usize>)> =
        models.iter().cloned().enumerate().map(|(i, m)| (i, (m, vec![i]))).collect();
    let mut owner: Vec<usize> = (0..n).collect();
    // original frame of each model -> frame of its current node
    let mut to_node: Vec<SimilarityTransform> = vec![SimilarityTransform::identity(); n];
    let mut remaining: Vec<&PairwiseAlignment> = tree;
    while nodes.len() > 1 {
        let mut degree: BTreeMap<usize, usize> = BTreeMap::new();
        for e in &remaining {
            *degree.entry(owner[e.a]).or_insert(0) += 1;
            *degree.entry(owner[e.b]).or_insert(0) += 1;
        }
        // cheapest edge touching a leaf
        let (idx, _) = remaining
            .iter()
            .enumerate()
            .filter(|(_, e)| degree[&owner[e.a]] == 1 || degree[&owner[e.b]] == 1)
            .min_by(|x, y| x.1.cost.total_cmp(&y.1.cost).then((x.1.a, x.1.b).cmp(&(y.1.a, y.1.b))))
            .expect("a tree has leaves");
        let e = remaining.remove(idx);
        let (na, nb) = (owner[e.a], owner[e.b]);
        // node-a frame -> node-b frame
        let a_to_b = to_node[e.b].compose(&e.transform).compose(&to_node[e.a].inverse());
        let size = |id: usize| nodes[&id].0.num_registered();
        let (src, dst, t) = if (size(na), nb) <= (size(nb), na) {
            (na, nb, a_to_b)
        } else {
            (nb, na, a_to_b.inverse())
        };
        let (mut model, members) = nodes.remove(&src).expect("node exists");
        model.transform(&t);
        let target = nodes.get_mut(&dst).expect("node exists");
        fuse(&mut target.0, model);
        for m in members {
            owner[m] = dst;
            to_node[m] = t.compose(&to_node[m]);
            target.1.push(m);
        }
    }
    let (_, (mut merged, _)) = nodes.into_iter().next().expect("one node left");
    merged.id = 0;
    Ok(merged)
}

/// Global bundle adjustment of a merged model, then the gauge is
/// re-imposed.
pub fn final_bundle_adjust(merged: &Reconstruction, opts: &BaOptions) -> (Reconstruction, BaReport) {
    let (mut out, rep) = bundle_adjust(merged, opts);
    out.normalize_gauge();
    (out, rep)
}

/// Models reachable from each other through alignments with enough
/// support, as sorted lists of model indices.
pub fn components(n: usize, alignments: &[PairwiseAlignment], opts: &MergeOptions) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..n).collect();
    for e in alignments.iter().filter(|e| opts.accepts(e)) {
        let (ra, rb) = (find(&mut parent, e.a), find(&mut parent, e.b));
        if ra != rb {
            parent[ra] = rb;
        }
    }
    let mut comps: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for m in 0..n {
        let r = find(&mut parent, m);
        comps.entry(r).or_default().insert(m);
    }
    let mut out: Vec<Vec<usize>> = comps.into_values().map(|s| s.into_iter().collect()).collect();
    out.sort();
    out
}
