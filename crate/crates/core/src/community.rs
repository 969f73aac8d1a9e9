//! Louvain community detection on the track-graph and the image clusters
//! derived from the resulting scene segments.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::correspondence::{TrackGraph, TrackId, Track, ViewId};
use crate::error::{Error, Result};

/// Community id per sampled track, parallel to `TrackGraph::nodes`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommunityLabeling {
    pub tracks: Vec<TrackId>,
    pub labels: Vec<usize>,
    pub count: usize,
}

impl CommunityLabeling {
    pub fn from_labels(tracks: Vec<TrackId>, labels: Vec<usize>) -> Self {
        let (labels, count) = renumber(&labels);
        CommunityLabeling { tracks, labels, count }
    }

    pub fn label_of(&self, track: TrackId) -> Option<usize> {
        self.tracks.binary_search(&track).ok().map(|i| self.labels[i])
    }

    pub fn members(&self, community: usize) -> impl Iterator<Item = TrackId> + '_ {
        self.tracks
            .iter()
            .zip(&self.labels)
            .filter(move |(_, &l)| l == community)
            .map(|(&t, _)| t)
    }

    /// `track_id community_id` per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (t, l) in self.tracks.iter().zip(&self.labels) {
            s.push_str(&format!("{t} {l}\n"));
        }
        s
    }
}

/// Relabels to contiguous ids in order of first appearance.
fn renumber(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = HashMap::new();
    let out = labels
        .iter()
        .map(|l| {
            let n = map.len();
            *map.entry(*l).or_insert(n)
        })
        .collect();
    (out, map.len())
}

/// Weighted undirected graph used internally by Louvain; self-loop
/// weights are stored separately and count twice towards the degree.
#[derive(Clone, Debug)]
struct WeightedGraph {
    adj: Vec<Vec<(usize, f64)>>,
    loops: Vec<f64>,
}

impl WeightedGraph {
    fn from_track_graph(g: &TrackGraph) -> Self {
        WeightedGraph {
            adj: g
                .adjacency
                .iter()
                .map(|a| a.iter().map(|(&j, &w)| (j, w as f64)).collect())
                .collect(),
            loops: vec![0.0; g.len()],
        }
    }

    fn len(&self) -> usize {
        self.adj.len()
    }

    fn degree(&self, i: usize) -> f64 {
        self.adj[i].iter().map(|&(_, w)| w).sum::<f64>() + 2.0 * self.loops[i]
    }

    /// Twice the total edge weight.
    fn two_m(&self) -> f64 {
        (0..self.len()).map(|i| self.degree(i)).sum()
    }

    fn modularity(&self, labels: &[usize], resolution: f64) -> f64 {
        let two_m = self.two_m();
        if two_m <= 0.0 {
            return 0.0;
        }
        let n_comm = labels.iter().max().map_or(0, |m| m + 1);
        let mut inside = vec![0.0; n_comm];
        let mut total = vec![0.0; n_comm];
        for i in 0..self.len() {
            let c = labels[i];
            total[c] += self.degree(i);
            inside[c] += 2.0 * self.loops[i];
            for &(j, w) in &self.adj[i] {
                if labels[j] == c {
                    inside[c] += w;
                }
            }
        }
        inside
            .iter()
            .zip(&total)
            .map(|(&a, &k)| a / two_m - resolution * (k / two_m).powi(2))
            .sum()
    }

    fn aggregate(&self, labels: &[usize], n_comm: usize) -> WeightedGraph {
        let mut edges: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n_comm];
        let mut loops = vec![0.0; n_comm];
        for i in 0..self.len() {
            let ci = labels[i];
            loops[ci] += self.loops[i];
            for &(j, w) in &self.adj[i] {
                let cj = labels[j];
                if ci == cj {
                    // each internal edge is seen from both endpoints
                    loops[ci] += w / 2.0;
                } else {
                    *edges[ci].entry(cj).or_insert(0.0) += w;
                }
            }
        }
        WeightedGraph {
            adj: edges.into_iter().map(|m| m.into_iter().collect()).collect(),
            loops,
        }
    }
}

/// Newman–Girvan modularity with edge multiplicities as weights.
pub fn modularity(graph: &TrackGraph, labeling: &CommunityLabeling) -> Result<f64> {
    if graph.edge_count() == 0 {
        return Err(Error::EmptyGraph);
    }
    let labels = labels_for_graph(graph, labeling)?;
    Ok(WeightedGraph::from_track_graph(graph).modularity(&labels, 1.0))
}

fn labels_for_graph(graph: &TrackGraph, labeling: &CommunityLabeling) -> Result<Vec<usize>> {
    graph
        .nodes
        .iter()
        .map(|&t| labeling.label_of(t).ok_or(Error::UnknownTrack(t)))
        .collect()
}

/// Result of a Louvain run with the modularity reached after each level.
#[derive(Clone, Debug)]
pub struct LouvainTrace {
    pub labeling: CommunityLabeling,
    /// Modularity of the singleton partition followed by the value after
    /// every completed level.
    pub modularity_per_level: Vec<f64>,
}

const MIN_GAIN: f64 = 1e-12;

/// One local-moving phase. Returns the (renumbered) labels and whether any
/// node changed community.
fn local_moves(g: &WeightedGraph, resolution: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, bool) {
    let n = g.len();
    let two_m = g.two_m();
    let mut labels: Vec<usize> = (0..n).collect();
    if two_m <= 0.0 {
        return (labels, false);
    }
    let degree: Vec<f64> = (0..n).map(|i| g.degree(i)).collect();
    let mut total: Vec<f64> = degree.clone();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut moved_any = false;
    let mut neigh_weight: HashMap<usize, f64> = HashMap::new();
    loop {
        let mut moved = false;
        for &i in &order {
            let ci = labels[i];
            let ki = degree[i];
            neigh_weight.clear();
            for &(j, w) in &g.adj[i] {
                if j != i {
                    *neigh_weight.entry(labels[j]).or_insert(0.0) += w;
                }
            }
            total[ci] -= ki;
            let gain = |c: usize, kin: f64| kin - resolution * total[c] * ki / two_m;
            let stay = gain(ci, neigh_weight.get(&ci).copied().unwrap_or(0.0));
            let mut best = (ci, stay);
            let mut cands: Vec<(usize, f64)> = neigh_weight.iter().map(|(&c, &w)| (c, w)).collect();
            cands.sort_unstable_by_key(|&(c, _)| c);
            for (c, kin) in cands {
                let g = gain(c, kin);
                if g > best.1 + MIN_GAIN {
                    best = (c, g);
                }
            }
            total[best.0] += ki;
            if best.0 != ci {
                labels[i] = best.0;
                moved = true;
                moved_any = true;
            }
        }
        if !moved {
            break;
        }
    }
    let (labels, _) = renumber(&labels);
    (labels, moved_any)
}

/// Two-phase Louvain: local moves until no gain, then aggregation, until
/// a level produces no move. Node visiting order is shuffled with `seed`.
pub fn detect_communities_traced(graph: &TrackGraph, seed: u64, resolution: f64) -> Result<LouvainTrace> {
    if graph.is_empty() {
        return Err(Error::EmptyGraph);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = WeightedGraph::from_track_graph(graph);
    let mut membership: Vec<usize> = (0..graph.len()).collect();
    let mut history = vec![base.modularity(&membership, resolution)];
    let mut level = base.clone();
    loop {
        let (labels, moved) = local_moves(&level, resolution, &mut rng);
        if !moved {
            break;
        }
        for m in membership.iter_mut() {
            *m = labels[*m];
        }
        let n_comm = labels.iter().max().map_or(0, |m| m + 1);
        history.push(base.modularity(&membership, resolution));
        level = level.aggregate(&labels, n_comm);
    }
    Ok(LouvainTrace {
        labeling: CommunityLabeling::from_labels(graph.nodes.clone(), membership),
        modularity_per_level: history,
    })
}

pub fn detect_communities(graph: &TrackGraph, seed: u64, resolution: f64) -> Result<CommunityLabeling> {
    detect_communities_traced(graph, seed, resolution).map(|t| t.labeling)
}

/// Views relevant to one scene segment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageCluster {
    pub segment: usize,
    /// Ascending view ids.
    pub views: Vec<ViewId>,
    /// Number of sampled tracks of the segment visible in each view.
    pub track_counts: Vec<usize>,
}

/// A view joins the cluster of segment `s` when it observes at least
/// `min_tracks_per_view` sampled tracks labelled `s`.
pub fn image_clusters(labeling: &CommunityLabeling, tracks: &[Track], min_tracks_per_view: usize) -> Vec<ImageCluster> {
    let mut counts: BTreeMap<usize, BTreeMap<ViewId, usize>> = BTreeMap::new();
    for t in tracks {
        if let Some(s) = labeling.label_of(t.id) {
            for &(v, _) in &t.observations {
                *counts.entry(s).or_default().entry(v).or_insert(0) += 1;
            }
        }
    }
    counts
        .into_iter()
        .filter_map(|(segment, per_view)| {
            let (views, track_counts): (Vec<_>, Vec<_>) = per_view
                .into_iter()
                .filter(|&(_, c)| c >= min_tracks_per_view)
                .unzip();
            (!views.is_empty()).then_some(ImageCluster {
                segment,
                views,
                track_counts,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(n: usize, edges: &[(usize, usize)]) -> TrackGraph {
        let e: Vec<_> = edges.iter().map(|&(a, b)| (a, b, 1)).collect();
        TrackGraph::from_edges((0..n).collect(), &e).unwrap()
    }

    fn clique_edges(nodes: std::ops::Range<usize>) -> Vec<(usize, usize)> {
        let v: Vec<usize> = nodes.collect();
        let mut e = Vec::new();
        for (i, &a) in v.iter().enumerate() {
            for &b in &v[i + 1..] {
                e.push((a, b));
            }
        }
        e
    }

    #[test]
    fn two_triangles_have_half_modularity() {
        let g = graph(6, &[(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)]);
        let l = CommunityLabeling::from_labels((0..6).collect(), vec![0, 0, 0, 1, 1, 1]);
        assert!((modularity(&g, &l).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_community_has_zero_modularity() {
        let g = graph(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (0, 4), (1, 3)]);
        let l = CommunityLabeling::from_labels((0..5).collect(), vec![0; 5]);
        assert!(modularity(&g, &l).unwrap().abs() < 1e-15);
    }

    #[test]
    fn every_labeling_of_a_clique_is_nonpositive() {
        let g = graph(5, &clique_edges(0..5));
        // all 5^5 labelings
        for code in 0..5usize.pow(5) {
            let labels: Vec<usize> = (0..5).map(|k| code / 5usize.pow(k) % 5).collect();
            let l = CommunityLabeling::from_labels((0..5).collect(), labels);
            assert!(modularity(&g, &l).unwrap() <= 1e-15);
        }
    }

    #[test]
    fn empty_graph_errors() {
        let g = graph(3, &[]);
        let l = CommunityLabeling::from_labels((0..3).collect(), vec![0, 1, 2]);
        assert!(matches!(modularity(&g, &l), Err(Error::EmptyGraph)));
        let g = graph(0, &[]);
        assert!(matches!(detect_communities(&g, 0, 1.0), Err(Error::EmptyGraph)));
    }

    #[test]
    fn single_node_is_one_community() {
        let g = graph(1, &[]);
        let l = detect_communities(&g, 3, 1.0).unwrap();
        assert_eq!(l.count, 1);
        assert_eq!(l.labels, vec![0]);
    }

    #[test]
    fn isolated_nodes_stay_singletons() {
        let mut e = clique_edges(0..4);
        e.push((5, 6));
        let g = graph(7, &e);
        let l = detect_communities(&g, 1, 1.0).unwrap();
        assert_eq!(l.count, 3);
        assert_ne!(l.labels[4], l.labels[0]);
        assert_ne!(l.labels[4], l.labels[5]);
        assert_eq!(l.labels[5], l.labels[6]);
    }

    #[test]
    fn two_cliques_bridge() {
        let mut e = clique_edges(0..10);
        e.extend(clique_edges(10..20));
        e.push((9, 10));
        let g = graph(20, &e);
        for seed in 0..10 {
            let t = detect_communities_traced(&g, seed, 1.0).unwrap();
            assert_eq!(t.labeling.count, 2);
            assert!(t.labeling.labels[..10].iter().all(|&l| l == t.labeling.labels[0]));
            assert!(t.labeling.labels[10..].iter().all(|&l| l == t.labeling.labels[10]));
            assert!(t.modularity_per_level.windows(2).all(|w| w[1] >= w[0] - 1e-12));
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let mut e = clique_edges(0..6);
        e.extend(clique_edges(6..12));
        e.extend([(0, 6), (3, 9), (5, 11)]);
        let g = graph(12, &e);
        assert_eq!(detect_communities(&g, 42, 1.0).unwrap(), detect_communities(&g, 42, 1.0).unwrap());
    }

    #[test]
    fn image_cluster_threshold() {
        // view 0 sees 30 tracks of segment 0 and 5 of segment 1
        let mut tracks = Vec::new();
        let mut labels = Vec::new();
        for id in 0..35 {
            tracks.push(Track {
                id,
                observations: vec![(0, id), (1, id)],
            });
            labels.push(if id < 30 { 0 } else { 1 });
        }
        let labeling = CommunityLabeling::from_labels((0..35).collect(), labels);
        let clusters = image_clusters(&labeling, &tracks, 30);
        assert_eq!(clusters.len(), 1);
        assert_eq!(clusters[0].segment, 0);
        assert_eq!(clusters[0].views, vec![0, 1]);
        assert_eq!(clusters[0].track_counts, vec![30, 30]);
    }

    #[test]
    fn view_without_sampled_tracks_joins_nothing() {
        let tracks = vec![Track {
            id: 7,
            observations: vec![(3, 0), (4, 0)],
        }];
        let labeling = CommunityLabeling::from_labels(vec![1], vec![0]);
        assert!(image_clusters(&labeling, &tracks, 1).is_empty());
    }
}
