//! Track building, the weighted view-graph, grid superpixels, track
//! sampling and the track-graph.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, RelativeGeometry, Vec2};

pub type ViewId = usize;
pub type TrackId = usize;

/// How superpixel labels of one view relate to each other.
#[derive(Clone, Debug, PartialEq)]
pub enum Adjacency {
    /// Labels come from a uniform grid with this many columns; cells
    /// sharing an edge or a corner are adjacent.
    Grid { ncols: u32 },
    /// Externally supplied labels with an explicit adjacency list.
    Explicit(BTreeSet<(u32, u32)>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Superpixels {
    pub labels: Vec<u32>,
    pub adjacency: Adjacency,
}

impl Superpixels {
    pub fn adjacent(&self, a: u32, b: u32) -> bool {
        if a == b {
            return true;
        }
        match &self.adjacency {
            Adjacency::Grid { ncols } => {
                let (ca, ra) = ((a % ncols) as i64, (a / ncols) as i64);
                let (cb, rb) = ((b % ncols) as i64, (b / ncols) as i64);
                (ca - cb).abs() <= 1 && (ra - rb).abs() <= 1
            }
            Adjacency::Explicit(pairs) => pairs.contains(&(a.min(b), a.max(b))),
        }
    }

    /// Labels adjacent to `a`, excluding `a` itself.
    pub fn neighbors(&self, a: u32) -> Vec<u32> {
        match &self.adjacency {
            Adjacency::Grid { ncols } => {
                let n = *ncols as i64;
                let (c, r) = ((a as i64) % n, (a as i64) / n);
                let mut out = Vec::with_capacity(8);
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        if dr == 0 && dc == 0 {
                            continue;
                        }
                        let (cc, rr) = (c + dc, r + dr);
                        if cc >= 0 && cc < n && rr >= 0 {
                            out.push((rr * n + cc) as u32);
                        }
                    }
                }
                out
            }
            Adjacency::Explicit(pairs) => pairs
                .iter()
                .filter_map(|&(x, y)| {
                    if x == a && y != a {
                        Some(y)
                    } else if y == a && x != a {
                        Some(x)
                    } else {
                        None
                    }
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub id: ViewId,
    pub intrinsics: Intrinsics,
    pub keypoints: Vec<Vec2>,
    pub superpixels: Option<Superpixels>,
}

impl View {
    pub fn new(id: ViewId, intrinsics: Intrinsics, keypoints: Vec<Vec2>) -> Self {
        View {
            id,
            intrinsics,
            keypoints,
            superpixels: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if let Some(i) = self.keypoints.iter().position(|k| !k.x.is_finite() || !k.y.is_finite()) {
            return Err(Error::InvalidInput(format!("view {}: keypoint {i} is not finite", self.id)));
        }
        if let Some(sp) = &self.superpixels {
            if sp.labels.len() != self.keypoints.len() {
                return Err(Error::InvalidInput(format!(
                    "view {}: {} superpixel labels for {} keypoints",
                    self.id,
                    sp.labels.len(),
                    self.keypoints.len()
                )));
            }
        }
        Ok(())
    }

    pub fn label(&self, keypoint: usize) -> Option<u32> {
        self.superpixels.as_ref().map(|s| s.labels[keypoint])
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Match {
    pub view_i: ViewId,
    pub view_j: ViewId,
    pub pairs: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Track {
    pub id: TrackId,
    /// (view id, keypoint index), sorted by view id.
    pub observations: Vec<(ViewId, usize)>,
}

impl Track {
    pub fn keypoint_in(&self, view: ViewId) -> Option<usize> {
        self.observations
            .binary_search_by_key(&view, |&(v, _)| v)
            .ok()
            .map(|i| self.observations[i].1)
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

pub(crate) fn view_index(views: &[View]) -> Result<HashMap<ViewId, usize>> {
    let mut index = HashMap::with_capacity(views.len());
    for (i, v) in views.iter().enumerate() {
        if index.insert(v.id, i).is_some() {
            return Err(Error::InvalidInput(format!("duplicate view id {}", v.id)));
        }
    }
    Ok(index)
}

pub fn validate_matches(views: &[View], matches: &[Match]) -> Result<()> {
    let index = view_index(views)?;
    for m in matches {
        let vi = index
            .get(&m.view_i)
            .ok_or_else(|| Error::IndexOutOfRange(format!("unknown view {}", m.view_i)))?;
        let vj = index
            .get(&m.view_j)
            .ok_or_else(|| Error::IndexOutOfRange(format!("unknown view {}", m.view_j)))?;
        if m.view_i == m.view_j {
            return Err(Error::InvalidInput(format!("match of view {} with itself", m.view_i)));
        }
        let (ni, nj) = (views[*vi].keypoints.len(), views[*vj].keypoints.len());
        let mut seen_i = BTreeSet::new();
        let mut seen_j = BTreeSet::new();
        for &(a, b) in &m.pairs {
            if a >= ni || b >= nj {
                return Err(Error::IndexOutOfRange(format!(
                    "match {}-{}: pair ({a}, {b}) outside keypoint ranges ({ni}, {nj})",
                    m.view_i, m.view_j
                )));
            }
            if !seen_i.insert(a) || !seen_j.insert(b) {
                return Err(Error::InvalidInput(format!(
                    "match {}-{}: keypoint used twice",
                    m.view_i, m.view_j
                )));
            }
        }
    }
    Ok(())
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

/// Transitive closure of pairwise matches. Components that contain two
/// keypoints of the same view are discarded.
pub fn build_tracks(views: &[View], matches: &[Match]) -> Result<Vec<Track>> {
    validate_matches(views, matches)?;
    let index = view_index(views)?;
    let mut offsets = Vec::with_capacity(views.len() + 1);
    let mut total = 0;
    for v in views {
        offsets.push(total);
        total += v.keypoints.len();
    }
    let mut uf = UnionFind::new(total);
    for m in matches {
        let (oi, oj) = (offsets[index[&m.view_i]], offsets[index[&m.view_j]]);
        for &(a, b) in &m.pairs {
            uf.union(oi + a, oj + b);
        }
    }
    let mut components: BTreeMap<usize, Vec<(ViewId, usize)>> = BTreeMap::new();
    let mut touched = vec![false; total];
    for m in matches {
        let (oi, oj) = (offsets[index[&m.view_i]], offsets[index[&m.view_j]]);
        for &(a, b) in &m.pairs {
            touched[oi + a] = true;
            touched[oj + b] = true;
        }
    }
    for (vi, v) in views.iter().enumerate() {
        for k in 0..v.keypoints.len() {
            let node = offsets[vi] + k;
            if touched[node] {
                let root = uf.find(node);
                components.entry(root).or_default().push((v.id, k));
            }
        }
    }
    let mut tracks: Vec<Vec<(ViewId, usize)>> = components
        .into_values()
        .filter_map(|mut obs| {
            obs.sort_unstable();
            let conflict = obs.windows(2).any(|w| w[0].0 == w[1].0);
            (!conflict && obs.len() >= 2).then_some(obs)
        })
        .collect();
    tracks.sort_unstable_by(|a, b| a[0].cmp(&b[0]));
    Ok(tracks
        .into_iter()
        .enumerate()
        .map(|(id, observations)| Track { id, observations })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewEdge {
    pub i: ViewId,
    pub j: ViewId,
    pub weight: f64,
    pub ratio_i: f64,
    pub ratio_j: f64,
    pub match_count: usize,
    pub geometry: Option<RelativeGeometry>,
}

#[derive(Clone, Debug, Default)]
pub struct ViewGraph {
    pub nodes: Vec<ViewId>,
    pub edges: Vec<ViewEdge>,
    lookup: HashMap<(ViewId, ViewId), usize>,
}

impl ViewGraph {
    pub fn from_edges(nodes: Vec<ViewId>, edges: Vec<ViewEdge>) -> Self {
        let lookup = edges
            .iter()
            .enumerate()
            .map(|(k, e)| ((e.i.min(e.j), e.i.max(e.j)), k))
            .collect();
        ViewGraph { nodes, edges, lookup }
    }

    pub fn edge(&self, a: ViewId, b: ViewId) -> Option<&ViewEdge> {
        self.lookup.get(&(a.min(b), a.max(b))).map(|&k| &self.edges[k])
    }

    pub fn weight(&self, a: ViewId, b: ViewId) -> f64 {
        self.edge(a, b).map_or(0.0, |e| e.weight)
    }

    /// Edges whose endpoints both lie in `views`, heaviest first (ties by
    /// endpoint ids).
    pub fn sorted_subgraph_edges(&self, views: &BTreeSet<ViewId>) -> Vec<&ViewEdge> {
        let mut out: Vec<&ViewEdge> = self
            .edges
            .iter()
            .filter(|e| views.contains(&e.i) && views.contains(&e.j))
            .collect();
        out.sort_by(|a, b| b.weight.total_cmp(&a.weight).then((a.i, a.j).cmp(&(b.i, b.j))));
        out
    }
}

/// Edge weight `w_ij = (r_i + r_j) / 2` where `r_i` is the fraction of
/// view `i`'s keypoints matched into view `j`.
pub fn build_view_graph(views: &[View], matches: &[Match]) -> Result<ViewGraph> {
    let index = view_index(views)?;
    let mut pairs: BTreeMap<(ViewId, ViewId), BTreeSet<(usize, usize)>> = BTreeMap::new();
    for m in matches {
        if !index.contains_key(&m.view_i) || !index.contains_key(&m.view_j) {
            return Err(Error::IndexOutOfRange(format!(
                "match references unknown view {}-{}",
                m.view_i, m.view_j
            )));
        }
        let (i, j, flip) = if m.view_i < m.view_j {
            (m.view_i, m.view_j, false)
        } else {
            (m.view_j, m.view_i, true)
        };
        let set = pairs.entry((i, j)).or_default();
        for &(a, b) in &m.pairs {
            set.insert(if flip { (b, a) } else { (a, b) });
        }
    }
    let mut edges = Vec::new();
    for ((i, j), set) in pairs {
        if set.is_empty() {
            continue;
        }
        let common_i = set.iter().map(|p| p.0).collect::<BTreeSet<_>>().len();
        let common_j = set.iter().map(|p| p.1).collect::<BTreeSet<_>>().len();
        let ni = views[index[&i]].keypoints.len().max(1) as f64;
        let nj = views[index[&j]].keypoints.len().max(1) as f64;
        let ratio_i = (common_i as f64 / ni).min(1.0);
        let ratio_j = (common_j as f64 / nj).min(1.0);
        edges.push(ViewEdge {
            i,
            j,
            weight: (ratio_i + ratio_j) / 2.0,
            ratio_i,
            ratio_j,
            match_count: set.len(),
            geometry: None,
        });
    }
    let mut nodes: Vec<ViewId> = views.iter().map(|v| v.id).collect();
    nodes.sort_unstable();
    Ok(ViewGraph::from_edges(nodes, edges))
}

/// Uniform-grid stand-in for an over-segmentation: the label of a keypoint
/// is its grid cell, numbered row-major. Views that already carry labels
/// are returned unchanged.
pub fn assign_superpixels(view: &View, cell_size: f64) -> Result<View> {
    if view.superpixels.is_some() {
        return Ok(view.clone());
    }
    if !(cell_size > 0.0) {
        return Err(Error::InvalidInput(format!("cell size must be positive, got {cell_size}")));
    }
    let max_x = view.keypoints.iter().map(|k| k.x.max(0.0)).fold(0.0, f64::max);
    let ncols = ((max_x / cell_size).floor() as u32 + 1).max(1);
    let labels = view
        .keypoints
        .iter()
        .map(|k| {
            let col = (k.x.max(0.0) / cell_size).floor() as u32;
            let row = (k.y.max(0.0) / cell_size).floor() as u32;
            col + ncols * row
        })
        .collect();
    let mut out = view.clone();
    out.superpixels = Some(Superpixels {
        labels,
        adjacency: Adjacency::Grid { ncols },
    });
    Ok(out)
}

/// Number of observations of `track` connected to another observation of
/// the same track through a view-graph edge of weight at least `tau_w`.
pub fn reliable_length(track: &Track, view_graph: &ViewGraph, tau_w: f64) -> usize {
    track
        .observations
        .iter()
        .filter(|&&(v, _)| {
            track
                .observations
                .iter()
                .any(|&(u, _)| u != v && view_graph.edge(u, v).is_some_and(|e| e.weight >= tau_w))
        })
        .count()
}

/// Picks one representative track per superpixel: the longest reliable
/// track, ties to the smaller id. Once a track is sampled, every
/// superpixel it occupies in other views is skipped. Views are visited in
/// ascending id order and superpixels in ascending label order.
pub fn sample_tracks(views: &[View], tracks: &[Track], view_graph: &ViewGraph, tau_w: f64) -> Result<Vec<TrackId>> {
    let index = view_index(views)?;
    let by_id: HashMap<TrackId, &Track> = tracks.iter().map(|t| (t.id, t)).collect();
    let lengths: HashMap<TrackId, usize> = tracks
        .iter()
        .map(|t| (t.id, reliable_length(t, view_graph, tau_w)))
        .collect();

    let mut cells: BTreeMap<ViewId, BTreeMap<u32, Vec<TrackId>>> = BTreeMap::new();
    for t in tracks {
        for &(v, k) in &t.observations {
            let view = &views[*index
                .get(&v)
                .ok_or_else(|| Error::IndexOutOfRange(format!("track {} references view {v}", t.id)))?];
            let label = view
                .label(k)
                .ok_or_else(|| Error::InvalidInput(format!("view {v} has no superpixel labels")))?;
            cells.entry(v).or_default().entry(label).or_default().push(t.id);
        }
    }

    let mut skipped: BTreeSet<(ViewId, u32)> = BTreeSet::new();
    let mut sampled_set: BTreeSet<TrackId> = BTreeSet::new();
    let mut sampled = Vec::new();
    for (&v, labels) in &cells {
        for (&label, members) in labels {
            if skipped.contains(&(v, label)) {
                continue;
            }
            let best = members
                .iter()
                .filter(|id| !sampled_set.contains(id) && lengths[id] > 0)
                .min_by(|a, b| lengths[b].cmp(&lengths[a]).then(a.cmp(b)));
            let Some(&best) = best else { continue };
            sampled_set.insert(best);
            sampled.push(best);
            for &(u, k) in &by_id[&best].observations {
                if let Some(l) = views[index[&u]].label(k) {
                    skipped.insert((u, l));
                }
            }
        }
    }
    Ok(sampled)
}

/// Undirected weighted graph over sampled tracks; the weight of an edge is
/// the number of views in which the two tracks fall in the same or
/// adjacent superpixels.
#[derive(Clone, Debug, Default)]
pub struct TrackGraph {
    /// Sampled track ids, ascending.
    pub nodes: Vec<TrackId>,
    /// Per node: neighbour node index → multiplicity.
    pub adjacency: Vec<BTreeMap<usize, u32>>,
    node_of: HashMap<TrackId, usize>,
}

impl TrackGraph {
    pub fn from_edges(mut nodes: Vec<TrackId>, edges: &[(TrackId, TrackId, u32)]) -> Result<Self> {
        nodes.sort_unstable();
        nodes.dedup();
        let node_of: HashMap<TrackId, usize> = nodes.iter().enumerate().map(|(i, &t)| (t, i)).collect();
        let mut adjacency = vec![BTreeMap::new(); nodes.len()];
        for &(a, b, w) in edges {
            if a == b {
                return Err(Error::InvalidInput(format!("self edge on track {a}")));
            }
            let (ia, ib) = (
                *node_of.get(&a).ok_or(Error::UnknownTrack(a))?,
                *node_of.get(&b).ok_or(Error::UnknownTrack(b))?,
            );
            *adjacency[ia].entry(ib).or_insert(0) += w;
            *adjacency[ib].entry(ia).or_insert(0) += w;
        }
        Ok(TrackGraph {
            nodes,
            adjacency,
            node_of,
        })
    }

    pub fn node(&self, track: TrackId) -> Option<usize> {
        self.node_of.get(&track).copied()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(|a| a.len()).sum::<usize>() / 2
    }

    pub fn total_weight(&self) -> f64 {
        self.adjacency
            .iter()
            .flat_map(|a| a.values())
            .map(|&w| w as f64)
            .sum::<f64>()
            / 2.0
    }

    pub fn multiplicity(&self, a: TrackId, b: TrackId) -> u32 {
        match (self.node(a), self.node(b)) {
            (Some(ia), Some(ib)) => self.adjacency[ia].get(&ib).copied().unwrap_or(0),
            _ => 0,
        }
    }

    /// Neighbouring track ids of `track`.
    pub fn neighbors(&self, track: TrackId) -> Option<impl Iterator<Item = TrackId> + '_> {
        let i = self.node(track)?;
        Some(self.adjacency[i].keys().map(move |&j| self.nodes[j]))
    }
}

pub fn build_track_graph(sampled: &[TrackId], tracks: &[Track], views: &[View]) -> Result<TrackGraph> {
    let by_id: HashMap<TrackId, &Track> = tracks.iter().map(|t| (t.id, t)).collect();
    let index = view_index(views)?;
    // per view: label -> sampled tracks in that superpixel
    let mut per_view: BTreeMap<ViewId, BTreeMap<u32, Vec<TrackId>>> = BTreeMap::new();
    for &tid in sampled {
        let t = by_id.get(&tid).ok_or(Error::UnknownTrack(tid))?;
        for &(v, k) in &t.observations {
            let label = views[index[&v]]
                .label(k)
                .ok_or_else(|| Error::InvalidInput(format!("view {v} has no superpixel labels")))?;
            per_view.entry(v).or_default().entry(label).or_default().push(tid);
        }
    }
    let mut counts: BTreeMap<(TrackId, TrackId), u32> = BTreeMap::new();
    for (v, cells) in &per_view {
        let sp = views[index[v]].superpixels.as_ref().expect("labels checked above");
        let mut pairs: BTreeSet<(TrackId, TrackId)> = BTreeSet::new();
        for (&label, members) in cells {
            for (x, &a) in members.iter().enumerate() {
                for &b in &members[x + 1..] {
                    pairs.insert((a.min(b), a.max(b)));
                }
            }
            for n in sp.neighbors(label) {
                if n <= label {
                    continue;
                }
                if let Some(others) = cells.get(&n) {
                    for &a in members {
                        for &b in others {
                            if a != b {
                                pairs.insert((a.min(b), a.max(b)));
                            }
                        }
                    }
                }
            }
        }
        for p in pairs {
            *counts.entry(p).or_insert(0) += 1;
        }
    }
    let edges: Vec<(TrackId, TrackId, u32)> = counts.into_iter().map(|((a, b), w)| (a, b, w)).collect();
    TrackGraph::from_edges(sampled.to_vec(), &edges)
}

/// Keypoint correspondences between two views implied by the tracks.
pub fn track_correspondences(tracks: &[Track], a: ViewId, b: ViewId) -> Vec<(TrackId, usize, usize)> {
    tracks
        .iter()
        .filter_map(|t| Some((t.id, t.keypoint_in(a)?, t.keypoint_in(b)?)))
        .collect()
}
