//! End-to-end run: view-graph, track sampling, track-graph, communities,
//! ambiguity scoring and correction, per-cluster reconstruction, pairwise
//! alignment, tree merge and final bundle adjustment.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use crate::community::{detect_communities, image_clusters, CommunityLabeling};
use crate::config::PipelineConfig;
use crate::correspondence::{
    assign_superpixels, build_track_graph, build_tracks, build_view_graph, sample_tracks, Match,
    Track, TrackId, View, ViewGraph, ViewId,
};
use crate::disambiguation::{
    all_gsi, apply_corrections, assign_track_segments, correct_ambiguous_cluster, flag_ambiguous, AmbiguityVerdict,
    CorrectionOutcome, GsiReport, RemovedMatch,
};
use crate::error::{Error, Result};
use crate::io;
use crate::merge::{
    components, estimate_alignment, final_bundle_adjust, merge_all, refine_alignment, AlignmentRecord, MergeOptions,
    PairwiseAlignment, RefineOptions,
};
use crate::sfm::two_view::{estimate_relative_pose, TwoViewOptions};
use crate::sfm::{
    merge_overlapping_clusters, reconstruct_cluster, register_remaining, retriangulate, ClusterContext, Reconstruction,
    ViewCluster,
};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct RunCounts {
    pub views: usize,
    pub matches: usize,
    pub tracks: usize,
    pub sampled_tracks: usize,
    pub track_graph_edges: usize,
    pub communities: usize,
    pub ambiguous_communities: usize,
    pub erroneous_tracks: usize,
    pub sub_clusters: usize,
    pub rejected_views: usize,
    pub removed_matches: usize,
    pub clusters: usize,
    pub models: usize,
    pub alignments: usize,
    pub merged_models: usize,
    pub registered_views: usize,
    pub points: usize,
    pub observations: usize,
}

/// Summary of a run, without timings.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunManifest {
    pub config: PipelineConfig,
    pub counts: RunCounts,
    /// Artifact name → file name inside the output directory.
    pub outputs: BTreeMap<String, String>,
    /// Views registered without auxiliary verification.
    pub unverified_views: Vec<ViewId>,
    /// Clusters whose reconstruction failed, with the reason.
    pub failed_clusters: Vec<(usize, String)>,
    /// Models left out because no alignment connects them to the merged
    /// component.
    pub dropped_models: Vec<usize>,
    pub error: Option<String>,
}

/// State of a run. Each stage fills its own fields.
#[derive(Clone, Debug, Default)]
pub struct Pipeline {
    pub config: PipelineConfig,
    pub views: Vec<View>,
    pub matches: Vec<Match>,
    pub tracks: Vec<Track>,
    pub view_graph: ViewGraph,
    pub sampled: Vec<TrackId>,
    pub track_graph_edges: usize,
    pub labeling: Option<CommunityLabeling>,
    pub gsi: Vec<GsiReport>,
    pub verdicts: Vec<AmbiguityVerdict>,
    pub corrections: Vec<CorrectionOutcome>,
    pub removed: Vec<RemovedMatch>,
    pub clusters: Vec<ViewCluster>,
    pub models: Vec<Reconstruction>,
    pub alignments: Vec<PairwiseAlignment>,
    pub model: Option<Reconstruction>,
    pub counts: RunCounts,
    pub failed_clusters: Vec<(usize, String)>,
    pub dropped_models: Vec<usize>,
    pub timings: Vec<(&'static str, f64)>,
}

fn stage<T>(name: &'static str, timings: &mut Vec<(&'static str, f64)>, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f().map_err(|e| e.in_stage(name));
    timings.push((name, start.elapsed().as_secs_f64()));
    info!("stage {name}: {:.3} s", start.elapsed().as_secs_f64());
    out
}

/// Relative geometry of every view-graph edge, estimated from the
/// keypoint correspondences implied by `tracks`.
pub fn estimate_edge_geometry(graph: &ViewGraph, views: &[View], tracks: &[Track], config: &PipelineConfig) -> ViewGraph {
    let index: HashMap<ViewId, &View> = views.iter().map(|v| (v.id, v)).collect();
    let mut per_view: HashMap<ViewId, Vec<usize>> = HashMap::new();
    for (n, t) in tracks.iter().enumerate() {
        for &(v, _) in &t.observations {
            per_view.entry(v).or_default().push(n);
        }
    }
    let edges = graph
        .edges
        .par_iter()
        .map(|e| {
            let mut e = e.clone();
            let (vi, vj) = (index[&e.i], index[&e.j]);
            let pairs: Vec<_> = per_view
                .get(&e.i)
                .into_iter()
                .flatten()
                .filter_map(|&n| Some((tracks[n].keypoint_in(e.i)?, tracks[n].keypoint_in(e.j)?)))
                .map(|(ki, kj)| (vi.keypoints[ki], vj.keypoints[kj]))
                .collect();
            let opts = TwoViewOptions {
                threshold_px: config.ransac_threshold_px,
                confidence: config.ransac_confidence,
                max_iterations: config.ransac_max_iterations,
                seed: config.seed ^ ((e.i as u64) << 32 | e.j as u64),
                ..Default::default()
            };
            e.geometry = estimate_relative_pose(&vi.intrinsics, &vj.intrinsics, &pairs, &opts)
                .ok()
                .filter(|r| r.inliers.len() >= config.min_tracks_per_view)
                .map(|r| r.geometry);
            e
        })
        .collect();
    ViewGraph::from_edges(graph.nodes.clone(), edges)
}

impl Pipeline {
    pub fn new(views: Vec<View>, matches: Vec<Match>, config: PipelineConfig) -> Self {
        Pipeline {
            config,
            views,
            matches,
            ..Default::default()
        }
    }

    /// Runs every stage in order. On error the completed stages' results
    /// stay in `self`.
    pub fn execute(&mut self) -> Result<()> {
        let cfg = self.config.clone();
        cfg.validate().map_err(|e| e.in_stage("config"))?;
        let mut timings = std::mem::take(&mut self.timings);
        let res = self.stages(&cfg, &mut timings);
        self.timings = timings;
        self.update_counts();
        res
    }

    fn stages(&mut self, cfg: &PipelineConfig, timings: &mut Vec<(&'static str, f64)>) -> Result<()> {
        stage("ingest", timings, || {
            self.views = self
                .views
                .par_iter()
                .map(|v| {
                    v.validate()?;
                    assign_superpixels(v, cfg.cell_size)
                })
                .collect::<Result<_>>()?;
            self.tracks = build_tracks(&self.views, &self.matches)?;
            Ok(())
        })?;
        stage("view_graph", timings, || {
            self.view_graph = build_view_graph(&self.views, &self.matches)?;
            Ok(())
        })?;
        let graph = stage("track_graph", timings, || {
            self.sampled = sample_tracks(&self.views, &self.tracks, &self.view_graph, cfg.tau_w)?;
            build_track_graph(&self.sampled, &self.tracks, &self.views)
        })?;
        self.track_graph_edges = graph.edge_count();
        let labeling = stage("communities", timings, || {
            if graph.is_empty() {
                return Ok(CommunityLabeling::from_labels(Vec::new(), Vec::new()));
            }
            detect_communities(&graph, cfg.seed, cfg.louvain_resolution)
        })?;
        self.labeling = Some(labeling.clone());

        let mut ambiguous: BTreeSet<usize> = BTreeSet::new();
        if cfg.disambiguation && graph.edge_count() > 0 {
            stage("gsi", timings, || {
                self.gsi = all_gsi(&graph, &labeling)?;
                self.verdicts = flag_ambiguous(&labeling, &self.gsi, cfg);
                Ok(())
            })?;
            ambiguous = self.verdicts.iter().filter(|v| v.ambiguous).map(|v| v.community).collect();
        }

        let min_tracks = cfg.effective_min_tracks(self.sampled.len(), self.tracks.len());
        let image = image_clusters(&labeling, &self.tracks, min_tracks);
        let mut clusters: Vec<ViewCluster> = Vec::new();
        if !ambiguous.is_empty() {
            let segments = assign_track_segments(&self.tracks, &labeling, &self.views);
            let outcomes = stage("correction", timings, || {
                let pre_graph = estimate_edge_geometry(&self.view_graph, &self.views, &self.tracks, cfg);
                let ctx = ClusterContext {
                    views: &self.views,
                    tracks: &self.tracks,
                    view_graph: &pre_graph,
                    config: cfg,
                };
                let outcomes = image
                    .par_iter()
                    .filter(|c| ambiguous.contains(&c.segment))
                    .map(|c| {
                        let views: BTreeSet<ViewId> = c.views.iter().copied().collect();
                        correct_ambiguous_cluster(&views, c.segment, &ctx, &segments, &ambiguous)
                    })
                    .collect::<Vec<Result<CorrectionOutcome>>>()
                    .into_iter()
                    .filter_map(|r| r.map_err(|e| warn!("correction failed: {e}")).ok())
                    .collect::<Vec<_>>();
                Ok(outcomes)
            })?;
            let mut segments = segments;
            let (tracks, removed) = apply_corrections(&self.tracks, &outcomes, &mut segments);
            self.tracks = tracks;
            self.removed = removed;
            for o in &outcomes {
                for sub in &o.sub_clusters {
                    if sub.len() >= 2 {
                        clusters.push(ViewCluster {
                            id: clusters.len(),
                            segment: Some(o.segment),
                            views: sub.clone(),
                        });
                    }
                }
            }
            self.corrections = outcomes;
        }
        let corrected: BTreeSet<usize> = self.corrections.iter().map(|o| o.segment).collect();
        for c in &image {
            if !corrected.contains(&c.segment) && c.views.len() >= 2 {
                clusters.push(ViewCluster {
                    id: clusters.len(),
                    segment: Some(c.segment),
                    views: c.views.iter().copied().collect(),
                });
            }
        }
        if clusters.is_empty() {
            clusters.push(ViewCluster {
                id: 0,
                segment: None,
                views: self.views.iter().map(|v| v.id).collect(),
            });
        }
        self.clusters = merge_overlapping_clusters(clusters, cfg.min_common_images);

        stage("edge_geometry", timings, || {
            self.view_graph = estimate_edge_geometry(&self.view_graph, &self.views, &self.tracks, cfg);
            Ok(())
        })?;
        let ctx = ClusterContext {
            views: &self.views,
            tracks: &self.tracks,
            view_graph: &self.view_graph,
            config: cfg,
        };
        let results: Vec<(usize, Result<Reconstruction>)> = stage("reconstruction", timings, || {
            Ok(self.clusters.par_iter().map(|c| (c.id, reconstruct_cluster(c, &ctx))).collect())
        })?;
        let mut models = Vec::new();
        for (id, r) in results {
            match r {
                Ok(mut m) if m.num_registered() >= 2 => {
                    m.id = models.len();
                    models.push(m);
                }
                Ok(_) => self.failed_clusters.push((id, "fewer than two views registered".into())),
                Err(e) => {
                    warn!("cluster {id}: {e}");
                    self.failed_clusters.push((id, e.to_string()));
                }
            }
        }
        self.models = models;
        if self.models.is_empty() {
            return Err(Error::InitializationFailed("no cluster could be reconstructed".into()).in_stage("reconstruction"));
        }

        let min_support = cfg.min_alignment_support;
        let alignments = stage("alignment", timings, || {
            let pairs: Vec<(usize, usize)> =
                (0..self.models.len()).flat_map(|a| (a + 1..self.models.len()).map(move |b| (a, b))).collect();
            let models = &self.models;
            let graph = &self.view_graph;
            Ok(pairs
                .par_iter()
                .filter_map(|&(a, b)| {
                    let al = estimate_alignment((a, &models[a]), (b, &models[b]), graph).ok()?;
                    (al.support >= min_support).then(|| refine_alignment(&al, &models[a], &models[b], &RefineOptions::default()))
                })
                .collect::<Vec<_>>())
        })?;
        self.alignments = alignments;

        let opts = MergeOptions { min_support, min_pairs: cfg.min_alignment_pairs };
        let merged = stage("merge", timings, || {
            let comps = components(self.models.len(), &self.alignments, &opts);
            let distinct = |c: &Vec<usize>| {
                c.iter().flat_map(|&m| self.models[m].poses.keys().copied()).collect::<BTreeSet<_>>().len()
            };
            let best = comps
                .iter()
                .max_by(|x, y| distinct(x).cmp(&distinct(y)).then(y.cmp(x)))
                .expect("at least one model")
                .clone();
            if comps.len() > 1 {
                warn!("{} disconnected model groups; keeping {:?}", comps.len(), best);
            }
            self.dropped_models = (0..self.models.len()).filter(|m| !best.contains(m)).collect();
            let remap: HashMap<usize, usize> = best.iter().enumerate().map(|(n, &m)| (m, n)).collect();
            let subset: Vec<Reconstruction> = best.iter().map(|&m| self.models[m].clone()).collect();
            let als: Vec<PairwiseAlignment> = self
                .alignments
                .iter()
                .filter(|al| remap.contains_key(&al.a) && remap.contains_key(&al.b))
                .map(|al| PairwiseAlignment {
                    a: remap[&al.a],
                    b: remap[&al.b],
                    ..al.clone()
                })
                .collect();
            merge_all(&subset, &als, &opts)
        })?;

        let model = stage("final_ba", timings, || {
            let thr = cfg.ransac_threshold_px;
            let all: BTreeSet<ViewId> = self.views.iter().map(|v| v.id).collect();
            let mut m = merged;
            for gate in [8.0, 2.0, 1.0] {
                m = retriangulate(m, &all, &ctx, gate * thr);
                m = final_bundle_adjust(&m, &ctx.ba_options()).0;
                m.filter_observations(gate * thr);
                m.prune_points();
            }
            let (mut m, added) = register_remaining(m, &all, &ctx);
            if !added.is_empty() {
                info!("registered {} further views", added.len());
            }
            m.prune_points();
            m.id = 0;
            Ok(m)
        })?;
        self.model = Some(model);
        Ok(())
    }

    fn update_counts(&mut self) {
        let model = self.model.as_ref();
        self.counts = RunCounts {
            views: self.views.len(),
            matches: self.matches.iter().map(|m| m.pairs.len()).sum(),
            tracks: self.tracks.len(),
            sampled_tracks: self.sampled.len(),
            track_graph_edges: self.track_graph_edges,
            communities: self.labeling.as_ref().map_or(0, |l| l.count),
            ambiguous_communities: self.verdicts.iter().filter(|v| v.ambiguous).count(),
            erroneous_tracks: self.gsi.iter().filter(|r| r.gsi > self.config.tau_gs).count(),
            sub_clusters: self.corrections.iter().map(|o| o.sub_clusters.len()).sum(),
            rejected_views: self.corrections.iter().map(|o| o.rejected.len()).sum(),
            removed_matches: self.removed.len(),
            clusters: self.clusters.len(),
            models: self.models.len(),
            alignments: self.alignments.len(),
            merged_models: self.models.len() - self.dropped_models.len().min(self.models.len()),
            registered_views: model.map_or(0, |m| m.num_registered()),
            points: model.map_or(0, |m| m.points.len()),
            observations: model.map_or(0, |m| m.observations.len()),
        };
    }

    pub fn unverified_views(&self) -> Vec<ViewId> {
        let mut v: Vec<ViewId> = self.corrections.iter().flat_map(|o| o.warnings.iter().copied()).collect();
        v.sort_unstable();
        v
    }

    /// Writes the merged model and every report into `dir` and returns the
    /// manifest.
    pub fn write_outputs(&self, dir: &Path, error: Option<&Error>) -> Result<RunManifest> {
        fs::create_dir_all(dir)?;
        let mut outputs = BTreeMap::new();
        if let Some(m) = &self.model {
            io::write_model(dir, m)?;
            outputs.insert("poses".to_string(), io::POSES_FILE.to_string());
            outputs.insert("points".to_string(), io::POINTS_FILE.to_string());
        }
        if let Some(l) = &self.labeling {
            io::write_communities(&dir.join("communities.txt"), l)?;
            outputs.insert("communities".to_string(), "communities.txt".to_string());
        }
        if self.config.disambiguation {
            fs::write(dir.join("disambiguation.txt"), io::disambiguation_report(&self.verdicts, &self.gsi, &self.removed))?;
            outputs.insert("disambiguation".to_string(), "disambiguation.txt".to_string());
        }
        let clusters: Vec<(usize, Option<usize>, Vec<ViewId>)> =
            self.clusters.iter().map(|c| (c.id, c.segment, c.views.iter().copied().collect())).collect();
        io::write_json(&dir.join("clusters.json"), &clusters)?;
        outputs.insert("clusters".to_string(), "clusters.json".to_string());
        let records: Vec<AlignmentRecord> = self.alignments.iter().map(|a| a.record()).collect();
        io::write_json(&dir.join("alignments.json"), &records)?;
        outputs.insert("alignments".to_string(), "alignments.json".to_string());
        let timings: BTreeMap<&str, f64> = self.timings.iter().copied().collect();
        io::write_json(&dir.join("timings.json"), &timings)?;
        outputs.insert("timings".to_string(), "timings.json".to_string());
        outputs.insert("manifest".to_string(), "manifest.json".to_string());
        let manifest = RunManifest {
            config: self.config.clone(),
            counts: self.counts.clone(),
            outputs,
            unverified_views: self.unverified_views(),
            failed_clusters: self.failed_clusters.clone(),
            dropped_models: self.dropped_models.clone(),
            error: error.map(|e| e.to_string()),
        };
        io::write_json(&dir.join("manifest.json"), &manifest)?;
        Ok(manifest)
    }
}

/// Reads the ingest file, runs every stage and writes the outputs into
/// `out_dir`. Outputs of completed stages are written even when a later
/// stage fails.
pub fn run_pipeline(input: &Path, config: &PipelineConfig, out_dir: &Path) -> Result<RunManifest> {
    let (views, matches) = io::read_ingest(input).map_err(|e| e.in_stage("ingest"))?;
    let mut p = Pipeline::new(views, matches, config.clone());
    match p.execute() {
        Ok(()) => p.write_outputs(out_dir, None),
        Err(e) => {
            if let Err(w) = p.write_outputs(out_dir, Some(&e)) {
                warn!("could not write partial outputs: {w}");
            }
            Err(e)
        }
    }
}
