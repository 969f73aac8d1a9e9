#![allow(dead_code)]

use std::collections::{BTreeSet, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tcsfm::correspondence::{build_tracks, ViewEdge, ViewGraph};
use tcsfm::geometry::{exp_so3, project, CameraPose, Intrinsics, RelativeGeometry, SimilarityTransform, Vec2, Vec3};
use tcsfm::sfm::two_view::{estimate_relative_pose, TwoViewOptions};
use tcsfm::sfm::{bundle_adjust, BaOptions, Observation, Point3D, Reconstruction};
use tcsfm::synth::SyntheticScene;
use tcsfm::{PipelineConfig, TrackId};

/// Config used for the synthetic end-to-end scenes: the per-view track
/// threshold is scaled by the sampled fraction.
pub fn synthetic_config() -> PipelineConfig {
    PipelineConfig {
        scale_min_tracks: true,
        ..PipelineConfig::default()
    }
}

pub fn intrinsics() -> Intrinsics {
    Intrinsics::new(800.0, 800.0, 512.0, 384.0).unwrap()
}

/// Cameras on an arc of radius 8 looking at the origin.
pub fn arc_poses(n: usize) -> Vec<CameraPose> {
    (0..n)
        .map(|i| {
            let a = i as f64 * 0.18;
            let c = Vec3::new(8.0 * a.cos(), 8.0 * a.sin(), 1.0 + 0.3 * (i as f64 * 1.7).sin());
            CameraPose::look_at(c, Vec3::zeros(), Vec3::z()).unwrap()
        })
        .collect()
}

pub fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
    (0..n)
        .map(|_| Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-1.5..1.5)))
        .collect()
}

pub fn random_rotation(rng: &mut ChaCha8Rng, max_angle: f64) -> nalgebra::Matrix3<f64> {
    let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let axis = if axis.norm() < 1e-3 { Vec3::z() } else { axis.normalize() };
    exp_so3(&(axis * rng.random_range(0.0..max_angle)))
}

pub struct Split {
    pub a: Reconstruction,
    pub b: Reconstruction,
    pub graph: ViewGraph,
    /// Maps model-a coordinates to model-b coordinates.
    pub truth: SimilarityTransform,
    /// Largest camera-centre distance, in model-b units.
    pub diameter_b: f64,
}

pub struct Partition {
    pub models: Vec<Reconstruction>,
    pub graph: ViewGraph,
    /// World poses of all twelve cameras.
    pub poses: Vec<CameraPose>,
}

/// Twelve cameras on an arc observing 150 points. Model `m` holds the
/// views `parts[m].0`, expressed in the frame `parts[m].1(world)`. With
/// `sigma_px > 0` every pixel is perturbed, each model is bundle adjusted
/// and the two-view geometries are estimated from the noisy pixels.
pub fn partition(parts: &[(std::ops::Range<usize>, SimilarityTransform)], sigma_px: f64, seed: u64) -> Partition {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = intrinsics();
    let poses = arc_poses(12);
    let pts = random_points(&mut rng, 150);
    let noise = Normal::new(0.0, sigma_px.max(1e-300)).unwrap();
    let pixels: Vec<Vec<Vec2>> = poses
        .iter()
        .map(|p| {
            pts.iter()
                .map(|x| {
                    let px = project(p, &k, x).unwrap();
                    if sigma_px > 0.0 {
                        px + Vec2::new(noise.sample(&mut rng), noise.sample(&mut rng))
                    } else {
                        px
                    }
                })
                .collect()
        })
        .collect();
    let models = parts
        .iter()
        .enumerate()
        .map(|(id, (views, t))| {
            let mut r = Reconstruction::new(id);
            for v in views.clone() {
                r.poses.insert(v, t.transform_pose(&poses[v]));
                r.intrinsics.insert(v, k);
            }
            r.gauge = Some((views.start, views.start + 1));
            for (pid, x) in pts.iter().enumerate() {
                r.points.insert(pid, Point3D { position: t.apply(x), track: pid });
                for v in views.clone() {
                    r.observations.push(Observation { view: v, keypoint: pid, point: pid, pixel: pixels[v][pid] });
                }
            }
            if sigma_px > 0.0 {
                r = bundle_adjust(&r, &BaOptions::default()).0;
            }
            r
        })
        .collect();
    let mut edges = Vec::new();
    for i in 0..12 {
        for j in i + 1..12 {
            let geometry = if sigma_px > 0.0 {
                let pairs: Vec<(Vec2, Vec2)> = (0..pts.len()).map(|p| (pixels[i][p], pixels[j][p])).collect();
                let opts = TwoViewOptions { seed: (i * 12 + j) as u64, ..Default::default() };
                estimate_relative_pose(&k, &k, &pairs, &opts).ok().map(|r| r.geometry)
            } else {
                let (r, t) = poses[i].relative_to(&poses[j]);
                Some(RelativeGeometry { rotation: r, direction: t.normalize() })
            };
            edges.push(ViewEdge {
                i,
                j,
                weight: 0.2 + 0.01 * ((i + j) % 7) as f64,
                ratio_i: 0.2,
                ratio_j: 0.2,
                match_count: pts.len(),
                geometry,
            });
        }
    }
    let graph = ViewGraph::from_edges((0..12).collect(), edges);
    Partition { models, graph, poses }
}

pub fn diameter(poses: &[CameraPose]) -> f64 {
    let mut d: f64 = 0.0;
    for p in poses {
        for q in poses {
            d = d.max((p.center() - q.center()).norm());
        }
    }
    d
}

/// Model a holds views 0..7 in the world frame, model b views 5..12 in
/// the frame `truth(world)`.
pub fn split(scale: f64, angle_deg: f64, sigma_px: f64, seed: u64) -> Split {
    let truth = SimilarityTransform::new(
        exp_so3(&(Vec3::new(0.3, -0.5, 0.8).normalize() * angle_deg.to_radians())),
        Vec3::new(1.5, -2.0, 0.7),
        scale,
    )
    .unwrap();
    let p = partition(&[(0..7, SimilarityTransform::identity()), (5..12, truth)], sigma_px, seed);
    let diameter_b = scale * diameter(&p.poses);
    let mut models = p.models.into_iter();
    Split { a: models.next().unwrap(), b: models.next().unwrap(), graph: p.graph, truth, diameter_b }
}

/// Sampled-track ids whose observations come from more than one duplicate
/// instance, according to the ground truth of `scene`.
pub fn mixed_tracks(scene: &SyntheticScene) -> HashSet<TrackId> {
    let kp = scene.truth.keypoint_points();
    build_tracks(&scene.views, &scene.matches)
        .unwrap()
        .iter()
        .filter(|t| {
            let inst: BTreeSet<Option<usize>> =
                t.observations.iter().filter_map(|o| kp.get(o)).map(|&p| scene.truth.instance[p]).collect();
            inst.len() > 1
        })
        .map(|t| t.id)
        .collect()
}
