//! File formats: the JSON ingest document, the ground-truth sidecar,
//! scene specs, pose text files, binary PLY and the line-oriented
//! reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::community::CommunityLabeling;
use crate::correspondence::{Adjacency, Match, Superpixels, View, ViewId};
use crate::disambiguation::{AmbiguityVerdict, GsiReport, RemovedMatch};
use crate::error::{Error, Result};
use crate::geometry::{CameraPose, Intrinsics, Vec2, Vec3};
use crate::sfm::{Point3D, Reconstruction};
use crate::synth::{GroundTruth, SceneSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestSuperpixels {
    pub labels: Vec<u32>,
    /// Unordered pairs of adjacent labels.
    pub adjacency: Vec<(u32, u32)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestView {
    pub id: ViewId,
    pub intrinsics: Intrinsics,
    pub keypoints: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub superpixels: Option<IngestSuperpixels>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestDocument {
    pub views: Vec<IngestView>,
    pub matches: Vec<Match>,
}

impl IngestDocument {
    pub fn new(views: &[View], matches: &[Match]) -> Self {
        let views = views
            .iter()
            .map(|v| IngestView {
                id: v.id,
                intrinsics: v.intrinsics,
                keypoints: v.keypoints.iter().map(|k| [k.x, k.y]).collect(),
                superpixels: v.superpixels.as_ref().and_then(|s| match &s.adjacency {
                    Adjacency::Explicit(pairs) => Some(IngestSuperpixels {
                        labels: s.labels.clone(),
                        adjacency: pairs.iter().copied().collect(),
                    }),
                    Adjacency::Grid { .. } => None,
                }),
            })
            .collect();
        IngestDocument {
            views,
            matches: matches.to_vec(),
        }
    }

    pub fn into_parts(self) -> Result<(Vec<View>, Vec<Match>)> {
        let mut views = Vec::with_capacity(self.views.len());
        for v in self.views {
            let mut view = View::new(v.id, v.intrinsics, v.keypoints.iter().map(|k| Vec2::new(k[0], k[1])).collect());
            if let Some(sp) = v.superpixels {
                let adjacency: BTreeSet<(u32, u32)> = sp.adjacency.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
                view.superpixels = Some(Superpixels {
                    labels: sp.labels,
                    adjacency: Adjacency::Explicit(adjacency),
                });
            }
            view.validate()?;
            views.push(view);
        }
        Ok((views, self.matches))
    }
}

pub fn read_ingest(path: &Path) -> Result<(Vec<View>, Vec<Match>)> {
    let doc: IngestDocument = serde_json::from_reader(BufReader::new(fs::File::open(path)?))?;
    doc.into_parts()
}

pub fn write_ingest(path: &Path, views: &[View], matches: &[Match]) -> Result<()> {
    write_json(path, &IngestDocument::new(views, matches))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruth> {
    Ok(serde_json::from_reader(BufReader::new(fs::File::open(path)?))?)
}

/// TOML unless the file name ends in `.json`.
pub fn read_scene_spec(path: &Path) -> Result<SceneSpec> {
    let text = fs::read_to_string(path)?;
    let spec: SceneSpec = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text)?
    } else {
        toml::from_str(&text)?
    };
    spec.validate()?;
    Ok(spec)
}

/// One line per registered view: `view qw qx qy qz tx ty tz`.
pub fn poses_to_text(poses: &BTreeMap<ViewId, CameraPose>) -> String {
    let mut s = String::from("# view qw qx qy qz tx ty tz\n");
    for (v, p) in poses {
        let q = p.quaternion();
        let t = p.translation();
        writeln!(s, "{v} {} {} {} {} {} {} {}", q.w, q.i, q.j, q.k, t.x, t.y, t.z).expect("string write");
    }
    s
}

pub fn parse_poses(text: &str) -> Result<BTreeMap<ViewId, CameraPose>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || Error::Parse(format!("poses line {}: {line}", n + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 8 {
            return Err(bad());
        }
        let v: ViewId = f[0].parse().map_err(|_| bad())?;
        let x: Vec<f64> = f[1..].iter().map(|s| s.parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
        let q = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(x[0], x[1], x[2], x[3]));
        out.insert(v, CameraPose::from_quaternion(&q, Vec3::new(x[4], x[5], x[6])));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlyVertex {
    pub position: [f32; 3],
    pub color: [u8; 3],
}

pub const POINT_COLOR: [u8; 3] = [255, 255, 255];
pub const CAMERA_COLOR: [u8; 3] = [255, 0, 0];

/// Points of a model (white), followed by its camera centres (red) when
/// asked for.
pub fn model_vertices(recon: &Reconstruction, with_cameras: bool) -> Vec<PlyVertex> {
    let f = |p: &Vec3| [p.x as f32, p.y as f32, p.z as f32];
    let mut out: Vec<PlyVertex> = recon
        .points
        .values()
        .map(|p| PlyVertex {
            position: f(&p.position),
            color: POINT_COLOR,
        })
        .collect();
    if with_cameras {
        out.extend(recon.poses.values().map(|p| PlyVertex {
            position: f(p.center()),
            color: CAMERA_COLOR,
        }));
    }
    out
}

const PLY_PROPERTIES: [&str; 6] = [
    "property float x",
    "property float y",
    "property float z",
    "property uchar red",
    "property uchar green",
    "property uchar blue",
];

pub fn write_ply<W: Write>(mut w: W, vertices: &[PlyVertex]) -> Result<()> {
    let mut header = format!("ply\nformat binary_little_endian 1.0\nelement vertex {}\n", vertices.len());
    for p in PLY_PROPERTIES {
        header.push_str(p);
        header.push('\n');
    }
    header.push_str("end_header\n");
    let mut buf = header.into_bytes();
    buf.reserve(vertices.len() * 15);
    for v in vertices {
        for c in v.position {
            buf.extend_from_slice(&c.to_le_bytes());
        }
        buf.extend_from_slice(&v.color);
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn write_ply_file(path: &Path, vertices: &[PlyVertex]) -> Result<()> {
    write_ply(fs::File::create(path)?, vertices)
}

/// Reads the vertex layout written by [`write_ply`].
pub fn read_ply<R: Read>(r: R) -> Result<Vec<PlyVertex>> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    let next = |r: &mut BufReader<R>, line: &mut String| -> Result<String> {
        line.clear();
        if r.read_line(line)? == 0 {
            return Err(Error::Parse("PLY header ends early".into()));
        }
        Ok(line.trim_end().to_string())
    };
    if next(&mut r, &mut line)? != "ply" {
        return Err(Error::Parse("not a PLY file".into()));
    }
    let mut count = None;
    let mut props = Vec::new();
    loop {
        let l = next(&mut r, &mut line)?;
        if l == "end_header" {
            break;
        }
        if l.starts_with("comment") {
            continue;
        }
        if let Some(rest) = l.strip_prefix("format ") {
            if rest != "binary_little_endian 1.0" {
                return Err(Error::Parse(format!("unsupported PLY format {rest}")));
            }
        } else if let Some(rest) = l.strip_prefix("element vertex ") {
            count = Some(rest.trim().parse::<usize>().map_err(|_| Error::Parse(format!("bad vertex count {rest}")))?);
        } else if l.starts_with("element") {
            return Err(Error::Parse(format!("unexpected PLY element: {l}")));
        } else if l.starts_with("property") {
            props.push(l);
        }
    }
    if props != PLY_PROPERTIES {
        return Err(Error::Parse("unexpected PLY vertex properties".into()));
    }
    let n = count.ok_or_else(|| Error::Parse("PLY has no vertex element".into()))?;
    let mut data = vec![0u8; n * 15];
    r.read_exact(&mut data)?;
    Ok(data
        .chunks_exact(15)
        .map(|c| {
            let f = |k: usize| f32::from_le_bytes([c[4 * k], c[4 * k + 1], c[4 * k + 2], c[4 * k + 3]]);
            PlyVertex {
                position: [f(0), f(1), f(2)],
                color: [c[12], c[13], c[14]],
            }
        })
        .collect())
}

pub fn read_ply_file(path: &Path) -> Result<Vec<PlyVertex>> {
    read_ply(fs::File::open(path)?)
}

pub const POSES_FILE: &str = "poses.txt";
pub const POINTS_FILE: &str = "points.ply";

/// Writes `poses.txt` and `points.ply` into `dir`.
pub fn write_model(dir: &Path, recon: &Reconstruction) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(POSES_FILE), poses_to_text(&recon.poses))?;
    write_ply_file(&dir.join(POINTS_FILE), &model_vertices(recon, false))
}

/// Poses and points of a model directory. Observations are not stored;
/// point ids are vertex indices.
pub fn read_model(dir: &Path) -> Result<Reconstruction> {
    let mut r = Reconstruction::new(0);
    r.poses = parse_poses(&fs::read_to_string(dir.join(POSES_FILE))?)?;
    let ply = dir.join(POINTS_FILE);
    if ply.exists() {
        for (i, v) in read_ply_file(&ply)?.into_iter().enumerate() {
            let p = v.position;
            r.points.insert(
                i,
                Point3D {
                    position: Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64),
                    track: i,
                },
            );
        }
    }
    Ok(r)
}

pub fn write_communities(path: &Path, labeling: &CommunityLabeling) -> Result<()> {
    fs::write(path, labeling.to_text())?;
    Ok(())
}

/// Verdicts, per-track scores and removed matches as plain text sections.
pub fn disambiguation_report(verdicts: &[AmbiguityVerdict], reports: &[GsiReport], removed: &[RemovedMatch]) -> String {
    let mut s = String::from("# community members erroneous ratio ambiguous\n");
    for v in verdicts {
        writeln!(s, "community {} {} {} {:.6} {}", v.community, v.members, v.erroneous, v.erroneous_ratio, v.ambiguous)
            .expect("string write");
    }
    s.push_str("# track n_adj n_species gsi\n");
    for r in reports {
        writeln!(s, "track {} {} {} {:.6}", r.track, r.n_adj, r.n_species, r.gsi).expect("string write");
    }
    s.push_str("# view keypoint segment\n");
    for m in removed {
        writeln!(s, "removed {} {} {}", m.view, m.keypoint, m.segment).expect("string write");
    }
    s
}
