//! Essential-matrix estimation and two-view initialization.

use nalgebra::{Matrix3, SMatrix, SymmetricEigen, SVD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::bundle::{bundle_adjust, BaOptions};
use super::ransac::{adaptive_iterations, draw};
use super::triangulation::{triangulate_track, TriangulationOptions};
use super::{Observation, Point3D, Reconstruction};
use crate::correspondence::{TrackId, ViewId};
use crate::error::{Error, Result};
use crate::geometry::{exp_so3, skew, CameraPose, Intrinsics, Mat3, RelativeGeometry, Vec2, Vec3};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TwoViewOptions {
    pub threshold_px: f64,
    pub confidence: f64,
    pub max_iterations: usize,
    pub seed: u64,
    pub min_inlier_ratio: f64,
    pub min_median_angle_deg: f64,
    pub ba: BaOptions,
}

impl Default for TwoViewOptions {
    fn default() -> Self {
        TwoViewOptions {
            threshold_px: 4.0,
            confidence: 0.9999,
            max_iterations: 2000,
            seed: 0,
            min_inlier_ratio: 0.5,
            min_median_angle_deg: 1.0,
            ba: BaOptions::default(),
        }
    }
}

/// One correspondence between the two views of a pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairMatch {
    pub track: TrackId,
    pub keypoint_i: usize,
    pub keypoint_j: usize,
    pub pixel_i: Vec2,
    pub pixel_j: Vec2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelativePose {
    pub geometry: RelativeGeometry,
    pub inliers: Vec<usize>,
}

fn hartley(pts: &[Vec2]) -> (Vec<Vec2>, Mat3) {
    let n = pts.len() as f64;
    let mean = pts.iter().sum::<Vec2>() / n;
    let spread = pts.iter().map(|p| (p - mean).norm()).sum::<f64>() / n;
    let s = if spread > 1e-15 { std::f64::consts::SQRT_2 / spread } else { 1.0 };
    let t = Mat3::new(s, 0.0, -s * mean.x, 0.0, s, -s * mean.y, 0.0, 0.0, 1.0);
    (pts.iter().map(|p| (p - mean) * s).collect(), t)
}

/// Eight-point essential matrix from normalized image coordinates,
/// `x2ᵀ E x1 = 0`.
pub fn eight_point(x1: &[Vec2], x2: &[Vec2]) -> Option<Mat3> {
    if x1.len() < 8 || x1.len() != x2.len() {
        return None;
    }
    let (a, t1) = hartley(x1);
    let (b, t2) = hartley(x2);
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    for (p, q) in a.iter().zip(&b) {
        let row = SMatrix::<f64, 9, 1>::from_column_slice(&[
            q.x * p.x,
            q.x * p.y,
            q.x,
            q.y * p.x,
            q.y * p.y,
            q.y,
            p.x,
            p.y,
            1.0,
        ]);
        ata += row * row.transpose();
    }
    let eig = SymmetricEigen::new(ata);
    let (imin, _) = eig.eigenvalues.iter().enumerate().min_by(|x, y| x.1.total_cmp(y.1))?;
    let e = eig.eigenvectors.column(imin);
    let en = Matrix3::new(e[0], e[1], e[2], e[3], e[4], e[5], e[6], e[7], e[8]);
    let e = t2.transpose() * en * t1;
    let svd = SVD::new(e, true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let e = u * Mat3::from_diagonal(&Vec3::new(1.0, 1.0, 0.0)) * vt;
    let n = e.norm();
    (n > 1e-300).then(|| e / n)
}

pub fn sampson_error(e: &Mat3, x1: &Vec2, x2: &Vec2) -> f64 {
    let p = Vec3::new(x1.x, x1.y, 1.0);
    let q = Vec3::new(x2.x, x2.y, 1.0);
    let ep = e * p;
    let etq = e.transpose() * q;
    let num = q.dot(&ep);
    let den = ep.x * ep.x + ep.y * ep.y + etq.x * etq.x + etq.y * etq.y;
    if den < 1e-300 {
        return f64::INFINITY;
    }
    num * num / den
}

fn depth_pair(r: &Mat3, t: &Vec3, x1: &Vec2, x2: &Vec2) -> (f64, f64) {
    // midpoint-free linear solve of d1 R b1 + t = d2 b2
    let b1 = r * Vec3::new(x1.x, x1.y, 1.0);
    let b2 = Vec3::new(x2.x, x2.y, 1.0);
    let a11 = b1.dot(&b1);
    let a12 = -b1.dot(&b2);
    let a22 = b2.dot(&b2);
    let r1 = -b1.dot(t);
    let r2 = b2.dot(t);
    let det = a11 * a22 - a12 * a12;
    if det.abs() < 1e-15 {
        return (0.0, 0.0);
    }
    ((r1 * a22 - a12 * r2) / det, (a11 * r2 - a12 * r1) / det)
}

/// The four `(R, t)` factorizations of `E`; the one placing most points
/// in front of both cameras wins.
pub fn decompose_essential(e: &Mat3, x1: &[Vec2], x2: &[Vec2]) -> Option<(Mat3, Vec3, usize)> {
    let svd = SVD::new(*e, true, true);
    let mut u = svd.u?;
    let mut vt = svd.v_t?;
    if u.determinant() < 0.0 {
        u = -u;
    }
    if vt.determinant() < 0.0 {
        vt = -vt;
    }
    let w = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let t = u.column(2).into_owned();
    let mut best: Option<(Mat3, Vec3, usize)> = None;
    for r in [u * w * vt, u * w.transpose() * vt] {
        for t in [t, -t] {
            let count = x1
                .iter()
                .zip(x2)
                .filter(|(a, b)| {
                    let (d1, d2) = depth_pair(&r, &t, a, b);
                    d1 > 0.0 && d2 > 0.0
                })
                .count();
            if best.as_ref().is_none_or(|b| count > b.2) {
                best = Some((r, t, count));
            }
        }
    }
    best
}

const MIN_ITERATIONS: usize = 500;

fn signed_sampson(e: &Mat3, x1: &Vec2, x2: &Vec2) -> f64 {
    let p = Vec3::new(x1.x, x1.y, 1.0);
    let q = Vec3::new(x2.x, x2.y, 1.0);
    let ep = e * p;
    let etq = e.transpose() * q;
    let den = ep.x * ep.x + ep.y * ep.y + etq.x * etq.x + etq.y * etq.y;
    if den < 1e-300 {
        return 0.0;
    }
    q.dot(&ep) / den.sqrt()
}

fn tangent_basis(t: &Vec3) -> (Vec3, Vec3) {
    let a = if t.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let u = t.cross(&a).normalize();
    (u, t.cross(&u).normalize())
}

/// Levenberg-Marquardt on the Sampson residuals of `idx` over the five
/// degrees of freedom of `(R, t)`, `t` kept at unit norm.
pub fn refine_relative_pose(r: &Mat3, t: &Vec3, x1: &[Vec2], x2: &[Vec2], idx: &[usize]) -> (Mat3, Vec3) {
    let apply = |r: &Mat3, t: &Vec3, d: &SMatrix<f64, 5, 1>| -> (Mat3, Vec3) {
        let (u, v) = tangent_basis(t);
        let r2 = exp_so3(&Vec3::new(d[0], d[1], d[2])) * r;
        let t2 = (t + u * d[3] + v * d[4]).normalize();
        (r2, t2)
    };
    let residuals = |r: &Mat3, t: &Vec3| -> Vec<f64> {
        let e = skew(t) * r;
        idx.iter().map(|&i| signed_sampson(&e, &x1[i], &x2[i])).collect()
    };
    let cost = |res: &[f64]| res.iter().map(|x| x * x).sum::<f64>();
    let (mut r, mut t) = (*r, t.normalize());
    let mut res = residuals(&r, &t);
    let mut c = cost(&res);
    let mut lambda = 1e-3;
    let h = 1e-7;
    for _ in 0..50 {
        let mut jac = vec![[0.0; 5]; idx.len()];
        for k in 0..5 {
            let mut d = SMatrix::<f64, 5, 1>::zeros();
            d[k] = h;
            let (rk, tk) = apply(&r, &t, &d);
            for (row, (a, b)) in jac.iter_mut().zip(residuals(&rk, &tk).iter().zip(&res)) {
                row[k] = (a - b) / h;
            }
        }
        let mut jtj = SMatrix::<f64, 5, 5>::zeros();
        let mut jtr = SMatrix::<f64, 5, 1>::zeros();
        for (row, e) in jac.iter().zip(&res) {
            let j = SMatrix::<f64, 5, 1>::from_column_slice(row);
            jtj += j * j.transpose();
            jtr += j * *e;
        }
        let mut improved = false;
        for _ in 0..8 {
            let mut a = jtj;
            for k in 0..5 {
                a[(k, k)] += lambda * (1.0 + jtj[(k, k)]);
            }
            let Some(d) = a.cholesky().map(|ch| ch.solve(&(-jtr))) else {
                lambda *= 10.0;
                continue;
            };
            let (r2, t2) = apply(&r, &t, &d);
            let res2 = residuals(&r2, &t2);
            let c2 = cost(&res2);
            if c2 < c {
                let rel = (c - c2) / c.max(1e-300);
                (r, t, res, c) = (r2, t2, res2, c2);
                lambda = (lambda * 0.1).max(1e-12);
                improved = rel > 1e-10;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (r, t)
}

/// Relative pose from pixel correspondences by RANSAC over the
/// eight-point solver. The direction is unit norm.
pub fn estimate_relative_pose(
    k1: &Intrinsics,
    k2: &Intrinsics,
    pairs: &[(Vec2, Vec2)],
    opts: &TwoViewOptions,
) -> Result<RelativePose> {
    if pairs.len() < 8 {
        return Err(Error::TooFewCorrespondences {
            required: 8,
            found: pairs.len(),
        });
    }
    let x1: Vec<Vec2> = pairs.iter().map(|p| k1.normalize(&p.0)).collect();
    let x2: Vec<Vec2> = pairs.iter().map(|p| k2.normalize(&p.1)).collect();
    let f = 0.25 * (k1.fx + k1.fy + k2.fx + k2.fy);
    let thr = (opts.threshold_px / f).powi(2);
    let inliers_of = |e: &Mat3| -> Vec<usize> {
        (0..x1.len()).filter(|&i| sampson_error(e, &x1[i], &x2[i]) < thr).collect()
    };
    // truncated quadratic score, lower is better
    let score = |e: &Mat3| -> f64 { (0..x1.len()).map(|i| sampson_error(e, &x1[i], &x2[i]).min(thr)).sum() };
    // decompose and refine on the consensus set of `e`
    let local = |e: &Mat3| -> Option<(Mat3, Vec3)> {
        let inl = inliers_of(e);
        if inl.len() < 8 {
            return None;
        }
        let a: Vec<Vec2> = inl.iter().map(|&i| x1[i]).collect();
        let b: Vec<Vec2> = inl.iter().map(|&i| x2[i]).collect();
        let (r, t, _) = decompose_essential(e, &a, &b)?;
        Some(refine_relative_pose(&r, &t, &x1, &x2, &inl))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<(f64, Mat3, Vec3)> = None;
    let mut best_support = 16;
    let min_iterations = MIN_ITERATIONS.min(opts.max_iterations);
    let mut needed = opts.max_iterations;
    let mut it = 0;
    while it < needed.max(min_iterations) {
        it += 1;
        let s = draw(&mut rng, x1.len(), 8);
        let a: Vec<Vec2> = s.iter().map(|&i| x1[i]).collect();
        let b: Vec<Vec2> = s.iter().map(|&i| x2[i]).collect();
        let Some(e) = eight_point(&a, &b) else { continue };
        // samples from a dominant plane can outscore good ones before refinement
        if inliers_of(&e).len() * 2 < best_support {
            continue;
        }
        let Some((mut r, mut t)) = local(&e) else { continue };
        let mut c = score(&(skew(&t) * r));
        // a second pass picks up points admitted by the refined model
        if let Some((r2, t2)) = local(&(skew(&t) * r)) {
            let c2 = score(&(skew(&t2) * r2));
            if c2 < c {
                (r, t, c) = (r2, t2, c2);
            }
        }
        if best.as_ref().is_none_or(|b| c < b.0) {
            let n = inliers_of(&(skew(&t) * r)).len();
            best_support = best_support.max(n);
            best = Some((c, r, t));
            needed = adaptive_iterations(n as f64 / x1.len() as f64, 8, opts.confidence, opts.max_iterations);
        }
    }
    let Some((_, mut r, mut t)) = best else {
        return Err(Error::DegenerateGeometry("no essential matrix with enough support".into()));
    };
    let mut best = inliers_of(&(skew(&t) * r));
    for _ in 0..3 {
        (r, t) = refine_relative_pose(&r, &t, &x1, &x2, &best);
        let inl = inliers_of(&(skew(&t) * r));
        let done = inl == best;
        best = inl;
        if done {
            break;
        }
    }
    if best.len() < 8 {
        return Err(Error::DegenerateGeometry("no essential matrix with enough support".into()));
    }
    // keep only inliers in front of both cameras
    let inliers: Vec<usize> = best
        .into_iter()
        .filter(|&i| {
            let (d1, d2) = depth_pair(&r, &t, &x1[i], &x2[i]);
            d1 > 0.0 && d2 > 0.0
        })
        .collect();
    Ok(RelativePose {
        geometry: RelativeGeometry {
            rotation: r,
            direction: t.normalize(),
        },
        inliers,
    })
}

/// Two-view model: first camera at the identity, unit baseline, inlier
/// correspondences triangulated and refined by bundle adjustment.
pub fn initialize_two_view(
    (view_i, view_j): (ViewId, ViewId),
    matches: &[PairMatch],
    (k_i, k_j): (&Intrinsics, &Intrinsics),
    opts: &TwoViewOptions,
) -> Result<Reconstruction> {
    let pairs: Vec<(Vec2, Vec2)> = matches.iter().map(|m| (m.pixel_i, m.pixel_j)).collect();
    let rel = estimate_relative_pose(k_i, k_j, &pairs, opts)?;
    let ratio = rel.inliers.len() as f64 / matches.len() as f64;
    if ratio < opts.min_inlier_ratio {
        return Err(Error::DegenerateGeometry(format!("inlier ratio {ratio:.3}")));
    }
    let r = rel.geometry.rotation;
    let mut angles: Vec<f64> = rel
        .inliers
        .iter()
        .map(|&i| {
            let b1 = r * k_i.bearing(&matches[i].pixel_i);
            let b2 = k_j.bearing(&matches[i].pixel_j);
            b1.dot(&b2).clamp(-1.0, 1.0).acos()
        })
        .collect();
    angles.sort_by(f64::total_cmp);
    let median = angles[angles.len() / 2];
    if median < opts.min_median_angle_deg.to_radians() {
        return Err(Error::DegenerateGeometry(format!(
            "median triangulation angle {:.3} deg",
            median.to_degrees()
        )));
    }
    let p1 = CameraPose::identity();
    let p2 = CameraPose::from_rotation_translation(r, rel.geometry.direction);
    let mut recon = Reconstruction::new(0);
    recon.poses.insert(view_i, p1);
    recon.poses.insert(view_j, p2);
    recon.intrinsics.insert(view_i, *k_i);
    recon.intrinsics.insert(view_j, *k_j);
    recon.gauge = Some((view_i, view_j));
    // residuals are judged after bundle adjustment
    let tri = TriangulationOptions {
        max_residual_px: f64::INFINITY,
        min_angle_deg: 0.0,
    };
    let all: Vec<usize> = (0..matches.len()).collect();
    triangulate_pairs(&mut recon, matches, &rel.inliers, &tri);
    if recon.points.len() < 8 {
        return Err(Error::DegenerateGeometry(format!("only {} points triangulated", recon.points.len())));
    }
    let (mut recon, _) = bundle_adjust(&recon, &opts.ba);
    // re-admit every match that agrees with the refined pose, then refine again
    for _ in 0..2 {
        recon.points.clear();
        recon.observations.clear();
        let strict = TriangulationOptions {
            max_residual_px: opts.threshold_px,
            min_angle_deg: 0.0,
        };
        triangulate_pairs(&mut recon, matches, &all, &strict);
        if recon.points.len() < 8 {
            return Err(Error::DegenerateGeometry("model collapsed after refinement".into()));
        }
        recon = bundle_adjust(&recon, &opts.ba).0;
    }
    recon.filter_observations(opts.threshold_px);
    recon.normalize_gauge();
    if recon.points.len() < 8 {
        return Err(Error::DegenerateGeometry("model collapsed after refinement".into()));
    }
    Ok(recon)
}

fn triangulate_pairs(recon: &mut Reconstruction, matches: &[PairMatch], which: &[usize], tri: &TriangulationOptions) {
    let (view_i, view_j) = recon.gauge.expect("two-view model has a gauge");
    let (p1, p2) = (recon.poses[&view_i], recon.poses[&view_j]);
    let (k_i, k_j) = (recon.intrinsics[&view_i], recon.intrinsics[&view_j]);
    for &i in which {
        let m = &matches[i];
        let obs = [(p1, k_i, m.pixel_i), (p2, k_j, m.pixel_j)];
        let Ok(x) = triangulate_track(&obs, tri) else { continue };
        recon.points.insert(m.track, Point3D { position: x, track: m.track });
        recon.observations.push(Observation {
            view: view_i,
            keypoint: m.keypoint_i,
            point: m.track,
            pixel: m.pixel_i,
        });
        recon.observations.push(Observation {
            view: view_j,
            keypoint: m.keypoint_j,
            point: m.track,
            pixel: m.pixel_j,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, rotation_error, translation_direction_error};
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn k() -> Intrinsics {
        Intrinsics::new(800.0, 800.0, 512.0, 384.0).unwrap()
    }

    pub(super) fn scene(sigma: f64, seed: u64) -> (CameraPose, CameraPose, Vec<PairMatch>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p1 = CameraPose::look_at(Vec3::new(0.0, -8.0, 1.0), Vec3::zeros(), Vec3::z()).unwrap();
        let p2 = CameraPose::look_at(Vec3::new(5.0, -6.2, 1.5), Vec3::zeros(), Vec3::z()).unwrap();
        let noise = Normal::new(0.0, sigma.max(1e-300)).unwrap();
        let mut n = || if sigma > 0.0 { Vec2::new(noise.sample(&mut rng), noise.sample(&mut rng)) } else { Vec2::zeros() };
        let mut rng2 = ChaCha8Rng::seed_from_u64(seed + 1000);
        let matches = (0..200)
            .map(|i| {
                let x = Vec3::new(rng2.random_range(-3.0..3.0), rng2.random_range(-3.0..3.0), rng2.random_range(-2.5..2.5));
                PairMatch {
                    track: i,
                    keypoint_i: i,
                    keypoint_j: i,
                    pixel_i: project(&p1, &k(), &x).unwrap() + n(),
                    pixel_j: project(&p2, &k(), &x).unwrap() + n(),
                }
            })
            .collect();
        (p1, p2, matches)
    }

    #[test]
    fn exact_pair_recovers_relative_pose() {
        let (p1, p2, m) = scene(0.0, 1);
        let recon = initialize_two_view((3, 7), &m, (&k(), &k()), &TwoViewOptions::default()).unwrap();
        let (r_true, t_true) = p1.relative_to(&p2);
        let est = recon.poses[&7];
        assert_eq!(recon.poses[&3], CameraPose::identity());
        assert!(rotation_error(est.rotation(), &r_true) < 1e-6);
        assert!(translation_direction_error(est.translation(), &t_true).unwrap() < 1e-6);
        assert!((est.translation().norm() - 1.0).abs() < 1e-9);
        assert!(recon.check_invariants().is_ok());
    }

    #[test]
    fn zero_baseline_is_degenerate() {
        let (p1, _, m) = scene(0.0, 2);
        let same: Vec<PairMatch> = m.iter().map(|x| PairMatch { pixel_j: x.pixel_i, ..*x }).collect();
        let _ = p1;
        assert!(matches!(
            initialize_two_view((0, 1), &same, (&k(), &k()), &TwoViewOptions::default()),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn noisy_pairs_within_half_degree() {
        for seed in 0..20 {
            let (p1, p2, m) = scene(1.0, 100 + seed);
            let opts = TwoViewOptions { seed, ..Default::default() };
            let recon = initialize_two_view((0, 1), &m, (&k(), &k()), &opts).unwrap();
            let (r_true, _) = p1.relative_to(&p2);
            let e = rotation_error(recon.poses[&1].rotation(), &r_true).to_degrees();
            assert!(e < 0.5, "seed {seed}: {e}");
        }
    }

    #[test]
    fn too_few_matches() {
        let (_, _, m) = scene(0.0, 3);
        assert!(matches!(
            initialize_two_view((0, 1), &m[..7], (&k(), &k()), &TwoViewOptions::default()),
            Err(Error::TooFewCorrespondences { .. })
        ));
    }
}
