mod common;

use common::{arc_poses, intrinsics, random_points, random_rotation};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tcsfm::geometry::{project, rotation_error, skew, translation_direction_error, CameraPose, Mat3, Vec2, Vec3};
use tcsfm::sfm::pnp::{estimate_pose_pnp, PnpOptions};
use tcsfm::sfm::triangulation::{triangulate_track, TriangulationOptions};
use tcsfm::sfm::two_view::{eight_point, estimate_relative_pose, refine_relative_pose, sampson_error, TwoViewOptions};
use tcsfm::sfm::{bundle_adjust, BaOptions, Observation, Point3D, Reconstruction};

fn normalized(p: &Vec2) -> Vec2 {
    let k = intrinsics();
    Vec2::new((p.x - k.cx) / k.fx, (p.y - k.cy) / k.fy)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn triangulation_recovers_noise_free_points(seed in 0u64..10_000, views in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = intrinsics();
        let poses = arc_poses(12);
        let x = random_points(&mut rng, 1)[0];
        let start = rng.random_range(0..12 - views);
        let obs: Vec<_> = (start..start + views).map(|v| (poses[v], k, project(&poses[v], &k, &x).unwrap())).collect();
        let est = triangulate_track(&obs, &TriangulationOptions::default()).unwrap();
        prop_assert!((est - x).norm() < 1e-8);
    }

    #[test]
    fn pnp_recovers_pose_with_outliers(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = intrinsics();
        let pose = arc_poses(12)[rng.random_range(0..12)];
        let noise = Normal::new(0.0, 0.5).unwrap();
        let pts = random_points(&mut rng, 80);
        let corr: Vec<(Vec2, Vec3)> = pts
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let px = project(&pose, &k, x).unwrap();
                let px = if i % 5 == 0 {
                    Vec2::new(rng.random_range(0.0..1024.0), rng.random_range(0.0..768.0))
                } else {
                    px + Vec2::new(noise.sample(&mut rng), noise.sample(&mut rng))
                };
                (px, *x)
            })
            .collect();
        let res = estimate_pose_pnp(&corr, &k, &PnpOptions { seed, ..Default::default() }).unwrap();
        prop_assert!(rotation_error(res.pose.rotation(), pose.rotation()).to_degrees() < 0.5);
        prop_assert!((res.pose.center() - pose.center()).norm() < 0.1);
        prop_assert!(res.inliers.len() >= 60);
    }

    #[test]
    fn eight_point_satisfies_epipolar_constraint(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = intrinsics();
        let poses = arc_poses(12);
        let (i, j) = (rng.random_range(0..6), rng.random_range(6..12));
        let pts = random_points(&mut rng, 30);
        let x1: Vec<Vec2> = pts.iter().map(|x| normalized(&project(&poses[i], &k, x).unwrap())).collect();
        let x2: Vec<Vec2> = pts.iter().map(|x| normalized(&project(&poses[j], &k, x).unwrap())).collect();
        let e = eight_point(&x1, &x2).unwrap();
        for (a, b) in x1.iter().zip(&x2) {
            prop_assert!(sampson_error(&e, a, b) < 1e-10);
        }
    }

    #[test]
    fn relative_pose_reaches_the_sampson_optimum(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = intrinsics();
        let poses = arc_poses(12);
        let (i, j) = (rng.random_range(0..5), rng.random_range(7..12));
        let noise = Normal::new(0.0, 0.5).unwrap();
        let pts = random_points(&mut rng, 120);
        let pairs: Vec<(Vec2, Vec2)> = pts
            .iter()
            .map(|x| {
                let a = project(&poses[i], &k, x).unwrap() + Vec2::new(noise.sample(&mut rng), noise.sample(&mut rng));
                let b = project(&poses[j], &k, x).unwrap() + Vec2::new(noise.sample(&mut rng), noise.sample(&mut rng));
                (a, b)
            })
            .collect();
        let rel = estimate_relative_pose(&k, &k, &pairs, &TwoViewOptions { seed, ..Default::default() }).unwrap();
        let (r, t) = poses[i].relative_to(&poses[j]);
        prop_assert!(rotation_error(&rel.geometry.rotation, &r).to_degrees() < 2.0);
        prop_assert!(translation_direction_error(&rel.geometry.direction, &t).unwrap().to_degrees() < 2.0);
        let x1: Vec<Vec2> = pairs.iter().map(|p| normalized(&p.0)).collect();
        let x2: Vec<Vec2> = pairs.iter().map(|p| normalized(&p.1)).collect();
        let all: Vec<usize> = (0..pairs.len()).collect();
        let cost = |r: &Mat3, t: &Vec3| {
            let e = skew(t) * r;
            all.iter().map(|&n| sampson_error(&e, &x1[n], &x2[n])).sum::<f64>()
        };
        let (rg, tg) = refine_relative_pose(&r, &t.normalize(), &x1, &x2, &all);
        prop_assert!(cost(&rel.geometry.rotation, &rel.geometry.direction) <= cost(&rg, &tg) * (1.0 + 1e-6));
    }

    #[test]
    fn bundle_adjustment_cost_never_increases(seed in 0u64..10_000, sigma in 0.0..2.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = intrinsics();
        let truth = arc_poses(6);
        let pts = random_points(&mut rng, 60);
        let noise = Normal::new(0.0, sigma.max(1e-9)).unwrap();
        let mut r = Reconstruction::new(0);
        for (v, p) in truth.iter().enumerate() {
            let jitter = random_rotation(&mut rng, 0.02);
            let c = p.center() + Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng)) * 0.01;
            let pose = if v < 2 { *p } else { CameraPose::from_rotation_center(jitter * p.rotation(), c) };
            r.poses.insert(v, pose);
            r.intrinsics.insert(v, k);
        }
        r.gauge = Some((0, 1));
        for (pid, x) in pts.iter().enumerate() {
            let moved = x + Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng)) * 0.02;
            r.points.insert(pid, Point3D { position: moved, track: pid });
            for (v, p) in truth.iter().enumerate() {
                let px = project(p, &k, x).unwrap() + Vec2::new(noise.sample(&mut rng), noise.sample(&mut rng));
                r.observations.push(Observation { view: v, keypoint: pid, point: pid, pixel: px });
            }
        }
        let (out, report) = bundle_adjust(&r, &BaOptions::default());
        prop_assert!(report.cost_history.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(report.final_cost <= report.initial_cost);
        prop_assert!(out.rms_reprojection() <= r.rms_reprojection() + 1e-9);
        prop_assert!(out.check_invariants().is_ok());
    }
}
