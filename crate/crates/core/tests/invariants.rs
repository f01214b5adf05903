use nalgebra::Vector3;
use proptest::prelude::*;

use protip::geom::pose_delta;
use protip::raster::Raster;
use protip::refine::{ncc, objective, refine_calibration, RefineConfig, RefineStatus};
use protip::simulate::random_calibration;
use protip::solve::{ransac_calibrate, solve_matches, Correspondence, RansacConfig};
use protip::sweep::{Frame, ImagingGeometry, Sweep};
use protip::{ImagePoint, RigidTransform};

fn vec3(range: f64) -> impl Strategy<Value = Vector3<f64>> {
    (-range..range, -range..range, -range..range).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn pose() -> impl Strategy<Value = RigidTransform> {
    (vec3(1.0), 0.0..3.1, vec3(300.0)).prop_map(|(axis, angle, t)| {
        let axis = if axis.norm() < 1e-3 { Vector3::z() } else { axis };
        RigidTransform::from_axis_angle(axis, angle).with_translation(t)
    })
}

fn image_point() -> impl Strategy<Value = ImagePoint> {
    (0.0..128.0, 0.0..128.0).prop_map(|(x, y)| ImagePoint::new(x, y))
}

/// Matches consistent with `c` up to `noise` mm of image-point error.
fn matches(c: RigidTransform, noise: f64) -> impl Strategy<Value = Vec<Correspondence>> {
    prop::collection::vec((vec3(60.0), pose(), image_point(), pose(), image_point(), vec3(1.0)), 4..12).prop_map(
        move |items| {
            items
                .into_iter()
                .map(|(world, pa, a, pb, b, e)| {
                    let place = |pose: RigidTransform, p: ImagePoint| {
                        let q = pose.transform_point(&c.transform_point(&p.to_plane()));
                        RigidTransform::identity().with_translation(world - q).compose(&pose)
                    };
                    let b_obs = ImagePoint::new(b.x + noise * e.x, b.y + noise * e.y);
                    Correspondence::new(place(pa, a), a, place(pb, b), b_obs)
                })
                .collect()
        },
    )
}

fn assert_same(a: &RigidTransform, b: &RigidTransform, tol: f64) -> Result<(), TestCaseError> {
    let (dt, dr) = pose_delta(a, b);
    prop_assert!(dt <= tol && dr.to_radians() <= tol, "dt={dt} dr={dr}");
    Ok(())
}

fn textured_sweep(poses: &[RigidTransform], seed: u64) -> Sweep {
    let geom = ImagingGeometry::linear(24, 20, 1.0);
    Sweep {
        geometry: geom,
        frames: poses
            .iter()
            .enumerate()
            .map(|(i, &tracking)| Frame {
                index: i,
                intensity: Raster::from_fn(24, 20, |c, r| {
                    let v = (c as f64 * 0.4 + seed as f64).sin() * (r as f64 * 0.3 + i as f64 * 0.2).cos();
                    (128.0 + 100.0 * v) as u8
                }),
                true_labels: None,
                tracking,
            })
            .collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transforms_stay_rigid(a in pose(), b in pose(), w in 0.0..1.0) {
        prop_assert!(a.compose(&b).is_rigid(1e-9));
        prop_assert!(a.inverse().is_rigid(1e-9));
        prop_assert!(a.interpolate(&b, w).is_rigid(1e-9));
        assert_same(&a.compose(&a.inverse()), &RigidTransform::identity(), 1e-9)?;
    }

    #[test]
    fn solver_output_is_rigid(ms in matches(random_calibration(7), 0.5)) {
        let c = solve_matches(&ms).unwrap();
        prop_assert!(c.is_rigid(1e-9));
    }

    #[test]
    fn noiseless_matches_are_solved_exactly(
        (c, ms) in (0u64..1000).prop_flat_map(|s| {
            let c = random_calibration(s);
            (Just(c), matches(c, 0.0))
        })
    ) {
        assert_same(&solve_matches(&ms).unwrap(), &c, 1e-5)?;
    }

    #[test]
    fn world_motion_leaves_the_solution_unchanged(ms in matches(random_calibration(3), 0.5), g in pose()) {
        let moved: Vec<_> = ms.iter().map(|m| m.with_world_motion(&g)).collect();
        assert_same(&solve_matches(&moved).unwrap(), &solve_matches(&ms).unwrap(), 1e-9)?;
    }

    #[test]
    fn swapping_sweeps_leaves_the_solution_unchanged(ms in matches(random_calibration(4), 0.5)) {
        let swapped: Vec<_> = ms.iter().map(|m| m.swapped()).collect();
        assert_same(&solve_matches(&swapped).unwrap(), &solve_matches(&ms).unwrap(), 1e-9)?;
    }

    #[test]
    fn ransac_inliers_ignore_world_motion(ms in matches(random_calibration(5), 0.5), g in pose()) {
        let cfg = RansacConfig { iterations: 200, ..Default::default() };
        let moved: Vec<_> = ms.iter().map(|m| m.with_world_motion(&g)).collect();
        let (a, b) = (ransac_calibrate(&ms, &cfg).unwrap(), ransac_calibrate(&moved, &cfg).unwrap());
        prop_assert_eq!(&a.inliers, &b.inliers);
        assert_same(&a.calibration, &b.calibration, 1e-9)?;
    }

    #[test]
    fn ncc_is_affine_invariant(
        a in prop::collection::vec(0.0..255.0, 16..200),
        noise in prop::collection::vec(-50.0..50.0, 200),
        scale in 0.01f64..100.0,
        offset in -1e3..1e3,
        negate in any::<bool>(),
    ) {
        let b: Vec<f64> = a.iter().zip(&noise).map(|(x, n)| x + n).collect();
        let valid = vec![true; a.len()];
        let reference = ncc(&a, &b, &valid);
        prop_assume!(!reference.degenerate);
        let s = if negate { -scale } else { scale };
        let t: Vec<f64> = b.iter().map(|v| s * v + offset).collect();
        let got = ncc(&a, &t, &valid);
        let expected = if negate { -reference.score } else { reference.score };
        prop_assert!((got.score - expected).abs() < 1e-9);
        prop_assert!((-1.0..=1.0).contains(&got.score));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn refinement_never_lowers_the_objective(seed in 0u64..100, tilt in -0.3..0.3, offset in vec3(2.0)) {
        let a_poses: Vec<_> = (0..6)
            .map(|i| RigidTransform::rotation_x(tilt).with_translation(Vector3::new(0.0, 0.0, i as f64 * 0.8)))
            .collect();
        let b_poses: Vec<_> = (0..12)
            .map(|i| {
                RigidTransform::rotation_y(std::f64::consts::FRAC_PI_2)
                    .with_translation(Vector3::new(2.0 + i as f64 * 1.5, 0.0, 12.0))
            })
            .collect();
        let (a, b) = (textured_sweep(&a_poses, seed), textured_sweep(&b_poses, seed + 1));
        let c0 = RigidTransform::identity().with_translation(offset);
        let cfg = RefineConfig {
            translation_steps: vec![1.0, 0.5],
            rotation_steps: vec![1.0, 0.5],
            frame_stride: 1,
            max_passes: 5,
            ..Default::default()
        };
        let out = refine_calibration(&a, &b, &c0, &cfg).unwrap();
        prop_assert_eq!(out.status, RefineStatus::Refined);
        prop_assert!(out.final_objective >= out.initial_objective);
        prop_assert_eq!(out.final_objective, objective(&a, &b, &out.calibration, &cfg).value);
        prop_assert!(out.calibration.is_rigid(1e-9));
    }
}
