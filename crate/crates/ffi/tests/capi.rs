use std::ffi::{CStr, CString};
use std::ptr;

use protip::phantom::default_phantom;
use protip::simulate::{random_calibration, simulate_pair, SimulationParams};
use protip::solve::Correspondence;
use protip::{ImagePoint, RigidTransform};
use protip_ffi::*;

fn last_error() -> String {
    let p = protip_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn row_major(t: &RigidTransform) -> Vec<f64> {
    let m = t.to_matrix4();
    (0..16).map(|i| m[(i / 4, i % 4)]).collect()
}

fn from_row_major(v: &[f64; 16]) -> RigidTransform {
    RigidTransform::from_matrix4(&nalgebra::Matrix4::from_row_slice(v)).unwrap()
}

/// Flattened arrays for the match functions.
fn flatten(ms: &[Correspondence]) -> [Vec<f64>; 4] {
    let mut out: [Vec<f64>; 4] = Default::default();
    for m in ms {
        out[0].extend(row_major(&m.pose_a));
        out[1].extend([m.point_a.x, m.point_a.y]);
        out[2].extend(row_major(&m.pose_b));
        out[3].extend([m.point_b.x, m.point_b.y]);
    }
    out
}

fn exact_matches(c: &RigidTransform, n: usize) -> Vec<Correspondence> {
    (0..n)
        .map(|i| {
            let k = i as f64;
            let world = nalgebra::Vector3::new(10.0 * k, -5.0 * k * k, 20.0 + 3.0 * k);
            let side = |angle: f64, axis: nalgebra::Vector3<f64>, p: ImagePoint| {
                let pose = RigidTransform::from_axis_angle(axis, angle);
                let q = pose.transform_point(&c.transform_point(&p.to_plane()));
                RigidTransform::identity().with_translation(world - q).compose(&pose)
            };
            let pa = ImagePoint::new(5.0 + 9.0 * k, 40.0 - 2.0 * k);
            let pb = ImagePoint::new(60.0 - 4.0 * k, 7.0 * k + 1.0);
            Correspondence::new(
                side(0.3 * k + 0.1, nalgebra::Vector3::new(1.0, 0.2, 0.0), pa),
                pa,
                side(1.0 - 0.2 * k, nalgebra::Vector3::new(0.0, 1.0, 0.5), pb),
                pb,
            )
        })
        .collect()
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(protip_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn solve_recovers_an_exact_calibration() {
    let c = random_calibration(12);
    let ms = exact_matches(&c, 7);
    let [ta, pa, tb, pb] = flatten(&ms);
    let mut out = [0.0; 16];
    let status = unsafe { protip_solve(ta.as_ptr(), pa.as_ptr(), tb.as_ptr(), pb.as_ptr(), ms.len(), out.as_mut_ptr()) };
    assert_eq!(status, ProtipStatus::Ok);
    let (dt, dr) = protip::geom::pose_delta(&from_row_major(&out), &c);
    assert!(dt < 1e-6 && dr < 1e-6, "{dt} {dr}");
}

#[test]
fn solve_reports_errors_through_status_and_message() {
    let c = random_calibration(1);
    let ms = exact_matches(&c, 2);
    let [ta, pa, tb, pb] = flatten(&ms);
    let mut out = [0.0; 16];
    let status = unsafe { protip_solve(ta.as_ptr(), pa.as_ptr(), tb.as_ptr(), pb.as_ptr(), 2, out.as_mut_ptr()) };
    assert_eq!(status, ProtipStatus::InsufficientMatches);
    assert!(last_error().contains("insufficient matches"));

    let status = unsafe { protip_solve(ptr::null(), pa.as_ptr(), tb.as_ptr(), pb.as_ptr(), 2, out.as_mut_ptr()) };
    assert_eq!(status, ProtipStatus::NullPointer);

    // A non-rigid pose matrix is rejected.
    let mut bad = ta.clone();
    bad[0] = 3.0;
    let status = unsafe { protip_solve(bad.as_ptr(), pa.as_ptr(), tb.as_ptr(), pb.as_ptr(), 2, out.as_mut_ptr()) };
    assert_ne!(status, ProtipStatus::Ok);
}

#[test]
fn ransac_flags_wrong_pairings() {
    let c = random_calibration(5);
    let mut ms = exact_matches(&c, 8);
    let (a, b) = (ms[0], ms[5]);
    ms.push(Correspondence::new(a.pose_a, a.point_a, b.pose_b, b.point_b));
    let [ta, pa, tb, pb] = flatten(&ms);
    let mut out = [0.0; 16];
    let mut flags = vec![9u8; ms.len()];
    let status = unsafe {
        protip_ransac(ta.as_ptr(), pa.as_ptr(), tb.as_ptr(), pb.as_ptr(), ms.len(), 3, out.as_mut_ptr(), flags.as_mut_ptr())
    };
    assert_eq!(status, ProtipStatus::Ok);
    assert_eq!(flags, [1, 1, 1, 1, 1, 1, 1, 1, 0]);
}

#[test]
fn config_accepts_known_keys_only() {
    let cfg = protip_config_new();
    let set = |k: &str, v: &str| {
        let (k, v) = (CString::new(k).unwrap(), CString::new(v).unwrap());
        unsafe { protip_config_set(cfg, k.as_ptr(), v.as_ptr()) }
    };
    assert_eq!(set("seed", "4"), ProtipStatus::Ok);
    assert_eq!(set("translation_steps", "1, 0.5"), ProtipStatus::Ok);
    assert_eq!(set("no_such_key", "1"), ProtipStatus::Format);
    assert!(last_error().contains("no_such_key"));
    assert_eq!(set("seed", "many"), ProtipStatus::Format);

    // Schedules of different lengths are caught before any work is done.
    let (mut a, mut b) = (ptr::null_mut(), ptr::null_mut());
    let dir = tempfile::tempdir().unwrap();
    let pair = simulate_pair(&default_phantom(), &SimulationParams { n_frames: 3, ..Default::default() }).unwrap();
    pair.axial.write_dir(dir.path()).unwrap();
    let p = CString::new(dir.path().to_str().unwrap()).unwrap();
    assert_eq!(unsafe { protip_sweep_load(p.as_ptr(), &mut a) }, ProtipStatus::Ok);
    assert_eq!(unsafe { protip_sweep_load(p.as_ptr(), &mut b) }, ProtipStatus::Ok);
    let mut run = ptr::null_mut();
    assert_eq!(unsafe { protip_calibrate(a, b, cfg, &mut run) }, ProtipStatus::InvalidArgument);
    assert!(run.is_null());
    unsafe {
        protip_sweep_free(a);
        protip_sweep_free(b);
        protip_config_free(cfg);
    }
    unsafe { protip_config_free(ptr::null_mut()) };
}

#[test]
fn missing_sweep_directory_is_an_error() {
    let dir = CString::new("/nonexistent/sweep").unwrap();
    let mut sweep = ptr::null_mut();
    let status = unsafe { protip_sweep_load(dir.as_ptr(), &mut sweep) };
    assert_ne!(status, ProtipStatus::Ok);
    assert!(sweep.is_null());
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { protip_sweep_frame_count(ptr::null()) }, 0);
}

#[test]
fn calibrate_simulated_sweeps() {
    let dir = tempfile::tempdir().unwrap();
    let pair = simulate_pair(&default_phantom(), &SimulationParams { seed: 2, ..Default::default() }).unwrap();
    pair.axial.write_dir(&dir.path().join("a")).unwrap();
    pair.sagittal.write_dir(&dir.path().join("b")).unwrap();

    let load = |name: &str| {
        let p = CString::new(dir.path().join(name).to_str().unwrap()).unwrap();
        let mut s = ptr::null_mut();
        assert_eq!(unsafe { protip_sweep_load(p.as_ptr(), &mut s) }, ProtipStatus::Ok);
        s
    };
    let (a, b) = (load("a"), load("b"));
    assert_eq!(unsafe { protip_sweep_frame_count(a) }, 200);

    let cfg = protip_config_new();
    for (k, v) in [("seg", "true-labels"), ("refine", "false")] {
        let (k, v) = (CString::new(k).unwrap(), CString::new(v).unwrap());
        assert_eq!(unsafe { protip_config_set(cfg, k.as_ptr(), v.as_ptr()) }, ProtipStatus::Ok);
    }
    let mut run = ptr::null_mut();
    assert_eq!(unsafe { protip_calibrate(a, b, cfg, &mut run) }, ProtipStatus::Ok);

    let (mut n_matches, mut n_inliers) = (0usize, 0usize);
    assert_eq!(unsafe { protip_run_match_counts(run, &mut n_matches, &mut n_inliers) }, ProtipStatus::Ok);
    assert_eq!((n_matches, n_inliers), (9, 9));
    let (mut initial, mut fin) = ([0.0; 16], [0.0; 16]);
    assert_eq!(unsafe { protip_run_initial_calibration(run, initial.as_mut_ptr()) }, ProtipStatus::Ok);
    assert_eq!(unsafe { protip_run_calibration(run, fin.as_mut_ptr()) }, ProtipStatus::Ok);
    assert_eq!(initial, fin);
    let (dt, dr) = protip::geom::pose_delta(&from_row_major(&fin), &pair.calibration());
    assert!(dt < 0.5 && dr < 0.3, "{dt} {dr}");

    unsafe {
        protip_run_free(run);
        protip_config_free(cfg);
        protip_sweep_free(a);
        protip_sweep_free(b);
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/protip.h")).unwrap();
    let src = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 10);
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else { return };
    let include = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"protip.h\"\nint main(void) { double m[16]; return protip_run_calibration(NULL, m) == PROTIP_STATUS_NULL_POINTER ? 0 : 1; }\n",
    )
    .unwrap();
    let status = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I", include])
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| std::process::Command::new(c).arg("--version").output().is_ok())
        .ok_or(())
}
