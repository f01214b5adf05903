//! C interface to the protip calibration library.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! functions and released by the matching `*_free`. Every fallible function
//! returns a [`ProtipStatus`]; on failure a description is available from
//! [`protip_last_error`] on the same thread. Transforms are 4×4 row-major
//! arrays of 16 doubles.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use nalgebra::Matrix4;
use protip::keyval::KeyValues;
use protip::pipeline::{calibrate, CalibrationRun, PipelineConfig};
use protip::solve::{ransac_calibrate, solve_matches, Correspondence, RansacConfig};
use protip::sweep::Sweep;
use protip::{Error, ImagePoint, RigidTransform};

/// Result codes. The numeric values match the exit codes of the `protip`
/// command where both exist.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProtipStatus {
    Ok = 0,
    InvalidArgument = 1,
    NoConsensus = 2,
    InsufficientMatches = 3,
    Format = 4,
    Coverage = 5,
    Degenerate = 6,
    Io = 7,
    NullPointer = 8,
    Panic = 9,
    Other = 10,
}

impl From<&Error> for ProtipStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidArgument(_) => ProtipStatus::InvalidArgument,
            Error::NoConsensus => ProtipStatus::NoConsensus,
            Error::InsufficientMatches { .. } => ProtipStatus::InsufficientMatches,
            Error::Format(_) => ProtipStatus::Format,
            Error::Coverage(_) => ProtipStatus::Coverage,
            Error::DegenerateConfiguration(_) => ProtipStatus::Degenerate,
            Error::Io { .. } => ProtipStatus::Io,
            _ => ProtipStatus::Other,
        }
    }
}

/// A sweep loaded from a directory.
pub struct ProtipSweep(Sweep);

/// Pipeline settings.
pub struct ProtipConfig(PipelineConfig);

/// Result of one calibration run.
pub struct ProtipRun(CalibrationRun);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: ProtipStatus, msg: impl Into<String>) -> ProtipStatus {
    set_last_error(msg.into());
    status
}

fn fail_with(e: &Error) -> ProtipStatus {
    fail(e.into(), e.to_string())
}

/// Runs `f`, turning panics into [`ProtipStatus::Panic`].
fn guarded(f: impl FnOnce() -> ProtipStatus) -> ProtipStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(ProtipStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, ProtipStatus> {
    if p.is_null() {
        return Err(fail(ProtipStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(ProtipStatus::InvalidArgument, format!("{name} is not valid UTF-8")))
}

fn write_transform(c: &RigidTransform, out: *mut f64) {
    let m = c.to_matrix4();
    for r in 0..4 {
        for k in 0..4 {
            // SAFETY: callers check `out` for null and the API requires 16 doubles.
            unsafe { *out.add(r * 4 + k) = m[(r, k)] };
        }
    }
}

unsafe fn read_transform(p: *const f64) -> Result<RigidTransform, Error> {
    let v = std::slice::from_raw_parts(p, 16);
    RigidTransform::from_matrix4(&Matrix4::from_row_slice(v))
}

/// Message of the last failure on the calling thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn protip_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn protip_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a sweep directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn protip_sweep_load(dir: *const c_char, out: *mut *mut ProtipSweep) -> ProtipStatus {
    guarded(|| {
        if out.is_null() {
            return fail(ProtipStatus::NullPointer, "out is null");
        }
        let dir = match str_arg(dir, "dir") {
            Ok(d) => d,
            Err(s) => return s,
        };
        match Sweep::read_dir(Path::new(dir)) {
            Ok(s) => {
                *out = Box::into_raw(Box::new(ProtipSweep(s)));
                ProtipStatus::Ok
            }
            Err(e) => fail_with(&e),
        }
    })
}

/// Number of frames in a sweep; 0 for a null handle.
///
/// # Safety
/// `sweep` must be null or a handle from [`protip_sweep_load`].
#[no_mangle]
pub unsafe extern "C" fn protip_sweep_frame_count(sweep: *const ProtipSweep) -> usize {
    sweep.as_ref().map_or(0, |s| s.0.len())
}

/// # Safety
/// `sweep` must be null or a handle from [`protip_sweep_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn protip_sweep_free(sweep: *mut ProtipSweep) {
    if !sweep.is_null() {
        drop(Box::from_raw(sweep));
    }
}

/// Default pipeline settings.
#[no_mangle]
pub extern "C" fn protip_config_new() -> *mut ProtipConfig {
    Box::into_raw(Box::new(ProtipConfig(PipelineConfig::default())))
}

/// Sets one setting by its configuration-file key, e.g. `seg` or
/// `translation_steps`. Consistency between settings is checked by
/// [`protip_calibrate`].
///
/// # Safety
/// `config` must be a handle from [`protip_config_new`]; `key` and `value`
/// NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn protip_config_set(
    config: *mut ProtipConfig,
    key: *const c_char,
    value: *const c_char,
) -> ProtipStatus {
    guarded(|| {
        let Some(cfg) = config.as_mut() else {
            return fail(ProtipStatus::NullPointer, "config is null");
        };
        let (key, value) = match (str_arg(key, "key"), str_arg(value, "value")) {
            (Ok(k), Ok(v)) => (k, v),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        let mut kv = KeyValues::new();
        kv.push(key, value);
        let mut updated = cfg.0.clone();
        match updated.apply_keyvalues(&kv) {
            Ok(()) => {
                cfg.0 = updated;
                ProtipStatus::Ok
            }
            Err(e) => fail_with(&e),
        }
    })
}

/// # Safety
/// `config` must be null or a handle from [`protip_config_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn protip_config_free(config: *mut ProtipConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Runs the full pipeline on two sweeps. A null `config` uses the defaults.
///
/// # Safety
/// `a` and `b` must be sweep handles, `config` null or a config handle and
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn protip_calibrate(
    a: *const ProtipSweep,
    b: *const ProtipSweep,
    config: *const ProtipConfig,
    out: *mut *mut ProtipRun,
) -> ProtipStatus {
    guarded(|| {
        let (Some(a), Some(b)) = (a.as_ref(), b.as_ref()) else {
            return fail(ProtipStatus::NullPointer, "sweep handle is null");
        };
        if out.is_null() {
            return fail(ProtipStatus::NullPointer, "out is null");
        }
        let default = PipelineConfig::default();
        let cfg = config.as_ref().map_or(&default, |c| &c.0);
        if let Err(e) = cfg.validate() {
            return fail_with(&e);
        }
        match calibrate(&a.0, &b.0, cfg) {
            Ok(run) => {
                *out = Box::into_raw(Box::new(ProtipRun(run)));
                ProtipStatus::Ok
            }
            Err(e) => fail_with(&e),
        }
    })
}

/// Final calibration (refined when refinement ran) into `out[16]`.
///
/// # Safety
/// `run` must be a run handle and `out` point to 16 doubles.
#[no_mangle]
pub unsafe extern "C" fn protip_run_calibration(run: *const ProtipRun, out: *mut f64) -> ProtipStatus {
    match (run.as_ref(), out.is_null()) {
        (Some(r), false) => {
            write_transform(&r.0.calibration(), out);
            ProtipStatus::Ok
        }
        _ => fail(ProtipStatus::NullPointer, "run or out is null"),
    }
}

/// Calibration before refinement into `out[16]`.
///
/// # Safety
/// `run` must be a run handle and `out` point to 16 doubles.
#[no_mangle]
pub unsafe extern "C" fn protip_run_initial_calibration(run: *const ProtipRun, out: *mut f64) -> ProtipStatus {
    match (run.as_ref(), out.is_null()) {
        (Some(r), false) => {
            write_transform(&r.0.initial(), out);
            ProtipStatus::Ok
        }
        _ => fail(ProtipStatus::NullPointer, "run or out is null"),
    }
}

/// Number of tip matches, and of RANSAC inliers among them.
///
/// # Safety
/// `run` must be a run handle; `matches` and `inliers` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn protip_run_match_counts(
    run: *const ProtipRun,
    matches: *mut usize,
    inliers: *mut usize,
) -> ProtipStatus {
    match run.as_ref() {
        Some(r) if !matches.is_null() && !inliers.is_null() => {
            *matches = r.0.matches.len();
            *inliers = r.0.ransac.inliers.len();
            ProtipStatus::Ok
        }
        _ => fail(ProtipStatus::NullPointer, "run, matches or inliers is null"),
    }
}

/// # Safety
/// `run` must be null or a handle from [`protip_calibrate`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn protip_run_free(run: *mut ProtipRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

unsafe fn read_matches(
    poses_a: *const f64,
    points_a: *const f64,
    poses_b: *const f64,
    points_b: *const f64,
    n: usize,
) -> Result<Vec<Correspondence>, ProtipStatus> {
    if poses_a.is_null() || points_a.is_null() || poses_b.is_null() || points_b.is_null() {
        return Err(fail(ProtipStatus::NullPointer, "match array is null"));
    }
    (0..n)
        .map(|i| {
            let ta = read_transform(poses_a.add(16 * i)).map_err(|e| fail_with(&e))?;
            let tb = read_transform(poses_b.add(16 * i)).map_err(|e| fail_with(&e))?;
            let pa = ImagePoint::new(*points_a.add(2 * i), *points_a.add(2 * i + 1));
            let pb = ImagePoint::new(*points_b.add(2 * i), *points_b.add(2 * i + 1));
            Ok(Correspondence::new(ta, pa, tb, pb))
        })
        .collect()
}

/// Least-squares calibration from `n` correspondences. `poses_*` hold `n`
/// row-major 4×4 tracking matrices, `points_*` hold `n` (x, y) image points
/// in mm. The result is written to `out[16]`.
///
/// # Safety
/// All arrays must have the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn protip_solve(
    poses_a: *const f64,
    points_a: *const f64,
    poses_b: *const f64,
    points_b: *const f64,
    n: usize,
    out: *mut f64,
) -> ProtipStatus {
    guarded(|| {
        if out.is_null() {
            return fail(ProtipStatus::NullPointer, "out is null");
        }
        let ms = match read_matches(poses_a, points_a, poses_b, points_b, n) {
            Ok(ms) => ms,
            Err(s) => return s,
        };
        match solve_matches(&ms) {
            Ok(c) => {
                write_transform(&c, out);
                ProtipStatus::Ok
            }
            Err(e) => fail_with(&e),
        }
    })
}

/// RANSAC calibration from `n` correspondences with default thresholds and
/// the given seed. Arrays as in [`protip_solve`]; `inlier_flags`, when not
/// null, receives `n` bytes set to 1 for inliers.
///
/// # Safety
/// All arrays must have the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn protip_ransac(
    poses_a: *const f64,
    points_a: *const f64,
    poses_b: *const f64,
    points_b: *const f64,
    n: usize,
    seed: u64,
    out: *mut f64,
    inlier_flags: *mut u8,
) -> ProtipStatus {
    guarded(|| {
        if out.is_null() {
            return fail(ProtipStatus::NullPointer, "out is null");
        }
        let ms = match read_matches(poses_a, points_a, poses_b, points_b, n) {
            Ok(ms) => ms,
            Err(s) => return s,
        };
        match ransac_calibrate(&ms, &RansacConfig { seed, ..Default::default() }) {
            Ok(res) => {
                write_transform(&res.calibration, out);
                if !inlier_flags.is_null() {
                    for i in 0..n {
                        *inlier_flags.add(i) = u8::from(res.inliers.contains(&i));
                    }
                }
                ProtipStatus::Ok
            }
            Err(e) => fail_with(&e),
        }
    })
}
