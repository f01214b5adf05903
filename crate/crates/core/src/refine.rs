//! Image-based refinement: the calibration is adjusted so that frames of one
//! sweep correlate best with slices reconstructed from the other sweep.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{ImagePoint, RigidTransform};
use crate::raster::Raster;
use crate::sweep::{ImagingGeometry, Sweep};

#[derive(Debug, Clone, PartialEq)]
pub struct RefineConfig {
    /// Translation steps, mm, strictly decreasing.
    pub translation_steps: Vec<f64>,
    /// Rotation steps, degrees, paired with the translation steps.
    pub rotation_steps: Vec<f64>,
    /// Half thickness of the compounding slab, mm.
    pub slab_halfwidth: f64,
    pub frame_stride: usize,
    /// Frames whose reconstruction covers less than this fraction of the
    /// image are ignored.
    pub min_overlap_fraction: f64,
    /// Upper bound on improvement passes at one step size.
    pub max_passes: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            translation_steps: vec![2.0, 1.0, 0.5, 0.25, 0.1, 0.05],
            rotation_steps: vec![2.0, 1.0, 0.5, 0.25, 0.1, 0.05],
            slab_halfwidth: 1.5,
            frame_stride: 2,
            min_overlap_fraction: 0.1,
            max_passes: 50,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, s: &[f64]| -> Result<()> {
            if s.is_empty() || s.iter().any(|&v| !(v > 0.0)) || s.windows(2).any(|w| w[1] >= w[0]) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be positive and strictly decreasing"
                )));
            }
            Ok(())
        };
        check("translation steps", &self.translation_steps)?;
        check("rotation steps", &self.rotation_steps)?;
        if self.translation_steps.len() != self.rotation_steps.len() {
            return Err(Error::InvalidArgument(
                "translation and rotation schedules must have equal length".into(),
            ));
        }
        if !(self.slab_halfwidth > 0.0) || self.frame_stride == 0 {
            return Err(Error::InvalidArgument("slab half-width and frame stride must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.min_overlap_fraction) {
            return Err(Error::InvalidArgument("overlap fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructedSlice {
    pub image: Raster<f64>,
    pub validity: Raster<bool>,
}

impl ReconstructedSlice {
    pub fn valid_count(&self) -> usize {
        self.validity.data().iter().filter(|&&v| v).count()
    }
}

/// Frames of a sweep padded by one replicated column and row, so that
/// bilinear sampling anywhere in `[0, w−1] × [0, h−1]` needs no clamping.
struct PaddedSweep<'a> {
    sweep: &'a Sweep,
    images: Vec<Vec<u8>>,
}

impl<'a> PaddedSweep<'a> {
    fn new(sweep: &'a Sweep) -> Self {
        let (w, h) = (sweep.geometry.cols, sweep.geometry.rows);
        let images = sweep
            .frames
            .iter()
            .map(|f| {
                let data = f.intensity.data();
                let mut out = Vec::with_capacity((w + 1) * (h + 1));
                for row in (0..h).chain(std::iter::once(h - 1)) {
                    let line = &data[row * w..(row + 1) * w];
                    out.extend_from_slice(line);
                    out.push(line[w - 1]);
                }
                out
            })
            .collect();
        Self { sweep, images }
    }
}

/// Poses `(T_j·C)⁻¹` of every frame of a sweep, for one calibration.
struct PreparedSweep<'a> {
    padded: &'a PaddedSweep<'a>,
    inv: Vec<RigidTransform>,
}

impl<'a> PreparedSweep<'a> {
    fn new(padded: &'a PaddedSweep<'a>, c: &RigidTransform) -> Self {
        let inv = padded
            .sweep
            .frames
            .iter()
            .map(|f| f.tracking.compose(c).inverse())
            .collect();
        Self { padded, inv }
    }
}

/// Narrows the column interval `range` to where `v0 + dv·col` lies in
/// `[lo, hi]`.
#[inline(always)]
fn clip(range: &mut (f64, f64), v0: f64, dv: f64, inv_dv: f64, lo: f64, hi: f64) {
    if dv.abs() < 1e-12 {
        if v0 < lo || v0 > hi {
            *range = (1.0, 0.0);
        }
        return;
    }
    let (a, b) = ((lo - v0) * inv_dv, (hi - v0) * inv_dv);
    let (a, b) = if a < b { (a, b) } else { (b, a) };
    range.0 = range.0.max(a);
    range.1 = range.1.min(b);
}

fn recip(v: f64) -> f64 {
    if v.abs() < 1e-12 {
        0.0
    } else {
        1.0 / v
    }
}

/// Bilinear sample of a padded image of stride `w + 1` at fractional pixel
/// coordinates inside `[0, w−1] × [0, h−1]`.
#[inline(always)]
fn bilinear(data: &[u8], stride: usize, fx: f64, fy: f64) -> f64 {
    let (x0, y0) = (fx as i32 as usize, fy as i32 as usize);
    let ax = fx - x0 as f64;
    let ay = fy - y0 as f64;
    let i = y0 * stride + x0;
    let (t, u) = (&data[i..i + 2], &data[i + stride..i + stride + 2]);
    let top = t[0] as f64 + (t[1] as f64 - t[0] as f64) * ax;
    let bottom = u[0] as f64 + (u[1] as f64 - u[0] as f64) * ax;
    top + (bottom - top) * ay
}

fn reconstruct_prepared(
    b: &PreparedSweep<'_>,
    plane_to_world: &RigidTransform,
    geom_a: &ImagingGeometry,
    valid_a: &[bool],
    slab: f64,
) -> ReconstructedSlice {
    let (w, h, s) = (geom_a.cols, geom_a.rows, geom_a.spacing);
    let gb = &b.padded.sweep.geometry;
    let (bw, bh) = (gb.cols, gb.rows);
    let inv_sb = 1.0 / gb.spacing;
    let (fx_max, fy_max) = ((bw - 1) as f64, (bh - 1) as f64);
    let linear_b = gb.is_linear();
    let mut sum = vec![0.0f64; w * h];
    let mut wsum = vec![0.0f64; w * h];
    let inv_slab = 1.0 / slab;
    let partial_a = valid_a.iter().any(|&v| !v);

    let corners = [
        Vector3::new(0.0, 0.0, 0.0),
        Vector3::new(w as f64 * s, 0.0, 0.0),
        Vector3::new(0.0, h as f64 * s, 0.0),
        Vector3::new(w as f64 * s, h as f64 * s, 0.0),
    ];
    for (j, data) in b.padded.images.iter().enumerate() {
        let m = b.inv[j].compose(plane_to_world);
        let zs = corners.map(|p| m.transform_point(&p).z);
        if zs.iter().all(|&z| z > slab) || zs.iter().all(|&z| z < -slab) {
            continue;
        }
        let (r, t) = (&m.rotation, &m.translation);
        // Per-column and per-row increments of the B-plane coordinates, in B
        // pixels for x and y and in mm for z.
        let (dx, dy, dz) = (r[(0, 0)] * s * inv_sb, r[(1, 0)] * s * inv_sb, r[(2, 0)] * s);
        let (ex, ey, ez) = (r[(0, 1)] * s * inv_sb, r[(1, 1)] * s * inv_sb, r[(2, 1)] * s);
        let x0 = (t.x + 0.5 * s * (r[(0, 0)] + r[(0, 1)])) * inv_sb - 0.5;
        let y0 = (t.y + 0.5 * s * (r[(1, 0)] + r[(1, 1)])) * inv_sb - 0.5;
        let z0 = t.z + 0.5 * s * (r[(2, 0)] + r[(2, 1)]);
        let (ix, iy, iz) = (recip(dx), recip(dy), recip(dz));
        for row in 0..h {
            let rf = row as f64;
            let (bx, by, bz) = (x0 + ex * rf, y0 + ey * rf, z0 + ez * rf);
            // Columns inside the slab and inside B's sampling rectangle.
            let mut range = (0.0, (w - 1) as f64);
            clip(&mut range, bz, dz, iz, -slab, slab);
            clip(&mut range, bx, dx, ix, 0.0, fx_max);
            clip(&mut range, by, dy, iy, 0.0, fy_max);
            if range.0 > range.1 {
                continue;
            }
            // Both bounds are non-negative, so truncation floors them.
            let c_hi = range.1 as usize;
            let c_lo = range.0 as usize + usize::from((range.0 as usize as f64) < range.0);
            let row_off = row * w;
            for col in c_lo..=c_hi {
                let cf = col as f64;
                let (qx, qy, qz) = (bx + dx * cf, by + dy * cf, bz + dz * cf);
                let idx = row_off + col;
                if partial_a && !valid_a[idx] {
                    continue;
                }
                if !linear_b && !gb.contains(ImagePoint::new((qx + 0.5) * gb.spacing, (qy + 0.5) * gb.spacing)) {
                    continue;
                }
                let weight = (1.0 - qz.abs() * inv_slab).max(0.0);
                sum[idx] += weight * bilinear(data, bw + 1, qx, qy);
                wsum[idx] += weight;
            }
        }
    }
    for (v, &ws) in sum.iter_mut().zip(&wsum) {
        if ws > 0.0 {
            *v /= ws;
        }
    }
    let validity = wsum.iter().map(|&ws| ws > 0.0).collect();
    ReconstructedSlice {
        image: Raster::from_vec(w, h, sum).expect("sized to the geometry"),
        validity: Raster::from_vec(w, h, validity).expect("sized to the geometry"),
    }
}

/// Compounds the frames of `sweep_b` onto the plane of a frame with
/// tracking pose `pose_a` and imaging geometry `geom_a`, with slab-weighted
/// bilinear sampling.
pub fn reconstruct_slice(
    sweep_b: &Sweep,
    pose_a: &RigidTransform,
    geom_a: &ImagingGeometry,
    c: &RigidTransform,
    slab_halfwidth: f64,
) -> ReconstructedSlice {
    let padded = PaddedSweep::new(sweep_b);
    let prepared = PreparedSweep::new(&padded, c);
    let valid_a = geom_a.validity_mask();
    reconstruct_prepared(&prepared, &pose_a.compose(c), geom_a, valid_a.data(), slab_halfwidth)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ncc {
    pub score: f64,
    /// Set when either image has no variance over the valid region.
    pub degenerate: bool,
}

/// Pearson correlation of `a` and `b` over the pixels where `valid` holds.
pub fn ncc(a: &[f64], b: &[f64], valid: &[bool]) -> Ncc {
    let degenerate = Ncc { score: 0.0, degenerate: true };
    let mut n = 0usize;
    let (mut sa, mut sb) = (0.0, 0.0);
    for i in 0..a.len() {
        if valid[i] {
            n += 1;
            sa += a[i];
            sb += b[i];
        }
    }
    if n < 2 {
        return degenerate;
    }
    let (ma, mb) = (sa / n as f64, sb / n as f64);
    let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
    for i in 0..a.len() {
        if valid[i] {
            let (da, db) = (a[i] - ma, b[i] - mb);
            saa += da * da;
            sbb += db * db;
            sab += da * db;
        }
    }
    let scale = (ma.abs() + mb.abs() + 1.0) * 1e-12;
    if saa.sqrt() <= scale * (n as f64).sqrt() || sbb.sqrt() <= scale * (n as f64).sqrt() {
        return degenerate;
    }
    Ncc {
        score: (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0),
        degenerate: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    /// Mean NCC over qualifying frames, or −∞ when none qualifies.
    pub value: f64,
    pub frames: usize,
}

fn objective_prepared(sweep_a: &Sweep, b: &PreparedSweep<'_>, c: &RigidTransform, cfg: &RefineConfig) -> ObjectiveValue {
    let geom = &sweep_a.geometry;
    let valid_a = geom.validity_mask();
    let total = valid_a.data().iter().filter(|&&v| v).count().max(1);
    let scores: Vec<Option<f64>> = sweep_a
        .frames
        .par_iter()
        .enumerate()
        .map(|(i, frame)| {
            if i % cfg.frame_stride != 0 {
                return None;
            }
            let slice = reconstruct_prepared(b, &frame.tracking.compose(c), geom, valid_a.data(), cfg.slab_halfwidth);
            let covered = slice.valid_count();
            if (covered as f64) < cfg.min_overlap_fraction * total as f64 || covered == 0 {
                return None;
            }
            let a: Vec<f64> = frame.intensity.data().iter().map(|&v| v as f64).collect();
            Some(ncc(&a, slice.image.data(), slice.validity.data()).score)
        })
        .collect();
    let used: Vec<f64> = scores.into_iter().flatten().collect();
    if used.is_empty() {
        return ObjectiveValue { value: f64::NEG_INFINITY, frames: 0 };
    }
    ObjectiveValue {
        value: used.iter().sum::<f64>() / used.len() as f64,
        frames: used.len(),
    }
}

/// Mean NCC between every `frame_stride`-th frame of A and its
/// reconstruction from B under calibration `c`.
pub fn objective(sweep_a: &Sweep, sweep_b: &Sweep, c: &RigidTransform, cfg: &RefineConfig) -> ObjectiveValue {
    let padded = PaddedSweep::new(sweep_b);
    objective_prepared(sweep_a, &PreparedSweep::new(&padded, c), c, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefineStatus {
    Refined,
    /// No frame of A overlapped B at the starting calibration; the input is
    /// returned unchanged.
    NoOverlap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutcome {
    pub calibration: RigidTransform,
    pub status: RefineStatus,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub evaluations: usize,
}

/// Small motion of the image plane: translation along, or rotation about,
/// one image axis. Rotations pivot on the image center.
pub fn perturbation(param: usize, amount: f64, pivot: &Vector3<f64>) -> RigidTransform {
    match param {
        0..=2 => {
            let mut t = Vector3::zeros();
            t[param] = amount;
            RigidTransform::identity().with_translation(t)
        }
        3..=5 => {
            let r = match param {
                3 => RigidTransform::rotation_x(amount.to_radians()),
                4 => RigidTransform::rotation_y(amount.to_radians()),
                _ => RigidTransform::rotation_z(amount.to_radians()),
            };
            let to = RigidTransform::identity().with_translation(*pivot);
            let from = RigidTransform::identity().with_translation(-pivot);
            to.compose(&r).compose(&from)
        }
        _ => panic!("parameter index {param} out of range"),
    }
}

/// Coordinate hill climb over (tx, ty, tz, rx, ry, rz) with a shrinking
/// step schedule. The returned objective is never below the initial one.
pub fn refine_calibration(sweep_a: &Sweep, sweep_b: &Sweep, c0: &RigidTransform, cfg: &RefineConfig) -> Result<RefineOutcome> {
    cfg.validate()?;
    let padded = PaddedSweep::new(sweep_b);
    let eval = |c: &RigidTransform| objective_prepared(sweep_a, &PreparedSweep::new(&padded, c), c, cfg).value;
    let initial = eval(c0);
    let mut evaluations = 1;
    if initial == f64::NEG_INFINITY {
        log::warn!("refinement skipped: no frame pair overlaps at the initial calibration");
        return Ok(RefineOutcome {
            calibration: *c0,
            status: RefineStatus::NoOverlap,
            initial_objective: initial,
            final_objective: initial,
            evaluations,
        });
    }
    let g = &sweep_a.geometry;
    let pivot = Vector3::new(g.width() / 2.0, g.depth() / 2.0, 0.0);
    let mut current = *c0;
    let mut best = initial;
    for (&ts, &rs) in cfg.translation_steps.iter().zip(&cfg.rotation_steps) {
        // Sign that last improved each parameter, tried first. Undoing the most
        // recent accepted move returns to a point already known to be worse.
        let mut first_sign = [1.0f64; 6];
        let mut last_move: Option<(usize, f64)> = None;
        for _ in 0..cfg.max_passes {
            let mut improved = false;
            for param in 0..6 {
                let step = if param < 3 { ts } else { rs };
                for sign in [first_sign[param], -first_sign[param]] {
                    if last_move == Some((param, -sign)) {
                        continue;
                    }
                    let cand = current.compose(&perturbation(param, sign * step, &pivot));
                    let v = eval(&cand);
                    evaluations += 1;
                    if v > best {
                        best = v;
                        current = cand;
                        improved = true;
                        first_sign[param] = sign;
                        last_move = Some((param, sign));
                        break;
                    }
                }
            }
            if !improved {
                break;
            }
        }
        log::debug!("refine: step {ts} mm / {rs} deg, objective {best:.6}");
    }
    Ok(RefineOutcome {
        calibration: current,
        status: RefineStatus::Refined,
        initial_objective: initial,
        final_objective: best,
        evaluations,
    })
}
