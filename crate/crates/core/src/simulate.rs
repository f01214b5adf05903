//! Synthetic tracked sweeps over the phantom under a hidden calibration.
//!
//! Poses are designed for the image plane (`W_i`, image to world); the
//! tracking matrices follow as `T_i = W_i · C_gt⁻¹`. Frames are rendered from
//! the true poses while the stored tracking may carry noise.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{format_sig, parse_floats, ImagePoint, RigidTransform};
use crate::keyval::KeyValues;
use crate::phantom::{classify_point, Label, PhantomSpec};
use crate::raster::Raster;
use crate::rng::{substream, Stream};
use crate::sweep::{read_text, write_text, Frame, ImagingGeometry, Sweep};

/// Intensity levels driven by the label of each pixel.
pub const LEVEL_BACKGROUND: f64 = 20.0;
pub const LEVEL_CONE: f64 = 120.0;
pub const LEVEL_BASE: f64 = 200.0;

pub fn label_level(label: Label) -> f64 {
    match label {
        Label::Background => LEVEL_BACKGROUND,
        Label::Base => LEVEL_BASE,
        Label::Cone => LEVEL_CONE,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    /// Image plane spans world x and the vertical; the probe moves along y.
    Axial,
    /// Image plane spans world y and the vertical; the probe moves along x.
    Sagittal,
}

impl SweepKind {
    pub fn name(self) -> &'static str {
        match self {
            SweepKind::Axial => "axial",
            SweepKind::Sagittal => "sagittal",
        }
    }

    fn id(self) -> u64 {
        match self {
            SweepKind::Axial => 0,
            SweepKind::Sagittal => 1,
        }
    }

    /// Image x axis, image depth axis and sweep direction in world
    /// coordinates, assuming the phantom normal is +z.
    fn axes(self) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        let down = -Vector3::z();
        match self {
            SweepKind::Axial => (Vector3::x(), down, Vector3::y()),
            SweepKind::Sagittal => (Vector3::y(), down, -Vector3::x()),
        }
    }
}

/// Shape of the probe motion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryParams {
    /// Height of the transducer face above the base plane, mm.
    pub transducer_height: f64,
    /// Extra travel beyond the outermost cone axes, mm.
    pub margin: f64,
    /// Peak in-plane rotation of the probe, degrees.
    pub roll_amplitude_deg: f64,
    /// Peak out-of-plane tilt of the probe, degrees.
    pub tilt_amplitude_deg: f64,
    /// Per-frame pose jitter: (mm, degrees) standard deviations.
    pub jitter: (f64, f64),
    pub seed: u64,
}

impl Default for TrajectoryParams {
    fn default() -> Self {
        Self {
            transducer_height: 85.0,
            margin: 6.0,
            roll_amplitude_deg: 12.0,
            tilt_amplitude_deg: 5.0,
            jitter: (0.0, 0.0),
            seed: 0,
        }
    }
}

/// Image-noise model: multiplicative speckle from a low-resolution Gaussian
/// field upsampled bilinearly, plus additive Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    pub speckle_std: f64,
    pub gaussian_std: f64,
    pub speckle_cols: usize,
    pub speckle_rows: usize,
}

impl NoiseConfig {
    pub fn none() -> Self {
        Self::level(0.0)
    }

    /// Level 1 is 10% speckle and σ=5 grey levels of additive noise.
    pub fn level(level: f64) -> Self {
        Self {
            speckle_std: 0.1 * level,
            gaussian_std: 5.0 * level,
            speckle_cols: 64,
            speckle_rows: 32,
        }
    }

    pub fn is_off(&self) -> bool {
        self.speckle_std == 0.0 && self.gaussian_std == 0.0
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self::none()
    }
}

/// Tracking noise: (σ translation mm, σ rotation degrees) per axis.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrackingNoise {
    pub sigma_mm: f64,
    pub sigma_deg: f64,
}

/// Analytic tip location on one frame, from the true pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameTip {
    pub frame: usize,
    pub cone: usize,
    pub point: ImagePoint,
    /// Signed distance of the tip from the image plane, mm.
    pub offplane: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepGroundTruth {
    pub calibration: RigidTransform,
    pub tips: Vec<Vector3<f64>>,
    pub true_tracking: Vec<RigidTransform>,
    pub frame_tips: Vec<FrameTip>,
}

/// Image-to-world pose of frame `i` of `n`.
fn image_pose(
    kind: SweepKind,
    i: usize,
    n: usize,
    travel: f64,
    geom: &ImagingGeometry,
    params: &TrajectoryParams,
    phases: [f64; 2],
) -> RigidTransform {
    let (ex, ey, sweep_dir) = kind.axes();
    let normal = ex.cross(&ey);
    let base = Matrix3::from_columns(&[ex, ey, normal]);
    let u = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
    let offset = travel * (2.0 * u - 1.0);
    let pivot_img = Vector3::new(0.5 * geom.width(), 0.5 * geom.depth(), 0.0);
    let pivot_world = sweep_dir * offset + Vector3::z() * (params.transducer_height - pivot_img.y);
    let roll = params.roll_amplitude_deg.to_radians() * (2.0 * PI * 1.5 * u + phases[0]).sin();
    let tilt = params.tilt_amplitude_deg.to_radians() * (2.0 * PI * u + phases[1]).sin();
    let local = RigidTransform::rotation_z(roll).compose(&RigidTransform::rotation_x(tilt));
    let rotation = base * local.rotation;
    RigidTransform::from_parts(rotation, pivot_world - rotation * pivot_img)
}

/// Checks that the nominal pose over every cone shows its tip and its base
/// footprint inside the imaging field of view.
fn check_coverage(kind: SweepKind, phantom: &PhantomSpec, geom: &ImagingGeometry, params: &TrajectoryParams) -> Result<()> {
    if (phantom.base_normal - Vector3::z()).norm() > 1e-9 {
        return Err(Error::Coverage(
            "trajectories assume a phantom with base normal +z".into(),
        ));
    }
    let (ex, ey, sweep_dir) = kind.axes();
    let normal = ex.cross(&ey);
    let base = Matrix3::from_columns(&[ex, ey, normal]);
    let pivot_img = Vector3::new(0.5 * geom.width(), 0.5 * geom.depth(), 0.0);
    for (k, cone) in phantom.cones.iter().enumerate() {
        let offset = cone.base_center.dot(&sweep_dir);
        let pivot_world = sweep_dir * offset + Vector3::z() * (params.transducer_height - pivot_img.y);
        let w = RigidTransform::from_parts(base, pivot_world - base * pivot_img);
        let inv = w.inverse();
        let tip = cone.tip(&phantom.base_normal);
        let probes = [
            tip,
            cone.base_center + ex * cone.base_radius,
            cone.base_center - ex * cone.base_radius,
        ];
        for q in probes {
            let local = inv.transform_point(&q);
            if !geom.contains(ImagePoint::new(local.x, local.y)) {
                return Err(Error::Coverage(format!(
                    "cone {k} does not fit the {} field of view",
                    kind.name()
                )));
            }
        }
    }
    Ok(())
}

/// Tracking poses for a sweep that translates the image plane across the
/// whole phantom while rolling and tilting the probe.
pub fn make_trajectory(
    kind: SweepKind,
    n_frames: usize,
    phantom: &PhantomSpec,
    calibration: &RigidTransform,
    geom: &ImagingGeometry,
    params: &TrajectoryParams,
) -> Result<Vec<RigidTransform>> {
    if n_frames == 0 {
        return Err(Error::InvalidArgument("a sweep needs at least one frame".into()));
    }
    geom.validate()?;
    check_coverage(kind, phantom, geom, params)?;
    let (_, _, sweep_dir) = kind.axes();
    let reach = phantom
        .cones
        .iter()
        .map(|c| c.base_center.dot(&sweep_dir).abs())
        .fold(0.0, f64::max);
    let travel = reach + params.margin;

    let mut rng = substream(params.seed, Stream::Trajectory, kind.id());
    let phases = [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)];
    let calib_inv = calibration.inverse();
    let (jt, jr) = params.jitter;
    Ok((0..n_frames)
        .map(|i| {
            let mut w = image_pose(kind, i, n_frames, travel, geom, params, phases);
            if jt > 0.0 || jr > 0.0 {
                w = random_perturbation(&mut rng, jt, jr).compose(&w);
            }
            w.compose(&calib_inv)
        })
        .collect())
}

/// Zero-mean rigid perturbation: translation N(0, σ_t²I), rotation vector
/// N(0, σ_r²I) in degrees.
pub fn random_perturbation<R: Rng>(rng: &mut R, sigma_mm: f64, sigma_deg: f64) -> RigidTransform {
    let mut draw = |s: f64| -> Vector3<f64> {
        Vector3::from_fn(|_, _| {
            let z: f64 = StandardNormal.sample(rng);
            z * s
        })
    };
    let t = draw(sigma_mm);
    let w = draw(sigma_deg.to_radians());
    RigidTransform::from_rotation_vector(w).with_translation(t)
}

/// Applies tracking noise `T → (R_n·R, t + n)`.
pub fn perturb_tracking<R: Rng>(rng: &mut R, t: &RigidTransform, noise: TrackingNoise) -> RigidTransform {
    let n = random_perturbation(rng, noise.sigma_mm, noise.sigma_deg);
    RigidTransform::from_parts(n.rotation * t.rotation, t.translation + n.translation)
}

/// Random calibration: uniformly random rotation and a translation within a
/// 60mm cube, as a tracking marker mounted on a probe would be.
pub fn random_calibration(seed: u64) -> RigidTransform {
    let mut rng = substream(seed, Stream::Calibration, 0);
    let q = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
        StandardNormal.sample(&mut rng),
        StandardNormal.sample(&mut rng),
        StandardNormal.sample(&mut rng),
        StandardNormal.sample(&mut rng),
    ));
    let t = Vector3::from_fn(|_, _| rng.random_range(-30.0..30.0));
    RigidTransform::from_parts(*q.to_rotation_matrix().matrix(), t)
}

fn speckle_field<R: Rng>(rng: &mut R, noise: &NoiseConfig, geom: &ImagingGeometry) -> Option<Raster<f64>> {
    if noise.speckle_std <= 0.0 {
        return None;
    }
    let (lc, lr) = (noise.speckle_cols.max(1), noise.speckle_rows.max(1));
    let normal = Normal::new(1.0, noise.speckle_std).expect("finite speckle std");
    let low = Raster::from_fn(lc, lr, |_, _| normal.sample(rng).max(0.0));
    let sx = lc as f64 / geom.cols as f64;
    let sy = lr as f64 / geom.rows as f64;
    Some(Raster::from_fn(geom.cols, geom.rows, |c, r| {
        let u = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (lc - 1) as f64);
        let v = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (lr - 1) as f64);
        let (c0, r0) = (u.floor() as usize, v.floor() as usize);
        let (c1, r1) = ((c0 + 1).min(lc - 1), (r0 + 1).min(lr - 1));
        let (fu, fv) = (u - c0 as f64, v - r0 as f64);
        let top = low.get(c0, r0) * (1.0 - fu) + low.get(c1, r0) * fu;
        let bottom = low.get(c0, r1) * (1.0 - fu) + low.get(c1, r1) * fu;
        top * (1.0 - fv) + bottom * fv
    }))
}

/// Renders one frame from its true pose. `rng` drives image noise only.
pub fn render_frame<R: Rng>(
    phantom: &PhantomSpec,
    tracking: &RigidTransform,
    calibration: &RigidTransform,
    geom: &ImagingGeometry,
    noise: &NoiseConfig,
    rng: &mut R,
) -> Frame {
    let pose = tracking.compose(calibration);
    let labels = Raster::from_fn(geom.cols, geom.rows, |c, r| {
        let p = geom.pixel_center(c, r);
        if !geom.contains(p) {
            return Label::Background.code();
        }
        classify_point(phantom, &pose.transform_point(&p.to_plane())).code()
    });
    let speckle = speckle_field(rng, noise, geom);
    let gaussian = (noise.gaussian_std > 0.0)
        .then(|| Normal::new(0.0, noise.gaussian_std).expect("finite gaussian std"));
    let mut intensity = Raster::filled(geom.cols, geom.rows, 0u8);
    for r in 0..geom.rows {
        for c in 0..geom.cols {
            if !geom.pixel_valid(c, r) {
                continue;
            }
            let label = Label::from_code(labels.get(c, r)).expect("rendered label");
            let mut v = label_level(label);
            if let Some(s) = &speckle {
                v *= s.get(c, r);
            }
            if let Some(g) = &gaussian {
                v += g.sample(rng);
            }
            intensity.set(c, r, v.round().clamp(0.0, 255.0) as u8);
        }
    }
    Frame {
        index: 0,
        intensity,
        true_labels: Some(labels),
        tracking: *tracking,
    }
}

/// Everything needed to render one sweep.
#[derive(Debug, Clone)]
pub struct SweepSpec<'a> {
    pub phantom: &'a PhantomSpec,
    pub trajectory: &'a [RigidTransform],
    pub calibration: RigidTransform,
    pub geometry: ImagingGeometry,
    pub noise: NoiseConfig,
    pub tracking_noise: TrackingNoise,
    pub seed: u64,
    /// Distinguishes the noise streams of sweeps sharing a seed.
    pub sweep_id: u64,
}

/// Renders every frame with its true pose and stores (possibly noisy)
/// tracking. Frames render in parallel; each frame's noise comes from its own
/// substream so the result does not depend on scheduling.
pub fn simulate_sweep(spec: &SweepSpec<'_>) -> (Sweep, SweepGroundTruth) {
    let frames: Vec<Frame> = spec
        .trajectory
        .par_iter()
        .enumerate()
        .map(|(i, true_pose)| {
            let stream_index = (spec.sweep_id << 32) | i as u64;
            let mut render_rng = substream(spec.seed, Stream::Render, stream_index);
            let mut frame = render_frame(
                spec.phantom,
                true_pose,
                &spec.calibration,
                &spec.geometry,
                &spec.noise,
                &mut render_rng,
            );
            frame.index = i;
            let mut track_rng = substream(spec.seed, Stream::TrackingNoise, stream_index);
            if spec.tracking_noise.sigma_mm > 0.0 || spec.tracking_noise.sigma_deg > 0.0 {
                frame.tracking = perturb_tracking(&mut track_rng, true_pose, spec.tracking_noise);
            }
            frame
        })
        .collect();

    let tips = spec.phantom.tips();
    let mut frame_tips = Vec::new();
    for (i, t) in spec.trajectory.iter().enumerate() {
        let inv = t.compose(&spec.calibration).inverse();
        for (k, (tip, cone)) in tips.iter().zip(&spec.phantom.cones).enumerate() {
            let local = inv.transform_point(tip);
            let point = ImagePoint::new(local.x, local.y);
            if local.z.abs() <= cone.base_radius && spec.geometry.contains(point) {
                frame_tips.push(FrameTip {
                    frame: i,
                    cone: k,
                    point,
                    offplane: local.z,
                });
            }
        }
    }
    let truth = SweepGroundTruth {
        calibration: spec.calibration,
        tips,
        true_tracking: spec.trajectory.to_vec(),
        frame_tips,
    };
    (
        Sweep {
            geometry: spec.geometry,
            frames,
        },
        truth,
    )
}

fn matrix_values(t: &RigidTransform) -> String {
    let m = t.to_matrix4();
    (0..3)
        .flat_map(|r| (0..4).map(move |c| (r, c)))
        .map(|(r, c)| format_sig(m[(r, c)], 12))
        .collect::<Vec<_>>()
        .join(" ")
}

fn transform_from_values(v: &[f64]) -> Result<RigidTransform> {
    if v.len() != 12 {
        return Err(Error::format("transform needs 12 values (3 rows of 4)"));
    }
    let mut m = nalgebra::Matrix4::identity();
    for r in 0..3 {
        for c in 0..4 {
            m[(r, c)] = v[r * 4 + c];
        }
    }
    RigidTransform::from_matrix4(&m)
}

impl SweepGroundTruth {
    /// `key = value` text: `calibration` (12 values, top 3 rows), one `tip`
    /// per cone, one `true_pose` per frame and the visible `frame_tip`s.
    pub fn to_text(&self) -> String {
        let mut kv = KeyValues::new();
        kv.push("calibration", matrix_values(&self.calibration));
        for (k, t) in self.tips.iter().enumerate() {
            kv.push(
                "tip",
                format!("{k} {} {} {}", format_sig(t.x, 12), format_sig(t.y, 12), format_sig(t.z, 12)),
            );
        }
        for (i, t) in self.true_tracking.iter().enumerate() {
            kv.push("true_pose", format!("{i} {}", matrix_values(t)));
        }
        for ft in &self.frame_tips {
            kv.push(
                "frame_tip",
                format!(
                    "{} {} {} {} {}",
                    ft.frame,
                    ft.cone,
                    format_sig(ft.point.x, 12),
                    format_sig(ft.point.y, 12),
                    format_sig(ft.offplane, 12)
                ),
            );
        }
        kv.to_text()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        let calibration = transform_from_values(&parse_floats(kv.require("calibration")?)?)?;
        let mut tips = Vec::new();
        for (expect, line) in kv.get_all("tip").enumerate() {
            let v = parse_floats(line)?;
            if v.len() != 4 || v[0] as usize != expect {
                return Err(Error::format(format!("bad tip line {line:?}")));
            }
            tips.push(Vector3::new(v[1], v[2], v[3]));
        }
        let mut true_tracking = Vec::new();
        for (expect, line) in kv.get_all("true_pose").enumerate() {
            let v = parse_floats(line)?;
            if v.is_empty() || v[0] as usize != expect {
                return Err(Error::format(format!("bad true_pose line {line:?}")));
            }
            true_tracking.push(transform_from_values(&v[1..])?);
        }
        let mut frame_tips = Vec::new();
        for line in kv.get_all("frame_tip") {
            let v = parse_floats(line)?;
            if v.len() != 5 {
                return Err(Error::format(format!("bad frame_tip line {line:?}")));
            }
            frame_tips.push(FrameTip {
                frame: v[0] as usize,
                cone: v[1] as usize,
                point: ImagePoint::new(v[2], v[3]),
                offplane: v[4],
            });
        }
        Ok(Self {
            calibration,
            tips,
            true_tracking,
            frame_tips,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_text())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_text(&read_text(path)?)
    }

    /// Tip locations visible on `frame`.
    pub fn tips_on_frame(&self, frame: usize) -> impl Iterator<Item = &FrameTip> {
        self.frame_tips.iter().filter(move |t| t.frame == frame)
    }
}

/// Everything needed to simulate an axial and a sagittal sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationParams {
    pub geometry: ImagingGeometry,
    pub n_frames: usize,
    pub noise: NoiseConfig,
    pub tracking_noise: TrackingNoise,
    pub trajectory: TrajectoryParams,
    /// Hidden calibration; drawn from the seed when absent.
    pub calibration: Option<RigidTransform>,
    pub seed: u64,
}

impl Default for SimulationParams {
    fn default() -> Self {
        Self {
            geometry: ImagingGeometry::default(),
            n_frames: 200,
            noise: NoiseConfig::none(),
            tracking_noise: TrackingNoise::default(),
            trajectory: TrajectoryParams::default(),
            calibration: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedPair {
    pub axial: Sweep,
    pub axial_truth: SweepGroundTruth,
    pub sagittal: Sweep,
    pub sagittal_truth: SweepGroundTruth,
}

impl SimulatedPair {
    pub fn calibration(&self) -> RigidTransform {
        self.axial_truth.calibration
    }
}

/// Simulates the axial sweep (id 0) and the sagittal sweep (id 1) under one
/// hidden calibration.
pub fn simulate_pair(phantom: &PhantomSpec, params: &SimulationParams) -> Result<SimulatedPair> {
    let calibration = params.calibration.unwrap_or_else(|| random_calibration(params.seed));
    let trajectory = TrajectoryParams { seed: params.seed, ..params.trajectory };
    let run = |kind: SweepKind| -> Result<(Sweep, SweepGroundTruth)> {
        let poses = make_trajectory(kind, params.n_frames, phantom, &calibration, &params.geometry, &trajectory)?;
        Ok(simulate_sweep(&SweepSpec {
            phantom,
            trajectory: &poses,
            calibration,
            geometry: params.geometry,
            noise: params.noise,
            tracking_noise: params.tracking_noise,
            seed: params.seed,
            sweep_id: kind.id(),
        }))
    };
    let (axial, axial_truth) = run(SweepKind::Axial)?;
    let (sagittal, sagittal_truth) = run(SweepKind::Sagittal)?;
    Ok(SimulatedPair { axial, axial_truth, sagittal, sagittal_truth })
}
