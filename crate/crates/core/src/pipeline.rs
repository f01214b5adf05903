//! End-to-end calibration of one sweep pair.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::RigidTransform;
use crate::eval::{fiducial_pair_errors, ErrorReport};
use crate::keyval::KeyValues;
use crate::phantom::PhantomSpec;
use crate::refine::{refine_calibration, RefineConfig, RefineOutcome};
use crate::rng::{substream, Stream};
use crate::segment::{fit_base_line, masks_for_sweep, BaseLine, BaseLineConfig, MaskSource, ReferenceSegmenter};
use crate::solve::{ransac_calibrate, CalibrationResult, Correspondence, RansacConfig};
use crate::sweep::Sweep;
use crate::track::{detect_cones, extract_tips, match_tips, ConeTrack, Detection, Tip, TipMatch, TrackConfig, Tracker};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub masks_a: MaskSource,
    pub masks_b: MaskSource,
    pub base_line: BaseLineConfig,
    pub track: TrackConfig,
    pub ransac: RansacConfig,
    pub refine: RefineConfig,
    pub refine_enabled: bool,
    /// Seeds base-line and calibration RANSAC.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let reference = MaskSource::Reference(ReferenceSegmenter::default());
        Self {
            masks_a: reference.clone(),
            masks_b: reference,
            base_line: BaseLineConfig::default(),
            track: TrackConfig::default(),
            ransac: RansacConfig::default(),
            refine: RefineConfig::default(),
            refine_enabled: true,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn with_masks(mut self, source: MaskSource) -> Self {
        self.masks_a = source.clone();
        self.masks_b = source;
        self
    }

    /// Overrides fields from `key = value` entries. Unknown keys are errors.
    pub fn apply_keyvalues(&mut self, kv: &KeyValues) -> Result<()> {
        for (key, value) in kv.entries() {
            let bad = || Error::format(format!("bad value for `{key}`: {value:?}"));
            let num = || value.parse::<f64>().map_err(|_| bad());
            let int = || value.parse::<usize>().map_err(|_| bad());
            let flag = || value.parse::<bool>().map_err(|_| bad());
            let list = || -> Result<Vec<f64>> {
                value.split(',').map(|v| v.trim().parse::<f64>().map_err(|_| bad())).collect()
            };
            match key.as_str() {
                "seg" => *self = self.clone().with_masks(value.parse()?),
                "seg_a" => self.masks_a = value.parse()?,
                "seg_b" => self.masks_b = value.parse()?,
                "seed" => self.seed = value.parse().map_err(|_| bad())?,
                "refine" => self.refine_enabled = flag()?,
                "base_inlier_distance" => self.base_line.inlier_distance = num()?,
                "base_iterations" => self.base_line.iterations = int()?,
                "base_min_pixels" => self.base_line.min_base_pixels = int()?,
                "base_min_inlier_ratio" => self.base_line.min_inlier_ratio = num()?,
                "min_area" => self.track.min_area = num()?,
                "max_gap" => self.track.max_gap = int()?,
                "min_detections" => self.track.min_detections = int()?,
                "smoothing_window" => self.track.smoothing_window = int()?,
                "min_tip_height" => self.track.min_tip_height = num()?,
                "match_threshold" => self.track.match_threshold = num()?,
                "subframe" => self.track.subframe = flag()?,
                "ransac_sample_size" => self.ransac.sample_size = int()?,
                "residual_gate" => self.ransac.residual_gate = num()?,
                "inlier_threshold" => self.ransac.inlier_threshold = num()?,
                "ransac_iterations" => self.ransac.iterations = int()?,
                "translation_steps" => self.refine.translation_steps = list()?,
                "rotation_steps" => self.refine.rotation_steps = list()?,
                "slab_halfwidth" => self.refine.slab_halfwidth = num()?,
                "frame_stride" => self.refine.frame_stride = int()?,
                "min_overlap_fraction" => self.refine.min_overlap_fraction = num()?,
                "max_passes" => self.refine.max_passes = int()?,
                _ => return Err(Error::format(format!("unknown configuration key `{key}`"))),
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.ransac.validate()?;
        self.refine.validate()
    }
}

/// Per-sweep intermediate results.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepAnalysis {
    pub base_lines: Vec<Option<BaseLine>>,
    pub detections: Vec<Vec<Detection>>,
    pub tracks: Vec<ConeTrack>,
    pub tips: Vec<Tip>,
}

impl SweepAnalysis {
    pub fn skipped_frames(&self) -> usize {
        self.base_lines.iter().filter(|b| b.is_none()).count()
    }
}

/// Segments, fits base lines, detects, tracks and extracts tips.
pub fn analyze_sweep(sweep: &Sweep, sweep_id: usize, source: &MaskSource, cfg: &PipelineConfig) -> Result<SweepAnalysis> {
    let masks = masks_for_sweep(sweep, source)?;
    let per_frame: Vec<(Option<BaseLine>, Vec<Detection>)> = masks
        .par_iter()
        .enumerate()
        .map(|(i, mask)| {
            let mut rng = substream(cfg.seed, Stream::BaseLine, ((sweep_id as u64) << 32) | i as u64);
            let base = fit_base_line(mask, &cfg.base_line, &mut rng);
            let dets = base
                .as_ref()
                .map(|b| detect_cones(mask, b, i, &cfg.track))
                .unwrap_or_default();
            (base, dets)
        })
        .collect();
    let (base_lines, detections): (Vec<_>, Vec<_>) = per_frame.into_iter().unzip();
    let mut tracker = Tracker::new(cfg.track);
    for (i, dets) in detections.iter().enumerate() {
        tracker.push_frame(i, dets);
    }
    let tracks = tracker.finish();
    let tips = extract_tips(&tracks, &sweep.geometry, sweep_id, &cfg.track);
    log::info!(
        "sweep {sweep_id}: {} frames, {} skipped, {} tracks, {} tips",
        sweep.len(),
        base_lines.iter().filter(|b| b.is_none()).count(),
        tracks.len(),
        tips.len()
    );
    Ok(SweepAnalysis { base_lines, detections, tracks, tips })
}

/// Pairs each tip match with the tracking poses at its tip positions.
pub fn correspondences(matches: &[TipMatch], sweep_a: &Sweep, sweep_b: &Sweep) -> Vec<Correspondence> {
    matches
        .iter()
        .map(|m| {
            Correspondence::new(
                sweep_a.pose_at(m.tip_a.frame_position),
                m.tip_a.image_point,
                sweep_b.pose_at(m.tip_b.frame_position),
                m.tip_b.image_point,
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationRun {
    pub analysis_a: SweepAnalysis,
    pub analysis_b: SweepAnalysis,
    pub matches: Vec<TipMatch>,
    pub ransac: CalibrationResult,
    pub refine: Option<RefineOutcome>,
}

impl CalibrationRun {
    pub fn initial(&self) -> RigidTransform {
        self.ransac.calibration
    }

    /// Refined calibration, or the RANSAC estimate when refinement was off.
    pub fn calibration(&self) -> RigidTransform {
        self.refine
            .as_ref()
            .map(|r| r.calibration)
            .unwrap_or(self.ransac.calibration)
    }
}

pub fn calibrate(sweep_a: &Sweep, sweep_b: &Sweep, cfg: &PipelineConfig) -> Result<CalibrationRun> {
    let (analysis_a, analysis_b) = rayon::join(
        || analyze_sweep(sweep_a, 0, &cfg.masks_a, cfg),
        || analyze_sweep(sweep_b, 1, &cfg.masks_b, cfg),
    );
    let (analysis_a, analysis_b) = (analysis_a?, analysis_b?);
    let matches = match_tips(&analysis_a.tips, &analysis_b.tips, cfg.track.match_threshold);
    log::info!("{} tip matches", matches.len());
    let corr = correspondences(&matches, sweep_a, sweep_b);
    let ransac_cfg = RansacConfig { seed: cfg.seed, ..cfg.ransac };
    let ransac = ransac_calibrate(&corr, &ransac_cfg)?;
    log::info!(
        "ransac: {} of {} matches are inliers, refit residual {:.4} mm²",
        ransac.inliers.len(),
        matches.len(),
        ransac.refit_residual
    );
    let refine = if cfg.refine_enabled {
        let out = refine_calibration(sweep_a, sweep_b, &ransac.calibration, &cfg.refine)?;
        log::info!(
            "refinement: objective {:.5} -> {:.5} after {} evaluations",
            out.initial_objective,
            out.final_objective,
            out.evaluations
        );
        Some(out)
    } else {
        None
    };
    Ok(CalibrationRun { analysis_a, analysis_b, matches, ransac, refine })
}

/// Tips of one sweep with the tracking pose at each tip position.
pub fn posed_tips(analysis: &SweepAnalysis, sweep: &Sweep) -> Vec<(Tip, RigidTransform)> {
    analysis.tips.iter().map(|t| (*t, sweep.pose_at(t.frame_position))).collect()
}

/// Fiducial pair errors of the tips of both sweeps under `c`.
pub fn evaluate_tips(
    analysis_a: &SweepAnalysis,
    sweep_a: &Sweep,
    analysis_b: &SweepAnalysis,
    sweep_b: &Sweep,
    c: &RigidTransform,
    phantom: &PhantomSpec,
) -> Result<ErrorReport> {
    let mut tips = posed_tips(analysis_a, sweep_a);
    tips.extend(posed_tips(analysis_b, sweep_b));
    fiducial_pair_errors(&tips, c, phantom)
}

impl CalibrationRun {
    /// Summary of every stage as `key = value` entries.
    pub fn to_keyvalues(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        for (name, a) in [("a", &self.analysis_a), ("b", &self.analysis_b)] {
            kv.push(&format!("skipped_frames_{name}"), a.skipped_frames());
            kv.push(&format!("tracks_{name}"), a.tracks.len());
            kv.push(&format!("tips_{name}"), a.tips.len());
        }
        for (k, v) in self.ransac.to_keyvalues().entries() {
            kv.push(k, v);
        }
        match &self.refine {
            Some(r) => {
                kv.push("refine_status", format!("{:?}", r.status));
                kv.push("initial_objective", format!("{:.9}", r.initial_objective));
                kv.push("final_objective", format!("{:.9}", r.final_objective));
                kv.push("objective_evaluations", r.evaluations);
            }
            None => kv.push("refine_status", "Disabled"),
        }
        kv
    }
}
