//! Cone detection on single frames, association of detections into tracks
//! across frames, tip extraction and cross-sweep matching by height.

use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};

use crate::geom::ImagePoint;
use crate::phantom::Label;
use crate::segment::{BaseLine, LabelMask};
use crate::sweep::ImagingGeometry;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackConfig {
    /// Smallest accepted component, mm².
    pub min_area: f64,
    /// A track with no detection for more than this many frames ends.
    pub max_gap: usize,
    pub min_detections: usize,
    /// Centered mean window over the height sequence.
    pub smoothing_window: usize,
    /// Tips lower than this are dropped, mm.
    pub min_tip_height: f64,
    /// Strict bound on the height difference of a match, mm.
    pub match_threshold: f64,
    /// Locate the apex crossing between frames from lines fitted to the
    /// rising and falling flanks of the raw heights, and interpolate the tip
    /// between the two bracketing frames.
    pub subframe: bool,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            min_area: 25.0,
            max_gap: 3,
            min_detections: 10,
            smoothing_window: 5,
            min_tip_height: 15.0,
            match_threshold: 3.0,
            subframe: true,
        }
    }
}

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PixelRect {
    pub col_min: usize,
    pub row_min: usize,
    pub col_max: usize,
    pub row_max: usize,
}

impl PixelRect {
    pub fn new(col_min: usize, row_min: usize, col_max: usize, row_max: usize) -> Self {
        Self { col_min, row_min, col_max, row_max }
    }

    /// Number of shared pixels.
    pub fn intersection(&self, other: &PixelRect) -> usize {
        let c0 = self.col_min.max(other.col_min);
        let c1 = self.col_max.min(other.col_max);
        let r0 = self.row_min.max(other.row_min);
        let r1 = self.row_max.min(other.row_max);
        if c0 > c1 || r0 > r1 {
            0
        } else {
            (c1 - c0 + 1) * (r1 - r0 + 1)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub frame_index: usize,
    pub bbox: PixelRect,
    pub highest_point: ImagePoint,
    /// Distance of `highest_point` above the base line, mm.
    pub height: f64,
    /// mm².
    pub area: f64,
    /// Sub-pixel apex: intersection of lines fitted to the two flanks of the
    /// component's upper rows. Equals `highest_point` when the fit is
    /// ill-posed.
    pub apex: ImagePoint,
    pub apex_height: f64,
}

/// Most rows used by the flank fit.
const APEX_FIT_ROWS: usize = 30;
/// Fraction of the component height available to the flank fit, keeping
/// it clear of neighbours merged near the base.
const APEX_FIT_FRACTION: f64 = 0.7;
/// Largest distance of the flank intersection above the top row, in rows.
const APEX_MAX_RISE: f64 = 10.0;

/// Least-squares line `x = a + b·y`.
fn fit_line(ys: &[f64], xs: &[f64]) -> Option<(f64, f64)> {
    let n = ys.len() as f64;
    let my = ys.iter().sum::<f64>() / n;
    let mx = xs.iter().sum::<f64>() / n;
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if syy <= 0.0 {
        return None;
    }
    let sxy: f64 = ys.iter().zip(xs).map(|(y, x)| (y - my) * (x - mx)).sum();
    let b = sxy / syy;
    Some((mx - b * my, b))
}

/// Intersects lines through the left and right pixel edges of the upper
/// rows of a component. `rows[k]` holds the column extent of row
/// `top + k`.
fn flank_apex(rows: &[(usize, usize)], top: usize, spacing: f64) -> Option<ImagePoint> {
    if rows.len() < 3 {
        return None;
    }
    let ys: Vec<f64> = (0..rows.len()).map(|k| (top + k) as f64 * spacing + 0.5 * spacing).collect();
    let left: Vec<f64> = rows.iter().map(|&(l, _)| l as f64 * spacing).collect();
    let right: Vec<f64> = rows.iter().map(|&(_, r)| (r + 1) as f64 * spacing).collect();
    let (al, bl) = fit_line(&ys, &left)?;
    let (ar, br) = fit_line(&ys, &right)?;
    // Flanks must open downward.
    if br - bl <= 1e-6 {
        return None;
    }
    let y = (al - ar) / (br - bl);
    let x = al + bl * y;
    // Off-axis sections are rounded at the top, so the flank lines meet
    // above the topmost pixel; reject only implausibly distant apexes.
    let y_top = ys[0] - 0.5 * spacing;
    if !(y > y_top - APEX_MAX_RISE * spacing && y < ys[ys.len() - 1]) {
        return None;
    }
    Some(ImagePoint::new(x, y))
}

/// 4-connected Cone components strictly above the base line.
pub fn detect_cones(
    mask: &LabelMask,
    base: &BaseLine,
    frame_index: usize,
    cfg: &TrackConfig,
) -> Vec<Detection> {
    let (w, h) = (mask.width(), mask.height());
    let pixel_area = mask.spacing * mask.spacing;
    let heights: Vec<f64> = (0..w * h)
        .map(|i| base.height(mask.pixel_center(i % w, i / w)))
        .collect();
    let eligible = |i: usize| mask.label(i % w, i / w) == Label::Cone && heights[i] > 0.0;

    let mut seen = vec![false; w * h];
    let mut stack = Vec::new();
    let mut pixels = Vec::new();
    let mut out = Vec::new();
    for start in 0..w * h {
        if seen[start] || !eligible(start) {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut count = 0usize;
        let mut bbox = PixelRect::new(start % w, start / w, start % w, start / w);
        let mut best = start;
        pixels.clear();
        while let Some(i) = stack.pop() {
            count += 1;
            pixels.push(i);
            let (c, r) = (i % w, i / w);
            bbox.col_min = bbox.col_min.min(c);
            bbox.col_max = bbox.col_max.max(c);
            bbox.row_min = bbox.row_min.min(r);
            bbox.row_max = bbox.row_max.max(r);
            let (bc, br) = (best % w, best / w);
            if heights[i] > heights[best] || (heights[i] == heights[best] && (c, r) < (bc, br)) {
                best = i;
            }
            let mut visit = |j: usize| {
                if !seen[j] && eligible(j) {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
        }
        let area = count as f64 * pixel_area;
        if area < cfg.min_area {
            continue;
        }
        let cap = ((heights[best] * APEX_FIT_FRACTION / mask.spacing).floor() as usize).max(3);
        let n_rows = (bbox.row_max - bbox.row_min + 1).min(APEX_FIT_ROWS).min(cap);
        let mut rows = vec![(usize::MAX, 0usize); n_rows];
        for &i in &pixels {
            let k = i / w - bbox.row_min;
            if k < n_rows {
                let c = i % w;
                rows[k].0 = rows[k].0.min(c);
                rows[k].1 = rows[k].1.max(c);
            }
        }
        let highest_point = mask.pixel_center(best % w, best / w);
        let apex = flank_apex(&rows, bbox.row_min, mask.spacing).unwrap_or(highest_point);
        out.push(Detection {
            frame_index,
            bbox,
            highest_point,
            height: heights[best],
            area,
            apex,
            apex_height: base.height(apex),
        });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackState {
    Active,
    Terminated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConeTrack {
    pub detections: Vec<Detection>,
    pub last_update: usize,
    pub state: TrackState,
}

impl ConeTrack {
    fn start(d: Detection) -> Self {
        Self {
            last_update: d.frame_index,
            detections: vec![d],
            state: TrackState::Active,
        }
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn last(&self) -> &Detection {
        self.detections.last().expect("tracks are created with one detection")
    }
}

/// Advances the tracks to `frame_index` and assigns that frame's detections.
pub fn update_tracks(
    tracks: &mut Vec<ConeTrack>,
    detections: &[Detection],
    frame_index: usize,
    cfg: &TrackConfig,
) {
    for t in tracks.iter_mut() {
        if t.state == TrackState::Active && t.last_update + cfg.max_gap < frame_index {
            t.state = TrackState::Terminated;
        }
    }

    // Canonical detection order makes the result independent of input order.
    let mut dets: Vec<Detection> = detections.to_vec();
    dets.sort_by(|a, b| {
        a.bbox
            .cmp(&b.bbox)
            .then(a.height.total_cmp(&b.height))
            .then(a.area.total_cmp(&b.area))
    });

    let mut candidates: Vec<(usize, usize, usize)> = Vec::new();
    for (ti, t) in tracks.iter().enumerate() {
        if t.state != TrackState::Active {
            continue;
        }
        for (di, d) in dets.iter().enumerate() {
            let area = t.last().bbox.intersection(&d.bbox);
            if area > 0 {
                candidates.push((area, di, ti));
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.0.cmp(&a.0)
            .then(dets[a.1].bbox.col_min.cmp(&dets[b.1].bbox.col_min))
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    let mut det_used = vec![false; dets.len()];
    let mut track_used = vec![false; tracks.len()];
    for (_, di, ti) in candidates {
        if det_used[di] || track_used[ti] {
            continue;
        }
        det_used[di] = true;
        track_used[ti] = true;
        tracks[ti].detections.push(dets[di]);
        tracks[ti].last_update = frame_index;
    }
    // A detection that overlaps only tracks already served this frame is a
    // duplicate of that cone, not a new cone.
    for (di, d) in dets.iter().enumerate() {
        if det_used[di] {
            continue;
        }
        let overlaps_active = tracks
            .iter()
            .any(|t| t.state == TrackState::Active && t.last().bbox.intersection(&d.bbox) > 0);
        if !overlaps_active {
            tracks.push(ConeTrack::start(*d));
        }
    }
}

/// Sequential track builder over the frames of one sweep.
#[derive(Debug, Clone, Default)]
pub struct Tracker {
    pub config: TrackConfig,
    tracks: Vec<ConeTrack>,
}

impl Tracker {
    pub fn new(config: TrackConfig) -> Self {
        Self { config, tracks: Vec::new() }
    }

    pub fn push_frame(&mut self, frame_index: usize, detections: &[Detection]) {
        update_tracks(&mut self.tracks, detections, frame_index, &self.config);
    }

    pub fn tracks(&self) -> &[ConeTrack] {
        &self.tracks
    }

    /// Terminates every track and returns them in creation order.
    pub fn finish(mut self) -> Vec<ConeTrack> {
        for t in &mut self.tracks {
            t.state = TrackState::Terminated;
        }
        self.tracks
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tip {
    pub sweep_id: usize,
    pub frame_index: usize,
    /// Fractional frame of the apex crossing; equals `frame_index` unless
    /// sub-frame location is enabled.
    pub frame_position: f64,
    pub image_point: ImagePoint,
    pub smoothed_height: f64,
    /// Apex height of the selected detection.
    pub height: f64,
    /// Position of the source track in the tracker's output.
    pub track: usize,
}

/// Frames on each side of the peak excluded from the flank fits.
const FLANK_GAP: f64 = 2.0;
/// Farthest frame from the peak used by the flank fits.
const FLANK_REACH: f64 = 9.0;
/// Smallest number of samples per flank.
const FLANK_MIN_SAMPLES: usize = 4;

/// Least-squares line `h = a + b·s`; `None` for fewer than two distinct `s`.
fn line_fit<'a>(samples: impl Iterator<Item = &'a (f64, f64)>) -> Option<(f64, f64, usize)> {
    let (mut n, mut ss, mut sh, mut sss, mut ssh) = (0usize, 0.0, 0.0, 0.0, 0.0);
    for &(s, h) in samples {
        n += 1;
        ss += s;
        sh += h;
        sss += s * s;
        ssh += s * h;
    }
    let nf = n as f64;
    let det = nf * sss - ss * ss;
    if n < 2 || det.abs() < 1e-12 {
        return None;
    }
    let b = (nf * ssh - ss * sh) / det;
    Some(((sh - b * ss) / nf, b, n))
}

/// Intersection of the lines fitted to the rising samples in
/// `[center − FLANK_REACH, center − FLANK_GAP]` and the falling samples in
/// `[center + FLANK_GAP, center + FLANK_REACH]`. Samples near the peak are
/// left out because the cross-section there flattens. Returns `None` when a
/// flank is short, has the wrong slope sign, or the intersection lies more
/// than `FLANK_GAP` from `center`.
pub fn fit_flanks(samples: &[(f64, f64)], center: f64) -> Option<f64> {
    let (a1, b1, n1) = line_fit(
        samples
            .iter()
            .filter(|(s, _)| *s >= center - FLANK_REACH && *s <= center - FLANK_GAP),
    )?;
    let (a2, b2, n2) = line_fit(
        samples
            .iter()
            .filter(|(s, _)| *s >= center + FLANK_GAP && *s <= center + FLANK_REACH),
    )?;
    if n1 < FLANK_MIN_SAMPLES || n2 < FLANK_MIN_SAMPLES || b1 <= 0.0 || b2 >= 0.0 {
        return None;
    }
    let s0 = (a2 - a1) / (b1 - b2);
    ((s0 - center).abs() <= FLANK_GAP).then_some(s0)
}

/// Apex crossing refined by two rounds of flank fitting, the second centred
/// on the nearest frame to the first estimate.
pub fn subframe_peak(samples: &[(f64, f64)], center: f64) -> Option<f64> {
    let s0 = fit_flanks(samples, center)?;
    fit_flanks(samples, s0.round()).or(Some(s0))
}

/// Centered mean with the window truncated at the ends.
pub fn smooth_heights(heights: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..heights.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(heights.len());
            heights[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

pub fn extract_tips(
    tracks: &[ConeTrack],
    geom: &ImagingGeometry,
    sweep_id: usize,
    cfg: &TrackConfig,
) -> Vec<Tip> {
    let mut tips = Vec::new();
    for (ti, t) in tracks.iter().enumerate() {
        if t.len() < cfg.min_detections {
            continue;
        }
        let raw: Vec<f64> = t.detections.iter().map(|d| d.height).collect();
        let smooth = smooth_heights(&raw, cfg.smoothing_window);
        let mut best = 0;
        for (i, &s) in smooth.iter().enumerate() {
            if s > smooth[best] {
                best = i;
            }
        }
        let peak = smooth[best];
        let d = &t.detections[best];
        if peak < cfg.min_tip_height || !geom.contains(d.highest_point) {
            continue;
        }
        let mut tip = Tip {
            sweep_id,
            frame_index: d.frame_index,
            frame_position: d.frame_index as f64,
            image_point: d.apex,
            smoothed_height: peak,
            height: d.apex_height,
            track: ti,
        };
        if cfg.subframe {
            let samples: Vec<(f64, f64)> = t.detections.iter().map(|d| (d.frame_index as f64, d.height)).collect();
            if let Some(s0) = subframe_peak(&samples, d.frame_index as f64) {
                interpolate_tip(&mut tip, t, s0);
            }
        }
        tips.push(tip);
    }
    tips
}

/// Frames on each side of the crossing used to fit the tip trajectory.
const TIP_FIT_HALF_WINDOW: f64 = 4.0;

/// Least-squares quadratic in `t` evaluated at `t = 0`.
fn quadratic_at_zero(ts: &[f64], vs: &[f64]) -> Option<f64> {
    let mut ata = Matrix3::zeros();
    let mut atb = Vector3::zeros();
    for (&t, &v) in ts.iter().zip(vs) {
        let row = Vector3::new(1.0, t, t * t);
        ata += row * row.transpose();
        atb += row * v;
    }
    ata.cholesky().map(|c| c.solve(&atb)[0])
}

/// Moves `tip` to fractional frame `s0`. The image point is a quadratic
/// in frame fitted to the apexes within [`TIP_FIT_HALF_WINDOW`] frames,
/// which averages quantisation noise and absorbs the off-plane bias that
/// grows symmetrically away from the crossing. Left unchanged if either
/// bracketing frame is missing.
fn interpolate_tip(tip: &mut Tip, track: &ConeTrack, s0: f64) {
    let f0 = s0.floor();
    let at = |f: f64| track.detections.iter().find(|d| d.frame_index as f64 == f);
    let (Some(d0), Some(d1)) = (at(f0), at(f0 + 1.0)) else { return };
    let w = s0 - f0;
    let nearest = if w < 0.5 { d0 } else { d1 };
    tip.frame_index = nearest.frame_index;
    tip.frame_position = s0;
    tip.height = (1.0 - w) * d0.apex_height + w * d1.apex_height;
    let near: Vec<&Detection> = track
        .detections
        .iter()
        .filter(|d| (d.frame_index as f64 - s0).abs() <= TIP_FIT_HALF_WINDOW)
        .collect();
    let ts: Vec<f64> = near.iter().map(|d| d.frame_index as f64 - s0).collect();
    let xs: Vec<f64> = near.iter().map(|d| d.apex.x).collect();
    let ys: Vec<f64> = near.iter().map(|d| d.apex.y).collect();
    tip.image_point = match (near.len() >= 5).then(|| (quadratic_at_zero(&ts, &xs), quadratic_at_zero(&ts, &ys))) {
        Some((Some(x), Some(y))) => ImagePoint::new(x, y),
        _ => ImagePoint::new((1.0 - w) * d0.apex.x + w * d1.apex.x, (1.0 - w) * d0.apex.y + w * d1.apex.y),
    };
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TipMatch {
    pub index_a: usize,
    pub index_b: usize,
    pub tip_a: Tip,
    pub tip_b: Tip,
}

impl TipMatch {
    pub fn height_difference(&self) -> f64 {
        (self.tip_a.smoothed_height - self.tip_b.smoothed_height).abs()
    }
}

/// Every cross pair whose smoothed heights differ by less than the
/// threshold, ordered by (a, b).
pub fn match_tips(tips_a: &[Tip], tips_b: &[Tip], threshold: f64) -> Vec<TipMatch> {
    let mut out = Vec::new();
    for (ia, a) in tips_a.iter().enumerate() {
        for (ib, b) in tips_b.iter().enumerate() {
            if (a.smoothed_height - b.smoothed_height).abs() < threshold {
                out.push(TipMatch { index_a: ia, index_b: ib, tip_a: *a, tip_b: *b });
            }
        }
    }
    out
}

/// Tab-separated per-frame detection list.
pub fn detections_tsv(per_frame: &[Vec<Detection>]) -> String {
    let mut s = String::from("frame\tcol_min\trow_min\tcol_max\trow_max\tx_mm\ty_mm\theight_mm\tarea_mm2\n");
    for d in per_frame.iter().flatten() {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{:.3}\t{:.3}\t{:.3}\t{:.1}",
            d.frame_index,
            d.bbox.col_min,
            d.bbox.row_min,
            d.bbox.col_max,
            d.bbox.row_max,
            d.highest_point.x,
            d.highest_point.y,
            d.height,
            d.area
        );
    }
    s
}

/// Tab-separated track table.
pub fn tracks_tsv(tracks: &[ConeTrack]) -> String {
    let mut s = String::from("track\tfirst_frame\tlast_frame\tdetections\tmax_height_mm\n");
    for (i, t) in tracks.iter().enumerate() {
        let max_h = t.detections.iter().map(|d| d.height).fold(f64::NEG_INFINITY, f64::max);
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{:.3}",
            i,
            t.detections[0].frame_index,
            t.last().frame_index,
            t.len(),
            max_h
        );
    }
    s
}

/// Tab-separated tip list.
pub fn tips_tsv(tips: &[Tip]) -> String {
    let mut s = String::from("sweep\ttrack\tframe\tposition\tx_mm\ty_mm\tsmoothed_height_mm\theight_mm\n");
    for t in tips {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            t.sweep_id,
            t.track,
            t.frame_index,
            t.frame_position,
            t.image_point.x,
            t.image_point.y,
            t.smoothed_height,
            t.height
        );
    }
    s
}
