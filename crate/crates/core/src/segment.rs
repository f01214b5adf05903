//! Per-frame three-class masks and the base-plate line that serves as the
//! height datum for cone detection.
//!
//! Masks come from one of three sources: the reference intensity segmenter,
//! the simulator's labels, or files written by an external segmentation
//! model (`mask_%05d.pgm`, values in `{0,1,2}`).

use std::collections::VecDeque;
use std::path::Path;

use nalgebra::{Matrix2, SymmetricEigen, Vector2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::geom::ImagePoint;
use crate::phantom::Label;
use crate::raster::Raster;
use crate::sweep::{check_dims, check_label_values, mask_file, Frame, ImagingGeometry, Sweep};

/// Lower intensity bound of the Cone band.
pub const CONE_THRESHOLD: u8 = 80;
/// Lower intensity bound of the Base band.
pub const BASE_THRESHOLD: u8 = 160;

#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    pub labels: Raster<u8>,
    pub spacing: f64,
}

impl LabelMask {
    pub fn new(labels: Raster<u8>, spacing: f64) -> Self {
        Self { labels, spacing }
    }

    #[inline]
    pub fn label(&self, col: usize, row: usize) -> Label {
        Label::from_code(self.labels.get(col, row)).unwrap_or(Label::Background)
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.data().iter().filter(|&&v| v == label.code()).count()
    }

    pub fn width(&self) -> usize {
        self.labels.width()
    }

    pub fn height(&self) -> usize {
        self.labels.height()
    }

    pub fn pixel_center(&self, col: usize, row: usize) -> ImagePoint {
        ImagePoint::new(
            (col as f64 + 0.5) * self.spacing,
            (row as f64 + 0.5) * self.spacing,
        )
    }

    /// Fraction of pixels on which two masks agree.
    pub fn agreement(&self, other: &LabelMask) -> f64 {
        let same = self
            .labels
            .data()
            .iter()
            .zip(other.labels.data())
            .filter(|(a, b)| a == b)
            .count();
        same as f64 / self.labels.len().max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Opening {
    None,
    /// Erosion then dilation with a 3×3 square.
    Plain,
    /// Keeps every connected region that survives a 3×3 erosion, with its
    /// full original shape.
    Reconstruction,
}

/// Classical stand-in for a trained segmentation network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceSegmenter {
    pub median: bool,
    pub opening: Opening,
}

impl Default for ReferenceSegmenter {
    fn default() -> Self {
        Self {
            median: false,
            opening: Opening::Reconstruction,
        }
    }
}

impl ReferenceSegmenter {
    /// Median 3×3, threshold bands, plain 3×3 opening per class.
    pub fn classic() -> Self {
        Self {
            median: true,
            opening: Opening::Plain,
        }
    }

    pub fn segment(&self, intensity: &Raster<u8>, geom: &ImagingGeometry) -> LabelMask {
        let filtered = if self.median {
            median3(intensity)
        } else {
            intensity.clone()
        };
        let mut labels = Raster::from_fn(filtered.width(), filtered.height(), |c, r| {
            if !geom.pixel_valid(c, r) {
                return Label::Background.code();
            }
            let v = filtered.get(c, r);
            if v >= BASE_THRESHOLD {
                Label::Base.code()
            } else if v >= CONE_THRESHOLD {
                Label::Cone.code()
            } else {
                Label::Background.code()
            }
        });
        if self.opening != Opening::None {
            for class in [Label::Base, Label::Cone] {
                let mask = labels.map(|v| v == class.code());
                let kept = match self.opening {
                    Opening::Plain => dilate3(&erode3(&mask)),
                    Opening::Reconstruction => reconstruct(&erode3(&mask), &mask),
                    Opening::None => unreachable!(),
                };
                for (i, (&was, &keep)) in mask.data().iter().zip(kept.data()).enumerate() {
                    if was && !keep {
                        labels.data_mut()[i] = Label::Background.code();
                    }
                }
            }
        }
        LabelMask::new(labels, geom.spacing)
    }
}

/// Where the per-frame masks come from.
#[derive(Debug, Clone, PartialEq)]
pub enum MaskSource {
    Reference(ReferenceSegmenter),
    TrueLabels,
    External(std::path::PathBuf),
}

impl std::str::FromStr for MaskSource {
    type Err = Error;

    /// `reference`, `true-labels` or `external:DIR`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(MaskSource::Reference(ReferenceSegmenter::default())),
            "true-labels" => Ok(MaskSource::TrueLabels),
            _ => match s.strip_prefix("external:") {
                Some(dir) if !dir.is_empty() => Ok(MaskSource::External(dir.into())),
                _ => Err(Error::InvalidArgument(format!(
                    "segmentation mode must be reference, true-labels or external:DIR, got {s:?}"
                ))),
            },
        }
    }
}

impl std::fmt::Display for MaskSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MaskSource::Reference(_) => write!(f, "reference"),
            MaskSource::TrueLabels => write!(f, "true-labels"),
            MaskSource::External(dir) => write!(f, "external:{}", dir.display()),
        }
    }
}

/// Segments one frame. With `use_true_labels` and simulator labels present,
/// the labels are returned verbatim.
pub fn segment_frame(
    frame: &Frame,
    geom: &ImagingGeometry,
    segmenter: &ReferenceSegmenter,
    use_true_labels: bool,
) -> LabelMask {
    match (&frame.true_labels, use_true_labels) {
        (Some(labels), true) => LabelMask::new(labels.clone(), geom.spacing),
        _ => segmenter.segment(&frame.intensity, geom),
    }
}

/// Reads one `mask_%05d.pgm` per frame of `sweep` from `dir`.
pub fn load_external_masks(dir: &Path, sweep: &Sweep) -> Result<Vec<LabelMask>> {
    sweep
        .frames
        .iter()
        .map(|f| {
            let path = dir.join(mask_file(f.index));
            if !path.exists() {
                return Err(Error::format(format!(
                    "external mask for frame {} missing ({})",
                    f.index,
                    path.display()
                )));
            }
            let labels = Raster::read_pgm(&path)?;
            check_dims(&labels, &sweep.geometry, &path)?;
            check_label_values(&labels, &path)?;
            Ok(LabelMask::new(labels, sweep.geometry.spacing))
        })
        .collect()
}

/// Produces masks for every frame of a sweep, in frame order.
pub fn masks_for_sweep(sweep: &Sweep, source: &MaskSource) -> Result<Vec<LabelMask>> {
    use rayon::prelude::*;
    match source {
        MaskSource::External(dir) => load_external_masks(dir, sweep),
        MaskSource::TrueLabels => {
            if !sweep.has_true_labels() {
                return Err(Error::format(
                    "true-labels segmentation requested but the sweep has no label files",
                ));
            }
            Ok(sweep
                .frames
                .iter()
                .map(|f| segment_frame(f, &sweep.geometry, &ReferenceSegmenter::default(), true))
                .collect())
        }
        MaskSource::Reference(seg) => Ok(sweep
            .frames
            .par_iter()
            .map(|f| seg.segment(&f.intensity, &sweep.geometry))
            .collect()),
    }
}

fn median3(img: &Raster<u8>) -> Raster<u8> {
    let (w, h) = (img.width() as isize, img.height() as isize);
    Raster::from_fn(img.width(), img.height(), |c, r| {
        let mut win = [0u8; 9];
        let mut k = 0;
        for dr in -1..=1isize {
            for dc in -1..=1isize {
                let cc = (c as isize + dc).clamp(0, w - 1) as usize;
                let rr = (r as isize + dr).clamp(0, h - 1) as usize;
                win[k] = img.get(cc, rr);
                k += 1;
            }
        }
        win.sort_unstable();
        win[4]
    })
}

/// 3×3 erosion; pixels beyond the border replicate the edge.
fn erode3(m: &Raster<bool>) -> Raster<bool> {
    window3(m, true)
}

fn dilate3(m: &Raster<bool>) -> Raster<bool> {
    window3(m, false)
}

fn window3(m: &Raster<bool>, all: bool) -> Raster<bool> {
    let (w, h) = (m.width() as isize, m.height() as isize);
    Raster::from_fn(m.width(), m.height(), |c, r| {
        let mut acc = all;
        for dr in -1..=1isize {
            for dc in -1..=1isize {
                let cc = (c as isize + dc).clamp(0, w - 1) as usize;
                let rr = (r as isize + dr).clamp(0, h - 1) as usize;
                let v = m.get(cc, rr);
                if all {
                    acc &= v;
                } else {
                    acc |= v;
                }
            }
        }
        acc
    })
}

/// Morphological reconstruction by dilation (8-connected) of `marker`
/// under `mask`.
fn reconstruct(marker: &Raster<bool>, mask: &Raster<bool>) -> Raster<bool> {
    let (w, h) = (mask.width(), mask.height());
    let mut out = Raster::filled(w, h, false);
    let mut queue = VecDeque::new();
    for r in 0..h {
        for c in 0..w {
            if marker.get(c, r) && mask.get(c, r) {
                out.set(c, r, true);
                queue.push_back((c, r));
            }
        }
    }
    while let Some((c, r)) = queue.pop_front() {
        for dr in -1..=1isize {
            for dc in -1..=1isize {
                let (cc, rr) = (c as isize + dc, r as isize + dr);
                if cc < 0 || rr < 0 || cc >= w as isize || rr >= h as isize {
                    continue;
                }
                let (cc, rr) = (cc as usize, rr as usize);
                if mask.get(cc, rr) && !out.get(cc, rr) {
                    out.set(cc, rr, true);
                    queue.push_back((cc, rr));
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseLineConfig {
    /// Perpendicular inlier distance, mm.
    pub inlier_distance: f64,
    pub iterations: usize,
    pub min_base_pixels: usize,
    pub min_inlier_ratio: f64,
}

impl Default for BaseLineConfig {
    fn default() -> Self {
        Self {
            inlier_distance: 1.5,
            iterations: 200,
            min_base_pixels: 50,
            min_inlier_ratio: 0.5,
        }
    }
}

/// The plate's top surface as seen on one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseLine {
    pub point: ImagePoint,
    /// Unit direction, with a non-negative x component.
    pub direction: Vector2<f64>,
    pub inlier_count: usize,
}

impl BaseLine {
    pub fn new(point: ImagePoint, direction: Vector2<f64>, inlier_count: usize) -> Self {
        let mut d = direction.normalize();
        if d.x < 0.0 || (d.x == 0.0 && d.y < 0.0) {
            d = -d;
        }
        Self {
            point,
            direction: d,
            inlier_count,
        }
    }

    /// Unit normal pointing to the side nearer the transducer.
    pub fn up(&self) -> Vector2<f64> {
        let n = Vector2::new(self.direction.y, -self.direction.x);
        if n.y > 0.0 || (n.y == 0.0 && n.x > 0.0) {
            -n
        } else {
            n
        }
    }

    /// Signed perpendicular distance; positive above the plate.
    pub fn height(&self, p: ImagePoint) -> f64 {
        let d = Vector2::new(p.x - self.point.x, p.y - self.point.y);
        d.dot(&self.up())
    }

    pub fn angle_deg(&self) -> f64 {
        self.direction.y.atan2(self.direction.x).to_degrees()
    }
}

/// Upper edges of vertical Base runs at least two pixels long. Each edge
/// point sits half a pixel above the first Base pixel, on the boundary with
/// the pixel above it.
fn base_edge_points(mask: &LabelMask) -> Vec<Vector2<f64>> {
    let mut pts = Vec::new();
    for c in 0..mask.width() {
        for r in 1..mask.height().saturating_sub(1) {
            if mask.label(c, r) == Label::Base
                && mask.label(c, r - 1) != Label::Base
                && mask.label(c, r + 1) == Label::Base
            {
                let p = mask.pixel_center(c, r);
                pts.push(Vector2::new(p.x, p.y - 0.5 * mask.spacing));
            }
        }
    }
    pts
}

/// Total-least-squares line through `pts`: centroid and principal direction.
fn tls_line(pts: &[Vector2<f64>]) -> (Vector2<f64>, Vector2<f64>) {
    let n = pts.len() as f64;
    let centroid = pts.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    let mut cov = Matrix2::zeros();
    for p in pts {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let k = if eig.eigenvalues[0] >= eig.eigenvalues[1] { 0 } else { 1 };
    (centroid, eig.eigenvectors.column(k).into_owned())
}

fn line_distance(point: &Vector2<f64>, dir: &Vector2<f64>, q: &Vector2<f64>) -> f64 {
    let d = q - point;
    (d.x * dir.y - d.y * dir.x).abs()
}

/// RANSAC line through the upper edge of the Base region, refit by total
/// least squares on the inliers. `None` means the frame is skipped.
pub fn fit_base_line<R: Rng>(mask: &LabelMask, cfg: &BaseLineConfig, rng: &mut R) -> Option<BaseLine> {
    if mask.count(Label::Base) < cfg.min_base_pixels {
        return None;
    }
    let pts = base_edge_points(mask);
    if pts.len() < 2 {
        return None;
    }
    let mut best: Option<(usize, Vector2<f64>, Vector2<f64>)> = None;
    for _ in 0..cfg.iterations {
        let i = rng.random_range(0..pts.len());
        let mut j = rng.random_range(0..pts.len() - 1);
        if j >= i {
            j += 1;
        }
        let dir = pts[j] - pts[i];
        let len = dir.norm();
        if len == 0.0 {
            continue;
        }
        let dir = dir / len;
        let count = pts
            .iter()
            .filter(|q| line_distance(&pts[i], &dir, q) <= cfg.inlier_distance)
            .count();
        if best.as_ref().is_none_or(|(c, _, _)| count > *c) {
            best = Some((count, pts[i], dir));
        }
    }
    let (_, p0, d0) = best?;
    let inliers: Vec<Vector2<f64>> = pts
        .iter()
        .copied()
        .filter(|q| line_distance(&p0, &d0, q) <= cfg.inlier_distance)
        .collect();
    if inliers.len() < 2 {
        return None;
    }
    let (centroid, dir) = tls_line(&inliers);
    let inlier_count = pts
        .iter()
        .filter(|q| line_distance(&centroid, &dir, q) <= cfg.inlier_distance)
        .count();
    if (inlier_count as f64) < cfg.min_inlier_ratio * pts.len() as f64 {
        return None;
    }
    Some(BaseLine::new(
        ImagePoint::new(centroid.x, centroid.y),
        dir,
        inlier_count,
    ))
}
