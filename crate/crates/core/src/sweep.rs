//! Tracked 2D frames, imaging geometry and the on-disk sweep directory.
//!
//! A sweep directory holds `meta.txt`, `tracking.txt` (one 4×4 block per
//! frame), `frame_%05d.pgm` and optionally `labels_%05d.pgm`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{ImagePoint, RigidTransform};
use crate::keyval::KeyValues;
use crate::phantom::Label;
use crate::raster::Raster;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProbeKind {
    Linear,
    /// Fan-shaped field of view. The virtual apex sits `apex_offset` mm above
    /// the top edge, centered horizontally.
    Convex { apex_offset: f64, aperture_deg: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImagingGeometry {
    pub kind: ProbeKind,
    pub cols: usize,
    pub rows: usize,
    /// mm per pixel, isotropic.
    pub spacing: f64,
}

impl Default for ImagingGeometry {
    fn default() -> Self {
        Self::linear(128, 128, 1.0)
    }
}

impl ImagingGeometry {
    pub fn linear(cols: usize, rows: usize, spacing: f64) -> Self {
        Self {
            kind: ProbeKind::Linear,
            cols,
            rows,
            spacing,
        }
    }

    pub fn convex(cols: usize, rows: usize, spacing: f64, apex_offset: f64, aperture_deg: f64) -> Self {
        Self {
            kind: ProbeKind::Convex {
                apex_offset,
                aperture_deg,
            },
            cols,
            rows,
            spacing,
        }
    }

    pub fn is_linear(&self) -> bool {
        self.kind == ProbeKind::Linear
    }

    pub fn width(&self) -> f64 {
        self.cols as f64 * self.spacing
    }

    pub fn depth(&self) -> f64 {
        self.rows as f64 * self.spacing
    }

    pub fn validate(&self) -> Result<()> {
        if self.cols == 0 || self.rows == 0 || !(self.spacing > 0.0) {
            return Err(Error::InvalidArgument(
                "imaging geometry needs positive size and spacing".into(),
            ));
        }
        if let ProbeKind::Convex {
            apex_offset,
            aperture_deg,
        } = self.kind
        {
            if apex_offset < 0.0 || !(aperture_deg > 0.0 && aperture_deg < 180.0) {
                return Err(Error::InvalidArgument(
                    "convex geometry needs apex_offset >= 0 and 0 < aperture < 180".into(),
                ));
            }
        }
        Ok(())
    }

    /// Image-plane position (mm) of the center of pixel `(col, row)`.
    #[inline]
    pub fn pixel_center(&self, col: usize, row: usize) -> ImagePoint {
        ImagePoint::new(
            (col as f64 + 0.5) * self.spacing,
            (row as f64 + 0.5) * self.spacing,
        )
    }

    /// Continuous pixel coordinates of an image-plane point; integer values
    /// land on pixel centers.
    #[inline]
    pub fn to_pixel(&self, p: ImagePoint) -> (f64, f64) {
        (p.x / self.spacing - 0.5, p.y / self.spacing - 0.5)
    }

    pub fn contains(&self, p: ImagePoint) -> bool {
        if p.x < 0.0 || p.y < 0.0 || p.x > self.width() || p.y > self.depth() {
            return false;
        }
        match self.kind {
            ProbeKind::Linear => true,
            ProbeKind::Convex {
                apex_offset,
                aperture_deg,
            } => {
                let dx = p.x - 0.5 * self.width();
                let dy = p.y + apex_offset;
                let r = dx.hypot(dy);
                let angle = dx.atan2(dy).to_degrees();
                angle.abs() <= 0.5 * aperture_deg
                    && r >= apex_offset
                    && r <= apex_offset + self.depth()
            }
        }
    }

    pub fn pixel_valid(&self, col: usize, row: usize) -> bool {
        self.contains(self.pixel_center(col, row))
    }

    pub fn validity_mask(&self) -> Raster<bool> {
        Raster::from_fn(self.cols, self.rows, |c, r| self.pixel_valid(c, r))
    }

    pub fn to_keyvalues(&self, kv: &mut KeyValues) {
        kv.push("width", self.cols);
        kv.push("height", self.rows);
        kv.push("spacing", self.spacing);
        match self.kind {
            ProbeKind::Linear => kv.push("geometry", "linear"),
            ProbeKind::Convex {
                apex_offset,
                aperture_deg,
            } => {
                kv.push("geometry", "convex");
                kv.push("apex_offset", apex_offset);
                kv.push("aperture", aperture_deg);
            }
        }
    }

    pub fn from_keyvalues(kv: &KeyValues) -> Result<Self> {
        let cols = kv.require_value("width")?;
        let rows = kv.require_value("height")?;
        let spacing = kv.require_value("spacing")?;
        let geom = match kv.require("geometry")? {
            "linear" => Self::linear(cols, rows, spacing),
            "convex" => Self::convex(
                cols,
                rows,
                spacing,
                kv.require_value("apex_offset")?,
                kv.require_value("aperture")?,
            ),
            other => return Err(Error::format(format!("unknown geometry kind {other:?}"))),
        };
        geom.validate().map_err(|e| Error::format(e.to_string()))?;
        Ok(geom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub intensity: Raster<u8>,
    /// Simulator labels; absent for recorded data.
    pub true_labels: Option<Raster<u8>>,
    pub tracking: RigidTransform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub geometry: ImagingGeometry,
    pub frames: Vec<Frame>,
}

pub fn frame_file(index: usize) -> String {
    format!("frame_{index:05}.pgm")
}

pub fn labels_file(index: usize) -> String {
    format!("labels_{index:05}.pgm")
}

pub fn mask_file(index: usize) -> String {
    format!("mask_{index:05}.pgm")
}

impl Sweep {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn poses(&self) -> Vec<RigidTransform> {
        self.frames.iter().map(|f| f.tracking).collect()
    }

    /// Tracking pose at a fractional frame, interpolated between the two
    /// neighbouring frames and clamped to the sweep.
    pub fn pose_at(&self, position: f64) -> RigidTransform {
        let last = self.frames.len().saturating_sub(1);
        let p = position.clamp(0.0, last as f64);
        let i = (p.floor() as usize).min(last);
        let w = p - i as f64;
        if i == last || w == 0.0 {
            return self.frames[i].tracking;
        }
        self.frames[i].tracking.interpolate(&self.frames[i + 1].tracking, w)
    }

    pub fn has_true_labels(&self) -> bool {
        !self.frames.is_empty() && self.frames.iter().all(|f| f.true_labels.is_some())
    }

    /// Returns a copy with every tracking matrix replaced by `g · T`.
    pub fn with_world_motion(&self, g: &RigidTransform) -> Sweep {
        let mut out = self.clone();
        for f in &mut out.frames {
            f.tracking = g.compose(&f.tracking);
        }
        out
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut meta = KeyValues::new();
        meta.push("n_frames", self.frames.len());
        self.geometry.to_keyvalues(&mut meta);
        meta.push("labels", if self.has_true_labels() { "yes" } else { "no" });
        write_text(&dir.join("meta.txt"), &meta.to_text())?;

        let mut tracking = String::new();
        for f in &self.frames {
            tracking.push_str(&f.tracking.to_text());
            tracking.push('\n');
        }
        write_text(&dir.join("tracking.txt"), &tracking)?;

        for f in &self.frames {
            f.intensity.write_pgm(&dir.join(frame_file(f.index)))?;
            if let Some(labels) = &f.true_labels {
                labels.write_pgm(&dir.join(labels_file(f.index)))?;
            }
        }
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Sweep> {
        let meta = KeyValues::parse(&read_text(&dir.join("meta.txt"))?)?;
        let n_frames: usize = meta.require_value("n_frames")?;
        let geometry = ImagingGeometry::from_keyvalues(&meta)?;
        let poses = parse_tracking(&read_text(&dir.join("tracking.txt"))?, n_frames)?;

        let mut frames = Vec::with_capacity(n_frames);
        for (index, tracking) in poses.into_iter().enumerate() {
            let intensity = Raster::read_pgm(&dir.join(frame_file(index)))?;
            check_dims(&intensity, &geometry, &dir.join(frame_file(index)))?;
            let labels_path = dir.join(labels_file(index));
            let true_labels = if labels_path.exists() {
                let labels = Raster::read_pgm(&labels_path)?;
                check_dims(&labels, &geometry, &labels_path)?;
                check_label_values(&labels, &labels_path)?;
                Some(labels)
            } else {
                None
            };
            frames.push(Frame {
                index,
                intensity,
                true_labels,
                tracking,
            });
        }
        Ok(Sweep { geometry, frames })
    }
}

/// Parses `n_frames` consecutive 4×4 blocks; blank lines are separators.
pub fn parse_tracking(text: &str, n_frames: usize) -> Result<Vec<RigidTransform>> {
    let rows: Vec<&str> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect();
    if rows.len() != 4 * n_frames {
        return Err(Error::format(format!(
            "tracking.txt holds {} rows, expected {} for {} frames",
            rows.len(),
            4 * n_frames,
            n_frames
        )));
    }
    rows.chunks(4)
        .enumerate()
        .map(|(i, block)| {
            RigidTransform::from_rows(block)
                .map_err(|e| Error::format(format!("tracking matrix {i}: {e}")))
        })
        .collect()
}

pub(crate) fn check_dims(r: &Raster<u8>, geometry: &ImagingGeometry, path: &Path) -> Result<()> {
    if r.width() != geometry.cols || r.height() != geometry.rows {
        return Err(Error::format(format!(
            "{}: image is {}x{}, expected {}x{}",
            path.display(),
            r.width(),
            r.height(),
            geometry.cols,
            geometry.rows
        )));
    }
    Ok(())
}

pub(crate) fn check_label_values(r: &Raster<u8>, path: &Path) -> Result<()> {
    if let Some(v) = r.data().iter().find(|&&v| Label::from_code(v).is_none()) {
        return Err(Error::format(format!(
            "{}: label value {v} outside {{0,1,2}}",
            path.display()
        )));
    }
    Ok(())
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_sweep() -> Sweep {
        let geometry = ImagingGeometry::linear(6, 4, 0.5);
        let frames = (0..3)
            .map(|i| Frame {
                index: i,
                intensity: Raster::from_fn(6, 4, |c, r| (c + r + i) as u8),
                true_labels: Some(Raster::filled(6, 4, 1)),
                tracking: RigidTransform::from_translation(i as f64, 0.0, 1.5),
            })
            .collect();
        Sweep { geometry, frames }
    }

    #[test]
    fn pose_at_interpolates_and_clamps() {
        let sweep = tiny_sweep();
        assert_eq!(sweep.pose_at(1.0), sweep.frames[1].tracking);
        assert!((sweep.pose_at(1.25).translation.x - 1.25).abs() < 1e-12);
        assert_eq!(sweep.pose_at(-3.0), sweep.frames[0].tracking);
        assert_eq!(sweep.pose_at(9.0), sweep.frames[2].tracking);
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let sweep = tiny_sweep();
        sweep.write_dir(dir.path()).unwrap();
        assert_eq!(Sweep::read_dir(dir.path()).unwrap(), sweep);
    }

    #[test]
    fn wrong_tracking_count_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        tiny_sweep().write_dir(dir.path()).unwrap();
        let path = dir.path().join("tracking.txt");
        let text = std::fs::read_to_string(&path).unwrap();
        let truncated: Vec<&str> = text.lines().take(8).collect();
        std::fs::write(&path, truncated.join("\n")).unwrap();
        assert!(matches!(Sweep::read_dir(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn convex_mask_is_fan_shaped() {
        let g = ImagingGeometry::convex(128, 128, 1.0, 30.0, 60.0);
        let m = g.validity_mask();
        assert!(!m.get(0, 0));
        assert!(!m.get(127, 0));
        assert!(m.get(64, 5));
        assert!(m.get(64, 127));
        assert!(!m.get(0, 127));
        let lin = ImagingGeometry::default().validity_mask();
        assert!(lin.data().iter().all(|&v| v));
    }

    #[test]
    fn pixel_centers_round_trip() {
        let g = ImagingGeometry::linear(10, 10, 0.5);
        let p = g.pixel_center(3, 7);
        assert_eq!(g.to_pixel(p), (3.0, 7.0));
    }
}
