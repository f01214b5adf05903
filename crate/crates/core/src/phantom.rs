//! The nine-cone calibration phantom: parametric model, point labelling,
//! labelmap rasterization and ground-truth inter-tip distances.

use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::parse_floats;
use crate::keyval::KeyValues;

pub const CONE_COUNT: usize = 9;

/// Cone heights of the default phantom, row-major over the 3×3 grid.
/// Found by exhaustive search over all placements: every 4-neighbour pair
/// differs by at least 15mm.
pub const DEFAULT_HEIGHTS: [f64; CONE_COUNT] = [20.0, 35.0, 50.0, 40.0, 55.0, 25.0, 60.0, 30.0, 45.0];
pub const DEFAULT_GRID_PITCH: f64 = 40.0;
pub const DEFAULT_BASE_RADIUS: f64 = 18.0;
pub const DEFAULT_BASE_THICKNESS: f64 = 10.0;
pub const DEFAULT_PLATE_HALF_SIZE: f64 = 65.0;

/// Minimum height separation between grid-adjacent cones.
pub const MIN_ADJACENT_HEIGHT_GAP: f64 = 5.0;

/// Per-pixel / per-voxel class. Numeric codes are part of the file formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Label {
    Background = 0,
    Base = 1,
    Cone = 2,
}

impl Label {
    pub fn from_code(code: u8) -> Option<Label> {
        match code {
            0 => Some(Label::Background),
            1 => Some(Label::Base),
            2 => Some(Label::Cone),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cone {
    pub base_center: Vector3<f64>,
    pub base_radius: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub base_point: Vector3<f64>,
    /// Unit normal of the plate's top surface, pointing toward the cones.
    pub base_normal: Vector3<f64>,
    pub base_thickness: f64,
    /// Half extents of the plate along the in-plane axes from [`PhantomSpec::plane_axes`].
    pub plate_half_size: [f64; 2],
    pub cones: Vec<Cone>,
}

pub fn default_phantom() -> PhantomSpec {
    let mut cones = Vec::with_capacity(CONE_COUNT);
    for row in 0..3 {
        for col in 0..3 {
            let x = (col as f64 - 1.0) * DEFAULT_GRID_PITCH;
            let y = (row as f64 - 1.0) * DEFAULT_GRID_PITCH;
            cones.push(Cone {
                base_center: Vector3::new(x, y, 0.0),
                base_radius: DEFAULT_BASE_RADIUS,
                height: DEFAULT_HEIGHTS[row * 3 + col],
            });
        }
    }
    PhantomSpec {
        base_point: Vector3::zeros(),
        base_normal: Vector3::z(),
        base_thickness: DEFAULT_BASE_THICKNESS,
        plate_half_size: [DEFAULT_PLATE_HALF_SIZE; 2],
        cones,
    }
}

impl Cone {
    pub fn tip(&self, normal: &Vector3<f64>) -> Vector3<f64> {
        self.base_center + normal * self.height
    }

    pub fn volume(&self) -> f64 {
        std::f64::consts::PI * self.base_radius * self.base_radius * self.height / 3.0
    }

    fn contains(&self, normal: &Vector3<f64>, q: &Vector3<f64>) -> bool {
        let rel = q - self.base_center;
        let h = rel.dot(normal);
        if !(0.0..=self.height).contains(&h) {
            return false;
        }
        let radial = (rel - normal * h).norm();
        radial <= self.base_radius * (1.0 - h / self.height)
    }
}

impl PhantomSpec {
    pub fn tips(&self) -> Vec<Vector3<f64>> {
        self.cones.iter().map(|c| c.tip(&self.base_normal)).collect()
    }

    pub fn heights(&self) -> Vec<f64> {
        self.cones.iter().map(|c| c.height).collect()
    }

    /// Orthonormal in-plane axes `(e1, e2)` with `e1 × e2 = normal`.
    pub fn plane_axes(&self) -> (Vector3<f64>, Vector3<f64>) {
        let n = self.base_normal;
        let seed = if n.z.abs() < 0.9 { Vector3::z() } else { Vector3::x() };
        let e1 = (seed - n * seed.dot(&n)).normalize();
        let e2 = n.cross(&e1);
        (e1, e2)
    }

    /// Pairs of grid-adjacent cones: center distance within 5% of the
    /// smallest center distance, which is the 4-neighbourhood on a square grid.
    pub fn adjacent_pairs(&self) -> Vec<(usize, usize)> {
        let n = self.cones.len();
        let mut min_d = f64::INFINITY;
        for i in 0..n {
            for j in i + 1..n {
                min_d = min_d.min((self.cones[i].base_center - self.cones[j].base_center).norm());
            }
        }
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let d = (self.cones[i].base_center - self.cones[j].base_center).norm();
                if d <= min_d * 1.05 {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.cones.len() != CONE_COUNT {
            return bad(format!("phantom needs {CONE_COUNT} cones, got {}", self.cones.len()));
        }
        if (self.base_normal.norm() - 1.0).abs() > 1e-9 {
            return bad("base normal must be a unit vector".into());
        }
        if self.base_thickness <= 0.0 || self.plate_half_size.iter().any(|&h| h <= 0.0) {
            return bad("plate dimensions must be positive".into());
        }
        for (i, c) in self.cones.iter().enumerate() {
            if c.height <= 0.0 || c.base_radius <= 0.0 {
                return bad(format!("cone {i} must have positive height and radius"));
            }
            if (c.base_center - self.base_point).dot(&self.base_normal).abs() > 1e-6 {
                return bad(format!("cone {i} does not sit on the base plane"));
            }
        }
        for i in 0..CONE_COUNT {
            for j in i + 1..CONE_COUNT {
                let (a, b) = (&self.cones[i], &self.cones[j]);
                if a.height == b.height {
                    return bad(format!("cones {i} and {j} share height {}", a.height));
                }
                let d = (a.base_center - b.base_center).norm();
                if d < a.base_radius + b.base_radius {
                    return bad(format!("cones {i} and {j} intersect"));
                }
            }
        }
        for (i, j) in self.adjacent_pairs() {
            let gap = (self.cones[i].height - self.cones[j].height).abs();
            if gap < MIN_ADJACENT_HEIGHT_GAP {
                return bad(format!(
                    "adjacent cones {i} and {j} differ by only {gap}mm in height"
                ));
            }
        }
        Ok(())
    }

    /// Returns a copy with every length multiplied by `s`.
    pub fn scaled(&self, s: f64) -> PhantomSpec {
        PhantomSpec {
            base_point: self.base_point * s,
            base_normal: self.base_normal,
            base_thickness: self.base_thickness * s,
            plate_half_size: [self.plate_half_size[0] * s, self.plate_half_size[1] * s],
            cones: self
                .cones
                .iter()
                .map(|c| Cone {
                    base_center: c.base_center * s,
                    base_radius: c.base_radius * s,
                    height: c.height * s,
                })
                .collect(),
        }
    }

    /// Axis-aligned world bounding box of plate and cones.
    pub fn bounding_box(&self) -> (Vector3<f64>, Vector3<f64>) {
        let (e1, e2) = self.plane_axes();
        let n = self.base_normal;
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        let mut grow = |p: Vector3<f64>| {
            lo = lo.inf(&p);
            hi = hi.sup(&p);
        };
        for s1 in [-1.0, 1.0] {
            for s2 in [-1.0, 1.0] {
                let corner = self.base_point
                    + e1 * (s1 * self.plate_half_size[0])
                    + e2 * (s2 * self.plate_half_size[1]);
                grow(corner);
                grow(corner - n * self.base_thickness);
            }
        }
        for c in &self.cones {
            grow(c.tip(&n));
        }
        (lo, hi)
    }

    pub fn to_text(&self) -> String {
        let mut kv = KeyValues::new();
        let v3 = |v: &Vector3<f64>| format!("{} {} {}", v.x, v.y, v.z);
        kv.push("base_point", v3(&self.base_point));
        kv.push("base_normal", v3(&self.base_normal));
        kv.push("base_thickness", self.base_thickness);
        kv.push(
            "plate_half_size",
            format!("{} {}", self.plate_half_size[0], self.plate_half_size[1]),
        );
        for c in &self.cones {
            kv.push(
                "cone",
                format!("{} {} {}", v3(&c.base_center), c.base_radius, c.height),
            );
        }
        kv.to_text()
    }

    pub fn from_text(text: &str) -> Result<PhantomSpec> {
        let kv = KeyValues::parse(text)?;
        let vec3 = |key: &str| -> Result<Vector3<f64>> {
            let v = parse_floats(kv.require(key)?)?;
            if v.len() != 3 {
                return Err(Error::format(format!("`{key}` needs 3 values")));
            }
            Ok(Vector3::new(v[0], v[1], v[2]))
        };
        let half = parse_floats(kv.require("plate_half_size")?)?;
        if half.len() != 2 {
            return Err(Error::format("`plate_half_size` needs 2 values"));
        }
        let normal = vec3("base_normal")?;
        if normal.norm() == 0.0 {
            return Err(Error::format("`base_normal` must be non-zero"));
        }
        let mut cones = Vec::new();
        for line in kv.get_all("cone") {
            let v = parse_floats(line)?;
            if v.len() != 5 {
                return Err(Error::format(format!(
                    "`cone` needs `cx cy cz radius height`, got {line:?}"
                )));
            }
            cones.push(Cone {
                base_center: Vector3::new(v[0], v[1], v[2]),
                base_radius: v[3],
                height: v[4],
            });
        }
        let spec = PhantomSpec {
            base_point: vec3("base_point")?,
            base_normal: normal.normalize(),
            base_thickness: kv.require_value("base_thickness")?,
            plate_half_size: [half[0], half[1]],
            cones,
        };
        spec.validate().map_err(|e| Error::format(e.to_string()))?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<PhantomSpec> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

pub fn classify_point(spec: &PhantomSpec, q: &Vector3<f64>) -> Label {
    let n = &spec.base_normal;
    if spec.cones.iter().any(|c| c.contains(n, q)) {
        return Label::Cone;
    }
    let rel = q - spec.base_point;
    let h = rel.dot(n);
    if h <= 0.0 && h >= -spec.base_thickness {
        let (e1, e2) = spec.plane_axes();
        if rel.dot(&e1).abs() <= spec.plate_half_size[0] && rel.dot(&e2).abs() <= spec.plate_half_size[1]
        {
            return Label::Base;
        }
    }
    Label::Background
}

/// Euclidean distances between all unordered tip pairs, `(0,1), (0,2), …, (7,8)`.
pub fn intertip_distances(spec: &PhantomSpec) -> Vec<f64> {
    let tips = spec.tips();
    let mut out = Vec::with_capacity(tips.len() * (tips.len().saturating_sub(1)) / 2);
    for i in 0..tips.len() {
        for j in i + 1..tips.len() {
            out.push((tips[i] - tips[j]).norm());
        }
    }
    out
}

/// Axis-aligned 8-bit label volume. `origin` is the world position of the
/// center of voxel `(0, 0, 0)`; x varies fastest in `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub dims: [usize; 3],
    pub spacing: f64,
    pub origin: Vector3<f64>,
    pub data: Vec<u8>,
}

impl LabelVolume {
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.origin + Vector3::new(i as f64, j as f64, k as f64) * self.spacing
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> Label {
        Label::from_code(self.data[self.index(i, j, k)]).expect("valid label code")
    }

    pub fn count(&self, label: Label) -> usize {
        self.data.iter().filter(|&&v| v == label.code()).count()
    }

    pub fn header_text(&self) -> String {
        let mut kv = KeyValues::new();
        kv.push("dims", format!("{} {} {}", self.dims[0], self.dims[1], self.dims[2]));
        kv.push("spacing", self.spacing);
        kv.push(
            "origin",
            format!("{} {} {}", self.origin.x, self.origin.y, self.origin.z),
        );
        kv.push("type", "uint8");
        kv.push("order", "x-fastest");
        kv.push("labels", "0:background 1:base 2:cone");
        kv.to_text()
    }

    /// Writes `<stem>.raw` and `<stem>.txt` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let raw = dir.join(format!("{stem}.raw"));
        std::fs::write(&raw, &self.data).map_err(|e| Error::io(&raw, e))?;
        let hdr = dir.join(format!("{stem}.txt"));
        std::fs::write(&hdr, self.header_text()).map_err(|e| Error::io(&hdr, e))
    }
}

/// Labels every voxel center of a grid covering the phantom bounding box
/// plus a 5mm margin.
pub fn rasterize_labelmap(spec: &PhantomSpec, spacing: f64) -> Result<LabelVolume> {
    if !(spacing > 0.0) || !spacing.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "spacing must be positive, got {spacing}"
        )));
    }
    const MARGIN: f64 = 5.0;
    let (lo, hi) = spec.bounding_box();
    let lo = lo - Vector3::repeat(MARGIN);
    let hi = hi + Vector3::repeat(MARGIN);
    let ext = hi - lo;
    let dims = [
        (ext.x / spacing).ceil().max(1.0) as usize,
        (ext.y / spacing).ceil().max(1.0) as usize,
        (ext.z / spacing).ceil().max(1.0) as usize,
    ];
    let origin = lo + Vector3::repeat(0.5 * spacing);
    let slice = dims[0] * dims[1];
    let mut data = vec![0u8; slice * dims[2]];
    data.par_chunks_mut(slice).enumerate().for_each(|(k, plane)| {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let q = origin + Vector3::new(i as f64, j as f64, k as f64) * spacing;
                plane[j * dims[0] + i] = classify_point(spec, &q).code();
            }
        }
    });
    Ok(LabelVolume {
        dims,
        spacing,
        origin,
        data,
    })
}
