//! Rigid transforms, image points and the image-to-world mapping.
//!
//! Transforms act on column vectors: `a.compose(&b)` applies `b` first, then
//! `a`. A point on frame `i` maps to the world as `T_i · C · (x, y, 0, 1)ᵀ`.

use std::fmt;

use nalgebra::{Matrix3, Matrix4, Rotation3, Unit, Vector3, SVD};

use crate::error::{Error, Result};

/// Tolerance for accepting a parsed 3×3 block as a rotation before it is
/// re-orthonormalized. Text transforms carry 9 significant digits.
const PARSE_ORTHO_TOL: f64 = 1e-6;

/// A 2D point on an image plane, in mm. `x` runs along the image width and
/// `y` along the depth axis, away from the transducer.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ImagePoint {
    pub x: f64,
    pub y: f64,
}

impl ImagePoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// The point embedded in the image plane, `(x, y, 0)`.
    pub fn to_plane(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, 0.0)
    }

    pub fn distance(self, other: ImagePoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// A proper rigid motion: rotation followed by translation (mm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a transform from blocks that are already known to be rigid.
    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self::from_parts(Matrix3::identity(), Vector3::new(x, y, z))
    }

    /// Rotation by `angle` radians about `axis` through the origin.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let axis = Unit::new_normalize(axis);
        Self::from_parts(
            *Rotation3::from_axis_angle(&axis, angle).matrix(),
            Vector3::zeros(),
        )
    }

    /// Rotation given as a rotation vector (axis times angle, radians).
    pub fn from_rotation_vector(rv: Vector3<f64>) -> Self {
        Self::from_parts(*Rotation3::new(rv).matrix(), Vector3::zeros())
    }

    pub fn rotation_x(angle: f64) -> Self {
        Self::from_axis_angle(Vector3::x(), angle)
    }

    pub fn rotation_y(angle: f64) -> Self {
        Self::from_axis_angle(Vector3::y(), angle)
    }

    pub fn rotation_z(angle: f64) -> Self {
        Self::from_axis_angle(Vector3::z(), angle)
    }

    pub fn with_translation(mut self, translation: Vector3<f64>) -> Self {
        self.translation = translation;
        self
    }

    /// `self ∘ other`: the result applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Geodesic blend: `self` at `w = 0`, `other` at `w = 1`. Rotation moves
    /// along the shortest arc, translation linearly.
    pub fn interpolate(&self, other: &RigidTransform, w: f64) -> RigidTransform {
        let rel = Rotation3::from_matrix_unchecked(self.rotation.transpose() * other.rotation);
        let step = Rotation3::new(rel.scaled_axis() * w);
        Self::from_parts(
            self.rotation * step.matrix(),
            self.translation + (other.translation - self.translation) * w,
        )
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Accepts a homogeneous matrix whose upper-left block is a rotation up to
    /// `PARSE_ORTHO_TOL`, and snaps that block onto SO(3).
    pub fn from_matrix4(m: &Matrix4<f64>) -> Result<Self> {
        let bottom = m.fixed_view::<1, 4>(3, 0);
        if (bottom[0].abs() + bottom[1].abs() + bottom[2].abs() + (bottom[3] - 1.0).abs())
            > PARSE_ORTHO_TOL
        {
            return Err(Error::format("last row of a rigid transform must be 0 0 0 1"));
        }
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into();
        let ortho_err = (r.transpose() * r - Matrix3::identity()).norm();
        if !ortho_err.is_finite() || ortho_err > PARSE_ORTHO_TOL || r.determinant() <= 0.0 {
            return Err(Error::format(format!(
                "rotation block is not a proper rotation (orthogonality error {ortho_err:.3e})"
            )));
        }
        Ok(Self::from_parts(
            nearest_rotation(&r),
            m.fixed_view::<3, 1>(0, 3).into(),
        ))
    }

    /// Frobenius deviation of the rotation block from orthonormality, and
    /// its determinant.
    pub fn rigidity_error(&self) -> (f64, f64) {
        let r = &self.rotation;
        (
            (r.transpose() * r - Matrix3::identity()).norm(),
            r.determinant(),
        )
    }

    pub fn is_rigid(&self, tol: f64) -> bool {
        let (ortho, det) = self.rigidity_error();
        ortho <= tol && (det - 1.0).abs() <= tol
    }

    /// Rotation angle in radians, robust near zero.
    pub fn rotation_angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }

    /// Serializes as 4 lines of 4 whitespace-separated values, row-major,
    /// each printed with 9 significant digits.
    pub fn to_text(&self) -> String {
        let m = self.to_matrix4();
        let mut out = String::new();
        for r in 0..4 {
            let row: Vec<String> = (0..4).map(|c| format_sig(m[(r, c)], 9)).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let rows: Vec<&str> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect();
        if rows.len() != 4 {
            return Err(Error::format(format!(
                "expected 4 rows in transform, found {}",
                rows.len()
            )));
        }
        Self::from_rows(&rows)
    }

    /// Parses exactly four row strings.
    pub(crate) fn from_rows(rows: &[&str]) -> Result<Self> {
        let mut m = Matrix4::zeros();
        for (r, line) in rows.iter().enumerate() {
            let vals = parse_floats(line)?;
            if vals.len() != 4 {
                return Err(Error::format(format!(
                    "transform row {r} has {} values, expected 4",
                    vals.len()
                )));
            }
            for (c, v) in vals.into_iter().enumerate() {
                m[(r, c)] = v;
            }
        }
        Self::from_matrix4(&m)
    }
}

impl fmt::Display for RigidTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    a.compose(b)
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    t.inverse()
}

/// World position of image point `p` on a frame with tracking `tracking`
/// under calibration `calibration`.
pub fn map_to_world(
    tracking: &RigidTransform,
    calibration: &RigidTransform,
    p: ImagePoint,
) -> Vector3<f64> {
    tracking.transform_point(&calibration.transform_point(&p.to_plane()))
}

/// Translation distance (mm) and relative rotation angle (degrees).
pub fn pose_delta(a: &RigidTransform, b: &RigidTransform) -> (f64, f64) {
    let dt = (a.translation - b.translation).norm();
    let rel = a.rotation.transpose() * b.rotation;
    (dt, rotation_angle(&rel).to_degrees())
}

/// Angle of a rotation matrix via `atan2(sin, cos)`, which keeps precision for
/// small angles where `acos` of the trace does not.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let axis = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    let sin = 0.5 * axis.norm();
    sin.atan2(cos)
}

/// Nearest rotation matrix in the Frobenius sense.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = SVD::new(*m, true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        r = u2 * vt;
    }
    r
}

/// Formats `v` with `digits` significant digits in plain decimal notation.
/// Negative zero prints as `0`.
pub fn format_sig(v: f64, digits: usize) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v.is_finite() {
            "0".into()
        } else {
            format!("{v}")
        };
    }
    let exp = v.abs().log10().floor() as i64;
    let decimals = (digits as i64 - 1 - exp).clamp(0, 15) as usize;
    let s = format!("{v:.decimals$}");
    if s.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
        "0".into()
    } else {
        s
    }
}

pub(crate) fn parse_floats(line: &str) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|_| Error::format(format!("not a number: {tok:?}")))
        })
        .collect()
}
