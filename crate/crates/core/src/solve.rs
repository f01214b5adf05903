//! Calibration from point correspondences.
//!
//! For a matched tip seen at image point `(x, y)` in two frames with tracking
//! poses `T = [Φ | δ]`, the calibration `C = [u v w | t]` must map both
//! observations to one world point:
//!
//! ```text
//! Φᴬ(xᴬu + yᴬv + t) + δᴬ = Φᴮ(xᴮu + yᴮv + t) + δᴮ
//! ```
//!
//! which is linear in `(u, v, t)`. The constrained problem
//! (`‖u‖ = ‖v‖ = 1`, `u ⊥ v`) is approximated by an unconstrained solve,
//! projection onto the nearest orthonormal pair and a translation re-solve.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{ImagePoint, RigidTransform};
use crate::keyval::KeyValues;
use crate::rng::{substream, Stream};

const RANK_TOLERANCE: f64 = 1e-8;

/// One tip observed in two tracked frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub pose_a: RigidTransform,
    pub point_a: ImagePoint,
    pub pose_b: RigidTransform,
    pub point_b: ImagePoint,
}

impl Correspondence {
    pub fn new(pose_a: RigidTransform, point_a: ImagePoint, pose_b: RigidTransform, point_b: ImagePoint) -> Self {
        Self { pose_a, point_a, pose_b, point_b }
    }

    /// `‖T_A·C·p_A − T_B·C·p_B‖`, mm.
    pub fn residual(&self, c: &RigidTransform) -> f64 {
        let qa = self.pose_a.transform_point(&c.transform_point(&self.point_a.to_plane()));
        let qb = self.pose_b.transform_point(&c.transform_point(&self.point_b.to_plane()));
        (qa - qb).norm()
    }

    pub fn swapped(&self) -> Self {
        Self::new(self.pose_b, self.point_b, self.pose_a, self.point_a)
    }

    pub fn with_world_motion(&self, g: &RigidTransform) -> Self {
        Self::new(g.compose(&self.pose_a), self.point_a, g.compose(&self.pose_b), self.point_b)
    }
}

/// Stacked linear system `A·[u; v; t] ≈ d`, three rows per correspondence.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub d: DVector<f64>,
}

impl LinearSystem {
    pub fn n(&self) -> usize {
        self.a.nrows() / 3
    }

    /// `‖A·x − d‖²` for `x = [u; v; t]`.
    pub fn objective(&self, u: &Vector3<f64>, v: &Vector3<f64>, t: &Vector3<f64>) -> f64 {
        let x = stack(u, v, t);
        (&self.a * x - &self.d).norm_squared()
    }
}

fn stack(u: &Vector3<f64>, v: &Vector3<f64>, t: &Vector3<f64>) -> DVector<f64> {
    DVector::from_iterator(9, u.iter().chain(v.iter()).chain(t.iter()).copied())
}

pub fn build_system(matches: &[Correspondence]) -> Result<LinearSystem> {
    if matches.is_empty() {
        return Err(Error::InsufficientMatches { needed: 1, got: 0 });
    }
    let n = matches.len();
    let mut a = DMatrix::zeros(3 * n, 9);
    let mut d = DVector::zeros(3 * n);
    for (i, m) in matches.iter().enumerate() {
        let (pa, pb) = (&m.pose_a.rotation, &m.pose_b.rotation);
        let blocks: [Matrix3<f64>; 3] = [
            pa * m.point_a.x - pb * m.point_b.x,
            pa * m.point_a.y - pb * m.point_b.y,
            pa - pb,
        ];
        for (k, blk) in blocks.iter().enumerate() {
            a.fixed_view_mut::<3, 3>(3 * i, 3 * k).copy_from(blk);
        }
        d.fixed_rows_mut::<3>(3 * i)
            .copy_from(&(m.pose_b.translation - m.pose_a.translation));
    }
    Ok(LinearSystem { a, d })
}

/// Nearest orthonormal pair to `[u_raw v_raw]` in the Frobenius norm.
pub fn project_orthonormal(u_raw: &Vector3<f64>, v_raw: &Vector3<f64>) -> Result<(Vector3<f64>, Vector3<f64>)> {
    let m = Matrix3x2::from_columns(&[*u_raw, *v_raw]);
    let svd = m.svd(true, true);
    let (s1, s2) = (svd.singular_values[0].max(svd.singular_values[1]), svd.singular_values[0].min(svd.singular_values[1]));
    if !(s2 >= RANK_TOLERANCE * s1) || s1 == 0.0 {
        return Err(Error::DegenerateConfiguration(format!(
            "in-plane axes are rank deficient (singular values {s1:.3e}, {s2:.3e})"
        )));
    }
    let q = svd.u.expect("requested") * svd.v_t.expect("requested");
    Ok((q.column(0).into_owned(), q.column(1).into_owned()))
}

/// Least squares with columns scaled to unit norm.
fn scaled_lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let scales: Vec<f64> = (0..a.ncols())
        .map(|j| {
            let n = a.column(j).norm();
            if n > 0.0 { 1.0 / n } else { 1.0 }
        })
        .collect();
    let mut scaled = a.clone();
    for (j, s) in scales.iter().enumerate() {
        scaled.column_mut(j).scale_mut(*s);
    }
    let svd = scaled.svd(true, true);
    let sv = &svd.singular_values;
    let max = sv.max();
    let min = sv.min();
    if !(min >= RANK_TOLERANCE * max) || max == 0.0 {
        return Err(Error::DegenerateConfiguration(format!(
            "linear system is rank deficient (condition {:.3e})",
            max / min
        )));
    }
    let y = svd
        .solve(b, 0.0)
        .map_err(|e| Error::DegenerateConfiguration(e.to_string()))?;
    Ok(DVector::from_iterator(y.len(), y.iter().zip(&scales).map(|(v, s)| v * s)))
}

/// Unconstrained solve, orthonormal projection of the in-plane axes and
/// translation re-solve.
pub fn solve_constrained(sys: &LinearSystem) -> Result<RigidTransform> {
    if sys.n() < 3 {
        return Err(Error::InsufficientMatches { needed: 3, got: sys.n() });
    }
    let x = scaled_lstsq(&sys.a, &sys.d)?;
    let u_raw = Vector3::new(x[0], x[1], x[2]);
    let v_raw = Vector3::new(x[3], x[4], x[5]);
    let (u, v) = project_orthonormal(&u_raw, &v_raw)?;

    let uv = DVector::from_iterator(6, u.iter().chain(v.iter()).copied());
    let rhs = &sys.d - sys.a.columns(0, 6) * uv;
    let t = scaled_lstsq(&sys.a.columns(6, 3).into_owned(), &rhs)?;
    let t = Vector3::new(t[0], t[1], t[2]);
    let r = Matrix3::from_columns(&[u, v, u.cross(&v)]);
    Ok(RigidTransform::from_parts(r, t))
}

/// [`build_system`] followed by [`solve_constrained`].
pub fn solve_matches(matches: &[Correspondence]) -> Result<RigidTransform> {
    if matches.len() < 3 {
        return Err(Error::InsufficientMatches { needed: 3, got: matches.len() });
    }
    solve_constrained(&build_system(matches)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub sample_size: usize,
    /// Bound on the summed squared residual of a sample, mm².
    pub residual_gate: f64,
    /// Euclidean inlier distance, mm.
    pub inlier_threshold: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            sample_size: 4,
            residual_gate: 100.0,
            inlier_threshold: 10.0,
            iterations: 2000,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_size < 3 {
            return Err(Error::InvalidArgument("RANSAC sample size must be at least 3".into()));
        }
        if !(self.residual_gate > 0.0 && self.inlier_threshold > 0.0) {
            return Err(Error::InvalidArgument("RANSAC thresholds must be positive".into()));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("RANSAC needs at least one iteration".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub calibration: RigidTransform,
    /// Indices into the input matches.
    pub inliers: Vec<usize>,
    /// Residual of every input match under `calibration`, mm.
    pub per_match_residual: Vec<f64>,
    /// Summed squared residual of the final refit, mm².
    pub refit_residual: f64,
    /// Hypotheses that passed the residual gate.
    pub hypothesis_count: usize,
}

impl CalibrationResult {
    pub fn to_keyvalues(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.push("n_matches", self.per_match_residual.len());
        kv.push("n_inliers", self.inliers.len());
        kv.push("refit_residual", format!("{:.6}", self.refit_residual));
        kv.push("hypothesis_count", self.hypothesis_count);
        kv
    }
}

struct Hypothesis {
    iteration: usize,
    score: usize,
    inlier_residual: f64,
    calibration: RigidTransform,
}

fn inliers_of(matches: &[Correspondence], c: &RigidTransform, threshold: f64) -> (Vec<usize>, Vec<f64>) {
    let res: Vec<f64> = matches.iter().map(|m| m.residual(c)).collect();
    let inl = res
        .iter()
        .enumerate()
        .filter(|(_, &r)| r <= threshold)
        .map(|(i, _)| i)
        .collect();
    (inl, res)
}

fn hypothesis(matches: &[Correspondence], cfg: &RansacConfig, iteration: usize) -> Option<Hypothesis> {
    let mut rng = substream(cfg.seed, Stream::Ransac, iteration as u64);
    let idx = rand::seq::index::sample(&mut rng, matches.len(), cfg.sample_size);
    let sample: Vec<Correspondence> = idx.iter().map(|i| matches[i]).collect();
    let c = solve_matches(&sample).ok()?;
    let gate: f64 = sample.iter().map(|m| m.residual(&c).powi(2)).sum();
    if !(gate <= cfg.residual_gate) {
        return None;
    }
    let (inl, res) = inliers_of(matches, &c, cfg.inlier_threshold);
    Some(Hypothesis {
        iteration,
        score: inl.len(),
        inlier_residual: inl.iter().map(|&i| res[i]).sum(),
        calibration: c,
    })
}

fn better(a: &Hypothesis, b: &Hypothesis) -> bool {
    a.score > b.score
        || (a.score == b.score
            && (a.inlier_residual < b.inlier_residual
                || (a.inlier_residual == b.inlier_residual && a.iteration < b.iteration)))
}

/// Robust calibration from matches that may contain wrong pairings.
pub fn ransac_calibrate(matches: &[Correspondence], cfg: &RansacConfig) -> Result<CalibrationResult> {
    cfg.validate()?;
    if matches.len() < cfg.sample_size {
        return Err(Error::InsufficientMatches { needed: cfg.sample_size, got: matches.len() });
    }
    let hyps: Vec<Hypothesis> = (0..cfg.iterations)
        .into_par_iter()
        .filter_map(|it| hypothesis(matches, cfg, it))
        .collect();
    let hypothesis_count = hyps.len();
    let mut best: Option<&Hypothesis> = None;
    for h in &hyps {
        if best.is_none_or(|b| better(h, b)) {
            best = Some(h);
        }
    }
    let best = best.ok_or(Error::NoConsensus)?;
    log::debug!(
        "ransac: best hypothesis at iteration {} with {} inliers ({} passed the gate)",
        best.iteration,
        best.score,
        hypothesis_count
    );

    let (inl, _) = inliers_of(matches, &best.calibration, cfg.inlier_threshold);
    let subset: Vec<Correspondence> = inl.iter().map(|&i| matches[i]).collect();
    let calibration = match solve_matches(&subset) {
        Ok(c) => c,
        Err(e) => {
            log::warn!("refit on {} inliers failed ({e}); keeping the sample hypothesis", subset.len());
            best.calibration
        }
    };
    let refit_residual = subset.iter().map(|m| m.residual(&calibration).powi(2)).sum();
    let (inliers, per_match_residual) = inliers_of(matches, &calibration, cfg.inlier_threshold);
    Ok(CalibrationResult {
        calibration,
        inliers,
        per_match_residual,
        refit_residual,
        hypothesis_count,
    })
}
