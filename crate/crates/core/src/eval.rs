//! Calibration quality metrics: fiducial pair distances against the phantom
//! and direct comparison with a known calibration.

use std::fmt::Write as _;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geom::{pose_delta, RigidTransform};
use crate::keyval::KeyValues;
use crate::phantom::PhantomSpec;
use crate::simulate::SweepGroundTruth;
use crate::track::Tip;

/// Largest height difference for assigning a tip to a cone, mm.
pub const IDENTIFY_TOLERANCE: f64 = 2.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairError {
    pub cone_i: usize,
    pub cone_j: usize,
    pub measured: f64,
    pub truth: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub pairs: Vec<PairError>,
    pub median: f64,
    pub mean: f64,
    pub max: f64,
    pub n_tips_found: usize,
    /// Translation mm and rotation degrees against a known calibration.
    pub pose_error: Option<(f64, f64)>,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl ErrorReport {
    fn from_pairs(pairs: Vec<PairError>, n_tips_found: usize) -> Self {
        let errs: Vec<f64> = pairs.iter().map(|p| p.error).collect();
        Self {
            median: median(&errs),
            mean: errs.iter().sum::<f64>() / errs.len() as f64,
            max: errs.iter().cloned().fold(0.0, f64::max),
            pairs,
            n_tips_found,
            pose_error: None,
        }
    }

    pub fn with_pose_error(mut self, c: &RigidTransform, c_gt: &RigidTransform) -> Self {
        self.pose_error = Some(compare_to_gt(c, c_gt));
        self
    }

    pub fn errors(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.error).collect()
    }

    pub fn to_keyvalues(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.push("n_tips_found", self.n_tips_found);
        kv.push("n_pairs", self.pairs.len());
        kv.push("median_pair_error_mm", format!("{:.4}", self.median));
        kv.push("mean_pair_error_mm", format!("{:.4}", self.mean));
        kv.push("max_pair_error_mm", format!("{:.4}", self.max));
        if let Some((t, r)) = self.pose_error {
            kv.push("translation_error_mm", format!("{t:.4}"));
            kv.push("rotation_error_deg", format!("{r:.4}"));
        }
        kv
    }

    /// Tab-separated pair table.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("cone_i\tcone_j\tmeasured_mm\ttruth_mm\terror_mm\n");
        for p in &self.pairs {
            let _ = writeln!(s, "{}\t{}\t{:.4}\t{:.4}\t{:.4}", p.cone_i, p.cone_j, p.measured, p.truth, p.error);
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("cone_i,cone_j,measured_mm,truth_mm,error_mm\n");
        for p in &self.pairs {
            let _ = writeln!(s, "{},{},{:.4},{:.4},{:.4}", p.cone_i, p.cone_j, p.measured, p.truth, p.error);
        }
        s
    }
}

/// The unique cone whose height lies within [`IDENTIFY_TOLERANCE`] of `height`.
pub fn identify_cone(height: f64, spec: &PhantomSpec) -> Option<usize> {
    let mut found = None;
    for (i, c) in spec.cones.iter().enumerate() {
        if (c.height - height).abs() <= IDENTIFY_TOLERANCE {
            if found.is_some() {
                return None;
            }
            found = Some(i);
        }
    }
    found
}

/// Pair errors from world positions of identified cones. Several
/// observations of one cone are averaged.
pub fn pair_errors_identified(observations: &[(usize, Vector3<f64>)], spec: &PhantomSpec) -> Result<ErrorReport> {
    let n = spec.cones.len();
    let mut sum = vec![Vector3::zeros(); n];
    let mut count = vec![0usize; n];
    for &(cone, q) in observations {
        if cone < n {
            sum[cone] += q;
            count[cone] += 1;
        }
    }
    let found: Vec<usize> = (0..n).filter(|&i| count[i] > 0).collect();
    if found.len() < 2 {
        return Err(Error::InsufficientFiducials(found.len()));
    }
    let pos: Vec<Vector3<f64>> = (0..n)
        .map(|i| if count[i] > 0 { sum[i] / count[i] as f64 } else { Vector3::zeros() })
        .collect();
    let tips = spec.tips();
    let mut pairs = Vec::new();
    for (a, &i) in found.iter().enumerate() {
        for &j in &found[a + 1..] {
            let measured = (pos[i] - pos[j]).norm();
            let t = (tips[i] - tips[j]).norm();
            pairs.push(PairError { cone_i: i, cone_j: j, measured, truth: t, error: (measured - t).abs() });
        }
    }
    Ok(ErrorReport::from_pairs(pairs, found.len()))
}

/// Pair errors of detected tips, each given with the tracking pose of its
/// frame. Tips are identified by their apex height; ambiguous ones are
/// dropped.
pub fn fiducial_pair_errors(tips: &[(Tip, RigidTransform)], c: &RigidTransform, spec: &PhantomSpec) -> Result<ErrorReport> {
    let obs: Vec<(usize, Vector3<f64>)> = tips
        .iter()
        .filter_map(|(tip, pose)| {
            let cone = identify_cone(tip.height, spec)?;
            Some((cone, pose.transform_point(&c.transform_point(&tip.image_point.to_plane()))))
        })
        .collect();
    pair_errors_identified(&obs, spec)
}

/// In-plane distance, mm, between each identified tip and the analytic tip
/// of its cone on the same frame, as `(cone, distance)`.
pub fn in_frame_tip_errors(tips: &[Tip], truth: &SweepGroundTruth, spec: &PhantomSpec) -> Vec<(usize, f64)> {
    tips.iter()
        .filter_map(|tip| {
            let cone = identify_cone(tip.height, spec)?;
            let ft = truth.tips_on_frame(tip.frame_index).find(|f| f.cone == cone)?;
            let d = (tip.image_point.x - ft.point.x).hypot(tip.image_point.y - ft.point.y);
            Some((cone, d))
        })
        .collect()
}

/// Translation (mm) and rotation (degrees) between two calibrations.
pub fn compare_to_gt(c: &RigidTransform, c_gt: &RigidTransform) -> (f64, f64) {
    pose_delta(c, c_gt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::ImagePoint;
    use crate::phantom::default_phantom;

    fn tip_at(height: f64, p: ImagePoint) -> Tip {
        Tip { sweep_id: 0, frame_index: 0, frame_position: 0.0, image_point: p, smoothed_height: height, height, track: 0 }
    }

    /// Pose placing image point `p` at world `q` under calibration `c`.
    fn pose_for(c: &RigidTransform, p: ImagePoint, q: Vector3<f64>) -> RigidTransform {
        let m = c.transform_point(&p.to_plane());
        RigidTransform::identity().with_translation(q - m)
    }

    #[test]
    fn exact_tips_have_zero_error() {
        let spec = default_phantom();
        let c = crate::simulate::random_calibration(4);
        let tips: Vec<_> = spec
            .cones
            .iter()
            .zip(spec.tips())
            .enumerate()
            .map(|(i, (cone, q))| {
                let p = ImagePoint::new(10.0 + i as f64, 20.0);
                (tip_at(cone.height + 0.7, p), pose_for(&c, p, q))
            })
            .collect();
        let r = fiducial_pair_errors(&tips, &c, &spec).unwrap();
        assert_eq!(r.pairs.len(), 36);
        assert_eq!(r.n_tips_found, 9);
        assert!(r.max < 1e-9);

        // A globally translated calibration moves every tip alike.
        let shifted = c.with_translation(c.translation + Vector3::new(5.0, 0.0, 0.0));
        let r = fiducial_pair_errors(&tips, &shifted, &spec).unwrap();
        assert!(r.max < 1e-9);
    }

    #[test]
    fn scaled_world_gives_proportional_errors() {
        let spec = default_phantom();
        let obs: Vec<_> = spec.tips().into_iter().enumerate().map(|(i, q)| (i, q * 1.01)).collect();
        let r = pair_errors_identified(&obs, &spec).unwrap();
        let truth: Vec<f64> = r.pairs.iter().map(|p| p.truth).collect();
        assert!((r.median - 0.01 * median(&truth)).abs() < 1e-9);
    }

    #[test]
    fn statistics_match_entries() {
        let spec = default_phantom();
        let obs: Vec<_> = spec
            .tips()
            .into_iter()
            .enumerate()
            .map(|(i, q)| (i, q + Vector3::new(0.3 * i as f64, 0.0, 0.1 * (i * i) as f64)))
            .collect();
        let r = pair_errors_identified(&obs, &spec).unwrap();
        let e = r.errors();
        assert_eq!(r.median, median(&e));
        assert_eq!(r.mean, e.iter().sum::<f64>() / e.len() as f64);
        assert_eq!(r.max, e.iter().cloned().fold(0.0, f64::max));
        assert_eq!(r.to_tsv().lines().count(), 37);
        assert_eq!(r.to_csv().lines().count(), 37);
    }

    #[test]
    fn ambiguous_or_unknown_heights_are_dropped() {
        let spec = default_phantom();
        assert_eq!(identify_cone(20.0, &spec), Some(0));
        assert_eq!(identify_cone(22.4, &spec), Some(0));
        assert_eq!(identify_cone(27.5, &spec), None);
        assert_eq!(identify_cone(27.6, &spec), Some(7));
        assert_eq!(identify_cone(5.0, &spec), None);
    }

    #[test]
    fn one_tip_is_not_enough() {
        let spec = default_phantom();
        assert!(matches!(
            pair_errors_identified(&[(0, Vector3::zeros())], &spec),
            Err(Error::InsufficientFiducials(1))
        ));
    }

    #[test]
    fn compare_examples() {
        let a = RigidTransform::identity();
        assert_eq!(compare_to_gt(&a, &a), (0.0, 0.0));
        let t = a.with_translation(Vector3::new(3.0, 4.0, 0.0));
        assert!((compare_to_gt(&t, &a).0 - 5.0).abs() < 1e-12);
        let r = RigidTransform::rotation_z(10f64.to_radians());
        assert!((compare_to_gt(&r, &a).1 - 10.0).abs() < 1e-9);
    }
}
