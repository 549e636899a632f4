//! Least-squares affine transform from camera-frame to robot-frame coordinates.

use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Point3;

/// Ratio of smallest to largest singular value of the homogeneous design
/// matrix below which a fit is rejected.
pub const RANK_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("need at least 4 correspondences, got {0}")]
    TooFewPoints(usize),
    #[error("camera points are degenerate (singular value ratio {0:e})")]
    DegenerateConfiguration(f64),
    #[error("holdout set is empty")]
    EmptyHoldout,
    #[error("non-finite correspondence at row {0}")]
    NonFinite(usize),
    #[error("invalid holdout fraction {0}")]
    InvalidHoldout(f64),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub cam: Point3,
    pub robot: Point3,
}

/// `p ↦ linear · p + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform3D {
    pub linear: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl AffineTransform3D {
    pub fn identity() -> Self {
        Self { linear: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(linear: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { linear, translation }
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        Point3::from_vector(&(self.linear * p.to_vector() + self.translation))
    }

    pub fn inverse(&self) -> Option<Self> {
        let inv = self.linear.try_inverse()?;
        Some(Self { linear: inv, translation: -(inv * self.translation) })
    }

    pub fn is_finite(&self) -> bool {
        self.linear.iter().chain(self.translation.iter()).all(|v| v.is_finite())
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        let m = &self.linear;
        [[m[(0, 0)], m[(0, 1)], m[(0, 2)]], [m[(1, 0)], m[(1, 1)], m[(1, 2)]], [m[(2, 0)], m[(2, 1)], m[(2, 2)]]]
    }

    pub fn from_rows(rows: [[f64; 3]; 3], translation: [f64; 3]) -> Self {
        Self {
            linear: Matrix3::from_fn(|r, c| rows[r][c]),
            translation: Vector3::new(translation[0], translation[1], translation[2]),
        }
    }
}

impl Serialize for AffineTransform3D {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        TransformRepr { linear: self.rows(), translation: self.translation.into() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for AffineTransform3D {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = TransformRepr::deserialize(d)?;
        Ok(Self::from_rows(r.linear, r.translation))
    }
}

#[derive(Serialize, Deserialize)]
struct TransformRepr {
    linear: [[f64; 3]; 3],
    translation: [f64; 3],
}

/// Euclidean residual statistics; `std_mm` is the population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualStats {
    pub mean_mm: f64,
    pub std_mm: f64,
    pub max_mm: f64,
    pub n: usize,
}

impl ResidualStats {
    pub fn from_residuals(r: &[f64]) -> Self {
        let n = r.len();
        if n == 0 {
            return Self { mean_mm: 0.0, std_mm: 0.0, max_mm: 0.0, n };
        }
        let mean = r.iter().sum::<f64>() / n as f64;
        let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let max = r.iter().cloned().fold(0.0, f64::max);
        Self { mean_mm: mean, std_mm: var.sqrt(), max_mm: max, n }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub transform: AffineTransform3D,
    pub residual: ResidualStats,
    pub holdout: Option<ResidualStats>,
}

/// JSON form: `{"linear", "translation", "residual_mean_mm", "residual_std_mm", ...}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformFile {
    pub linear: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub residual_mean_mm: f64,
    pub residual_std_mm: f64,
    pub residual_max_mm: f64,
    pub n_fit: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub holdout_mean_mm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub holdout_std_mm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub holdout_max_mm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub n_holdout: Option<usize>,
}

impl From<&CalibrationReport> for TransformFile {
    fn from(r: &CalibrationReport) -> Self {
        Self {
            linear: r.transform.rows(),
            translation: r.transform.translation.into(),
            residual_mean_mm: r.residual.mean_mm,
            residual_std_mm: r.residual.std_mm,
            residual_max_mm: r.residual.max_mm,
            n_fit: r.residual.n,
            holdout_mean_mm: r.holdout.map(|h| h.mean_mm),
            holdout_std_mm: r.holdout.map(|h| h.std_mm),
            holdout_max_mm: r.holdout.map(|h| h.max_mm),
            n_holdout: r.holdout.map(|h| h.n),
        }
    }
}

impl TransformFile {
    pub fn transform(&self) -> AffineTransform3D {
        AffineTransform3D::from_rows(self.linear, self.translation)
    }
}

/// Loads a transform from JSON carrying at least `linear` and `translation`.
pub fn read_transform_json(path: &Path) -> Result<AffineTransform3D, CalibrationError> {
    let text = std::fs::read_to_string(path)?;
    let t: AffineTransform3D = serde_json::from_str(&text)?;
    Ok(t)
}

/// Fits `robot ≈ A·cam + t` minimising the summed squared Euclidean residual.
///
/// The 12 unknowns separate into three independent least-squares problems
/// sharing the homogeneous design matrix `[x y z 1]`.
pub fn fit_affine(corrs: &[Correspondence]) -> Result<CalibrationReport, CalibrationError> {
    if corrs.len() < 4 {
        return Err(CalibrationError::TooFewPoints(corrs.len()));
    }
    if let Some(i) = corrs.iter().position(|c| !c.cam.is_finite() || !c.robot.is_finite()) {
        return Err(CalibrationError::NonFinite(i));
    }
    let n = corrs.len();
    let design = DMatrix::from_fn(n, 4, |r, c| match c {
        0 => corrs[r].cam.x,
        1 => corrs[r].cam.y,
        2 => corrs[r].cam.z,
        _ => 1.0,
    });
    let svd = design.svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let ratio = if smax > 0.0 { smin / smax } else { 0.0 };
    if !(ratio >= RANK_TOLERANCE) {
        return Err(CalibrationError::DegenerateConfiguration(ratio));
    }
    // Solve on centred coordinates: t = r̄ - A·c̄.
    let cam_mean = corrs.iter().fold(Vector3::zeros(), |acc, c| acc + c.cam.to_vector()) / n as f64;
    let rob_mean = corrs.iter().fold(Vector3::zeros(), |acc, c| acc + c.robot.to_vector()) / n as f64;
    let centred = DMatrix::from_fn(n, 3, |r, c| corrs[r].cam.to_vector()[c] - cam_mean[c]);
    let targets = DMatrix::from_fn(n, 3, |r, c| corrs[r].robot.to_vector()[c] - rob_mean[c]);
    let x = centred
        .svd(true, true)
        .solve(&targets, 0.0)
        .map_err(|_| CalibrationError::DegenerateConfiguration(ratio))?;
    // x is 3x3 holding Aᵀ.
    let linear = Matrix3::from_fn(|r, c| x[(c, r)]);
    let translation = rob_mean - linear * cam_mean;
    let transform = AffineTransform3D { linear, translation };
    let residual = ResidualStats::from_residuals(&residuals(&transform, corrs));
    Ok(CalibrationReport { transform, residual, holdout: None })
}

/// Fits on a seeded random split and evaluates on the held-out remainder.
pub fn fit_with_holdout(corrs: &[Correspondence], holdout_fraction: f64, seed: u64) -> Result<CalibrationReport, CalibrationError> {
    if !(0.0..1.0).contains(&holdout_fraction) {
        return Err(CalibrationError::InvalidHoldout(holdout_fraction));
    }
    let n_hold = (corrs.len() as f64 * holdout_fraction).round() as usize;
    if n_hold == 0 {
        return fit_affine(corrs);
    }
    let mut idx: Vec<usize> = (0..corrs.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held: Vec<Correspondence> = idx[..n_hold].iter().map(|&i| corrs[i]).collect();
    let fit: Vec<Correspondence> = idx[n_hold..].iter().map(|&i| corrs[i]).collect();
    let mut report = fit_affine(&fit)?;
    report.holdout = Some(holdout_eval(&report.transform, &held)?);
    Ok(report)
}

/// Residual statistics of `transform` on correspondences not used for fitting.
pub fn holdout_eval(transform: &AffineTransform3D, held_out: &[Correspondence]) -> Result<ResidualStats, CalibrationError> {
    if held_out.is_empty() {
        return Err(CalibrationError::EmptyHoldout);
    }
    Ok(ResidualStats::from_residuals(&residuals(transform, held_out)))
}

pub fn residuals(transform: &AffineTransform3D, corrs: &[Correspondence]) -> Vec<f64> {
    corrs.iter().map(|c| (transform.apply(c.cam) - c.robot).norm()).collect()
}

/// Sum of squared residuals.
pub fn sse(transform: &AffineTransform3D, corrs: &[Correspondence]) -> f64 {
    corrs.iter().map(|c| (transform.apply(c.cam) - c.robot).norm().powi(2)).sum()
}

#[derive(Debug, Serialize, Deserialize)]
struct CorrRow {
    cam_x: f64,
    cam_y: f64,
    cam_z: f64,
    rob_x: f64,
    rob_y: f64,
    rob_z: f64,
}

/// Parses the `cam_x,cam_y,cam_z,rob_x,rob_y,rob_z` CSV.
pub fn read_correspondences<R: Read>(reader: R) -> Result<Vec<Correspondence>, CalibrationError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let r: CorrRow = row?;
        out.push(Correspondence {
            cam: Point3::new(r.cam_x, r.cam_y, r.cam_z),
            robot: Point3::new(r.rob_x, r.rob_y, r.rob_z),
        });
    }
    Ok(out)
}

pub fn write_correspondences<W: std::io::Write>(mut w: W, corrs: &[Correspondence]) -> std::io::Result<()> {
    writeln!(w, "cam_x,cam_y,cam_z,rob_x,rob_y,rob_z")?;
    for c in corrs {
        writeln!(
            w,
            "{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
            c.cam.x, c.cam.y, c.cam.z, c.robot.x, c.robot.y, c.robot.z
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn random_cloud(n: usize, seed: u64) -> Vec<Point3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Point3::new(rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), rng.gen_range(80.0..120.0)))
            .collect()
    }

    fn random_affine(seed: u64) -> AffineTransform3D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let linear = Matrix3::from_fn(|r, c| if r == c { 1.0 } else { 0.0 } + rng.gen_range(-0.3..0.3));
        let translation = Vector3::new(rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0));
        AffineTransform3D { linear, translation }
    }

    fn exact(t: &AffineTransform3D, pts: &[Point3]) -> Vec<Correspondence> {
        pts.iter().map(|&cam| Correspondence { cam, robot: t.apply(cam) }).collect()
    }

    #[test]
    fn identity_fit() {
        let pts = random_cloud(10, 1);
        let r = fit_affine(&exact(&AffineTransform3D::identity(), &pts)).unwrap();
        assert!((r.transform.linear - Matrix3::identity()).abs().max() < 1e-9);
        assert!(r.transform.translation.abs().max() < 1e-9);
        assert!(r.residual.max_mm < 1e-9);
    }

    #[test]
    fn recovers_random_affine() {
        let truth = random_affine(2);
        let r = fit_affine(&exact(&truth, &random_cloud(125, 3))).unwrap();
        assert!((r.transform.linear - truth.linear).abs().max() < 1e-9);
        assert!((r.transform.translation - truth.translation).abs().max() < 1e-9);
        assert!(r.residual.max_mm <= 1e-9);
    }

    #[test]
    fn noisy_fit_residual_scale() {
        // σ is the RMS of the 3D noise vector, i.e. σ/√3 per axis
        let sigma = 0.1;
        let truth = random_affine(4);
        let noise = Normal::new(0.0, sigma / 3f64.sqrt()).unwrap();
        let mut means = Vec::new();
        for trial in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
            let corrs: Vec<Correspondence> = exact(&truth, &random_cloud(125, trial))
                .into_iter()
                .map(|c| Correspondence {
                    cam: c.cam,
                    robot: c.robot + Point3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng)),
                })
                .collect();
            means.push(fit_affine(&corrs).unwrap().residual.mean_mm);
        }
        for m in means {
            assert!((0.5 * sigma..=1.2 * sigma).contains(&m), "{m}");
        }
    }

    #[test]
    fn rejects_small_and_degenerate_sets() {
        let pts = random_cloud(3, 5);
        assert!(matches!(fit_affine(&exact(&AffineTransform3D::identity(), &pts)), Err(CalibrationError::TooFewPoints(3))));
        // all camera points on the plane z = 100
        let planar: Vec<Point3> = random_cloud(20, 6).into_iter().map(|p| Point3::new(p.x, p.y, 100.0)).collect();
        assert!(matches!(
            fit_affine(&exact(&AffineTransform3D::identity(), &planar)),
            Err(CalibrationError::DegenerateConfiguration(_))
        ));
        let four = [Point3::new(0.0, 0.0, 1.0), Point3::new(1.0, 0.0, 1.0), Point3::new(0.0, 1.0, 1.0), Point3::new(1.0, 1.0, 1.0)];
        assert!(matches!(
            fit_affine(&exact(&AffineTransform3D::identity(), &four)),
            Err(CalibrationError::DegenerateConfiguration(_))
        ));
    }

    #[test]
    fn apply_examples() {
        let p = Point3::new(1.0, 1.0, 1.0);
        assert_eq!(AffineTransform3D::identity().apply(p), p);
        let t = AffineTransform3D::new(Matrix3::identity() * 2.0, Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(t.apply(p), Point3::new(3.0, 2.0, 2.0));
    }

    #[test]
    fn holdout_on_exact_data_is_zero() {
        let truth = random_affine(7);
        let corrs = exact(&truth, &random_cloud(40, 8));
        let s = holdout_eval(&truth, &corrs).unwrap();
        assert!(s.max_mm < 1e-9);
        assert!(matches!(holdout_eval(&truth, &[]), Err(CalibrationError::EmptyHoldout)));
    }

    #[test]
    fn holdout_mean_is_chi3_scale() {
        // E|N(0, σ²I₃)| = σ·2·sqrt(2/π)
        let sigma = 0.1;
        let expected = sigma * 2.0 * (2.0 / std::f64::consts::PI).sqrt();
        let truth = random_affine(9);
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let corrs: Vec<Correspondence> = exact(&truth, &random_cloud(1000, 11))
            .into_iter()
            .map(|c| Correspondence {
                cam: c.cam,
                robot: c.robot + Point3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng)),
            })
            .collect();
        let s = holdout_eval(&truth, &corrs).unwrap();
        assert!((s.mean_mm - expected).abs() <= 0.15 * expected, "{} vs {}", s.mean_mm, expected);
    }

    #[test]
    fn split_holdout_close_to_fit() {
        let truth = random_affine(12);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let corrs: Vec<Correspondence> = exact(&truth, &random_cloud(125, 14))
            .into_iter()
            .map(|c| Correspondence {
                cam: c.cam,
                robot: c.robot + Point3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng)),
            })
            .collect();
        let r = fit_with_holdout(&corrs, 0.2, 15).unwrap();
        let h = r.holdout.unwrap();
        assert_eq!(h.n, 25);
        assert_eq!(r.residual.n, 100);
        assert!(h.mean_mm <= 2.0 * r.residual.mean_mm);
    }

    #[test]
    fn fitted_parameters_are_a_local_minimum() {
        let truth = random_affine(16);
        let noise = Normal::new(0.0, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let corrs: Vec<Correspondence> = exact(&truth, &random_cloud(60, 18))
            .into_iter()
            .map(|c| Correspondence {
                cam: c.cam,
                robot: c.robot + Point3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng)),
            })
            .collect();
        let fit = fit_affine(&corrs).unwrap().transform;
        let base = sse(&fit, &corrs);
        let eps = 1e-4;
        for k in 0..12 {
            for sign in [-1.0, 1.0] {
                let mut t = fit;
                if k < 9 {
                    t.linear[(k / 3, k % 3)] += sign * eps;
                } else {
                    t.translation[k - 9] += sign * eps;
                }
                assert!(sse(&t, &corrs) >= base, "parameter {k}");
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let corrs = exact(&random_affine(19), &random_cloud(5, 20));
        let mut buf = Vec::new();
        write_correspondences(&mut buf, &corrs).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("cam_x,cam_y,cam_z,rob_x,rob_y,rob_z\n"));
        let back = read_correspondences(&buf[..]).unwrap();
        for (a, b) in corrs.iter().zip(&back) {
            assert!((a.cam - b.cam).norm() < 1e-8 && (a.robot - b.robot).norm() < 1e-8);
        }
    }

    #[test]
    fn transform_json_shape() {
        let r = fit_affine(&exact(&AffineTransform3D::identity(), &random_cloud(10, 21))).unwrap();
        let v = serde_json::to_value(TransformFile::from(&r)).unwrap();
        assert!(v["linear"].is_array() && v["translation"].is_array());
        assert!(v["residual_mean_mm"].is_number() && v["residual_std_mm"].is_number());
        let t: AffineTransform3D = serde_json::from_value(v).unwrap();
        assert!((t.linear - Matrix3::identity()).abs().max() < 1e-9);
    }

    proptest! {
        #[test]
        fn robot_translation_only_moves_fitted_translation(cx in -100.0f64..100.0, cy in -100.0f64..100.0, cz in -100.0f64..100.0, seed in 0u64..1000) {
            let truth = random_affine(seed);
            let corrs = exact(&truth, &random_cloud(30, seed + 1));
            let c = Point3::new(cx, cy, cz);
            let shifted: Vec<Correspondence> = corrs.iter().map(|k| Correspondence { cam: k.cam, robot: k.robot + c }).collect();
            let a = fit_affine(&corrs).unwrap().transform;
            let b = fit_affine(&shifted).unwrap().transform;
            prop_assert!((a.linear - b.linear).abs().max() <= 1e-12);
            prop_assert!(((b.translation - a.translation) - c.to_vector()).abs().max() <= 1e-9);
        }
    }
}
