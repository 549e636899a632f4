//! Rectified pinhole stereo geometry.
//!
//! Pixel coordinates are continuous with the origin at the centre of the
//! top-left pixel, +x right and +y down. Camera-frame points are in
//! millimetres with +z along the optical axis. The right camera is displaced
//! by `+baseline_mm` along camera X, so disparity is `left.x - right.x` and is
//! positive for points in front of the rig.

use std::ops::{Add, Div, Mul, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("disparity must be positive, got {0}")]
    NonPositiveDisparity(f64),
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("non-finite input")]
    NonFinite,
    #[error("invalid camera parameters: {0}")]
    InvalidParameters(String),
}

/// Subpixel image coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// Camera-frame (or robot-frame) position in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ZERO: Point3 = Point3::new(0.0, 0.0, 0.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_vector(self) -> nalgebra::Vector3<f64> {
        nalgebra::Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_vector(v: &nalgebra::Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }
}

impl Add for Point3 {
    type Output = Point3;
    fn add(self, o: Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Point3 {
    type Output = Point3;
    fn sub(self, o: Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    fn mul(self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Div<f64> for Point3 {
    type Output = Point3;
    fn div(self, s: f64) -> Point3 {
        Point3::new(self.x / s, self.y / s, self.z / s)
    }
}

/// Pinhole intrinsics shared by both rectified views.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx.is_finite() && self.fy.is_finite() && self.cx.is_finite() && self.cy.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidParameters(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        Ok(())
    }
}

/// Rectified stereo pair: shared intrinsics plus a horizontal baseline.
///
/// Serializes as the flat object `{fx, fy, cx, cy, baseline_mm}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StereoRig {
    #[serde(flatten)]
    pub intrinsics: CameraIntrinsics,
    pub baseline_mm: f64,
}

impl StereoRig {
    pub fn new(intrinsics: CameraIntrinsics, baseline_mm: f64) -> Result<Self, GeometryError> {
        let rig = Self { intrinsics, baseline_mm };
        rig.validate()?;
        Ok(rig)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        self.intrinsics.validate()?;
        if !self.baseline_mm.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        if self.baseline_mm <= 0.0 {
            return Err(GeometryError::InvalidParameters(format!(
                "baseline must be positive, got {}",
                self.baseline_mm
            )));
        }
        Ok(())
    }

    /// Recovers the camera-frame point seen at `left` with the given disparity.
    pub fn triangulate(&self, left: Point2, disparity: f64) -> Result<Point3, GeometryError> {
        if !left.is_finite() || !disparity.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        if disparity <= 0.0 {
            return Err(GeometryError::NonPositiveDisparity(disparity));
        }
        let k = &self.intrinsics;
        let z = k.fx * self.baseline_mm / disparity;
        Ok(Point3::new((left.x - k.cx) * z / k.fx, (left.y - k.cy) * z / k.fy, z))
    }

    /// Projects a camera-frame point into both rectified views.
    pub fn project(&self, p: Point3) -> Result<(Point2, Point2), GeometryError> {
        if !p.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        if p.z <= 0.0 {
            return Err(GeometryError::NonPositiveDepth(p.z));
        }
        let k = &self.intrinsics;
        let left = Point2::new(k.cx + k.fx * p.x / p.z, k.cy + k.fy * p.y / p.z);
        let right = Point2::new(left.x - self.disparity_at_depth(p.z), left.y);
        Ok((left, right))
    }

    /// Disparity in pixels of a point at depth `z_mm`.
    pub fn disparity_at_depth(&self, z_mm: f64) -> f64 {
        self.intrinsics.fx * self.baseline_mm / z_mm
    }

    /// Depth change per pixel of disparity error at depth `z_mm` (Z²/(fx·B)).
    pub fn depth_sensitivity(&self, z_mm: f64) -> f64 {
        z_mm * z_mm / (self.intrinsics.fx * self.baseline_mm)
    }
}

impl Default for StereoRig {
    fn default() -> Self {
        Self {
            intrinsics: CameraIntrinsics { fx: 1000.0, fy: 1000.0, cx: 960.0, cy: 540.0 },
            baseline_mm: 5.0,
        }
    }
}

/// Signed horizontal offset `left.x - right.x`.
pub fn disparity_of(left: Point2, right: Point2) -> f64 {
    left.x - right.x
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rig() -> StereoRig {
        StereoRig::default()
    }

    #[test]
    fn triangulate_principal_ray() {
        let p = rig().triangulate(Point2::new(960.0, 540.0), 50.0).unwrap();
        assert_eq!(p, Point3::new(0.0, 0.0, 100.0));
    }

    #[test]
    fn triangulate_offset_column() {
        let p = rig().triangulate(Point2::new(1060.0, 540.0), 50.0).unwrap();
        assert_eq!(p, Point3::new(10.0, 0.0, 100.0));
    }

    #[test]
    fn triangulate_rejects_zero_and_negative_disparity() {
        let r = rig();
        assert_eq!(
            r.triangulate(Point2::new(960.0, 540.0), 0.0),
            Err(GeometryError::NonPositiveDisparity(0.0))
        );
        assert!(matches!(
            r.triangulate(Point2::new(960.0, 540.0), -3.0),
            Err(GeometryError::NonPositiveDisparity(_))
        ));
        assert_eq!(r.triangulate(Point2::new(f64::NAN, 0.0), 5.0), Err(GeometryError::NonFinite));
        assert_eq!(
            r.triangulate(Point2::new(0.0, 0.0), f64::INFINITY),
            Err(GeometryError::NonFinite)
        );
    }

    #[test]
    fn project_examples() {
        let r = rig();
        let (l, rt) = r.project(Point3::new(0.0, 0.0, 100.0)).unwrap();
        assert_eq!((l, rt), (Point2::new(960.0, 540.0), Point2::new(910.0, 540.0)));
        let (l, rt) = r.project(Point3::new(10.0, 0.0, 100.0)).unwrap();
        assert_eq!((l, rt), (Point2::new(1060.0, 540.0), Point2::new(1010.0, 540.0)));
        assert_eq!(
            r.project(Point3::new(0.0, 0.0, -5.0)),
            Err(GeometryError::NonPositiveDepth(-5.0))
        );
    }

    #[test]
    fn disparity_examples() {
        assert_eq!(disparity_of(Point2::new(1060.0, 540.0), Point2::new(1010.0, 540.0)), 50.0);
        assert_eq!(disparity_of(Point2::new(100.0, 10.0), Point2::new(100.0, 10.0)), 0.0);
    }

    #[test]
    fn projected_disparity_matches_depth() {
        let r = rig();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let p = Point3::new(rng.gen_range(-40.0..40.0), rng.gen_range(-25.0..25.0), rng.gen_range(20.0..500.0));
            let (l, rt) = r.project(p).unwrap();
            let expected = r.intrinsics.fx * r.baseline_mm / p.z;
            assert!((disparity_of(l, rt) - expected).abs() <= 1e-9 * expected.max(1.0));
        }
    }

    #[test]
    fn rig_validation() {
        let k = CameraIntrinsics { fx: 1000.0, fy: 1000.0, cx: 960.0, cy: 540.0 };
        assert!(StereoRig::new(k, 0.0).is_err());
        assert!(CameraIntrinsics::new(-1.0, 1.0, 0.0, 0.0).is_err());
        assert!(StereoRig::new(k, 5.0).is_ok());
    }

    #[test]
    fn rig_json_is_flat() {
        let v = serde_json::to_value(rig()).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"fx": 1000.0, "fy": 1000.0, "cx": 960.0, "cy": 540.0, "baseline_mm": 5.0})
        );
        let back: StereoRig = serde_json::from_value(v).unwrap();
        assert_eq!(back, rig());
    }

    proptest! {
        #[test]
        fn project_keeps_rows_equal(x in -50.0f64..50.0, y in -30.0f64..30.0, z in 20.0f64..500.0) {
            let (l, r) = rig().project(Point3::new(x, y, z)).unwrap();
            prop_assert_eq!(l.y, r.y);
        }

        #[test]
        fn triangulate_inverts_project(x in -50.0f64..50.0, y in -30.0f64..30.0, z in 20.0f64..500.0) {
            let r = rig();
            let p = Point3::new(x, y, z);
            let (l, rt) = r.project(p).unwrap();
            let q = r.triangulate(l, disparity_of(l, rt)).unwrap();
            prop_assert!((q.x - p.x).abs() <= 1e-9);
            prop_assert!((q.y - p.y).abs() <= 1e-9);
            prop_assert!((q.z - p.z).abs() <= 1e-9);
        }

        #[test]
        fn depth_decreases_with_disparity(u in 0.0f64..1920.0, d in 1.0f64..300.0, step in 1e-3f64..50.0) {
            let r = rig();
            let a = r.triangulate(Point2::new(u, 300.0), d).unwrap();
            let b = r.triangulate(Point2::new(u, 300.0), d + step).unwrap();
            prop_assert!(b.z < a.z);
        }
    }
}
