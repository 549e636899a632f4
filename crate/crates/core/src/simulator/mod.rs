//! Synthetic ground-truth scenes: a textured fronto-parallel target moving
//! along a seeded trajectory in front of a rectified stereo rig.
//!
//! Robot and camera frames are related by a fixed affine map: the target
//! reference point at robot position `(x, y, z)` sits at camera position
//! `(x, y, working_distance - z)`, so positive robot z moves the target toward
//! the camera.

mod texture;
mod trajectory;

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{AffineTransform3D, Correspondence};
use crate::frame::Frame;
use crate::geometry::{CameraIntrinsics, GeometryError, Point3, StereoRig};
use crate::sequence::{FrameSource, SequenceError, SequenceInfo, SequenceMetadata, StereoFrame};

pub use texture::{value_noise, TextureMap, TextureParams};
pub use trajectory::{gen_trajectory, Axes, Trajectory, TrajectoryParams};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("mask has {actual} bytes, expected {expected} ({width}x{height})")]
    DimensionMismatch { width: u32, height: u32, expected: usize, actual: usize },
    #[error("need at least 4 calibration positions, got {0}")]
    TooFewPoints(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Saturated highlights fixed in image space, identical in both views.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpecularParams {
    pub count: usize,
    /// Gaussian sigma range of a blob, px.
    pub sigma_px: (f64, f64),
    /// Blob centres are drawn inside this centred box, px.
    pub region_px: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePreset {
    pub name: String,
    pub rig: StereoRig,
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub fps: f64,
    pub working_distance_mm: f64,
    /// Texture resolution, mm per texel.
    pub texel_mm: f64,
    pub texture: TextureParams,
    pub specular: Option<SpecularParams>,
    pub motion_blur: bool,
    /// Sub-frame samples averaged when motion blur is on.
    pub blur_samples: usize,
    /// Exposure time as a fraction of the frame interval.
    pub exposure_frames: f64,
    /// Standard deviation of additive Gaussian pixel noise (0 = noiseless).
    pub pixel_noise_sigma: f64,
}

impl ScenePreset {
    pub const NAMES: [&'static str; 2] = ["feature-rich", "feature-poor"];

    /// High-contrast four-octave texture.
    pub fn feature_rich() -> Self {
        Self {
            name: "feature-rich".into(),
            rig: StereoRig::default(),
            width: 1920,
            height: 1080,
            channels: 1,
            fps: 30.0,
            working_distance_mm: 100.0,
            texel_mm: 0.1,
            texture: TextureParams { octaves: 4, base_cell_mm: 2.4, persistence: 0.6, mean: 128.0, contrast: 100.0 },
            specular: None,
            motion_blur: false,
            blur_samples: 5,
            exposure_frames: 0.5,
            pixel_noise_sigma: 0.0,
        }
    }

    /// Single-octave low-contrast texture with specular blobs.
    pub fn feature_poor() -> Self {
        Self {
            name: "feature-poor".into(),
            texture: TextureParams { octaves: 1, base_cell_mm: 3.0, persistence: 0.5, mean: 170.0, contrast: 25.0 },
            specular: Some(SpecularParams { count: 6, sigma_px: (8.0, 20.0), region_px: (600.0, 400.0) }),
            ..Self::feature_rich()
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "feature-rich" => Some(Self::feature_rich()),
            "feature-poor" => Some(Self::feature_poor()),
            _ => None,
        }
    }

    /// Same scene at a different image size, principal point re-centred.
    pub fn with_size(mut self, width: u32, height: u32) -> Self {
        self.width = width;
        self.height = height;
        self.rig.intrinsics = CameraIntrinsics { cx: width as f64 / 2.0, cy: height as f64 / 2.0, ..self.rig.intrinsics };
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.rig.validate()?;
        let bad = |m: String| Err(SimError::InvalidParameter(m));
        if self.width == 0 || self.height == 0 {
            return bad("image dimensions must be positive".into());
        }
        if self.channels != 1 && self.channels != 3 {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return bad(format!("fps must be positive, got {}", self.fps));
        }
        if !(50.0..=300.0).contains(&self.working_distance_mm) {
            return bad(format!("working distance {} mm outside [50, 300]", self.working_distance_mm));
        }
        if !(self.texel_mm > 0.0) {
            return bad("texel_mm must be positive".into());
        }
        if self.blur_samples == 0 || !(self.exposure_frames >= 0.0) {
            return bad("motion blur needs >= 1 sample and non-negative exposure".into());
        }
        if !(self.pixel_noise_sigma >= 0.0) {
            return bad("pixel noise sigma must be non-negative".into());
        }
        Ok(())
    }
}

/// Affine map from camera-frame mm to robot-frame mm for a scene.
pub fn camera_to_robot(working_distance_mm: f64) -> AffineTransform3D {
    AffineTransform3D::new(Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0)), Vector3::new(0.0, 0.0, working_distance_mm))
}

/// Camera-frame position of the target reference point.
pub fn target_in_camera(working_distance_mm: f64, robot: Point3) -> Point3 {
    Point3::new(robot.x, robot.y, working_distance_mm - robot.z)
}

/// Occlusion overlay: pixels below 128 hide the scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self, SimError> {
        let expected = width as usize * height as usize;
        if data.len() != expected {
            return Err(SimError::DimensionMismatch { width, height, expected, actual: data.len() });
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> u8) -> Self {
        let data = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Self { width, height, data }
    }

    /// Reads a raw `width × height` u8 file.
    pub fn load(path: &Path, width: u32, height: u32) -> Result<Self, SimError> {
        Self::new(width, height, std::fs::read(path)?)
    }

    pub fn occludes(&self, index: usize) -> bool {
        self.data[index] < 128
    }
}

/// Lazily rendered stereo sequence; frames are produced on request.
#[derive(Debug, Clone)]
pub struct SceneRenderer {
    preset: ScenePreset,
    trajectory: Trajectory,
    texture: Arc<TextureMap>,
    specular: Option<Arc<Vec<f32>>>,
    mask: Option<Arc<Mask>>,
    seed: u64,
    info: SequenceInfo,
}

/// Builds the renderer for `trajectory` under `preset`; no pixels are produced yet.
pub fn render_sequence(preset: &ScenePreset, trajectory: &Trajectory, mask: Option<Mask>) -> Result<SceneRenderer, SimError> {
    SceneRenderer::new(preset.clone(), trajectory.clone(), mask)
}

impl SceneRenderer {
    pub fn new(preset: ScenePreset, trajectory: Trajectory, mask: Option<Mask>) -> Result<Self, SimError> {
        preset.validate()?;
        if trajectory.is_empty() {
            return Err(SimError::InvalidParameter("trajectory is empty".into()));
        }
        if (trajectory.params.fps - preset.fps).abs() > 1e-9 {
            return Err(SimError::InvalidParameter(format!(
                "trajectory fps {} differs from preset fps {}",
                trajectory.params.fps, preset.fps
            )));
        }
        if let Some(m) = &mask {
            if (m.width, m.height) != (preset.width, preset.height) {
                return Err(SimError::DimensionMismatch {
                    width: preset.width,
                    height: preset.height,
                    expected: preset.width as usize * preset.height as usize,
                    actual: m.data.len(),
                });
            }
        }
        let seed = trajectory.params.seed;

        // Waypoints bound the whole polyline; samples cover the stationary case.
        let pts = trajectory.waypoints.iter().chain(&trajectory.samples);
        let (mut lo, mut hi) = ([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]);
        for p in pts {
            for (i, v) in p.to_array().into_iter().enumerate() {
                lo[i] = lo[i].min(v);
                hi[i] = hi[i].max(v);
            }
        }
        let z_near = preset.working_distance_mm - hi[2];
        let z_far = preset.working_distance_mm - lo[2];
        if z_near <= 1.0 {
            return Err(SimError::InvalidParameter(format!("target reaches depth {z_near} mm")));
        }
        let k = preset.rig.intrinsics;
        let margin = 1.0;
        let x_range = (
            -k.cx * z_far / k.fx - hi[0] - margin,
            (preset.width as f64 - 1.0 - k.cx) * z_far / k.fx + preset.rig.baseline_mm - lo[0] + margin,
        );
        let y_range = (-k.cy * z_far / k.fy - hi[1] - margin, (preset.height as f64 - 1.0 - k.cy) * z_far / k.fy - lo[1] + margin);
        let texture = TextureMap::noise(&preset.texture, seed, preset.texel_mm, x_range, y_range);
        let specular = preset.specular.map(|s| Arc::new(specular_overlay(&s, preset.width, preset.height, seed)));
        Self::assemble(preset, trajectory, texture, specular, mask)
    }

    /// Renderer over an explicit texture, for scenes with known markings.
    pub fn with_texture(preset: ScenePreset, trajectory: Trajectory, texture: TextureMap, mask: Option<Mask>) -> Result<Self, SimError> {
        preset.validate()?;
        Self::assemble(preset, trajectory, texture, None, mask)
    }

    fn assemble(
        preset: ScenePreset,
        trajectory: Trajectory,
        texture: TextureMap,
        specular: Option<Arc<Vec<f32>>>,
        mask: Option<Mask>,
    ) -> Result<Self, SimError> {
        let seed = trajectory.params.seed;
        let mut metadata = SequenceMetadata::new(preset.rig);
        metadata.preset = preset.name.clone();
        metadata.seed = seed;
        metadata.working_distance_mm = Some(preset.working_distance_mm);
        metadata.trajectory = Some(serde_json::to_value(trajectory.params).expect("trajectory params serialize"));
        metadata.camera_to_robot = Some(camera_to_robot(preset.working_distance_mm));
        metadata.extra.insert("scene".into(), serde_json::to_value(&preset).expect("preset serializes"));
        metadata.extra.insert("masked".into(), serde_json::Value::Bool(mask.is_some()));
        let info = SequenceInfo {
            width: preset.width,
            height: preset.height,
            channels: preset.channels,
            frame_count: trajectory.len(),
            fps_milli: (preset.fps * 1000.0).round() as u32,
            metadata,
        };
        Ok(Self { preset, trajectory, texture: Arc::new(texture), specular, mask: mask.map(Arc::new), seed, info })
    }

    pub fn preset(&self) -> &ScenePreset {
        &self.preset
    }

    pub fn trajectory(&self) -> &Trajectory {
        &self.trajectory
    }

    /// Camera-frame target positions integrated over the exposure of `frame`.
    fn exposure_positions(&self, frame: usize) -> Vec<Point3> {
        let wd = self.preset.working_distance_mm;
        if !self.preset.motion_blur || self.preset.blur_samples == 1 {
            return vec![target_in_camera(wd, self.trajectory.samples[frame])];
        }
        let k = self.preset.blur_samples;
        let t = self.trajectory.time_of(frame);
        let dt = self.preset.exposure_frames / self.preset.fps;
        (0..k)
            .map(|i| {
                let s = i as f64 / (k - 1) as f64 - 0.5;
                target_in_camera(wd, self.trajectory.position_at(t + s * dt))
            })
            .collect()
    }

    fn render_view(&self, frame: usize, cams: &[Point3], right: bool) -> Frame {
        let (w, h) = (self.preset.width as usize, self.preset.height as usize);
        let k = self.preset.rig.intrinsics;
        let tex = &*self.texture;
        let offset = if right { self.preset.rig.baseline_mm } else { 0.0 };
        let mut acc = vec![0f32; w * h];
        let weight = 1.0 / cams.len() as f32;
        for c in cams {
            let a = c.z / k.fx / tex.texel;
            let b = (-k.cx * c.z / k.fx + offset - c.x - tex.x0) / tex.texel;
            for v in 0..h {
                let ty = ((v as f64 - k.cy) * c.z / k.fy - c.y - tex.y0) / tex.texel;
                let row = &mut acc[v * w..(v + 1) * w];
                if cams.len() == 1 {
                    for (u, px) in row.iter_mut().enumerate() {
                        *px = tex.sample_texel(a * u as f64 + b, ty);
                    }
                } else {
                    for (u, px) in row.iter_mut().enumerate() {
                        *px += tex.sample_texel(a * u as f64 + b, ty) * weight;
                    }
                }
            }
        }
        if let Some(spec) = &self.specular {
            for (px, &alpha) in acc.iter_mut().zip(spec.iter()) {
                *px += (255.0 - *px) * alpha;
            }
        }
        if self.preset.pixel_noise_sigma > 0.0 {
            let stream = (frame as u64) << 1 | u64::from(right);
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(stream);
            let normal = Normal::new(0.0f32, self.preset.pixel_noise_sigma as f32).expect("sigma validated");
            for px in acc.iter_mut() {
                *px += normal.sample(&mut rng);
            }
        }
        if let Some(m) = &self.mask {
            for (i, px) in acc.iter_mut().enumerate() {
                if m.occludes(i) {
                    *px = 128.0;
                }
            }
        }
        let c = self.preset.channels as usize;
        let mut data = Vec::with_capacity(w * h * c);
        for px in acc {
            let v = px.round().clamp(0.0, 255.0) as u8;
            data.extend(std::iter::repeat(v).take(c));
        }
        Frame::new(self.preset.width, self.preset.height, self.preset.channels, data).expect("buffer sized to frame")
    }
}

impl FrameSource for SceneRenderer {
    fn info(&self) -> &SequenceInfo {
        &self.info
    }

    fn stereo_frame(&self, index: usize) -> Result<StereoFrame, SequenceError> {
        if index >= self.trajectory.len() {
            return Err(SequenceError::FrameOutOfRange { index, len: self.trajectory.len() });
        }
        let cams = self.exposure_positions(index);
        let (left, right) = rayon::join(|| self.render_view(index, &cams, false), || self.render_view(index, &cams, true));
        Ok(StereoFrame { left: Arc::new(left), right: Arc::new(right) })
    }
}

fn specular_overlay(p: &SpecularParams, width: u32, height: u32, seed: u64) -> Vec<f32> {
    let (w, h) = (width as usize, height as usize);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bec_0000);
    let mut alpha = vec![0f32; w * h];
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    for _ in 0..p.count {
        let bx = cx + rng.gen_range(-0.5..=0.5) * p.region_px.0;
        let by = cy + rng.gen_range(-0.5..=0.5) * p.region_px.1;
        let s = rng.gen_range(p.sigma_px.0..=p.sigma_px.1);
        let reach = 4.0 * s;
        let x0 = (bx - reach).floor().max(0.0) as usize;
        let x1 = ((bx + reach).ceil() as usize).min(w.saturating_sub(1));
        let y0 = (by - reach).floor().max(0.0) as usize;
        let y1 = ((by + reach).ceil() as usize).min(h.saturating_sub(1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let r2 = (x as f64 - bx).powi(2) + (y as f64 - by).powi(2);
                let a = (-r2 / (2.0 * s * s)).exp() as f32;
                let px = &mut alpha[y * w + x];
                *px = px.max(a);
            }
        }
    }
    alpha
}

/// One ground-truth row: robot-frame target position at a frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRow {
    pub frame: usize,
    pub t_s: f64,
    pub x_mm: f64,
    pub y_mm: f64,
    pub z_mm: f64,
}

impl GroundTruthRow {
    pub fn pos(&self) -> Point3 {
        Point3::new(self.x_mm, self.y_mm, self.z_mm)
    }
}

pub fn ground_truth(trajectory: &Trajectory) -> Vec<GroundTruthRow> {
    trajectory
        .samples
        .iter()
        .enumerate()
        .map(|(k, p)| GroundTruthRow { frame: k, t_s: trajectory.time_of(k), x_mm: p.x, y_mm: p.y, z_mm: p.z })
        .collect()
}

/// Writes `frame,t_s,x_mm,y_mm,z_mm` with 6 decimals.
pub fn write_ground_truth<W: Write>(mut w: W, rows: &[GroundTruthRow]) -> std::io::Result<()> {
    writeln!(w, "frame,t_s,x_mm,y_mm,z_mm")?;
    for r in rows {
        writeln!(w, "{},{:.6},{:.6},{:.6},{:.6}", r.frame, r.t_s, r.x_mm, r.y_mm, r.z_mm)?;
    }
    w.flush()
}

pub fn read_ground_truth<R: Read>(r: R) -> Result<Vec<GroundTruthRow>, SimError> {
    let mut rdr = csv::Reader::from_reader(r);
    Ok(rdr.deserialize().collect::<Result<Vec<GroundTruthRow>, _>>()?)
}

/// Calibration correspondences with the transform that generated them.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub correspondences: Vec<Correspondence>,
    pub camera_to_robot: AffineTransform3D,
}

/// Robot positions on a `k × k × k` grid when `n` is a perfect cube, else a
/// uniform cloud, spanning the centred `cube_mm` workspace. Camera points get
/// isotropic Gaussian noise whose 3D RMS is `noise_sigma_mm`.
pub fn gen_calibration_set(
    seed: u64,
    n_positions: usize,
    noise_sigma_mm: f64,
    cube_mm: f64,
    working_distance_mm: f64,
) -> Result<CalibrationSet, SimError> {
    if n_positions < 4 {
        return Err(SimError::TooFewPoints(n_positions));
    }
    if !(noise_sigma_mm >= 0.0) || !(cube_mm > 0.0) {
        return Err(SimError::InvalidParameter("noise sigma must be >= 0 and cube > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = cube_mm / 2.0;
    let k = (n_positions as f64).cbrt().round() as usize;
    let robots: Vec<Point3> = if k >= 2 && k * k * k == n_positions {
        let step = cube_mm / (k - 1) as f64;
        let mut v = Vec::with_capacity(n_positions);
        for i in 0..k {
            for j in 0..k {
                for l in 0..k {
                    v.push(Point3::new(-half + step * i as f64, -half + step * j as f64, -half + step * l as f64));
                }
            }
        }
        v
    } else {
        (0..n_positions)
            .map(|_| Point3::new(rng.gen_range(-half..=half), rng.gen_range(-half..=half), rng.gen_range(-half..=half)))
            .collect()
    };
    let truth = camera_to_robot(working_distance_mm);
    let inv = truth.inverse().expect("camera_to_robot is invertible");
    let per_axis = noise_sigma_mm / 3f64.sqrt();
    let normal = Normal::new(0.0, per_axis.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let correspondences = robots
        .into_iter()
        .map(|robot| {
            let mut cam = inv.apply(robot);
            if per_axis > 0.0 {
                cam = cam + Point3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng));
            }
            Correspondence { cam, robot }
        })
        .collect();
    Ok(CalibrationSet { correspondences, camera_to_robot: truth })
}

#[cfg(test)]
mod tests;
