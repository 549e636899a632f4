use super::*;
use crate::calibration::fit_affine;
use crate::geometry::Point2;
use crate::sequence::{read_sequence_from, write_sequence_to, StereoSequence};

fn small(preset: ScenePreset) -> ScenePreset {
    preset.with_size(320, 240)
}

fn traj(seed: u64, v: f64, axes: Axes, duration: f64) -> Trajectory {
    gen_trajectory(TrajectoryParams { seed, velocity_mm_s: v, duration_s: duration, cube_mm: 30.0, axes, fps: 30.0 }).unwrap()
}

/// Bright Gaussian dot at the target origin on a dark plane.
fn marker_texture() -> TextureMap {
    TextureMap::from_fn(-60.0, -60.0, 0.05, 2400, 2400, |x, y| 20.0 + 200.0 * (-(x * x + y * y) / (2.0 * 0.3 * 0.3)).exp())
}

fn centroid(f: &Frame) -> Point2 {
    let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
    for y in 0..f.height() as usize {
        for x in 0..f.width() as usize {
            let w = (f.luma(x, y) as f64 - 20.0).max(0.0);
            sx += w * x as f64;
            sy += w * y as f64;
            sw += w;
        }
    }
    Point2::new(sx / sw, sy / sw)
}

#[test]
fn static_scene_frames_are_identical() {
    let t = Trajectory::stationary(4, 30.0);
    let r = render_sequence(&small(ScenePreset::feature_rich()), &t, None).unwrap();
    let f0 = r.stereo_frame(0).unwrap();
    for i in 1..4 {
        assert_eq!(r.stereo_frame(i).unwrap(), f0);
    }
    assert_ne!(f0.left, f0.right);
}

#[test]
fn right_view_is_shifted_by_disparity() {
    // Plane at Z = 100 mm with fx = 1000 and B = 5 mm: d = 50 px.
    let t = Trajectory::stationary(1, 30.0);
    let r = render_sequence(&small(ScenePreset::feature_rich()), &t, None).unwrap();
    let f = r.stereo_frame(0).unwrap();
    let mut max_diff = 0i32;
    for y in 0..240 {
        for x in 0..200 {
            let l = f.left.data()[y * 320 + x + 50] as i32;
            let rr = f.right.data()[y * 320 + x] as i32;
            max_diff = max_diff.max((l - rr).abs());
        }
    }
    assert!(max_diff <= 1, "max diff {max_diff}");
}

#[test]
fn ground_truth_projects_onto_rendered_marker() {
    let preset = small(ScenePreset::feature_rich());
    let t = traj(11, 40.0, Axes::XYZ, 1.0);
    let r = SceneRenderer::with_texture(preset.clone(), t.clone(), marker_texture(), None).unwrap();
    for k in [0, 7, 15, 30] {
        let cam = target_in_camera(preset.working_distance_mm, t.samples[k]);
        let (pl, pr) = preset.rig.project(cam).unwrap();
        let f = r.stereo_frame(k).unwrap();
        let (cl, cr) = (centroid(&f.left), centroid(&f.right));
        assert!((cl.x - pl.x).abs() < 0.5 && (cl.y - pl.y).abs() < 0.5, "frame {k}: {cl:?} vs {pl:?}");
        assert!((cr.x - pr.x).abs() < 0.5 && (cr.y - pr.y).abs() < 0.5, "frame {k}: {cr:?} vs {pr:?}");
    }
}

#[test]
fn full_mask_blanks_every_frame() {
    let preset = small(ScenePreset::feature_rich());
    let mask = Mask::from_fn(320, 240, |_, _| 0);
    let r = render_sequence(&preset, &traj(1, 10.0, Axes::Z, 0.2), Some(mask)).unwrap();
    for i in 0..r.len() {
        let f = r.stereo_frame(i).unwrap();
        assert!(f.left.data().iter().chain(f.right.data()).all(|&v| v == 128));
    }
}

#[test]
fn partial_mask_only_touches_dark_pixels() {
    let preset = small(ScenePreset::feature_rich());
    let t = Trajectory::stationary(1, 30.0);
    let mask = Mask::from_fn(320, 240, |x, _| if x < 100 { 10 } else { 200 });
    let plain = render_sequence(&preset, &t, None).unwrap().stereo_frame(0).unwrap();
    let masked = render_sequence(&preset, &t, Some(mask)).unwrap().stereo_frame(0).unwrap();
    for y in 0..240 {
        for x in 0..320 {
            let i = y * 320 + x;
            if x < 100 {
                assert_eq!(masked.left.data()[i], 128);
            } else {
                assert_eq!(masked.left.data()[i], plain.left.data()[i]);
            }
        }
    }
}

#[test]
fn mask_dimensions_checked() {
    assert!(matches!(Mask::new(4, 4, vec![0; 15]), Err(SimError::DimensionMismatch { .. })));
    let preset = small(ScenePreset::feature_rich());
    let mask = Mask::from_fn(10, 10, |_, _| 0);
    assert!(matches!(render_sequence(&preset, &Trajectory::stationary(1, 30.0), Some(mask)), Err(SimError::DimensionMismatch { .. })));
}

#[test]
fn rendering_is_deterministic_and_round_trips() {
    let preset = ScenePreset { motion_blur: true, pixel_noise_sigma: 2.0, ..small(ScenePreset::feature_poor()) };
    let t = traj(5, 60.0, Axes::XYZ, 0.2);
    let encode = || {
        let mut buf = Vec::new();
        write_sequence_to(&render_sequence(&preset, &t, None).unwrap(), &mut buf).unwrap();
        buf
    };
    let a = encode();
    assert_eq!(a, encode());
    let back = read_sequence_from(&a).unwrap();
    let direct = StereoSequence::collect(&render_sequence(&preset, &t, None).unwrap()).unwrap();
    assert_eq!(back, direct);
    assert_eq!(back.info.metadata.preset, "feature-poor");
    assert_eq!(back.info.metadata.camera_to_robot, Some(camera_to_robot(100.0)));
}

#[test]
fn seed_changes_texture() {
    let preset = small(ScenePreset::feature_rich());
    let mk = |seed| {
        let mut t = Trajectory::stationary(1, 30.0);
        t.params.seed = seed;
        render_sequence(&preset, &t, None).unwrap().stereo_frame(0).unwrap()
    };
    assert_ne!(mk(1).left, mk(2).left);
}

#[test]
fn motion_blur_smooths_moving_frames() {
    let base = small(ScenePreset::feature_rich());
    let t = traj(3, 80.0, Axes::XY, 0.3);
    let sharp = render_sequence(&base, &t, None).unwrap().stereo_frame(5).unwrap();
    let blurred = render_sequence(&ScenePreset { motion_blur: true, ..base }, &t, None).unwrap().stereo_frame(5).unwrap();
    let grad = |f: &Frame| -> f64 {
        let d = f.data();
        d.windows(2).map(|w| (w[0] as f64 - w[1] as f64).abs()).sum()
    };
    assert!(grad(&blurred.left) < 0.9 * grad(&sharp.left));
}

#[test]
fn feature_poor_has_less_contrast() {
    let t = Trajectory::stationary(1, 30.0);
    let std = |p: ScenePreset| {
        let f = render_sequence(&small(p), &t, None).unwrap().stereo_frame(0).unwrap();
        let d = f.left.data();
        let m = d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64;
        (d.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / d.len() as f64).sqrt()
    };
    let mut poor = ScenePreset::feature_poor();
    poor.specular = None;
    assert!(std(ScenePreset::feature_rich()) > 2.0 * std(poor));
}

#[test]
fn rgb_rendering_has_equal_channels() {
    let preset = ScenePreset { channels: 3, ..small(ScenePreset::feature_rich()) };
    let f = render_sequence(&preset, &Trajectory::stationary(1, 30.0), None).unwrap().stereo_frame(0).unwrap();
    assert!(f.left.data().chunks(3).all(|c| c[0] == c[1] && c[1] == c[2]));
}

#[test]
fn preset_validation() {
    assert!(ScenePreset::feature_rich().validate().is_ok());
    assert!(ScenePreset { working_distance_mm: 40.0, ..ScenePreset::feature_rich() }.validate().is_err());
    assert!(ScenePreset { fps: 0.0, ..ScenePreset::feature_rich() }.validate().is_err());
    assert!(ScenePreset { channels: 2, ..ScenePreset::feature_rich() }.validate().is_err());
    assert!(ScenePreset::by_name("feature-poor").is_some());
    assert!(ScenePreset::by_name("nope").is_none());
}

#[test]
fn ground_truth_csv_round_trip() {
    let t = traj(8, 25.0, Axes::XYZ, 1.0);
    let rows = ground_truth(&t);
    let mut buf = Vec::new();
    write_ground_truth(&mut buf, &rows).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("frame,t_s,x_mm,y_mm,z_mm\n0,0.000000,0.000000,0.000000,0.000000\n"));
    let back = read_ground_truth(&buf[..]).unwrap();
    assert_eq!(back.len(), rows.len());
    for (a, b) in back.iter().zip(&rows) {
        assert_eq!(a.frame, b.frame);
        assert!((a.pos() - b.pos()).norm() < 1e-6);
    }
}

#[test]
fn calibration_set_recovers_generator() {
    let set = gen_calibration_set(3, 125, 0.0, 30.0, 100.0).unwrap();
    assert_eq!(set.correspondences.len(), 125);
    let rep = fit_affine(&set.correspondences).unwrap();
    assert!((rep.transform.linear - set.camera_to_robot.linear).abs().max() < 1e-9);
    assert!((rep.transform.translation - set.camera_to_robot.translation).abs().max() < 1e-9);
    assert!(rep.residual.max_mm <= 1e-9);
    let cloud = gen_calibration_set(3, 50, 0.0, 30.0, 100.0).unwrap();
    assert_eq!(cloud.correspondences.len(), 50);
    assert!(matches!(gen_calibration_set(0, 3, 0.0, 30.0, 100.0), Err(SimError::TooFewPoints(3))));
}

#[test]
fn calibration_noise_has_requested_rms() {
    let set = gen_calibration_set(4, 3000, 0.1, 30.0, 100.0).unwrap();
    let inv = set.camera_to_robot.inverse().unwrap();
    let ms: f64 = set.correspondences.iter().map(|c| (c.cam - inv.apply(c.robot)).norm().powi(2)).sum::<f64>() / 3000.0;
    assert!((ms.sqrt() - 0.1).abs() < 0.005, "rms {}", ms.sqrt());
}
