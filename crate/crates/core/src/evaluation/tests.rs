use proptest::prelude::*;

use super::*;
use crate::pipeline::{FrameFlags, FrameRecord};
use crate::sequence::StereoSequence;
use crate::simulator::Trajectory;
use crate::trackers::TrackerConfig;

fn path_of(points: &[Point3]) -> TrackedPath3D {
    TrackedPath3D {
        frames: points
            .iter()
            .enumerate()
            .map(|(i, &p)| FrameRecord { frame: i, t_s: i as f64 / 30.0, position: p, points: vec![], n_visible: 1, flags: FrameFlags::default() })
            .collect(),
    }
}

fn truth_of(points: &[Point3]) -> Vec<GroundTruthRow> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| GroundTruthRow { frame: i, t_s: i as f64 / 30.0, x_mm: p.x, y_mm: p.y, z_mm: p.z })
        .collect()
}

fn wiggle(n: usize) -> Vec<Point3> {
    (0..n).map(|i| Point3::new((i as f64).sin(), (i as f64 * 0.3).cos(), i as f64 * 0.1)).collect()
}

#[test]
fn identical_paths_have_zero_error() {
    let p = wiggle(20);
    let r = compare_paths(&path_of(&p), &truth_of(&p), None, Axes::XYZ, false).unwrap();
    assert_eq!((r.mean_euclidean_mm, r.std_mm, r.max_mm, r.median_mm), (0.0, 0.0, 0.0, 0.0));
    assert_eq!(r.n_frames, 20);
}

#[test]
fn unit_step_in_z_averages_to_n_minus_one_over_n() {
    let n = 10;
    let truth = wiggle(n);
    let tracked: Vec<Point3> = truth.iter().enumerate().map(|(i, p)| if i == 0 { *p } else { *p + Point3::new(0.0, 0.0, 1.0) }).collect();
    let r = compare_paths(&path_of(&tracked), &truth_of(&truth), None, Axes::Z, false).unwrap();
    assert!((r.mean_euclidean_mm - (n as f64 - 1.0) / n as f64).abs() < 1e-12);
    assert!((r.max_mm - 1.0).abs() < 1e-12);
    assert!((r.median_mm - 1.0).abs() < 1e-12);
    assert!((r.mean_z_mm - 0.9).abs() < 1e-12);
    assert!(r.mean_x_mm < 1e-12);
}

#[test]
fn axis_restriction_ignores_other_axes() {
    let truth = wiggle(15);
    let tracked: Vec<Point3> = truth.iter().enumerate().map(|(i, p)| *p + Point3::new(i as f64, -2.0 * i as f64, 0.0)).collect();
    let z = compare_paths(&path_of(&tracked), &truth_of(&truth), None, Axes::Z, false).unwrap();
    assert_eq!(z.mean_euclidean_mm, 0.0);
    let xy = compare_paths(&path_of(&tracked), &truth_of(&truth), None, Axes::XY, false).unwrap();
    assert!(xy.mean_euclidean_mm > 0.0);
    // per-axis means are reported regardless of the evaluated axes
    assert!(z.mean_x_mm > 0.0);
}

#[test]
fn transform_maps_tracked_into_truth_frame() {
    let robot = wiggle(12);
    let t = simulator::camera_to_robot(100.0);
    let inv = t.inverse().unwrap();
    let cam: Vec<Point3> = robot.iter().map(|&p| inv.apply(p)).collect();
    let r = compare_paths(&path_of(&cam), &truth_of(&robot), Some(&t), Axes::XYZ, false).unwrap();
    assert!(r.max_mm < 1e-12);
    // without it the flipped z axis shows up as error
    assert!(compare_paths(&path_of(&cam), &truth_of(&robot), None, Axes::Z, false).unwrap().max_mm > 0.1);
}

#[test]
fn lengths_must_match_unless_resampling() {
    let p = wiggle(10);
    let err = compare_paths(&path_of(&p), &truth_of(&p[..8]), None, Axes::XYZ, false).unwrap_err();
    assert!(matches!(err, EvalError::LengthMismatch { tracked: 10, truth: 8 }));
    assert!(matches!(compare_paths(&path_of(&[]), &truth_of(&p), None, Axes::Z, true), Err(EvalError::EmptyPath)));
    assert!(matches!(compare_paths(&path_of(&p), &[], None, Axes::Z, true), Err(EvalError::EmptyPath)));
}

#[test]
fn resampling_interpolates_truth_linearly() {
    // truth on a 10 Hz grid moving 1 mm per sample along x; tracked at 30 Hz exact
    let truth: Vec<GroundTruthRow> =
        (0..5).map(|i| GroundTruthRow { frame: i, t_s: i as f64 * 0.1, x_mm: i as f64, y_mm: 0.0, z_mm: 0.0 }).collect();
    let tracked = path_of(&(0..13).map(|i| Point3::new(i as f64 / 3.0, 0.0, 0.0)).collect::<Vec<_>>());
    let r = compare_paths(&tracked, &truth, None, Axes::XYZ, true).unwrap();
    assert!(r.max_mm < 1e-9, "{r:?}");
    // beyond the last truth sample the truth is held
    let long = path_of(&(0..20).map(|i| Point3::new((i as f64 / 3.0).min(4.0), 0.0, 0.0)).collect::<Vec<_>>());
    assert!(compare_paths(&long, &truth, None, Axes::XYZ, true).unwrap().max_mm < 1e-9);
    // aligned grids resample to the samples themselves
    let p = wiggle(9);
    let a = compare_paths(&path_of(&p), &truth_of(&p), None, Axes::XYZ, true).unwrap();
    assert_eq!(a.max_mm, 0.0);
}

#[test]
fn non_finite_frames_are_excluded_and_counted() {
    let truth = wiggle(6);
    let mut tracked = truth.clone();
    tracked[3] = Point3::new(f64::NAN, f64::NAN, f64::NAN);
    let r = compare_paths(&path_of(&tracked), &truth_of(&truth), None, Axes::XYZ, false).unwrap();
    assert_eq!((r.n_frames, r.n_excluded), (5, 1));
    tracked[0] = tracked[3];
    assert!(matches!(compare_paths(&path_of(&tracked), &truth_of(&truth), None, Axes::XYZ, false), Err(EvalError::NoReference)));
}

fn point() -> impl Strategy<Value = Point3> {
    (-50.0f64..50.0, -50.0f64..50.0, 50.0f64..150.0).prop_map(|(x, y, z)| Point3::new(x, y, z))
}

proptest! {
    #[test]
    fn offsets_on_either_path_do_not_change_errors(
        pairs in prop::collection::vec((point(), point()), 1..40),
        a in point(),
        b in point(),
        axes in prop_oneof![Just(Axes::Z), Just(Axes::XY), Just(Axes::XYZ)],
    ) {
        let (tracked, truth): (Vec<Point3>, Vec<Point3>) = pairs.into_iter().unzip();
        let base = compare_paths(&path_of(&tracked), &truth_of(&truth), None, axes, false).unwrap();
        let shifted_t: Vec<Point3> = tracked.iter().map(|&p| p + a).collect();
        let shifted_g: Vec<Point3> = truth.iter().map(|&p| p + b).collect();
        let moved = compare_paths(&path_of(&shifted_t), &truth_of(&shifted_g), None, axes, false).unwrap();
        prop_assert!((base.mean_euclidean_mm - moved.mean_euclidean_mm).abs() < 1e-9);
        prop_assert!((base.max_mm - moved.max_mm).abs() < 1e-9);
        prop_assert!(base.mean_euclidean_mm <= base.max_mm + 1e-12);
        prop_assert!(base.std_mm >= 0.0 && base.median_mm >= 0.0);
    }

    #[test]
    fn summary_matches_brute_force(errs in prop::collection::vec(0.0f64..10.0, 1..50)) {
        let fe: Vec<FrameError> = errs.iter().enumerate().map(|(i, &e)| FrameError {
            frame: i, t_s: 0.0, tracked: Point3::new(e, 0.0, 0.0), truth: Point3::default(), error_mm: e,
        }).collect();
        let r = summarize(&fe, Axes::XYZ, 0).unwrap();
        let n = errs.len() as f64;
        let mean = errs.iter().sum::<f64>() / n;
        prop_assert!((r.mean_euclidean_mm - mean).abs() < 1e-12);
        prop_assert!((r.max_mm - errs.iter().cloned().fold(0.0, f64::max)).abs() < 1e-12);
        let var = errs.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
        prop_assert!((r.std_mm - var.sqrt()).abs() < 1e-9);
        prop_assert!((r.mean_x_mm - mean).abs() < 1e-12);
    }
}

#[test]
fn cell_seeds_follow_the_documented_formula() {
    assert_eq!(cell_seed(0, 10.0, 0), 100);
    assert_eq!(cell_seed(2, 80.0, 2), 2802);
    assert_eq!(cell_seed(1, 35.0, 1), 1351);
}

fn small_sweep() -> SweepConfig {
    SweepConfig {
        preset: ScenePreset::feature_rich().with_size(320, 240),
        pipeline: PipelineConfig {
            tracker: TrackerConfig { search_radius: 12, stereo_disparity_range: (30, 80), ..Default::default() },
            ..Default::default()
        },
        duration_s: 0.3,
        cube_mm: 6.0,
        trials: 2,
        jobs: 2,
        ..Default::default()
    }
}

#[test]
fn stage_sweep_produces_one_sorted_row_per_cell() {
    let cfg = small_sweep();
    let rows = run_stage_sweep(Axes::Z, &[20.0, 10.0], &cfg).unwrap();
    assert_eq!(rows.len(), 4);
    let keys: Vec<(f64, u64)> = rows.iter().map(|r| (r.velocity_mm_s, r.seed)).collect();
    assert_eq!(keys, vec![(10.0, 100), (10.0, 101), (20.0, 200), (20.0, 201)]);
    for r in &rows {
        let rep = r.report.as_ref().expect(&r.flags);
        assert!(rep.mean_euclidean_mm < 0.5, "{r:?}");
        assert!(r.fps > 0.0);
        assert_eq!(rep.axes, Axes::Z);
    }
    // completion order does not matter
    let serial = run_stage_sweep(Axes::Z, &[20.0, 10.0], &SweepConfig { jobs: 1, ..cfg }).unwrap();
    let strip = |v: &[SweepRecord]| v.iter().map(|r| (r.seed, r.report.map(|e| e.mean_euclidean_mm))).collect::<Vec<_>>();
    assert_eq!(strip(&rows), strip(&serial));
}

#[test]
fn z_stage_trajectories_have_no_lateral_motion() {
    for seed in 0..5 {
        let t = gen_trajectory(TrajectoryParams { seed, velocity_mm_s: 40.0, duration_s: 2.0, cube_mm: 30.0, axes: Axes::Z, fps: 30.0 }).unwrap();
        assert!(simulator::ground_truth(&t).iter().all(|r| r.x_mm == 0.0 && r.y_mm == 0.0));
    }
}

#[test]
fn failing_cells_are_recorded_and_the_sweep_continues() {
    // an invalid duration fails every cell at trajectory generation
    let cfg = SweepConfig { duration_s: -1.0, ..small_sweep() };
    let rows = run_stage_sweep(Axes::XYZ, &[10.0], &cfg).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.failed() && r.flags.starts_with("error=")));
    let mut buf = Vec::new();
    write_sweep_csv(&mut buf, &rows).unwrap();
    let back = read_sweep_csv(&buf[..]).unwrap();
    assert!(back.iter().all(|r| r.report.is_none() && r.fps.is_nan()));
    assert!(run_stage_sweep(Axes::Z, &[], &small_sweep()).is_err());
    assert!(run_stage_sweep(Axes::Z, &[0.0], &small_sweep()).is_err());
}

#[test]
fn density_sweep_single_point_equals_direct_pipeline() {
    let cfg = SweepConfig { trials: 1, ..small_sweep() };
    let rows = run_density_sweep(&[1, 2], 10.0, Axes::XYZ, &cfg).unwrap();
    assert_eq!(rows.iter().map(|r| r.grid_n).collect::<Vec<_>>(), vec![1, 2]);

    let seed = cell_seed(0, 10.0, 0);
    let traj = gen_trajectory(TrajectoryParams { seed, velocity_mm_s: 10.0, duration_s: 0.3, cube_mm: 6.0, axes: Axes::XYZ, fps: 30.0 }).unwrap();
    let scene = simulator::render_sequence(&cfg.preset, &traj, None).unwrap();
    let pcfg = PipelineConfig { grid_n: 1, ..cfg.pipeline };
    let (path, _) = pipeline::run(&scene, &pcfg, &mut ReferenceTracker::new(pcfg.tracker)).unwrap();
    let direct = compare_paths(&path, &simulator::ground_truth(&traj), Some(&simulator::camera_to_robot(100.0)), Axes::XYZ, false).unwrap();
    assert_eq!(rows[0].report.unwrap(), direct);

    assert!(run_density_sweep(&[0], 50.0, Axes::XYZ, &cfg).is_err());
    assert!(run_density_sweep(&[11], 50.0, Axes::XYZ, &cfg).is_err());
    assert!(run_density_sweep(&[], 50.0, Axes::XYZ, &cfg).is_err());
}

#[test]
fn sweep_csv_header_is_pinned_and_round_trips() {
    assert_eq!(
        SWEEP_CSV_HEADER,
        "stage,velocity_mm_s,seed,grid_n,mean_mm,std_mm,max_mm,median_mm,mean_x_mm,mean_y_mm,mean_z_mm,fps,flags"
    );
    let row = SweepRecord {
        stage: Axes::XY,
        velocity_mm_s: 30.0,
        seed: 302,
        grid_n: 3,
        report: Some(ErrorReport {
            mean_euclidean_mm: 0.25,
            std_mm: 0.125,
            max_mm: 1.5,
            median_mm: 0.2,
            mean_x_mm: 0.1,
            mean_y_mm: 0.2,
            mean_z_mm: 0.0,
            axes: Axes::XY,
            n_frames: 0,
            n_excluded: 0,
        }),
        fps: 120.5,
        flags: "lost=2;tracker_error=1".into(),
    };
    let mut buf = Vec::new();
    write_sweep_csv(&mut buf, std::slice::from_ref(&row)).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert_eq!(text.lines().nth(1).unwrap(), "xy,30,302,3,0.250000,0.125000,1.500000,0.200000,0.100000,0.200000,0.000000,120.500,lost=2;tracker_error=1");
    assert_eq!(read_sweep_csv(&buf[..]).unwrap(), vec![row]);
    assert!(read_sweep_csv(&b"stage,velocity\n"[..]).is_err());
}

#[test]
fn mean_by_velocity_skips_failures() {
    let mk = |v: f64, m: Option<f64>| SweepRecord {
        stage: Axes::Z,
        velocity_mm_s: v,
        seed: 0,
        grid_n: 3,
        report: m.map(|m| ErrorReport {
            mean_euclidean_mm: m,
            std_mm: 0.0,
            max_mm: m,
            median_mm: m,
            mean_x_mm: 0.0,
            mean_y_mm: 0.0,
            mean_z_mm: m,
            axes: Axes::Z,
            n_frames: 1,
            n_excluded: 0,
        }),
        fps: 1.0,
        flags: String::new(),
    };
    let rows = [mk(20.0, Some(1.0)), mk(10.0, Some(2.0)), mk(10.0, Some(4.0)), mk(20.0, None)];
    assert_eq!(mean_by_velocity(&rows), vec![(10.0, 3.0), (20.0, 1.0)]);
}

#[test]
fn bench_reports_throughput_and_stage_counts() {
    let preset = ScenePreset::feature_rich().with_size(320, 240);
    let seq = StereoSequence::collect(&simulator::render_sequence(&preset, &Trajectory::stationary(24, 30.0), None).unwrap()).unwrap();
    let cfg = small_sweep().pipeline;
    let one = bench_throughput(&seq, &cfg, &mut ReferenceTracker::new(cfg.tracker), 4).unwrap();
    assert!(one.fps > 0.0 && one.fps.is_finite());
    assert_eq!(one.frames, 20);
    assert_eq!(one.stats.stereo_calls, 24);
    let half = PipelineConfig { stereo_every: 2, ..cfg };
    let two = bench_throughput(&seq, &half, &mut ReferenceTracker::new(cfg.tracker), 4).unwrap();
    assert_eq!(two.stats.stereo_calls, 12);
    assert!(matches!(
        bench_throughput(&seq, &cfg, &mut ReferenceTracker::new(cfg.tracker), 24),
        Err(EvalError::SequenceTooShort { frames: 24, warmup: 24 })
    ));
}

#[test]
fn dumps_allow_independent_recomputation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SweepConfig { trials: 1, dump_dir: Some(dir.path().join("frames")), ..small_sweep() };
    let rows = run_stage_sweep(Axes::XYZ, &[10.0], &cfg).unwrap();
    let r = &rows[0];
    let stem = cell_stem(r.stage, r.velocity_mm_s, r.seed, r.grid_n);
    let tracked = pipeline::read_tracked_csv(std::fs::File::open(dir.path().join(format!("frames/{stem}_tracked.csv"))).unwrap()).unwrap();
    let truth = simulator::read_ground_truth(std::fs::File::open(dir.path().join(format!("frames/{stem}_gt.csv"))).unwrap()).unwrap();
    let again = compare_paths(&tracked, &truth, Some(&simulator::camera_to_robot(100.0)), Axes::XYZ, false).unwrap();
    assert!((again.mean_euclidean_mm - r.report.unwrap().mean_euclidean_mm).abs() < 1e-5);
}
