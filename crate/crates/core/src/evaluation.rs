//! Path comparison metrics, velocity and grid-density sweeps, and the
//! throughput benchmark.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::AffineTransform3D;
use crate::geometry::Point3;
use crate::pipeline::{self, PipelineConfig, PipelineError, PipelineStats, TrackedPath3D};
use crate::sequence::FrameSource;
use crate::simulator::{self, gen_trajectory, Axes, GroundTruthRow, ScenePreset, SimError, TrajectoryParams};
use crate::trackers::{PointTracker, ReferenceTracker};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("tracked path has {tracked} frames but ground truth has {truth}")]
    LengthMismatch { tracked: usize, truth: usize },
    #[error("empty path")]
    EmptyPath,
    #[error("tracked position at frame 0 is not finite; nothing to measure displacement from")]
    NoReference,
    #[error("sequence has {frames} frames; need more than the {warmup} warm-up frames")]
    SequenceTooShort { frames: usize, warmup: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("sweep CSV: {0}")]
    Parse(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Displacement error of a tracked path against ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub mean_euclidean_mm: f64,
    /// Population standard deviation of the per-frame distances.
    pub std_mm: f64,
    pub max_mm: f64,
    pub median_mm: f64,
    /// Mean absolute error per axis, whichever axes are evaluated.
    pub mean_x_mm: f64,
    pub mean_y_mm: f64,
    pub mean_z_mm: f64,
    pub axes: Axes,
    pub n_frames: usize,
    /// Frames skipped because the tracked position was not finite.
    pub n_excluded: usize,
}

/// One compared frame: both positions relative to frame 0, in the truth frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameError {
    pub frame: usize,
    pub t_s: f64,
    pub tracked: Point3,
    pub truth: Point3,
    pub error_mm: f64,
}

/// Truth position at `t`, linear between samples and clamped at the ends.
fn truth_at(truth: &[GroundTruthRow], t: f64) -> Point3 {
    let k = truth.partition_point(|r| r.t_s <= t);
    if k == 0 {
        return truth[0].pos();
    }
    let a = &truth[k - 1];
    if a.t_s == t || k == truth.len() {
        return a.pos();
    }
    let b = &truth[k];
    let u = (t - a.t_s) / (b.t_s - a.t_s);
    a.pos() + (b.pos() - a.pos()) * u
}

/// Per-frame comparison behind [`compare_paths`].
pub fn frame_errors(
    tracked: &TrackedPath3D,
    truth: &[GroundTruthRow],
    transform: Option<&AffineTransform3D>,
    axes: Axes,
    resample: bool,
) -> Result<Vec<FrameError>, EvalError> {
    if tracked.is_empty() || truth.is_empty() {
        return Err(EvalError::EmptyPath);
    }
    let truth_pos: Vec<Point3> = if resample {
        tracked.frames.iter().map(|f| truth_at(truth, f.t_s)).collect()
    } else if tracked.len() != truth.len() {
        return Err(EvalError::LengthMismatch { tracked: tracked.len(), truth: truth.len() });
    } else {
        truth.iter().map(GroundTruthRow::pos).collect()
    };
    let map = |p: Point3| transform.map_or(p, |t| t.apply(p));
    let origin = map(tracked.frames[0].position);
    if !origin.is_finite() {
        return Err(EvalError::NoReference);
    }
    let truth_origin = truth_pos[0];
    let mask = axes.mask();
    Ok(tracked
        .frames
        .iter()
        .zip(&truth_pos)
        .filter_map(|(f, &g)| {
            let p = map(f.position);
            if !p.is_finite() {
                return None;
            }
            let (rel, rel_truth) = (p - origin, g - truth_origin);
            let d = rel - rel_truth;
            let sq: f64 = [d.x, d.y, d.z].iter().zip(mask).filter(|(_, m)| *m).map(|(v, _)| v * v).sum();
            Some(FrameError { frame: f.frame, t_s: f.t_s, tracked: rel, truth: rel_truth, error_mm: sq.sqrt() })
        })
        .collect())
}

/// Summarizes per-frame errors.
pub fn summarize(errors: &[FrameError], axes: Axes, n_excluded: usize) -> Result<ErrorReport, EvalError> {
    if errors.is_empty() {
        return Err(EvalError::EmptyPath);
    }
    let n = errors.len() as f64;
    let dist: Vec<f64> = errors.iter().map(|e| e.error_mm).collect();
    let mean = dist.iter().sum::<f64>() / n;
    let var = dist.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
    let mut sorted = dist.clone();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let median = if m % 2 == 1 { sorted[m / 2] } else { 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]) };
    let axis_mean = |f: fn(&Point3) -> f64| errors.iter().map(|e| f(&(e.tracked - e.truth)).abs()).sum::<f64>() / n;
    Ok(ErrorReport {
        mean_euclidean_mm: mean,
        std_mm: var.sqrt(),
        max_mm: sorted[m - 1],
        median_mm: median,
        mean_x_mm: axis_mean(|p| p.x),
        mean_y_mm: axis_mean(|p| p.y),
        mean_z_mm: axis_mean(|p| p.z),
        axes,
        n_frames: errors.len(),
        n_excluded,
    })
}

/// Maps `tracked` through `transform` (camera to truth frame), relativizes
/// both paths to frame 0 and measures the distance over `axes`. With
/// `resample`, truth is interpolated at the tracked timestamps; otherwise
/// frame counts must match.
pub fn compare_paths(
    tracked: &TrackedPath3D,
    truth: &[GroundTruthRow],
    transform: Option<&AffineTransform3D>,
    axes: Axes,
    resample: bool,
) -> Result<ErrorReport, EvalError> {
    let errors = frame_errors(tracked, truth, transform, axes, resample)?;
    summarize(&errors, axes, tracked.len() - errors.len())
}

/// Shared settings for sweep cells.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    pub preset: ScenePreset,
    pub pipeline: PipelineConfig,
    pub duration_s: f64,
    pub cube_mm: f64,
    pub base_seed: u64,
    pub trials: usize,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    /// Writes each cell's tracked path and ground truth here when set.
    pub dump_dir: Option<PathBuf>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            preset: ScenePreset::feature_rich(),
            pipeline: PipelineConfig::default(),
            duration_s: 30.0,
            cube_mm: 30.0,
            base_seed: 0,
            trials: 3,
            jobs: 0,
            dump_dir: None,
        }
    }
}

pub const DEFAULT_VELOCITIES: [f64; 8] = [10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0];
pub const DEFAULT_GRID_SIZES: [usize; 8] = [1, 2, 3, 4, 5, 6, 8, 10];
pub const DENSITY_VELOCITY_MM_S: f64 = 50.0;

/// Trajectory seed of one sweep cell.
pub fn cell_seed(base_seed: u64, velocity_mm_s: f64, trial: usize) -> u64 {
    base_seed * 1000 + velocity_mm_s.round() as u64 * 10 + trial as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub stage: Axes,
    pub velocity_mm_s: f64,
    pub seed: u64,
    pub grid_n: usize,
    /// `None` when the cell failed; the reason is in `flags`.
    pub report: Option<ErrorReport>,
    /// Tracking throughput, excluding scene rendering.
    pub fps: f64,
    pub flags: String,
}

impl SweepRecord {
    pub fn failed(&self) -> bool {
        self.report.is_none()
    }
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    stage: Axes,
    velocity: f64,
    trial: usize,
    grid_n: usize,
}

fn cell_flags(path: &TrackedPath3D) -> String {
    let lost = path.lost_frames();
    let errors = path.frames.iter().filter(|f| f.flags.tracker_error).count();
    let mut parts = Vec::new();
    if lost > 0 {
        parts.push(format!("lost={lost}"));
    }
    if errors > 0 {
        parts.push(format!("tracker_error={errors}"));
    }
    parts.join(";")
}

fn tracking_fps(stats: &PipelineStats) -> f64 {
    let busy = stats.total.saturating_sub(stats.fetch).as_secs_f64();
    if busy > 0.0 {
        stats.frames as f64 / busy
    } else {
        f64::INFINITY
    }
}

/// File stem under which a cell's per-frame data is dumped.
pub fn cell_stem(stage: Axes, velocity_mm_s: f64, seed: u64, grid_n: usize) -> String {
    format!("{}_v{}_s{}_g{}", stage.as_str(), velocity_mm_s, seed, grid_n)
}

fn run_cell(cell: Cell, cfg: &SweepConfig) -> SweepRecord {
    let seed = cell_seed(cfg.base_seed, cell.velocity, cell.trial);
    let mut rec = SweepRecord {
        stage: cell.stage,
        velocity_mm_s: cell.velocity,
        seed,
        grid_n: cell.grid_n,
        report: None,
        fps: f64::NAN,
        flags: String::new(),
    };
    match evaluate_cell(cell, seed, cfg) {
        Ok((report, fps, flags)) => {
            rec.report = Some(report);
            rec.fps = fps;
            rec.flags = flags;
        }
        Err(e) => rec.flags = format!("error={e}"),
    }
    rec
}

fn evaluate_cell(cell: Cell, seed: u64, cfg: &SweepConfig) -> Result<(ErrorReport, f64, String), EvalError> {
    let traj = gen_trajectory(TrajectoryParams {
        seed,
        velocity_mm_s: cell.velocity,
        duration_s: cfg.duration_s,
        cube_mm: cfg.cube_mm,
        axes: cell.stage,
        fps: cfg.preset.fps,
    })?;
    let truth = simulator::ground_truth(&traj);
    let scene = simulator::render_sequence(&cfg.preset, &traj, None)?;
    let pcfg = PipelineConfig { grid_n: cell.grid_n, ..cfg.pipeline };
    let (path, stats) = pipeline::run(&scene, &pcfg, &mut ReferenceTracker::new(pcfg.tracker))?;
    if let Some(dir) = &cfg.dump_dir {
        let stem = cell_stem(cell.stage, cell.velocity, seed, cell.grid_n);
        pipeline::write_tracked_csv(std::fs::File::create(dir.join(format!("{stem}_tracked.csv")))?, &path)?;
        simulator::write_ground_truth(std::fs::File::create(dir.join(format!("{stem}_gt.csv")))?, &truth)?;
    }
    let transform = simulator::camera_to_robot(cfg.preset.working_distance_mm);
    let report = compare_paths(&path, &truth, Some(&transform), cell.stage, false)?;
    Ok((report, tracking_fps(&stats), cell_flags(&path)))
}

fn run_cells(cells: Vec<Cell>, cfg: &SweepConfig) -> Result<Vec<SweepRecord>, EvalError> {
    if let Some(dir) = &cfg.dump_dir {
        std::fs::create_dir_all(dir)?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| EvalError::InvalidParameter(e.to_string()))?;
    let mut rows: Vec<SweepRecord> = pool.install(|| cells.par_iter().map(|&c| run_cell(c, cfg)).collect());
    rows.sort_by(|a, b| {
        (a.stage as u8, a.velocity_mm_s, a.seed, a.grid_n)
            .partial_cmp(&(b.stage as u8, b.velocity_mm_s, b.seed, b.grid_n))
            .expect("finite velocities")
    });
    Ok(rows)
}

fn check_velocities(velocities: &[f64]) -> Result<(), EvalError> {
    if velocities.is_empty() {
        return Err(EvalError::InvalidParameter("no velocities given".into()));
    }
    if let Some(v) = velocities.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(EvalError::InvalidParameter(format!("velocity {v} must be positive")));
    }
    Ok(())
}

/// One cell per (velocity, trial) along `stage`, at the configured grid size.
pub fn run_stage_sweep(stage: Axes, velocities: &[f64], cfg: &SweepConfig) -> Result<Vec<SweepRecord>, EvalError> {
    check_velocities(velocities)?;
    let grid_n = cfg.pipeline.grid_n;
    let cells = velocities
        .iter()
        .flat_map(|&velocity| (0..cfg.trials).map(move |trial| Cell { stage, velocity, trial, grid_n }))
        .collect();
    run_cells(cells, cfg)
}

/// One cell per (grid size, trial) at a fixed velocity.
pub fn run_density_sweep(grid_sizes: &[usize], velocity_mm_s: f64, stage: Axes, cfg: &SweepConfig) -> Result<Vec<SweepRecord>, EvalError> {
    check_velocities(&[velocity_mm_s])?;
    if grid_sizes.is_empty() {
        return Err(EvalError::InvalidParameter("no grid sizes given".into()));
    }
    if let Some(g) = grid_sizes.iter().find(|g| !(1..=10).contains(*g)) {
        return Err(EvalError::InvalidParameter(format!("grid size {g} outside 1..=10")));
    }
    let cells = grid_sizes
        .iter()
        .flat_map(|&grid_n| (0..cfg.trials).map(move |trial| Cell { stage, velocity: velocity_mm_s, trial, grid_n }))
        .collect();
    run_cells(cells, cfg)
}

pub const SWEEP_CSV_HEADER: &str =
    "stage,velocity_mm_s,seed,grid_n,mean_mm,std_mm,max_mm,median_mm,mean_x_mm,mean_y_mm,mean_z_mm,fps,flags";

/// Failed cells leave the metric columns empty.
pub fn write_sweep_csv<W: Write>(w: W, rows: &[SweepRecord]) -> Result<(), EvalError> {
    let mut out = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| EvalError::Parse(e.to_string());
    out.write_record(SWEEP_CSV_HEADER.split(',')).map_err(csv_err)?;
    for r in rows {
        let mut fields = vec![r.stage.to_string(), r.velocity_mm_s.to_string(), r.seed.to_string(), r.grid_n.to_string()];
        match &r.report {
            Some(e) => fields.extend(
                [e.mean_euclidean_mm, e.std_mm, e.max_mm, e.median_mm, e.mean_x_mm, e.mean_y_mm, e.mean_z_mm]
                    .iter()
                    .map(|v| format!("{v:.6}")),
            ),
            None => fields.extend(std::iter::repeat(String::new()).take(7)),
        }
        fields.push(if r.fps.is_finite() { format!("{:.3}", r.fps) } else { String::new() });
        fields.push(r.flags.clone());
        out.write_record(&fields).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads rows back; report fields hold the (rounded) CSV values and the
/// frame counts are not recoverable, so they read as 0.
pub fn read_sweep_csv<R: Read>(r: R) -> Result<Vec<SweepRecord>, EvalError> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers().map_err(|e| EvalError::Parse(e.to_string()))?.iter().collect::<Vec<_>>().join(",");
    if header != SWEEP_CSV_HEADER {
        return Err(EvalError::Parse(format!("unexpected header '{header}'")));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| EvalError::Parse(e.to_string()))?;
        let bad = |i: usize| EvalError::Parse(format!("column {i}: '{}'", &rec[i]));
        let num = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(i));
        let stage: Axes = rec[0].parse().map_err(|_| bad(0))?;
        let report = if rec[4].is_empty() {
            None
        } else {
            Some(ErrorReport {
                mean_euclidean_mm: num(4)?,
                std_mm: num(5)?,
                max_mm: num(6)?,
                median_mm: num(7)?,
                mean_x_mm: num(8)?,
                mean_y_mm: num(9)?,
                mean_z_mm: num(10)?,
                axes: stage,
                n_frames: 0,
                n_excluded: 0,
            })
        };
        rows.push(SweepRecord {
            stage,
            velocity_mm_s: num(1)?,
            seed: rec[2].parse().map_err(|_| bad(2))?,
            grid_n: rec[3].parse().map_err(|_| bad(3))?,
            report,
            fps: if rec[11].is_empty() { f64::NAN } else { num(11)? },
            flags: rec[12].to_string(),
        });
    }
    Ok(rows)
}

/// Mean error per velocity over the successful cells, by ascending velocity.
pub fn mean_by_velocity(rows: &[SweepRecord]) -> Vec<(f64, f64)> {
    let mut acc: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for r in rows {
        if let Some(e) = &r.report {
            let slot = acc.entry(r.velocity_mm_s.to_bits()).or_default();
            slot.0 += e.mean_euclidean_mm;
            slot.1 += 1;
        }
    }
    acc.into_iter().map(|(k, (s, n))| (f64::from_bits(k), s / n as f64)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    /// Frames per second after warm-up.
    pub fps: f64,
    pub frames: usize,
    pub warmup_frames: usize,
    pub elapsed: Duration,
    pub stats: PipelineStats,
}

/// Wall-clock throughput of the pipeline over `source`, counting frames
/// finalized after the first `warmup_frames`. For honest numbers the source
/// should already be in memory and nothing else should be running.
pub fn bench_throughput(
    source: &dyn FrameSource,
    config: &PipelineConfig,
    tracker: &mut dyn PointTracker,
    warmup_frames: usize,
) -> Result<BenchReport, EvalError> {
    let n = source.len();
    if n <= warmup_frames {
        return Err(EvalError::SequenceTooShort { frames: n, warmup: warmup_frames });
    }
    let started = Instant::now();
    let mut warm_at: Option<Instant> = None;
    let mut last = started;
    let (_, stats) = pipeline::run_with(source, config, tracker, |rec| {
        let now = Instant::now();
        if warmup_frames > 0 && rec.frame + 1 == warmup_frames {
            warm_at = Some(now);
        }
        last = now;
    })?;
    let from = warm_at.unwrap_or(started);
    let elapsed = last.duration_since(from);
    let frames = n - warmup_frames;
    Ok(BenchReport { fps: frames as f64 / elapsed.as_secs_f64(), frames, warmup_frames, elapsed, stats })
}

/// Writes `value` as pretty JSON.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), EvalError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| EvalError::Parse(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests;
