//! End-to-end 3D tracking: sliding-window temporal tracking in the left
//! view, stereo matching into the right view, per-point triangulation and
//! component-wise median fusion.

use std::collections::VecDeque;
use std::fmt;
use std::io::{Read, Write};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::Frame;
use crate::geometry::{disparity_of, Point2, Point3, StereoRig};
use crate::sequence::{FrameSource, SequenceError, StereoFrame};
use crate::trackers::{make_grid, PointTrack, PointTracker, QueryPoint, TrackError, TrackWindow, TrackerConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("sequence has no frames")]
    EmptySequence,
    #[error("frame {width}x{height} is smaller than the {template_px} px template")]
    FrameTooSmall { width: u32, height: u32, template_px: u32 },
    #[error("invalid pipeline configuration: {0}")]
    InvalidConfig(String),
    #[error("configured rig {configured:?} differs from sequence rig {sequence:?}")]
    RigMismatch { configured: StereoRig, sequence: StereoRig },
    #[error("cannot fuse an empty ensemble")]
    EmptyEnsemble,
    #[error("path is empty")]
    EmptyPath,
    #[error("malformed tracked-path CSV: {0}")]
    Parse(String),
    #[error(transparent)]
    Sequence(#[from] SequenceError),
    #[error(transparent)]
    Track(#[from] TrackError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Side of the initialization square, px.
    pub template_px: u32,
    pub grid_n: usize,
    pub window: usize,
    pub stride: usize,
    /// Rig to use; `None` takes the rig from the sequence metadata.
    pub rig: Option<StereoRig>,
    /// Stereo matching runs on frames whose index is a multiple of this;
    /// other frames reuse each point's last disparity.
    pub stereo_every: usize,
    pub tracker: TrackerConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { template_px: 100, grid_n: 3, window: 8, stride: 4, rig: None, stereo_every: 1, tracker: TrackerConfig::default() }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::InvalidConfig(m.into()));
        if self.template_px < 2 {
            return bad("template_px must be >= 2");
        }
        if self.grid_n < 1 {
            return bad("grid_n must be >= 1");
        }
        if self.window < 2 {
            return bad("window must be >= 2");
        }
        if self.stride < 1 || self.stride > self.window {
            return bad("stride must satisfy 1 <= stride <= window");
        }
        if self.stereo_every < 1 {
            return bad("stereo_every must be >= 1");
        }
        if let Some(rig) = &self.rig {
            rig.validate().map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
        }
        self.tracker.validate()?;
        Ok(())
    }
}

/// Per-frame condition flags.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameFlags {
    /// No point yielded a valid 3D estimate; the fused value is held.
    pub all_points_lost: bool,
    /// The tracker backend failed for this frame.
    pub tracker_error: bool,
}

impl FrameFlags {
    pub fn is_empty(&self) -> bool {
        !self.all_points_lost && !self.tracker_error
    }

    pub fn parse(s: &str) -> Result<Self, PipelineError> {
        let mut f = Self::default();
        for part in s.split('|').filter(|p| !p.is_empty()) {
            match part {
                "all_points_lost" => f.all_points_lost = true,
                "tracker_error" => f.tracker_error = true,
                other => return Err(PipelineError::Parse(format!("unknown flag '{other}'"))),
            }
        }
        Ok(f)
    }
}

impl fmt::Display for FrameFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.all_points_lost {
            parts.push("all_points_lost");
        }
        if self.tracker_error {
            parts.push("tracker_error");
        }
        f.write_str(&parts.join("|"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: usize,
    pub t_s: f64,
    /// Fused camera-frame position, mm.
    pub position: Point3,
    /// Per-point estimates; `None` where the point was excluded.
    pub points: Vec<Option<Point3>>,
    pub n_visible: usize,
    pub flags: FrameFlags,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackedPath3D {
    pub frames: Vec<FrameRecord>,
}

impl TrackedPath3D {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn positions(&self) -> Vec<Point3> {
        self.frames.iter().map(|f| f.position).collect()
    }

    pub fn lost_frames(&self) -> usize {
        self.frames.iter().filter(|f| f.flags.all_points_lost).count()
    }
}

/// Wall-clock time spent per stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineStats {
    pub frames: usize,
    pub windows: usize,
    pub stereo_calls: usize,
    pub fetch: Duration,
    pub temporal: Duration,
    pub stereo: Duration,
    pub fusion: Duration,
    pub total: Duration,
}

impl PipelineStats {
    pub fn fps(&self) -> f64 {
        self.frames as f64 / self.total.as_secs_f64()
    }
}

/// Query grid over the `template_px` square at the frame centre.
pub fn initialize(first_left: &Frame, config: &PipelineConfig) -> Result<Vec<QueryPoint>, PipelineError> {
    let (w, h) = (first_left.width(), first_left.height());
    if w < config.template_px || h < config.template_px {
        return Err(PipelineError::FrameTooSmall { width: w, height: h, template_px: config.template_px });
    }
    let center = Point2::new(w as f64 / 2.0, h as f64 / 2.0);
    Ok(make_grid(center, config.template_px as f64, config.grid_n))
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Component-wise median; the mean of the middle pair for even counts.
pub fn fuse_median(points: &[Point3]) -> Result<Point3, PipelineError> {
    if points.is_empty() {
        return Err(PipelineError::EmptyEnsemble);
    }
    let mut xs: Vec<f64> = points.iter().map(|p| p.x).collect();
    let mut ys: Vec<f64> = points.iter().map(|p| p.y).collect();
    let mut zs: Vec<f64> = points.iter().map(|p| p.z).collect();
    Ok(Point3::new(median(&mut xs), median(&mut ys), median(&mut zs)))
}

/// Subtracts the frame-0 fused position from every frame.
pub fn to_relative(path: &TrackedPath3D) -> Result<TrackedPath3D, PipelineError> {
    let origin = path.frames.first().ok_or(PipelineError::EmptyPath)?.position;
    let frames = path
        .frames
        .iter()
        .map(|f| FrameRecord {
            position: f.position - origin,
            points: f.points.iter().map(|p| p.map(|p| p - origin)).collect(),
            ..f.clone()
        })
        .collect();
    Ok(TrackedPath3D { frames })
}

/// Tracks the target through `source`; see [`run_with`].
pub fn run(
    source: &dyn FrameSource,
    config: &PipelineConfig,
    tracker: &mut dyn PointTracker,
) -> Result<(TrackedPath3D, PipelineStats), PipelineError> {
    run_with(source, config, tracker, |_| {})
}

/// Runs the pipeline, calling `observer` on each frame as it is finalized, in frame order.
///
/// Windows of `window` frames start every `stride` frames; a frame is
/// finalized once no later window covers it, so overlaps take the later
/// window's estimate. Tracker backend failures flag the affected frames
/// and processing continues.
pub fn run_with(
    source: &dyn FrameSource,
    config: &PipelineConfig,
    tracker: &mut dyn PointTracker,
    mut observer: impl FnMut(&FrameRecord),
) -> Result<(TrackedPath3D, PipelineStats), PipelineError> {
    config.validate()?;
    let started = Instant::now();
    let info = source.info();
    let n = source.len();
    if n == 0 {
        return Err(PipelineError::EmptySequence);
    }
    let rig = match config.rig {
        Some(r) if r != info.metadata.rig => {
            return Err(PipelineError::RigMismatch { configured: r, sequence: info.metadata.rig })
        }
        Some(r) => r,
        None => info.metadata.rig,
    };
    let fps = info.fps();
    let mut stats = PipelineStats::default();

    let mut buffer: VecDeque<(usize, StereoFrame)> = VecDeque::with_capacity(config.window);
    let fetch = |i: usize, stats: &mut PipelineStats| -> Result<StereoFrame, PipelineError> {
        let t = Instant::now();
        let f = source.stereo_frame(i)?;
        stats.fetch += t.elapsed();
        Ok(f)
    };

    let first = fetch(0, &mut stats)?;
    let queries = initialize(&first.left, config)?;
    buffer.push_back((0, first));
    let nq = queries.len();

    let mut state = FuseState {
        last_left: queries.iter().map(|q| q.pos).collect(),
        disparity: vec![None; nq],
        last_fused: Point3::new(f64::NAN, f64::NAN, f64::NAN),
        have_fused: false,
    };
    let mut prior: Option<PointTrack> = None;
    let mut out = Vec::with_capacity(n);
    let mut start = 0usize;

    loop {
        let end = (start + config.window).min(n);
        let last_window = end == n;
        while buffer.back().map_or(0, |b| b.0 + 1) < end {
            let i = buffer.back().map_or(0, |b| b.0 + 1);
            let f = fetch(i, &mut stats)?;
            buffer.push_back((i, f));
        }
        while buffer.front().is_some_and(|b| b.0 < start) {
            buffer.pop_front();
        }
        let finalize_to = if last_window { n } else { start + config.stride };

        let window = TrackWindow::new(buffer.iter().map(|(_, f)| f.left.clone()).collect(), start)?;
        let t = Instant::now();
        let tracked = match tracker.temporal_track(&window, &queries, prior.as_ref()) {
            Ok(tr) => {
                if tr.start_index != start || tr.n_queries() != nq || tr.n_frames() != window.len() {
                    return Err(PipelineError::Track(TrackError::InvalidConfig(format!(
                        "tracker returned {}x{} samples from frame {}, expected {}x{} from {}",
                        tr.n_queries(),
                        tr.n_frames(),
                        tr.start_index,
                        nq,
                        window.len(),
                        start
                    ))));
                }
                Some(tr)
            }
            Err(TrackError::Adapter(_)) => None,
            Err(e) => return Err(e.into()),
        };
        stats.temporal += t.elapsed();
        stats.windows += 1;

        for fi in start..finalize_to {
            let pair = &buffer[fi - start].1;
            let rec = finalize_frame(fi, fps, pair, tracked.as_ref(), &rig, config, tracker, &mut state, &mut stats)?;
            observer(&rec);
            out.push(rec);
        }
        if let Some(tr) = tracked {
            prior = Some(tr);
        }
        if last_window {
            break;
        }
        start += config.stride;
    }

    stats.frames = out.len();
    stats.total = started.elapsed();
    Ok((TrackedPath3D { frames: out }, stats))
}

struct FuseState {
    last_left: Vec<Point2>,
    disparity: Vec<Option<f64>>,
    last_fused: Point3,
    have_fused: bool,
}

#[allow(clippy::too_many_arguments)]
fn finalize_frame(
    fi: usize,
    fps: f64,
    pair: &StereoFrame,
    tracked: Option<&PointTrack>,
    rig: &StereoRig,
    config: &PipelineConfig,
    tracker: &mut dyn PointTracker,
    state: &mut FuseState,
    stats: &mut PipelineStats,
) -> Result<FrameRecord, PipelineError> {
    let nq = state.last_left.len();
    let mut flags = FrameFlags::default();
    let mut temporal_ok = vec![false; nq];
    match tracked {
        Some(tr) => {
            for (q, ok) in temporal_ok.iter_mut().enumerate() {
                let s = tr.get(q, fi).expect("shape validated");
                state.last_left[q] = s.pos;
                *ok = s.visible && s.pos.is_finite();
            }
        }
        None => flags.tracker_error = true,
    }

    if tracked.is_some() && fi % config.stereo_every == 0 {
        let t = Instant::now();
        let matched = tracker.stereo_match(fi, &pair.left, &pair.right, &state.last_left);
        stats.stereo += t.elapsed();
        stats.stereo_calls += 1;
        match matched {
            Ok(m) if m.len() == nq => {
                for (q, sm) in m.iter().enumerate() {
                    state.disparity[q] = sm.visible.then(|| disparity_of(state.last_left[q], sm.right));
                }
            }
            Ok(m) => {
                return Err(PipelineError::Track(TrackError::InvalidConfig(format!(
                    "stereo matcher returned {} matches for {nq} points",
                    m.len()
                ))))
            }
            Err(TrackError::Adapter(_)) => {
                flags.tracker_error = true;
                state.disparity.iter_mut().for_each(|d| *d = None);
            }
            Err(e) => return Err(e.into()),
        }
    }

    let t = Instant::now();
    let points: Vec<Option<Point3>> = (0..nq)
        .map(|q| {
            if !temporal_ok[q] {
                return None;
            }
            let d = state.disparity[q]?;
            rig.triangulate(state.last_left[q], d).ok()
        })
        .collect();
    let valid: Vec<Point3> = points.iter().flatten().copied().collect();
    let position = match fuse_median(&valid) {
        Ok(p) => {
            state.last_fused = p;
            state.have_fused = true;
            p
        }
        Err(_) => {
            flags.all_points_lost = true;
            state.last_fused
        }
    };
    stats.fusion += t.elapsed();
    Ok(FrameRecord { frame: fi, t_s: fi as f64 / fps, position, points, n_visible: valid.len(), flags })
}

pub const TRACKED_CSV_HEADER: &str = "frame,t_s,x_mm,y_mm,z_mm,n_visible,flags";

/// Writes the tracked-path CSV (absolute camera-frame mm, 6 decimals).
pub fn write_tracked_csv<W: Write>(mut w: W, path: &TrackedPath3D) -> std::io::Result<()> {
    writeln!(w, "{TRACKED_CSV_HEADER}")?;
    for f in &path.frames {
        writeln!(
            w,
            "{},{:.6},{:.6},{:.6},{:.6},{},{}",
            f.frame, f.t_s, f.position.x, f.position.y, f.position.z, f.n_visible, f.flags
        )?;
    }
    w.flush()
}

pub fn read_tracked_csv<R: Read>(r: R) -> Result<TrackedPath3D, PipelineError> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers().map_err(|e| PipelineError::Parse(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>().join(",") != TRACKED_CSV_HEADER {
        return Err(PipelineError::Parse(format!("unexpected header '{}'", headers.iter().collect::<Vec<_>>().join(","))));
    }
    let mut frames = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| PipelineError::Parse(e.to_string()))?;
        let num = |i: usize| -> Result<f64, PipelineError> {
            rec[i].parse::<f64>().map_err(|e| PipelineError::Parse(format!("column {i}: {e}")))
        };
        let int = |i: usize| -> Result<usize, PipelineError> {
            rec[i].parse::<usize>().map_err(|e| PipelineError::Parse(format!("column {i}: {e}")))
        };
        frames.push(FrameRecord {
            frame: int(0)?,
            t_s: num(1)?,
            position: Point3::new(num(2)?, num(3)?, num(4)?),
            points: Vec::new(),
            n_visible: int(5)?,
            flags: FrameFlags::parse(&rec[6])?,
        });
    }
    Ok(TrackedPath3D { frames })
}
