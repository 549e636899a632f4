//! 2D point trackers for the two roles of the pipeline: temporal tracking
//! within one camera and stereo correspondence from the left view into the
//! right view.
//!
//! [`PointTracker`] is the pluggable interface. [`ReferenceTracker`] is the
//! built-in deterministic implementation based on exhaustive normalized
//! cross-correlation with parabolic subpixel refinement; the protocol client
//! in [`crate::adapter`] is the other implementation.

mod ncc;

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::AdapterError;
use crate::frame::Frame;
use crate::geometry::Point2;

pub use ncc::Template;

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("query defined in frame {frame_index}, outside window starting at {window_start} and not carried by the prior")]
    QueryOutsideWindow { frame_index: usize, window_start: usize },
    #[error("track window is empty")]
    EmptyWindow,
    #[error("frame dimensions differ: {0:?} vs {1:?}")]
    DimensionMismatch((u32, u32, u8), (u32, u32, u8)),
    #[error("invalid tracker configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryPoint {
    pub frame_index: usize,
    pub pos: Point2,
}

/// Consecutive frames of one camera; `start_index` is the global index of `frames[0]`.
#[derive(Debug, Clone)]
pub struct TrackWindow {
    pub frames: Vec<Arc<Frame>>,
    pub start_index: usize,
}

impl TrackWindow {
    pub fn new(frames: Vec<Arc<Frame>>, start_index: usize) -> Result<Self, TrackError> {
        if frames.is_empty() {
            return Err(TrackError::EmptyWindow);
        }
        let d = frames[0].dims();
        if let Some(f) = frames.iter().find(|f| f.dims() != d) {
            return Err(TrackError::DimensionMismatch(d, f.dims()));
        }
        Ok(Self { frames, start_index })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// One past the global index of the last frame.
    pub fn end_index(&self) -> usize {
        self.start_index + self.frames.len()
    }

    pub fn contains(&self, frame_index: usize) -> bool {
        (self.start_index..self.end_index()).contains(&frame_index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackSample {
    pub pos: Point2,
    pub visible: bool,
    pub confidence: f64,
}

impl TrackSample {
    pub fn lost(pos: Point2) -> Self {
        Self { pos, visible: false, confidence: 0.0 }
    }
}

/// Per-query, per-frame positions covering frames `start_index..start_index + n_frames`.
#[derive(Debug, Clone)]
pub struct PointTrack {
    pub start_index: usize,
    /// `samples[query][frame - start_index]`
    pub samples: Vec<Vec<TrackSample>>,
    state: Option<Arc<ReferenceState>>,
}

impl PartialEq for PointTrack {
    fn eq(&self, other: &Self) -> bool {
        self.start_index == other.start_index && self.samples == other.samples
    }
}

impl PointTrack {
    pub fn new(start_index: usize, samples: Vec<Vec<TrackSample>>) -> Self {
        Self { start_index, samples, state: None }
    }

    pub fn n_queries(&self) -> usize {
        self.samples.len()
    }

    pub fn n_frames(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn end_index(&self) -> usize {
        self.start_index + self.n_frames()
    }

    pub fn get(&self, query: usize, frame_index: usize) -> Option<&TrackSample> {
        let i = frame_index.checked_sub(self.start_index)?;
        self.samples.get(query)?.get(i)
    }

    /// Prior for the reference tracker rebuilt from outside state: each
    /// query's template is sampled from `definition_frames[q]` and tracking
    /// resumes from `seeds[q]`, the estimate at frame `seed_index`.
    pub fn reference_seed(
        queries: &[QueryPoint],
        definition_frames: &[&Frame],
        seed_index: usize,
        seeds: Vec<TrackSample>,
        config: &TrackerConfig,
    ) -> Self {
        let templates = queries
            .iter()
            .zip(definition_frames)
            .map(|(q, f)| Template::sample(f, q.pos, config.template_radius))
            .collect();
        Self {
            start_index: seed_index,
            samples: seeds.into_iter().map(|s| vec![s]).collect(),
            state: Some(Arc::new(ReferenceState { config: *config, templates })),
        }
    }

    /// Latest sample strictly before `frame_index`.
    fn latest_before(&self, query: usize, frame_index: usize) -> Option<&TrackSample> {
        let last = frame_index.min(self.end_index()).checked_sub(1)?;
        self.get(query, last)
    }
}

/// Appearance state the reference tracker hands forward through `prior`.
#[derive(Debug)]
struct ReferenceState {
    config: TrackerConfig,
    templates: Vec<Option<Template>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StereoMatch {
    pub right: Point2,
    pub visible: bool,
    pub confidence: f64,
}

/// Knobs of the reference tracker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    pub template_radius: usize,
    pub search_radius: usize,
    pub stereo_disparity_range: (u32, u32),
    pub min_confidence: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self { template_radius: 10, search_radius: 32, stereo_disparity_range: (1, 200), min_confidence: 0.5 }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), TrackError> {
        let (dmin, dmax) = self.stereo_disparity_range;
        if self.template_radius < 1 {
            return Err(TrackError::InvalidConfig("template_radius must be >= 1".into()));
        }
        if self.search_radius < 1 {
            return Err(TrackError::InvalidConfig("search_radius must be >= 1".into()));
        }
        if dmin < 1 || dmin > dmax {
            return Err(TrackError::InvalidConfig(format!("disparity range [{dmin}, {dmax}] must satisfy 1 <= min <= max")));
        }
        if !(0.0..=1.0).contains(&self.min_confidence) {
            return Err(TrackError::InvalidConfig("min_confidence must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// A 2D tracker serving both pipeline roles.
///
/// Implementations may keep resources (an adapter process) but no tracking
/// state beyond what they return in [`PointTrack`] and receive back as `prior`.
pub trait PointTracker: Send {
    fn name(&self) -> &str;

    /// Tracks `queries` through every frame of `window`.
    fn temporal_track(
        &mut self,
        window: &TrackWindow,
        queries: &[QueryPoint],
        prior: Option<&PointTrack>,
    ) -> Result<PointTrack, TrackError>;

    /// Finds each left-view point in the right view of stereo pair `frame_index`.
    fn stereo_match(
        &mut self,
        frame_index: usize,
        left: &Frame,
        right: &Frame,
        points: &[Point2],
    ) -> Result<Vec<StereoMatch>, TrackError>;
}

/// Deterministic NCC template tracker.
#[derive(Debug, Clone, Default)]
pub struct ReferenceTracker {
    pub config: TrackerConfig,
}

impl ReferenceTracker {
    pub fn new(config: TrackerConfig) -> Self {
        Self { config }
    }
}

impl PointTracker for ReferenceTracker {
    fn name(&self) -> &str {
        "reference"
    }

    fn temporal_track(
        &mut self,
        window: &TrackWindow,
        queries: &[QueryPoint],
        prior: Option<&PointTrack>,
    ) -> Result<PointTrack, TrackError> {
        temporal_track(window, queries, prior, &self.config)
    }

    fn stereo_match(
        &mut self,
        _frame_index: usize,
        left: &Frame,
        right: &Frame,
        points: &[Point2],
    ) -> Result<Vec<StereoMatch>, TrackError> {
        stereo_match(left, right, points, &self.config)
    }
}

/// Reference temporal tracking.
///
/// Each query's template is sampled once in its definition frame and never
/// updated. Every other frame is searched over `(2·search_radius+1)²` integer
/// offsets around the estimate of the neighbouring frame (forward after the
/// definition frame, backward before it). Frames where the peak score is below
/// `min_confidence` are reported invisible and hold the previous estimate.
///
/// A query defined before the window needs a `prior` produced by this tracker;
/// tracking resumes from the prior's estimate just before the window.
pub fn temporal_track(
    window: &TrackWindow,
    queries: &[QueryPoint],
    prior: Option<&PointTrack>,
    config: &TrackerConfig,
) -> Result<PointTrack, TrackError> {
    temporal_track_impl(window, queries, prior, config, true)
}

fn temporal_track_impl(
    window: &TrackWindow,
    queries: &[QueryPoint],
    prior: Option<&PointTrack>,
    config: &TrackerConfig,
    reuse_prior: bool,
) -> Result<PointTrack, TrackError> {
    if window.is_empty() {
        return Err(TrackError::EmptyWindow);
    }
    let prior_state = prior
        .and_then(|p| p.state.as_ref())
        .filter(|s| s.templates.len() == queries.len());

    // Resolve templates first so errors surface before any work.
    let mut templates = Vec::with_capacity(queries.len());
    for (qi, q) in queries.iter().enumerate() {
        if window.contains(q.frame_index) {
            let f = &window.frames[q.frame_index - window.start_index];
            templates.push(Template::sample(f, q.pos, config.template_radius));
        } else if q.frame_index < window.start_index && prior_state.is_some() {
            templates.push(prior_state.unwrap().templates[qi].clone());
        } else {
            return Err(TrackError::QueryOutsideWindow { frame_index: q.frame_index, window_start: window.start_index });
        }
    }

    // Reusing the prior's overlap is exact: same templates, same config and
    // the same starting estimate reproduce the same chain.
    let reusable = reuse_prior
        && prior_state.is_some_and(|s| s.config == *config)
        && prior.is_some_and(|p| p.start_index < window.start_index && window.start_index <= p.end_index());

    let samples: Vec<Vec<TrackSample>> = queries
        .par_iter()
        .enumerate()
        .map(|(qi, q)| {
            let template = templates[qi].as_ref();
            let n = window.len();
            let mut out: Vec<Option<TrackSample>> = vec![None; n];
            let forward_from = if window.contains(q.frame_index) {
                let k = q.frame_index - window.start_index;
                let visible = template.is_some_and(|t| !t.is_flat());
                out[k] = Some(TrackSample { pos: q.pos, visible, confidence: if visible { 1.0 } else { 0.0 } });
                let mut prev = q.pos;
                for j in (0..k).rev() {
                    let s = track_step(template, &window.frames[j], prev, config);
                    prev = s.pos;
                    out[j] = Some(s);
                }
                k + 1
            } else {
                let p = prior.unwrap();
                let mut k = 0;
                if reusable {
                    while k < n {
                        match p.get(qi, window.start_index + k) {
                            Some(s) => out[k] = Some(*s),
                            None => break,
                        }
                        k += 1;
                    }
                }
                if k == 0 {
                    let start = p.latest_before(qi, window.start_index).map_or(q.pos, |s| s.pos);
                    out[0] = Some(track_step(template, &window.frames[0], start, config));
                    k = 1;
                }
                k
            };
            for j in forward_from..n {
                let prev = out[j - 1].unwrap().pos;
                out[j] = Some(track_step(template, &window.frames[j], prev, config));
            }
            out.into_iter().map(Option::unwrap).collect()
        })
        .collect();

    Ok(PointTrack {
        start_index: window.start_index,
        samples,
        state: Some(Arc::new(ReferenceState { config: *config, templates })),
    })
}

fn track_step(template: Option<&Template>, frame: &Frame, prev: Point2, config: &TrackerConfig) -> TrackSample {
    let Some(t) = template else {
        return TrackSample::lost(prev);
    };
    let r = config.search_radius as i64;
    match ncc::search(t, frame, prev, (-r, r), (-r, r)) {
        Some(p) if p.score >= config.min_confidence => TrackSample {
            pos: Point2::new(prev.x + p.dx, prev.y + p.dy),
            visible: true,
            confidence: p.score.clamp(0.0, 1.0),
        },
        Some(p) => TrackSample { pos: prev, visible: false, confidence: p.score.clamp(0.0, 1.0) },
        None => TrackSample::lost(prev),
    }
}

/// Reference stereo matching along the epipolar row.
///
/// Candidate right positions are `left.x - d` for integer `d` in
/// `stereo_disparity_range`; the peak is refined with a 1D parabola. The
/// returned row always equals the input row.
pub fn stereo_match(
    left: &Frame,
    right: &Frame,
    points: &[Point2],
    config: &TrackerConfig,
) -> Result<Vec<StereoMatch>, TrackError> {
    if left.dims() != right.dims() {
        return Err(TrackError::DimensionMismatch(left.dims(), right.dims()));
    }
    let (dmin, dmax) = config.stereo_disparity_range;
    if dmin > dmax {
        return Err(TrackError::InvalidConfig(format!("empty disparity range [{dmin}, {dmax}]")));
    }
    Ok(points
        .par_iter()
        .map(|&p| {
            let lost = StereoMatch { right: p, visible: false, confidence: 0.0 };
            let Some(t) = Template::sample(left, p, config.template_radius) else {
                return lost;
            };
            match ncc::search(&t, right, p, (-(dmax as i64), -(dmin as i64)), (0, 0)) {
                Some(peak) => StereoMatch {
                    right: Point2::new(p.x + peak.dx, p.y),
                    visible: peak.score >= config.min_confidence,
                    confidence: peak.score.clamp(0.0, 1.0),
                },
                None => lost,
            }
        })
        .collect())
}

/// `n x n` query grid evenly spanning a square of side `extent` centred on
/// `center`, edges included; `n = 1` gives the centre alone.
pub fn make_grid(center: Point2, extent: f64, n: usize) -> Vec<QueryPoint> {
    if n <= 1 {
        return vec![QueryPoint { frame_index: 0, pos: center }];
    }
    let step = extent / (n - 1) as f64;
    let x0 = center.x - extent / 2.0;
    let y0 = center.y - extent / 2.0;
    let mut out = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            out.push(QueryPoint { frame_index: 0, pos: Point2::new(x0 + step * i as f64, y0 + step * j as f64) });
        }
    }
    out
}
