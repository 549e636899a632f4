use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::PathBuf;
use std::sync::Arc;

use super::{
    read_message, write_message, AdapterError, Camera, Capability, Message, Mode, TrackRequest, TrackResult, WireSample,
    PROTOCOL_VERSION,
};
use crate::frame::Frame;
use crate::geometry::Point2;
use crate::sequence::{FrameSource, SequenceReader};
use crate::trackers::{self, PointTrack, QueryPoint, TrackSample, TrackWindow, TrackerConfig};

/// Adapter process logic serving the reference tracker, for loopback
/// testing and as a protocol example.
#[derive(Debug, Clone)]
pub struct AdapterServer {
    config: TrackerConfig,
    version: u32,
}

impl AdapterServer {
    pub fn new(config: TrackerConfig) -> Self {
        Self { config, version: PROTOCOL_VERSION }
    }

    /// Announces `version` instead of the supported one.
    pub fn with_version(mut self, version: u32) -> Self {
        self.version = version;
        self
    }

    /// Handles messages until `shutdown` or end of input. Malformed messages
    /// get an `error` reply; the loop keeps running.
    pub fn serve(&self, input: impl Read, output: impl Write) -> Result<(), AdapterError> {
        let mut input = BufReader::new(input);
        let mut output = BufWriter::new(output);
        let mut sequences: HashMap<PathBuf, Arc<SequenceReader>> = HashMap::new();
        let mut initialized = false;
        write_message(&mut output, &Message::Hello { version: self.version, capabilities: vec![Capability::Temporal, Capability::Stereo] })?;
        loop {
            let reply = match read_message(&mut input) {
                Ok(None) | Ok(Some(Message::Shutdown)) => return Ok(()),
                Ok(Some(Message::Init { .. })) => {
                    initialized = true;
                    continue;
                }
                Ok(Some(Message::Track(req))) if !initialized => {
                    Message::Error { request_id: Some(req.request_id), message: "track request before init".into() }
                }
                Ok(Some(Message::Track(req))) => match self.handle(&req, &mut sequences) {
                    Ok(tracks) => Message::Result(TrackResult { request_id: req.request_id, tracks }),
                    Err(message) => Message::Error { request_id: Some(req.request_id), message },
                },
                Ok(Some(other)) => Message::Error { request_id: None, message: format!("unexpected {} message", other.kind()) },
                Err(AdapterError::Protocol(m)) => Message::Error { request_id: None, message: m },
                Err(e) => return Err(e),
            };
            write_message(&mut output, &reply)?;
        }
    }

    fn handle(&self, req: &TrackRequest, cache: &mut HashMap<PathBuf, Arc<SequenceReader>>) -> Result<Vec<Vec<WireSample>>, String> {
        req.validate()?;
        let path = PathBuf::from(&req.sequence_path);
        let seq = match cache.get(&path) {
            Some(s) => s.clone(),
            None => {
                let s = Arc::new(SequenceReader::open(&path).map_err(|e| format!("{}: {e}", path.display()))?);
                cache.insert(path, s.clone());
                s
            }
        };
        let n = seq.len();
        if let Some(bad) = req.frame_indices.iter().find(|&&i| i as usize >= n) {
            return Err(format!("frame index {bad} out of range (sequence has {n} frames)"));
        }
        let left = req.camera != Some(Camera::Right);
        let view = |i: u32| -> Result<Arc<Frame>, String> {
            let f = seq.stereo_frame(i as usize).map_err(|e| e.to_string())?;
            Ok(if left { f.left } else { f.right })
        };
        match req.mode {
            Mode::Stereo => {
                let pair = seq.stereo_frame(req.frame_indices[0] as usize).map_err(|e| e.to_string())?;
                let points: Vec<Point2> = req.queries.iter().map(|q| Point2::new(q.x, q.y)).collect();
                let m = trackers::stereo_match(&pair.left, &pair.right, &points, &self.config).map_err(|e| e.to_string())?;
                Ok(m.iter().map(|s| vec![WireSample { x: s.right.x, y: s.right.y, visible: s.visible, confidence: s.confidence }]).collect())
            }
            Mode::Temporal => self.temporal(req, view),
        }
    }

    fn temporal(&self, req: &TrackRequest, view: impl Fn(u32) -> Result<Arc<Frame>, String>) -> Result<Vec<Vec<WireSample>>, String> {
        let idx = &req.frame_indices;
        // The window is the contiguous run ending at the last index; earlier
        // indices may only be query definition frames.
        let mut k = idx.len() - 1;
        while k > 0 && idx[k - 1] + 1 == idx[k] {
            k -= 1;
        }
        let start = idx[k] as usize;
        let defined: Vec<usize> = req.queries.iter().map(|q| q.frame as usize).collect();
        if let Some(j) = (0..k).find(|j| !defined.contains(j)) {
            return Err(format!("frame index {} is neither in the window nor a query frame", idx[j]));
        }
        let frames = idx[k..].iter().map(|&i| view(i)).collect::<Result<Vec<_>, _>>()?;
        let window = TrackWindow::new(frames, start).map_err(|e| e.to_string())?;
        let queries: Vec<QueryPoint> =
            req.queries.iter().map(|q| QueryPoint { frame_index: idx[q.frame as usize] as usize, pos: Point2::new(q.x, q.y) }).collect();

        let prior = if defined.iter().any(|&j| j < k) {
            let seed_index = match &req.prior {
                Some(p) => {
                    let f = p[0].frame;
                    if p.iter().any(|s| s.frame != f) || f as usize >= start {
                        return Err("prior entries must share one frame before the window".into());
                    }
                    f as usize
                }
                None => start - 1,
            };
            let seeds = match &req.prior {
                Some(p) => p.iter().map(|s| TrackSample { pos: Point2::new(s.x, s.y), visible: s.visible, confidence: 0.0 }).collect(),
                None => queries.iter().map(|q| TrackSample { pos: q.pos, visible: true, confidence: 1.0 }).collect(),
            };
            let def_frames = idx[..k].iter().map(|&i| view(i).map(|f| (i as usize, f))).collect::<Result<Vec<_>, _>>()?;
            let frame_of = |q: &QueryPoint| -> &Frame {
                if window.contains(q.frame_index) {
                    &window.frames[q.frame_index - start]
                } else {
                    &def_frames.iter().find(|(i, _)| *i == q.frame_index).expect("query frame listed").1
                }
            };
            let refs: Vec<&Frame> = queries.iter().map(frame_of).collect();
            Some(PointTrack::reference_seed(&queries, &refs, seed_index, seeds, &self.config))
        } else {
            None
        };

        let tr = trackers::temporal_track(&window, &queries, prior.as_ref(), &self.config).map_err(|e| e.to_string())?;
        Ok(queries
            .iter()
            .enumerate()
            .map(|(qi, q)| {
                idx.iter()
                    .map(|&i| {
                        let i = i as usize;
                        match tr.get(qi, i) {
                            Some(s) => WireSample { x: s.pos.x, y: s.pos.y, visible: s.visible, confidence: s.confidence },
                            // A definition frame before the window.
                            None => WireSample { x: q.pos.x, y: q.pos.y, visible: true, confidence: 1.0 },
                        }
                    })
                    .collect()
            })
            .collect())
    }
}
