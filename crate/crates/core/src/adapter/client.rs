use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{
    AdapterError, Camera, Capability, ChildTransport, Message, Mode, TrackRequest, TrackResult, Transport, WirePrior,
    WireQuery, WireSample, DEFAULT_TIMEOUT, PROTOCOL_VERSION,
};
use crate::frame::Frame;
use crate::geometry::Point2;
use crate::sequence::SequenceInfo;
use crate::trackers::{PointTrack, PointTracker, QueryPoint, ReferenceTracker, StereoMatch, TrackError, TrackSample, TrackWindow, TrackerConfig};

/// Client side of one adapter connection. Requests are strictly sequential.
pub struct AdapterClient {
    transport: Box<dyn Transport>,
    capabilities: Vec<Capability>,
    timeout: Duration,
    next_id: u64,
    dead: Option<AdapterError>,
}

impl AdapterClient {
    /// Waits for `hello`, checks the version and sends `init`.
    pub fn connect(mut transport: Box<dyn Transport>, info: &SequenceInfo, window: usize, timeout: Duration) -> Result<Self, AdapterError> {
        let capabilities = match transport.recv(timeout)? {
            Message::Hello { version, capabilities } if version == PROTOCOL_VERSION => capabilities,
            Message::Hello { version, .. } => return Err(AdapterError::VersionMismatch { expected: PROTOCOL_VERSION, got: version }),
            other => return Err(AdapterError::Protocol(format!("expected hello, got {}", other.kind()))),
        };
        transport.send(&Message::Init { width: info.width, height: info.height, channels: info.channels, window: window as u32 })?;
        Ok(Self { transport, capabilities, timeout, next_id: 1, dead: None })
    }

    pub fn capabilities(&self) -> &[Capability] {
        &self.capabilities
    }

    /// Sends `req` under a fresh request id and waits for its response.
    pub fn request(&mut self, mut req: TrackRequest) -> Result<TrackResult, AdapterError> {
        if let Some(e) = &self.dead {
            return Err(e.clone());
        }
        let id = self.next_id;
        self.next_id += 1;
        req.request_id = id;
        let outcome = self.transport.send(&Message::Track(req)).and_then(|_| self.transport.recv(self.timeout));
        let reply = match outcome {
            Ok(m) => m,
            Err(e) => {
                // A late reply would desynchronize the pairing; the connection is unusable.
                if matches!(e, AdapterError::BrokenPipe(_) | AdapterError::Timeout(_)) {
                    self.dead = Some(e.clone());
                }
                return Err(e);
            }
        };
        match reply {
            Message::Result(r) if r.request_id == id => Ok(r),
            Message::Result(r) => {
                let e = AdapterError::Protocol(format!("response for request {} while awaiting {id}", r.request_id));
                self.dead = Some(e.clone());
                Err(e)
            }
            Message::Error { request_id: None, message } => Err(AdapterError::Remote(message)),
            Message::Error { request_id: Some(rid), message } if rid == id => Err(AdapterError::Remote(message)),
            Message::Error { request_id: Some(rid), .. } => {
                let e = AdapterError::Protocol(format!("error for request {rid} while awaiting {id}"));
                self.dead = Some(e.clone());
                Err(e)
            }
            other => Err(AdapterError::Protocol(format!("unexpected {} message", other.kind()))),
        }
    }

    fn require(&self, cap: Capability) -> Result<(), AdapterError> {
        if self.capabilities.contains(&cap) {
            Ok(())
        } else {
            Err(AdapterError::MissingCapability(cap))
        }
    }
}

fn sample_of(w: &WireSample) -> Result<TrackSample, AdapterError> {
    if !(w.x.is_finite() && w.y.is_finite() && w.confidence.is_finite()) {
        return Err(AdapterError::ShapeMismatch("non-finite sample".into()));
    }
    Ok(TrackSample { pos: Point2::new(w.x, w.y), visible: w.visible, confidence: w.confidence })
}

fn check_shape(r: &TrackResult, queries: usize, frames: usize) -> Result<(), AdapterError> {
    if r.tracks.len() != queries {
        return Err(AdapterError::ShapeMismatch(format!("{} tracks for {queries} queries", r.tracks.len())));
    }
    if let Some((q, t)) = r.tracks.iter().enumerate().find(|(_, t)| t.len() != frames) {
        return Err(AdapterError::ShapeMismatch(format!("track {q} has {} frames, expected {frames}", t.len())));
    }
    Ok(())
}

/// [`PointTracker`] backed by an adapter process reading the sequence file itself.
pub struct AdapterTracker {
    client: AdapterClient,
    sequence_path: String,
}

impl AdapterTracker {
    pub fn new(client: AdapterClient, sequence_path: &Path) -> Self {
        Self { client, sequence_path: sequence_path.to_string_lossy().into_owned() }
    }

    pub fn client(&self) -> &AdapterClient {
        &self.client
    }
}

impl PointTracker for AdapterTracker {
    fn name(&self) -> &str {
        "adapter"
    }

    fn temporal_track(&mut self, window: &TrackWindow, queries: &[QueryPoint], prior: Option<&PointTrack>) -> Result<PointTrack, TrackError> {
        self.client.require(Capability::Temporal)?;
        let (start, end) = (window.start_index, window.end_index());
        let mut indices: Vec<u32> = Vec::with_capacity(window.len() + 1);
        for q in queries {
            if q.frame_index >= end || (q.frame_index < start && prior.is_none()) {
                return Err(TrackError::QueryOutsideWindow { frame_index: q.frame_index, window_start: start });
            }
            if q.frame_index < start {
                indices.push(q.frame_index as u32);
            }
        }
        indices.extend((start..end).map(|i| i as u32));
        indices.sort_unstable();
        indices.dedup();
        let wire_queries = queries
            .iter()
            .map(|q| WireQuery { frame: indices.binary_search(&(q.frame_index as u32)).unwrap() as u32, x: q.pos.x, y: q.pos.y })
            .collect();
        let wire_prior = match prior {
            Some(p) if queries.iter().any(|q| q.frame_index < start) => Some(
                (0..queries.len())
                    .map(|qi| {
                        let last = start.min(p.end_index()).checked_sub(1).filter(|&f| f >= p.start_index);
                        match last.and_then(|f| p.get(qi, f).map(|s| (f, s))) {
                            Some((f, s)) => WirePrior { frame: f as u32, x: s.pos.x, y: s.pos.y, visible: s.visible },
                            None => WirePrior {
                                frame: queries[qi].frame_index as u32,
                                x: queries[qi].pos.x,
                                y: queries[qi].pos.y,
                                visible: true,
                            },
                        }
                    })
                    .collect(),
            ),
            _ => None,
        };
        let req = TrackRequest {
            request_id: 0,
            mode: Mode::Temporal,
            sequence_path: self.sequence_path.clone(),
            camera: Some(Camera::Left),
            frame_indices: indices.clone(),
            queries: wire_queries,
            prior: wire_prior,
        };
        let res = self.client.request(req)?;
        check_shape(&res, queries.len(), indices.len())?;
        let offset = indices.len() - window.len();
        let samples = res
            .tracks
            .iter()
            .map(|t| t[offset..].iter().map(sample_of).collect::<Result<Vec<_>, _>>())
            .collect::<Result<Vec<_>, _>>()?;
        Ok(PointTrack::new(start, samples))
    }

    fn stereo_match(&mut self, frame_index: usize, _left: &Frame, _right: &Frame, points: &[Point2]) -> Result<Vec<StereoMatch>, TrackError> {
        self.client.require(Capability::Stereo)?;
        let req = TrackRequest {
            request_id: 0,
            mode: Mode::Stereo,
            sequence_path: self.sequence_path.clone(),
            camera: None,
            frame_indices: vec![frame_index as u32],
            queries: points.iter().map(|p| WireQuery { frame: 0, x: p.x, y: p.y }).collect(),
            prior: None,
        };
        let res = self.client.request(req)?;
        check_shape(&res, points.len(), 1)?;
        Ok(res
            .tracks
            .iter()
            .map(|t| sample_of(&t[0]).map(|s| StereoMatch { right: s.pos, visible: s.visible, confidence: s.confidence }))
            .collect::<Result<Vec<_>, _>>()?)
    }
}

/// Which tracker implementation serves the pipeline.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TrackerBackend {
    #[default]
    Reference,
    Adapter {
        program: PathBuf,
        #[serde(default)]
        args: Vec<String>,
    },
}

impl TrackerBackend {
    /// Parses `reference` or `adapter:<path-to-executable>`.
    pub fn parse(s: &str) -> Result<Self, String> {
        match s.split_once(':') {
            None if s == "reference" => Ok(Self::Reference),
            Some(("adapter", path)) if !path.is_empty() => Ok(Self::Adapter { program: PathBuf::from(path), args: Vec::new() }),
            _ => Err(format!("unknown tracker '{s}' (expected 'reference' or 'adapter:<path>')")),
        }
    }

    /// Instantiates the backend for the sequence stored at `sequence_path`.
    pub fn open(&self, config: &TrackerConfig, sequence_path: &Path, info: &SequenceInfo, window: usize) -> Result<Box<dyn PointTracker>, AdapterError> {
        match self {
            Self::Reference => Ok(Box::new(ReferenceTracker::new(*config))),
            Self::Adapter { program, args } => {
                let transport = ChildTransport::spawn(program, args)?;
                let client = AdapterClient::connect(Box::new(transport), info, window, DEFAULT_TIMEOUT)?;
                Ok(Box::new(AdapterTracker::new(client, sequence_path)))
            }
        }
    }
}
