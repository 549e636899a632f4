//! Synchronized rectified stereo sequences and the `.ssq` container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "SSQ1" | u32 version=1 | u32 width | u32 height | u32 channels
//!        | u32 frame_count | u32 fps_milli | u32 metadata_len
//!        | metadata_len bytes of UTF-8 JSON
//!        | frame_count x (left image, right image), each width*height*channels u8
//! ```

use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::AffineTransform3D;
use crate::frame::{Frame, FrameError};
use crate::geometry::StereoRig;

pub const MAGIC: &[u8; 4] = b"SSQ1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum SequenceError {
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: u64, actual: u64 },
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("frame {index} out of range (sequence has {len})")]
    FrameOutOfRange { index: usize, len: usize },
    #[error("frame: {0}")]
    Frame(#[from] FrameError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// JSON metadata block. Unknown fields are preserved on read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetadata {
    pub rig: StereoRig,
    #[serde(default)]
    pub preset: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub working_distance_mm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<serde_json::Value>,
    /// Exact camera-to-robot transform when the scene is synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera_to_robot: Option<AffineTransform3D>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl SequenceMetadata {
    pub fn new(rig: StereoRig) -> Self {
        Self {
            rig,
            preset: String::new(),
            seed: 0,
            working_distance_mm: None,
            trajectory: None,
            camera_to_robot: None,
            extra: Default::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceInfo {
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub frame_count: usize,
    pub fps_milli: u32,
    pub metadata: SequenceMetadata,
}

impl SequenceInfo {
    pub fn fps(&self) -> f64 {
        self.fps_milli as f64 / 1000.0
    }

    pub fn frame_bytes(&self) -> usize {
        self.width as usize * self.height as usize * self.channels as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StereoFrame {
    pub left: Arc<Frame>,
    pub right: Arc<Frame>,
}

/// Random-access provider of stereo frames.
pub trait FrameSource: Send + Sync {
    fn info(&self) -> &SequenceInfo;

    fn stereo_frame(&self, index: usize) -> Result<StereoFrame, SequenceError>;

    fn len(&self) -> usize {
        self.info().frame_count
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Fully in-memory sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct StereoSequence {
    pub info: SequenceInfo,
    pub frames: Vec<StereoFrame>,
}

impl StereoSequence {
    pub fn new(width: u32, height: u32, channels: u8, fps: f64, metadata: SequenceMetadata, frames: Vec<StereoFrame>) -> Result<Self, SequenceError> {
        for f in &frames {
            for img in [&f.left, &f.right] {
                if img.dims() != (width, height, channels) {
                    return Err(SequenceError::CorruptHeader(format!(
                        "frame dims {:?} differ from sequence {:?}",
                        img.dims(),
                        (width, height, channels)
                    )));
                }
            }
        }
        Ok(Self {
            info: SequenceInfo {
                width,
                height,
                channels,
                frame_count: frames.len(),
                fps_milli: (fps * 1000.0).round() as u32,
                metadata,
            },
            frames,
        })
    }

    /// Loads every frame of `source` into memory.
    pub fn collect(source: &dyn FrameSource) -> Result<Self, SequenceError> {
        let frames = (0..source.len()).map(|i| source.stereo_frame(i)).collect::<Result<Vec<_>, _>>()?;
        Ok(Self { info: source.info().clone(), frames })
    }
}

impl FrameSource for StereoSequence {
    fn info(&self) -> &SequenceInfo {
        &self.info
    }

    fn stereo_frame(&self, index: usize) -> Result<StereoFrame, SequenceError> {
        self.frames
            .get(index)
            .cloned()
            .ok_or(SequenceError::FrameOutOfRange { index, len: self.frames.len() })
    }
}

fn header_bytes(info: &SequenceInfo, meta: &[u8]) -> Result<Vec<u8>, SequenceError> {
    let count = u32::try_from(info.frame_count).map_err(|_| SequenceError::CorruptHeader("too many frames".into()))?;
    let meta_len = u32::try_from(meta.len()).map_err(|_| SequenceError::CorruptHeader("metadata too large".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + meta.len());
    out.extend_from_slice(MAGIC);
    for v in [VERSION, info.width, info.height, info.channels as u32, count, info.fps_milli, meta_len] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(meta);
    Ok(out)
}

/// Streams `source` to `w` in `.ssq` layout.
pub fn write_sequence_to<W: Write>(source: &dyn FrameSource, mut w: W) -> Result<(), SequenceError> {
    let info = source.info();
    let meta = serde_json::to_vec(&info.metadata).map_err(|e| SequenceError::CorruptHeader(e.to_string()))?;
    w.write_all(&header_bytes(info, &meta)?)?;
    // Frames are produced in parallel chunks and written in order.
    let chunk = rayon::current_num_threads().max(1) * 2;
    let mut start = 0;
    while start < source.len() {
        let end = (start + chunk).min(source.len());
        let frames: Vec<StereoFrame> =
            (start..end).into_par_iter().map(|i| source.stereo_frame(i)).collect::<Result<_, _>>()?;
        for f in &frames {
            w.write_all(f.left.data())?;
            w.write_all(f.right.data())?;
        }
        start = end;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sequence(source: &dyn FrameSource, path: &Path) -> Result<(), SequenceError> {
    let file = File::create(path)?;
    write_sequence_to(source, BufWriter::with_capacity(1 << 20, file))
}

fn parse_header<R: Read>(r: &mut R, total_len: u64) -> Result<(SequenceInfo, u64), SequenceError> {
    let mut head = [0u8; HEADER_LEN];
    if total_len < HEADER_LEN as u64 {
        if total_len >= 4 {
            r.read_exact(&mut head[..4])?;
            if &head[..4] != MAGIC {
                return Err(SequenceError::CorruptHeader("bad magic".into()));
            }
        }
        return Err(SequenceError::TruncatedPayload { expected: HEADER_LEN as u64, actual: total_len });
    }
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(SequenceError::CorruptHeader("bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(head[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let version = word(0);
    if version != VERSION {
        return Err(SequenceError::UnsupportedVersion(version));
    }
    let (width, height, channels, count, fps_milli, meta_len) = (word(1), word(2), word(3), word(4), word(5), word(6));
    if width == 0 || height == 0 {
        return Err(SequenceError::CorruptHeader("zero frame size".into()));
    }
    if channels != 1 && channels != 3 {
        return Err(SequenceError::CorruptHeader(format!("channels = {channels}")));
    }
    if fps_milli == 0 {
        return Err(SequenceError::CorruptHeader("fps is zero".into()));
    }
    let frame_bytes = width as u64 * height as u64 * channels as u64;
    let payload_start = HEADER_LEN as u64 + meta_len as u64;
    let expected = payload_start + 2 * frame_bytes * count as u64;
    if total_len < payload_start {
        return Err(SequenceError::TruncatedPayload { expected, actual: total_len });
    }
    let mut meta = vec![0u8; meta_len as usize];
    r.read_exact(&mut meta)?;
    let text = std::str::from_utf8(&meta).map_err(|_| SequenceError::CorruptHeader("metadata is not UTF-8".into()))?;
    let metadata: SequenceMetadata =
        serde_json::from_str(text).map_err(|e| SequenceError::CorruptHeader(format!("metadata: {e}")))?;
    if total_len < expected {
        return Err(SequenceError::TruncatedPayload { expected, actual: total_len });
    }
    if total_len > expected {
        return Err(SequenceError::CorruptHeader(format!("{} trailing bytes", total_len - expected)));
    }
    let info = SequenceInfo { width, height, channels: channels as u8, frame_count: count as usize, fps_milli, metadata };
    Ok((info, payload_start))
}

/// Parses a complete `.ssq` image held in memory.
pub fn read_sequence_from(bytes: &[u8]) -> Result<StereoSequence, SequenceError> {
    let mut cur = std::io::Cursor::new(bytes);
    let (info, start) = parse_header(&mut cur, bytes.len() as u64)?;
    let fb = info.frame_bytes();
    let mut frames = Vec::with_capacity(info.frame_count);
    let mut off = start as usize;
    for _ in 0..info.frame_count {
        let left = Frame::new(info.width, info.height, info.channels, bytes[off..off + fb].to_vec())?;
        let right = Frame::new(info.width, info.height, info.channels, bytes[off + fb..off + 2 * fb].to_vec())?;
        frames.push(StereoFrame { left: Arc::new(left), right: Arc::new(right) });
        off += 2 * fb;
    }
    Ok(StereoSequence { info, frames })
}

pub fn read_sequence(path: &Path) -> Result<StereoSequence, SequenceError> {
    read_sequence_from(&std::fs::read(path)?)
}

/// File-backed sequence that reads frames on demand.
#[derive(Debug)]
pub struct SequenceReader {
    info: SequenceInfo,
    payload_start: u64,
    file: Mutex<File>,
}

impl SequenceReader {
    pub fn open(path: &Path) -> Result<Self, SequenceError> {
        let mut file = File::open(path)?;
        let len = file.metadata()?.len();
        let (info, payload_start) = parse_header(&mut file, len)?;
        Ok(Self { info, payload_start, file: Mutex::new(file) })
    }
}

impl FrameSource for SequenceReader {
    fn info(&self) -> &SequenceInfo {
        &self.info
    }

    fn stereo_frame(&self, index: usize) -> Result<StereoFrame, SequenceError> {
        if index >= self.info.frame_count {
            return Err(SequenceError::FrameOutOfRange { index, len: self.info.frame_count });
        }
        let fb = self.info.frame_bytes();
        let mut buf = vec![0u8; 2 * fb];
        {
            let mut f = self.file.lock().expect("sequence file lock poisoned");
            f.seek(SeekFrom::Start(self.payload_start + (2 * fb * index) as u64))?;
            f.read_exact(&mut buf)?;
        }
        let right = buf.split_off(fb);
        let (w, h, c) = (self.info.width, self.info.height, self.info.channels);
        Ok(StereoFrame { left: Arc::new(Frame::new(w, h, c, buf)?), right: Arc::new(Frame::new(w, h, c, right)?) })
    }
}
