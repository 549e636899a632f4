//! 8-bit image frames as stored in sequence files.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("unsupported channel count {0} (expected 1 or 3)")]
    UnsupportedChannels(u8),
    #[error("buffer holds {actual} bytes, {width}x{height}x{channels} needs {expected}")]
    BadBufferLength { width: u32, height: u32, channels: u8, expected: usize, actual: usize },
    #[error("frame dimensions must be nonzero")]
    ZeroSize,
}

/// Row-major, channel-interleaved u8 image with 1 or 3 channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    width: u32,
    height: u32,
    channels: u8,
    data: Vec<u8>,
}

impl Frame {
    pub fn new(width: u32, height: u32, channels: u8, data: Vec<u8>) -> Result<Self, FrameError> {
        if width == 0 || height == 0 {
            return Err(FrameError::ZeroSize);
        }
        if channels != 1 && channels != 3 {
            return Err(FrameError::UnsupportedChannels(channels));
        }
        let expected = width as usize * height as usize * channels as usize;
        if data.len() != expected {
            return Err(FrameError::BadBufferLength { width, height, channels, expected, actual: data.len() });
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn filled(width: u32, height: u32, channels: u8, value: u8) -> Result<Self, FrameError> {
        let n = width as usize * height as usize * channels as usize;
        Self::new(width, height, channels, vec![value; n])
    }

    /// Builds a frame from a per-pixel intensity function (replicated across channels).
    pub fn from_fn(width: u32, height: u32, channels: u8, f: impl Fn(u32, u32) -> u8) -> Result<Self, FrameError> {
        let mut data = Vec::with_capacity(width as usize * height as usize * channels as usize);
        for y in 0..height {
            for x in 0..width {
                let v = f(x, y);
                for _ in 0..channels {
                    data.push(v);
                }
            }
        }
        Self::new(width, height, channels, data)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn dims(&self) -> (u32, u32, u8) {
        (self.width, self.height, self.channels)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    /// Grayscale intensity at an integer pixel; RGB channels are averaged with equal weight.
    #[inline]
    pub fn luma(&self, x: usize, y: usize) -> f32 {
        let w = self.width as usize;
        if self.channels == 1 {
            self.data[y * w + x] as f32
        } else {
            let i = (y * w + x) * 3;
            (self.data[i] as f32 + self.data[i + 1] as f32 + self.data[i + 2] as f32) / 3.0
        }
    }

    /// Resamples a `(2*half_w+1) x (2*half_h+1)` block of intensities centred
    /// on `(cx, cy)` with unit spacing, using bilinear interpolation.
    ///
    /// Returns `None` if any sample falls outside the pixel grid.
    pub fn sample_block(&self, cx: f64, cy: f64, half_w: usize, half_h: usize) -> Option<Vec<f32>> {
        self.sample_grid(cx - half_w as f64, cy - half_h as f64, 2 * half_w + 1, 2 * half_h + 1)
    }

    /// Bilinear resampling of a `bw x bh` unit-spaced grid whose first sample is at `(x0, y0)`.
    pub fn sample_grid(&self, x0: f64, y0: f64, bw: usize, bh: usize) -> Option<Vec<f32>> {
        if !(x0.is_finite() && y0.is_finite()) {
            return None;
        }
        let ix = x0.floor();
        let iy = y0.floor();
        self.sample_grid_split(ix as i64, iy as i64, (x0 - ix) as f32, (y0 - iy) as f32, bw, bh)
    }

    /// Like [`Frame::sample_grid`] with the origin given as integer pixel plus
    /// fractional offset in `[0, 1)`, so grids sharing a fraction interpolate
    /// identically.
    pub fn sample_grid_split(&self, ix0: i64, iy0: i64, fx: f32, fy: f32, bw: usize, bh: usize) -> Option<Vec<f32>> {
        if bw == 0 || bh == 0 {
            return Some(Vec::new());
        }
        let w = self.width as usize;
        let h = self.height as usize;
        let need_x = bw as i64 - 1 + i64::from(fx > 0.0);
        let need_y = bh as i64 - 1 + i64::from(fy > 0.0);
        if ix0 < 0 || iy0 < 0 || ix0 + need_x > w as i64 - 1 || iy0 + need_y > h as i64 - 1 {
            return None;
        }
        let ix0 = ix0 as usize;
        let iy0 = iy0 as usize;
        // Neighbour index is clamped; its weight is exactly zero whenever clamping matters.
        let mut out = Vec::with_capacity(bw * bh);
        if fx == 0.0 && fy == 0.0 {
            for j in 0..bh {
                for i in 0..bw {
                    out.push(self.luma(ix0 + i, iy0 + j));
                }
            }
            return Some(out);
        }
        let mut row_a = vec![0f32; bw + 1];
        let mut row_b = vec![0f32; bw + 1];
        for j in 0..bh {
            let ya = iy0 + j;
            let yb = (ya + 1).min(h - 1);
            for i in 0..=bw {
                let xi = (ix0 + i).min(w - 1);
                row_a[i] = self.luma(xi, ya);
                row_b[i] = self.luma(xi, yb);
            }
            for i in 0..bw {
                let top = row_a[i] + (row_a[i + 1] - row_a[i]) * fx;
                let bot = row_b[i] + (row_b[i + 1] - row_b[i]) * fx;
                out.push(top + (bot - top) * fy);
            }
        }
        Some(out)
    }
}
