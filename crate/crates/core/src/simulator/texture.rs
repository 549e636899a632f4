//! Seeded multi-octave value noise, baked into a texel map in target-plane mm.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextureParams {
    pub octaves: u32,
    /// Lattice spacing of the coarsest octave, mm.
    pub base_cell_mm: f64,
    /// Amplitude ratio between successive octaves.
    pub persistence: f64,
    pub mean: f64,
    /// Intensity swing for a normalized noise value of ±1.
    pub contrast: f64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Lattice value in `[0, 1)`, independent of any map extent.
fn lattice(seed: u64, octave: u32, i: i64, j: i64) -> f64 {
    let h = splitmix(splitmix(splitmix(seed ^ ((octave as u64) << 56)) ^ i as u64) ^ j as u64);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Noise in `[-1, 1]` at plane position `(x, y)` mm.
pub fn value_noise(p: &TextureParams, seed: u64, x: f64, y: f64) -> f64 {
    let mut acc = 0.0;
    let mut norm = 0.0;
    let mut amp = 1.0;
    let mut cell = p.base_cell_mm;
    for o in 0..p.octaves {
        let (gx, gy) = (x / cell, y / cell);
        let (i, j) = (gx.floor(), gy.floor());
        let (u, v) = (smoothstep(gx - i), smoothstep(gy - j));
        let (i, j) = (i as i64, j as i64);
        let a = lattice(seed, o, i, j);
        let b = lattice(seed, o, i + 1, j);
        let c = lattice(seed, o, i, j + 1);
        let d = lattice(seed, o, i + 1, j + 1);
        let n = a + (b - a) * u + (c - a) * v + (a - b - c + d) * u * v;
        acc += amp * (2.0 * n - 1.0);
        norm += amp;
        amp *= p.persistence;
        cell /= 2.0;
    }
    if norm > 0.0 {
        acc / norm
    } else {
        0.0
    }
}

/// Intensities on a regular texel grid; texel `(i, j)` sits at
/// `(x0 + i·texel, y0 + j·texel)` mm.
#[derive(Debug, Clone)]
pub struct TextureMap {
    pub x0: f64,
    pub y0: f64,
    pub texel: f64,
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl TextureMap {
    pub fn from_fn(x0: f64, y0: f64, texel: f64, width: usize, height: usize, f: impl Fn(f64, f64) -> f64 + Sync) -> Self {
        use rayon::prelude::*;
        let mut data = vec![0f32; width * height];
        data.par_chunks_mut(width).enumerate().for_each(|(j, row)| {
            let y = y0 + j as f64 * texel;
            for (i, v) in row.iter_mut().enumerate() {
                *v = f(x0 + i as f64 * texel, y) as f32;
            }
        });
        Self { x0, y0, texel, width, height, data }
    }

    /// Bakes value noise covering `[x_min, x_max] × [y_min, y_max]` mm.
    pub fn noise(p: &TextureParams, seed: u64, texel: f64, x_range: (f64, f64), y_range: (f64, f64)) -> Self {
        let w = ((x_range.1 - x_range.0) / texel).ceil() as usize + 2;
        let h = ((y_range.1 - y_range.0) / texel).ceil() as usize + 2;
        let p = *p;
        Self::from_fn(x_range.0, y_range.0, texel, w, h, move |x, y| {
            (p.mean + p.contrast * value_noise(&p, seed, x, y)).clamp(0.0, 255.0)
        })
    }

    /// Bilinear lookup in texel coordinates, clamped at the border.
    #[inline]
    pub fn sample_texel(&self, tx: f64, ty: f64) -> f32 {
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        let tx = tx.clamp(0.0, max_x);
        let ty = ty.clamp(0.0, max_y);
        let (ix, iy) = (tx.floor(), ty.floor());
        let (fx, fy) = ((tx - ix) as f32, (ty - iy) as f32);
        let (ix, iy) = (ix as usize, iy as usize);
        let ix1 = (ix + 1).min(self.width - 1);
        let iy1 = (iy + 1).min(self.height - 1);
        let r0 = iy * self.width;
        let r1 = iy1 * self.width;
        let top = self.data[r0 + ix] + (self.data[r0 + ix1] - self.data[r0 + ix]) * fx;
        let bot = self.data[r1 + ix] + (self.data[r1 + ix1] - self.data[r1 + ix]) * fx;
        top + (bot - top) * fy
    }

    /// Bilinear lookup at plane position `(x, y)` mm.
    pub fn sample_mm(&self, x: f64, y: f64) -> f32 {
        self.sample_texel((x - self.x0) / self.texel, (y - self.y0) / self.texel)
    }
}
