//! Exhaustive normalized cross-correlation search with parabolic subpixel refinement.

use crate::frame::Frame;
use crate::geometry::Point2;

/// Peak correlation at or above this is treated as an exact integer match
/// and left unrefined.
const EXACT_MATCH: f64 = 1.0 - 1e-9;

/// Per-sample variance floor below which a patch counts as flat.
const FLAT_VARIANCE: f64 = 1e-6;

/// Split of a subpixel coordinate into integer pixel and fraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Anchor {
    pub ix: i64,
    pub iy: i64,
    pub fx: f32,
    pub fy: f32,
}

impl Anchor {
    pub fn of(p: Point2) -> Self {
        let ix = p.x.floor();
        let iy = p.y.floor();
        Self { ix: ix as i64, iy: iy as i64, fx: (p.x - ix) as f32, fy: (p.y - iy) as f32 }
    }
}

/// Zero-mean square template.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    radius: usize,
    values: Vec<f32>,
    norm: f64,
}

impl Template {
    /// Samples the `(2r+1)²` patch centred on `center`; `None` if it leaves the frame.
    pub fn sample(frame: &Frame, center: Point2, radius: usize) -> Option<Self> {
        let a = Anchor::of(center);
        let side = 2 * radius + 1;
        let raw = frame.sample_grid_split(a.ix - radius as i64, a.iy - radius as i64, a.fx, a.fy, side, side)?;
        Some(Self::from_raw(raw, radius))
    }

    fn from_raw(raw: Vec<f32>, radius: usize) -> Self {
        let n = raw.len() as f64;
        let mean = raw.iter().map(|&v| v as f64).sum::<f64>() / n;
        let values: Vec<f32> = raw.iter().map(|&v| (v as f64 - mean) as f32).collect();
        let ss: f64 = values.iter().map(|&v| (v as f64) * (v as f64)).sum();
        let norm = if ss <= FLAT_VARIANCE * n { 0.0 } else { ss.sqrt() };
        Self { radius, values, norm }
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn is_flat(&self) -> bool {
        self.norm == 0.0
    }
}

/// Result of a search: best offset (integer peak plus subpixel correction) and its score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Peak {
    pub dx: f64,
    pub dy: f64,
    pub score: f64,
}

/// Scores every integer offset `(ox, oy)` in the given inclusive ranges,
/// where candidate `(ox, oy)` is the patch centred at `center + (ox, oy)`.
///
/// Offsets whose patch leaves the frame are skipped. Returns `None` when no
/// offset is valid or the template is flat.
pub(crate) fn search(
    template: &Template,
    frame: &Frame,
    center: Point2,
    ox_range: (i64, i64),
    oy_range: (i64, i64),
) -> Option<Peak> {
    if template.is_flat() || !center.is_finite() {
        return None;
    }
    let r = template.radius as i64;
    let a = Anchor::of(center);
    let w = frame.width() as i64;
    let h = frame.height() as i64;
    let extra_x = i64::from(a.fx > 0.0);
    let extra_y = i64::from(a.fy > 0.0);
    // patch for offset o spans pixels [ix+o-r, ix+o+r(+1)]
    let ox0 = ox_range.0.max(r - a.ix);
    let ox1 = ox_range.1.min(w - 1 - r - extra_x - a.ix);
    let oy0 = oy_range.0.max(r - a.iy);
    let oy1 = oy_range.1.min(h - 1 - r - extra_y - a.iy);
    if ox0 > ox1 || oy0 > oy1 {
        return None;
    }
    let nx = (ox1 - ox0 + 1) as usize;
    let ny = (oy1 - oy0 + 1) as usize;
    let side = template.side();
    let rw = nx + side - 1;
    let rh = ny + side - 1;
    let mut region = frame.sample_grid_split(a.ix + ox0 - r, a.iy + oy0 - r, a.fx, a.fy, rw, rh)?;
    // Template is zero-mean, so centring the region changes no correlation.
    for v in region.iter_mut() {
        *v -= 128.0;
    }
    let scores = correlate(template, &region, rw, nx, ny);

    let (mut best, mut best_score) = (None, f64::NEG_INFINITY);
    for oy in 0..ny {
        for ox in 0..nx {
            let s = scores[oy * nx + ox];
            if s > best_score {
                best_score = s;
                best = Some((ox, oy));
            }
        }
    }
    let (bx, by) = best?;
    let at = |ox: usize, oy: usize| ncc_exact(template, &region, rw, ox, oy);
    let s0 = at(bx, by);
    let mut dx = 0.0;
    let mut dy = 0.0;
    if s0 < EXACT_MATCH {
        if bx > 0 && bx + 1 < nx {
            dx = parabola(at(bx - 1, by), s0, at(bx + 1, by));
        }
        if by > 0 && by + 1 < ny {
            dy = parabola(at(bx, by - 1), s0, at(bx, by + 1));
        }
    }
    Some(Peak {
        dx: (ox0 + bx as i64) as f64 + dx,
        dy: (oy0 + by as i64) as f64 + dy,
        score: if s0 >= EXACT_MATCH { 1.0 } else { s0 },
    })
}

/// NCC score for every offset, in f32 (used only to locate the peak).
fn correlate(template: &Template, region: &[f32], rw: usize, nx: usize, ny: usize) -> Vec<f64> {
    let side = template.side();
    let n = (side * side) as f64;
    let rh = ny + side - 1;

    let mut sum = vec![0f64; (rw + 1) * (rh + 1)];
    let mut sum_sq = vec![0f64; (rw + 1) * (rh + 1)];
    for y in 0..rh {
        let mut row = 0f64;
        let mut row_sq = 0f64;
        for x in 0..rw {
            let v = region[y * rw + x] as f64;
            row += v;
            row_sq += v * v;
            let i = (y + 1) * (rw + 1) + x + 1;
            sum[i] = sum[i - (rw + 1)] + row;
            sum_sq[i] = sum_sq[i - (rw + 1)] + row_sq;
        }
    }
    let box_sum = |t: &[f64], ox: usize, oy: usize| {
        let s = rw + 1;
        t[(oy + side) * s + ox + side] - t[oy * s + ox + side] - t[(oy + side) * s + ox] + t[oy * s + ox]
    };

    let mut out = vec![0f64; nx * ny];
    let mut acc = vec![0f32; nx];
    for oy in 0..ny {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for ty in 0..side {
            let row = &region[(oy + ty) * rw..(oy + ty + 1) * rw];
            let trow = &template.values[ty * side..(ty + 1) * side];
            for (tx, &t) in trow.iter().enumerate() {
                for (a, &v) in acc.iter_mut().zip(&row[tx..tx + nx]) {
                    *a += t * v;
                }
            }
        }
        for ox in 0..nx {
            let s1 = box_sum(&sum, ox, oy);
            let s2 = box_sum(&sum_sq, ox, oy);
            let var = s2 - s1 * s1 / n;
            out[oy * nx + ox] = if var <= FLAT_VARIANCE * n {
                0.0
            } else {
                acc[ox] as f64 / (template.norm * var.sqrt())
            };
        }
    }
    out
}

/// NCC at one offset in f64, computed directly.
fn ncc_exact(template: &Template, region: &[f32], rw: usize, ox: usize, oy: usize) -> f64 {
    let side = template.side();
    let n = (side * side) as f64;
    let mut s1 = 0f64;
    for ty in 0..side {
        for tx in 0..side {
            s1 += region[(oy + ty) * rw + ox + tx] as f64;
        }
    }
    let mean = s1 / n;
    let mut cross = 0f64;
    let mut var = 0f64;
    for ty in 0..side {
        for tx in 0..side {
            let v = region[(oy + ty) * rw + ox + tx] as f64 - mean;
            cross += template.values[ty * side + tx] as f64 * v;
            var += v * v;
        }
    }
    if var <= FLAT_VARIANCE * n {
        return 0.0;
    }
    cross / (template.norm * var.sqrt())
}

/// Vertex offset of the parabola through `(-1, a)`, `(0, b)`, `(1, c)`, clamped to ±0.5.
fn parabola(a: f64, b: f64, c: f64) -> f64 {
    let denom = a - 2.0 * b + c;
    if denom >= 0.0 {
        return 0.0;
    }
    (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(w: u32, h: u32, seed: u32) -> Frame {
        Frame::from_fn(w, h, 1, |x, y| {
            let mut v = x.wrapping_mul(374_761_393) ^ y.wrapping_mul(668_265_263) ^ seed.wrapping_mul(2_246_822_519);
            v = (v ^ (v >> 13)).wrapping_mul(1_274_126_177);
            (v >> 24) as u8
        })
        .unwrap()
    }

    #[test]
    fn parabola_vertex() {
        // samples of -(x-0.25)^2
        let f = |x: f64| -(x - 0.25) * (x - 0.25);
        assert!((parabola(f(-1.0), f(0.0), f(1.0)) - 0.25).abs() < 1e-12);
        assert_eq!(parabola(1.0, 0.0, 1.0), 0.0);
    }

    #[test]
    fn self_match_is_exact() {
        let f = textured(64, 64, 1);
        let c = Point2::new(30.4, 31.7);
        let t = Template::sample(&f, c, 5).unwrap();
        let p = search(&t, &f, c, (-6, 6), (-6, 6)).unwrap();
        assert_eq!((p.dx, p.dy), (0.0, 0.0));
        assert_eq!(p.score, 1.0);
    }

    #[test]
    fn finds_integer_shift() {
        let a = textured(80, 80, 2);
        let b = Frame::from_fn(80, 80, 1, |x, y| {
            if x >= 3 && y >= 2 {
                a.data()[((y - 2) * 80 + x - 3) as usize]
            } else {
                0
            }
        })
        .unwrap();
        let c = Point2::new(40.0, 40.0);
        let t = Template::sample(&a, c, 6).unwrap();
        let p = search(&t, &b, c, (-8, 8), (-8, 8)).unwrap();
        assert_eq!((p.dx, p.dy), (3.0, 2.0));
    }

    #[test]
    fn flat_template_has_no_peak() {
        let f = Frame::filled(40, 40, 1, 77).unwrap();
        let t = Template::sample(&f, Point2::new(20.0, 20.0), 4).unwrap();
        assert!(t.is_flat());
        assert!(search(&t, &f, Point2::new(20.0, 20.0), (-3, 3), (-3, 3)).is_none());
    }

    #[test]
    fn offsets_near_border_are_clipped() {
        let f = textured(40, 40, 3);
        let t = Template::sample(&f, Point2::new(6.0, 6.0), 4).unwrap();
        // only offsets >= -2 keep the patch inside the frame
        let p = search(&t, &f, Point2::new(6.0, 6.0), (-5, 5), (-5, 5)).unwrap();
        assert_eq!((p.dx, p.dy), (0.0, 0.0));
        assert!(search(&t, &f, Point2::new(1.0, 1.0), (-1, 1), (-1, 1)).is_none());
    }
}
