use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::geometry::Point3;

/// Motion axes of an evaluation stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axes {
    Z,
    XY,
    XYZ,
}

impl Axes {
    pub const ALL: [Axes; 3] = [Axes::Z, Axes::XY, Axes::XYZ];

    pub fn mask(self) -> [bool; 3] {
        match self {
            Axes::Z => [false, false, true],
            Axes::XY => [true, true, false],
            Axes::XYZ => [true, true, true],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Axes::Z => "z",
            Axes::XY => "xy",
            Axes::XYZ => "xyz",
        }
    }
}

impl fmt::Display for Axes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Axes {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "z" => Ok(Axes::Z),
            "xy" => Ok(Axes::XY),
            "xyz" => Ok(Axes::XYZ),
            other => Err(format!("unknown axes '{other}' (expected z, xy or xyz)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryParams {
    pub seed: u64,
    pub velocity_mm_s: f64,
    pub duration_s: f64,
    pub cube_mm: f64,
    pub axes: Axes,
    pub fps: f64,
}

impl TrajectoryParams {
    pub fn validate(&self) -> Result<(), SimError> {
        let positive = |v: f64, name: &str| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(SimError::InvalidParameter(format!("{name} must be positive, got {v}")))
            }
        };
        positive(self.velocity_mm_s, "velocity_mm_s")?;
        positive(self.duration_s, "duration_s")?;
        positive(self.cube_mm, "cube_mm")?;
        positive(self.fps, "fps")
    }

    pub fn n_frames(&self) -> usize {
        (self.duration_s * self.fps).round() as usize + 1
    }
}

/// Constant-speed polyline through random waypoints, sampled once per frame.
///
/// Positions are robot-frame mm of the target reference point; the path
/// starts at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub params: TrajectoryParams,
    pub samples: Vec<Point3>,
    pub waypoints: Vec<Point3>,
    cumulative: Vec<f64>,
}

impl Trajectory {
    /// A trajectory that never moves.
    pub fn stationary(n_frames: usize, fps: f64) -> Self {
        let params = TrajectoryParams { seed: 0, velocity_mm_s: 0.0, duration_s: (n_frames.max(1) - 1) as f64 / fps, cube_mm: 0.0, axes: Axes::XYZ, fps };
        Self { params, samples: vec![Point3::ZERO; n_frames], waypoints: vec![Point3::ZERO], cumulative: vec![0.0] }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn time_of(&self, frame: usize) -> f64 {
        frame as f64 / self.params.fps
    }

    fn total_length(&self) -> f64 {
        self.params.velocity_mm_s * (self.samples.len().saturating_sub(1)) as f64 / self.params.fps
    }

    fn at_arc(&self, s: f64) -> Point3 {
        if self.waypoints.len() < 2 {
            return self.waypoints[0];
        }
        let s = s.clamp(0.0, *self.cumulative.last().unwrap());
        let i = match self.cumulative.partition_point(|&c| c <= s) {
            0 => 0,
            k => (k - 1).min(self.waypoints.len() - 2),
        };
        let (a, b) = (self.waypoints[i], self.waypoints[i + 1]);
        let len = self.cumulative[i + 1] - self.cumulative[i];
        a + (b - a) * ((s - self.cumulative[i]) / len)
    }

    /// Position at continuous time `t_s`, clamped to the sampled span.
    pub fn position_at(&self, t_s: f64) -> Point3 {
        if self.params.velocity_mm_s == 0.0 {
            return self.samples.first().copied().unwrap_or(Point3::ZERO);
        }
        self.at_arc((self.params.velocity_mm_s * t_s).clamp(0.0, self.total_length()))
    }

    /// Length of the travelled polyline, corners included.
    pub fn path_length(&self) -> f64 {
        let total = self.total_length();
        let mut pts: Vec<(f64, Point3)> = self
            .samples
            .iter()
            .enumerate()
            .map(|(k, p)| (self.params.velocity_mm_s * k as f64 / self.params.fps, *p))
            .collect();
        for (c, w) in self.cumulative.iter().zip(&self.waypoints) {
            if *c > 0.0 && *c < total {
                pts.push((*c, *w));
            }
        }
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        pts.windows(2).map(|w| (w[1].1 - w[0].1).norm()).sum()
    }

    /// True when no waypoint lies strictly inside the arc between frames
    /// `k` and `k + 1`.
    pub fn is_straight_step(&self, k: usize) -> bool {
        let v = self.params.velocity_mm_s / self.params.fps;
        let (s0, s1) = (v * k as f64, v * (k + 1) as f64);
        !self.cumulative.iter().any(|&c| c > s0 && c < s1)
    }
}

/// Random piecewise-linear path inside the centred cube, moving only along `axes`.
pub fn gen_trajectory(params: TrajectoryParams) -> Result<Trajectory, SimError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mask = params.axes.mask();
    let half = params.cube_mm / 2.0;
    let n = params.n_frames();
    let total = params.velocity_mm_s * (n - 1) as f64 / params.fps;

    let mut waypoints = vec![Point3::ZERO];
    let mut cumulative = vec![0.0];
    while *cumulative.last().unwrap() < total {
        let mut c = [0.0; 3];
        for (v, on) in c.iter_mut().zip(mask) {
            if on {
                *v = rng.gen_range(-half..=half);
            }
        }
        let w = Point3::from_array(c);
        let len = (w - *waypoints.last().unwrap()).norm();
        if len < 1e-6 {
            continue;
        }
        cumulative.push(cumulative.last().unwrap() + len);
        waypoints.push(w);
    }

    let mut traj = Trajectory { params, samples: Vec::with_capacity(n), waypoints, cumulative };
    traj.samples = (0..n).map(|k| traj.at_arc(params.velocity_mm_s * k as f64 / params.fps)).collect();
    Ok(traj)
}
