//! Ground-truth trajectory generators.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{ca_transition, process_noise, MotionModel};
use crate::numerics::{Mat, Vector};

use super::TruthState;

/// Trajectory family and its geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrajectoryKind {
    /// Lemniscate of Bernoulli at constant speed.
    EightDrive {
        /// Half-width `a` of the lemniscate, m.
        #[serde(default = "default_half_width")]
        half_width: f64,
        #[serde(default = "default_eight_speed")]
        speed: f64,
        /// Curve centre, m.
        #[serde(default = "default_eight_center")]
        center: [f64; 2],
        /// Rotation of the figure, rad.
        #[serde(default)]
        rotation: f64,
        /// Arc-length position at t = 0 as a fraction of the period.
        #[serde(default)]
        start_fraction: f64,
    },
    /// Road-following drive: straight and gently curved segments with mild
    /// speed changes.
    FollowDrive {
        #[serde(default = "default_follow_speed")]
        speed: f64,
        #[serde(default = "default_follow_start")]
        start: [f64; 2],
        #[serde(default)]
        heading: f64,
        /// Segments applied in order; the last one extends to the end.
        #[serde(default = "default_follow_segments")]
        segments: Vec<RoadSegment>,
    },
    /// Samples of the CA linear-Gaussian model `x_{k+1} = F x_k + v_k`.
    LinearGaussian {
        /// White-jerk intensity; zero disables process noise.
        #[serde(default = "default_lg_noise")]
        noise_intensity: f64,
        #[serde(default = "default_lg_initial_mean")]
        initial_mean: [f64; 6],
        /// Per-component standard deviation of the initial state.
        #[serde(default = "default_lg_initial_std")]
        initial_std: [f64; 6],
    },
    /// Straight constant-velocity driving, then a coordinated turn.
    ManeuverSwitch {
        #[serde(default = "default_follow_speed")]
        speed: f64,
        #[serde(default = "default_switch_turn_rate")]
        turn_rate: f64,
        #[serde(default = "default_switch_time")]
        switch_time: f64,
        #[serde(default = "default_follow_start")]
        start: [f64; 2],
        #[serde(default)]
        heading: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoadSegment {
    pub duration: f64,
    /// Path curvature, 1/m (positive turns left).
    #[serde(default)]
    pub curvature: f64,
    /// Longitudinal acceleration, m/s².
    #[serde(default)]
    pub accel: f64,
}

fn default_half_width() -> f64 {
    40.0
}
fn default_eight_speed() -> f64 {
    8.0
}
fn default_eight_center() -> [f64; 2] {
    [60.0, 0.0]
}
fn default_follow_speed() -> f64 {
    10.0
}
fn default_follow_start() -> [f64; 2] {
    [20.0, 0.0]
}
fn default_follow_segments() -> Vec<RoadSegment> {
    vec![
        RoadSegment {
            duration: 2.5,
            curvature: 0.0,
            accel: 0.0,
        },
        RoadSegment {
            duration: 3.0,
            curvature: 0.01,
            accel: 0.5,
        },
        RoadSegment {
            duration: 2.0,
            curvature: 0.0,
            accel: 0.0,
        },
        RoadSegment {
            duration: 3.0,
            curvature: -0.008,
            accel: -0.6,
        },
    ]
}
fn default_lg_noise() -> f64 {
    0.5
}
fn default_lg_initial_mean() -> [f64; 6] {
    [40.0, 0.0, 0.0, 0.0, 0.0, 0.0]
}
fn default_lg_initial_std() -> [f64; 6] {
    [10.0, 10.0, 3.0, 3.0, 1.0, 1.0]
}
fn default_switch_turn_rate() -> f64 {
    0.3
}
fn default_switch_time() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    #[serde(flatten)]
    pub kind: TrajectoryKind,
    /// Seconds.
    #[serde(default = "default_duration")]
    pub duration: f64,
    /// Samples per second.
    #[serde(default = "default_rate")]
    pub rate: f64,
}

fn default_duration() -> f64 {
    10.0
}
fn default_rate() -> f64 {
    10.0
}

impl TrajectorySpec {
    /// Number of samples, `round(duration · rate)`.
    pub fn steps(&self) -> usize {
        (self.duration * self.rate).round() as usize
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.rate
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidSpec(msg.to_owned()));
        if !(self.rate > 0.0 && self.duration > 0.0) || !(self.duration * self.rate >= 2.0) {
            return bad("duration·rate must be at least 2");
        }
        match &self.kind {
            TrajectoryKind::EightDrive {
                half_width, speed, ..
            } => {
                if !(*half_width > 0.0) {
                    return bad("lemniscate half-width must be positive");
                }
                if !(*speed > 0.0) {
                    return bad("speed must be positive");
                }
            }
            TrajectoryKind::FollowDrive { speed, segments, .. } => {
                if !(*speed >= 0.0) {
                    return bad("speed must be non-negative");
                }
                if segments.iter().any(|s| !(s.duration > 0.0)) {
                    return bad("segment durations must be positive");
                }
            }
            TrajectoryKind::LinearGaussian {
                noise_intensity,
                initial_std,
                ..
            } => {
                if !(*noise_intensity >= 0.0) || initial_std.iter().any(|s| !(*s >= 0.0)) {
                    return bad("noise levels must be non-negative");
                }
            }
            TrajectoryKind::ManeuverSwitch {
                speed, switch_time, ..
            } => {
                if !(*speed >= 0.0) || !(*switch_time >= 0.0) {
                    return bad("speed and switch time must be non-negative");
                }
            }
        }
        Ok(())
    }
}

/// Samples the trajectory at `k / rate` for `k = 0..steps`. Only the
/// linear-Gaussian kind draws from `rng`.
pub fn gen_trajectory<R: Rng>(spec: &TrajectorySpec, rng: &mut R) -> Result<Vec<TruthState>> {
    spec.validate()?;
    let n = spec.steps();
    let dt = spec.dt();
    let times = (0..n).map(|k| k as f64 * dt);
    Ok(match &spec.kind {
        TrajectoryKind::EightDrive {
            half_width,
            speed,
            center,
            rotation,
            start_fraction,
        } => {
            let curve = Lemniscate::new(*half_width);
            let s0 = start_fraction.rem_euclid(1.0) * curve.length;
            times
                .map(|t| curve.state_at(s0 + speed * t, *speed).rotated(*rotation, *center))
                .collect()
        }
        TrajectoryKind::FollowDrive {
            speed,
            start,
            heading,
            segments,
        } => road_drive(*start, *heading, *speed, segments, n, dt),
        TrajectoryKind::LinearGaussian {
            noise_intensity,
            initial_mean,
            initial_std,
        } => linear_gaussian(*noise_intensity, initial_mean, initial_std, n, dt, rng)?,
        TrajectoryKind::ManeuverSwitch {
            speed,
            turn_rate,
            switch_time,
            start,
            heading,
        } => times
            .map(|t| maneuver_switch(t, *speed, *turn_rate, *switch_time, *start, *heading))
            .collect(),
    })
}

impl TruthState {
    fn rotated(self, angle: f64, offset: [f64; 2]) -> Self {
        let (s, c) = angle.sin_cos();
        let rot = |v: [f64; 2]| [c * v[0] - s * v[1], s * v[0] + c * v[1]];
        let p = rot(self.pos);
        Self {
            pos: [p[0] + offset[0], p[1] + offset[1]],
            vel: rot(self.vel),
            acc: rot(self.acc),
        }
    }
}

// ---------------------------------------------------------------------------
// Lemniscate
// ---------------------------------------------------------------------------

const GL5_NODES: [f64; 5] = [
    0.0,
    -0.538_469_310_105_683_1,
    0.538_469_310_105_683_1,
    -0.906_179_845_938_664,
    0.906_179_845_938_664,
];
const GL5_WEIGHTS: [f64; 5] = [
    0.568_888_888_888_888_9,
    0.478_628_670_499_366_5,
    0.478_628_670_499_366_5,
    0.236_926_885_056_189_1,
    0.236_926_885_056_189_1,
];

/// `x = a cos θ / (1 + sin²θ)`, `y = a sin θ cos θ / (1 + sin²θ)`,
/// reparametrized by arc length through a tabulated `s(θ)`.
#[derive(Debug, Clone)]
pub struct Lemniscate {
    a: f64,
    /// `s(θᵢ)` on a uniform θ grid over one period.
    table: Vec<f64>,
    pub length: f64,
}

const TABLE_INTERVALS: usize = 4096;

impl Lemniscate {
    pub fn new(a: f64) -> Self {
        let h = std::f64::consts::TAU / TABLE_INTERVALS as f64;
        let mut table = Vec::with_capacity(TABLE_INTERVALS + 1);
        table.push(0.0);
        let mut acc = 0.0;
        for i in 0..TABLE_INTERVALS {
            let lo = i as f64 * h;
            acc += Self::gauss(a, lo, lo + h);
            table.push(acc);
        }
        Self {
            a,
            length: acc,
            table,
        }
    }

    fn speed_param(a: f64, theta: f64) -> f64 {
        let (d1, _) = Self::derivs(a, theta);
        (d1[0] * d1[0] + d1[1] * d1[1]).sqrt()
    }

    fn gauss(a: f64, lo: f64, hi: f64) -> f64 {
        let mid = 0.5 * (lo + hi);
        let half = 0.5 * (hi - lo);
        GL5_NODES
            .iter()
            .zip(GL5_WEIGHTS)
            .map(|(x, w)| w * Self::speed_param(a, mid + half * x))
            .sum::<f64>()
            * half
    }

    /// Point on the curve at parameter θ.
    pub fn point(&self, theta: f64) -> [f64; 2] {
        let (s, c) = theta.sin_cos();
        let d = 1.0 + s * s;
        [self.a * c / d, self.a * s * c / d]
    }

    /// First and second derivatives with respect to θ.
    pub fn derivs(a: f64, theta: f64) -> ([f64; 2], [f64; 2]) {
        let (s, c) = theta.sin_cos();
        let (s2, c2) = (2.0 * theta).sin_cos();
        let d = 1.0 + s * s;
        let d1 = s2;
        let d2 = 2.0 * c2;
        // x = a c / d
        let n = -s * d - c * d1;
        let n1 = -c * d - c * d2;
        let x1 = a * n / (d * d);
        let x2 = a * (n1 / (d * d) - 2.0 * n * d1 / (d * d * d));
        // y = a m / d with m = sin 2θ / 2
        let m = 0.5 * s2;
        let m1 = c2;
        let m2 = -2.0 * s2;
        let k = m1 * d - m * d1;
        let k1 = m2 * d - m * d2;
        let y1 = a * k / (d * d);
        let y2 = a * (k1 / (d * d) - 2.0 * k * d1 / (d * d * d));
        ([x1, y1], [x2, y2])
    }

    /// Parameter θ where the arc length from θ = 0 equals `s` (mod length).
    pub fn theta_at(&self, s: f64) -> f64 {
        let period = std::f64::consts::TAU;
        let laps = (s / self.length).floor();
        let s = s - laps * self.length;
        let idx = self.table.partition_point(|v| *v <= s).clamp(1, TABLE_INTERVALS) - 1;
        let h = period / TABLE_INTERVALS as f64;
        let lo = idx as f64 * h;
        let (s_lo, s_hi) = (self.table[idx], self.table[idx + 1]);
        let mut theta = lo + h * (s - s_lo) / (s_hi - s_lo);
        for _ in 0..8 {
            let f = s_lo + Self::gauss(self.a, lo, theta) - s;
            let step = f / Self::speed_param(self.a, theta);
            theta -= step;
            if step.abs() < 1e-15 {
                break;
            }
        }
        theta + laps * period
    }

    /// State at arc length `s` travelling at constant `speed`.
    pub fn state_at(&self, s: f64, speed: f64) -> TruthState {
        let theta = self.theta_at(s);
        let (d1, d2) = Self::derivs(self.a, theta);
        let norm2 = d1[0] * d1[0] + d1[1] * d1[1];
        let norm = norm2.sqrt();
        let tangent = [d1[0] / norm, d1[1] / norm];
        let along = d2[0] * tangent[0] + d2[1] * tangent[1];
        // d²r/ds² = (r'' − (r''·T) T) / |r'|²
        let curv = [
            (d2[0] - along * tangent[0]) / norm2,
            (d2[1] - along * tangent[1]) / norm2,
        ];
        TruthState {
            pos: self.point(theta),
            vel: [speed * tangent[0], speed * tangent[1]],
            acc: [speed * speed * curv[0], speed * speed * curv[1]],
        }
    }
}

// ---------------------------------------------------------------------------
// Road drive
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
struct Unicycle {
    x: f64,
    y: f64,
    heading: f64,
    speed: f64,
}

impl Unicycle {
    fn deriv(&self, curvature: f64, accel: f64) -> [f64; 4] {
        let (s, c) = self.heading.sin_cos();
        [
            self.speed * c,
            self.speed * s,
            self.speed * curvature,
            accel,
        ]
    }

    fn offset(&self, d: [f64; 4], h: f64) -> Self {
        Self {
            x: self.x + h * d[0],
            y: self.y + h * d[1],
            heading: self.heading + h * d[2],
            speed: self.speed + h * d[3],
        }
    }

    fn rk4(&self, curvature: f64, accel: f64, h: f64) -> Self {
        let k1 = self.deriv(curvature, accel);
        let k2 = self.offset(k1, h / 2.0).deriv(curvature, accel);
        let k3 = self.offset(k2, h / 2.0).deriv(curvature, accel);
        let k4 = self.offset(k3, h).deriv(curvature, accel);
        let mut d = [0.0; 4];
        for i in 0..4 {
            d[i] = (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) / 6.0;
        }
        self.offset(d, h)
    }

    fn truth(&self, curvature: f64, accel: f64) -> TruthState {
        let (s, c) = self.heading.sin_cos();
        let lat = self.speed * self.speed * curvature;
        TruthState {
            pos: [self.x, self.y],
            vel: [self.speed * c, self.speed * s],
            acc: [accel * c - lat * s, accel * s + lat * c],
        }
    }
}

fn road_drive(
    start: [f64; 2],
    heading: f64,
    speed: f64,
    segments: &[RoadSegment],
    n: usize,
    dt: f64,
) -> Vec<TruthState> {
    const SUBSTEPS: usize = 50;
    let segment_at = |t: f64| {
        let mut end = 0.0;
        for seg in segments {
            end += seg.duration;
            if t < end - 1e-12 {
                return *seg;
            }
        }
        segments.last().copied().unwrap_or(RoadSegment {
            duration: f64::INFINITY,
            curvature: 0.0,
            accel: 0.0,
        })
    };
    // segment boundaries split integration intervals so every RK4 substep
    // sees constant inputs
    let mut bounds = Vec::new();
    let mut end = 0.0;
    for seg in segments {
        end += seg.duration;
        bounds.push(end);
    }
    let mut state = Unicycle {
        x: start[0],
        y: start[1],
        heading,
        speed,
    };
    let mut out = Vec::with_capacity(n);
    let mut t = 0.0;
    for k in 0..n {
        let target = k as f64 * dt;
        while t < target - 1e-12 {
            let next_bound = bounds
                .iter()
                .copied()
                .find(|b| *b > t + 1e-12)
                .unwrap_or(f64::INFINITY);
            let stop = target.min(next_bound);
            let seg = segment_at(t);
            let h = (stop - t) / SUBSTEPS as f64;
            for _ in 0..SUBSTEPS {
                // a vehicle does not reverse: clamp deceleration at standstill
                let accel = if state.speed <= 0.0 && seg.accel < 0.0 { 0.0 } else { seg.accel };
                state = state.rk4(seg.curvature, accel, h);
                state.speed = state.speed.max(0.0);
            }
            t = stop;
        }
        let seg = segment_at(target);
        let accel = if state.speed <= 0.0 && seg.accel < 0.0 { 0.0 } else { seg.accel };
        out.push(state.truth(seg.curvature, accel));
    }
    out
}

// ---------------------------------------------------------------------------
// Linear-Gaussian CA model and maneuver switch
// ---------------------------------------------------------------------------

fn linear_gaussian<R: Rng>(
    noise_intensity: f64,
    mean: &[f64; 6],
    std: &[f64; 6],
    n: usize,
    dt: f64,
    rng: &mut R,
) -> Result<Vec<TruthState>> {
    let f = ca_transition(dt)?;
    let chol: Option<Mat> = if noise_intensity > 0.0 {
        let q = process_noise(&MotionModel::ca(noise_intensity)?, dt)?;
        Some(q.cholesky().ok_or(Error::NotPositiveDefinite)?.l())
    } else {
        None
    };
    let mut x = Vector::from_fn(6, |i, _| mean[i] + std[i] * rng.sample::<f64, _>(StandardNormal));
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        if k > 0 {
            x = &f * &x;
            if let Some(l) = &chol {
                let w = Vector::from_fn(6, |_, _| rng.sample::<f64, _>(StandardNormal));
                x += l * w;
            }
        }
        out.push(TruthState::from_vector(&x));
    }
    Ok(out)
}

fn maneuver_switch(
    t: f64,
    speed: f64,
    turn_rate: f64,
    switch_time: f64,
    start: [f64; 2],
    heading: f64,
) -> TruthState {
    let (s, c) = heading.sin_cos();
    let v0 = [speed * c, speed * s];
    if t < switch_time {
        return TruthState {
            pos: [start[0] + v0[0] * t, start[1] + v0[1] * t],
            vel: v0,
            acc: [0.0, 0.0],
        };
    }
    let p_s = [start[0] + v0[0] * switch_time, start[1] + v0[1] * switch_time];
    let tau = t - switch_time;
    let wt = turn_rate * tau;
    let (sw, cw) = wt.sin_cos();
    let (a, b) = if wt.abs() < 1e-9 {
        (tau, 0.5 * turn_rate * tau * tau)
    } else {
        (sw / turn_rate, (1.0 - cw) / turn_rate)
    };
    let vel = [cw * v0[0] - sw * v0[1], sw * v0[0] + cw * v0[1]];
    TruthState {
        pos: [
            p_s[0] + a * v0[0] - b * v0[1],
            p_s[1] + b * v0[0] + a * v0[1],
        ],
        vel,
        acc: [-turn_rate * vel[1], turn_rate * vel[0]],
    }
}
