//! Synthetic scenarios: ground-truth trajectories, radar cluster simulation
//! and the line-delimited sequence file format.

mod io;
mod trajectory;

pub use io::{load_sequences, read_sequences, save_sequences, write_sequences, SCHEMA_VERSION};
pub use trajectory::{gen_trajectory, Lemniscate, RoadSegment, TrajectoryKind, TrajectorySpec};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Vector;

/// Ground-truth kinematic state at one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthState {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub acc: [f64; 2],
}

impl TruthState {
    /// `(x, y, vx, vy, ax, ay)`.
    pub fn to_vector(&self) -> Vector {
        Vector::from_vec(self.to_array().to_vec())
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.pos[0], self.pos[1], self.vel[0], self.vel[1], self.acc[0], self.acc[1],
        ]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            pos: [a[0], a[1]],
            vel: [a[2], a[3]],
            acc: [a[4], a[5]],
        }
    }

    pub fn from_vector(v: &Vector) -> Self {
        Self::from_array([v[0], v[1], v[2], v[3], v[4], v[5]])
    }

    pub fn range(&self) -> f64 {
        self.pos[0].hypot(self.pos[1])
    }

    pub fn speed(&self) -> f64 {
        self.vel[0].hypot(self.vel[1])
    }
}

/// One radar detection with compensated Cartesian velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadarPoint {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub t: f64,
    pub track_id: u64,
}

impl RadarPoint {
    /// Measurement vector `(x, y, vx, vy)`.
    pub fn measurement(&self) -> Vector {
        Vector::from_vec(vec![self.x, self.y, self.vx, self.vy])
    }

    pub fn speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub t: f64,
    pub cluster: Vec<RadarPoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackSequence {
    pub id: u64,
    pub frame: String,
    pub steps: Vec<Step>,
    pub truth: Vec<TruthState>,
}

impl TrackSequence {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn point_count(&self) -> usize {
        self.steps.iter().map(|s| s.cluster.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.len() != self.truth.len() {
            return Err(Error::LengthMismatch {
                left: self.steps.len(),
                right: self.truth.len(),
            });
        }
        if self.steps.iter().any(|s| s.cluster.is_empty()) {
            return Err(Error::EmptyCluster);
        }
        if self.steps.windows(2).any(|w| w[1].t < w[0].t) {
            return Err(Error::InvalidSpec("timestamps decrease".into()));
        }
        Ok(())
    }
}

fn default_extent() -> Option<[f64; 2]> {
    Some([4.5, 1.8])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSpec {
    #[serde(default = "default_pos_std")]
    pub pos_noise_std: f64,
    #[serde(default = "default_vel_std")]
    pub vel_noise_std: f64,
    /// Mean of the shifted-Poisson point count at zero range.
    #[serde(default = "default_ppc")]
    pub points_per_cluster_mean: f64,
    /// The extra points beyond the first thin out linearly to zero here.
    #[serde(default = "default_detection_range")]
    pub detection_range: f64,
    /// Object length and width; `None` puts every point at the reference.
    #[serde(default = "default_extent")]
    pub extent: Option<[f64; 2]>,
}

fn default_pos_std() -> f64 {
    0.5
}
fn default_vel_std() -> f64 {
    0.3
}
fn default_ppc() -> f64 {
    4.0
}
fn default_detection_range() -> f64 {
    200.0
}

impl Default for SensorSpec {
    fn default() -> Self {
        Self {
            pos_noise_std: default_pos_std(),
            vel_noise_std: default_vel_std(),
            points_per_cluster_mean: default_ppc(),
            detection_range: default_detection_range(),
            extent: default_extent(),
        }
    }
}

impl SensorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.pos_noise_std > 0.0 && self.vel_noise_std > 0.0) {
            return Err(Error::InvalidSpec("noise standard deviations must be positive".into()));
        }
        if !(self.points_per_cluster_mean >= 1.0) {
            return Err(Error::InvalidSpec("points_per_cluster_mean must be at least 1".into()));
        }
        if !(self.detection_range > 0.0) {
            return Err(Error::InvalidSpec("detection_range must be positive".into()));
        }
        if let Some([l, w]) = self.extent {
            if !(l >= 0.0 && w >= 0.0) {
                return Err(Error::InvalidSpec("extent must be non-negative".into()));
            }
        }
        Ok(())
    }

    /// Measurement covariance of a single point for this sensor, ignoring extent.
    pub fn r_matrix(&self) -> crate::numerics::Mat {
        crate::motion::measurement_noise(self.pos_noise_std, self.vel_noise_std)
    }

    /// Point covariance with the extent spread folded into the position
    /// variance (uniform offsets, averaged over orientation).
    pub fn effective_r(&self) -> crate::numerics::Mat {
        let spread = self.extent.map_or(0.0, |[l, w]| (l * l + w * w) / 24.0);
        let pos_std = (self.pos_noise_std.powi(2) + spread).sqrt();
        crate::motion::measurement_noise(pos_std, self.vel_noise_std)
    }
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Draws the radar clusters for a truth trajectory sampled at `rate`.
pub fn simulate_radar<R: Rng>(
    truth: &[TruthState],
    rate: f64,
    sensor: &SensorSpec,
    id: u64,
    rng: &mut R,
) -> Result<TrackSequence> {
    sensor.validate()?;
    if truth.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut steps = Vec::with_capacity(truth.len());
    for (k, s) in truth.iter().enumerate() {
        let t = k as f64 / rate;
        let fade = (1.0 - s.range() / sensor.detection_range).max(0.0);
        let extra_mean = (sensor.points_per_cluster_mean - 1.0) * fade;
        let extra = if extra_mean > 0.0 {
            Poisson::new(extra_mean)
                .map_err(|e| Error::InvalidSpec(e.to_string()))?
                .sample(rng) as usize
        } else {
            0
        };
        let heading = if s.speed() > 1e-9 { s.vel[1].atan2(s.vel[0]) } else { 0.0 };
        let (sh, ch) = heading.sin_cos();
        let cluster = (0..1 + extra)
            .map(|_| {
                let (dx, dy) = match sensor.extent {
                    Some([len, wid]) => {
                        let u = (rng.random::<f64>() - 0.5) * len;
                        let v = (rng.random::<f64>() - 0.5) * wid;
                        (ch * u - sh * v, sh * u + ch * v)
                    }
                    None => (0.0, 0.0),
                };
                RadarPoint {
                    x: s.pos[0] + dx + sensor.pos_noise_std * normal(rng),
                    y: s.pos[1] + dy + sensor.pos_noise_std * normal(rng),
                    vx: s.vel[0] + sensor.vel_noise_std * normal(rng),
                    vy: s.vel[1] + sensor.vel_noise_std * normal(rng),
                    t,
                    track_id: id,
                }
            })
            .collect();
        steps.push(Step { t, cluster });
    }
    Ok(TrackSequence {
        id,
        frame: "global".into(),
        steps,
        truth: truth.to_vec(),
    })
}

/// A batch of sequences drawn from one trajectory family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub trajectory: TrajectorySpec,
    #[serde(default)]
    pub sensor: SensorSpec,
    pub count: usize,
    #[serde(default)]
    pub first_id: u64,
    /// Draw a random start point / heading per sequence so the corpus is not
    /// `count` copies of one path.
    #[serde(default = "default_true")]
    pub vary_start: bool,
}

fn default_true() -> bool {
    true
}

/// Independent generator for sequence `id` under a corpus seed.
pub fn sequence_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn varied<R: Rng>(spec: &TrajectorySpec, rng: &mut R) -> TrajectorySpec {
    let mut spec = spec.clone();
    match &mut spec.kind {
        TrajectoryKind::EightDrive { start_fraction, .. } => *start_fraction = rng.random(),
        TrajectoryKind::FollowDrive { heading, .. }
        | TrajectoryKind::ManeuverSwitch { heading, .. } => {
            *heading += (rng.random::<f64>() - 0.5) * 0.6;
        }
        TrajectoryKind::LinearGaussian { .. } => {}
    }
    spec
}

pub fn generate_sequence(spec: &CorpusSpec, seed: u64, id: u64) -> Result<TrackSequence> {
    let mut rng = sequence_rng(seed, id);
    let traj = if spec.vary_start {
        varied(&spec.trajectory, &mut rng)
    } else {
        spec.trajectory.clone()
    };
    let truth = gen_trajectory(&traj, &mut rng)?;
    simulate_radar(&truth, traj.rate, &spec.sensor, id, &mut rng)
}

/// Generates `count` sequences with ids `first_id..`. Sequences are built in
/// parallel; the result is ordered by id and independent of thread count.
pub fn generate_corpus(spec: &CorpusSpec, seed: u64) -> Result<Vec<TrackSequence>> {
    spec.trajectory.validate()?;
    spec.sensor.validate()?;
    (0..spec.count as u64)
        .into_par_iter()
        .map(|i| generate_sequence(spec, seed, spec.first_id + i))
        .collect()
}
