//! Kinematic models: state transition, observation and process-noise builders.
//!
//! State layouts are `(x, y, ẋ, ẏ)` for the 4-dim CV/CT models and
//! `(x, y, ẋ, ẏ, ẍ, ÿ)` for the 6-dim CA model. Measurements are
//! `(x, y, ẋ, ẏ)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Mat;

pub const CA_DIM: usize = 6;
pub const CV_DIM: usize = 4;
pub const OBS_DIM: usize = 4;

/// Below this |ω·dt| the CT integrals switch to their series expansion.
const CT_SERIES_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[serde(alias = "cv")]
    ConstantVelocity,
    #[serde(alias = "ca")]
    ConstantAcceleration,
    #[serde(alias = "ct")]
    ConstantTurn,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionModel {
    pub kind: ModelKind,
    /// Spectral density of the driving white noise (acceleration for CV/CT,
    /// jerk for CA).
    pub noise_intensity: f64,
    /// Turn rate in rad/s; only read by CT.
    #[serde(default)]
    pub turn_rate: f64,
}

/// The `(F, H, Q, R)` quadruple of one linear-Gaussian model at a given step.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemMatrices {
    pub f: Mat,
    pub h: Mat,
    pub q: Mat,
    pub r: Mat,
}

impl SystemMatrices {
    pub fn state_dim(&self) -> usize {
        self.f.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.h.nrows()
    }
}

fn check_dt(dt: f64) -> Result<()> {
    if dt < 0.0 || !dt.is_finite() {
        Err(Error::NegativeDt(dt))
    } else {
        Ok(())
    }
}

/// Constant-acceleration transition, both axes independent.
pub fn ca_transition(dt: f64) -> Result<Mat> {
    check_dt(dt)?;
    let mut f = Mat::identity(CA_DIM, CA_DIM);
    for axis in 0..2 {
        f[(axis, axis + 2)] = dt;
        f[(axis, axis + 4)] = 0.5 * dt * dt;
        f[(axis + 2, axis + 4)] = dt;
    }
    Ok(f)
}

pub fn cv_transition(dt: f64) -> Result<Mat> {
    check_dt(dt)?;
    let mut f = Mat::identity(CV_DIM, CV_DIM);
    f[(0, 2)] = dt;
    f[(1, 3)] = dt;
    Ok(f)
}

/// Coordinated turn at a fixed rate `omega` (rad/s, positive counter-clockwise).
pub fn ct_transition(dt: f64, omega: f64) -> Result<Mat> {
    check_dt(dt)?;
    let wt = omega * dt;
    let (s, c) = wt.sin_cos();
    // sin(ωT)/ω and (1 - cos(ωT))/ω
    let (a, b) = if wt.abs() < CT_SERIES_THRESHOLD {
        (
            dt - omega * omega * dt.powi(3) / 6.0,
            omega * dt * dt / 2.0 - omega.powi(3) * dt.powi(4) / 24.0,
        )
    } else {
        (s / omega, (1.0 - c) / omega)
    };
    Ok(Mat::from_row_slice(
        4,
        4,
        &[
            1.0, 0.0, a, -b, //
            0.0, 1.0, b, a, //
            0.0, 0.0, c, -s, //
            0.0, 0.0, s, c,
        ],
    ))
}

/// `[I₄ | 0]`: picks position and velocity out of the CA state.
pub fn observation_matrix() -> Mat {
    observation_matrix_for(CA_DIM)
}

pub fn observation_matrix_for(state_dim: usize) -> Mat {
    Mat::from_fn(OBS_DIM, state_dim, |i, j| if i == j { 1.0 } else { 0.0 })
}

/// Per-axis continuous white-noise integral `∫₀ᵀ φ(τ) φ(τ)ᵀ dτ` for an
/// integrator chain of the given order (2 = position/velocity, 3 = adds
/// acceleration).
fn axis_noise_block(order: usize, dt: f64) -> [[f64; 3]; 3] {
    let t = dt;
    let mut b = [[0.0; 3]; 3];
    match order {
        2 => {
            b[0][0] = t.powi(3) / 3.0;
            b[0][1] = t.powi(2) / 2.0;
            b[1][0] = b[0][1];
            b[1][1] = t;
        }
        3 => {
            b[0][0] = t.powi(5) / 20.0;
            b[0][1] = t.powi(4) / 8.0;
            b[0][2] = t.powi(3) / 6.0;
            b[1][1] = t.powi(3) / 3.0;
            b[1][2] = t.powi(2) / 2.0;
            b[2][2] = t;
            for i in 0..3 {
                for j in 0..i {
                    b[i][j] = b[j][i];
                }
            }
        }
        _ => unreachable!("integrator order must be 2 or 3"),
    }
    b
}

impl MotionModel {
    pub fn new(kind: ModelKind, noise_intensity: f64, turn_rate: f64) -> Result<Self> {
        let m = Self {
            kind,
            noise_intensity,
            turn_rate,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn cv(noise_intensity: f64) -> Result<Self> {
        Self::new(ModelKind::ConstantVelocity, noise_intensity, 0.0)
    }

    pub fn ca(noise_intensity: f64) -> Result<Self> {
        Self::new(ModelKind::ConstantAcceleration, noise_intensity, 0.0)
    }

    pub fn ct(noise_intensity: f64, turn_rate: f64) -> Result<Self> {
        Self::new(ModelKind::ConstantTurn, noise_intensity, turn_rate)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_intensity > 0.0 && self.noise_intensity.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "noise intensity must be positive, got {}",
                self.noise_intensity
            )));
        }
        if !self.turn_rate.is_finite() {
            return Err(Error::InvalidSpec("turn rate must be finite".into()));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        match self.kind {
            ModelKind::ConstantAcceleration => CA_DIM,
            ModelKind::ConstantVelocity | ModelKind::ConstantTurn => CV_DIM,
        }
    }

    pub fn label(&self) -> String {
        match self.kind {
            ModelKind::ConstantVelocity => "CV".into(),
            ModelKind::ConstantAcceleration => "CA".into(),
            ModelKind::ConstantTurn => format!("CT({:+})", self.turn_rate),
        }
    }

    pub fn transition(&self, dt: f64) -> Result<Mat> {
        match self.kind {
            ModelKind::ConstantVelocity => cv_transition(dt),
            ModelKind::ConstantAcceleration => ca_transition(dt),
            ModelKind::ConstantTurn => ct_transition(dt, self.turn_rate),
        }
    }

    pub fn observation(&self) -> Mat {
        observation_matrix_for(self.state_dim())
    }

    pub fn system(&self, dt: f64, r: &Mat) -> Result<SystemMatrices> {
        Ok(SystemMatrices {
            f: self.transition(dt)?,
            h: self.observation(),
            q: process_noise(self, dt)?,
            r: r.clone(),
        })
    }
}

/// Continuous white-noise discretization: white acceleration for CV/CT,
/// white jerk for CA, scaled by the model's noise intensity.
pub fn process_noise(model: &MotionModel, dt: f64) -> Result<Mat> {
    check_dt(dt)?;
    let order = match model.kind {
        ModelKind::ConstantAcceleration => 3,
        ModelKind::ConstantVelocity | ModelKind::ConstantTurn => 2,
    };
    let block = axis_noise_block(order, dt);
    let n = model.state_dim();
    let mut q = Mat::zeros(n, n);
    // interleaved layout: derivative d of axis a lives at index 2d + a
    for axis in 0..2 {
        for i in 0..order {
            for j in 0..order {
                q[(2 * i + axis, 2 * j + axis)] = model.noise_intensity * block[i][j];
            }
        }
    }
    Ok(q)
}

/// Measurement covariance `diag(σp², σp², σv², σv²)`.
pub fn measurement_noise(pos_std: f64, vel_std: f64) -> Mat {
    let p = pos_std * pos_std;
    let v = vel_std * vel_std;
    Mat::from_diagonal(&crate::numerics::Vector::from_vec(vec![p, p, v, v]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{min_eigenvalue, Vector};
    use std::f64::consts::PI;

    #[test]
    fn ca_zero_dt_is_identity() {
        assert_eq!(ca_transition(0.0).unwrap(), Mat::identity(6, 6));
    }

    #[test]
    fn ca_unit_step_moves_position() {
        let x = Vector::from_vec(vec![0.0, 0.0, 1.0, 0.0, 2.0, 0.0]);
        let next = ca_transition(1.0).unwrap() * x;
        assert_eq!(next[0], 2.0);
        assert_eq!(next[2], 3.0);
    }

    #[test]
    fn ca_semigroup() {
        let x = Vector::from_vec(vec![1.0, -3.0, 2.5, 0.7, -0.4, 1.1]);
        let half = ca_transition(0.5).unwrap();
        let once = ca_transition(1.0).unwrap() * &x;
        let twice = &half * (&half * &x);
        assert!((once - twice).amax() < 1e-12);
    }

    #[test]
    fn negative_dt_rejected() {
        assert!(matches!(ca_transition(-0.1), Err(Error::NegativeDt(_))));
        assert!(matches!(cv_transition(-1.0), Err(Error::NegativeDt(_))));
        assert!(matches!(ct_transition(-1.0, 0.2), Err(Error::NegativeDt(_))));
        let m = MotionModel::ca(1.0).unwrap();
        assert!(matches!(process_noise(&m, -1.0), Err(Error::NegativeDt(_))));
    }

    #[test]
    fn cv_linear_motion() {
        let x = Vector::from_vec(vec![1.0, 1.0, 3.0, -1.0]);
        let next = cv_transition(2.0).unwrap() * x;
        assert_eq!((next[0], next[1]), (7.0, -1.0));
    }

    #[test]
    fn ct_small_rate_matches_cv() {
        for omega in [0.0, 1e-12, -1e-10, 1e-9] {
            let diff = (ct_transition(0.7, omega).unwrap() - cv_transition(0.7).unwrap()).amax();
            assert!(diff < 1e-9, "omega={omega} diff={diff}");
        }
    }

    #[test]
    fn ct_half_turn_negates_velocity() {
        let omega = 0.4;
        let x = Vector::from_vec(vec![0.0, 0.0, 3.0, 4.0]);
        let next = ct_transition(PI / omega, omega).unwrap() * &x;
        assert!((next[2] + 3.0).abs() < 1e-12);
        assert!((next[3] + 4.0).abs() < 1e-12);
        let speed = (next[2].powi(2) + next[3].powi(2)).sqrt();
        assert!((speed - 5.0).abs() < 1e-12);
    }

    #[test]
    fn transitions_preserve_volume() {
        for dt in [0.0, 0.05, 0.3, 2.0] {
            assert!((ca_transition(dt).unwrap().determinant() - 1.0).abs() < 1e-9);
            assert!((cv_transition(dt).unwrap().determinant() - 1.0).abs() < 1e-9);
            assert!((ct_transition(dt, 0.8).unwrap().determinant() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn observation_selects_position_and_velocity() {
        let h = observation_matrix();
        let x = Vector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(&h * x, Vector::from_vec(vec![1.0, 2.0, 3.0, 4.0]));
        assert_eq!(&h * h.transpose(), Mat::identity(4, 4));
        let acc = Vector::from_vec(vec![0.0, 0.0, 0.0, 0.0, 2.0, -7.0]);
        assert_eq!(&h * acc, Vector::zeros(4));
    }

    #[test]
    fn process_noise_symmetric_psd_and_linear() {
        for m in [
            MotionModel::cv(0.5).unwrap(),
            MotionModel::ca(0.5).unwrap(),
            MotionModel::ct(0.5, 0.3).unwrap(),
        ] {
            for dt in [0.01, 0.1, 1.0, 3.0] {
                let q = process_noise(&m, dt).unwrap();
                assert_eq!(q, q.transpose());
                assert!(min_eigenvalue(&q) >= -1e-12);
                let doubled = MotionModel {
                    noise_intensity: 1.0,
                    ..m
                };
                assert_eq!(process_noise(&doubled, dt).unwrap(), q * 2.0);
            }
        }
    }

    #[test]
    fn ca_process_noise_matches_quadrature() {
        // ∫₀ᵀ F(τ) G Gᵀ F(τ)ᵀ dτ with G injecting jerk into both acceleration slots
        let model = MotionModel::ca(1.3).unwrap();
        let dt = 1.0;
        let mut g = Mat::zeros(6, 2);
        g[(4, 0)] = 1.0;
        g[(5, 1)] = 1.0;
        let integrand = |tau: f64| {
            let f = ca_transition(tau).unwrap();
            &f * &g * g.transpose() * f.transpose()
        };
        let n = 2000;
        let h = dt / n as f64;
        let mut acc = integrand(0.0) + integrand(dt);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += integrand(i as f64 * h) * w;
        }
        let oracle = acc * (h / 3.0 * model.noise_intensity);
        let q = process_noise(&model, dt).unwrap();
        assert!((q - oracle).amax() < 1e-10);
    }

    #[test]
    fn process_noise_monotone_in_dt() {
        for m in [MotionModel::cv(1.0).unwrap(), MotionModel::ca(1.0).unwrap()] {
            let dts = [0.01, 0.05, 0.1, 0.5, 1.0, 2.0];
            for w in dts.windows(2) {
                let d = process_noise(&m, w[1]).unwrap() - process_noise(&m, w[0]).unwrap();
                assert!(min_eigenvalue(&d) >= -1e-10);
            }
        }
    }

    #[test]
    fn invalid_noise_intensity() {
        assert!(MotionModel::cv(0.0).is_err());
        assert!(MotionModel::ca(-1.0).is_err());
    }
}
