//! Linear Kalman filter: predict, measurement prediction, and update.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{SystemMatrices, CA_DIM};
use crate::numerics::{gaussian_logpdf, spd_inverse, symmetrize, Mat, Vector};

/// Mean, covariance and timestamp of the filter's belief.
#[derive(Debug, Clone, PartialEq)]
pub struct StateEstimate {
    pub x: Vector,
    pub p: Mat,
    pub t: f64,
}

/// `ẑ`, `S` and the gain `W` for one measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementPrediction {
    pub z_hat: Vector,
    pub s: Mat,
    pub w: Mat,
}

/// Diagonal prior covariance used when a track is started from a measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialCovariance {
    pub position: f64,
    pub velocity: f64,
    pub acceleration: f64,
}

impl Default for InitialCovariance {
    fn default() -> Self {
        Self {
            position: 4.0,
            velocity: 9.0,
            acceleration: 16.0,
        }
    }
}

impl InitialCovariance {
    pub fn matrix(&self, state_dim: usize) -> Mat {
        let diag = [
            self.position,
            self.position,
            self.velocity,
            self.velocity,
            self.acceleration,
            self.acceleration,
        ];
        Mat::from_diagonal(&Vector::from_column_slice(&diag[..state_dim]))
    }
}

impl StateEstimate {
    pub fn new(x: Vector, p: Mat, t: f64) -> Self {
        Self { x, p, t }
    }

    /// Starts a track from a `(x, y, ẋ, ẏ)` measurement with zero acceleration.
    pub fn from_measurement(z: &Vector, t: f64, p0: &InitialCovariance) -> Self {
        Self::from_measurement_dim(z, t, p0, CA_DIM)
    }

    pub fn from_measurement_dim(
        z: &Vector,
        t: f64,
        p0: &InitialCovariance,
        state_dim: usize,
    ) -> Self {
        let mut x = Vector::zeros(state_dim);
        x.rows_mut(0, z.len().min(state_dim))
            .copy_from(&z.rows(0, z.len().min(state_dim)));
        Self {
            x,
            p: p0.matrix(state_dim),
            t,
        }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }
}

fn check_dims(est: &StateEstimate, sys: &SystemMatrices) -> Result<()> {
    let n = est.x.len();
    if est.p.shape() != (n, n)
        || sys.f.shape() != (n, n)
        || sys.q.shape() != (n, n)
        || sys.h.ncols() != n
        || sys.r.shape() != (sys.h.nrows(), sys.h.nrows())
    {
        return Err(Error::DimensionMismatch(format!(
            "state dim {n}, F {:?}, Q {:?}, H {:?}, R {:?}",
            sys.f.shape(),
            sys.q.shape(),
            sys.h.shape(),
            sys.r.shape()
        )));
    }
    Ok(())
}

/// `x⁻ = F x`, `P⁻ = F P Fᵀ + Q`.
pub fn kf_predict(est: &StateEstimate, sys: &SystemMatrices, dt: f64) -> Result<StateEstimate> {
    if dt < 0.0 {
        return Err(Error::NegativeDt(dt));
    }
    check_dims(est, sys)?;
    let x = &sys.f * &est.x;
    let mut p = &sys.f * &est.p * sys.f.transpose() + &sys.q;
    symmetrize(&mut p);
    Ok(StateEstimate {
        x,
        p,
        t: est.t + dt,
    })
}

/// `ẑ = H x⁻`, `S = H P⁻ Hᵀ + R`, `W = P⁻ Hᵀ S⁻¹`.
pub fn kf_measurement_prediction(
    est: &StateEstimate,
    sys: &SystemMatrices,
) -> Result<MeasurementPrediction> {
    check_dims(est, sys)?;
    let z_hat = &sys.h * &est.x;
    let pht = &est.p * sys.h.transpose();
    let mut s = &sys.h * &pht + &sys.r;
    symmetrize(&mut s);
    let w = pht * spd_inverse(&s)?;
    Ok(MeasurementPrediction { z_hat, s, w })
}

/// `ν = z − ẑ`, `x⁺ = x⁻ + W ν`, `P⁺ = P⁻ − W S Wᵀ`. Returns the posterior and `ν`.
pub fn kf_update(
    est: &StateEstimate,
    pred: &MeasurementPrediction,
    z: &Vector,
) -> Result<(StateEstimate, Vector)> {
    if z.len() != pred.z_hat.len() || pred.w.shape() != (est.x.len(), z.len()) {
        return Err(Error::DimensionMismatch(format!(
            "measurement of length {} against prediction of length {} and gain {:?}",
            z.len(),
            pred.z_hat.len(),
            pred.w.shape()
        )));
    }
    let nu = z - &pred.z_hat;
    let x = &est.x + &pred.w * &nu;
    let mut p = &est.p - &pred.w * &pred.s * pred.w.transpose();
    symmetrize(&mut p);
    Ok((StateEstimate { x, p, t: est.t }, nu))
}

/// Result of one full filter step over a batch of measurements.
#[derive(Debug, Clone)]
pub struct KfStep {
    pub prior: StateEstimate,
    pub posterior: StateEstimate,
    /// Innovation and its covariance for the first measurement of the step.
    pub first_innovation: Vector,
    pub first_s: Mat,
    /// Σ log N(νᵢ; 0, Sᵢ) over the sequential updates.
    pub log_likelihood: f64,
}

/// Predict by `dt`, then apply every measurement as a sequential update with no
/// intervening prediction.
pub fn kf_step(
    est: &StateEstimate,
    sys: &SystemMatrices,
    points: &[Vector],
    dt: f64,
) -> Result<KfStep> {
    let prior = kf_predict(est, sys, dt)?;
    let mut current = prior.clone();
    let mut first = None;
    let mut log_likelihood = 0.0;
    for z in points {
        let pred = kf_measurement_prediction(&current, sys)?;
        let (post, nu) = kf_update(&current, &pred, z)?;
        log_likelihood += gaussian_logpdf(&nu, &Vector::zeros(nu.len()), &pred.s)?;
        if first.is_none() {
            first = Some((nu, pred.s));
        }
        current = post;
    }
    let (first_innovation, first_s) = first.ok_or(Error::EmptyCluster)?;
    Ok(KfStep {
        prior,
        posterior: current,
        first_innovation,
        first_s,
        log_likelihood,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{ca_transition, observation_matrix, process_noise, MotionModel};
    use crate::numerics::min_eigenvalue;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn scalar_system(q: f64, r: f64) -> SystemMatrices {
        SystemMatrices {
            f: Mat::identity(1, 1),
            h: Mat::identity(1, 1),
            q: Mat::from_element(1, 1, q),
            r: Mat::from_element(1, 1, r),
        }
    }

    fn ca_system(q: f64, r: f64, dt: f64) -> SystemMatrices {
        let m = MotionModel::ca(q).unwrap();
        SystemMatrices {
            f: ca_transition(dt).unwrap(),
            h: observation_matrix(),
            q: process_noise(&m, dt).unwrap(),
            r: Mat::identity(4, 4) * r,
        }
    }

    fn random_estimate(rng: &mut ChaCha8Rng) -> StateEstimate {
        let a = Mat::from_fn(6, 6, |_, _| rng.sample::<f64, _>(StandardNormal));
        let p = &a * a.transpose() + Mat::identity(6, 6);
        let x = Vector::from_fn(6, |_, _| rng.sample::<f64, _>(StandardNormal));
        StateEstimate::new(x, p, 0.0)
    }

    #[test]
    fn identity_propagation_leaves_estimate_unchanged() {
        let est = random_estimate(&mut ChaCha8Rng::seed_from_u64(1));
        let sys = SystemMatrices {
            f: Mat::identity(6, 6),
            h: observation_matrix(),
            q: Mat::zeros(6, 6),
            r: Mat::identity(4, 4),
        };
        let next = kf_predict(&est, &sys, 0.0).unwrap();
        assert_eq!(next.x, est.x);
        assert!((next.p - est.p).amax() < 1e-15);
    }

    #[test]
    fn pure_noise_injection() {
        let est = StateEstimate::new(Vector::zeros(6), Mat::zeros(6, 6), 1.0);
        let mut sys = ca_system(1.0, 1.0, 0.1);
        sys.q = Mat::identity(6, 6) * 0.3;
        let next = kf_predict(&est, &sys, 0.1).unwrap();
        assert_eq!(next.p, Mat::identity(6, 6) * 0.3);
        assert!((next.t - 1.1).abs() < 1e-15);
    }

    #[test]
    fn predict_matches_triple_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let diag = Vector::from_fn(6, |_, _| rng.random_range(0.5..3.0));
        let est = StateEstimate::new(Vector::zeros(6), Mat::from_diagonal(&diag), 0.0);
        let sys = ca_system(0.7, 1.0, 1.0);
        let next = kf_predict(&est, &sys, 1.0).unwrap();
        let mut oracle = Mat::zeros(6, 6);
        for i in 0..6 {
            for j in 0..6 {
                let mut acc = sys.q[(i, j)];
                for k in 0..6 {
                    for l in 0..6 {
                        acc += sys.f[(i, k)] * est.p[(k, l)] * sys.f[(j, l)];
                    }
                }
                oracle[(i, j)] = acc;
            }
        }
        assert!((next.p - oracle).amax() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let est = StateEstimate::new(Vector::zeros(4), Mat::identity(4, 4), 0.0);
        let sys = ca_system(1.0, 1.0, 0.1);
        assert!(matches!(kf_predict(&est, &sys, 0.1), Err(Error::DimensionMismatch(_))));
        let est6 = random_estimate(&mut ChaCha8Rng::seed_from_u64(5));
        let pred = kf_measurement_prediction(&est6, &sys).unwrap();
        assert!(matches!(
            kf_update(&est6, &pred, &Vector::zeros(3)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn huge_measurement_noise_kills_gain() {
        let est = random_estimate(&mut ChaCha8Rng::seed_from_u64(3));
        let sys = ca_system(1.0, 1e12, 0.1);
        let pred = kf_measurement_prediction(&est, &sys).unwrap();
        assert!(pred.w.amax() < 1e-9);
    }

    #[test]
    fn perfect_prior_kills_gain() {
        let est = StateEstimate::new(Vector::zeros(6), Mat::identity(6, 6) * 1e-14, 0.0);
        let pred = kf_measurement_prediction(&est, &ca_system(1.0, 1.0, 0.1)).unwrap();
        assert!(pred.w.amax() < 1e-12);
    }

    #[test]
    fn scalar_gain_converges_to_riccati_fixed_point() {
        let (q, r) = (0.3, 2.0);
        // oracle: bare scalar Riccati recursion
        let mut p = 10.0;
        let mut gain = 0.0;
        for _ in 0..10_000 {
            let prior = p + q;
            gain = prior / (prior + r);
            p = prior - gain * gain * (prior + r);
        }
        let sys = scalar_system(q, r);
        let mut est = StateEstimate::new(Vector::zeros(1), Mat::from_element(1, 1, 10.0), 0.0);
        let mut w = 0.0;
        for _ in 0..1000 {
            let prior = kf_predict(&est, &sys, 1.0).unwrap();
            let pred = kf_measurement_prediction(&prior, &sys).unwrap();
            w = pred.w[(0, 0)];
            est = kf_update(&prior, &pred, &Vector::zeros(1)).unwrap().0;
        }
        assert!((w - gain).abs() < 1e-9);
        let closed = {
            let prior = 0.5 * (q + (q * q + 4.0 * q * r).sqrt());
            prior / (prior + r)
        };
        assert!((w - closed).abs() < 1e-9);
    }

    #[test]
    fn zero_innovation_keeps_mean() {
        let est = random_estimate(&mut ChaCha8Rng::seed_from_u64(4));
        let sys = ca_system(1.0, 0.5, 0.1);
        let pred = kf_measurement_prediction(&est, &sys).unwrap();
        let (post, nu) = kf_update(&est, &pred, &pred.z_hat.clone()).unwrap();
        assert_eq!(post.x, est.x);
        assert_eq!(nu, Vector::zeros(4));
    }

    #[test]
    fn perfect_measurement_pins_observed_components() {
        let est = random_estimate(&mut ChaCha8Rng::seed_from_u64(6));
        let sys = ca_system(1.0, 1e-12, 0.1);
        let pred = kf_measurement_prediction(&est, &sys).unwrap();
        let z = Vector::from_vec(vec![5.0, -2.0, 1.0, 0.5]);
        let (post, _) = kf_update(&est, &pred, &z).unwrap();
        assert!((post.x.rows(0, 4) - &z).amax() < 1e-6);
    }

    #[test]
    fn update_matches_joseph_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let est = random_estimate(&mut rng);
            let b = Mat::from_fn(4, 4, |_, _| rng.sample::<f64, _>(StandardNormal));
            let mut sys = ca_system(1.0, 1.0, 0.1);
            sys.r = &b * b.transpose() + Mat::identity(4, 4) * 0.1;
            let pred = kf_measurement_prediction(&est, &sys).unwrap();
            let z = Vector::from_fn(4, |_, _| rng.sample::<f64, _>(StandardNormal));
            let (post, _) = kf_update(&est, &pred, &z).unwrap();
            let i_wh = Mat::identity(6, 6) - &pred.w * &sys.h;
            let joseph =
                &i_wh * &est.p * i_wh.transpose() + &pred.w * &sys.r * pred.w.transpose();
            assert!((&post.p - joseph).amax() < 1e-9);
            assert!(min_eigenvalue(&(&est.p - &post.p)) >= -1e-10);
        }
    }

    #[test]
    fn step_requires_points() {
        let est = random_estimate(&mut ChaCha8Rng::seed_from_u64(10));
        let sys = ca_system(1.0, 1.0, 0.1);
        assert!(matches!(kf_step(&est, &sys, &[], 0.1), Err(Error::EmptyCluster)));
    }

    /// Truth from the filter's own model; returns (mean NEES, lag-1 innovation autocorrelations).
    fn matched_run(runs: usize, steps: usize, seed: u64) -> (f64, [f64; 4]) {
        let dt = 0.1;
        let sys = ca_system(0.5, 0.25, dt);
        let lq = sys.q.clone().cholesky().unwrap().l();
        let lr = sys.r.clone().cholesky().unwrap().l();
        let p0 = InitialCovariance::default().matrix(6);
        let l0 = p0.clone().cholesky().unwrap().l();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |n: usize| Vector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut nees_sum = 0.0;
        let mut count = 0usize;
        let mut innovations: Vec<Vector> = Vec::new();
        for _ in 0..runs {
            let mut truth = &l0 * normal(6);
            let mut est = StateEstimate::new(Vector::zeros(6), p0.clone(), 0.0);
            for _ in 0..steps {
                truth = &sys.f * &truth + &lq * normal(6);
                let z = &sys.h * &truth + &lr * normal(4);
                let step = kf_step(&est, &sys, &[z], dt).unwrap();
                est = step.posterior;
                let err = &truth - &est.x;
                nees_sum += crate::numerics::mahalanobis_sq(&err, &est.p).unwrap();
                count += 1;
                let s_inv_sqrt = step.first_s.clone().cholesky().unwrap().l();
                innovations.push(
                    s_inv_sqrt
                        .solve_lower_triangular(&step.first_innovation)
                        .unwrap(),
                );
            }
        }
        let mut autocorr = [0.0; 4];
        for (c, slot) in autocorr.iter_mut().enumerate() {
            let series: Vec<f64> = innovations.iter().map(|v| v[c]).collect();
            let mean = series.iter().sum::<f64>() / series.len() as f64;
            let var: f64 = series.iter().map(|v| (v - mean).powi(2)).sum();
            let cov: f64 = series
                .windows(2)
                .map(|w| (w[0] - mean) * (w[1] - mean))
                .sum();
            *slot = cov / var;
        }
        (nees_sum / count as f64, autocorr)
    }

    #[test]
    fn matched_simulation_is_consistent() {
        let (mean_nees, _) = matched_run(500, 40, 21);
        assert!((mean_nees - 6.0).abs() < 0.05 * 6.0, "mean NEES {mean_nees}");
    }

    #[test]
    fn innovations_are_white() {
        // one long run of 10⁴ steps
        let (_, autocorr) = matched_run(1, 10_000, 22);
        for a in autocorr {
            assert!(a.abs() < 0.05, "lag-1 autocorrelation {a}");
        }
    }
}
