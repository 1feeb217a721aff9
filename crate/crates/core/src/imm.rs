//! Interacting multiple model filter.
//!
//! One cycle: mixing probabilities, mixed initial conditions, a Kalman step per
//! model, likelihood-driven model-probability update, and moment-matched
//! output. Models of different state dimension meet in the 6-dim CA space;
//! 4-dim estimates are lifted with zero acceleration and a fixed acceleration
//! variance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kalman::{kf_step, InitialCovariance, StateEstimate};
use crate::motion::{MotionModel, CA_DIM};
use crate::numerics::{log_sum_exp, symmetrize, Mat, Vector};

/// Acceleration variance assigned to a 4-dim estimate lifted into the CA space.
pub const DEFAULT_LIFT_ACC_VAR: f64 = 100.0;

/// Models, Markov switching matrix and current model probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBank {
    pub models: Vec<MotionModel>,
    /// `markov[(i, j)]` is the probability of switching from model i to model j.
    pub markov: Mat,
    pub mu: Vector,
    /// Measurement noise shared by every model.
    pub r: Mat,
    pub lift_acc_var: f64,
}

/// Serializable description of a bank, as read from run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankConfig {
    pub models: Vec<MotionModel>,
    /// Row-major Markov matrix; defaults to [`default_markov`] when absent.
    #[serde(default)]
    pub markov: Option<Vec<Vec<f64>>>,
    /// Initial model probabilities; uniform when absent.
    #[serde(default)]
    pub mu: Option<Vec<f64>>,
    #[serde(default = "default_self_transition")]
    pub self_transition: f64,
    #[serde(default = "default_lift_acc_var")]
    pub lift_acc_var: f64,
}

fn default_self_transition() -> f64 {
    0.95
}

fn default_lift_acc_var() -> f64 {
    DEFAULT_LIFT_ACC_VAR
}

impl Default for BankConfig {
    /// The untuned reference bank: CV, CA and a left/right coordinated turn.
    fn default() -> Self {
        Self {
            models: vec![
                MotionModel::cv(1.0).unwrap(),
                MotionModel::ca(1.0).unwrap(),
                MotionModel::ct(1.0, 0.3).unwrap(),
                MotionModel::ct(1.0, -0.3).unwrap(),
            ],
            markov: None,
            mu: None,
            self_transition: default_self_transition(),
            lift_acc_var: DEFAULT_LIFT_ACC_VAR,
        }
    }
}

impl BankConfig {
    pub fn build(&self, r: &Mat) -> Result<ModelBank> {
        let n = self.models.len();
        let markov = match &self.markov {
            Some(rows) => {
                if rows.len() != n || rows.iter().any(|row| row.len() != n) {
                    return Err(Error::InvalidSpec(format!(
                        "markov matrix must be {n}x{n}"
                    )));
                }
                Mat::from_fn(n, n, |i, j| rows[i][j])
            }
            None => default_markov(n, self.self_transition),
        };
        let mu = match &self.mu {
            Some(v) => Vector::from_vec(v.clone()),
            None => Vector::from_element(n, 1.0 / n as f64),
        };
        ModelBank::new(self.models.clone(), markov, mu, r.clone(), self.lift_acc_var)
    }
}

/// `self_transition` on the diagonal, the remainder spread uniformly.
pub fn default_markov(n: usize, self_transition: f64) -> Mat {
    if n == 1 {
        return Mat::identity(1, 1);
    }
    let off = (1.0 - self_transition) / (n - 1) as f64;
    Mat::from_fn(n, n, |i, j| if i == j { self_transition } else { off })
}

impl ModelBank {
    pub fn new(
        models: Vec<MotionModel>,
        markov: Mat,
        mu: Vector,
        r: Mat,
        lift_acc_var: f64,
    ) -> Result<Self> {
        let bank = Self {
            models,
            markov,
            mu,
            r,
            lift_acc_var,
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.models.len();
        if n == 0 {
            return Err(Error::InvalidSpec("model bank is empty".into()));
        }
        if self.markov.shape() != (n, n) || self.mu.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{n} models, markov {:?}, mu of length {}",
                self.markov.shape(),
                self.mu.len()
            )));
        }
        for model in &self.models {
            model.validate()?;
        }
        for i in 0..n {
            let row = self.markov.row(i);
            if row.iter().any(|p| *p < 0.0) || (row.sum() - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidSpec(format!(
                    "markov row {i} must be a probability vector"
                )));
            }
        }
        if self.mu.iter().any(|p| *p < 0.0) || (self.mu.sum() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidSpec("mu must be a probability vector".into()));
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<String> {
        self.models.iter().map(MotionModel::label).collect()
    }

    fn common_dim(&self) -> usize {
        self.models.iter().map(MotionModel::state_dim).max().unwrap_or(CA_DIM)
    }
}

/// Per-model posteriors plus the bank they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ImmState {
    pub per_model: Vec<StateEstimate>,
    pub bank: ModelBank,
}

impl ImmState {
    /// Starts every model from the same measurement.
    pub fn from_measurement(bank: ModelBank, z: &Vector, t: f64, p0: &InitialCovariance) -> Self {
        let per_model = bank
            .models
            .iter()
            .map(|m| StateEstimate::from_measurement_dim(z, t, p0, m.state_dim()))
            .collect();
        Self { per_model, bank }
    }

    /// Current moment-matched estimate in the common state space.
    pub fn combined(&self) -> StateEstimate {
        let dim = self.bank.common_dim();
        let lifted: Vec<_> = self
            .per_model
            .iter()
            .map(|e| lift(e, dim, self.bank.lift_acc_var))
            .collect();
        combine(&lifted, self.bank.mu.as_slice())
    }
}

/// Embeds an estimate into a larger state space with zero extra components.
pub fn lift(est: &StateEstimate, dim: usize, extra_var: f64) -> StateEstimate {
    let n = est.dim();
    if n == dim {
        return est.clone();
    }
    let mut x = Vector::zeros(dim);
    x.rows_mut(0, n).copy_from(&est.x);
    let mut p = Mat::zeros(dim, dim);
    p.view_mut((0, 0), (n, n)).copy_from(&est.p);
    for i in n..dim {
        p[(i, i)] = extra_var;
    }
    StateEstimate { x, p, t: est.t }
}

fn project(est: StateEstimate, dim: usize) -> StateEstimate {
    if est.dim() == dim {
        return est;
    }
    StateEstimate {
        x: est.x.rows(0, dim).into_owned(),
        p: est.p.view((0, 0), (dim, dim)).into_owned(),
        t: est.t,
    }
}

/// `c̄ⱼ = Σᵢ pᵢⱼ μⁱ` and `mix[(i, j)] = pᵢⱼ μⁱ / c̄ⱼ`.
pub fn mixing_probabilities(bank: &ModelBank) -> Result<(Mat, Vector)> {
    let n = bank.len();
    let mut cbar = Vector::zeros(n);
    for j in 0..n {
        for i in 0..n {
            cbar[j] += bank.markov[(i, j)] * bank.mu[i];
        }
    }
    let mut mix = Mat::zeros(n, n);
    for j in 0..n {
        if cbar[j] < 1e-300 {
            return Err(Error::DegenerateMixing(j));
        }
        for i in 0..n {
            mix[(i, j)] = bank.markov[(i, j)] * bank.mu[i] / cbar[j];
        }
    }
    Ok((mix, cbar))
}

/// Weighted mean and spread-augmented covariance of same-dimension estimates.
pub fn combine(per_model: &[StateEstimate], mu: &[f64]) -> StateEstimate {
    assert_eq!(per_model.len(), mu.len(), "one weight per estimate");
    let dim = per_model[0].dim();
    let mut x = Vector::zeros(dim);
    for (est, w) in per_model.iter().zip(mu) {
        x += &est.x * *w;
    }
    let mut p = Mat::zeros(dim, dim);
    for (est, w) in per_model.iter().zip(mu) {
        let d = &est.x - &x;
        p += (&est.p + &d * d.transpose()) * *w;
    }
    symmetrize(&mut p);
    StateEstimate {
        x,
        p,
        t: per_model[0].t,
    }
}

/// Mixed initial condition for every model, each in its own state dimension.
pub fn mix_states(imm: &ImmState, mix: &Mat) -> Vec<StateEstimate> {
    let bank = &imm.bank;
    let dim = bank.common_dim();
    let lifted: Vec<_> = imm
        .per_model
        .iter()
        .map(|e| lift(e, dim, bank.lift_acc_var))
        .collect();
    bank.models
        .iter()
        .enumerate()
        .map(|(j, model)| {
            let weights: Vec<f64> = mix.column(j).iter().copied().collect();
            project(combine(&lifted, &weights), model.state_dim())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImmDiagnostics {
    /// Summed per-point innovation log-likelihood of each model.
    pub log_likelihoods: Vec<f64>,
    /// Predicted model probabilities `c̄` used for mixing.
    pub predicted_mu: Vector,
    /// Set when every model's likelihood underflowed; μ was left unchanged.
    pub degenerate_likelihood: bool,
    /// Moment-matched innovation and covariance of the step's first point.
    pub innovation: Vector,
    pub innovation_cov: Mat,
}

#[derive(Debug, Clone)]
pub struct ImmStep {
    pub state: ImmState,
    pub combined: StateEstimate,
    pub diagnostics: ImmDiagnostics,
}

/// One IMM cycle over the measurement points of a timestep.
pub fn imm_step(imm: &ImmState, points: &[Vector], dt: f64) -> Result<ImmStep> {
    if points.is_empty() {
        return Err(Error::EmptyCluster);
    }
    if dt < 0.0 {
        return Err(Error::NegativeDt(dt));
    }
    let bank = &imm.bank;
    let (mix, cbar) = mixing_probabilities(bank)?;
    let mixed = mix_states(imm, &mix);

    let mut per_model = Vec::with_capacity(bank.len());
    let mut log_likelihoods = Vec::with_capacity(bank.len());
    let mut innovations = Vec::with_capacity(bank.len());
    for (model, start) in bank.models.iter().zip(&mixed) {
        let sys = model.system(dt, &bank.r)?;
        let step = kf_step(start, &sys, points, dt)?;
        log_likelihoods.push(step.log_likelihood);
        innovations.push((step.first_innovation, step.first_s));
        per_model.push(step.posterior);
    }

    let scores: Vec<f64> = log_likelihoods
        .iter()
        .zip(cbar.iter())
        .map(|(l, c)| l + c.ln())
        .collect();
    let norm = log_sum_exp(&scores);
    let degenerate_likelihood = !norm.is_finite();
    let mu = if degenerate_likelihood {
        bank.mu.clone()
    } else {
        Vector::from_iterator(scores.len(), scores.iter().map(|s| (s - norm).exp()))
    };
    // renormalize against rounding so Σμ = 1 holds to machine precision
    let mu = &mu / mu.sum();

    let obs_dim = innovations[0].0.len();
    let mut innovation = Vector::zeros(obs_dim);
    for ((nu, _), c) in innovations.iter().zip(cbar.iter()) {
        innovation += nu * *c;
    }
    let mut innovation_cov = Mat::zeros(obs_dim, obs_dim);
    for ((nu, s), c) in innovations.iter().zip(cbar.iter()) {
        let d = nu - &innovation;
        innovation_cov += (s + &d * d.transpose()) * *c;
    }
    symmetrize(&mut innovation_cov);

    let state = ImmState {
        per_model,
        bank: ModelBank {
            mu,
            ..bank.clone()
        },
    };
    let combined = state.combined();
    Ok(ImmStep {
        state,
        combined,
        diagnostics: ImmDiagnostics {
            log_likelihoods,
            predicted_mu: cbar,
            degenerate_likelihood,
            innovation,
            innovation_cov,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kalman::InitialCovariance;
    use crate::motion::measurement_noise;
    use crate::numerics::min_eigenvalue;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn bank_with(models: Vec<MotionModel>, markov: Mat, mu: Vector) -> ModelBank {
        ModelBank::new(models, markov, mu, measurement_noise(0.5, 0.5), DEFAULT_LIFT_ACC_VAR)
            .unwrap()
    }

    #[test]
    fn single_model_mixing_is_trivial() {
        let bank = bank_with(
            vec![MotionModel::ca(1.0).unwrap()],
            Mat::identity(1, 1),
            Vector::from_element(1, 1.0),
        );
        let (mix, cbar) = mixing_probabilities(&bank).unwrap();
        assert_eq!(mix, Mat::identity(1, 1));
        assert_eq!(cbar, Vector::from_element(1, 1.0));
    }

    #[test]
    fn symmetric_markov_with_uniform_mu_mixes_uniformly() {
        let models = vec![MotionModel::cv(1.0).unwrap(); 3];
        let bank = bank_with(models, default_markov(3, 0.8), Vector::from_element(3, 1.0 / 3.0));
        let (mix, _) = mixing_probabilities(&bank).unwrap();
        for j in 0..3 {
            for i in 0..3 {
                assert!((mix[(i, j)] - bank.markov[(i, j)]).abs() < 1e-15);
            }
            assert!((mix.column(j).sum() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn two_model_mixing_hand_example() {
        let models = vec![MotionModel::cv(1.0).unwrap(), MotionModel::ca(1.0).unwrap()];
        let markov = Mat::from_row_slice(2, 2, &[0.9, 0.1, 0.2, 0.8]);
        let bank = bank_with(models, markov, Vector::from_vec(vec![0.5, 0.5]));
        let (mix, cbar) = mixing_probabilities(&bank).unwrap();
        assert!((cbar[0] - 0.55).abs() < 1e-15);
        assert!((cbar[1] - 0.45).abs() < 1e-15);
        assert!((mix[(0, 0)] - 9.0 / 11.0).abs() < 1e-15);
        assert!((mix[(1, 0)] - 2.0 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn vanished_model_is_degenerate() {
        let models = vec![MotionModel::cv(1.0).unwrap(), MotionModel::ca(1.0).unwrap()];
        let bank = bank_with(models, Mat::identity(2, 2), Vector::from_vec(vec![1.0, 0.0]));
        assert!(matches!(
            mixing_probabilities(&bank),
            Err(Error::DegenerateMixing(1))
        ));
    }

    #[test]
    fn invalid_banks_are_rejected() {
        let models = vec![MotionModel::cv(1.0).unwrap(), MotionModel::ca(1.0).unwrap()];
        let r = measurement_noise(0.5, 0.5);
        let bad_row = Mat::from_row_slice(2, 2, &[0.9, 0.2, 0.2, 0.8]);
        assert!(ModelBank::new(models.clone(), bad_row, Vector::from_vec(vec![0.5, 0.5]), r.clone(), 100.0).is_err());
        assert!(ModelBank::new(models, default_markov(2, 0.9), Vector::from_vec(vec![0.7, 0.7]), r, 100.0).is_err());
    }

    fn scalar(x: f64, p: f64) -> StateEstimate {
        StateEstimate::new(Vector::from_element(1, x), Mat::from_element(1, 1, p), 0.0)
    }

    #[test]
    fn combine_hand_example() {
        let out = combine(&[scalar(0.0, 1.0), scalar(2.0, 1.0)], &[0.5, 0.5]);
        assert_eq!(out.x[0], 1.0);
        assert_eq!(out.p[(0, 0)], 2.0);
    }

    #[test]
    fn combine_one_hot_and_equal_estimates() {
        let a = scalar(3.0, 0.5);
        let b = scalar(-1.0, 4.0);
        let out = combine(&[a.clone(), b.clone()], &[1.0, 0.0]);
        assert_eq!(out.x, a.x);
        assert_eq!(out.p, a.p);
        let same = combine(&[b.clone(), b.clone()], &[0.3, 0.7]);
        assert!((same.p[(0, 0)] - 4.0).abs() < 1e-15);
    }

    fn imm_two(bank: ModelBank, a: StateEstimate, b: StateEstimate) -> ImmState {
        ImmState {
            per_model: vec![a, b],
            bank,
        }
    }

    #[test]
    fn mixing_identical_states_has_no_spread() {
        let models = vec![MotionModel::ca(1.0).unwrap(), MotionModel::ca(2.0).unwrap()];
        let bank = bank_with(models, default_markov(2, 0.9), Vector::from_vec(vec![0.3, 0.7]));
        let est = StateEstimate::new(
            Vector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 0.5, -0.5]),
            Mat::identity(6, 6) * 2.0,
            0.0,
        );
        let imm = imm_two(bank, est.clone(), est.clone());
        let (mix, _) = mixing_probabilities(&imm.bank).unwrap();
        for mixed in mix_states(&imm, &mix) {
            assert!((&mixed.x - &est.x).amax() < 1e-14);
            assert!((&mixed.p - &est.p).amax() < 1e-14);
        }
    }

    #[test]
    fn degenerate_weights_copy_a_model() {
        let models = vec![MotionModel::ca(1.0).unwrap(), MotionModel::ca(2.0).unwrap()];
        let bank = bank_with(models, default_markov(2, 0.9), Vector::from_vec(vec![0.5, 0.5]));
        let a = StateEstimate::new(Vector::from_element(6, 1.0), Mat::identity(6, 6), 0.0);
        let b = StateEstimate::new(Vector::from_element(6, -4.0), Mat::identity(6, 6) * 3.0, 0.0);
        let imm = imm_two(bank, a.clone(), b);
        let mix = Mat::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 0.5]);
        let mixed = mix_states(&imm, &mix);
        assert_eq!(mixed[0].x, a.x);
        assert_eq!(mixed[0].p, a.p);
    }

    #[test]
    fn mixed_covariances_stay_psd_across_dimensions() {
        let bank = BankConfig::default().build(&measurement_noise(0.5, 0.5)).unwrap();
        let z = Vector::from_vec(vec![10.0, 5.0, 3.0, -1.0]);
        let mut imm = ImmState::from_measurement(bank, &z, 0.0, &InitialCovariance::default());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for k in 1..40 {
            let z = Vector::from_vec(vec![
                10.0 + 0.3 * k as f64,
                5.0 - 0.1 * k as f64,
                3.0,
                -1.0,
            ]) + Vector::from_fn(4, |_, _| 0.5 * rng.sample::<f64, _>(StandardNormal));
            let (mix, _) = mixing_probabilities(&imm.bank).unwrap();
            for m in mix_states(&imm, &mix) {
                assert!(min_eigenvalue(&m.p) >= -1e-9);
            }
            let step = imm_step(&imm, &[z], 0.1).unwrap();
            assert!((step.state.bank.mu.sum() - 1.0).abs() < 1e-12);
            assert!(step.state.bank.mu.iter().all(|m| *m >= 0.0));
            assert!(min_eigenvalue(&step.combined.p) >= -1e-9);
            for e in &step.state.per_model {
                assert!(min_eigenvalue(&e.p) >= -1e-9);
            }
            // combined covariance dominates the weighted average of per-model covariances
            let lifted: Vec<_> = step
                .state
                .per_model
                .iter()
                .map(|e| lift(e, 6, DEFAULT_LIFT_ACC_VAR))
                .collect();
            let mut avg = Mat::zeros(6, 6);
            for (e, m) in lifted.iter().zip(step.state.bank.mu.iter()) {
                avg += &e.p * *m;
            }
            assert!(min_eigenvalue(&(&step.combined.p - avg)) >= -1e-9);
            imm = step.state;
        }
    }

    #[test]
    fn identical_models_keep_probabilities() {
        let models = vec![MotionModel::ca(1.0).unwrap(); 3];
        let bank = bank_with(models, default_markov(3, 0.95), Vector::from_element(3, 1.0 / 3.0));
        let z = Vector::from_vec(vec![1.0, 1.0, 1.0, 1.0]);
        let mut imm = ImmState::from_measurement(bank, &z, 0.0, &InitialCovariance::default());
        for k in 0..20 {
            let z = Vector::from_vec(vec![1.0 + 0.1 * k as f64, 1.0, 1.0, 0.0]);
            imm = imm_step(&imm, &[z], 0.1).unwrap().state;
            for m in imm.bank.mu.iter() {
                assert!((m - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_points_rejected() {
        let bank = BankConfig::default().build(&measurement_noise(0.5, 0.5)).unwrap();
        let imm = ImmState::from_measurement(bank, &Vector::zeros(4), 0.0, &InitialCovariance::default());
        assert!(matches!(imm_step(&imm, &[], 0.1), Err(Error::EmptyCluster)));
    }

    #[test]
    fn bank_config_round_trips_through_json() {
        let cfg = BankConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: BankConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }
}
