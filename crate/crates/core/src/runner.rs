//! Runs each filter over recorded sequences and collects per-step records.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imm::{imm_step, lift, ImmState, ModelBank, DEFAULT_LIFT_ACC_VAR};
use crate::kalman::{kf_step, InitialCovariance, StateEstimate};
use crate::kalmannet::{knet_init, knet_step, KGNetwork};
use crate::metrics::StepRecord;
use crate::motion::{MotionModel, CA_DIM};
use crate::numerics::{symmetrized, Mat, Vector};
use crate::scenarios::TrackSequence;
use crate::training::{initial_measurement, select_points};

/// Where the learned-gain filter's P and S come from in evaluation. It has no
/// covariance of its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CovarianceSource {
    /// No P or S; NEES/NIS are reported unavailable.
    #[default]
    None,
    /// Sample covariance of the previous `window` estimation errors (P) and
    /// first-point innovations (S) of the same sequence.
    EmpiricalWindow { window: usize },
}

impl CovarianceSource {
    pub fn describe(&self) -> String {
        match self {
            CovarianceSource::None => "none".into(),
            CovarianceSource::EmpiricalWindow { window } => {
                format!("empirical sample covariance of the previous {window} steps")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRun {
    pub records: Vec<StepRecord>,
    /// Model probabilities per step (IMM only).
    pub model_probs: Option<Vec<Vec<f64>>>,
}

fn to_ca(est: &StateEstimate) -> StateEstimate {
    if est.dim() == CA_DIM {
        est.clone()
    } else {
        lift(est, CA_DIM, DEFAULT_LIFT_ACC_VAR)
    }
}

fn record(
    seq: &TrackSequence,
    k: usize,
    est: &Vector,
    p: Option<Mat>,
    innovation: Option<(Vector, Mat)>,
) -> StepRecord {
    let (innovation, s) = match innovation {
        Some((nu, s)) => (Some(nu), Some(s)),
        None => (None, None),
    };
    StepRecord {
        seq_id: seq.id,
        step: k,
        t: seq.steps[k].t,
        est: est.clone(),
        truth: seq.truth[k].to_vector(),
        p,
        innovation,
        s,
    }
}

/// Single-model Kalman filter over the selected points of each step.
pub fn run_kf(
    seq: &TrackSequence,
    model: &MotionModel,
    r: &Mat,
    p0: &InitialCovariance,
) -> Result<SequenceRun> {
    let first = seq.steps.first().ok_or(Error::EmptyInput)?;
    let mut est =
        StateEstimate::from_measurement_dim(&initial_measurement(seq)?, first.t, p0, model.state_dim());
    let ca = to_ca(&est);
    let mut records = vec![record(seq, 0, &ca.x, Some(ca.p), None)];
    for k in 1..seq.len() {
        let dt = seq.steps[k].t - seq.steps[k - 1].t;
        let sys = model.system(dt, r)?;
        let step = kf_step(&est, &sys, &select_points(&seq.steps[k].cluster)?, dt)?;
        est = step.posterior;
        let ca = to_ca(&est);
        records.push(record(
            seq,
            k,
            &ca.x,
            Some(ca.p),
            Some((step.first_innovation, step.first_s)),
        ));
    }
    Ok(SequenceRun {
        records,
        model_probs: None,
    })
}

/// IMM over the selected points of each step; also reports μ per step.
pub fn run_imm(seq: &TrackSequence, bank: &ModelBank, p0: &InitialCovariance) -> Result<SequenceRun> {
    bank.validate()?;
    let first = seq.steps.first().ok_or(Error::EmptyInput)?;
    let mut imm = ImmState::from_measurement(bank.clone(), &initial_measurement(seq)?, first.t, p0);
    let c = to_ca(&imm.combined());
    let mut records = vec![record(seq, 0, &c.x, Some(c.p), None)];
    let mut probs = vec![imm.bank.mu.as_slice().to_vec()];
    for k in 1..seq.len() {
        let dt = seq.steps[k].t - seq.steps[k - 1].t;
        let step = imm_step(&imm, &select_points(&seq.steps[k].cluster)?, dt)?;
        let c = to_ca(&step.combined);
        records.push(record(
            seq,
            k,
            &c.x,
            Some(c.p),
            Some((step.diagnostics.innovation, step.diagnostics.innovation_cov)),
        ));
        imm = step.state;
        probs.push(imm.bank.mu.as_slice().to_vec());
    }
    Ok(SequenceRun {
        records,
        model_probs: Some(probs),
    })
}

fn window_cov(samples: &[Vector]) -> Mat {
    let n = samples[0].len();
    let mut c = Mat::zeros(n, n);
    for s in samples {
        c += s * s.transpose();
    }
    symmetrized(c / samples.len() as f64 + Mat::identity(n, n) * 1e-9)
}

/// Learned-gain filter; P and S are attached per `source`.
pub fn run_knet(seq: &TrackSequence, net: &KGNetwork, source: CovarianceSource) -> Result<SequenceRun> {
    let first = seq.steps.first().ok_or(Error::EmptyInput)?;
    let mut state = knet_init(&initial_measurement(seq)?, first.t);
    let mut estimates = vec![state.x_post.clone()];
    let mut innovations: Vec<Option<Vector>> = vec![None];
    for k in 1..seq.len() {
        let dt = seq.steps[k].t - seq.steps[k - 1].t;
        let points = select_points(&seq.steps[k].cluster)?;
        state = knet_step(net, &state, &points, dt)?;
        innovations.push(Some(&points[0] - &state.z_hat));
        estimates.push(state.x_post.clone());
    }
    let errors: Vec<Vector> = estimates
        .iter()
        .zip(&seq.truth)
        .map(|(e, t)| e - t.to_vector())
        .collect();
    let mut records = Vec::with_capacity(seq.len());
    for k in 0..seq.len() {
        let (p, inn) = match source {
            CovarianceSource::None => (None, None),
            CovarianceSource::EmpiricalWindow { window } => {
                let p = (window >= CA_DIM && k >= window).then(|| window_cov(&errors[k - window..k]));
                let inn = match &innovations[k] {
                    Some(nu) if window >= nu.len() && k > window => {
                        let past: Vec<Vector> = innovations[k - window..k]
                            .iter()
                            .map(|v| v.clone().expect("innovations exist after step 0"))
                            .collect();
                        Some((nu.clone(), window_cov(&past)))
                    }
                    _ => None,
                };
                (p, inn)
            }
        };
        records.push(record(seq, k, &estimates[k], p, inn));
    }
    Ok(SequenceRun {
        records,
        model_probs: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imm::BankConfig;
    use crate::kalmannet::KnetArch;
    use crate::motion::measurement_noise;
    use crate::scenarios::{generate_corpus, CorpusSpec, SensorSpec, TrajectoryKind, TrajectorySpec};

    fn corpus(kind: TrajectoryKind, count: usize) -> Vec<TrackSequence> {
        generate_corpus(
            &CorpusSpec {
                trajectory: TrajectorySpec {
                    kind,
                    duration: 10.0,
                    rate: 10.0,
                },
                sensor: SensorSpec::default(),
                count,
                first_id: 0,
                vary_start: true,
            },
            3,
        )
        .unwrap()
    }

    fn switch() -> TrajectoryKind {
        TrajectoryKind::ManeuverSwitch {
            speed: 10.0,
            turn_rate: 0.3,
            switch_time: 5.0,
            start: [20.0, 0.0],
            heading: 0.0,
        }
    }

    #[test]
    fn imm_probabilities_sum_to_one() {
        let r = measurement_noise(1.0, 0.5);
        let bank = BankConfig::default().build(&r).unwrap();
        for seq in corpus(switch(), 3) {
            let run = run_imm(&seq, &bank, &InitialCovariance::default()).unwrap();
            let probs = run.model_probs.unwrap();
            assert_eq!(probs.len(), seq.len());
            for mu in probs {
                assert!((mu.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            assert_eq!(run.records.len(), seq.len());
        }
    }

    #[test]
    fn kf_records_carry_covariances() {
        let seqs = corpus(switch(), 1);
        let run = run_kf(
            &seqs[0],
            &MotionModel::cv(1.0).unwrap(),
            &measurement_noise(1.0, 0.5),
            &InitialCovariance::default(),
        )
        .unwrap();
        assert!(run.records.iter().all(|r| r.p.is_some() && r.est.len() == 6));
        assert!(run.records[0].innovation.is_none());
        assert!(run.records[1..].iter().all(|r| r.innovation.is_some()));
    }

    #[test]
    fn knet_covariance_gating() {
        let seqs = corpus(switch(), 1);
        let net = KGNetwork::new(KnetArch::default(), 0);
        let bare = run_knet(&seqs[0], &net, CovarianceSource::None).unwrap();
        assert!(bare.records.iter().all(|r| r.p.is_none() && r.s.is_none()));
        let win = run_knet(&seqs[0], &net, CovarianceSource::EmpiricalWindow { window: 10 }).unwrap();
        assert!(win.records[..10].iter().all(|r| r.p.is_none()));
        assert!(win.records[10..].iter().all(|r| r.p.is_some()));
        assert!(win.records[11..].iter().all(|r| r.s.is_some()));
        assert_eq!(
            bare.records.iter().map(|r| &r.est).collect::<Vec<_>>(),
            win.records.iter().map(|r| &r.est).collect::<Vec<_>>()
        );
    }
}
