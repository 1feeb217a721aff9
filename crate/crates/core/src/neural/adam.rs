use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Mat;

use super::params::{Gradients, ParamSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators mirroring the parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    pub step: u64,
}

/// Serialized optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamSnapshot {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros = params.zeros_like().0;
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn snapshot(&self) -> AdamSnapshot {
        let pack = |ms: &[Mat], tag: &str| {
            ms.iter()
                .enumerate()
                .map(|(i, m)| Tensor::from_mat(&format!("{tag}{i}"), m))
                .collect()
        };
        AdamSnapshot {
            config: self.config,
            step: self.step,
            m: pack(&self.m, "m"),
            v: pack(&self.v, "v"),
        }
    }

    pub fn restore(snap: &AdamSnapshot) -> Result<Self> {
        let unpack = |ts: &[Tensor]| ts.iter().map(Tensor::to_mat).collect::<Result<Vec<_>>>();
        Ok(Self {
            config: snap.config,
            m: unpack(&snap.m)?,
            v: unpack(&snap.v)?,
            step: snap.step,
        })
    }
}

/// Bias-corrected Adam update of every parameter.
pub fn adam_step(params: &mut ParamSet, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    let n = params.len();
    if grads.0.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{n} parameters, {} gradients, {} moments",
            grads.0.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.tensors().iter().zip(&grads.0).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::DimensionMismatch(format!(
                "parameter {i} is {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for ((p, g), (m, v)) in params
        .tensors_mut()
        .iter_mut()
        .zip(&grads.0)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for k in 0..p.len() {
            m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
            v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(w: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.add("w", Mat::from_element(1, 1, w));
        p
    }

    fn grad(g: f64) -> Gradients {
        Gradients(vec![Mat::from_element(1, 1, g)])
    }

    #[test]
    fn zero_gradient_leaves_fresh_params_unchanged() {
        let mut params = scalar_params(1.5);
        let mut state = AdamState::new(&params, AdamConfig::default());
        adam_step(&mut params, &grad(0.0), &mut state).unwrap();
        assert_eq!(params.tensors()[0][0], 1.5);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn moments_decay_under_zero_gradient() {
        let mut params = scalar_params(0.0);
        let mut state = AdamState::new(&params, AdamConfig::default());
        adam_step(&mut params, &grad(2.0), &mut state).unwrap();
        let (m0, v0) = (state.m[0][0], state.v[0][0]);
        adam_step(&mut params, &grad(0.0), &mut state).unwrap();
        assert!((state.m[0][0] - 0.9 * m0).abs() < 1e-15);
        assert!((state.v[0][0] - 0.999 * v0).abs() < 1e-15);
    }

    #[test]
    fn first_step_has_magnitude_lr() {
        for g in [1e-3, 0.5, -7.0, 300.0] {
            let mut params = scalar_params(0.0);
            let mut state = AdamState::new(&params, AdamConfig::default());
            adam_step(&mut params, &grad(g), &mut state).unwrap();
            let step = params.tensors()[0][0];
            assert!((step + 1e-3 * g / (g.abs() + 1e-8)).abs() < 1e-12);
        }
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        let mut params = scalar_params(0.0);
        let mut state = AdamState::new(
            &params,
            AdamConfig {
                lr: 0.1,
                ..AdamConfig::default()
            },
        );
        for _ in 0..200 {
            let w = params.tensors()[0][0];
            adam_step(&mut params, &grad(2.0 * (w - 3.0)), &mut state).unwrap();
        }
        assert!((params.tensors()[0][0] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = scalar_params(0.0);
        let mut state = AdamState::new(&params, AdamConfig::default());
        let bad = Gradients(vec![Mat::zeros(2, 1)]);
        assert!(matches!(
            adam_step(&mut params, &bad, &mut state),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn snapshot_round_trip() {
        let mut params = scalar_params(0.3);
        let mut state = AdamState::new(&params, AdamConfig::default());
        adam_step(&mut params, &grad(0.7), &mut state).unwrap();
        let json = serde_json::to_string(&state.snapshot()).unwrap();
        let back = AdamState::restore(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, state);
    }
}
