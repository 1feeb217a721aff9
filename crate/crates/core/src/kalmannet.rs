//! Learned-gain filter.
//!
//! The filter keeps the CA prediction `x⁻ = F x` and the update
//! `x⁺ = x⁻ + W ν`, but `W` comes from three chained GRUs driven by four
//! difference features instead of from `P` and `S`. No covariance is carried.
//!
//! Features for a measurement `z` (each 4-dim, observed components only):
//!
//! * F1 `z − z_prev` (previous processed measurement)
//! * F2 `z − ẑ` (ẑ refreshed after every sequential sub-update)
//! * F3 `H (x̂_{k−1|k−1} − x̂_{k−2|k−2})`
//! * F4 `H (x̂_{k−1|k−1} − x̂_{k−1|k−2})`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{ca_transition, observation_matrix, CA_DIM, OBS_DIM};
use crate::neural::{gru_forward, GruParams, LinearParams, NodeId, ParamSet, Tape, Tensor};
use crate::numerics::{Mat, Vector};

pub const FEATURE_DIM: usize = 4 * OBS_DIM;
pub const GAIN_LEN: usize = CA_DIM * OBS_DIM;
const RMS_FLOOR: f64 = 1e-6;

/// Layer widths around the three GRUs. GRU hidden sizes are fixed by the
/// state and observation dimensions (m² = 36, m² = 36, n² = 16).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KnetArch {
    pub in_q: usize,
    pub in_p: usize,
    pub in_s: usize,
    pub out_q: usize,
    pub out_p: usize,
    pub out_s: usize,
}

pub const HIDDEN_Q: usize = CA_DIM * CA_DIM;
pub const HIDDEN_P: usize = CA_DIM * CA_DIM;
pub const HIDDEN_S: usize = OBS_DIM * OBS_DIM;

impl Default for KnetArch {
    fn default() -> Self {
        Self {
            in_q: 2 * HIDDEN_Q,
            in_p: 2 * HIDDEN_P,
            in_s: 2 * HIDDEN_S,
            out_q: HIDDEN_Q,
            out_p: HIDDEN_P,
            out_s: HIDDEN_S,
        }
    }
}

/// Per-block running RMS used to scale the raw features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureNormalizer {
    pub mean_square: [f64; 4],
    pub updates: u64,
    pub momentum: f64,
}

impl Default for FeatureNormalizer {
    fn default() -> Self {
        Self {
            mean_square: [1.0; 4],
            updates: 0,
            momentum: 0.1,
        }
    }
}

impl FeatureNormalizer {
    /// Elementwise multiplier applied to the 16-dim raw feature vector.
    pub fn scale_vector(&self) -> Vector {
        Vector::from_fn(FEATURE_DIM, |i, _| {
            1.0 / self.mean_square[i / OBS_DIM].sqrt().max(RMS_FLOOR)
        })
    }

    /// Folds the per-block mean squares observed over one sequence (or batch)
    /// into the running estimate. The first update replaces the default.
    pub fn update(&mut self, observed: [f64; 4]) {
        if observed.iter().any(|v| !v.is_finite()) {
            return;
        }
        if self.updates == 0 {
            self.mean_square = observed;
        } else {
            for (ms, o) in self.mean_square.iter_mut().zip(observed) {
                *ms += self.momentum * (o - *ms);
            }
        }
        self.updates += 1;
    }
}

/// Accumulates per-block squared feature magnitudes during a rollout.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FeatureStats {
    pub sum_sq: [f64; 4],
    pub count: u64,
}

impl FeatureStats {
    pub fn observe(&mut self, raw: &Vector) {
        for b in 0..4 {
            let block = raw.rows(b * OBS_DIM, OBS_DIM);
            self.sum_sq[b] += block.norm_squared() / OBS_DIM as f64;
        }
        self.count += 1;
    }

    pub fn merge(&mut self, other: &FeatureStats) {
        for b in 0..4 {
            self.sum_sq[b] += other.sum_sq[b];
        }
        self.count += other.count;
    }

    pub fn mean_square(&self) -> Option<[f64; 4]> {
        (self.count > 0).then(|| self.sum_sq.map(|s| s / self.count as f64))
    }
}

/// Gain-predicting network and its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct KGNetwork {
    pub params: ParamSet,
    pub arch: KnetArch,
    pub normalizer: FeatureNormalizer,
    pub seed: u64,
    fc_in_q: LinearParams,
    gru_q: GruParams,
    fc_out_q: LinearParams,
    fc_in_p: LinearParams,
    gru_p: GruParams,
    fc_out_p: LinearParams,
    fc_in_s: LinearParams,
    gru_s: GruParams,
    fc_out_s: LinearParams,
    gain_head: LinearParams,
}

/// Serialized network: architecture, tensors and normalizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSnapshot {
    pub arch: KnetArch,
    pub seed: u64,
    pub normalizer: FeatureNormalizer,
    pub tensors: Vec<Tensor>,
}

impl KGNetwork {
    /// Seeded initialization: Xavier-uniform linear layers, orthogonal GRU
    /// weights, zero biases.
    pub fn new(arch: KnetArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let p = &mut params;
        let fc_in_q = LinearParams::init(p, "q.in", FEATURE_DIM, arch.in_q, &mut rng);
        let gru_q = GruParams::init(p, "q.gru", arch.in_q, HIDDEN_Q, &mut rng);
        let fc_out_q = LinearParams::init(p, "q.out", HIDDEN_Q, arch.out_q, &mut rng);
        let fc_in_p = LinearParams::init(p, "p.in", arch.out_q, arch.in_p, &mut rng);
        let gru_p = GruParams::init(p, "p.gru", arch.in_p, HIDDEN_P, &mut rng);
        let fc_out_p = LinearParams::init(p, "p.out", HIDDEN_P, arch.out_p, &mut rng);
        let fc_in_s = LinearParams::init(p, "s.in", arch.out_p, arch.in_s, &mut rng);
        let gru_s = GruParams::init(p, "s.gru", arch.in_s, HIDDEN_S, &mut rng);
        let fc_out_s = LinearParams::init(p, "s.out", HIDDEN_S, arch.out_s, &mut rng);
        let gain_head = LinearParams::init(p, "gain", arch.out_p + arch.out_s, GAIN_LEN, &mut rng);
        Self {
            params,
            arch,
            normalizer: FeatureNormalizer::default(),
            seed,
            fc_in_q,
            gru_q,
            fc_out_q,
            fc_in_p,
            gru_p,
            fc_out_p,
            fc_in_s,
            gru_s,
            fc_out_s,
            gain_head,
        }
    }

    /// Network with every parameter set to zero (outputs `W = 0`).
    pub fn zeroed(arch: KnetArch) -> Self {
        let mut net = Self::new(arch, 0);
        for t in net.params.tensors_mut() {
            t.fill(0.0);
        }
        net
    }

    pub fn gain_head(&self) -> LinearParams {
        self.gain_head
    }

    pub fn snapshot(&self) -> NetworkSnapshot {
        NetworkSnapshot {
            arch: self.arch,
            seed: self.seed,
            normalizer: self.normalizer,
            tensors: self.params.to_tensors(),
        }
    }

    pub fn restore(snap: &NetworkSnapshot) -> Result<Self> {
        let mut net = Self::new(snap.arch, snap.seed);
        net.params.assign(&ParamSet::from_tensors(&snap.tensors)?)?;
        net.normalizer = snap.normalizer;
        Ok(net)
    }
}

/// GRU hidden states.
#[derive(Debug, Clone, PartialEq)]
pub struct KnetHidden {
    pub h_q: Vector,
    pub h_p: Vector,
    pub h_s: Vector,
}

impl KnetHidden {
    pub fn zeros() -> Self {
        Self {
            h_q: Vector::zeros(HIDDEN_Q),
            h_p: Vector::zeros(HIDDEN_P),
            h_s: Vector::zeros(HIDDEN_S),
        }
    }
}

/// Everything the filter remembers between timesteps. Holds no covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct KnetTrackState {
    pub x_post: Vector,
    pub x_prior: Vector,
    pub x_post_prev: Vector,
    pub z_prev: Vector,
    pub z_hat: Vector,
    pub hidden: KnetHidden,
    pub t: f64,
}

/// Starts a track at the first measurement with zero acceleration and zero
/// hidden states. All previous-state slots equal the initial state.
pub fn knet_init(first: &Vector, t: f64) -> KnetTrackState {
    let mut x = Vector::zeros(CA_DIM);
    x.rows_mut(0, OBS_DIM).copy_from(first);
    KnetTrackState {
        x_post: x.clone(),
        x_prior: x.clone(),
        x_post_prev: x,
        z_prev: first.clone(),
        z_hat: first.clone(),
        hidden: KnetHidden::zeros(),
        t,
    }
}

/// Track state whose vectors live on a tape.
#[derive(Debug, Clone, Copy)]
pub struct TrackNodes {
    pub x_post: NodeId,
    pub x_prior: NodeId,
    pub x_post_prev: NodeId,
    pub z_prev: NodeId,
    pub z_hat: NodeId,
    pub h_q: NodeId,
    pub h_p: NodeId,
    pub h_s: NodeId,
    pub t: f64,
}

impl TrackNodes {
    pub fn record(tape: &mut Tape, s: &KnetTrackState) -> Self {
        Self {
            x_post: tape.input(s.x_post.clone()),
            x_prior: tape.input(s.x_prior.clone()),
            x_post_prev: tape.input(s.x_post_prev.clone()),
            z_prev: tape.input(s.z_prev.clone()),
            z_hat: tape.input(s.z_hat.clone()),
            h_q: tape.input(s.hidden.h_q.clone()),
            h_p: tape.input(s.hidden.h_p.clone()),
            h_s: tape.input(s.hidden.h_s.clone()),
            t: s.t,
        }
    }

    pub fn read(&self, tape: &Tape) -> KnetTrackState {
        KnetTrackState {
            x_post: tape.value(self.x_post).clone(),
            x_prior: tape.value(self.x_prior).clone(),
            x_post_prev: tape.value(self.x_post_prev).clone(),
            z_prev: tape.value(self.z_prev).clone(),
            z_hat: tape.value(self.z_hat).clone(),
            hidden: KnetHidden {
                h_q: tape.value(self.h_q).clone(),
                h_p: tape.value(self.h_p).clone(),
                h_s: tape.value(self.h_s).clone(),
            },
            t: self.t,
        }
    }
}

fn check_measurement(z: &Vector) -> Result<()> {
    if z.len() != OBS_DIM {
        return Err(Error::DimensionMismatch(format!(
            "measurement must have {OBS_DIM} entries, got {}",
            z.len()
        )));
    }
    Ok(())
}

/// Raw `[F1; F2; F3; F4]` recorded on the tape. `z_hat` is the current
/// predicted measurement.
fn features_on_tape(
    tape: &mut Tape,
    h: &Mat,
    z: NodeId,
    z_prev: NodeId,
    z_hat: NodeId,
    x_post: NodeId,
    x_post_prev: NodeId,
    x_prior: NodeId,
) -> NodeId {
    let f1 = tape.sub(z, z_prev);
    let f2 = tape.sub(z, z_hat);
    let evo = tape.sub(x_post, x_post_prev);
    let f3 = tape.const_matvec(h, evo);
    let upd = tape.sub(x_post, x_prior);
    let f4 = tape.const_matvec(h, upd);
    tape.concat(&[f1, f2, f3, f4])
}

/// Raw features for measurement `z` against the stored state.
pub fn compute_features(s: &KnetTrackState, z: &Vector) -> Result<Vector> {
    check_measurement(z)?;
    let empty = ParamSet::new();
    let mut tape = Tape::new(&empty);
    let nodes = TrackNodes::record(&mut tape, s);
    let zn = tape.input(z.clone());
    let f = features_on_tape(
        &mut tape,
        &observation_matrix(),
        zn,
        nodes.z_prev,
        nodes.z_hat,
        nodes.x_post,
        nodes.x_post_prev,
        nodes.x_prior,
    );
    Ok(tape.value(f).clone())
}

/// Hidden-state nodes of the three GRUs.
#[derive(Debug, Clone, Copy)]
pub struct HiddenNodes {
    pub h_q: NodeId,
    pub h_p: NodeId,
    pub h_s: NodeId,
}

/// Features → Q-GRU → P-GRU → S-GRU; the gain head reads the P and S
/// branches. Returns the 24-vector node holding `W` row-major (6×4).
pub fn predict_gain(
    net: &KGNetwork,
    tape: &mut Tape,
    features: NodeId,
    hidden: HiddenNodes,
) -> Result<(NodeId, HiddenNodes)> {
    if tape.value(features).len() != FEATURE_DIM {
        return Err(Error::DimensionMismatch(format!(
            "expected {FEATURE_DIM} features, got {}",
            tape.value(features).len()
        )));
    }
    let a = net.fc_in_q.forward(tape, features)?;
    let h_q = gru_forward(&net.gru_q, tape, hidden.h_q, a)?;
    let q_out = net.fc_out_q.forward(tape, h_q)?;

    let b = net.fc_in_p.forward(tape, q_out)?;
    let h_p = gru_forward(&net.gru_p, tape, hidden.h_p, b)?;
    let p_out = net.fc_out_p.forward(tape, h_p)?;

    let c = net.fc_in_s.forward(tape, p_out)?;
    let h_s = gru_forward(&net.gru_s, tape, hidden.h_s, c)?;
    let s_out = net.fc_out_s.forward(tape, h_s)?;

    let joined = tape.concat(&[p_out, s_out]);
    let w = net.gain_head.forward(tape, joined)?;
    Ok((w, HiddenNodes { h_q, h_p, h_s }))
}

/// Reshapes a row-major gain vector into the 6×4 matrix.
pub fn gain_matrix(w: &Vector) -> Mat {
    Mat::from_row_slice(CA_DIM, OBS_DIM, w.as_slice())
}

/// One timestep on the tape: CA prediction by `dt`, then one learned-gain
/// update per measurement point.
pub fn knet_step_on_tape(
    net: &KGNetwork,
    tape: &mut Tape,
    s: &TrackNodes,
    points: &[Vector],
    dt: f64,
    mut stats: Option<&mut FeatureStats>,
) -> Result<TrackNodes> {
    if points.is_empty() {
        return Err(Error::EmptyCluster);
    }
    let f = ca_transition(dt)?;
    let h = observation_matrix();
    let scale = net.normalizer.scale_vector();

    let x_prior = tape.const_matvec(&f, s.x_post);
    let z_hat_prior = tape.const_matvec(&h, x_prior);
    let mut x = x_prior;
    let mut z_hat = z_hat_prior;
    let mut z_prev = s.z_prev;
    let mut hidden = HiddenNodes {
        h_q: s.h_q,
        h_p: s.h_p,
        h_s: s.h_s,
    };
    for (i, z) in points.iter().enumerate() {
        check_measurement(z)?;
        if i > 0 {
            z_hat = tape.const_matvec(&h, x);
        }
        let zn = tape.input(z.clone());
        let raw = features_on_tape(
            tape,
            &h,
            zn,
            z_prev,
            z_hat,
            s.x_post,
            s.x_post_prev,
            s.x_prior,
        );
        if let Some(st) = stats.as_deref_mut() {
            st.observe(tape.value(raw));
        }
        let features = tape.scale(raw, &scale);
        let (w, next) = predict_gain(net, tape, features, hidden)?;
        hidden = next;
        let nu = tape.sub(zn, z_hat);
        let dx = tape.reshape_matvec(w, nu, CA_DIM);
        x = tape.add(x, dx);
        z_prev = zn;
    }
    Ok(TrackNodes {
        x_post: x,
        x_prior,
        x_post_prev: s.x_post,
        z_prev,
        z_hat: z_hat_prior,
        h_q: hidden.h_q,
        h_p: hidden.h_p,
        h_s: hidden.h_s,
        t: s.t + dt,
    })
}

/// Value-level step; records onto a scratch tape.
pub fn knet_step(
    net: &KGNetwork,
    s: &KnetTrackState,
    points: &[Vector],
    dt: f64,
) -> Result<KnetTrackState> {
    let mut tape = Tape::new(&net.params);
    let nodes = TrackNodes::record(&mut tape, s);
    let next = knet_step_on_tape(net, &mut tape, &nodes, points, dt, None)?;
    Ok(next.read(&tape))
}

/// Gain `W` the network produces for given (normalized) features and hidden state.
pub fn gain_for(net: &KGNetwork, features: &Vector, hidden: &KnetHidden) -> Result<(Mat, KnetHidden)> {
    let mut tape = Tape::new(&net.params);
    let f = tape.input(features.clone());
    let hn = HiddenNodes {
        h_q: tape.input(hidden.h_q.clone()),
        h_p: tape.input(hidden.h_p.clone()),
        h_s: tape.input(hidden.h_s.clone()),
    };
    let (w, next) = predict_gain(net, &mut tape, f, hn)?;
    Ok((
        gain_matrix(tape.value(w)),
        KnetHidden {
            h_q: tape.value(next.h_q).clone(),
            h_p: tape.value(next.h_p).clone(),
            h_s: tape.value(next.h_s).clone(),
        },
    ))
}
