//! Point selection, the distance-weighted loss, and the learned-gain
//! training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kalmannet::{knet_init, knet_step, knet_step_on_tape, FeatureStats, KGNetwork, NetworkSnapshot, TrackNodes};
use crate::motion::CA_DIM;
use crate::neural::{adam_step, AdamConfig, AdamSnapshot, AdamState, Gradients, NodeId, Tape};
use crate::numerics::Vector;

pub use crate::scenarios::{RadarPoint, Step, TrackSequence, TruthState};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub w_min: f64,
    pub w_max: f64,
    pub d_min: f64,
    pub d_max: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            w_min: 0.4,
            w_max: 1.0,
            d_min: 20.0,
            d_max: 120.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.w_min && self.w_min <= self.w_max) {
            return Err(Error::InvalidSpec("need 0 < w_min ≤ w_max".into()));
        }
        if !(self.d_min < self.d_max) {
            return Err(Error::InvalidSpec("need d_min < d_max".into()));
        }
        Ok(())
    }
}

/// Points used to update the track: all points plus their mean for small
/// clusters; otherwise the min-, median- and max-speed points plus the mean
/// of those three.
pub fn select_points(cluster: &[RadarPoint]) -> Result<Vec<Vector>> {
    if cluster.is_empty() {
        return Err(Error::EmptyCluster);
    }
    let picked: Vec<Vector> = if cluster.len() < 3 {
        cluster.iter().map(RadarPoint::measurement).collect()
    } else {
        let mut order: Vec<usize> = (0..cluster.len()).collect();
        order.sort_by(|&a, &b| cluster[a].speed().total_cmp(&cluster[b].speed()));
        [order[0], order[(order.len() - 1) / 2], order[order.len() - 1]]
            .iter()
            .map(|&i| cluster[i].measurement())
            .collect()
    };
    let mean = picked.iter().fold(Vector::zeros(4), |acc, p| acc + p) / picked.len() as f64;
    let mut out = picked;
    out.push(mean);
    Ok(out)
}

/// `w_max` up to `d_min`, `w_min` from `d_max`, linear in between.
pub fn distance_weight(d: f64, cfg: &LossConfig) -> f64 {
    if d <= cfg.d_min {
        cfg.w_max
    } else if d >= cfg.d_max {
        cfg.w_min
    } else {
        let alpha = (cfg.w_min - cfg.w_max) / (cfg.d_max - cfg.d_min);
        cfg.w_max + alpha * (d - cfg.d_min)
    }
}

/// Mean over steps of the range-weighted squared position error.
pub fn sequence_loss(estimates: &[Vector], truth: &[TruthState], cfg: &LossConfig) -> Result<f64> {
    if estimates.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: estimates.len(),
            right: truth.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::EmptyInput);
    }
    let total: f64 = estimates
        .iter()
        .zip(truth)
        .map(|(x, s)| {
            let ex = x[0] - s.pos[0];
            let ey = x[1] - s.pos[1];
            distance_weight(s.range(), cfg) * (ex * ex + ey * ey)
        })
        .sum();
    Ok(total / truth.len() as f64)
}

/// Initial measurement of a sequence: the mean of the selected first-step points.
pub fn initial_measurement(seq: &TrackSequence) -> Result<Vector> {
    let first = seq.steps.first().ok_or(Error::EmptyInput)?;
    Ok(select_points(&first.cluster)?.pop().expect("selection is nonempty"))
}

/// Runs the learned-gain filter over a sequence; one estimate per step, the
/// first being the initialization.
pub fn knet_filter(net: &KGNetwork, seq: &TrackSequence) -> Result<Vec<Vector>> {
    let first = seq.steps.first().ok_or(Error::EmptyInput)?;
    let mut state = knet_init(&initial_measurement(seq)?, first.t);
    let mut out = vec![state.x_post.clone()];
    for w in seq.steps.windows(2) {
        let points = select_points(&w[1].cluster)?;
        state = knet_step(net, &state, &points, w[1].t - w[0].t)?;
        out.push(state.x_post.clone());
    }
    Ok(out)
}

/// Loss and parameter gradient of one sequence, by full backpropagation
/// through time.
pub fn sequence_gradient(
    net: &KGNetwork,
    seq: &TrackSequence,
    cfg: &LossConfig,
    stats: Option<&mut FeatureStats>,
) -> Result<(f64, Gradients)> {
    let mut stats = stats;
    let first = seq.steps.first().ok_or(Error::EmptyInput)?;
    let mut tape = Tape::new(&net.params);
    let mut nodes = TrackNodes::record(&mut tape, &knet_init(&initial_measurement(seq)?, first.t));
    let mut outputs: Vec<NodeId> = vec![nodes.x_post];
    for w in seq.steps.windows(2) {
        let points = select_points(&w[1].cluster)?;
        nodes = knet_step_on_tape(
            net,
            &mut tape,
            &nodes,
            &points,
            w[1].t - w[0].t,
            stats.as_deref_mut(),
        )?;
        outputs.push(nodes.x_post);
    }
    tape.seal();
    let estimates: Vec<Vector> = outputs.iter().map(|n| tape.value(*n).clone()).collect();
    let loss = sequence_loss(&estimates, &seq.truth, cfg)?;
    let k = seq.truth.len() as f64;
    let seeds: Vec<(NodeId, Vector)> = outputs
        .iter()
        .zip(estimates.iter().zip(&seq.truth))
        .map(|(node, (x, s))| {
            let c = 2.0 * distance_weight(s.range(), cfg) / k;
            let mut g = Vector::zeros(CA_DIM);
            g[0] = c * (x[0] - s.pos[0]);
            g[1] = c * (x[1] - s.pos[1]);
            (*node, g)
        })
        .collect();
    Ok((loss, tape.backward(&seeds)?))
}

/// Mean sequence loss of a corpus.
pub fn dataset_loss(net: &KGNetwork, seqs: &[TrackSequence], cfg: &LossConfig) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let losses = seqs
        .par_iter()
        .map(|s| sequence_loss(&knet_filter(net, s)?, &s.truth, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / seqs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    /// Rescales the averaged batch gradient to at most this L2 norm.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 100,
            batch_size: 8,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            grad_clip: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Everything needed to resume training or to run the best network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    /// Epochs completed.
    pub epoch: usize,
    pub network: NetworkSnapshot,
    pub best_network: NetworkSnapshot,
    pub best_epoch: usize,
    /// `None` before the first epoch.
    pub best_val_loss: Option<f64>,
    pub adam: AdamSnapshot,
    pub history: Vec<EpochStats>,
    /// Identity of the training corpus, filled in by callers that track it.
    #[serde(default)]
    pub corpus_digest: Option<String>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::SchemaVersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: ck.version,
            });
        }
        Ok(ck)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn best(&self) -> Result<KGNetwork> {
        KGNetwork::restore(&self.best_network)
    }
}

/// Epoch-by-epoch driver. Callers that persist progress save
/// [`Trainer::checkpoint`] after each epoch.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub net: KGNetwork,
    pub config: TrainConfig,
    adam: AdamState,
    epoch: usize,
    history: Vec<EpochStats>,
    best: Option<(usize, f64, NetworkSnapshot)>,
}

impl Trainer {
    pub fn new(net: KGNetwork, config: TrainConfig) -> Result<Self> {
        config.loss.validate()?;
        if config.batch_size == 0 {
            return Err(Error::InvalidSpec("batch_size must be positive".into()));
        }
        let adam = AdamState::new(&net.params, config.adam);
        Ok(Self {
            net,
            config,
            adam,
            epoch: 0,
            history: Vec::new(),
            best: None,
        })
    }

    /// Continues from a checkpoint; the epoch counter carries on from it.
    pub fn resume(ck: &Checkpoint, config: TrainConfig) -> Result<Self> {
        let adam_config = config.adam;
        let mut t = Self::new(KGNetwork::restore(&ck.network)?, config)?;
        t.adam = AdamState::restore(&ck.adam)?;
        t.adam.config = adam_config;
        t.epoch = ck.epoch;
        t.history = ck.history.clone();
        t.best = ck
            .best_val_loss
            .map(|v| (ck.best_epoch, v, ck.best_network.clone()));
        Ok(t)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[EpochStats] {
        &self.history
    }

    fn epoch_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.epoch as u64);
        rng
    }

    /// Sets the feature scales from a forward pass over `seqs` when the
    /// network has never seen data.
    pub fn calibrate(&mut self, seqs: &[TrackSequence]) -> Result<()> {
        if self.net.normalizer.updates > 0 || seqs.is_empty() {
            return Ok(());
        }
        let stats = self.batch_stats(seqs)?;
        if let Some(ms) = stats.mean_square() {
            self.net.normalizer.update(ms);
        }
        Ok(())
    }

    fn batch_stats(&self, seqs: &[TrackSequence]) -> Result<FeatureStats> {
        let per_seq = seqs
            .par_iter()
            .map(|s| {
                let mut st = FeatureStats::default();
                sequence_gradient(&self.net, s, &self.config.loss, Some(&mut st)).map(|_| st)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut total = FeatureStats::default();
        for st in &per_seq {
            total.merge(st);
        }
        Ok(total)
    }

    /// Averaged loss and gradient over a batch. Per-sequence work runs in
    /// parallel; the reduction is in batch order.
    pub fn batch_gradient(&self, batch: &[&TrackSequence]) -> Result<(f64, Gradients, FeatureStats)> {
        let results = batch
            .par_iter()
            .map(|s| {
                let mut st = FeatureStats::default();
                sequence_gradient(&self.net, s, &self.config.loss, Some(&mut st))
                    .map(|(l, g)| (l, g, st))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut grads = self.net.params.zeros_like();
        let mut stats = FeatureStats::default();
        let mut loss = 0.0;
        for (l, g, st) in &results {
            loss += l;
            grads.accumulate(g);
            stats.merge(st);
        }
        let n = batch.len() as f64;
        grads.scale(1.0 / n);
        Ok((loss / n, grads, stats))
    }

    /// One pass over `train` in seeded shuffled batches, then validation.
    pub fn run_epoch(&mut self, train: &[TrackSequence], val: &[TrackSequence]) -> Result<EpochStats> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::EmptyInput);
        }
        self.calibrate(train)?;
        let epoch = self.epoch + 1;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.epoch_rng());
        let mut train_loss = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&TrackSequence> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, mut grads, stats) = self.batch_gradient(&batch)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::DivergedTraining { epoch });
            }
            if let Some(max) = self.config.grad_clip {
                let norm = grads.norm();
                if norm > max {
                    grads.scale(max / norm);
                }
            }
            adam_step(&mut self.net.params, &grads, &mut self.adam)?;
            if let Some(ms) = stats.mean_square() {
                self.net.normalizer.update(ms);
            }
            train_loss += loss * chunk.len() as f64;
        }
        train_loss /= train.len() as f64;
        let val_loss = dataset_loss(&self.net, val, &self.config.loss)?;
        if !val_loss.is_finite() {
            return Err(Error::DivergedTraining { epoch });
        }
        let stats = EpochStats {
            epoch,
            train_loss,
            val_loss,
        };
        self.epoch = epoch;
        self.history.push(stats);
        if self.best.as_ref().is_none_or(|(_, best, _)| val_loss < *best) {
            self.best = Some((epoch, val_loss, self.net.snapshot()));
        }
        Ok(stats)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let current = self.net.snapshot();
        let (best_epoch, best_val_loss, best_network) = match &self.best {
            Some((e, v, snap)) => (*e, Some(*v), snap.clone()),
            None => (self.epoch, None, current.clone()),
        };
        Checkpoint {
            version: CHECKPOINT_VERSION,
            seed: self.config.seed,
            epoch: self.epoch,
            network: current,
            best_network,
            best_epoch,
            best_val_loss,
            adam: self.adam.snapshot(),
            history: self.history.clone(),
            corpus_digest: None,
        }
    }

    pub fn best_network(&self) -> Result<KGNetwork> {
        match &self.best {
            Some((_, _, snap)) => KGNetwork::restore(snap),
            None => Ok(self.net.clone()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: KGNetwork,
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochStats>,
}

/// Trains for `config.epochs` epochs and returns the best-validation network.
pub fn train(
    net: KGNetwork,
    train_set: &[TrackSequence],
    val_set: &[TrackSequence],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut trainer = Trainer::new(net, config.clone())?;
    for _ in 0..config.epochs {
        trainer.run_epoch(train_set, val_set)?;
    }
    Ok(TrainOutcome {
        best: trainer.best_network()?,
        checkpoint: trainer.checkpoint(),
        history: trainer.history().to_vec(),
    })
}
