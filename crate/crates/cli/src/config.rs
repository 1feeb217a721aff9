use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stateest::imm::BankConfig;
use stateest::kalmannet::KnetArch;
use stateest::motion::measurement_noise;
use stateest::runner::CovarianceSource;
use stateest::scenarios::{CorpusSpec, SensorSpec, TrajectoryKind, TrajectorySpec};
use stateest::training::TrainConfig;
use stateest::{InitialCovariance, Mat, MotionModel};

use crate::error::CliError;

/// Top-level run configuration. Unknown keys anywhere are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Directory for corpora, checkpoints and reports.
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub filters: FilterConfigs,
    #[serde(default)]
    pub metrics: MetricsConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: default_out(),
            corpus: CorpusConfig::default(),
            train: TrainSection::default(),
            filters: FilterConfigs::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    /// Label carried into reports.
    #[serde(default = "default_scenario")]
    pub scenario: String,
    #[serde(default = "default_train_count")]
    pub train: usize,
    #[serde(default = "default_val_count")]
    pub val: usize,
    #[serde(default = "default_test_count")]
    pub test: usize,
    #[serde(default = "default_trajectory")]
    pub trajectory: TrajectorySpec,
    #[serde(default)]
    pub sensor: SensorSpec,
    #[serde(default = "yes")]
    pub vary_start: bool,
}

fn default_scenario() -> String {
    "eight_drive".into()
}
fn default_train_count() -> usize {
    40
}
fn default_val_count() -> usize {
    10
}
fn default_test_count() -> usize {
    20
}
fn yes() -> bool {
    true
}

/// 8-drive at 10 Hz for 10 s: K = 100 steps per sequence.
fn default_trajectory() -> TrajectorySpec {
    TrajectorySpec {
        kind: TrajectoryKind::EightDrive {
            half_width: 40.0,
            speed: 8.0,
            center: [60.0, 0.0],
            rotation: 0.0,
            start_fraction: 0.0,
        },
        duration: 10.0,
        rate: 10.0,
    }
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            scenario: default_scenario(),
            train: default_train_count(),
            val: default_val_count(),
            test: default_test_count(),
            trajectory: default_trajectory(),
            sensor: SensorSpec::default(),
            vary_start: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.jsonl",
            Split::Val => "val.jsonl",
            Split::Test => "test.jsonl",
        }
    }
}

impl CorpusConfig {
    /// Splits share the corpus seed and use disjoint sequence ids.
    pub fn spec(&self, split: Split) -> CorpusSpec {
        let (count, first_id) = match split {
            Split::Train => (self.train, 0),
            Split::Val => (self.val, self.train),
            Split::Test => (self.test, self.train + self.val),
        };
        CorpusSpec {
            trajectory: self.trajectory.clone(),
            sensor: self.sensor.clone(),
            count,
            first_id: first_id as u64,
            vary_start: self.vary_start,
        }
    }
}

/// Training hyperparameters and network shape. The run seed is applied
/// separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: stateest::neural::AdamConfig,
    pub loss: stateest::training::LossConfig,
    pub grad_clip: Option<f64>,
    pub arch: KnetArch,
    /// Seed of the network initialization; the run seed when absent.
    pub init_seed: Option<u64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            adam: d.adam,
            loss: d.loss,
            grad_clip: d.grad_clip,
            arch: KnetArch::default(),
            init_seed: None,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: self.adam,
            loss: self.loss,
            grad_clip: self.grad_clip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct FilterConfigs {
    #[serde(default)]
    pub kf: KfConfig,
    #[serde(default)]
    pub imm: BankConfig,
    #[serde(default)]
    pub kalmannet: KnetEvalConfig,
    #[serde(default)]
    pub initial_covariance: InitialCovariance,
    /// Point noise for the model-based filters; derived from the sensor
    /// (including extent spread) when absent.
    #[serde(default)]
    pub measurement: Option<MeasurementConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementConfig {
    pub pos_std: f64,
    pub vel_std: f64,
}

impl FilterConfigs {
    pub fn r(&self, sensor: &SensorSpec) -> Mat {
        match self.measurement {
            Some(m) => measurement_noise(m.pos_std, m.vel_std),
            None => sensor.effective_r(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KfConfig {
    #[serde(default = "default_kf_model")]
    pub model: MotionModel,
}

fn default_kf_model() -> MotionModel {
    MotionModel::ca(1.0).expect("valid default model")
}

impl Default for KfConfig {
    fn default() -> Self {
        Self {
            model: default_kf_model(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct KnetEvalConfig {
    #[serde(default)]
    pub covariance_source: CovarianceSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    #[serde(default = "default_confidence")]
    pub confidence: f64,
}

fn default_confidence() -> f64 {
    0.95
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            confidence: default_confidence(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|msg| CliError::Config {
            path: path.to_owned(),
            msg,
        })
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.corpus.trajectory.validate().map_err(|e| e.to_string())?;
        self.corpus.sensor.validate().map_err(|e| e.to_string())?;
        self.train.loss.validate().map_err(|e| e.to_string())?;
        if self.train.batch_size == 0 {
            return Err("train.batch_size must be positive".into());
        }
        if !(self.metrics.confidence > 0.0 && self.metrics.confidence < 1.0) {
            return Err("metrics.confidence must be in (0, 1)".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.corpus.trajectory.steps(), 100);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("sed = 3").is_err());
        assert!(RunConfig::parse("[train]\nepoch = 3").is_err());
        assert!(RunConfig::parse("[corpus.sensor]\npos_noise = 1.0").is_err());
        assert!(RunConfig::parse("[corpus.trajectory]\nkind = \"eight_drive\"\nspeeed = 3.0").is_err());
        assert!(RunConfig::parse("[train.adam]\nlearning_rate = 0.1").is_err());
    }

    #[test]
    fn nested_sections_parse() {
        let text = r#"
seed = 5
[corpus]
train = 3
[corpus.trajectory]
kind = "maneuver_switch"
turn_rate = -0.2
[train]
epochs = 2
adam = { lr = 0.002 }
[filters.imm]
models = [{ kind = "cv", noise_intensity = 1.0 }, { kind = "ct", noise_intensity = 1.0, turn_rate = 0.3 }]
[filters.kalmannet.covariance_source]
kind = "empirical_window"
window = 20
"#;
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.adam.lr, 0.002);
        assert_eq!(cfg.filters.imm.models.len(), 2);
        assert!(matches!(
            cfg.corpus.trajectory.kind,
            TrajectoryKind::ManeuverSwitch { turn_rate, .. } if turn_rate == -0.2
        ));
        assert_eq!(
            cfg.filters.kalmannet.covariance_source,
            CovarianceSource::EmpiricalWindow { window: 20 }
        );
    }

    #[test]
    fn split_ids_are_disjoint() {
        let c = CorpusConfig::default();
        let (tr, va, te) = (c.spec(Split::Train), c.spec(Split::Val), c.spec(Split::Test));
        assert_eq!(va.first_id, tr.count as u64);
        assert_eq!(te.first_id, va.first_id + va.count as u64);
    }
}
