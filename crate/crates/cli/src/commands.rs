use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use stateest::kalmannet::KGNetwork;
use stateest::metrics::{
    aggregate, mae, read_step_csv, rmse, write_step_csv, EvalReport, Group, ReportMeta, StepRecord,
    REPORT_VERSION,
};
use stateest::runner::{run_imm, run_kf, run_knet, CovarianceSource, SequenceRun};
use stateest::scenarios::{generate_corpus, load_sequences, save_sequences, TrackSequence};
use stateest::training::{Checkpoint, EpochStats, Trainer};

use crate::config::{RunConfig, Split};
use crate::error::CliError;

pub type CliResult<T> = Result<T, CliError>;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn file_digest(path: &Path) -> CliResult<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| CliError::io(path, e))?))
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, contents: &[u8]) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn load_corpus(path: &Path) -> CliResult<Vec<TrackSequence>> {
    if !path.exists() {
        return Err(CliError::MissingCorpus(path.to_owned()));
    }
    load_sequences(path).map_err(|e| match e {
        stateest::Error::Io(io) => CliError::io(path, io),
        other => CliError::Usage(format!("{}: {other}", path.display())),
    })
}

/// Writes the train/val/test corpora and prints a summary line per split.
pub fn simulate(cfg: &RunConfig) -> CliResult<String> {
    ensure_dir(&cfg.out_dir)?;
    let mut summary = String::new();
    for split in Split::ALL {
        let seqs = generate_corpus(&cfg.corpus.spec(split), cfg.seed)?;
        let path = cfg.out_dir.join(split.file_name());
        save_sequences(&path, &seqs).map_err(|e| match e {
            stateest::Error::Io(io) => CliError::io(&path, io),
            other => other.into(),
        })?;
        let points: usize = seqs.iter().map(TrackSequence::point_count).sum();
        let steps: usize = seqs.iter().map(TrackSequence::len).sum();
        writeln!(
            summary,
            "{:<5} {:>5} sequences  {:>7} steps  {:>8} points  -> {}",
            format!("{split:?}").to_lowercase(),
            seqs.len(),
            steps,
            points,
            path.display()
        )
        .unwrap();
    }
    Ok(summary)
}

pub fn default_checkpoint(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("checkpoint.json")
}

fn history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for h in history {
        writeln!(out, "{},{},{}", h.epoch, h.train_loss, h.val_loss).unwrap();
    }
    out
}

/// Trains for `train.epochs` epochs. When `resume` names an existing
/// checkpoint, training continues from it and the epoch counter carries on.
pub fn train(cfg: &RunConfig, checkpoint: Option<&Path>, log: &mut dyn FnMut(&str)) -> CliResult<PathBuf> {
    let train_path = cfg.out_dir.join(Split::Train.file_name());
    let val_path = cfg.out_dir.join(Split::Val.file_name());
    let train_set = load_corpus(&train_path)?;
    let val_set = load_corpus(&val_path)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(CliError::Usage("training needs nonempty train and val corpora".into()));
    }
    let digest = sha256_hex(format!("{}{}", file_digest(&train_path)?, file_digest(&val_path)?).as_bytes());
    let tc = cfg.train.train_config(cfg.seed);
    let ck_path = checkpoint.map(Path::to_owned).unwrap_or_else(|| default_checkpoint(cfg));
    let mut trainer = match checkpoint {
        Some(path) if path.exists() => {
            let ck = Checkpoint::load(path).map_err(|e| match e {
                stateest::Error::Io(io) => CliError::io(path, io),
                other => other.into(),
            })?;
            if ck.corpus_digest.as_deref().is_some_and(|d| d != digest) {
                return Err(CliError::CorpusMismatch(format!(
                    "checkpoint {} was trained on another corpus",
                    path.display()
                )));
            }
            log(&format!("resuming from {} at epoch {}", path.display(), ck.epoch));
            Trainer::resume(&ck, tc.clone())?
        }
        _ => {
            let init_seed = cfg.train.init_seed.unwrap_or(cfg.seed);
            Trainer::new(KGNetwork::new(cfg.train.arch, init_seed), tc.clone())?
        }
    };
    ensure_dir(&cfg.out_dir)?;
    for _ in 0..tc.epochs {
        let stats = match trainer.run_epoch(&train_set, &val_set) {
            Ok(s) => s,
            Err(stateest::Error::DivergedTraining { epoch }) => {
                return Err(CliError::Diverged { epoch, path: ck_path });
            }
            Err(e) => return Err(e.into()),
        };
        log(&format!(
            "epoch {:>4}  train {:.6}  val {:.6}",
            stats.epoch, stats.train_loss, stats.val_loss
        ));
        let mut ck = trainer.checkpoint();
        ck.corpus_digest = Some(digest.clone());
        write_file(&ck_path, ck.to_json()?.as_bytes())?;
        write_file(
            &cfg.out_dir.join("loss_history.csv"),
            history_csv(trainer.history()).as_bytes(),
        )?;
    }
    if tc.epochs == 0 {
        let mut ck = trainer.checkpoint();
        ck.corpus_digest = Some(digest);
        write_file(&ck_path, ck.to_json()?.as_bytes())?;
    }
    Ok(ck_path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum FilterName {
    Kf,
    Imm,
    Kalmannet,
}

impl FilterName {
    pub fn label(self) -> &'static str {
        match self {
            FilterName::Kf => "kf",
            FilterName::Imm => "imm",
            FilterName::Kalmannet => "kalmannet",
        }
    }
}

pub struct Evaluation {
    pub report: EvalReport,
    pub dir: PathBuf,
}

/// Runs one filter over a corpus and writes `steps.csv` and `report.json`
/// under `<out>/eval_<filter>/`.
pub fn evaluate(
    cfg: &RunConfig,
    filter: FilterName,
    corpus: Option<&Path>,
    checkpoint: Option<&Path>,
) -> CliResult<Evaluation> {
    let corpus_path = corpus
        .map(Path::to_owned)
        .unwrap_or_else(|| cfg.out_dir.join(Split::Test.file_name()));
    let seqs = load_corpus(&corpus_path)?;
    if seqs.is_empty() {
        return Err(CliError::Usage(format!("{} holds no sequences", corpus_path.display())));
    }
    let digest = file_digest(&corpus_path)?;
    let r = cfg.filters.r(&cfg.corpus.sensor);
    let p0 = cfg.filters.initial_covariance;
    let (runs, labels, cov_source): (Vec<SequenceRun>, Vec<String>, String) = match filter {
        FilterName::Kf => {
            let model = cfg.filters.kf.model;
            let runs = seqs
                .par_iter()
                .map(|s| run_kf(s, &model, &r, &p0))
                .collect::<Result<Vec<_>, _>>()?;
            (runs, vec![], "filter covariance".into())
        }
        FilterName::Imm => {
            let bank = cfg.filters.imm.build(&r)?;
            let runs = seqs
                .par_iter()
                .map(|s| run_imm(s, &bank, &p0))
                .collect::<Result<Vec<_>, _>>()?;
            (runs, bank.labels(), "filter covariance".into())
        }
        FilterName::Kalmannet => {
            let ck_path = checkpoint
                .map(Path::to_owned)
                .unwrap_or_else(|| default_checkpoint(cfg));
            if !ck_path.exists() {
                return Err(CliError::MissingCheckpoint(ck_path));
            }
            let net = Checkpoint::load(&ck_path)?.best()?;
            let source = cfg.filters.kalmannet.covariance_source;
            let runs = seqs
                .par_iter()
                .map(|s| run_knet(s, &net, source))
                .collect::<Result<Vec<_>, _>>()?;
            let desc = match source {
                CovarianceSource::None => "none: the learned-gain filter carries no covariance".into(),
                other => other.describe(),
            };
            (runs, vec![], desc)
        }
    };
    let records: Vec<StepRecord> = runs.iter().flat_map(|r| r.records.iter().cloned()).collect();
    let probs: Option<Vec<Vec<f64>>> = if labels.is_empty() {
        None
    } else {
        Some(
            runs.iter()
                .flat_map(|r| r.model_probs.clone().unwrap_or_default())
                .collect(),
        )
    };
    let confidence = cfg.metrics.confidence;
    let report = EvalReport {
        version: REPORT_VERSION,
        meta: ReportMeta {
            filter: filter.label().into(),
            scenario: cfg.corpus.scenario.clone(),
            seed: cfg.seed,
            corpus_digest: digest,
            sequences: seqs.len(),
            steps: records.len(),
            confidence,
            volume_definition: "sqrt(det) of the position+velocity covariance block".into(),
            covariance_source: cov_source,
        },
        aggregates: aggregate(&records, confidence)?,
    };
    let dir = cfg.out_dir.join(format!("eval_{}", filter.label()));
    ensure_dir(&dir)?;
    let mut csv = Vec::new();
    write_step_csv(&mut csv, &records, probs.as_deref(), &labels, confidence)?;
    write_file(&dir.join("steps.csv"), &csv)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(&dir.join("report.json"), json.as_bytes())?;
    Ok(Evaluation { report, dir })
}

pub fn summarize(report: &EvalReport) -> String {
    let a = &report.aggregates;
    let mut out = format!(
        "{} on {} ({} sequences, {} steps)\n",
        report.meta.filter, report.meta.scenario, report.meta.sequences, report.meta.steps
    );
    writeln!(out, "{:<13} {:>10} {:>10} {:>10}", "group", "RMSE", "MAE", "sigma").unwrap();
    for g in Group::ALL {
        let m = a.mae.group(g);
        writeln!(
            out,
            "{:<13} {:>10.4} {:>10.4} {:>10.4}",
            g.label(),
            a.rmse.group(g),
            m.combined,
            m.combined_sigma
        )
        .unwrap();
    }
    for (name, s) in [
        ("NEES pos", a.nees_position),
        ("NEES vel", a.nees_velocity),
        ("NEES pos+vel", a.nees_pos_vel),
        ("NIS", a.nis),
    ] {
        match s {
            Some(s) => writeln!(
                out,
                "{name:<13} mean {:>8.3}  in [{:.3}, {:.3}]: {:.1}%",
                s.mean,
                s.lower,
                s.upper,
                100.0 * s.rate
            )
            .unwrap(),
            None => writeln!(out, "{name:<13} unavailable ({})", report.meta.covariance_source).unwrap(),
        }
    }
    out
}

pub fn load_report(path: &Path) -> CliResult<EvalReport> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: path.to_owned(),
        source,
    })
}

/// One comparison row: a metric for a state group across reports.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub metric: &'static str,
    pub group: Group,
    pub values: Vec<f64>,
    /// `'*'` on the single best (lowest) value, `'='` on values tied for best.
    pub markers: Vec<char>,
}

pub fn compare_rows(reports: &[EvalReport]) -> CliResult<Vec<CompareRow>> {
    if reports.len() < 2 {
        return Err(CliError::Usage("compare needs at least two reports".into()));
    }
    let digest = &reports[0].meta.corpus_digest;
    if let Some(other) = reports.iter().find(|r| &r.meta.corpus_digest != digest) {
        return Err(CliError::CorpusMismatch(format!(
            "{} ({}) vs {} ({})",
            reports[0].meta.filter, digest, other.meta.filter, other.meta.corpus_digest
        )));
    }
    let mut rows = Vec::new();
    for g in Group::ALL {
        let metrics: [(&'static str, Box<dyn Fn(&EvalReport) -> f64>); 3] = [
            ("rmse", Box::new(move |r: &EvalReport| r.aggregates.rmse.group(g))),
            ("mae", Box::new(move |r: &EvalReport| r.aggregates.mae.group(g).combined)),
            ("sigma", Box::new(move |r: &EvalReport| r.aggregates.mae.group(g).combined_sigma)),
        ];
        for (metric, get) in metrics {
            let values: Vec<f64> = reports.iter().map(get).collect();
            let best = values.iter().copied().fold(f64::INFINITY, f64::min);
            let n_best = values.iter().filter(|v| **v == best).count();
            let markers = values
                .iter()
                .map(|v| match (*v == best, n_best) {
                    (true, 1) => '*',
                    (true, _) => '=',
                    _ => ' ',
                })
                .collect();
            rows.push(CompareRow {
                metric,
                group: g,
                values,
                markers,
            });
        }
    }
    Ok(rows)
}

fn report_names(reports: &[EvalReport]) -> Vec<String> {
    reports
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let dup = reports.iter().filter(|o| o.meta.filter == r.meta.filter).count() > 1;
            if dup {
                format!("{}#{}", r.meta.filter, i + 1)
            } else {
                r.meta.filter.clone()
            }
        })
        .collect()
}

/// Text table and CSV of the comparison.
pub fn compare(reports: &[EvalReport]) -> CliResult<(String, String)> {
    let rows = compare_rows(reports)?;
    let names = report_names(reports);
    let mut text = format!("{:<13} {:<6}", "group", "metric");
    let mut csv = String::from("group,metric");
    for n in &names {
        write!(text, " {:>14}", n).unwrap();
        write!(csv, ",{n},{n}_best").unwrap();
    }
    text.push('\n');
    csv.push('\n');
    for row in &rows {
        write!(text, "{:<13} {:<6}", row.group.label(), row.metric).unwrap();
        write!(csv, "{},{}", row.group.label(), row.metric).unwrap();
        for (v, m) in row.values.iter().zip(&row.markers) {
            write!(text, " {:>13.4}{}", v, m).unwrap();
            write!(csv, ",{},{}", v, if *m == ' ' { "" } else { "1" }).unwrap();
        }
        text.push('\n');
        csv.push('\n');
    }
    text.push_str("* best, = tied for best\n");
    Ok((text, csv))
}

/// Recomputes error aggregates from a per-step CSV.
pub fn report_from_csv(path: &Path) -> CliResult<String> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let records = read_step_csv(&text)?;
    let json = serde_json::json!({
        "source": path.display().to_string(),
        "steps": records.len(),
        "mae": mae(&records)?,
        "rmse": rmse(&records)?,
    });
    Ok(serde_json::to_string_pretty(&json).expect("json value serializes"))
}
