//! Error and consistency metrics over per-step filter records.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{chi2_interval, mahalanobis_sq, spd_logdet, Mat, Vector};

pub const REPORT_VERSION: u32 = 1;

/// One filter output next to the truth it should match.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub seq_id: u64,
    pub step: usize,
    pub t: f64,
    pub est: Vector,
    pub truth: Vector,
    pub p: Option<Mat>,
    pub innovation: Option<Vector>,
    pub s: Option<Mat>,
}

impl StepRecord {
    pub fn error(&self) -> Vector {
        &self.est - &self.truth
    }
}

/// Position, velocity and acceleration pairs of the 6-dim state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Position,
    Velocity,
    Acceleration,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Position, Group::Velocity, Group::Acceleration];

    pub fn indices(self) -> [usize; 2] {
        match self {
            Group::Position => [0, 1],
            Group::Velocity => [2, 3],
            Group::Acceleration => [4, 5],
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Group::Position => "position",
            Group::Velocity => "velocity",
            Group::Acceleration => "acceleration",
        }
    }
}

/// State components entering a NEES or volume computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Components {
    Position,
    Velocity,
    PosVel,
    Full,
}

impl Components {
    pub fn indices(self) -> &'static [usize] {
        match self {
            Components::Position => &[0, 1],
            Components::Velocity => &[2, 3],
            Components::PosVel => &[0, 1, 2, 3],
            Components::Full => &[0, 1, 2, 3, 4, 5],
        }
    }

    pub fn dof(self) -> usize {
        self.indices().len()
    }
}

fn sub_vector(v: &Vector, idx: &[usize]) -> Vector {
    Vector::from_fn(idx.len(), |i, _| v[idx[i]])
}

fn sub_matrix(m: &Mat, idx: &[usize]) -> Mat {
    Mat::from_fn(idx.len(), idx.len(), |i, j| m[(idx[i], idx[j])])
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupMae {
    /// Mean absolute error of each axis.
    pub per_axis: [f64; 2],
    /// Standard deviation of each axis's absolute error.
    pub sigma: [f64; 2],
    /// Mean of `|e_x| + |e_y|`.
    pub combined: f64,
    pub combined_sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaeReport {
    pub position: GroupMae,
    pub velocity: GroupMae,
    pub acceleration: GroupMae,
}

impl MaeReport {
    pub fn group(&self, g: Group) -> &GroupMae {
        match g {
            Group::Position => &self.position,
            Group::Velocity => &self.velocity,
            Group::Acceleration => &self.acceleration,
        }
    }
}

pub fn mae(records: &[StepRecord]) -> Result<MaeReport> {
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    let group = |g: Group| {
        let [i, j] = g.indices();
        let ax: Vec<f64> = records.iter().map(|r| (r.est[i] - r.truth[i]).abs()).collect();
        let ay: Vec<f64> = records.iter().map(|r| (r.est[j] - r.truth[j]).abs()).collect();
        let both: Vec<f64> = ax.iter().zip(&ay).map(|(a, b)| a + b).collect();
        let (mx, sx) = mean_std(&ax);
        let (my, sy) = mean_std(&ay);
        let (mc, sc) = mean_std(&both);
        GroupMae {
            per_axis: [mx, my],
            sigma: [sx, sy],
            combined: mc,
            combined_sigma: sc,
        }
    };
    Ok(MaeReport {
        position: group(Group::Position),
        velocity: group(Group::Velocity),
        acceleration: group(Group::Acceleration),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmseReport {
    pub position: f64,
    pub velocity: f64,
    pub acceleration: f64,
}

impl RmseReport {
    pub fn group(&self, g: Group) -> f64 {
        match g {
            Group::Position => self.position,
            Group::Velocity => self.velocity,
            Group::Acceleration => self.acceleration,
        }
    }
}

/// `√(mean of e_x² + e_y²)` per group.
pub fn rmse(records: &[StepRecord]) -> Result<RmseReport> {
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    let group = |g: Group| {
        let [i, j] = g.indices();
        let sum: f64 = records
            .iter()
            .map(|r| (r.est[i] - r.truth[i]).powi(2) + (r.est[j] - r.truth[j]).powi(2))
            .sum();
        (sum / records.len() as f64).sqrt()
    };
    Ok(RmseReport {
        position: group(Group::Position),
        velocity: group(Group::Velocity),
        acceleration: group(Group::Acceleration),
    })
}

/// `x̃ᵀ P⁻¹ x̃` of the selected components at one step.
pub fn nees_step(record: &StepRecord, components: Components, index: usize) -> Result<f64> {
    let p = record.p.as_ref().ok_or(Error::MissingCovariance(index))?;
    let idx = components.indices();
    mahalanobis_sq(&sub_vector(&record.error(), idx), &sub_matrix(p, idx))
}

pub fn nees(records: &[StepRecord], components: Components) -> Result<Vec<f64>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| nees_step(r, components, i))
        .collect()
}

pub fn nis_step(record: &StepRecord, index: usize) -> Result<f64> {
    match (&record.innovation, &record.s) {
        (Some(nu), Some(s)) => mahalanobis_sq(nu, s),
        _ => Err(Error::MissingInnovation(index)),
    }
}

pub fn nis(records: &[StepRecord]) -> Result<Vec<f64>> {
    records.iter().enumerate().map(|(i, r)| nis_step(r, i)).collect()
}

/// Fraction of values inside the two-sided chi-squared interval.
pub fn consistency_rate(series: &[f64], dof: usize, confidence: f64) -> Result<f64> {
    if series.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (lo, hi) = chi2_interval(dof, confidence)?;
    let inside = series.iter().filter(|v| **v >= lo && **v <= hi).count();
    Ok(inside as f64 / series.len() as f64)
}

/// `√det` of the selected covariance block.
pub fn covariance_volume(p: &Mat, components: Components) -> Result<f64> {
    Ok((0.5 * spd_logdet(&sub_matrix(p, components.indices()))?).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub filter: String,
    pub scenario: String,
    pub seed: u64,
    /// Identity of the evaluated corpus; compare refuses to mix corpora.
    pub corpus_digest: String,
    pub sequences: usize,
    pub steps: usize,
    pub confidence: f64,
    /// Covariance volume is `√det` of the position+velocity block, a proxy
    /// for ellipsoid volume.
    pub volume_definition: String,
    /// Where P and S came from, or why they are absent.
    pub covariance_source: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencySummary {
    pub dof: usize,
    pub lower: f64,
    pub upper: f64,
    pub mean: f64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub mae: MaeReport,
    pub rmse: RmseReport,
    pub nees_position: Option<ConsistencySummary>,
    pub nees_velocity: Option<ConsistencySummary>,
    pub nees_pos_vel: Option<ConsistencySummary>,
    pub nis: Option<ConsistencySummary>,
    pub mean_log10_volume: Option<f64>,
}

/// Aggregate evaluation of one filter over a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub meta: ReportMeta,
    pub aggregates: Aggregates,
}

fn summary(series: &[f64], dof: usize, confidence: f64) -> Result<ConsistencySummary> {
    let (lower, upper) = chi2_interval(dof, confidence)?;
    Ok(ConsistencySummary {
        dof,
        lower,
        upper,
        mean: series.iter().sum::<f64>() / series.len() as f64,
        rate: consistency_rate(series, dof, confidence)?,
    })
}

/// Consistency metrics use the records that carry the needed covariance
/// (a filter has no innovation at its initial step); they are absent when
/// no record does.
pub fn aggregate(records: &[StepRecord], confidence: f64) -> Result<Aggregates> {
    let with_p: Vec<StepRecord> = records.iter().filter(|r| r.p.is_some()).cloned().collect();
    let with_s: Vec<StepRecord> = records
        .iter()
        .filter(|r| r.innovation.is_some() && r.s.is_some())
        .cloned()
        .collect();
    let with_cov = |c: Components| -> Result<Option<ConsistencySummary>> {
        if with_p.is_empty() {
            Ok(None)
        } else {
            summary(&nees(&with_p, c)?, c.dof(), confidence).map(Some)
        }
    };
    let nis_summary = if with_s.is_empty() {
        None
    } else {
        Some(summary(&nis(&with_s)?, 4, confidence)?)
    };
    let volume = if with_p.is_empty() {
        None
    } else {
        let logs = with_p
            .iter()
            .map(|r| covariance_volume(r.p.as_ref().unwrap(), Components::PosVel).map(f64::log10))
            .collect::<Result<Vec<_>>>()?;
        Some(logs.iter().sum::<f64>() / logs.len() as f64)
    };
    Ok(Aggregates {
        mae: mae(records)?,
        rmse: rmse(records)?,
        nees_position: with_cov(Components::Position)?,
        nees_velocity: with_cov(Components::Velocity)?,
        nees_pos_vel: with_cov(Components::PosVel)?,
        nis: nis_summary,
        mean_log10_volume: volume,
    })
}

/// Column header of the per-step CSV.
pub fn csv_header(model_labels: &[String]) -> Vec<String> {
    let mut cols: Vec<String> = ["seq_id", "step", "t"].iter().map(|s| s.to_string()).collect();
    for pre in ["est", "truth"] {
        for c in ["x", "y", "vx", "vy", "ax", "ay"] {
            cols.push(format!("{pre}_{c}"));
        }
    }
    for c in [
        "pos_err",
        "vel_err",
        "acc_err",
        "nees_pos",
        "nees_vel",
        "nees_posvel",
        "nees2_lo",
        "nees2_hi",
        "nees4_lo",
        "nees4_hi",
        "nis",
        "nis_lo",
        "nis_hi",
        "log10_volume",
    ] {
        cols.push(c.to_string());
    }
    for l in model_labels {
        cols.push(format!("mu_{l}"));
    }
    cols
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the per-step series. Floats use shortest round-trip formatting so
/// the aggregates can be recomputed exactly from the file. Missing values
/// are empty cells.
pub fn write_step_csv<W: Write>(
    mut out: W,
    records: &[StepRecord],
    model_probs: Option<&[Vec<f64>]>,
    model_labels: &[String],
    confidence: f64,
) -> Result<()> {
    let (n2_lo, n2_hi) = chi2_interval(2, confidence)?;
    let (n4_lo, n4_hi) = chi2_interval(4, confidence)?;
    writeln!(out, "{}", csv_header(model_labels).join(","))?;
    for (i, r) in records.iter().enumerate() {
        let mut cells = vec![r.seq_id.to_string(), r.step.to_string(), r.t.to_string()];
        cells.extend(r.est.iter().map(f64::to_string));
        cells.extend(r.truth.iter().map(f64::to_string));
        let e = r.error();
        for g in Group::ALL {
            let [a, b] = g.indices();
            cells.push(e[a].hypot(e[b]).to_string());
        }
        let nees_of = |c| r.p.as_ref().map(|_| nees_step(r, c, i)).transpose();
        cells.push(opt(nees_of(Components::Position)?));
        cells.push(opt(nees_of(Components::Velocity)?));
        cells.push(opt(nees_of(Components::PosVel)?));
        cells.extend([n2_lo, n2_hi, n4_lo, n4_hi].map(|v| v.to_string()));
        let nis_v = match (&r.innovation, &r.s) {
            (Some(_), Some(_)) => Some(nis_step(r, i)?),
            _ => None,
        };
        cells.push(opt(nis_v));
        cells.extend([n4_lo, n4_hi].map(|v| v.to_string()));
        let vol = r
            .p
            .as_ref()
            .map(|p| covariance_volume(p, Components::PosVel).map(f64::log10))
            .transpose()?;
        cells.push(opt(vol));
        if let Some(probs) = model_probs {
            cells.extend(probs[i].iter().map(f64::to_string));
        }
        writeln!(out, "{}", cells.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Reads `seq_id`, `step`, `t`, estimates and truths back from a per-step CSV
/// (covariances are not stored).
pub fn read_step_csv(text: &str) -> Result<Vec<StepRecord>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::EmptyInput)?;
    let cols: Vec<&str> = header.split(',').collect();
    let find = |name: &str| {
        cols.iter().position(|c| *c == name).ok_or_else(|| Error::ParseError {
            line: 1,
            msg: format!("missing column {name}"),
        })
    };
    let est_idx = ["x", "y", "vx", "vy", "ax", "ay"].map(|c| find(&format!("est_{c}")));
    let truth_idx = ["x", "y", "vx", "vy", "ax", "ay"].map(|c| find(&format!("truth_{c}")));
    let (id_i, step_i, t_i) = (find("seq_id")?, find("step")?, find("t")?);
    let mut out = Vec::new();
    for (ln, line) in lines {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        let err = |msg: String| Error::ParseError { line: ln + 1, msg };
        let num = |i: usize| -> Result<f64> {
            cells
                .get(i)
                .ok_or_else(|| err("short row".into()))?
                .parse::<f64>()
                .map_err(|e| err(e.to_string()))
        };
        let mut est = Vector::zeros(6);
        let mut truth = Vector::zeros(6);
        for k in 0..6 {
            est[k] = num(*est_idx[k].as_ref().map_err(|e| err(e.to_string()))?)?;
            truth[k] = num(*truth_idx[k].as_ref().map_err(|e| err(e.to_string()))?)?;
        }
        out.push(StepRecord {
            seq_id: num(id_i)? as u64,
            step: num(step_i)? as usize,
            t: num(t_i)?,
            est,
            truth,
            p: None,
            innovation: None,
            s: None,
        });
    }
    Ok(out)
}
