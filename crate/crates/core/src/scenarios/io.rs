//! One JSON object per line, one sequence per object.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{RadarPoint, Step, TrackSequence, TruthState};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepRecord {
    t: f64,
    /// `[x, y, vx, vy]` per point.
    points: Vec<[f64; 4]>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceRecord {
    schema_version: u32,
    id: u64,
    k: usize,
    frame: String,
    steps: Vec<StepRecord>,
    /// `[x, y, vx, vy, ax, ay]` per step.
    truth: Vec<[f64; 6]>,
}

#[derive(Deserialize)]
struct VersionProbe {
    schema_version: u32,
}

impl SequenceRecord {
    fn from_sequence(seq: &TrackSequence) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            id: seq.id,
            k: seq.len(),
            frame: seq.frame.clone(),
            steps: seq
                .steps
                .iter()
                .map(|s| StepRecord {
                    t: s.t,
                    points: s.cluster.iter().map(|p| [p.x, p.y, p.vx, p.vy]).collect(),
                })
                .collect(),
            truth: seq.truth.iter().map(TruthState::to_array).collect(),
        }
    }

    fn into_sequence(self) -> std::result::Result<TrackSequence, String> {
        if self.steps.len() != self.k || self.truth.len() != self.k {
            return Err(format!(
                "header says k={} but found {} steps and {} truth states",
                self.k,
                self.steps.len(),
                self.truth.len()
            ));
        }
        let id = self.id;
        let steps = self
            .steps
            .into_iter()
            .map(|s| Step {
                t: s.t,
                cluster: s
                    .points
                    .into_iter()
                    .map(|[x, y, vx, vy]| RadarPoint {
                        x,
                        y,
                        vx,
                        vy,
                        t: s.t,
                        track_id: id,
                    })
                    .collect(),
            })
            .collect();
        let seq = TrackSequence {
            id,
            frame: self.frame,
            steps,
            truth: self.truth.into_iter().map(TruthState::from_array).collect(),
        };
        seq.validate().map_err(|e| e.to_string())?;
        Ok(seq)
    }
}

pub fn write_sequences<W: Write>(mut out: W, seqs: &[TrackSequence]) -> Result<()> {
    for seq in seqs {
        serde_json::to_writer(&mut out, &SequenceRecord::from_sequence(seq))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_sequences<R: Read>(input: R) -> Result<Vec<TrackSequence>> {
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(input).lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::ParseError { line: line_no, msg };
        let probe: VersionProbe =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if probe.schema_version != SCHEMA_VERSION {
            return Err(Error::SchemaVersionMismatch {
                expected: SCHEMA_VERSION,
                found: probe.schema_version,
            });
        }
        let record: SequenceRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        out.push(record.into_sequence().map_err(parse_err)?);
    }
    Ok(out)
}

pub fn save_sequences(path: &Path, seqs: &[TrackSequence]) -> Result<()> {
    write_sequences(BufWriter::new(File::create(path)?), seqs)
}

pub fn load_sequences(path: &Path) -> Result<Vec<TrackSequence>> {
    read_sequences(File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios::{generate_corpus, CorpusSpec, SensorSpec, TrajectoryKind, TrajectorySpec};

    fn corpus() -> Vec<TrackSequence> {
        let spec = CorpusSpec {
            trajectory: TrajectorySpec {
                kind: TrajectoryKind::EightDrive {
                    half_width: 40.0,
                    speed: 8.0,
                    center: [60.0, 0.0],
                    rotation: 0.3,
                    start_fraction: 0.0,
                },
                duration: 5.0,
                rate: 10.0,
            },
            sensor: SensorSpec::default(),
            count: 5,
            first_id: 10,
            vary_start: true,
        };
        generate_corpus(&spec, 99).unwrap()
    }

    fn to_bytes(seqs: &[TrackSequence]) -> Vec<u8> {
        let mut buf = Vec::new();
        write_sequences(&mut buf, seqs).unwrap();
        buf
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let seqs = corpus();
        let bytes = to_bytes(&seqs);
        let back = read_sequences(&bytes[..]).unwrap();
        assert_eq!(back, seqs);
        for (a, b) in back.iter().zip(&seqs) {
            for (sa, sb) in a.truth.iter().zip(&b.truth) {
                for (x, y) in sa.to_array().iter().zip(sb.to_array()) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn empty_list_round_trips() {
        let bytes = to_bytes(&[]);
        assert!(bytes.is_empty());
        assert!(read_sequences(&bytes[..]).unwrap().is_empty());
    }

    #[test]
    fn truncated_file_names_offending_line() {
        let bytes = to_bytes(&corpus());
        let cut = bytes.len() - 40;
        match read_sequences(&bytes[..cut]) {
            Err(Error::ParseError { line, .. }) => assert_eq!(line, 5),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn other_schema_version_is_rejected() {
        let text = String::from_utf8(to_bytes(&corpus()[..1])).unwrap();
        let text = text.replacen("\"schema_version\":1", "\"schema_version\":7", 1);
        assert!(matches!(
            read_sequences(text.as_bytes()),
            Err(Error::SchemaVersionMismatch { expected: 1, found: 7 })
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seqs.jsonl");
        let seqs = corpus();
        save_sequences(&path, &seqs).unwrap();
        assert_eq!(load_sequences(&path).unwrap(), seqs);
    }
}
