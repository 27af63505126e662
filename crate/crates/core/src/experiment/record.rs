use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ExperimentError, Result, StrategyChoice, TransportKind};
use crate::protocol::{Phase, TaskMetrics};
use crate::task::TaskKind;
use crate::transport::{CostBreakdown, CostLedger, CostModelInput};

/// Closed-form expectation for the clients of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskCost {
    pub task: TaskKind,
    pub clients: usize,
    /// Element counts of one client's head, the body and one tail, plus per-round split traffic.
    pub input: CostModelInput,
    /// Per-client cost of one averaging period.
    pub per_period: CostBreakdown,
    pub rounds: u32,
    pub averaging_events: u32,
    /// Steady-state elements expected over the whole run for all clients of the task.
    pub expected_elements: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub ledger: CostLedger,
    pub measured_elements: u64,
    pub expected: Vec<TaskCost>,
    pub expected_elements: f64,
}

impl CostSummary {
    pub fn matches(&self) -> bool {
        self.measured_elements as f64 == self.expected_elements
    }
}

/// One seed of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub config_hash: String,
    pub name: String,
    pub variant: String,
    pub strategy: StrategyChoice,
    pub transport: TransportKind,
    pub seed: u64,
    pub rounds: u32,
    pub metrics: Vec<TaskMetrics>,
    /// Loss-curve CSV, relative to the records file.
    pub loss_curve: Option<String>,
    pub cost: CostSummary,
    pub wall_ms: f64,
}

impl ResultRecord {
    pub fn metric(&self, task: TaskKind) -> Option<&TaskMetrics> {
        self.metrics.iter().find(|m| m.task == task)
    }

    /// Same outcome up to wall time, transport and file locations.
    pub fn same_outcome(&self, other: &ResultRecord) -> bool {
        self.config_hash == other.config_hash
            && self.seed == other.seed
            && self.metrics == other.metrics
            && self.cost == other.cost
    }
}

/// One row of a loss curve: mean client loss of a task in a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub round: u32,
    pub phase: Phase,
    pub task: TaskKind,
    pub loss: f32,
    pub averaged: bool,
    pub client_lr: f64,
    pub body_lr: f64,
}

pub fn write_curve(path: &Path, rows: &[CurveRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curve(path: &Path) -> Result<Vec<CurveRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Encodes one record as `<byte length>\t<json>\n`.
pub fn encode_record(record: &ResultRecord) -> Result<String> {
    let json = serde_json::to_string(record)?;
    Ok(format!("{}\t{json}\n", json.len()))
}

/// Append-only records file; every record is flushed as soon as it is written.
#[derive(Debug)]
pub struct RecordSink {
    path: PathBuf,
    file: File,
}

impl RecordSink {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            path: path.to_owned(),
            file,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, record: &ResultRecord) -> Result<()> {
        self.file.write_all(encode_record(record)?.as_bytes())?;
        self.file.flush()?;
        Ok(())
    }
}

/// Reads every record, rejecting truncated or corrupt lines.
pub fn read_records(path: &Path) -> Result<Vec<ResultRecord>> {
    let file = File::open(path).map_err(|e| ExperimentError::Record {
        line: 0,
        message: format!("cannot open {}: {e}", path.display()),
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        out.push(
            decode_record_line(&line).map_err(|message| ExperimentError::Record {
                line: i + 1,
                message,
            })?,
        );
    }
    Ok(out)
}

pub fn decode_record_line(line: &str) -> std::result::Result<ResultRecord, String> {
    let (len, json) = line.split_once('\t').ok_or("missing length prefix")?;
    let len: usize = len
        .parse()
        .map_err(|_| format!("bad length prefix `{len}`"))?;
    if json.len() != len {
        return Err(format!(
            "length prefix says {len} bytes, found {}",
            json.len()
        ));
    }
    serde_json::from_str(json).map_err(|e| format!("invalid record: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> ResultRecord {
        ResultRecord {
            config_hash: "ab".into(),
            name: "n".into(),
            variant: "base".into(),
            strategy: StrategyChoice::Sl,
            transport: TransportKind::Inproc,
            seed: 1,
            rounds: 3,
            metrics: vec![TaskMetrics {
                task: TaskKind::Classification,
                metric: 0.75,
                accuracy: Some(0.5),
                samples: 4,
            }],
            loss_curve: None,
            cost: CostSummary {
                ledger: CostLedger::new(),
                measured_elements: 0,
                expected: Vec::new(),
                expected_elements: 0.0,
            },
            wall_ms: 1.5,
        }
    }

    #[test]
    fn records_round_trip_and_corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let mut sink = RecordSink::open(&path).unwrap();
        sink.append(&record()).unwrap();
        sink.append(&record()).unwrap();
        assert_eq!(read_records(&path).unwrap(), vec![record(), record()]);

        let text = std::fs::read_to_string(&path).unwrap();
        let cut = &text[..text.len() - 5];
        std::fs::write(&path, cut).unwrap();
        assert!(matches!(
            read_records(&path),
            Err(ExperimentError::Record { line: 2, .. })
        ));
    }
}
