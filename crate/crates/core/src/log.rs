//! Search log: one JSON record per evaluated architecture.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::GraphSummary;
use crate::eval::{Candidate, MetricTriple, Outcome};
use crate::genotype::Genotype;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Controller,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRecord {
    pub index: usize,
    pub epoch: usize,
    pub source: Source,
    pub genotype: Genotype,
    pub reward: f64,
    /// Absent when the evaluator failed.
    pub metrics: Option<MetricTriple>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub params_generated: u64,
    #[serde(flatten)]
    pub summary: GraphSummary,
}

impl SearchRecord {
    pub fn new(index: usize, epoch: usize, source: Source, candidate: &Candidate, outcome: Outcome) -> Self {
        Self {
            index,
            epoch,
            source,
            genotype: candidate.genotype.clone(),
            reward: outcome.reward,
            metrics: outcome.metrics,
            error: outcome.error,
            params_generated: candidate.cost.params_generated,
            summary: candidate.summary,
        }
    }

    pub fn params(&self) -> u64 {
        self.summary.params
    }

    pub fn downsample_factor(&self) -> u64 {
        self.summary.downsample_factor
    }
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("log I/O: {0}")]
    Io(#[from] io::Error),
    #[error("log line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub fn parse_log(reader: impl BufRead) -> Result<Vec<SearchRecord>, LogError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record =
            serde_json::from_str(&line).map_err(|e| LogError::Parse { line: i + 1, message: e.to_string() })?;
        out.push(record);
    }
    Ok(out)
}

pub fn read_log(path: &Path) -> Result<Vec<SearchRecord>, LogError> {
    parse_log(BufReader::new(File::open(path)?))
}

pub fn to_line(record: &SearchRecord) -> String {
    serde_json::to_string(record).expect("record serializes")
}

/// Append-only writer; each record is flushed as one line.
pub struct LogWriter {
    out: BufWriter<File>,
}

impl LogWriter {
    pub fn append(path: &Path) -> Result<Self, LogError> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { out: BufWriter::new(file) })
    }

    pub fn create(path: &Path) -> Result<Self, LogError> {
        Ok(Self { out: BufWriter::new(File::create(path)?) })
    }

    pub fn write(&mut self, record: &SearchRecord) -> Result<(), LogError> {
        writeln!(self.out, "{}", to_line(record))?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn write_log(path: &Path, records: &[SearchRecord]) -> Result<(), LogError> {
    let mut w = LogWriter::create(path)?;
    for r in records {
        w.write(r)?;
    }
    Ok(())
}
