use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{WireRequest, WireResponse};

#[derive(Debug, Error)]
pub enum LogError {
    #[error("log I/O on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("log line {line} is malformed: {message}")]
    Malformed { line: usize, message: String },
    #[error("cannot serialize call record: {0}")]
    Serialize(String),
}

/// One workload invocation as seen from the measuring side.
///
/// `communication_duration_s` is everything in the round trip that is not
/// the solve itself. `round_trip_s` is stored as the sum of the other two so
/// the identity holds exactly after a log round trip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub call_index: u64,
    pub environment_label: String,
    pub system_id: String,
    pub iterations: u64,
    pub sent_at_unix_ns: u64,
    pub received_at_unix_ns: u64,
    pub op_start_unix_ns: u64,
    pub op_end_unix_ns: u64,
    pub worker_id: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub relay_path: Vec<String>,
    pub operation_duration_s: f64,
    pub communication_duration_s: f64,
    pub round_trip_s: f64,
    pub input_vector: Vec<f64>,
    pub output_vector: Vec<f64>,
    pub accepted_by_filter: bool,
}

impl CallRecord {
    /// Builds a record from one request/response exchange and the client's
    /// monotonic round-trip measurement.
    pub fn from_exchange(
        environment_label: &str,
        req: &WireRequest,
        resp: WireResponse,
        round_trip: Duration,
        accepted_by_filter: bool,
    ) -> Self {
        let op_ns = resp.operation_ns();
        let rt_ns = round_trip.as_nanos() as i128;
        let comm_ns = rt_ns - i128::from(op_ns);
        let operation_duration_s = op_ns as f64 * 1e-9;
        let communication_duration_s = comm_ns as f64 * 1e-9;
        Self {
            call_index: req.call_index,
            environment_label: environment_label.to_owned(),
            system_id: req.system_id.clone(),
            iterations: req.iterations,
            sent_at_unix_ns: req.sent_at_unix_ns,
            received_at_unix_ns: resp.received_at_unix_ns,
            op_start_unix_ns: resp.op_start_unix_ns,
            op_end_unix_ns: resp.op_end_unix_ns,
            worker_id: resp.worker_id,
            relay_path: resp.relay_path,
            operation_duration_s,
            communication_duration_s,
            round_trip_s: operation_duration_s + communication_duration_s,
            input_vector: req.initial_guess.clone(),
            output_vector: resp.result,
            accepted_by_filter,
        }
    }
}

/// `<output_dir>/<environment_label>_<run_id>.jsonl`
pub fn log_path(output_dir: &Path, environment_label: &str, run_id: &str) -> PathBuf {
    output_dir.join(format!("{environment_label}_{run_id}.jsonl"))
}

/// Append-only JSONL writer; one record per line, flushed per record.
#[derive(Debug)]
pub struct LogSink {
    path: PathBuf,
    file: File,
    lines: usize,
}

impl LogSink {
    /// Creates a fresh log file. Fails if the file already exists so two
    /// experiments never share one.
    pub fn create(path: impl Into<PathBuf>) -> Result<Self, LogError> {
        let path = path.into();
        let io_err = |source| LogError::Io {
            path: path.clone(),
            source,
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io_err)?;
        }
        let file = OpenOptions::new()
            .append(true)
            .create_new(true)
            .open(&path)
            .map_err(io_err)?;
        Ok(Self {
            path,
            file,
            lines: 0,
        })
    }

    pub fn append(&mut self, record: &CallRecord) -> Result<(), LogError> {
        let mut line =
            serde_json::to_string(record).map_err(|e| LogError::Serialize(e.to_string()))?;
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|()| self.file.flush())
            .map_err(|source| LogError::Io {
                path: self.path.clone(),
                source,
            })?;
        self.lines += 1;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn lines_written(&self) -> usize {
        self.lines
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LogReadout {
    pub records: Vec<CallRecord>,
    /// Malformed final lines skipped (0 or 1), typically a write cut short
    /// by a crash.
    pub dropped_trailing: usize,
}

pub fn read_log_records(mut source: impl Read) -> Result<LogReadout, LogError> {
    let mut text = String::new();
    source
        .read_to_string(&mut text)
        .map_err(|source| LogError::Io {
            path: PathBuf::from("<reader>"),
            source,
        })?;
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .collect();
    let mut out = LogReadout::default();
    for (pos, &(lineno, line)) in lines.iter().enumerate() {
        match serde_json::from_str::<CallRecord>(line) {
            Ok(rec) => out.records.push(rec),
            Err(e) if pos + 1 == lines.len() => {
                log::warn!("dropping malformed trailing log line {}: {e}", lineno + 1);
                out.dropped_trailing += 1;
            }
            Err(e) => {
                return Err(LogError::Malformed {
                    line: lineno + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

pub fn read_log_file(path: &Path) -> Result<LogReadout, LogError> {
    let file = File::open(path).map_err(|source| LogError::Io {
        path: path.to_owned(),
        source,
    })?;
    read_log_records(io::BufReader::new(file))
}
