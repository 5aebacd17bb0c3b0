//! Runs a sequence of chained calls against one environment, logs every
//! call as it completes and summarizes the accepted ones.

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::unix_now_ns;
use crate::drivers::{provision, DriverConfig, DriverError, EnvironmentKind};
use crate::linsolve::check_dominance;
use crate::stats::{confidence_filter, summarize, FilterConfig, StatsError, StatsSummary};
use crate::wire::{log_path, CallRecord, LogError, LogSink, WireRequest};

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub environment: EnvironmentKind,
    pub num_calls: usize,
    pub iterations_per_call: u64,
    pub system_id: String,
    /// Guess for the first call; the zero vector when unset.
    pub initial_guess: Option<Vec<f64>>,
    pub filter: FilterConfig,
    pub output_dir: PathBuf,
    pub run_id: String,
    /// Leading calls logged but left out of the statistics.
    pub warmup_calls: usize,
    pub driver: DriverConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            environment: EnvironmentKind::InProcess,
            num_calls: 100,
            iterations_per_call: 2500,
            system_id: crate::systems::CANONICAL5.into(),
            initial_guess: None,
            filter: FilterConfig::default(),
            output_dir: PathBuf::from("bench-logs"),
            run_id: default_run_id(),
            warmup_calls: 0,
            driver: DriverConfig::default(),
        }
    }
}

pub fn default_run_id() -> String {
    format!("{}-{}", unix_now_ns() / 1_000_000_000, std::process::id())
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment: {0}")]
    Config(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Provision(DriverError),
    #[error("run aborted after {} completed calls (log: {}): {source}", .partial.records.len(), .partial.log_path.display())]
    Aborted {
        partial: Box<PartialRun>,
        #[source]
        source: Box<HarnessError>,
    },
    #[error("call {call_index} failed: {source}")]
    Call {
        call_index: u64,
        #[source]
        source: DriverError,
    },
    #[error("interrupted")]
    Interrupted,
}

/// What a failed run managed to record before stopping.
#[derive(Debug)]
pub struct PartialRun {
    pub records: Vec<CallRecord>,
    pub log_path: PathBuf,
}

/// Filtered statistics over a set of records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    /// `None` when the filter rejected every call.
    pub operation: Option<StatsSummary>,
    pub communication: Option<StatsSummary>,
    /// Accepted over total.
    pub accuracy: f64,
    pub accepted: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub environment_label: String,
    pub run_id: String,
    pub system_id: String,
    pub log_path: PathBuf,
    pub warmup_calls: usize,
    pub aggregate: Aggregate,
    pub records: Vec<CallRecord>,
}

impl ExperimentResult {
    /// Records that count towards the statistics.
    pub fn measured(&self) -> &[CallRecord] {
        &self.records[self.warmup_calls.min(self.records.len())..]
    }
}

/// The guess for the next call: the previous output, or the configured
/// starting guess (zero vector by default) for the first call.
pub fn chain_rule(previous: Option<&CallRecord>, first_guess: &[f64]) -> Vec<f64> {
    previous
        .map(|r| r.output_vector.clone())
        .unwrap_or_else(|| first_guess.to_vec())
}

/// Applies the confidence filter to `records` against `exact` and
/// summarizes the operation and communication durations of accepted calls.
pub fn aggregate(
    records: &[CallRecord],
    filter: &FilterConfig,
    exact: &[f64],
) -> Result<Aggregate, HarnessError> {
    if records.is_empty() {
        return Err(HarnessError::Config("no records to aggregate".into()));
    }
    let mut errors = Vec::with_capacity(records.len());
    for r in records {
        if r.output_vector.len() != exact.len() {
            return Err(HarnessError::Config(format!(
                "call {} has {} components, ground truth has {}",
                r.call_index,
                r.output_vector.len(),
                exact.len()
            )));
        }
        errors.push(
            r.output_vector
                .iter()
                .zip(exact)
                .map(|(o, x)| o - x)
                .collect::<Vec<f64>>(),
        );
    }
    let partition = confidence_filter(&errors, filter)?;
    let accepted = partition.accepted.len();
    let rejected = partition.rejected.len();
    let pick = |f: fn(&CallRecord) -> f64| -> Result<Option<StatsSummary>, StatsError> {
        if accepted == 0 {
            return Ok(None);
        }
        let v: Vec<f64> = partition.accepted.iter().map(|&i| f(&records[i])).collect();
        let mut s = summarize(&v)?;
        s.filtered_out = rejected;
        Ok(Some(s))
    };
    Ok(Aggregate {
        operation: pick(|r| r.operation_duration_s)?,
        communication: pick(|r| r.communication_duration_s)?,
        accuracy: accepted as f64 / records.len() as f64,
        accepted,
        total: records.len(),
    })
}

static INTERRUPTED: AtomicBool = AtomicBool::new(false);

extern "C" fn on_interrupt(_: libc::c_int) {
    INTERRUPTED.store(true, Ordering::SeqCst);
}

/// Makes SIGINT and SIGTERM stop a run between calls (with teardown)
/// instead of killing the process.
pub fn install_interrupt_handler() {
    // SAFETY: the handler only stores to an atomic.
    unsafe {
        let handler = on_interrupt as extern "C" fn(libc::c_int) as libc::sighandler_t;
        libc::signal(libc::SIGINT, handler);
        libc::signal(libc::SIGTERM, handler);
    }
}

fn interrupted() -> bool {
    INTERRUPTED.load(Ordering::SeqCst)
}

/// Runs one experiment. Each record is appended to the log before the next
/// call starts; the environment is torn down on every exit path.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult, HarnessError> {
    if config.num_calls == 0 {
        return Err(HarnessError::Config("number of calls must be at least 1".into()));
    }
    if config.warmup_calls >= config.num_calls {
        return Err(HarnessError::Config(format!(
            "{} warm-up calls leave nothing to measure out of {}",
            config.warmup_calls, config.num_calls
        )));
    }
    config.filter.validate()?;
    let system = config
        .driver
        .registry
        .get(&config.system_id)
        .ok_or_else(|| HarnessError::Config(format!("unknown system `{}`", config.system_id)))?;
    let exact = system
        .known_solution()
        .ok_or_else(|| {
            HarnessError::Config(format!(
                "system `{}` has no ground truth to check results against",
                config.system_id
            ))
        })?
        .to_vec();
    let first_guess = match &config.initial_guess {
        Some(g) if g.len() != system.dim() => {
            return Err(HarnessError::Config(format!(
                "initial guess has {} components, system needs {}",
                g.len(),
                system.dim()
            )))
        }
        Some(g) => g.clone(),
        None => vec![0.0; system.dim()],
    };
    let dominance = check_dominance(system);
    if !dominance.strictly_dominant {
        log::warn!("system `{}`: {dominance}", config.system_id);
    }

    let label = config.environment.label();
    let mut sink = LogSink::create(log_path(&config.output_dir, &label, &config.run_id))?;
    let log_file = sink.path().to_path_buf();
    let mut handle = provision(config.environment, &config.driver).map_err(HarnessError::Provision)?;

    let mut records: Vec<CallRecord> = Vec::with_capacity(config.num_calls);
    let mut failure = None;
    for k in 0..config.num_calls {
        if interrupted() {
            failure = Some(HarnessError::Interrupted);
            break;
        }
        let req = WireRequest {
            initial_guess: chain_rule(records.last(), &first_guess),
            sent_at_unix_ns: unix_now_ns(),
            call_index: k as u64,
            iterations: config.iterations_per_call,
            system_id: config.system_id.clone(),
        };
        match handle.invoke(&req) {
            Ok(rec) => {
                if let Err(e) = sink.append(&rec) {
                    failure = Some(e.into());
                    break;
                }
                records.push(rec);
            }
            Err(_) if interrupted() => {
                failure = Some(HarnessError::Interrupted);
                break;
            }
            Err(source) => {
                failure = Some(HarnessError::Call {
                    call_index: k as u64,
                    source,
                });
                break;
            }
        }
    }
    if let Err(e) = handle.teardown() {
        log::warn!("{label}: {e}");
    }
    if let Some(source) = failure {
        return Err(HarnessError::Aborted {
            partial: Box::new(PartialRun {
                records,
                log_path: log_file,
            }),
            source: Box::new(source),
        });
    }

    let aggregate = aggregate(&records[config.warmup_calls..], &config.filter, &exact)?;
    Ok(ExperimentResult {
        environment_label: label,
        run_id: config.run_id.clone(),
        system_id: config.system_id.clone(),
        log_path: log_file,
        warmup_calls: config.warmup_calls,
        aggregate,
        records,
    })
}

/// Outcome of one slot in a matrix run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum MatrixOutcome {
    Completed(ExperimentResult),
    Failed {
        environment_label: String,
        error: String,
        completed_calls: usize,
        log_path: Option<PathBuf>,
    },
}

impl MatrixOutcome {
    pub fn environment_label(&self) -> &str {
        match self {
            MatrixOutcome::Completed(r) => &r.environment_label,
            MatrixOutcome::Failed {
                environment_label, ..
            } => environment_label,
        }
    }
}

/// Runs experiments one after another. A failing slot is recorded and the
/// remaining slots still run. Slots sharing an environment label get
/// distinct run ids.
pub fn run_matrix(configs: &[ExperimentConfig]) -> Vec<MatrixOutcome> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(configs.len());
    for (slot, config) in configs.iter().enumerate() {
        let mut config = config.clone();
        let label = config.environment.label();
        if !seen.insert((label.clone(), config.run_id.clone())) {
            config.run_id = format!("{}-{slot}", config.run_id);
        }
        log::info!("matrix slot {slot}: {label}");
        out.push(match run_experiment(&config) {
            Ok(result) => MatrixOutcome::Completed(result),
            Err(e) => {
                log::error!("{label}: {e}");
                let (completed_calls, log_path) = match &e {
                    HarnessError::Aborted { partial, .. } => {
                        (partial.records.len(), Some(partial.log_path.clone()))
                    }
                    _ => (0, None),
                };
                MatrixOutcome::Failed {
                    environment_label: label,
                    error: e.to_string(),
                    completed_calls,
                    log_path,
                }
            }
        });
    }
    out
}
