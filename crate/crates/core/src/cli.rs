use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::drivers::EnvironmentKind;
use crate::harness::{
    aggregate, default_run_id, install_interrupt_handler, run_experiment, run_matrix, Aggregate,
    ExperimentConfig, ExperimentResult, HarnessError, MatrixOutcome,
};
use crate::report::{compare, render_comparison, render_table, Format, ReportMetadata, ReportTable};
use crate::service::{run_stdio_worker, run_until_signal, ServiceConfig, ServiceMode};
use crate::stats::FilterConfig;
use crate::systems::SystemRegistry;
use crate::wire::read_log_file;

#[derive(Parser, Debug)]
#[command(name = "bbench", version, about = "Measure what an execution boundary costs a small numeric workload")]
struct Cli {
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one experiment and print its summary.
    Run(ExperimentArgs),
    /// Run the four standard environments back to back.
    Matrix {
        #[command(flatten)]
        args: ExperimentArgs,
        /// Use container environments instead of plain processes.
        #[arg(long)]
        containers: bool,
    },
    /// Start a workload or relay service (also configurable via BB_* variables).
    Serve(ServeArgs),
    /// Recompute the summary of a JSONL call log.
    Aggregate(AggregateArgs),
    /// Render a results file as a table.
    Report(ReportArgs),
    /// Solve one request read from stdin.
    #[command(hide = true)]
    Worker,
}

/// Experiment settings. Every field can also come from `--config`.
#[derive(Args, Debug, Default, Clone, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct ExperimentArgs {
    /// in-process, spawn-process, spawn-container, persistent-local,
    /// persistent-container, nested-relay or nested-relay-container
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    calls: Option<u64>,
    #[arg(long)]
    iterations: Option<u64>,
    /// Relays in front of the solver for nested environments.
    #[arg(long)]
    depth: Option<u32>,
    #[arg(long)]
    system: Option<String>,
    /// Directory for logs and results.
    #[arg(long)]
    out: Option<PathBuf>,
    /// json, markdown or csv
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    runtime_cmd: Option<String>,
    #[arg(long)]
    image: Option<String>,
    #[arg(long)]
    port_base: Option<u16>,
    #[arg(long)]
    confidence: Option<f64>,
    #[arg(long)]
    dof: Option<u32>,
    /// Leading calls excluded from statistics.
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long)]
    run_id: Option<String>,
    /// Flat TOML file with any of the keys above; flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

impl ExperimentArgs {
    fn or(self, file: ExperimentArgs) -> Self {
        Self {
            env: self.env.or(file.env),
            calls: self.calls.or(file.calls),
            iterations: self.iterations.or(file.iterations),
            depth: self.depth.or(file.depth),
            system: self.system.or(file.system),
            out: self.out.or(file.out),
            format: self.format.or(file.format),
            runtime_cmd: self.runtime_cmd.or(file.runtime_cmd),
            image: self.image.or(file.image),
            port_base: self.port_base.or(file.port_base),
            confidence: self.confidence.or(file.confidence),
            dof: self.dof.or(file.dof),
            warmup: self.warmup.or(file.warmup),
            run_id: self.run_id.or(file.run_id),
            config: self.config,
        }
    }
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long)]
    port: Option<u16>,
    /// solve or relay
    #[arg(long)]
    mode: Option<String>,
    /// Base URL of the next hop, e.g. http://127.0.0.1:7000
    #[arg(long)]
    next_hop: Option<String>,
    #[arg(long)]
    worker_id: Option<String>,
    #[arg(long)]
    bind: Option<String>,
}

#[derive(Args, Debug)]
struct AggregateArgs {
    #[arg(long)]
    log: PathBuf,
    #[arg(long)]
    confidence: Option<f64>,
    #[arg(long)]
    dof: Option<u32>,
    #[arg(long, default_value_t = 0)]
    warmup: u64,
    #[arg(long, default_value = "json")]
    format: String,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Results file written by `run` or `matrix`.
    #[arg(long)]
    results: PathBuf,
    #[arg(long, default_value = "markdown")]
    format: String,
}

/// Results file written next to the logs and read by `report`.
#[derive(Debug, Serialize, Deserialize)]
pub struct ResultsFile {
    pub metadata: ReportMetadata,
    pub outcomes: Vec<MatrixOutcome>,
}

/// Summary printed by `run` and `aggregate`.
#[derive(Debug, Serialize)]
struct Summary<'a> {
    environment: &'a str,
    system_id: &'a str,
    calls: usize,
    warmup_calls: usize,
    #[serde(flatten)]
    aggregate: &'a Aggregate,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn runtime(msg: impl std::fmt::Display) -> Failure {
    Failure::Runtime(msg.to_string())
}

/// Entry point. Returns the process exit code: 0 success, 1 runtime
/// error, 2 usage error.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp_millis()
        .try_init();

    let outcome = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Matrix { args, containers } => cmd_matrix(args, containers),
        Command::Serve(args) => cmd_serve(args),
        Command::Aggregate(args) => cmd_aggregate(args),
        Command::Report(args) => cmd_report(args),
        Command::Worker => cmd_worker(),
    };
    match outcome {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("\nFor more information, try '--help'.");
            2
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            1
        }
    }
}

fn filter_from(confidence: Option<f64>, dof: Option<u32>) -> Result<FilterConfig, Failure> {
    let mut f = FilterConfig::default();
    if let Some(c) = confidence {
        f.confidence_level = c;
    }
    if let Some(d) = dof {
        f.degrees_of_freedom = d;
    }
    f.validate().map_err(|e| usage(e.to_string()))?;
    Ok(f)
}

fn parse_format(s: &str) -> Result<Format, Failure> {
    s.parse().map_err(usage)
}

struct Resolved {
    config: ExperimentConfig,
    format: Format,
    echo: BTreeMap<String, String>,
}

fn resolve(args: ExperimentArgs, default_format: Format) -> Result<Resolved, Failure> {
    let args = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            let file: ExperimentArgs = toml::from_str(&text)
                .map_err(|e| usage(format!("config {}: {e}", path.display())))?;
            args.or(file)
        }
        None => args,
    };
    let mut config = ExperimentConfig::default();
    let depth = args.depth.unwrap_or(1);
    if depth == 0 {
        return Err(usage("--depth must be at least 1"));
    }
    if let Some(env) = &args.env {
        config.environment = EnvironmentKind::parse(env, depth).map_err(usage)?;
    }
    if let Some(calls) = args.calls {
        if calls == 0 {
            return Err(usage("--calls must be at least 1"));
        }
        config.num_calls = calls as usize;
    }
    if let Some(it) = args.iterations {
        config.iterations_per_call = it;
    }
    if let Some(s) = args.system {
        if config.driver.registry.get(&s).is_none() {
            return Err(usage(format!(
                "unknown system `{s}` (available: {})",
                config.driver.registry.ids().join(", ")
            )));
        }
        config.system_id = s;
    }
    if let Some(out) = args.out {
        config.output_dir = out;
    }
    if let Some(r) = args.runtime_cmd {
        config.driver.runtime_cmd = r;
    }
    if let Some(i) = args.image {
        config.driver.image = i;
    }
    config.driver.port_base = args.port_base;
    config.filter = filter_from(args.confidence, args.dof)?;
    config.driver.filter = config.filter;
    if let Some(w) = args.warmup {
        config.warmup_calls = w as usize;
    }
    if config.warmup_calls >= config.num_calls {
        return Err(usage(format!(
            "--warmup {} must be smaller than --calls {}",
            config.warmup_calls, config.num_calls
        )));
    }
    if let Some(id) = args.run_id {
        if id.is_empty() || id.contains('/') {
            return Err(usage("--run-id must be non-empty and contain no `/`"));
        }
        config.run_id = id;
    }
    let format = match &args.format {
        Some(f) => parse_format(f)?,
        None => default_format,
    };

    let echo = BTreeMap::from([
        ("env".to_owned(), config.environment.label()),
        ("calls".to_owned(), config.num_calls.to_string()),
        ("iterations".to_owned(), config.iterations_per_call.to_string()),
        ("depth".to_owned(), depth.to_string()),
        ("system".to_owned(), config.system_id.clone()),
        ("out".to_owned(), config.output_dir.display().to_string()),
        ("runtime-cmd".to_owned(), config.driver.runtime_cmd.clone()),
        ("image".to_owned(), config.driver.image.clone()),
        (
            "port-base".to_owned(),
            config
                .driver
                .port_base
                .map_or_else(|| "ephemeral".into(), |p| p.to_string()),
        ),
        ("confidence".to_owned(), config.filter.confidence_level.to_string()),
        ("dof".to_owned(), config.filter.degrees_of_freedom.to_string()),
        ("warmup".to_owned(), config.warmup_calls.to_string()),
        ("run-id".to_owned(), config.run_id.clone()),
    ]);
    Ok(Resolved {
        config,
        format,
        echo,
    })
}

fn summary_json(env: &str, system: &str, calls: usize, warmup: usize, agg: &Aggregate) -> String {
    let mut s = serde_json::to_string_pretty(&Summary {
        environment: env,
        system_id: system,
        calls,
        warmup_calls: warmup,
        aggregate: agg,
    })
    .expect("summary serializes");
    s.push('\n');
    s
}

fn write_results(path: &Path, file: &ResultsFile) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(file).map_err(runtime)?;
    std::fs::write(path, text)
        .map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn print_result(result: &ExperimentResult, format: Format, meta: ReportMetadata) {
    let out = match format {
        Format::Json => summary_json(
            &result.environment_label,
            &result.system_id,
            result.records.len(),
            result.warmup_calls,
            &result.aggregate,
        ),
        other => render_table(
            &ReportTable::from_results(std::slice::from_ref(result), meta),
            other,
        ),
    };
    print!("{out}");
}

fn cmd_run(args: ExperimentArgs) -> Result<(), Failure> {
    let Resolved {
        config,
        format,
        echo,
    } = resolve(args, Format::Json)?;
    std::fs::create_dir_all(&config.output_dir)
        .map_err(|e| runtime(format!("cannot create {}: {e}", config.output_dir.display())))?;
    install_interrupt_handler();
    let result = run_experiment(&config)?;
    let meta = ReportMetadata::current(echo);
    let results_path = config.output_dir.join(format!(
        "{}_{}.result.json",
        result.environment_label, config.run_id
    ));
    write_results(
        &results_path,
        &ResultsFile {
            metadata: meta.clone(),
            outcomes: vec![MatrixOutcome::Completed(result.clone())],
        },
    )?;
    eprintln!("log: {}", result.log_path.display());
    eprintln!("results: {}", results_path.display());
    print_result(&result, format, meta);
    Ok(())
}

fn cmd_matrix(args: ExperimentArgs, containers: bool) -> Result<(), Failure> {
    let depth = args.depth.unwrap_or(5);
    if args.env.is_some() {
        return Err(usage("`matrix` runs a fixed set of environments; drop --env"));
    }
    let Resolved {
        config,
        format,
        mut echo,
    } = resolve(args, Format::Markdown)?;
    echo.insert("depth".into(), depth.to_string());
    echo.insert("containers".into(), containers.to_string());
    std::fs::create_dir_all(&config.output_dir)
        .map_err(|e| runtime(format!("cannot create {}: {e}", config.output_dir.display())))?;
    let envs = if containers {
        [
            EnvironmentKind::InProcess,
            EnvironmentKind::SpawnContainer,
            EnvironmentKind::PersistentServiceContainer,
            EnvironmentKind::NestedRelay {
                depth,
                containerized: true,
            },
        ]
    } else {
        [
            EnvironmentKind::InProcess,
            EnvironmentKind::SpawnProcess,
            EnvironmentKind::PersistentServiceLocal,
            EnvironmentKind::NestedRelay {
                depth,
                containerized: false,
            },
        ]
    };
    let configs: Vec<_> = envs
        .iter()
        .map(|&environment| ExperimentConfig {
            environment,
            ..config.clone()
        })
        .collect();
    install_interrupt_handler();
    let outcomes = run_matrix(&configs);
    let meta = ReportMetadata::current(echo);
    let results_path = config
        .output_dir
        .join(format!("matrix_{}.result.json", config.run_id));
    let file = ResultsFile {
        metadata: meta,
        outcomes,
    };
    write_results(&results_path, &file)?;
    eprintln!("results: {}", results_path.display());
    print!("{}", render_results(&file, format));
    let failed: Vec<&str> = file
        .outcomes
        .iter()
        .filter(|o| matches!(o, MatrixOutcome::Failed { .. }))
        .map(MatrixOutcome::environment_label)
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(runtime(format!("failed environments: {}", failed.join(", "))))
    }
}

fn render_results(file: &ResultsFile, format: Format) -> String {
    let mut out = render_table(
        &ReportTable::from_outcomes(&file.outcomes, file.metadata.clone()),
        format,
    );
    let completed: Vec<ExperimentResult> = file
        .outcomes
        .iter()
        .filter_map(|o| match o {
            MatrixOutcome::Completed(r) => Some(r.clone()),
            MatrixOutcome::Failed { .. } => None,
        })
        .collect();
    if completed.len() >= 2 && format != Format::Json {
        out.push('\n');
        out.push_str(&render_comparison(&compare(&completed), format));
    }
    out
}

fn cmd_serve(args: ServeArgs) -> Result<(), Failure> {
    let mut config = ServiceConfig::from_env().map_err(|e| usage(e.to_string()))?;
    let env_hop = match &config.mode {
        ServiceMode::Relay { next_hop } => Some(next_hop.clone()),
        ServiceMode::Solve => None,
    };
    match (args.mode.as_deref(), args.next_hop) {
        (None, None) => {}
        (Some("solve"), _) => config.mode = ServiceMode::Solve,
        (Some("relay"), hop) | (None, hop @ Some(_)) => {
            config.mode = ServiceMode::Relay {
                next_hop: hop
                    .or(env_hop)
                    .ok_or_else(|| usage("--mode relay needs --next-hop"))?,
            }
        }
        (Some(other), _) => return Err(usage(format!("--mode must be solve or relay, not `{other}`"))),
    }
    if let Some(id) = args.worker_id {
        config.worker_id = id;
    }
    let host = args.bind.unwrap_or_else(|| config.listen.ip().to_string());
    let port = args.port.unwrap_or(config.listen.port());
    config.listen = format!("{host}:{port}")
        .parse()
        .map_err(|_| usage(format!("cannot listen on {host}:{port}")))?;
    run_until_signal(config).map_err(runtime)
}

fn cmd_worker() -> Result<(), Failure> {
    let worker_id = std::env::var("BB_WORKER_ID").unwrap_or_else(|_| format!("worker-{}", std::process::id()));
    let stdin = std::io::stdin().lock();
    let stdout = std::io::stdout().lock();
    run_stdio_worker(stdin, stdout, &SystemRegistry::builtin(), &worker_id).map_err(|e| {
        let body = e.to_body(&worker_id);
        runtime(serde_json::to_string(&body).expect("error body serializes"))
    })
}

fn cmd_aggregate(args: AggregateArgs) -> Result<(), Failure> {
    let format = parse_format(&args.format)?;
    let filter = filter_from(args.confidence, args.dof)?;
    let readout = read_log_file(&args.log).map_err(runtime)?;
    let records = readout.records;
    let Some(first) = records.first() else {
        return Err(runtime(format!("{} contains no calls", args.log.display())));
    };
    if let Some(odd) = records
        .iter()
        .find(|r| r.system_id != first.system_id || r.environment_label != first.environment_label)
    {
        return Err(runtime(format!(
            "call {} belongs to a different run ({} / {})",
            odd.call_index, odd.environment_label, odd.system_id
        )));
    }
    let warmup = args.warmup as usize;
    if warmup >= records.len() {
        return Err(usage(format!(
            "--warmup {warmup} leaves nothing of {} calls",
            records.len()
        )));
    }
    let registry = SystemRegistry::builtin();
    let exact = registry
        .get(&first.system_id)
        .and_then(|s| s.known_solution())
        .ok_or_else(|| runtime(format!("no ground truth for system `{}`", first.system_id)))?;
    let agg = aggregate(&records[warmup..], &filter, exact)?;
    let result = ExperimentResult {
        environment_label: first.environment_label.clone(),
        run_id: args
            .log
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(default_run_id),
        system_id: first.system_id.clone(),
        log_path: args.log.clone(),
        warmup_calls: warmup,
        aggregate: agg,
        records,
    };
    print_result(&result, format, ReportMetadata::default());
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), Failure> {
    let format = parse_format(&args.format)?;
    let text = std::fs::read_to_string(&args.results)
        .map_err(|e| runtime(format!("cannot read {}: {e}", args.results.display())))?;
    let file: ResultsFile = serde_json::from_str(&text)
        .map_err(|e| runtime(format!("{} is not a results file: {e}", args.results.display())))?;
    if file.outcomes.is_empty() {
        return Err(runtime("results file has no entries"));
    }
    print!("{}", render_results(&file, format));
    Ok(())
}
