//! Tables and comparisons over experiment results.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::harness::{ExperimentResult, MatrixOutcome};
use crate::stats::median;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Markdown,
    Csv,
    Json,
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "markdown" | "md" => Ok(Format::Markdown),
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(format!("unknown format `{other}` (markdown, csv or json)")),
        }
    }
}

/// Where and how a set of results was produced.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub host: String,
    pub generated_unix_s: u64,
    pub config: BTreeMap<String, String>,
}

impl ReportMetadata {
    /// Hostname, CPU model and count of the current machine.
    pub fn current(config: BTreeMap<String, String>) -> Self {
        let read = |p: &str| std::fs::read_to_string(p).unwrap_or_default();
        let hostname = read("/proc/sys/kernel/hostname").trim().to_owned();
        let cpuinfo = read("/proc/cpuinfo");
        let model = cpuinfo
            .lines()
            .find_map(|l| l.strip_prefix("model name")?.split(':').nth(1))
            .map(str::trim)
            .unwrap_or("unknown cpu");
        let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
        Self {
            host: format!("{hostname} ({model}, {cpus} cpus)"),
            generated_unix_s: crate::clock::unix_now_ns() / 1_000_000_000,
            config,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub environment: String,
    pub op_mean_s: Option<f64>,
    pub op_stddev_s: Option<f64>,
    pub comm_mean_s: Option<f64>,
    pub comm_stddev_s: Option<f64>,
    pub accuracy: Option<f64>,
    pub n_accepted: usize,
    pub n_total: usize,
    /// Set when the run failed; the other columns are then empty.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub metadata: ReportMetadata,
    pub rows: Vec<ReportRow>,
}

fn row_of(r: &ExperimentResult) -> ReportRow {
    let a = &r.aggregate;
    ReportRow {
        environment: r.environment_label.clone(),
        op_mean_s: a.operation.map(|s| s.mean),
        op_stddev_s: a.operation.map(|s| s.population_stddev),
        comm_mean_s: a.communication.map(|s| s.mean),
        comm_stddev_s: a.communication.map(|s| s.population_stddev),
        accuracy: Some(a.accuracy),
        n_accepted: a.accepted,
        n_total: a.total,
        error: None,
    }
}

impl ReportTable {
    pub fn from_results(results: &[ExperimentResult], metadata: ReportMetadata) -> Self {
        Self {
            metadata,
            rows: results.iter().map(row_of).collect(),
        }
    }

    pub fn from_outcomes(outcomes: &[MatrixOutcome], metadata: ReportMetadata) -> Self {
        let rows = outcomes
            .iter()
            .map(|o| match o {
                MatrixOutcome::Completed(r) => row_of(r),
                MatrixOutcome::Failed {
                    environment_label,
                    error,
                    completed_calls,
                    ..
                } => ReportRow {
                    environment: environment_label.clone(),
                    op_mean_s: None,
                    op_stddev_s: None,
                    comm_mean_s: None,
                    comm_stddev_s: None,
                    accuracy: None,
                    n_accepted: 0,
                    n_total: *completed_calls,
                    error: Some(error.clone()),
                },
            })
            .collect();
        Self { metadata, rows }
    }
}

fn sci(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.5e}"))
}

fn full(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn render_table(table: &ReportTable, format: Format) -> String {
    match format {
        Format::Markdown => render_markdown(table),
        Format::Csv => render_csv(table),
        Format::Json => {
            let mut s = serde_json::to_string_pretty(table).expect("report serializes");
            s.push('\n');
            s
        }
    }
}

fn render_markdown(table: &ReportTable) -> String {
    let mut out = String::new();
    if !table.metadata.host.is_empty() {
        let _ = writeln!(out, "Host: {}\n", table.metadata.host);
    }
    out.push_str(
        "| Environment | Operation mean (s) | Operation stddev (s) | Communication mean (s) \
         | Communication stddev (s) | Accuracy | Accepted |\n",
    );
    out.push_str("|---|---|---|---|---|---|---|\n");
    for r in &table.rows {
        let accuracy = r
            .accuracy
            .map_or_else(|| "n/a".into(), |a| format!("{:.1}%", a * 100.0));
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {}/{} |",
            r.environment,
            sci(r.op_mean_s),
            sci(r.op_stddev_s),
            sci(r.comm_mean_s),
            sci(r.comm_stddev_s),
            accuracy,
            r.n_accepted,
            r.n_total
        );
    }
    for r in table.rows.iter().filter(|r| r.error.is_some()) {
        let _ = writeln!(
            out,
            "\n{} failed: {}",
            r.environment,
            r.error.as_deref().unwrap_or_default()
        );
    }
    out
}

fn render_csv(table: &ReportTable) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "environment",
        "op_mean_s",
        "op_stddev_s",
        "comm_mean_s",
        "comm_stddev_s",
        "accuracy",
        "n_accepted",
        "n_total",
    ])
    .expect("in-memory write");
    for r in &table.rows {
        w.write_record([
            r.environment.clone(),
            full(r.op_mean_s),
            full(r.op_stddev_s),
            full(r.comm_mean_s),
            full(r.comm_stddev_s),
            full(r.accuracy),
            r.n_accepted.to_string(),
            r.n_total.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}

/// Median ratio of environment `numerator` to `denominator`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRatio {
    pub numerator: String,
    pub denominator: String,
    pub operation_median_ratio: f64,
    pub communication_median_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub ratios: Vec<PairRatio>,
    pub fastest_operation: Option<String>,
    pub fastest_communication: Option<String>,
    /// Lowest standard deviation.
    pub most_deterministic_operation: Option<String>,
    pub most_deterministic_communication: Option<String>,
}

struct Medians {
    label: String,
    op: f64,
    comm: f64,
    op_sd: f64,
    comm_sd: f64,
}

fn medians_of(r: &ExperimentResult) -> Option<Medians> {
    let accepted: Vec<_> = r
        .measured()
        .iter()
        .filter(|c| c.accepted_by_filter)
        .collect();
    let op: Vec<f64> = accepted.iter().map(|c| c.operation_duration_s).collect();
    let comm: Vec<f64> = accepted.iter().map(|c| c.communication_duration_s).collect();
    Some(Medians {
        label: r.environment_label.clone(),
        op: median(&op).ok()?,
        comm: median(&comm).ok()?,
        op_sd: r.aggregate.operation?.population_stddev,
        comm_sd: r.aggregate.communication?.population_stddev,
    })
}

fn ratio(a: f64, b: f64) -> f64 {
    if a == b {
        1.0
    } else {
        a / b
    }
}

/// Pairwise median ratios over accepted, non-warm-up calls. Results with no
/// accepted calls are left out.
pub fn compare(results: &[ExperimentResult]) -> Comparison {
    let m: Vec<Medians> = results.iter().filter_map(medians_of).collect();
    let mut ratios = Vec::new();
    for (i, a) in m.iter().enumerate() {
        for b in &m[i + 1..] {
            ratios.push(PairRatio {
                numerator: b.label.clone(),
                denominator: a.label.clone(),
                operation_median_ratio: ratio(b.op, a.op),
                communication_median_ratio: ratio(b.comm, a.comm),
            });
        }
    }
    let best = |key: fn(&Medians) -> f64| {
        m.iter()
            .min_by(|x, y| key(x).total_cmp(&key(y)))
            .map(|x| x.label.clone())
    };
    Comparison {
        ratios,
        fastest_operation: best(|x| x.op),
        fastest_communication: best(|x| x.comm),
        most_deterministic_operation: best(|x| x.op_sd),
        most_deterministic_communication: best(|x| x.comm_sd),
    }
}

pub fn render_comparison(c: &Comparison, format: Format) -> String {
    match format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(c).expect("comparison serializes");
            s.push('\n');
            s
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["numerator", "denominator", "op_median_ratio", "comm_median_ratio"])
                .expect("in-memory write");
            for r in &c.ratios {
                w.write_record([
                    r.numerator.clone(),
                    r.denominator.clone(),
                    r.operation_median_ratio.to_string(),
                    r.communication_median_ratio.to_string(),
                ])
                .expect("in-memory write");
            }
            String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
        }
        Format::Markdown => {
            let mut out = String::from(
                "| Environment | vs | Operation median ratio | Communication median ratio |\n\
                 |---|---|---|---|\n",
            );
            for r in &c.ratios {
                let _ = writeln!(
                    out,
                    "| {} | {} | {:.3} | {:.3} |",
                    r.numerator,
                    r.denominator,
                    r.operation_median_ratio,
                    r.communication_median_ratio
                );
            }
            let or_none = |s: &Option<String>| s.clone().unwrap_or_else(|| "n/a".into());
            let _ = write!(
                out,
                "\nFastest operation: {}\nFastest communication: {}\n\
                 Most deterministic operation: {}\nMost deterministic communication: {}\n",
                or_none(&c.fastest_operation),
                or_none(&c.fastest_communication),
                or_none(&c.most_deterministic_operation),
                or_none(&c.most_deterministic_communication),
            );
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::Aggregate;
    use crate::stats::StatsSummary;
    use crate::wire::CallRecord;
    use std::path::PathBuf;

    fn record(label: &str, k: u64, op: f64, comm: f64) -> CallRecord {
        CallRecord {
            call_index: k,
            environment_label: label.into(),
            system_id: "canonical5".into(),
            iterations: 1,
            sent_at_unix_ns: 0,
            received_at_unix_ns: 0,
            op_start_unix_ns: 0,
            op_end_unix_ns: 0,
            worker_id: "w".into(),
            relay_path: vec![],
            operation_duration_s: op,
            communication_duration_s: comm,
            round_trip_s: op + comm,
            input_vector: vec![0.0; 5],
            output_vector: vec![0.0; 5],
            accepted_by_filter: true,
        }
    }

    fn result(label: &str, op: &[f64], comm: &[f64]) -> ExperimentResult {
        let records: Vec<_> = op
            .iter()
            .zip(comm)
            .enumerate()
            .map(|(k, (&o, &c))| record(label, k as u64, o, c))
            .collect();
        let s = |v: &[f64]| StatsSummary {
            mean: crate::stats::mean(v).unwrap(),
            population_stddev: crate::stats::population_stddev(v).unwrap(),
            count: v.len(),
            filtered_out: 0,
        };
        ExperimentResult {
            environment_label: label.into(),
            run_id: "r".into(),
            system_id: "canonical5".into(),
            log_path: PathBuf::from("x.jsonl"),
            warmup_calls: 0,
            aggregate: Aggregate {
                operation: Some(s(op)),
                communication: Some(s(comm)),
                accuracy: 1.0,
                accepted: op.len(),
                total: op.len(),
            },
            records,
        }
    }

    fn fixed_meta() -> ReportMetadata {
        ReportMetadata {
            host: "testhost".into(),
            generated_unix_s: 1_700_000_000,
            config: BTreeMap::from([("calls".into(), "2".into())]),
        }
    }

    #[test]
    fn markdown_golden() {
        let t = ReportTable::from_results(
            &[
                result("in-process", &[1.0e-4, 3.0e-4], &[1.0e-6, 1.0e-6]),
                result("spawn-process", &[2.0e-4, 2.0e-4], &[1.5e-3, 2.5e-3]),
            ],
            fixed_meta(),
        );
        let expected = "Host: testhost\n\n\
| Environment | Operation mean (s) | Operation stddev (s) | Communication mean (s) | Communication stddev (s) | Accuracy | Accepted |\n\
|---|---|---|---|---|---|---|\n\
| in-process | 2.00000e-4 | 1.00000e-4 | 1.00000e-6 | 0.00000e0 | 100.0% | 2/2 |\n\
| spawn-process | 2.00000e-4 | 0.00000e0 | 2.00000e-3 | 5.00000e-4 | 100.0% | 2/2 |\n";
        assert_eq!(render_table(&t, Format::Markdown), expected);
    }

    #[test]
    fn csv_golden_and_empty_cells() {
        let mut t = ReportTable::from_results(&[result("in-process", &[0.25, 0.75], &[0.5, 0.5])], fixed_meta());
        t.rows.push(ReportRow {
            environment: "broken, env".into(),
            op_mean_s: None,
            op_stddev_s: None,
            comm_mean_s: None,
            comm_stddev_s: None,
            accuracy: None,
            n_accepted: 0,
            n_total: 0,
            error: Some("boom".into()),
        });
        assert_eq!(
            render_table(&t, Format::Csv),
            "environment,op_mean_s,op_stddev_s,comm_mean_s,comm_stddev_s,accuracy,n_accepted,n_total\n\
             in-process,0.5,0.25,0.5,0,1,2,2\n\
             \"broken, env\",,,,,,0,0\n"
        );
    }

    #[test]
    fn json_keeps_full_precision() {
        let t = ReportTable::from_results(&[result("x", &[0.1, 0.2], &[1e-7, 3e-7])], fixed_meta());
        let json = render_table(&t, Format::Json);
        let back: ReportTable = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
        assert_eq!(render_table(&t, Format::Json), json);
    }

    #[test]
    fn empty_result_renders_placeholders() {
        let mut r = result("x", &[1.0], &[1.0]);
        r.aggregate.operation = None;
        r.aggregate.communication = None;
        r.aggregate.accepted = 0;
        r.aggregate.accuracy = 0.0;
        let md = render_table(&ReportTable::from_results(&[r], fixed_meta()), Format::Markdown);
        assert!(md.contains("| x | n/a | n/a | n/a | n/a | 0.0% | 0/1 |"));
    }

    #[test]
    fn compare_identical_is_one() {
        let a = result("a", &[1e-4, 2e-4, 3e-4], &[1e-3, 1e-3, 1e-3]);
        let mut b = a.clone();
        b.environment_label = "b".into();
        let c = compare(&[a, b]);
        assert_eq!(c.ratios.len(), 1);
        assert_eq!(c.ratios[0].operation_median_ratio, 1.0);
        assert_eq!(c.ratios[0].communication_median_ratio, 1.0);
    }

    #[test]
    fn compare_ratios_and_flags() {
        let fast = result("fast", &[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]);
        let slow = result("slow", &[2.0, 3.0, 4.0], &[10.0, 10.0, 10.0]);
        let c = compare(&[fast, slow]);
        let r = &c.ratios[0];
        assert_eq!((r.numerator.as_str(), r.denominator.as_str()), ("slow", "fast"));
        assert_eq!(r.operation_median_ratio, 3.0);
        assert_eq!(r.communication_median_ratio, 5.0);
        assert_eq!(c.fastest_operation.as_deref(), Some("fast"));
        assert_eq!(c.most_deterministic_operation.as_deref(), Some("fast"));
        assert_eq!(c.most_deterministic_communication.as_deref(), Some("slow"));
        let md = render_comparison(&c, Format::Markdown);
        assert!(md.contains("| slow | fast | 3.000 | 5.000 |"));
    }
}
