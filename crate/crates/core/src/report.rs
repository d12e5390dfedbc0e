//! Run reports (JSON) and the bench table.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::explain::{CheckRecord, ExplainError, Explanation};
use crate::model::{Instance, NeuralNetwork};
use crate::slice::SlicingPlan;

pub const REPORT_VERSION: u32 = 1;

/// Keys whose values depend on wall-clock time. Everything else in a
/// single-worker report is reproducible.
pub const TIMING_KEYS: &[&str] = &[
    "time_ms",
    "recheck_ms",
    "elapsed_ms",
    "total_time_s",
    "mean_time_s",
    "median_time_s",
    "repeat_total_s",
    "median_total_s",
];

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub slice_levels: Vec<usize>,
    /// Explicit slice features, if given. Otherwise drawn with `slice_seed`.
    pub slice_features: Option<Vec<String>>,
    pub slice_seed: u64,
    pub order: String,
    pub tighten: String,
    pub node_limit: u64,
    pub time_limit_s: f64,
    pub feasibility_tol: f64,
    pub optimality_tol: f64,
    pub workers: usize,
    pub max_instances: Option<usize>,
    pub instance_seed: Option<u64>,
    pub repeat: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: u32,
    pub config: RunConfig,
    pub runs: Vec<ModelRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRun {
    pub name: String,
    pub model_path: String,
    pub model_sha256: String,
    pub instances_path: String,
    pub instances_sha256: String,
    pub levels: Vec<LevelReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub slices: usize,
    pub sliced_features: Vec<String>,
    pub subdomain_removed_pct: Vec<f64>,
    pub avg_removed_pct: f64,
    pub instances: Vec<InstanceRecord>,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedFeature {
    pub feature: usize,
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub index: usize,
    pub values: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub prediction: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub explanation: Option<Vec<FixedFeature>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
    #[serde(default)]
    pub checks: Vec<CheckRecord>,
    pub time_ms: f64,
    pub recheck_ms: f64,
}

impl InstanceRecord {
    pub fn kept(&self) -> Option<Vec<usize>> {
        self.explanation.as_ref().map(|x| x.iter().map(|f| f.feature).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub explained: usize,
    pub failed: usize,
    pub mean_size: f64,
    /// Sum of per-instance times of the recorded run.
    pub total_time_s: f64,
    pub mean_time_s: f64,
    pub median_time_s: f64,
    /// Total time of every repetition, recorded run first.
    pub repeat_total_s: Vec<f64>,
    pub median_total_s: f64,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn instance_record(
    net: &NeuralNetwork,
    index: usize,
    instance: &Instance,
    result: &Result<Explanation, ExplainError>,
) -> InstanceRecord {
    match result {
        Ok(e) => InstanceRecord {
            index,
            values: instance.values.clone(),
            prediction: Some(net.class_names[e.prediction.class_index].clone()),
            explanation: Some(
                e.kept
                    .iter()
                    .map(|&f| FixedFeature {
                        feature: f,
                        name: net.feature_names[f].clone(),
                        value: instance.values[f],
                    })
                    .collect(),
            ),
            error: None,
            checks: e.checks.clone(),
            time_ms: e.time_ms,
            recheck_ms: e.recheck_ms,
        },
        Err(err) => InstanceRecord {
            index,
            values: instance.values.clone(),
            prediction: net.predict(instance).ok().map(|p| net.class_names[p.class_index].clone()),
            explanation: None,
            error: Some(err.to_string()),
            checks: Vec::new(),
            time_ms: 0.0,
            recheck_ms: 0.0,
        },
    }
}

/// Total time in seconds of a batch of records.
pub fn records_total_s(records: &[InstanceRecord]) -> f64 {
    records.iter().map(|r| r.time_ms).sum::<f64>() / 1e3
}

/// Builds a level from the first run's records and the totals of any
/// further repetitions.
pub fn level_report(
    net: &NeuralNetwork,
    plan: &SlicingPlan,
    instances: Vec<InstanceRecord>,
    extra_totals_s: &[f64],
) -> LevelReport {
    let times: Vec<f64> = instances.iter().map(|r| r.time_ms / 1e3).collect();
    let sizes: Vec<usize> = instances.iter().filter_map(|r| r.explanation.as_ref().map(Vec::len)).collect();
    let total = records_total_s(&instances);
    let mut repeat_total_s = vec![total];
    repeat_total_s.extend_from_slice(extra_totals_s);
    let summary = Summary {
        explained: sizes.len(),
        failed: instances.len() - sizes.len(),
        mean_size: if sizes.is_empty() {
            0.0
        } else {
            sizes.iter().sum::<usize>() as f64 / sizes.len() as f64
        },
        total_time_s: total,
        mean_time_s: if times.is_empty() { 0.0 } else { total / times.len() as f64 },
        median_time_s: median(&times),
        median_total_s: median(&repeat_total_s),
        repeat_total_s,
    };
    LevelReport {
        slices: plan.slices(),
        sliced_features: plan.features.iter().map(|&f| net.feature_names[f].clone()).collect(),
        subdomain_removed_pct: plan.subdomains.iter().map(|s| s.removed_pct).collect(),
        avg_removed_pct: plan.avg_removed_pct,
        instances,
        summary,
    }
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn failed_instances(&self) -> usize {
        self.runs
            .iter()
            .flat_map(|r| &r.levels)
            .map(|l| l.summary.failed)
            .sum()
    }
}

/// Removes every timing key, recursively.
pub fn strip_timing(value: &mut Value) {
    match value {
        Value::Object(map) => {
            map.retain(|k, _| !TIMING_KEYS.contains(&k.as_str()));
            map.values_mut().for_each(strip_timing);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_timing),
        _ => {}
    }
}

/// Report JSON with timing removed, for reproducibility comparisons.
pub fn timing_free_json(report: &Report) -> String {
    let mut v = serde_json::to_value(report).expect("report serializes");
    strip_timing(&mut v);
    serde_json::to_string_pretty(&v).expect("value serializes")
}

fn level_header(s: usize) -> String {
    if s == 1 {
        "1 slice".to_string()
    } else {
        format!("{s} slices")
    }
}

/// Plain-text table with one row pair per model: explanation time (median
/// over repetitions) and average % binaries removed, one column per level.
pub fn bench_table(report: &Report) -> String {
    let levels: Vec<usize> = report.config.slice_levels.clone();
    let name_w = report
        .runs
        .iter()
        .map(|r| r.name.len())
        .chain(std::iter::once("model".len()))
        .max()
        .unwrap_or(5);
    let metric_w = "Exp Time (s)".len();
    let col_w = 10;
    let mut out = String::new();
    let _ = write!(out, "{:<name_w$}  {:<metric_w$}", "model", "metric");
    for &s in &levels {
        let _ = write!(out, "  {:>col_w$}", level_header(s));
    }
    out.push('\n');
    for run in &report.runs {
        let cell = |s: usize, f: &dyn Fn(&LevelReport) -> f64| {
            run.levels
                .iter()
                .find(|l| l.slices == s)
                .map_or_else(|| "-".to_string(), |l| format!("{:.2}", f(l)))
        };
        let _ = write!(out, "{:<name_w$}  {:<metric_w$}", run.name, "Exp Time (s)");
        for &s in &levels {
            let _ = write!(out, "  {:>col_w$}", cell(s, &|l| l.summary.median_total_s));
        }
        out.push('\n');
        let _ = write!(out, "{:<name_w$}  {:<metric_w$}", "", "% Bin Rem");
        for &s in &levels {
            let _ = write!(out, "  {:>col_w$}", cell(s, &|l| l.avg_removed_pct));
        }
        out.push('\n');
    }
    out
}
