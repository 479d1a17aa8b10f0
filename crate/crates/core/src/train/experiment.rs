use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{model_name, train_one, Precision, RunOutcome, TrainConfig, TrainError, TrainHooks};
use crate::data::AnnotatedSample;
use crate::metrics::{one_way_anova, AnovaVerdict, MetricName, RunReport, RunStatus};

/// Metrics compared between arms.
pub const TESTED_METRICS: [MetricName; 3] = [MetricName::F1, MetricName::Bacc, MetricName::Prec];

/// Worker count: `LEFM_THREADS` if set, else all cores.
pub fn worker_threads() -> usize {
    std::env::var("LEFM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn run_dispatch(config: &TrainConfig, m: usize, seed: u64, train: &[AnnotatedSample], test: &[AnnotatedSample]) -> Result<RunOutcome, TrainError> {
    let mut hooks = TrainHooks::default();
    match config.precision {
        Precision::F32 => train_one::<f32>(config, m, seed, train, test, &mut hooks),
        Precision::F64 => train_one::<f64>(config, m, seed, train, test, &mut hooks),
    }
}

/// Trains every `(m, seed)` pair. Failed runs yield a `failed` report and no
/// checkpoint. `on_run` sees each finished run (from worker threads).
pub fn run_experiment<F>(
    config: &TrainConfig,
    train: &[AnnotatedSample],
    test: &[AnnotatedSample],
    on_run: F,
) -> Result<Vec<RunReport>, TrainError>
where
    F: Fn(&RunOutcome) -> Result<(), TrainError> + Sync,
{
    config.validate()?;
    let hash = config.hash();
    let jobs: Vec<(usize, u64)> = config
        .m
        .iter()
        .flat_map(|&m| config.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
        .map_err(|e| TrainError::Config(e.to_string()))?;
    pool.install(|| {
        jobs.par_iter()
            .map(|&(m, seed)| {
                let start = Instant::now();
                match run_dispatch(config, m, seed, train, test) {
                    Ok(outcome) => {
                        on_run(&outcome)?;
                        let mut report = outcome.report;
                        report.wall_time_s = start.elapsed().as_secs_f64();
                        log::info!("{} seed {seed}: BACC {:.4} F1 {:.4}", report.model, report.bacc, report.f1);
                        Ok(report)
                    }
                    Err(e) if e.is_run_failure() => {
                        log::warn!("{} seed {seed} failed: {e}", model_name(m));
                        let mut r = RunReport::failed(model_name(m), m, seed, config.precision.as_str(), &hash, e.to_string());
                        r.wall_time_s = start.elapsed().as_secs_f64();
                        Ok(r)
                    }
                    Err(e) => Err(e),
                }
            })
            .collect()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n - 1); absent for a single run.
    pub std: Option<f64>,
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> Option<MeanStd> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    Some(MeanStd { mean, std })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub model: String,
    pub m: usize,
    pub runs: usize,
    pub failed: usize,
    pub complete: bool,
    pub metrics: BTreeMap<String, MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub version: String,
    pub config_hash: String,
    pub spread: String,
    pub arms: Vec<ArmSummary>,
    pub anova: Vec<AnovaVerdict>,
    /// Comparisons that could not be tested, with the reason.
    pub skipped: Vec<String>,
}

fn metric_values(reports: &[&RunReport], metric: MetricName) -> Vec<f64> {
    reports.iter().map(|r| r.metric(metric)).collect()
}

/// Table-style summary per arm plus baseline-vs-expansion ANOVA verdicts.
pub fn summarize(config_hash: &str, reports: &[RunReport]) -> ExperimentSummary {
    let mut by_arm: BTreeMap<usize, (String, Vec<&RunReport>, usize)> = BTreeMap::new();
    for r in reports {
        let entry = by_arm.entry(r.m).or_insert_with(|| (r.model.clone(), Vec::new(), 0));
        match r.status {
            RunStatus::Ok => entry.1.push(r),
            RunStatus::Failed => entry.2 += 1,
        }
    }
    let arms = by_arm
        .iter()
        .map(|(&m, (model, ok, failed))| ArmSummary {
            model: model.clone(),
            m,
            runs: ok.len(),
            failed: *failed,
            complete: *failed == 0,
            metrics: MetricName::ALL
                .iter()
                .filter_map(|&metric| Some((metric.as_str().to_string(), mean_std(&metric_values(ok, metric))?)))
                .collect(),
        })
        .collect();

    let mut anova = Vec::new();
    let mut skipped = Vec::new();
    match by_arm.get(&0) {
        None => skipped.push("no baseline arm (m = 0)".to_string()),
        Some((base_name, base, _)) => {
            for (&m, (name, ok, _)) in by_arm.range(1..) {
                for metric in TESTED_METRICS {
                    let groups = [metric_values(base, metric), metric_values(ok, metric)];
                    match one_way_anova(&groups) {
                        Ok(result) => anova.push(AnovaVerdict::new(
                            metric,
                            vec![base_name.clone(), name.clone()],
                            vec![groups[0].len(), groups[1].len()],
                            &result,
                        )),
                        Err(e) => skipped.push(format!("{} m={m}: {e}", metric.as_str())),
                    }
                }
            }
        }
    }
    ExperimentSummary {
        version: crate::VERSION.to_string(),
        config_hash: config_hash.to_string(),
        spread: "sample standard deviation (n - 1)".into(),
        arms,
        anova,
        skipped,
    }
}

impl ExperimentSummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }

    /// Markdown table, one row per arm, values in percent.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "<!-- lefm {} config {} -->", self.version, self.config_hash);
        out.push_str("| model | m | runs | BACC | F1 | PREC | SE | SP |\n");
        out.push_str("|---|---|---|---|---|---|---|---|\n");
        for arm in &self.arms {
            let _ = write!(out, "| {} | {} | {}{} |", arm.model, arm.m, arm.runs, if arm.complete { "" } else { " (incomplete)" });
            for metric in MetricName::ALL {
                let cell = match arm.metrics.get(metric.as_str()) {
                    Some(MeanStd { mean, std: Some(s) }) => format!(" {:.2} ± {:.2} |", mean * 100.0, s * 100.0),
                    Some(MeanStd { mean, std: None }) => format!(" {:.2} |", mean * 100.0),
                    None => " - |".to_string(),
                };
                out.push_str(&cell);
            }
            out.push('\n');
        }
        if !self.anova.is_empty() {
            out.push_str("\n| metric | groups | F | p | significant |\n|---|---|---|---|---|\n");
            for v in &self.anova {
                let f = v.f.map_or("inf".to_string(), |f| format!("{f:.4}"));
                let _ = writeln!(
                    out,
                    "| {} | {} | {} | {:.4} | {} |",
                    v.metric.as_str(),
                    v.groups.join(" vs "),
                    f,
                    v.p,
                    if v.significant { "yes" } else { "no" }
                );
            }
        }
        out
    }
}
