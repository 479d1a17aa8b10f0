//! Per-run metric records and the `runs.csv` table.

use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{bacc, f1, precision, sensitivity, specificity, AnovaResult, ConfusionCounts, MetricsError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Failed,
}

/// Metric selectable for significance testing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricName {
    #[serde(rename = "BACC")]
    Bacc,
    #[serde(rename = "F1")]
    F1,
    #[serde(rename = "PREC")]
    Prec,
    #[serde(rename = "SE")]
    Se,
    #[serde(rename = "SP")]
    Sp,
}

impl MetricName {
    pub const ALL: [MetricName; 5] = [MetricName::Bacc, MetricName::F1, MetricName::Prec, MetricName::Se, MetricName::Sp];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricName::Bacc => "BACC",
            MetricName::F1 => "F1",
            MetricName::Prec => "PREC",
            MetricName::Se => "SE",
            MetricName::Sp => "SP",
        }
    }
}

impl FromStr for MetricName {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "BACC" => Ok(MetricName::Bacc),
            "F1" => Ok(MetricName::F1),
            "PREC" | "PRECISION" => Ok(MetricName::Prec),
            "SE" => Ok(MetricName::Se),
            "SP" => Ok(MetricName::Sp),
            other => Err(MetricsError::Table(format!("unknown metric {other:?}"))),
        }
    }
}

/// Outcome of one seeded training run.
///
/// `wall_time_s` is kept out of the serialized form so that reports from
/// identical seeded runs are byte-identical; timings go to a separate file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub model: String,
    /// Expansion order; 0 means no LEFM layer.
    pub m: usize,
    pub seed: u64,
    pub status: RunStatus,
    #[serde(rename = "BACC")]
    pub bacc: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
    #[serde(rename = "PREC")]
    pub prec: f64,
    #[serde(rename = "SE")]
    pub se: f64,
    #[serde(rename = "SP")]
    pub sp: f64,
    pub counts: ConfusionCounts,
    /// Metrics whose denominators were empty and were reported as 0.
    pub degenerate: Vec<MetricName>,
    pub epochs: usize,
    pub best_epoch: usize,
    pub parameters: usize,
    pub precision: String,
    pub prenormalized: bool,
    pub config_hash: String,
    pub version: String,
    pub error: Option<String>,
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl RunReport {
    /// Fills all metric fields from pooled counts.
    #[allow(clippy::too_many_arguments)]
    pub fn from_counts(
        model: impl Into<String>,
        m: usize,
        seed: u64,
        counts: ConfusionCounts,
        epochs: usize,
        best_epoch: usize,
        parameters: usize,
        precision_mode: &str,
        config_hash: &str,
    ) -> Self {
        let mut degenerate = Vec::new();
        let mut take = |name: MetricName, s: super::Score| {
            if s.degenerate {
                degenerate.push(name);
            }
            s.value
        };
        let f1v = take(MetricName::F1, f1(&counts));
        let prec = take(MetricName::Prec, precision(&counts));
        let se = take(MetricName::Se, sensitivity(&counts));
        let sp = take(MetricName::Sp, specificity(&counts));
        let bacc_v = match bacc(&counts) {
            Ok(v) => v,
            Err(_) => {
                degenerate.push(MetricName::Bacc);
                0.0
            }
        };
        Self {
            model: model.into(),
            m,
            seed,
            status: RunStatus::Ok,
            bacc: bacc_v,
            f1: f1v,
            prec,
            se,
            sp,
            counts,
            degenerate,
            epochs,
            best_epoch,
            parameters,
            precision: precision_mode.to_string(),
            prenormalized: false,
            config_hash: config_hash.to_string(),
            version: crate::VERSION.to_string(),
            error: None,
            wall_time_s: 0.0,
        }
    }

    pub fn failed(model: impl Into<String>, m: usize, seed: u64, precision_mode: &str, config_hash: &str, error: String) -> Self {
        let mut r = Self::from_counts(model, m, seed, ConfusionCounts::default(), 0, 0, 0, precision_mode, config_hash);
        r.status = RunStatus::Failed;
        r.degenerate.clear();
        r.error = Some(error);
        r
    }

    pub fn metric(&self, name: MetricName) -> f64 {
        match name {
            MetricName::Bacc => self.bacc,
            MetricName::F1 => self.f1,
            MetricName::Prec => self.prec,
            MetricName::Se => self.se,
            MetricName::Sp => self.sp,
        }
    }

    /// True when every stored metric agrees with the stored counts to 1e-12.
    pub fn is_consistent(&self) -> bool {
        if self.status == RunStatus::Failed {
            return true;
        }
        let fresh = RunReport::from_counts("", 0, 0, self.counts, 0, 0, 0, "", "");
        MetricName::ALL
            .iter()
            .all(|&m| (fresh.metric(m) - self.metric(m)).abs() <= 1e-12)
    }

    /// Canonical JSON (no wall time), suitable for byte comparison.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Column order of `runs.csv`.
pub const RUNS_CSV_COLUMNS: [&str; 20] = [
    "model",
    "m",
    "seed",
    "status",
    "BACC",
    "F1",
    "PREC",
    "SE",
    "SP",
    "TP",
    "TN",
    "FP",
    "FN",
    "epochs",
    "best_epoch",
    "parameters",
    "precision",
    "prenormalized",
    "config_hash",
    "version",
];

fn table_err(e: impl std::fmt::Display) -> MetricsError {
    MetricsError::Table(e.to_string())
}

/// Writes reports as CSV with [`RUNS_CSV_COLUMNS`], header included.
pub fn write_runs_csv<W: Write>(out: W, reports: &[RunReport]) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RUNS_CSV_COLUMNS).map_err(table_err)?;
    for r in reports {
        let status = match r.status {
            RunStatus::Ok => "ok",
            RunStatus::Failed => "failed",
        };
        w.write_record([
            r.model.clone(),
            r.m.to_string(),
            r.seed.to_string(),
            status.to_string(),
            r.bacc.to_string(),
            r.f1.to_string(),
            r.prec.to_string(),
            r.se.to_string(),
            r.sp.to_string(),
            r.counts.tp.to_string(),
            r.counts.tn.to_string(),
            r.counts.fp.to_string(),
            r.counts.fn_.to_string(),
            r.epochs.to_string(),
            r.best_epoch.to_string(),
            r.parameters.to_string(),
            r.precision.clone(),
            r.prenormalized.to_string(),
            r.config_hash.clone(),
            r.version.clone(),
        ])
        .map_err(table_err)?;
    }
    w.flush().map_err(table_err)
}

/// Reads a `runs.csv` table back into reports (wall time and error text are not stored).
pub fn read_runs_csv<R: Read>(input: R) -> Result<Vec<RunReport>, MetricsError> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers().map_err(table_err)?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| MetricsError::Table(format!("missing column {name}")))
    };
    let idx: Vec<usize> = RUNS_CSV_COLUMNS.iter().map(|c| col(c)).collect::<Result<_, _>>()?;
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(table_err)?;
        let field = |i: usize| rec.get(idx[i]).unwrap_or("");
        let num = |i: usize| -> Result<f64, MetricsError> {
            field(i)
                .parse::<f64>()
                .map_err(|_| MetricsError::Table(format!("row {}: bad {} value {:?}", line + 2, RUNS_CSV_COLUMNS[i], field(i))))
        };
        let int = |i: usize| -> Result<u64, MetricsError> {
            field(i)
                .parse::<u64>()
                .map_err(|_| MetricsError::Table(format!("row {}: bad {} value {:?}", line + 2, RUNS_CSV_COLUMNS[i], field(i))))
        };
        let status = match field(3) {
            "ok" => RunStatus::Ok,
            "failed" => RunStatus::Failed,
            other => return Err(MetricsError::Table(format!("row {}: bad status {other:?}", line + 2))),
        };
        out.push(RunReport {
            model: field(0).to_string(),
            m: int(1)? as usize,
            seed: int(2)?,
            status,
            bacc: num(4)?,
            f1: num(5)?,
            prec: num(6)?,
            se: num(7)?,
            sp: num(8)?,
            counts: ConfusionCounts {
                tp: int(9)?,
                tn: int(10)?,
                fp: int(11)?,
                fn_: int(12)?,
            },
            degenerate: Vec::new(),
            epochs: int(13)? as usize,
            best_epoch: int(14)? as usize,
            parameters: int(15)? as usize,
            precision: field(16).to_string(),
            prenormalized: field(17) == "true",
            config_hash: field(18).to_string(),
            version: field(19).to_string(),
            error: None,
            wall_time_s: 0.0,
        });
    }
    Ok(out)
}

/// JSON verdict of one significance test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnovaVerdict {
    pub metric: MetricName,
    pub groups: Vec<String>,
    #[serde(rename = "F")]
    pub f: Option<f64>,
    pub p: f64,
    pub significant: bool,
    pub alpha: f64,
    pub group_sizes: Vec<usize>,
}

impl AnovaVerdict {
    pub fn new(metric: MetricName, groups: Vec<String>, group_sizes: Vec<usize>, result: &AnovaResult) -> Self {
        Self {
            metric,
            groups,
            // JSON has no infinity; an unbounded F is written as null
            f: result.f.is_finite().then_some(result.f),
            p: result.p,
            significant: result.significant,
            alpha: super::SIGNIFICANCE_LEVEL,
            group_sizes,
        }
    }
}
