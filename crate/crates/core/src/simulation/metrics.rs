use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Layout;

use super::study::{Method, ReplicationRecord, StudyConfig};
use super::truth::{DifCondition, TrueModel, N_ITEMS};

/// One aggregated value. `value` is `None` when the metric is unavailable
/// (no valid replications, or no standard errors).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: Method,
    pub n: usize,
    pub dif_condition: u32,
    /// `item{j}` for test metrics, a coordinate name for estimation metrics.
    pub target: String,
    pub metric: String,
    pub value: Option<f64>,
    pub n_effective: usize,
}

/// Column names of the metrics CSV.
pub const METRIC_COLUMNS: [&str; 7] = ["method", "n", "dif_condition", "target", "metric", "value", "n_effective"];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
}

/// Float with 17 significant digits, or `NA`.
pub fn format_value(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.16e}"),
        None => "NA".to_string(),
    }
}

impl MetricTable {
    pub fn get(&self, method: Method, n: usize, condition: u32, target: &str, metric: &str) -> Option<&MetricRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.n == n && r.dif_condition == condition && r.target == target && r.metric == metric)
    }

    pub fn value(&self, method: Method, n: usize, condition: u32, target: &str, metric: &str) -> Option<f64> {
        self.get(method, n, condition, target, metric).and_then(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut out = METRIC_COLUMNS.join(",");
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.method,
                r.n,
                r.dif_condition,
                r.target,
                r.metric,
                format_value(r.value),
                r.n_effective
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::InvalidArgument("empty metrics file".into()))?;
        if header != METRIC_COLUMNS.join(",") {
            return Err(Error::InvalidArgument(format!("unexpected metrics header: {header}")));
        }
        let mut rows = Vec::new();
        for (no, line) in lines.enumerate() {
            let bad = |what: &str| Error::InvalidArgument(format!("metrics line {}: bad {what}", no + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad("field count"));
            }
            let method = match f[0] {
                "reg-dif" => Method::RegDif,
                "refit" => Method::Refit,
                "dscore" => Method::Dscore,
                "oracle" => Method::Oracle,
                _ => return Err(bad("method")),
            };
            rows.push(MetricRow {
                method,
                n: f[1].parse().map_err(|_| bad("n"))?,
                dif_condition: f[2].parse().map_err(|_| bad("dif_condition"))?,
                target: f[3].to_string(),
                metric: f[4].to_string(),
                value: if f[5] == "NA" { None } else { Some(f[5].parse().map_err(|_| bad("value"))?) },
                n_effective: f[6].parse().map_err(|_| bad("n_effective"))?,
            });
        }
        Ok(Self { rows })
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample variance with divisor `k - 1`.
fn sample_variance(v: &[f64]) -> Option<f64> {
    if v.len() < 2 {
        return None;
    }
    let m = mean(v);
    Some(v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64)
}

/// Aggregates replication records into the metric table. Rows follow the
/// order cell, method, items, coordinates.
pub fn aggregate(config: &StudyConfig, records: &[ReplicationRecord]) -> Result<MetricTable> {
    let layout = Layout::new(N_ITEMS, 3);
    let names = layout.names(&TrueModel::covariate_names());
    let mut methods = config.methods.clone();
    methods.sort();
    methods.dedup();
    let mut rows = Vec::new();
    for (n, condition) in config.cells()? {
        let truth = TrueModel::new(condition);
        let true_flat = truth.params.flatten();
        let dif_items = truth.dif_items();
        let cell: Vec<&ReplicationRecord> =
            records.iter().filter(|r| r.n == n && r.dif_condition == condition.percent()).collect();
        for &method in &methods {
            let ok: Vec<_> = cell.iter().filter_map(|r| r.method(method)).filter(|m| m.ok()).collect();
            let mut push = |target: String, metric: &str, value: Option<f64>, n_effective: usize| {
                rows.push(MetricRow {
                    method,
                    n,
                    dif_condition: condition.percent(),
                    target,
                    metric: metric.to_string(),
                    value,
                    n_effective,
                });
            };

            for j in 1..=N_ITEMS {
                if method == Method::Oracle && config.oracle_anchors.contains(&j) {
                    continue;
                }
                let decisions: Vec<bool> =
                    ok.iter().filter_map(|m| m.items.iter().find(|it| it.item == j).and_then(|it| it.flagged)).collect();
                let k = decisions.len();
                let rate = (k > 0).then(|| decisions.iter().filter(|&&f| f).count() as f64 / k as f64);
                let target = format!("item{j}");
                push(target.clone(), "rejection_rate", rate, k);
                if condition == DifCondition::None {
                    push(target, "type1_error", rate, k);
                } else if dif_items.contains(&(j - 1)) {
                    push(target.clone(), "power", rate, k);
                    push(target, "type2_error", rate.map(|r| 1.0 - r), k);
                } else {
                    push(target, "false_detection", rate, k);
                }
            }

            for (c, name) in names.iter().enumerate() {
                let mut est = Vec::new();
                let mut se2 = Vec::new();
                for m in &ok {
                    if let Some(rec) = m.coordinates.get(c) {
                        if let Some(e) = rec.estimate {
                            est.push(e);
                            if let Some(s) = rec.se {
                                se2.push(s * s);
                            }
                        }
                    }
                }
                let k = est.len();
                let bias = (k > 0).then(|| mean(&est) - true_flat[c]);
                let variance = sample_variance(&est);
                let sd = variance.map(f64::sqrt).filter(|s| *s > 0.0);
                let recovery = match (sd, se2.is_empty()) {
                    (Some(sd), false) => Some(mean(&se2).sqrt() / sd),
                    _ => None,
                };
                let zero_filled = match (sd, se2.is_empty()) {
                    (Some(sd), false) => Some((se2.iter().sum::<f64>() / k as f64).sqrt() / sd),
                    _ => None,
                };
                push(name.clone(), "bias", bias, k);
                push(name.clone(), "variance", variance, k);
                push(name.clone(), "se_recovery", recovery, se2.len());
                push(name.clone(), "se_recovery_zero_filled", zero_filled, k);
            }
        }
    }
    Ok(MetricTable { rows })
}
