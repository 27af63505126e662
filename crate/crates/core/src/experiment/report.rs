use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{ExperimentError, Result, ResultRecord, StrategyChoice};
use crate::protocol::TaskMetrics;
use crate::task::TaskKind;
use crate::transport::{closed_form_cost, CostModelInput, CostStrategy, Inventory};

/// Mean and sample standard deviation (zero for a single value).
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One configuration and task aggregated over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub variant: String,
    pub strategy: StrategyChoice,
    pub task: TaskKind,
    pub metric_name: String,
    pub seeds: usize,
    pub metric_mean: f64,
    pub metric_std: f64,
    pub accuracy_mean: Option<f64>,
    pub accuracy_std: Option<f64>,
    pub measured_elements: f64,
    pub expected_elements: f64,
    /// Closed-form cost of one averaging period for one client of the task.
    pub period_feature_gradient: f64,
    pub period_parameters: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

pub fn build_report(records: &[ResultRecord]) -> Result<Report> {
    if records.is_empty() {
        return Err(ExperimentError::NoRecords);
    }
    type Key = (String, String, String, StrategyChoice, TaskKind);
    let mut groups: BTreeMap<Key, Vec<(&ResultRecord, &TaskMetrics)>> = BTreeMap::new();
    let mut order: Vec<Key> = Vec::new();
    for r in records {
        for m in &r.metrics {
            let key = (
                r.name.clone(),
                r.variant.clone(),
                r.config_hash.clone(),
                r.strategy,
                m.task,
            );
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            groups.entry(key).or_default().push((r, m));
        }
    }
    let rows = order
        .into_iter()
        .map(|key| {
            let items = &groups[&key];
            let metrics: Vec<f64> = items.iter().map(|(_, m)| m.metric).collect();
            let (metric_mean, metric_std) = mean_std(&metrics);
            let acc: Vec<f64> = items.iter().filter_map(|(_, m)| m.accuracy).collect();
            let (accuracy_mean, accuracy_std) = if acc.len() == items.len() {
                let (m, s) = mean_std(&acc);
                (Some(m), Some(s))
            } else {
                (None, None)
            };
            let measured: Vec<f64> = items
                .iter()
                .map(|(r, _)| r.cost.measured_elements as f64)
                .collect();
            let expected: Vec<f64> = items
                .iter()
                .map(|(r, _)| r.cost.expected_elements)
                .collect();
            let period = items[0].0.cost.expected.iter().find(|c| c.task == key.4);
            ReportRow {
                name: key.0.clone(),
                variant: key.1.clone(),
                strategy: key.3,
                task: key.4,
                metric_name: TaskMetrics::metric_name(key.4).to_owned(),
                seeds: items.len(),
                metric_mean,
                metric_std,
                accuracy_mean,
                accuracy_std,
                measured_elements: mean_std(&measured).0,
                expected_elements: mean_std(&expected).0,
                period_feature_gradient: period.map_or(0.0, |p| p.per_period.feature_gradient),
                period_parameters: period.map_or(0.0, |p| p.per_period.parameters),
            }
        })
        .collect();
    Ok(Report { rows })
}

impl Report {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<18} {:<14} {:<12} {:<15} {:>5} {:>18} {:>18}",
            "name", "variant", "strategy", "task", "seeds", "metric", "accuracy"
        );
        for r in &self.rows {
            let acc = match (r.accuracy_mean, r.accuracy_std) {
                (Some(m), Some(s)) => format!("{m:.4} ± {s:.4}"),
                _ => "-".into(),
            };
            let _ = writeln!(
                out,
                "{:<18} {:<14} {:<12} {:<15} {:>5} {:>5} {:.4} ± {:.4} {:>18}",
                r.name,
                r.variant,
                r.strategy,
                r.task,
                r.seeds,
                r.metric_name,
                r.metric_mean,
                r.metric_std,
                acc
            );
        }
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:<18} {:<14} {:<12} {:<15} {:>14} {:>14} {:>16} {:>16}",
            "name",
            "variant",
            "strategy",
            "task",
            "period F+G",
            "period params",
            "expected run",
            "measured run"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<18} {:<14} {:<12} {:<15} {:>14.0} {:>14.0} {:>16.0} {:>16.0}",
                r.name,
                r.variant,
                r.strategy,
                r.task,
                r.period_feature_gradient,
                r.period_parameters,
                r.expected_elements,
                r.measured_elements
            );
        }
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| ExperimentError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("ASCII CSV"))
    }
}

/// One cell group of the reference cost table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub task: TaskKind,
    pub strategy: CostStrategy,
    pub k: u32,
    pub feature_gradient: f64,
    pub parameters: f64,
    pub total: f64,
}

/// Closed-form costs for the full-size inventories at period `k`, in millions of elements.
pub fn reference_cost_table(k: u32) -> Result<Vec<CostRow>> {
    let mut rows = Vec::new();
    for task in TaskKind::ALL {
        let input = Inventory::for_task(task).cost_input(k);
        rows.extend(cost_rows(task, &input)?);
    }
    Ok(rows)
}

pub(crate) fn cost_rows(task: TaskKind, input: &CostModelInput) -> Result<Vec<CostRow>> {
    CostStrategy::ALL
        .into_iter()
        .map(|s| {
            let c = closed_form_cost(s, input)?;
            Ok(CostRow {
                task,
                strategy: s,
                k: input.k,
                feature_gradient: c.feature_gradient,
                parameters: c.parameters,
                total: c.total(),
            })
        })
        .collect()
}

pub fn render_cost_table(rows: &[CostRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<15} {:<20} {:>6} {:>14} {:>12} {:>12}",
        "task", "method", "k", "feat+grad", "params", "total"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<15} {:<20} {:>6} {:>14.3} {:>12.3} {:>12.3}",
            r.task.to_string(),
            r.strategy.label(),
            r.k,
            r.feature_gradient,
            r.parameters,
            r.total
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std_of_three_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-12);
        assert_eq!(mean_std(&[5.0]), (5.0, 0.0));
    }

    #[test]
    fn empty_input_is_reported() {
        assert!(matches!(build_report(&[]), Err(ExperimentError::NoRecords)));
    }

    #[test]
    fn reference_table_has_nine_cells() {
        let rows = reference_cost_table(100).unwrap();
        assert_eq!(rows.len(), 9);
        let text = render_cost_table(&rows);
        assert!(text.contains("105.580"), "{text}");
    }
}
