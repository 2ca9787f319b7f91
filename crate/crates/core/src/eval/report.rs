//! Ablation tables: median and interquartile range of run metrics per ablation.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::statistics::{Data, OrderStatistics};

use crate::error::{Error, Result};

/// Final metrics of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub ablation: String,
    pub seed: u64,
    /// e.g. `miou`, `miou_inconsistent`; fractions in [0, 1].
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: String,
    pub runs: usize,
    /// metric → (median, interquartile range)
    pub stats: BTreeMap<String, (f64, f64)>,
}

/// Group runs by ablation (first-seen order) and summarise every metric.
pub fn aggregate(runs: &[RunSummary]) -> Result<Vec<AblationRow>> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("no runs to aggregate".into()));
    }
    let mut order: Vec<&str> = Vec::new();
    for r in runs {
        if !order.contains(&r.ablation.as_str()) {
            order.push(&r.ablation);
        }
    }
    Ok(order
        .into_iter()
        .map(|name| {
            let group: Vec<&RunSummary> = runs.iter().filter(|r| r.ablation == name).collect();
            let mut metric_names: Vec<&String> = group.iter().flat_map(|r| r.metrics.keys()).collect();
            metric_names.sort();
            metric_names.dedup();
            let stats = metric_names
                .into_iter()
                .map(|m| {
                    let values: Vec<f64> = group.iter().filter_map(|r| r.metrics.get(m).copied()).collect();
                    let mut data = Data::new(values);
                    (m.clone(), (data.median(), data.interquartile_range()))
                })
                .collect();
            AblationRow {
                ablation: name.to_string(),
                runs: group.len(),
                stats,
            }
        })
        .collect())
}

fn metric_columns(rows: &[AblationRow]) -> Vec<String> {
    let mut cols: Vec<String> = rows.iter().flat_map(|r| r.stats.keys().cloned()).collect();
    cols.sort();
    cols.dedup();
    cols
}

/// Fixed-width text table, values in percent.
pub fn render_table(rows: &[AblationRow]) -> String {
    let cols = metric_columns(rows);
    let width = rows.iter().map(|r| r.ablation.len()).max().unwrap_or(8).max(8);
    let mut out = format!("{:<width$}  {:>4}", "ablation", "runs");
    for c in &cols {
        out.push_str(&format!("  {:>22}", format!("{c} med (IQR)")));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{:<width$}  {:>4}", r.ablation, r.runs));
        for c in &cols {
            let cell = r
                .stats
                .get(c)
                .map_or("n/a".to_string(), |(m, iqr)| format!("{:.2} ({:.2})", 100.0 * m, 100.0 * iqr));
            out.push_str(&format!("  {cell:>22}"));
        }
        out.push('\n');
    }
    out
}

/// `ablation,runs,<metric>_median,<metric>_iqr,...` with raw fractions.
pub fn write_table_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let cols = metric_columns(rows);
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["ablation".to_string(), "runs".to_string()];
    for c in &cols {
        header.push(format!("{c}_median"));
        header.push(format!("{c}_iqr"));
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.ablation.clone(), r.runs.to_string()];
        for c in &cols {
            match r.stats.get(c) {
                Some((m, iqr)) => {
                    rec.push(m.to_string());
                    rec.push(iqr.to_string());
                }
                None => rec.extend(["".to_string(), "".to_string()]),
            }
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(Error::io(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(ablation: &str, seed: u64, miou: f64) -> RunSummary {
        RunSummary {
            ablation: ablation.into(),
            seed,
            metrics: BTreeMap::from([("miou".to_string(), miou)]),
        }
    }

    #[test]
    fn median_and_iqr_per_ablation() {
        let runs: Vec<RunSummary> = [0.1, 0.5, 0.3, 0.2, 0.4]
            .iter()
            .enumerate()
            .map(|(i, &v)| run("M", i as u64, v))
            .chain([run("Source", 0, 0.05)])
            .collect();
        let rows = aggregate(&runs).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!((rows[0].ablation.as_str(), rows[0].runs), ("M", 5));
        let (median, iqr) = rows[0].stats["miou"];
        assert!((median - 0.3).abs() < 1e-12);
        assert!(iqr > 0.0 && iqr <= 0.4);
        assert_eq!(rows[1].stats["miou"], (0.05, 0.0));
        let table = render_table(&rows);
        assert!(table.contains("30.00"));
        assert!(table.lines().count() == 3);
    }

    #[test]
    fn zero_runs_is_an_error() {
        assert!(aggregate(&[]).is_err());
    }
}
