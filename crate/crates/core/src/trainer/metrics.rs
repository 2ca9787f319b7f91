use std::path::Path;

use serde::{Deserialize, Serialize};

use super::LossComponents;
use crate::error::{Error, Result};
use crate::eval::EvalReport;

/// One line of `metrics.csv`. Evaluation columns are only filled on
/// evaluation iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    /// Completed iterations.
    pub t: u64,
    pub total: f64,
    pub components: LossComponents,
    pub miou: Option<f64>,
    /// `(subset name, mIoU)` in the dataset's subset order.
    pub subsets: Vec<(String, Option<f64>)>,
    pub evaluated: bool,
}

impl MetricRow {
    pub fn new(
        t: u64,
        total: f64,
        components: &LossComponents,
        report: Option<&EvalReport>,
        subsets: &[(String, Vec<u16>)],
    ) -> Self {
        MetricRow {
            t,
            total,
            components: *components,
            miou: report.and_then(|r| r.miou),
            subsets: subsets
                .iter()
                .map(|(name, _)| (name.clone(), report.and_then(|r| r.subset(name))))
                .collect(),
            evaluated: report.is_some(),
        }
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_metrics_csv(rows: &[MetricRow], subset_names: &[String], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ["t", "total", "bms", "slm", "rl", "fewshot", "contrastive", "miou"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(subset_names.iter().map(|n| format!("miou_{n}")));
    w.write_record(&header)?;
    for row in rows {
        let c = &row.components;
        let mut record = vec![
            row.t.to_string(),
            row.total.to_string(),
            cell(c.bms),
            cell(c.slm),
            cell(c.rl),
            cell(c.fewshot),
            cell(c.contrastive),
            cell(row.miou),
        ];
        for name in subset_names {
            let v = row.subsets.iter().find(|(n, _)| n == name).and_then(|(_, v)| *v);
            record.push(cell(v));
        }
        w.write_record(&record)?;
    }
    w.flush().map_err(Error::io(path))
}

/// Columns of a metrics file by header name; blank cells are `None`.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<(String, Vec<Option<f64>>)>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mut columns: Vec<(String, Vec<Option<f64>>)> = headers.into_iter().map(|h| (h, Vec::new())).collect();
    for record in r.records() {
        let record = record?;
        for (i, field) in record.iter().enumerate() {
            let value = if field.is_empty() {
                None
            } else {
                Some(field.parse::<f64>().map_err(|e| {
                    Error::InvalidArgument(format!("{}: bad number `{field}`: {e}", path.display()))
                })?)
            };
            if let Some((_, col)) = columns.get_mut(i) {
                col.push(value);
            }
        }
    }
    Ok(columns)
}
