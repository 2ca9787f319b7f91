use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::{write_metrics_csv, TrainConfig, Trainer};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{bar_chart_svg, line_chart_svg, RunSummary, Series};
use crate::model::Checkpoint;

#[derive(Debug, Clone, Default)]
pub struct TrainOutputOptions {
    /// Replace an existing non-empty output directory.
    pub overwrite: bool,
    /// Continue from this checkpoint instead of initialising.
    pub resume: Option<PathBuf>,
    /// Dump the mixed samples of this many leading iterations under `mixes/`.
    pub dump_mixes: Option<u64>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(Error::io(path))
}

/// Train and write a run directory:
///
/// `config.json`, `metrics.csv`, `checkpoint.json`, `eval.json`, `eval.csv`,
/// `summary.json`, `loss.svg`, `iou.svg`, plus `checkpoints/` for periodic
/// checkpoints and `mixes/` when requested.
///
/// With `config = None` a fresh run uses the defaults and a resumed run the
/// checkpoint's configuration.
pub fn train_to_dir(
    config: Option<TrainConfig>,
    data: &Dataset,
    out: &Path,
    options: &TrainOutputOptions,
) -> Result<RunSummary> {
    if out.exists() {
        let occupied = std::fs::read_dir(out).map_err(Error::io(out))?.next().is_some();
        if occupied && !options.overwrite {
            return Err(Error::Exists(out.to_path_buf()));
        }
    }
    let mut trainer = match &options.resume {
        Some(path) => Trainer::from_checkpoint(&Checkpoint::load(path)?, config, data)?,
        None => Trainer::new(config.unwrap_or_default(), data)?,
    };
    std::fs::create_dir_all(out).map_err(Error::io(out))?;
    if let Some(limit) = options.dump_mixes {
        trainer.dump_mixes(out.join("mixes"), limit);
    }
    trainer.config().save(&out.join("config.json"))?;

    let every = trainer.config().checkpoint_every;
    let ckpt_dir = out.join("checkpoints");
    trainer.run_with(|tr| {
        if every > 0 && tr.iteration() % every == 0 {
            std::fs::create_dir_all(&ckpt_dir).map_err(Error::io(&ckpt_dir))?;
            tr.checkpoint()?
                .save(&ckpt_dir.join(format!("ckpt-{:06}.json", tr.iteration())))?;
        }
        Ok(())
    })?;

    let subsets = data.scenario.eval_subsets();
    let subset_names: Vec<String> = subsets.iter().map(|(n, _)| n.clone()).collect();
    write_metrics_csv(trainer.log(), &subset_names, &out.join("metrics.csv"))?;
    trainer.checkpoint()?.save(&out.join("checkpoint.json"))?;

    let report = trainer.evaluate()?;
    report.save_json(&out.join("eval.json"))?;
    report.save_csv(&out.join("eval.csv"))?;

    let log = trainer.log();
    let mut loss_series = vec![Series {
        name: "total".into(),
        points: log.iter().map(|r| (r.t as f64, r.total)).collect(),
    }];
    let components: [(&str, fn(&super::LossComponents) -> Option<f64>); 5] = [
        ("bms", |c| c.bms),
        ("slm", |c| c.slm),
        ("rl", |c| c.rl),
        ("fewshot", |c| c.fewshot),
        ("contrastive", |c| c.contrastive),
    ];
    for (name, get) in components {
        let points: Vec<(f64, f64)> = log
            .iter()
            .filter_map(|r| get(&r.components).map(|v| (r.t as f64, v)))
            .collect();
        if !points.is_empty() {
            loss_series.push(Series {
                name: name.into(),
                points,
            });
        }
    }
    write_text(&out.join("loss.svg"), &line_chart_svg("training loss", &loss_series))?;
    write_text(
        &out.join("iou.svg"),
        &bar_chart_svg("per-class IoU", &report.class_names, &report.per_class_iou),
    )?;

    let mut metrics = BTreeMap::new();
    if let Some(m) = report.miou {
        metrics.insert("miou".to_string(), m);
    }
    for s in &report.subsets {
        if let Some(m) = s.miou {
            metrics.insert(format!("miou_{}", s.name), m);
        }
    }
    let summary = RunSummary {
        ablation: trainer.config().ablation.to_string(),
        seed: trainer.config().seed,
        metrics,
    };
    let path = out.join("summary.json");
    write_text(
        &path,
        &serde_json::to_string_pretty(&summary).map_err(Error::json(&path))?,
    )?;
    Ok(summary)
}

/// Read `summary.json` from a run directory.
pub fn load_run_summary(dir: &Path) -> Result<RunSummary> {
    let path = dir.join("summary.json");
    let text = std::fs::read_to_string(&path).map_err(Error::io(&path))?;
    serde_json::from_str(&text).map_err(Error::json(&path))
}
