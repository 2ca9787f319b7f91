//! Command-line front end: dataset generation, training, evaluation, ablation
//! reports and multi-seed experiments.
//!
//! Exit codes: 0 success, 1 usage, 2 validation, 3 runtime.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use tadalab::data::{prepare_output_dir, Dataset, DatasetParams, OpenVariant, ScenarioKind, ShotCount};
use tadalab::eval::{
    aggregate, bar_chart_svg, project_features, render_table, scatter_svg, write_table_csv, RunSummary,
};
use tadalab::model::Checkpoint;
use tadalab::rng;
use tadalab::taxonomy::TaxonomyPair;
use tadalab::trainer::{load_run_summary, train_to_dir, Ablation, TrainConfig, TrainOutputOptions};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "TADALAB_OUT";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Core(#[from] tadalab::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Core(e) if e.is_validation() => 2,
            CliError::Core(_) => 3,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "tadalab", version, about = "Taxonomy-adaptive segmentation experiments on synthetic data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired-domain dataset.
    Generate(GenerateArgs),
    /// Train one run and write its run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset's test split.
    Eval(EvalArgs),
    /// Aggregate run directories into an ablation table.
    Report(ReportArgs),
    /// Run every ablation over every seed from an experiment file, then report.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_parser = parse_scenario)]
    pub scenario: ScenarioKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Labeled target images per inconsistent class, or `all`.
    #[arg(long, value_parser = parse_shots)]
    pub shots: Option<ShotCount>,
    #[arg(long)]
    pub n_source: Option<usize>,
    #[arg(long)]
    pub n_unlabeled: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    /// Square image side in pixels.
    #[arg(long)]
    pub size: Option<usize>,
    /// Open scenario: the open class is unlabeled (default) or absent in source scenes.
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<OpenVariant>,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `generate`.
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to `$TADALAB_OUT/runs/<ablation>-s<seed>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON training configuration; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Module set, e.g. `M`, `M+CT`, `M+SLM+UCT+RL` or `Source`.
    #[arg(long, value_parser = parse_ablation)]
    pub ablate: Option<Ablation>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Write the mixed samples of the first N iterations as PNGs.
    #[arg(long, value_name = "N")]
    pub dump_mixes: Option<u64>,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Evaluate the teacher instead of the student.
    #[arg(long)]
    pub teacher: bool,
    /// Directory for `eval.json`, `eval.csv` and plots. Defaults to `$TADALAB_OUT/eval`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write a 2-D projection of up to N embeddings per class and domain.
    #[arg(long, value_name = "N")]
    pub features: Option<usize>,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories, or directories containing run directories.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// Defaults to `$TADALAB_OUT/report`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Experiment file (JSON).
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub overwrite: bool,
}

/// A multi-seed ablation experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub scenario: ScenarioKind,
    /// Existing dataset; generated under `<out>/data` from `data_seed` when absent.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    /// Taxonomy the dataset must declare.
    #[serde(default)]
    pub taxonomy: Option<PathBuf>,
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default)]
    pub shots: Option<ShotCount>,
    #[serde(default)]
    pub train: TrainConfig,
    pub ablations: Vec<Ablation>,
    pub seeds: Vec<u64>,
    /// Defaults to `$TADALAB_OUT/experiment`.
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }

    /// Check every referenced file and setting before any work starts.
    /// Returns the loaded dataset when one is referenced.
    pub fn validate(&self) -> CliResult<Option<Dataset>> {
        let mut problems = Vec::new();
        if self.seeds.is_empty() {
            problems.push("no seeds".to_string());
        }
        if self.ablations.is_empty() {
            problems.push("no ablations".to_string());
        }
        if let Err(e) = self.train.validate() {
            problems.push(e.to_string());
        }
        let taxonomy = match &self.taxonomy {
            Some(path) => match TaxonomyPair::load(path) {
                Ok(t) => Some(t),
                Err(e) => {
                    problems.push(e.to_string());
                    None
                }
            },
            None => None,
        };
        let dataset = match &self.dataset {
            Some(dir) => match Dataset::load(dir) {
                Ok(d) => Some(d),
                Err(e) => {
                    problems.push(e.to_string());
                    None
                }
            },
            None => None,
        };
        if let Some(d) = &dataset {
            if d.manifest.params.scenario != self.scenario {
                problems.push(format!(
                    "dataset is a `{}` scenario, experiment declares `{}`",
                    d.manifest.params.scenario, self.scenario
                ));
            }
        }
        if let Some(t) = &taxonomy {
            let expected = match &dataset {
                Some(d) => d.taxonomy().to_file(),
                None => DatasetParams::new(self.scenario, self.data_seed).scenario().taxonomy.to_file(),
            };
            if t.to_file() != expected {
                problems.push("taxonomy file does not match the dataset's taxonomy".into());
            }
        }
        if problems.is_empty() {
            Ok(dataset)
        } else {
            Err(CliError::Validation(problems.join("; ")))
        }
    }
}

fn parse_scenario(s: &str) -> Result<ScenarioKind, String> {
    s.parse().map_err(|e: tadalab::Error| e.to_string())
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: tadalab::Error| e.to_string())
}

fn parse_shots(s: &str) -> Result<ShotCount, String> {
    if s == "all" {
        return Ok(ShotCount::All);
    }
    s.parse::<usize>()
        .map(ShotCount::Exactly)
        .map_err(|_| format!("`{s}` is neither a count nor `all`"))
}

fn parse_variant(s: &str) -> Result<OpenVariant, String> {
    match s {
        "unlabeled" => Ok(OpenVariant::Unlabeled),
        "unseen" => Ok(OpenVariant::Unseen),
        _ => Err(format!("unknown variant `{s}` (unlabeled, unseen)")),
    }
}

/// `--out` when given, else `$TADALAB_OUT/<default>`.
fn output_dir(out: Option<&PathBuf>, default: impl AsRef<Path>) -> CliResult<PathBuf> {
    if let Some(out) = out {
        return Ok(out.clone());
    }
    match std::env::var_os(OUT_ENV) {
        Some(root) if !root.is_empty() => Ok(PathBuf::from(root).join(default)),
        _ => Err(CliError::Usage(format!("--out is required when {OUT_ENV} is not set"))),
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::Core(tadalab::Error::Io { path: path.into(), source: e }))
}

pub fn cmd_generate(args: &GenerateArgs) -> CliResult<()> {
    prepare_output_dir(&args.out, args.overwrite)?;
    let mut params = DatasetParams::new(args.scenario, args.seed);
    if let Some(shots) = args.shots {
        params.shots = shots;
    }
    if let Some(n) = args.n_source {
        params.n_source = n;
    }
    if let Some(n) = args.n_unlabeled {
        params.n_unlabeled = n;
    }
    if let Some(n) = args.n_test {
        params.n_test = n;
    }
    if let Some(size) = args.size {
        params.layout.height = size;
        params.layout.width = size;
    }
    if let Some(v) = args.variant {
        params.variant = v;
    }
    let data = Dataset::generate(params)?;
    data.save(&args.out, true)?;
    println!(
        "wrote {} source, {} unlabeled, {} few-shot, {} test samples to {}",
        data.source.len(),
        data.unlabeled.len(),
        data.fewshot.len(),
        data.test.len(),
        args.out.display()
    );
    Ok(())
}

fn train_config(args: &TrainArgs) -> CliResult<Option<TrainConfig>> {
    let mut config = match &args.config {
        Some(path) => Some(TrainConfig::load(path)?),
        None => None,
    };
    let fresh = args.resume.is_none();
    let touched = args.ablate.is_some() || args.seed.is_some() || args.iterations.is_some();
    if config.is_none() && (fresh || touched) {
        config = Some(TrainConfig::default());
    }
    if let Some(c) = &mut config {
        if let Some(a) = args.ablate {
            c.ablation = a;
        }
        if let Some(s) = args.seed {
            c.seed = s;
        }
        if let Some(n) = args.iterations {
            c.iterations = n;
        }
        c.validate()?;
    }
    Ok(config)
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<RunSummary> {
    let mut config = train_config(args)?;
    if config.is_none() {
        // A resumed run keeps the checkpoint's settings unless asked otherwise.
        let ckpt = Checkpoint::load(args.resume.as_deref().expect("resume set"))?;
        config = ckpt
            .resume
            .and_then(|v| v.get("config").cloned())
            .map(serde_json::from_value)
            .transpose()
            .map_err(|e| CliError::Validation(format!("checkpoint configuration: {e}")))?;
    }
    let shown = config.clone().unwrap_or_default();
    let out = output_dir(
        args.out.as_ref(),
        Path::new("runs").join(format!("{}-s{}", shown.ablation, shown.seed)),
    )?;
    let data = Dataset::load(&args.data)?;
    let options = TrainOutputOptions {
        overwrite: args.overwrite,
        resume: args.resume.clone(),
        dump_mixes: args.dump_mixes,
    };
    let summary = train_to_dir(config, &data, &out, &options)?;
    print_summary(&summary, &out);
    Ok(summary)
}

fn print_summary(summary: &RunSummary, out: &Path) {
    let metrics: Vec<String> = summary
        .metrics
        .iter()
        .map(|(k, v)| format!("{k}={:.2}", v * 100.0))
        .collect();
    println!(
        "{} seed {}: {} ({})",
        summary.ablation,
        summary.seed,
        metrics.join(" "),
        out.display()
    );
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<tadalab::eval::EvalReport> {
    let data = Dataset::load(&args.data)?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let model = if args.teacher {
        let t = ckpt.teacher()?;
        tadalab::model::SegmentationModel {
            arch: t.arch().clone(),
            params: t.params().clone(),
        }
    } else {
        ckpt.student()?
    };
    let report = tadalab::eval::evaluate(
        &model,
        &data.test,
        data.taxonomy().target().names(),
        &data.scenario.eval_subsets(),
    )?;
    let out = output_dir(args.out.as_ref(), "eval")?;
    prepare_output_dir(&out, args.overwrite)?;
    report.save_json(&out.join("eval.json"))?;
    report.save_csv(&out.join("eval.csv"))?;
    write_text(
        &out.join("iou.svg"),
        &bar_chart_svg("per-class IoU", &report.class_names, &report.per_class_iou),
    )?;
    if let Some(cap) = args.features {
        let samples: Vec<_> = data.source.iter().chain(&data.test).cloned().collect();
        let points = project_features(&model, &samples, cap, &mut rng::stream(0, "projection"))?;
        let mut groups: Vec<String> = Vec::new();
        let mut xy = Vec::with_capacity(points.len());
        for p in &points {
            let name = format!(
                "{} ({:?})",
                data.taxonomy().target().name(p.class).unwrap_or("?"),
                p.domain
            );
            let g = groups.iter().position(|n| *n == name).unwrap_or_else(|| {
                groups.push(name);
                groups.len() - 1
            });
            xy.push((p.x, p.y, g));
        }
        write_text(&out.join("features.svg"), &scatter_svg("embedding projection", &xy, &groups))?;
    }
    let fmt = |v: Option<f64>| v.map(|v| format!("{:.2}", v * 100.0)).unwrap_or_else(|| "n/a".into());
    println!("mIoU {}", fmt(report.miou));
    for s in &report.subsets {
        println!("mIoU[{}] {}", s.name, fmt(s.miou));
    }
    for (name, iou) in report.class_names.iter().zip(&report.per_class_iou) {
        println!("  {name}: {}", fmt(*iou));
    }
    Ok(report)
}

/// Run directories under `root`: itself if it has a summary, else its
/// immediate subdirectories that do, in name order.
fn run_dirs(root: &Path) -> CliResult<Vec<PathBuf>> {
    if root.join("summary.json").is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let entries = std::fs::read_dir(root).map_err(|e| CliError::Validation(format!("{}: {e}", root.display())))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("summary.json").is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

pub fn cmd_report(args: &ReportArgs) -> CliResult<String> {
    let mut dirs = Vec::new();
    for root in &args.runs {
        dirs.extend(run_dirs(root)?);
    }
    if dirs.is_empty() {
        return Err(CliError::Validation("no run directories found".into()));
    }
    let out = output_dir(args.out.as_ref(), "report")?;
    prepare_output_dir(&out, args.overwrite)?;
    report_runs(&dirs, &out)
}

fn report_runs(dirs: &[PathBuf], out: &Path) -> CliResult<String> {
    use rayon::prelude::*;
    let runs = dirs
        .par_iter()
        .map(|d| load_run_summary(d))
        .collect::<tadalab::Result<Vec<_>>>()?;
    let rows = aggregate(&runs)?;
    let table = render_table(&rows);
    write_table_csv(&rows, &out.join("table.csv"))?;
    write_text(&out.join("table.txt"), &table)?;
    print!("{table}");
    Ok(table)
}

pub fn cmd_experiment(args: &ExperimentArgs) -> CliResult<String> {
    let spec = ExperimentSpec::load(&args.spec)?;
    let loaded = spec.validate()?;
    let out = output_dir(spec.out.as_ref(), "experiment")?;
    prepare_output_dir(&out, args.overwrite)?;
    let data = match loaded {
        Some(d) => d,
        None => {
            let mut params = DatasetParams::new(spec.scenario, spec.data_seed);
            if let Some(shots) = spec.shots {
                params.shots = shots;
            }
            let d = Dataset::generate(params)?;
            d.save(&out.join("data"), args.overwrite)?;
            d
        }
    };
    let mut dirs = Vec::new();
    for ablation in &spec.ablations {
        for &seed in &spec.seeds {
            let config = TrainConfig {
                ablation: *ablation,
                seed,
                ..spec.train.clone()
            };
            let dir = out.join("runs").join(format!("{ablation}-s{seed}"));
            let options = TrainOutputOptions {
                overwrite: args.overwrite,
                ..TrainOutputOptions::default()
            };
            let summary = train_to_dir(Some(config), &data, &dir, &options)?;
            print_summary(&summary, &dir);
            dirs.push(dir);
        }
    }
    let report = out.join("report");
    prepare_output_dir(&report, args.overwrite)?;
    report_runs(&dirs, &report)
}

pub fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a).map(drop),
        Command::Eval(a) => cmd_eval(a).map(drop),
        Command::Report(a) => cmd_report(a).map(drop),
        Command::Experiment(a) => cmd_experiment(a).map(drop),
    }
}

/// Parse and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
