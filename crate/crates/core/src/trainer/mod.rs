//! The mean-teacher self-training loop: batch assembly, the mapping →
//! relabeling schedule, the joint objective, the optimizer step and the EMA
//! teacher update.
//!
//! Each iteration is split into [`Trainer::prepare`], which does all teacher
//! inference and random draws, and [`Trainer::objective`], a deterministic
//! function of the student parameters whose gradient is exact. Random draws
//! come from streams keyed by `(seed, name, iteration)`, so resuming from a
//! checkpoint needs no generator state.

mod config;
mod metrics;
mod optim;
mod output;

use std::path::PathBuf;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use config::{Ablation, MixSchedule, TrainConfig};
pub use metrics::{read_metrics_csv, write_metrics_csv, MetricRow};
pub use optim::{LrSchedule, OptimizerConfig, OptimizerState};
pub use output::{load_run_summary, train_to_dir, TrainOutputOptions};

use crate::contrastive::{ct_loss, select_pairs, uct_loss, uncertainty_map, with_uncertainty, PixelPairBatch};
use crate::data::{write_label, write_rgb, Dataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::labelops::{fallback_map, relabel, slm, RemappedLabel};
use crate::loss::cross_entropy;
use crate::mixing::{bms_loss, bms_mix, build_mask, confidence_weights, sample_classes, Donor, MixedSample};
use crate::model::{ema_update, Architecture, Checkpoint, Params, SegmentationModel, TeacherModel};
use crate::rng;
use crate::tensor::{LabelMap, Tensor3};

/// Per-iteration loss values; `None` for terms that are not active.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub bms: Option<f64>,
    pub slm: Option<f64>,
    pub rl: Option<f64>,
    /// Supervised few-shot term of the source-only baseline.
    pub fewshot: Option<f64>,
    pub contrastive: Option<f64>,
}

/// `L_bms + L_slm + λ₃·L_contrastive` before the switch iteration, `L_bms +
/// L_rl + λ₃·L_contrastive` from it on (plus the baseline's few-shot term).
/// Fails on the first non-finite component, naming it.
pub fn total_loss(components: &LossComponents, t: u64, config: &TrainConfig) -> Result<f64> {
    let value = |component: &'static str, v: Option<f64>| match v {
        Some(v) if !v.is_finite() => Err(Error::NonFinite { component, iteration: t }),
        v => Ok(v.unwrap_or(0.0)),
    };
    let bms = value("bms", components.bms)?;
    let slm = value("slm", components.slm)?;
    let rl = value("rl", components.rl)?;
    let fewshot = value("fewshot", components.fewshot)?;
    let contrastive = value("contrastive", components.contrastive)?;
    let source = if config.rl_active(t) { rl } else { slm };
    let total = bms + source + fewshot + config.lambda_contrastive * contrastive;
    if !total.is_finite() {
        return Err(Error::NonFinite {
            component: "total",
            iteration: t,
        });
    }
    Ok(total)
}

/// What the student trains on in the target domain for one batch element.
#[derive(Debug, Clone)]
pub enum TargetPlan {
    Mixed {
        mixed: MixedSample,
        pixel_weights: Option<Vec<f64>>,
        /// Pair structure on the embedding grid; vectors filled from the student.
        pairs: Option<PixelPairBatch>,
    },
    /// Supervised few-shot sample (source-only baseline).
    Fewshot { image: Tensor3, label: LabelMap },
    None,
}

#[derive(Debug, Clone)]
pub struct SamplePlan {
    pub source_image: Tensor3,
    pub source_label: RemappedLabel,
    pub target: TargetPlan,
}

/// Everything an iteration needs besides the student parameters.
#[derive(Debug, Clone)]
pub struct StepPlan {
    pub iteration: u64,
    pub rl_active: bool,
    pub samples: Vec<SamplePlan>,
}

#[derive(Debug, Clone)]
pub struct StepObjective {
    pub components: LossComponents,
    pub total: f64,
    pub grads: Params,
    /// Cross-entropy terms that had no labeled pixel.
    pub empty_terms: u64,
}

/// Trainer state stored alongside the parameters in a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ResumeState {
    config: TrainConfig,
    optimizer: OptimizerState,
    log: Vec<MetricRow>,
    empty_terms: u64,
}

pub struct Trainer<'a> {
    config: TrainConfig,
    data: &'a Dataset,
    student: SegmentationModel,
    teacher: TeacherModel,
    optimizer: OptimizerState,
    iteration: u64,
    log: Vec<MetricRow>,
    empty_terms: u64,
    mix_dump: Option<(PathBuf, u64)>,
}

impl<'a> Trainer<'a> {
    /// Fresh student from the `init` stream; the teacher starts as its copy.
    pub fn new(config: TrainConfig, data: &'a Dataset) -> Result<Self> {
        config.validate()?;
        let arch = Self::architecture(&config, data)?;
        let student = SegmentationModel::init(arch, &mut rng::stream(config.seed, "init"))?;
        let teacher = TeacherModel::from_student(&student);
        let optimizer = OptimizerState::new(&config.optimizer, &student.params);
        Ok(Trainer {
            config,
            data,
            student,
            teacher,
            optimizer,
            iteration: 0,
            log: Vec::new(),
            empty_terms: 0,
            mix_dump: None,
        })
    }

    /// Continue a run. The checkpoint's own configuration is used except for
    /// `iterations`, `eval_every`, `log_every` and `checkpoint_every`, which
    /// may be extended by `config` when given.
    pub fn from_checkpoint(checkpoint: &Checkpoint, config: Option<TrainConfig>, data: &'a Dataset) -> Result<Self> {
        let resume: ResumeState = checkpoint
            .resume
            .clone()
            .ok_or_else(|| Error::InvalidArgument("checkpoint carries no trainer state".into()))
            .and_then(|v| {
                serde_json::from_value(v).map_err(|e| Error::InvalidArgument(format!("trainer state: {e}")))
            })?;
        let config = match config {
            Some(c) => {
                let same = TrainConfig {
                    iterations: resume.config.iterations,
                    switch_iteration: Some(resume.config.switch_at()),
                    eval_every: resume.config.eval_every,
                    log_every: resume.config.log_every,
                    checkpoint_every: resume.config.checkpoint_every,
                    ..c.clone()
                };
                let original = TrainConfig {
                    switch_iteration: Some(resume.config.switch_at()),
                    ..resume.config.clone()
                };
                if same != original {
                    return Err(Error::InvalidArgument(
                        "resume configuration differs from the checkpoint's beyond run length and intervals".into(),
                    ));
                }
                if c.switch_at() == resume.config.switch_at() {
                    c
                } else {
                    TrainConfig {
                        switch_iteration: Some(resume.config.switch_at()),
                        ..c
                    }
                }
            }
            None => resume.config.clone(),
        };
        config.validate()?;
        if checkpoint.iteration > config.iterations {
            return Err(Error::InvalidArgument(format!(
                "checkpoint at iteration {} is past the configured {}",
                checkpoint.iteration, config.iterations
            )));
        }
        if checkpoint.architecture != Self::architecture(&config, data)? {
            return Err(Error::Shape("checkpoint architecture does not match the dataset and config".into()));
        }
        Ok(Trainer {
            student: checkpoint.student()?,
            teacher: checkpoint.teacher()?,
            optimizer: resume.optimizer,
            iteration: checkpoint.iteration,
            log: resume.log,
            empty_terms: resume.empty_terms,
            config,
            data,
            mix_dump: None,
        })
    }

    fn architecture(config: &TrainConfig, data: &Dataset) -> Result<Architecture> {
        let classes = data.taxonomy().target().count();
        let arch = config.architecture.clone().unwrap_or_else(|| Architecture::desk_scale(classes));
        if arch.num_classes() != classes {
            return Err(Error::Shape(format!(
                "architecture predicts {} classes, the target space has {classes}",
                arch.num_classes()
            )));
        }
        Ok(arch)
    }

    /// Write image/label/provenance PNGs of the mixed samples of the first
    /// `limit` iterations into `dir`.
    pub fn dump_mixes(&mut self, dir: PathBuf, limit: u64) {
        self.mix_dump = Some((dir, limit));
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn student(&self) -> &SegmentationModel {
        &self.student
    }

    pub fn teacher(&self) -> &TeacherModel {
        &self.teacher
    }

    pub fn log(&self) -> &[MetricRow] {
        &self.log
    }

    /// Loss terms so far that were defined as 0 because every pixel was IGNORE.
    pub fn empty_terms(&self) -> u64 {
        self.empty_terms
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new(&self.student, &self.teacher, self.iteration);
        let state = ResumeState {
            config: self.config.clone(),
            optimizer: self.optimizer.clone(),
            log: self.log.clone(),
            empty_terms: self.empty_terms,
        };
        ckpt.resume = Some(serde_json::to_value(state).map_err(|e| Error::InvalidArgument(e.to_string()))?);
        Ok(ckpt)
    }

    /// Student evaluation on the held-out target split.
    pub fn evaluate(&self) -> Result<EvalReport> {
        evaluate(
            &self.student,
            &self.data.test,
            self.data.taxonomy().target().names(),
            &self.data.scenario.eval_subsets(),
        )
    }

    /// Teacher inference and every random draw of iteration `t`.
    pub fn prepare(&self, t: u64) -> Result<StepPlan> {
        let cfg = &self.config;
        let ablation = cfg.ablation;
        let data = self.data;
        let taxonomy = data.taxonomy();
        let rl_active = cfg.rl_active(t);
        let mut sampling = rng::indexed_stream(cfg.seed, "sampling", t);
        let mut slm_rng = rng::indexed_stream(cfg.seed, "slm", t);
        let mut bms_rng = rng::indexed_stream(cfg.seed, "bms", t);
        let mut mining_rng = rng::indexed_stream(cfg.seed, "mining", t);
        let factor = self.student.arch.downsample_factor();

        let mut samples = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let src = &data.source[sampling.random_range(0..data.source.len())];
            let source_label = if rl_active {
                relabel(&src.label, &self.teacher.probabilities(&src.image)?, taxonomy, cfg.relabel_threshold)?
            } else if ablation.slm {
                slm(&src.label, taxonomy, cfg.slm_mode, &mut slm_rng)?
            } else {
                fallback_map(&src.label, taxonomy, cfg.fallback_mapping)?
            };

            let target = if ablation.source_only {
                if data.fewshot.is_empty() {
                    TargetPlan::None
                } else {
                    let (_, fs) = &data.fewshot[sampling.random_range(0..data.fewshot.len())];
                    TargetPlan::Fewshot {
                        image: fs.image.clone(),
                        label: fs.label.clone(),
                    }
                }
            } else {
                let unlabeled = &data.unlabeled[sampling.random_range(0..data.unlabeled.len())];
                let pseudo = self.teacher.predict_pseudo(&unlabeled.image)?;
                let fewshot = (!data.fewshot.is_empty())
                    .then(|| &data.fewshot[sampling.random_range(0..data.fewshot.len())].1);
                let alternate = cfg.mix_schedule == MixSchedule::Alternate && fewshot.is_some();
                let use_source = !alternate || t % 2 == 0;
                let use_fewshot = !alternate || t % 2 == 1;

                let source_classes = source_label.label.present_classes();
                let source_mask = if use_source && !source_classes.is_empty() {
                    let chosen = sample_classes(&source_classes, &mut bms_rng)?;
                    Some(build_mask(&source_label.label, &chosen)?)
                } else {
                    None
                };
                let fewshot_mask = match fewshot {
                    Some(fs) if use_fewshot && fs.label.labeled_count() > 0 => {
                        Some(build_mask(&fs.label, &fs.label.present_classes())?)
                    }
                    _ => None,
                };
                let mixed = bms_mix(
                    source_mask.as_ref().map(|mask| Donor {
                        image: &src.image,
                        label: &source_label.label,
                        mask,
                    }),
                    fewshot.zip(fewshot_mask.as_ref()).map(|(fs, mask)| Donor {
                        image: &fs.image,
                        label: &fs.label,
                        mask,
                    }),
                    &unlabeled.image,
                    &pseudo.label,
                )?;
                let pixel_weights = cfg
                    .confidence_weighting
                    .map(|threshold| confidence_weights(&mixed, &pseudo.confidence, threshold))
                    .transpose()?;
                let pairs = if ablation.contrastive() {
                    let batch = select_pairs(
                        &mixed.label,
                        mixed.label.height / factor,
                        mixed.label.width / factor,
                        cfg.anchors_per_class,
                        cfg.temperature,
                        &mut mining_rng,
                    )?;
                    Some(if ablation.uct && !batch.is_empty() {
                        with_uncertainty(batch, &uncertainty_map(&self.teacher, &mixed.image)?)?
                    } else {
                        batch
                    })
                } else {
                    None
                };
                TargetPlan::Mixed {
                    mixed,
                    pixel_weights,
                    pairs,
                }
            };
            samples.push(SamplePlan {
                source_image: src.image.clone(),
                source_label,
                target,
            });
        }
        Ok(StepPlan {
            iteration: t,
            rl_active,
            samples,
        })
    }

    /// Joint loss of `model` on a prepared iteration and its exact gradient.
    pub fn objective(&self, model: &SegmentationModel, plan: &StepPlan) -> Result<StepObjective> {
        let cfg = &self.config;
        let ablation = cfg.ablation;
        let n = plan.samples.len() as f64;
        let mut grads = model.params.zeros_like();
        let (mut source, mut bms, mut fewshot, mut contrastive) = (0.0, 0.0, 0.0, 0.0);
        let mut saw_fewshot = false;
        let mut empty_terms = 0;
        for s in &plan.samples {
            let pass = model.forward_train(&s.source_image)?;
            let ce = cross_entropy(&pass.logits, &s.source_label.label, None)?;
            empty_terms += u64::from(ce.is_empty());
            source += ce.value;
            grads.add_scaled(&model.backward(&pass, &ce.grad, None)?, 1.0 / n);

            match &s.target {
                TargetPlan::Mixed {
                    mixed,
                    pixel_weights,
                    pairs,
                } => {
                    let pass = model.forward_train(&mixed.image)?;
                    let ce = bms_loss(&pass.logits, mixed, pixel_weights.as_deref())?;
                    empty_terms += u64::from(ce.is_empty());
                    bms += ce.value;
                    let grad_embeddings = match pairs {
                        Some(pairs) => {
                            let mut batch = pairs.clone();
                            batch.gather(&pass.embeddings)?;
                            let loss = if ablation.uct {
                                uct_loss(&batch, cfg.contrastive_form, cfg.positive_weighting)?
                            } else {
                                ct_loss(&batch, cfg.contrastive_form)?
                            };
                            contrastive += loss.value;
                            let e = &pass.embeddings;
                            let mut g = loss.grad_tensor(&batch, e.channels, e.height, e.width);
                            g.data.iter_mut().for_each(|v| *v *= cfg.lambda_contrastive);
                            Some(g)
                        }
                        None => None,
                    };
                    grads.add_scaled(&model.backward(&pass, &ce.grad, grad_embeddings.as_ref())?, 1.0 / n);
                }
                TargetPlan::Fewshot { image, label } => {
                    let pass = model.forward_train(image)?;
                    let ce = cross_entropy(&pass.logits, label, None)?;
                    empty_terms += u64::from(ce.is_empty());
                    fewshot += ce.value;
                    saw_fewshot = true;
                    grads.add_scaled(&model.backward(&pass, &ce.grad, None)?, 1.0 / n);
                }
                TargetPlan::None => {}
            }
        }
        let components = LossComponents {
            bms: ablation.bms().then_some(bms / n),
            slm: (!plan.rl_active).then_some(source / n),
            rl: plan.rl_active.then_some(source / n),
            fewshot: saw_fewshot.then_some(fewshot / n),
            contrastive: ablation.contrastive().then_some(contrastive / n),
        };
        let total = total_loss(&components, plan.iteration, cfg)?;
        Ok(StepObjective {
            components,
            total,
            grads,
            empty_terms,
        })
    }

    /// One full iteration: prepare, objective, optimizer step on the student,
    /// EMA update of the teacher, logging.
    pub fn step(&mut self) -> Result<StepObjective> {
        let t = self.iteration;
        let plan = self.prepare(t)?;
        self.write_mix_dump(&plan)?;
        let objective = self.objective(&self.student, &plan)?;
        if !objective.grads.all_finite() {
            return Err(Error::NonFinite {
                component: "gradient",
                iteration: t,
            });
        }
        let scale = self.config.lr_schedule.factor(t);
        self.optimizer
            .apply_scaled(&self.config.optimizer, scale, &mut self.student.params, &objective.grads)?;
        ema_update(&mut self.teacher, &self.student, self.config.ema_alpha)?;
        self.iteration += 1;
        self.empty_terms += objective.empty_terms;

        let done = self.iteration;
        let eval_now =
            done == self.config.iterations || (self.config.eval_every > 0 && done % self.config.eval_every == 0);
        if eval_now || done % self.config.log_every == 0 {
            let report = if eval_now { Some(self.evaluate()?) } else { None };
            self.log.push(MetricRow::new(
                done,
                objective.total,
                &objective.components,
                report.as_ref(),
                &self.data.scenario.eval_subsets(),
            ));
        }
        Ok(objective)
    }

    /// Step until the configured iteration count, calling `after_step` after each.
    pub fn run_with(&mut self, mut after_step: impl FnMut(&Trainer<'a>) -> Result<()>) -> Result<()> {
        while self.iteration < self.config.iterations {
            self.step()?;
            after_step(self)?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_with(|_| Ok(()))
    }

    fn write_mix_dump(&self, plan: &StepPlan) -> Result<()> {
        let Some((dir, limit)) = &self.mix_dump else { return Ok(()) };
        if plan.iteration >= *limit {
            return Ok(());
        }
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        for (b, s) in plan.samples.iter().enumerate() {
            if let TargetPlan::Mixed { mixed, .. } = &s.target {
                let stem = format!("mix-{:06}-{b}", plan.iteration);
                write_rgb(&dir.join(format!("{stem}-image.png")), &mixed.image)?;
                write_label(&dir.join(format!("{stem}-label.png")), &mixed.label)?;
                let provenance = LabelMap {
                    height: mixed.label.height,
                    width: mixed.label.width,
                    data: mixed.provenance.iter().map(|p| u16::from(p.code())).collect(),
                };
                write_label(&dir.join(format!("{stem}-provenance.png")), &provenance)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_loss_follows_the_schedule() {
        let config = TrainConfig {
            iterations: 10,
            ..TrainConfig::default()
        };
        let c = LossComponents {
            bms: Some(1.0),
            slm: Some(2.0),
            rl: Some(5.0),
            fewshot: None,
            contrastive: Some(10.0),
        };
        assert!((total_loss(&c, 0, &config).unwrap() - 3.1).abs() < 1e-12);
        assert!((total_loss(&c, 5, &config).unwrap() - 6.1).abs() < 1e-12);
        assert_eq!(total_loss(&LossComponents::default(), 0, &config).unwrap(), 0.0);
        assert_eq!(config.lambda_contrastive, 0.01);
    }

    #[test]
    fn non_finite_components_are_named() {
        let config = TrainConfig::default();
        let c = LossComponents {
            contrastive: Some(f64::NAN),
            ..LossComponents::default()
        };
        match total_loss(&c, 7, &config) {
            Err(Error::NonFinite { component, iteration }) => assert_eq!((component, iteration), ("contrastive", 7)),
            other => panic!("{other:?}"),
        }
        let c = LossComponents {
            bms: Some(f64::INFINITY),
            ..LossComponents::default()
        };
        assert!(matches!(total_loss(&c, 0, &config), Err(Error::NonFinite { component: "bms", .. })));
    }

    use crate::data::{DatasetParams, ScenarioKind, ShotCount};
    use crate::gradcheck::{compare, numeric_gradient};
    use crate::model::ConvSpec;

    fn small_data() -> Dataset {
        let mut p = DatasetParams::new(ScenarioKind::C2f, 3);
        p.layout.height = 16;
        p.layout.width = 16;
        p.n_source = 6;
        p.n_unlabeled = 12;
        p.n_test = 3;
        p.shots = ShotCount::Exactly(1);
        Dataset::generate(p).unwrap()
    }

    fn tiny_arch(classes: usize) -> Architecture {
        Architecture {
            in_channels: 3,
            encoder: vec![ConvSpec::new(4, 3, 2, true), ConvSpec::new(4, 3, 1, false)],
            decoder_input_relu: true,
            decoder: vec![ConvSpec::new(classes, 1, 1, false)],
        }
    }

    fn small_config(data: &Dataset, iterations: u64) -> TrainConfig {
        TrainConfig {
            iterations,
            batch_size: 1,
            anchors_per_class: 8,
            eval_every: 0,
            log_every: 1,
            relabel_threshold: 0.3,
            architecture: Some(tiny_arch(data.taxonomy().target().count())),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let data = small_data();
        let config = small_config(&data, 4);
        let mut a = Trainer::new(config.clone(), &data).unwrap();
        let mut b = Trainer::new(config, &data).unwrap();
        a.run().unwrap();
        b.run().unwrap();
        assert_eq!(a.log(), b.log());
        assert_eq!(a.student().params, b.student().params);
        assert_eq!(a.log().len(), 4);
        assert!(a.log().last().unwrap().evaluated);
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let data = small_data();
        let config = TrainConfig {
            optimizer: OptimizerConfig::Adam {
                learning_rate: 0.01,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 0.0,
            },
            ..small_config(&data, 6)
        };
        let mut straight = Trainer::new(config.clone(), &data).unwrap();
        straight.run().unwrap();

        let mut first = Trainer::new(config, &data).unwrap();
        for _ in 0..3 {
            first.step().unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        first.checkpoint().unwrap().save(&path).unwrap();
        let mut resumed = Trainer::from_checkpoint(&Checkpoint::load(&path).unwrap(), None, &data).unwrap();
        resumed.run().unwrap();
        assert_eq!(resumed.iteration(), 6);
        assert_eq!(resumed.log(), straight.log());
        assert_eq!(resumed.student().params, straight.student().params);
        assert_eq!(resumed.teacher().params(), straight.teacher().params());
    }

    #[test]
    fn resume_rejects_changed_hyperparameters() {
        let data = small_data();
        let config = small_config(&data, 4);
        let mut t = Trainer::new(config.clone(), &data).unwrap();
        t.step().unwrap();
        let ckpt = t.checkpoint().unwrap();
        let longer = TrainConfig {
            iterations: 8,
            ..config.clone()
        };
        assert!(Trainer::from_checkpoint(&ckpt, Some(longer), &data).is_ok());
        let other = TrainConfig {
            temperature: 0.5,
            ..config
        };
        assert!(Trainer::from_checkpoint(&ckpt, Some(other), &data).is_err());
        assert!(Trainer::from_checkpoint(&Checkpoint::new(t.student(), t.teacher(), 1), None, &data).is_err());
    }

    #[test]
    fn zero_iterations_keep_the_initial_model() {
        let data = small_data();
        let config = small_config(&data, 0);
        let init = Trainer::new(config.clone(), &data).unwrap().student().clone();
        let mut t = Trainer::new(config, &data).unwrap();
        t.run().unwrap();
        assert!(t.log().is_empty());
        assert_eq!(t.student(), &init);
        assert_eq!(t.checkpoint().unwrap().iteration, 0);
    }

    #[test]
    fn relabeling_takes_over_at_the_switch() {
        let data = small_data();
        let mut t = Trainer::new(small_config(&data, 6), &data).unwrap();
        t.run().unwrap();
        for row in t.log() {
            let before = row.t <= 3;
            assert_eq!(row.components.slm.is_some(), before, "t={}", row.t);
            assert_eq!(row.components.rl.is_some(), !before, "t={}", row.t);
            assert!(row.components.bms.is_some() && row.components.contrastive.is_some());
        }
        let plan = t.prepare(2).unwrap();
        assert!(!plan.rl_active);
        assert!(t.prepare(3).unwrap().rl_active);
    }

    #[test]
    fn teacher_is_the_ema_of_student_iterates() {
        let data = small_data();
        let config = TrainConfig {
            ema_alpha: 0.9,
            ..small_config(&data, 5)
        };
        let mut t = Trainer::new(config, &data).unwrap();
        let mut expected = t.teacher().params().clone();
        for _ in 0..5 {
            t.step().unwrap();
            let student = t.student().params.to_flat();
            let mut flat = expected.to_flat();
            for (e, s) in flat.iter_mut().zip(&student) {
                *e = 0.9 * *e + 0.1 * s;
            }
            expected.set_flat(&flat).unwrap();
        }
        let diff = t
            .teacher()
            .params()
            .values()
            .zip(expected.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "{diff}");
    }

    fn check_objective_gradient(ablation: &str, t: u64) {
        let data = small_data();
        let config = TrainConfig {
            ablation: ablation.parse().unwrap(),
            lambda_contrastive: 0.5,
            confidence_weighting: Some(0.2),
            ..small_config(&data, 6)
        };
        let trainer = Trainer::new(config, &data).unwrap();
        let plan = trainer.prepare(t).unwrap();
        let model = trainer.student().clone();
        assert!(model.params.len() <= 500);
        let analytic = trainer.objective(&model, &plan).unwrap();
        let f = |x: &[f64]| {
            let mut m = model.clone();
            m.params.set_flat(x).unwrap();
            trainer.objective(&m, &plan).unwrap().total
        };
        let numeric = numeric_gradient(f, &model.params.to_flat(), 1e-5);
        let report = compare(&analytic.grads.to_flat(), &numeric, 1e-3);
        assert!(report.passes(0.95, 1e-2), "{ablation} t={t}: {report:?}");
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        check_objective_gradient("M+SLM+UCT+RL", 0);
        check_objective_gradient("M+SLM+UCT+RL", 4);
        check_objective_gradient("M+CT", 1);
        check_objective_gradient("Source", 0);
    }

    #[test]
    fn supervised_loss_decreases() {
        let data = small_data();
        let config = TrainConfig {
            ablation: Ablation::SOURCE,
            batch_size: 2,
            optimizer: OptimizerConfig::Adam {
                learning_rate: 0.02,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 0.0,
            },
            ..small_config(&data, 100)
        };
        let mut t = Trainer::new(config, &data).unwrap();
        t.run().unwrap();
        let log = t.log();
        let mean = |rows: &[MetricRow]| rows.iter().map(|r| r.total).sum::<f64>() / rows.len() as f64;
        let (head, tail) = (mean(&log[..10]), mean(&log[log.len() - 10..]));
        assert!(tail < 0.8 * head, "{head} -> {tail}");
    }

    #[test]
    fn run_directory_is_complete_and_protected() {
        let data = small_data();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let config = TrainConfig {
            checkpoint_every: 2,
            ..small_config(&data, 4)
        };
        let options = TrainOutputOptions {
            dump_mixes: Some(1),
            ..TrainOutputOptions::default()
        };
        let summary = train_to_dir(Some(config.clone()), &data, &out, &options).unwrap();
        for file in [
            "config.json",
            "metrics.csv",
            "checkpoint.json",
            "eval.json",
            "eval.csv",
            "summary.json",
            "loss.svg",
            "iou.svg",
            "checkpoints/ckpt-000002.json",
            "checkpoints/ckpt-000004.json",
            "mixes/mix-000000-0-image.png",
            "mixes/mix-000000-0-provenance.png",
        ] {
            assert!(out.join(file).exists(), "{file}");
        }
        assert!(!out.join("mixes/mix-000001-0-image.png").exists());
        assert_eq!(load_run_summary(&out).unwrap(), summary);
        assert_eq!(summary.ablation, "M+SLM+UCT+RL");
        assert!(matches!(
            train_to_dir(Some(config.clone()), &data, &out, &options),
            Err(Error::Exists(_))
        ));
        let again = TrainOutputOptions {
            overwrite: true,
            ..TrainOutputOptions::default()
        };
        let csv = std::fs::read(out.join("metrics.csv")).unwrap();
        train_to_dir(Some(config), &data, &out, &again).unwrap();
        assert_eq!(std::fs::read(out.join("metrics.csv")).unwrap(), csv);
    }
}
