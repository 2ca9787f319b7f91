use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::optim::{LrSchedule, OptimizerConfig};
use crate::contrastive::{ContrastiveForm, PositiveWeighting};
use crate::error::{Error, Result};
use crate::labelops::{FallbackMapping, SlmMode};
use crate::model::Architecture;

/// Which adaptation modules are on. Parsed from tokens such as `M`,
/// `M+SLM+UCT+RL`, or `Source` for the supervised baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Ablation {
    /// Supervised training on source and few-shot samples only.
    pub source_only: bool,
    pub slm: bool,
    pub rl: bool,
    pub ct: bool,
    pub uct: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        source_only: false,
        slm: true,
        rl: true,
        ct: false,
        uct: true,
    };

    pub const SOURCE: Ablation = Ablation {
        source_only: true,
        slm: false,
        rl: false,
        ct: false,
        uct: false,
    };

    /// BMS only.
    pub const M: Ablation = Ablation {
        source_only: false,
        slm: false,
        rl: false,
        ct: false,
        uct: false,
    };

    pub fn bms(&self) -> bool {
        !self.source_only
    }

    pub fn contrastive(&self) -> bool {
        self.ct || self.uct
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.source_only {
            return f.write_str("Source");
        }
        f.write_str("M")?;
        for (on, name) in [(self.slm, "SLM"), (self.ct, "CT"), (self.uct, "UCT"), (self.rl, "RL")] {
            if on {
                write!(f, "+{name}")?;
            }
        }
        Ok(())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: &str| Error::InvalidArgument(format!("invalid ablation `{s}`: {why}"));
        if s.eq_ignore_ascii_case("source") {
            return Ok(Ablation::SOURCE);
        }
        let mut tokens = s.split('+').map(str::trim);
        if tokens.next() != Some("M") {
            return Err(bad("must be `Source` or start with `M`"));
        }
        let mut out = Ablation::M;
        for token in tokens {
            let flag = match token {
                "SLM" => &mut out.slm,
                "RL" => &mut out.rl,
                "CT" => &mut out.ct,
                "UCT" => &mut out.uct,
                other => return Err(bad(&format!("unknown module `{other}` (expected SLM, RL, CT or UCT)"))),
            };
            if *flag {
                return Err(bad(&format!("`{token}` given twice")));
            }
            *flag = true;
        }
        if out.ct && out.uct {
            return Err(bad("CT and UCT are mutually exclusive"));
        }
        Ok(out)
    }
}

impl Serialize for Ablation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Ablation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Whether each iteration pastes from both donors or alternates between them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixSchedule {
    #[default]
    Both,
    /// Source donor on even iterations, few-shot donor on odd ones.
    Alternate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    /// Iteration at which relabeling replaces stochastic mapping; `None` is `iterations / 2`.
    pub switch_iteration: Option<u64>,
    pub lambda_contrastive: f64,
    pub relabel_threshold: f64,
    pub temperature: f64,
    pub ema_alpha: f64,
    pub optimizer: OptimizerConfig,
    pub lr_schedule: LrSchedule,
    /// Samples drawn from each pool per iteration.
    pub batch_size: usize,
    pub anchors_per_class: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub slm_mode: SlmMode,
    /// Source labels of inconsistent classes when neither SLM nor RL applies.
    pub fallback_mapping: FallbackMapping,
    pub contrastive_form: ContrastiveForm,
    pub positive_weighting: PositiveWeighting,
    pub mix_schedule: MixSchedule,
    /// Confidence threshold of the optional DACS-style pixel weighting of the mixed loss.
    pub confidence_weighting: Option<f64>,
    /// Evaluate on the test split every this many iterations (0: only at the end).
    pub eval_every: u64,
    /// Log loss components every this many iterations.
    pub log_every: u64,
    /// Write a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: u64,
    /// Defaults to the desk-scale network for the target class count.
    pub architecture: Option<Architecture>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 4000,
            switch_iteration: None,
            lambda_contrastive: 0.01,
            relabel_threshold: 0.9,
            temperature: 0.1,
            ema_alpha: 0.99,
            optimizer: OptimizerConfig::Sgd {
                learning_rate: 0.005,
                momentum: 0.9,
                weight_decay: 0.0,
            },
            lr_schedule: LrSchedule::Constant,
            batch_size: 2,
            anchors_per_class: 64,
            seed: 0,
            ablation: Ablation::FULL,
            slm_mode: SlmMode::PerPixel,
            fallback_mapping: FallbackMapping::Primary,
            contrastive_form: ContrastiveForm::Literal,
            positive_weighting: PositiveWeighting::AnchorProduct,
            mix_schedule: MixSchedule::Both,
            confidence_weighting: None,
            eval_every: 500,
            log_every: 10,
            checkpoint_every: 0,
            architecture: None,
        }
    }
}

impl TrainConfig {
    pub fn switch_at(&self) -> u64 {
        self.switch_iteration.unwrap_or(self.iterations / 2)
    }

    /// Relabeling replaces stochastic mapping at 0-based step `t`.
    pub fn rl_active(&self, t: u64) -> bool {
        self.ablation.rl && t >= self.switch_at()
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.switch_at() > self.iterations {
            problems.push(format!("switch iteration {} exceeds {} iterations", self.switch_at(), self.iterations));
        }
        if !(self.lambda_contrastive >= 0.0 && self.lambda_contrastive.is_finite()) {
            problems.push(format!("contrastive weight {} must be >= 0", self.lambda_contrastive));
        }
        if !(self.relabel_threshold > 0.0 && self.relabel_threshold < 1.0) {
            problems.push(format!("relabel threshold {} outside (0, 1)", self.relabel_threshold));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            problems.push(format!("temperature {} must be positive", self.temperature));
        }
        if !(0.0..1.0).contains(&self.ema_alpha) {
            problems.push(format!("EMA decay {} outside [0, 1)", self.ema_alpha));
        }
        if self.batch_size == 0 {
            problems.push("batch size must be >= 1".into());
        }
        if self.anchors_per_class == 0 {
            problems.push("anchors per class must be >= 1".into());
        }
        if let Err(e) = self.lr_schedule.validate() {
            problems.push(e.to_string());
        }
        if self.log_every == 0 {
            problems.push("log interval must be >= 1".into());
        }
        if self.ablation.ct && self.ablation.uct {
            problems.push("CT and UCT are mutually exclusive".into());
        }
        if let Some(t) = self.confidence_weighting {
            if !(0.0..1.0).contains(&t) {
                problems.push(format!("confidence threshold {t} outside [0, 1)"));
            }
        }
        if let Err(e) = self.optimizer.validate() {
            problems.push(e.to_string());
        }
        if let Some(arch) = &self.architecture {
            if let Err(e) = arch.validate() {
                problems.push(e.to_string());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(problems.join("; ")))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let config: TrainConfig = serde_json::from_str(&text).map_err(Error::json(path))?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(Error::json(path))?;
        std::fs::write(path, text).map_err(Error::io(path))
    }
}
