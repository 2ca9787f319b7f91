//! First-order optimizers over [`Params`] with serializable state.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Params;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    /// `v ← μv + g; θ ← θ − lr·v`
    Sgd {
        learning_rate: f64,
        #[serde(default)]
        momentum: f64,
        #[serde(default)]
        weight_decay: f64,
    },
    Adam {
        learning_rate: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default)]
        weight_decay: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let (lr, ok) = match *self {
            OptimizerConfig::Sgd {
                learning_rate,
                momentum,
                weight_decay,
            } => (learning_rate, (0.0..1.0).contains(&momentum) && weight_decay >= 0.0),
            OptimizerConfig::Adam {
                learning_rate,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => (
                learning_rate,
                (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0 && weight_decay >= 0.0,
            ),
        };
        if !(lr > 0.0 && lr.is_finite()) || !ok {
            return Err(Error::InvalidArgument(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Learning-rate multiplier over iterations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Multiply the rate by `gamma` after every `every` iterations.
    Step { every: u64, gamma: f64 },
}

impl LrSchedule {
    /// Multiplier at 0-based iteration `t`.
    pub fn factor(&self, t: u64) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Step { every, gamma } => gamma.powi((t / every.max(1)).min(i32::MAX as u64) as i32),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LrSchedule::Step { every, gamma } if every == 0 || !(gamma > 0.0 && gamma <= 1.0) => Err(
                Error::InvalidArgument(format!("step decay needs every >= 1 and gamma in (0, 1], got {every} and {gamma}")),
            ),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub steps: u64,
    /// Momentum buffer (SGD) or first moment (Adam).
    pub first: Params,
    /// Second moment (Adam only).
    pub second: Option<Params>,
}

impl OptimizerState {
    pub fn new(config: &OptimizerConfig, params: &Params) -> Self {
        OptimizerState {
            steps: 0,
            first: params.zeros_like(),
            second: matches!(config, OptimizerConfig::Adam { .. }).then(|| params.zeros_like()),
        }
    }

    pub fn apply(&mut self, config: &OptimizerConfig, params: &mut Params, grads: &Params) -> Result<()> {
        self.apply_scaled(config, 1.0, params, grads)
    }

    /// One step with the learning rate multiplied by `lr_scale`.
    pub fn apply_scaled(&mut self, config: &OptimizerConfig, lr_scale: f64, params: &mut Params, grads: &Params) -> Result<()> {
        if !params.same_layout(grads) || !params.same_layout(&self.first) {
            return Err(Error::Shape("optimizer state, parameters and gradients differ in layout".into()));
        }
        self.steps += 1;
        match *config {
            OptimizerConfig::Sgd {
                learning_rate,
                momentum,
                weight_decay,
            } => {
                let learning_rate = learning_rate * lr_scale;
                for ((p, g), v) in params.values_mut().zip(grads.values()).zip(self.first.values_mut()) {
                    *v = momentum * *v + g + weight_decay * *p;
                    *p -= learning_rate * *v;
                }
            }
            OptimizerConfig::Adam {
                learning_rate,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                let second = self
                    .second
                    .as_mut()
                    .ok_or_else(|| Error::InvalidArgument("Adam step without second-moment state".into()))?;
                let learning_rate = learning_rate * lr_scale;
                let t = self.steps as i32;
                let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                for (((p, g), m), v) in params
                    .values_mut()
                    .zip(grads.values())
                    .zip(self.first.values_mut())
                    .zip(second.values_mut())
                {
                    let g = g + weight_decay * *p;
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= learning_rate * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NamedTensor;

    fn params(values: &[f64]) -> Params {
        Params {
            tensors: vec![NamedTensor {
                name: "w".into(),
                shape: vec![values.len()],
                data: values.to_vec(),
            }],
        }
    }

    #[test]
    fn plain_sgd_step() {
        let cfg = OptimizerConfig::Sgd {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let mut p = params(&[1.0, -2.0]);
        let mut state = OptimizerState::new(&cfg, &p);
        state.apply(&cfg, &mut p, &params(&[0.5, 1.0])).unwrap();
        assert_eq!(p.to_flat(), vec![0.95, -2.1]);
    }

    #[test]
    fn step_schedule_decays_in_stages() {
        let s = LrSchedule::Step { every: 10, gamma: 0.5 };
        assert_eq!([s.factor(0), s.factor(9), s.factor(10), s.factor(25)], [1.0, 1.0, 0.5, 0.25]);
        assert_eq!(LrSchedule::Constant.factor(1_000_000), 1.0);
        assert!(LrSchedule::Step { every: 0, gamma: 0.5 }.validate().is_err());
        assert!(LrSchedule::Step { every: 5, gamma: 1.5 }.validate().is_err());

        let cfg = OptimizerConfig::Sgd {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let mut p = params(&[1.0]);
        let mut state = OptimizerState::new(&cfg, &p);
        state.apply_scaled(&cfg, 0.5, &mut p, &params(&[1.0])).unwrap();
        assert!((p.to_flat()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates() {
        let cfg = OptimizerConfig::Sgd {
            learning_rate: 1.0,
            momentum: 0.5,
            weight_decay: 0.0,
        };
        let mut p = params(&[0.0]);
        let mut state = OptimizerState::new(&cfg, &p);
        let g = params(&[1.0]);
        state.apply(&cfg, &mut p, &g).unwrap();
        state.apply(&cfg, &mut p, &g).unwrap();
        // v1 = 1, v2 = 1.5
        assert_eq!(p.to_flat(), vec![-2.5]);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let cfg = OptimizerConfig::Adam {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-12,
            weight_decay: 0.0,
        };
        let mut p = params(&[1.0, 1.0]);
        let mut state = OptimizerState::new(&cfg, &p);
        state.apply(&cfg, &mut p, &params(&[3.0, -0.2])).unwrap();
        let moved = p.to_flat();
        assert!((moved[0] - 0.99).abs() < 1e-9 && (moved[1] - 1.01).abs() < 1e-9);
    }

    #[test]
    fn minimises_a_quadratic() {
        for cfg in [
            OptimizerConfig::Sgd {
                learning_rate: 0.1,
                momentum: 0.9,
                weight_decay: 0.0,
            },
            OptimizerConfig::Adam {
                learning_rate: 0.05,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 0.0,
            },
        ] {
            let mut p = params(&[3.0, -4.0]);
            let mut state = OptimizerState::new(&cfg, &p);
            for _ in 0..500 {
                let g = params(&p.to_flat());
                state.apply(&cfg, &mut p, &g).unwrap();
            }
            assert!(p.norm() < 1e-2, "{cfg:?}: {}", p.norm());
        }
    }

    #[test]
    fn invalid_settings_are_rejected() {
        assert!(OptimizerConfig::Sgd {
            learning_rate: 0.0,
            momentum: 0.0,
            weight_decay: 0.0
        }
        .validate()
        .is_err());
        assert!(OptimizerConfig::Sgd {
            learning_rate: 0.1,
            momentum: 1.0,
            weight_decay: 0.0
        }
        .validate()
        .is_err());
    }
}
