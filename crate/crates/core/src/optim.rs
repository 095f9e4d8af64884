use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParameterStore;

/// Stochastic gradient descent with heavy-ball momentum and coupled L2
/// weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { learning_rate: 0.01, momentum: 0.9, weight_decay: 1e-5 }
    }
}

impl SgdConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        SgdConfig { learning_rate, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// Applies one update per call and counts steps for error reporting.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub config: SgdConfig,
    step: u64,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(Sgd { config, step: 0 })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// `v <- momentum * v + grad + weight_decay * theta; theta <- theta - lr * v`,
    /// then zero the gradients. Nothing is modified if any gradient is
    /// non-finite.
    pub fn step(&mut self, store: &mut ParameterStore) -> Result<()> {
        let step = self.step;
        for p in store.params() {
            if let Some(bad) = p.grad.data().iter().position(|g| !g.is_finite()) {
                return Err(Error::TrainingDiverged {
                    step,
                    detail: format!("non-finite gradient in '{}' at index {bad}", p.name),
                });
            }
        }
        let SgdConfig { learning_rate, momentum, weight_decay } = self.config;
        for id in store.ids().collect::<Vec<_>>() {
            let p = store.param_mut(id);
            let n = p.value.len();
            let v = p.velocity.get_or_insert_with(|| vec![0.0; n]);
            let theta = p.value.data_mut();
            let grad = p.grad.data_mut();
            for j in 0..n {
                v[j] = momentum * v[j] + grad[j] + weight_decay * theta[j];
                theta[j] -= learning_rate * v[j];
                grad[j] = 0.0;
            }
        }
        self.step += 1;
        if !store.all_finite() {
            return Err(Error::TrainingDiverged { step, detail: "parameters became non-finite".into() });
        }
        Ok(())
    }
}
