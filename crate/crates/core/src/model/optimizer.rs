use serde::{Deserialize, Serialize};

use super::{first_non_finite, SeqModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Optimizer {
    /// Plain gradient descent.
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::adam()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    optimizer: Optimizer,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    steps: u64,
}

impl OptimizerState {
    pub fn new(optimizer: Optimizer, num_params: usize) -> Self {
        let moments = match optimizer {
            Optimizer::Sgd => 0,
            Optimizer::Adam { .. } => num_params,
        };
        OptimizerState {
            optimizer,
            first_moment: vec![0.0; moments],
            second_moment: vec![0.0; moments],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn optimizer(&self) -> Optimizer {
        self.optimizer
    }
}

/// One descent step with a constant learning rate.
pub fn apply_update(
    model: &mut SeqModel,
    gradient: &[f64],
    state: &mut OptimizerState,
    learning_rate: f64,
) -> Result<()> {
    if !(learning_rate.is_finite() && learning_rate > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "learning rate must be positive, got {learning_rate}"
        )));
    }
    if gradient.len() != model.num_params() {
        return Err(Error::InvalidConfig(format!(
            "gradient has {} entries, model has {}",
            gradient.len(),
            model.num_params()
        )));
    }
    if let Some(slice) = first_non_finite(model.layout(), gradient) {
        return Err(Error::NonFinite(format!("gradient slice {}", slice.name())));
    }
    state.steps += 1;
    match state.optimizer {
        Optimizer::Sgd => {
            for (p, g) in model.params_mut().iter_mut().zip(gradient) {
                *p -= learning_rate * g;
            }
        }
        Optimizer::Adam {
            beta1,
            beta2,
            epsilon,
        } => {
            if state.first_moment.len() != gradient.len() {
                state.first_moment = vec![0.0; gradient.len()];
                state.second_moment = vec![0.0; gradient.len()];
            }
            let t = state.steps as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            let params = model.params_mut();
            for i in 0..gradient.len() {
                let g = gradient[i];
                let m = &mut state.first_moment[i];
                let v = &mut state.second_moment[i];
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                params[i] -= learning_rate * (*m / c1) / ((*v / c2).sqrt() + epsilon);
            }
        }
    }
    if let Some(slice) = model.non_finite_slice() {
        return Err(Error::NonFinite(format!("parameter slice {}", slice.name())));
    }
    Ok(())
}
