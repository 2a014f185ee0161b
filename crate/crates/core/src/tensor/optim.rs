use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};

/// Moment estimates of one Adam run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step: u64,
}

/// Adam with bias correction. Gradients are cleared after every step.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    state: AdamState,
}

impl Adam {
    pub fn new(store: &ParamStore, learning_rate: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            state: AdamState {
                first_moment: zeros.clone(),
                second_moment: zeros,
                step: 0,
            },
        }
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some(p) = store.iter().find(|p| p.trainable && p.grad.is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                p.grad = None;
                continue;
            }
            let grad = p.grad.take().expect("checked above");
            let m = &mut self.state.first_moment[i];
            let v = &mut self.state.second_moment[i];
            for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(&grad).zip(m).zip(v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Step decay: the rate is multiplied by `gamma` every `step_size` epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub base_rate: f64,
    pub step_size: usize,
    pub gamma: f64,
}

impl StepSchedule {
    pub fn new(base_rate: f64, step_size: usize, gamma: f64) -> Result<Self> {
        if step_size == 0 {
            return Err(Error::Config("schedule step size must be positive".into()));
        }
        if !(gamma > 0.0 && base_rate > 0.0) {
            return Err(Error::Config(
                "learning rate and gamma must be positive".into(),
            ));
        }
        Ok(Self {
            base_rate,
            step_size,
            gamma,
        })
    }

    /// Effective rate for a zero-based epoch index.
    pub fn rate(&self, epoch: usize) -> f64 {
        self.base_rate * self.gamma.powi((epoch / self.step_size) as i32)
    }
}
