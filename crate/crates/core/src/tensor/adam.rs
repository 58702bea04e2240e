//! Adam with bias correction.

use super::{Result, Tensor, TensorError};

/// Optimizer state for one fixed, ordered set of parameters.
///
/// Moment buffers are allocated on the first step and must stay
/// congruent with the parameter list on every later step.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self.epsilon = epsilon;
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update in place; zeroes every gradient after.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.second_moment = self.first_moment.clone();
        } else if self.first_moment.len() != params.len() {
            return Err(TensorError::Optimizer(format!(
                "parameter count changed: state has {}, got {}",
                self.first_moment.len(),
                params.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (idx, p) in params.iter_mut().enumerate() {
            let numel = p.numel();
            if self.first_moment[idx].len() != numel {
                return Err(TensorError::Optimizer(format!(
                    "moment buffer {idx} has {} entries, parameter has {numel}",
                    self.first_moment[idx].len()
                )));
            }
            let grad = p
                .grad()
                .ok_or_else(|| {
                    TensorError::Optimizer(format!("parameter {idx} has no gradient buffer"))
                })?
                .to_vec();
            let m = &mut self.first_moment[idx];
            let v = &mut self.second_moment[idx];
            let data = p.data_mut();
            for i in 0..numel {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
            p.zero_grad();
        }
        Ok(())
    }
}
