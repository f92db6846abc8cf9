use crate::error::{Error, Result};

use super::Tensor;

/// Step-halving learning rate: `lr(step) = initial · 2^(-floor(step / half_every))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub half_every: usize,
}

impl LrSchedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.half_every == 0 {
            return self.initial;
        }
        let halvings = (step / self.half_every).min(1074) as i32;
        self.initial * 2f64.powi(-halvings)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment estimates for a list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &[Tensor], lr: f64, config: AdamConfig) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        Ok(AdamState {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
            lr,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
        })
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        self.lr = lr;
        Ok(())
    }

    /// Applies one Adam update. Every parameter needs a gradient; the
    /// gradients are consumed.
    pub fn step(&mut self, params: &mut [Tensor], grads: Vec<Option<Tensor>>) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::invalid(format!(
                "adam: state tracks {} parameters, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.ok_or(Error::MissingGradient(i)))
            .collect::<Result<Vec<_>>>()?;
        for (i, (p, g)) in params.iter().zip(&grads).enumerate() {
            if p.shape() != g.shape() || p.len() != self.m[i].len() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
        }
        self.t += 1;
        let t = self.t.min(i32::MAX as u64) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(&grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
