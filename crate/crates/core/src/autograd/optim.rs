use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Adam with bias-corrected moments. Moment buffers are allocated on the
/// first step, one per parameter slice, in the order the slices are given.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Result<Self> {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = (&'a mut [f64], &'a [f64])>) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        let pairs: Vec<_> = params.into_iter().collect();
        if self.m.is_empty() {
            self.m = pairs.iter().map(|(p, _)| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if pairs.len() != self.m.len() {
            return Err(Error::shape(format!(
                "Adam tracks {} parameters, got {}",
                self.m.len(),
                pairs.len()
            )));
        }
        for (i, (p, g)) in pairs.iter().enumerate() {
            if p.len() != g.len() || p.len() != self.m[i].len() {
                return Err(Error::shape(format!("Adam parameter {i}: size mismatch")));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in pairs.into_iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` once the monitored metric has
/// failed to improve for more than `patience` consecutive epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub best: f64,
    pub patience: usize,
    pub factor: f64,
    pub epochs_since_improve: usize,
    pub min_lr: f64,
}

impl PlateauScheduler {
    pub fn new(patience: usize, factor: f64, min_lr: f64) -> Result<Self> {
        if !(factor > 0.0 && factor < 1.0) {
            return Err(Error::config(format!("plateau factor must lie in (0, 1), got {factor}")));
        }
        Ok(Self {
            best: f64::NEG_INFINITY,
            patience,
            factor,
            epochs_since_improve: 0,
            min_lr,
        })
    }

    /// Records `metric` (higher is better) and returns the learning rate to use next.
    pub fn step(&mut self, metric: f64, lr: f64) -> f64 {
        if metric > self.best + 1e-12 {
            self.best = metric;
            self.epochs_since_improve = 0;
            return lr;
        }
        self.epochs_since_improve += 1;
        if self.epochs_since_improve > self.patience {
            self.epochs_since_improve = 0;
            return (lr * self.factor).max(self.min_lr);
        }
        lr
    }
}
