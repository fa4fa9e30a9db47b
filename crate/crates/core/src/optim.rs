//! AdamW and the one-cycle learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamWConfig {
            lr,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Parameter(format!("invalid AdamW settings {self:?}")))
        }
    }
}

/// AdamW with decoupled weight decay: `θ ← θ·(1 − lr·λ)` is applied before the Adam
/// step `θ ← θ − lr·m̂/(√v̂ + ε)`.
#[derive(Clone, Debug)]
pub struct AdamW {
    config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, shapes: &[&[usize]]) -> Result<Self> {
        config.validate()?;
        let sizes: Vec<usize> = shapes.iter().map(|s| s.iter().product()).collect();
        Ok(AdamW {
            config,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        })
    }

    /// Optimizer for the given parameter tensors.
    pub fn for_params(config: AdamWConfig, params: &[Tensor]) -> Result<Self> {
        let shapes: Vec<&[usize]> = params.iter().map(|p| p.shape()).collect();
        Self::new(config, &shapes)
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One update of every tensor in `params` with matching `grads`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::Shape(format!(
                    "tensor {i}: parameter {:?} and gradient {:?} do not match optimizer state of {}",
                    p.shape(),
                    g.shape(),
                    self.m[i].len()
                )));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter tensor {i}")));
            }
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let decay = 1.0 - c.lr * c.weight_decay;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w *= decay;
                *w -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// One-cycle schedule: cosine warm-up from `max/div` to `max` over the first
/// `warmup_fraction` of the steps, then cosine annealing to `max/final_div`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OneCycle {
    pub max_lr: f64,
    pub total_steps: usize,
    pub warmup_fraction: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl OneCycle {
    pub fn new(max_lr: f64, total_steps: usize) -> Result<Self> {
        let s = OneCycle {
            max_lr,
            total_steps,
            warmup_fraction: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps < 2
            || !(self.max_lr > 0.0)
            || !(0.0..1.0).contains(&self.warmup_fraction)
            || !(self.div_factor > 0.0)
            || !(self.final_div_factor > 0.0)
        {
            return Err(Error::Parameter(format!("invalid one-cycle schedule {self:?}")));
        }
        Ok(())
    }

    pub fn initial_lr(&self) -> f64 {
        self.max_lr / self.div_factor
    }

    pub fn final_lr(&self) -> f64 {
        self.max_lr / self.final_div_factor
    }

    /// Index of the step at which the peak is reached.
    pub fn peak_step(&self) -> usize {
        ((self.warmup_fraction * self.total_steps as f64).round() as usize).clamp(1, self.total_steps - 1)
    }

    /// Learning rate at `step`, for `0 ≤ step ≤ total_steps`.
    pub fn lr(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Parameter(format!(
                "step {step} is past the {}-step schedule",
                self.total_steps
            )));
        }
        let cos = |from: f64, to: f64, frac: f64| {
            to + (from - to) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
        };
        let peak = self.peak_step();
        // endpoints exactly, not through the cosine
        if step == 0 {
            return Ok(self.initial_lr());
        } else if step == peak {
            return Ok(self.max_lr);
        } else if step == self.total_steps {
            return Ok(self.final_lr());
        }
        Ok(if step <= peak {
            cos(self.initial_lr(), self.max_lr, step as f64 / peak as f64)
        } else {
            let frac = (step - peak) as f64 / (self.total_steps - peak) as f64;
            cos(self.max_lr, self.final_lr(), frac)
        })
    }
}
