use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DualEncoderModel, FreezePlan, ParamGroup};

/// Linear warmup from `warmup_lr` to each group's base rate, then cosine
/// annealing to zero at the final step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub warmup_iters: usize,
    pub warmup_lr: f64,
    pub total_steps: usize,
}

impl LrSchedule {
    /// Learning rate for the optimizer step with 0-based index `step`.
    ///
    /// Warmup starts from `min(warmup_lr, base)` so a zero base rate stays
    /// zero throughout.
    pub fn lr(&self, base: f64, step: usize) -> f64 {
        let start = self.warmup_lr.min(base);
        if step < self.warmup_iters {
            return start + (base - start) * step as f64 / self.warmup_iters as f64;
        }
        let last = self.total_steps.saturating_sub(1);
        let span = last.saturating_sub(self.warmup_iters);
        let progress = if span == 0 {
            1.0
        } else {
            ((step - self.warmup_iters) as f64 / span as f64).min(1.0)
        };
        base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
struct Slot {
    index: usize,
    group: ParamGroup,
    name: String,
    base_lr: f64,
    m: ndarray::Array2<f64>,
    v: ndarray::Array2<f64>,
}

/// AdamW with decoupled weight decay and per-group learning rates. Only
/// parameters of trainable groups have slots; nothing else is ever written.
#[derive(Clone, Debug)]
pub struct AdamW {
    slots: Vec<Slot>,
    config: AdamWConfig,
    schedule: LrSchedule,
    step: usize,
}

/// Builds the optimizer over exactly the plan's trainable groups.
pub fn make_optimizer(
    model: &DualEncoderModel,
    plan: &FreezePlan,
    config: AdamWConfig,
    schedule: LrSchedule,
) -> Result<AdamW> {
    plan.validate(model)?;
    if config.weight_decay.is_nan() || config.weight_decay < 0.0 || config.eps.is_nan() || config.eps <= 0.0 {
        return Err(Error::Config("weight_decay >= 0 and eps > 0 required".into()));
    }
    let slots = model
        .param_info()
        .into_iter()
        .enumerate()
        .filter(|(_, p)| plan.is_trainable(p.group))
        .map(|(index, p)| Slot {
            index,
            group: p.group,
            base_lr: plan.learning_rate(p.group).expect("validated"),
            m: ndarray::Array2::zeros(p.shape),
            v: ndarray::Array2::zeros(p.shape),
            name: p.name,
        })
        .collect();
    Ok(AdamW {
        slots,
        config,
        schedule,
        step: 0,
    })
}

impl AdamW {
    /// Names of the parameters this optimizer updates.
    pub fn param_names(&self) -> Vec<&str> {
        self.slots.iter().map(|s| s.name.as_str()).collect()
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Rate the next step will use for `group`, or `None` if it is frozen.
    pub fn current_lr(&self, group: ParamGroup) -> Option<f64> {
        self.slots
            .iter()
            .find(|s| s.group == group)
            .map(|s| self.schedule.lr(s.base_lr, self.step))
    }

    pub fn step(&mut self, model: &mut DualEncoderModel, grads: &DualEncoderModel) {
        let t = (self.step + 1) as i32;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let mut params = model.tensors_mut();
        let grads = grads.tensors();
        for slot in &mut self.slots {
            let lr = self.schedule.lr(slot.base_lr, self.step);
            let decay = 1.0 - lr * weight_decay;
            Zip::from(&mut *params[slot.index])
                .and(grads[slot.index])
                .and(&mut slot.m)
                .and(&mut slot.v)
                .for_each(|p, &g, m, v| {
                    *p *= decay;
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
        self.step += 1;
    }
}
