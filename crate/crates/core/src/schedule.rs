//! Learning-rate and EMA schedules, and the EMA update itself.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::nn::Parameter;

/// Position within a run of `total` optimizer steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub step: u64,
    pub total: u64,
    pub warmup_steps: u64,
    pub lr_base: f64,
    pub tau_base: f64,
}

impl ScheduleState {
    pub fn new(total: u64, warmup_steps: u64, lr_base: f64, tau_base: f64) -> Self {
        Self {
            step: 0,
            total: total.max(1),
            warmup_steps: warmup_steps.min(total),
            lr_base,
            tau_base,
        }
    }

    pub fn lr(&self) -> f64 {
        cosine_lr(self)
    }

    pub fn tau(&self) -> f64 {
        tau_schedule(self)
    }

    pub fn advance(&mut self) {
        self.step = (self.step + 1).min(self.total);
    }
}

/// Linear warmup to `lr_base`, then half-cosine decay to zero at `total`.
pub fn cosine_lr(s: &ScheduleState) -> f64 {
    let k = s.step.min(s.total) as f64;
    let w = s.warmup_steps as f64;
    if k < w {
        return s.lr_base * k / w;
    }
    let span = s.total as f64 - w;
    if span <= 0.0 {
        return s.lr_base;
    }
    s.lr_base * ((PI * (k - w) / span).cos() + 1.0) / 2.0
}

/// EMA coefficient rising from `tau_base` at step 0 to 1 at `total`.
pub fn tau_schedule(s: &ScheduleState) -> f64 {
    let k = s.step.min(s.total) as f64;
    1.0 - (1.0 - s.tau_base) * ((PI * k / s.total as f64).cos() + 1.0) / 2.0
}

/// `target <- tau * target + (1 - tau) * online`, elementwise.
pub fn ema_update(target: &mut [&mut Parameter], online: &[&Parameter], tau: f64) -> Result<()> {
    if target.len() != online.len() {
        return shape_err(format!(
            "EMA trees differ: {} target vs {} online parameters",
            target.len(),
            online.len()
        ));
    }
    for (t, o) in target.iter().zip(online) {
        t.value.require_same_shape(&o.value, "ema_update")?;
    }
    for (t, o) in target.iter_mut().zip(online) {
        for (x, &y) in t.value.data_mut().iter_mut().zip(o.value.data()) {
            *x = tau * *x + (1.0 - tau) * y;
        }
    }
    Ok(())
}
