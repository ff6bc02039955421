use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Linear schedule of the teacher decay `tau` over optimizer steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmaSchedule {
    pub tau_start: f64,
    pub tau_end: f64,
    pub total_steps: u64,
}

impl EmaSchedule {
    pub fn new(tau_start: f64, tau_end: f64, total_steps: u64) -> Result<Self> {
        if !(0.0 <= tau_start && tau_start <= tau_end && tau_end <= 1.0) {
            return Err(Error::Config(format!(
                "need 0 <= tau_start <= tau_end <= 1, got {tau_start} and {tau_end}"
            )));
        }
        Ok(Self {
            tau_start,
            tau_end,
            total_steps,
        })
    }
}

/// Both endpoints are reproduced exactly; steps past the end clamp.
pub fn tau_at_step(sched: &EmaSchedule, step: u64) -> f64 {
    if sched.total_steps == 0 || step == 0 {
        return sched.tau_start;
    }
    if step >= sched.total_steps {
        return sched.tau_end;
    }
    let t = step as f64 / sched.total_steps as f64;
    (1.0 - t) * sched.tau_start + t * sched.tau_end
}

/// Linear warm-up from 0 to `lr_peak` over `warmup_frac * total_steps`
/// steps, then cosine decay to 0 at `total_steps`.
pub fn lr_at_step(step: u64, total_steps: u64, lr_peak: f64, warmup_frac: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let step = step.min(total_steps) as f64;
    let total = total_steps as f64;
    let warm = warmup_frac * total;
    if step < warm {
        return lr_peak * step / warm;
    }
    let span = total - warm;
    if span <= 0.0 {
        return 0.0;
    }
    let progress = (step - warm) / span;
    lr_peak * 0.5 * (1.0 + (PI * progress).cos())
}
