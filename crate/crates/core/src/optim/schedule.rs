use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Triangular cyclic learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CyclicLr {
    pub base: f64,
    pub max: f64,
    /// Half-period in iterations.
    pub step_size: u64,
}

impl Default for CyclicLr {
    fn default() -> Self {
        CyclicLr {
            base: 1e-3,
            max: 8e-3,
            step_size: 1600,
        }
    }
}

impl CyclicLr {
    pub fn new(base: f64, max: f64, step_size: u64) -> Result<Self> {
        let s = CyclicLr { base, max, step_size };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base > 0.0 && self.base <= self.max && self.max.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate bounds must satisfy 0 < base <= max, got base {} max {}",
                self.base, self.max
            )));
        }
        if self.step_size == 0 {
            return Err(Error::Config("lr step size must be at least 1".into()));
        }
        Ok(())
    }

    /// Rate at iteration `it` (counted from 0). Evaluated in double precision
    /// and rounded once to the single-precision rate the optimizer consumes.
    pub fn at(&self, it: u64) -> f32 {
        cyclic_lr(it, self)
    }
}

pub fn cyclic_lr(it: u64, sched: &CyclicLr) -> f32 {
    let step = sched.step_size as f64;
    let it = it as f64;
    let cycle = (1.0 + it / (2.0 * step)).floor();
    let x = (it / step - 2.0 * cycle + 1.0).abs();
    (sched.base + (sched.max - sched.base) * (1.0 - x).max(0.0)) as f32
}
