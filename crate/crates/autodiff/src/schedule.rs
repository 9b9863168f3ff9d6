use serde::{Deserialize, Serialize};

use crate::error::{AutodiffError, Result};

/// Linear warmup from 0 to `lr_max` over the first `warmup_proportion` of
/// `total_steps`, then linear decay back to 0 at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr_max: f64,
    pub total_steps: u64,
    pub warmup_proportion: f64,
}

impl LrSchedule {
    pub fn new(lr_max: f64, total_steps: u64, warmup_proportion: f64) -> Result<Self> {
        if !(lr_max > 0.0 && lr_max.is_finite()) {
            return Err(AutodiffError::Usage(format!("lr_max must be positive, got {lr_max}")));
        }
        if total_steps == 0 {
            return Err(AutodiffError::Usage("total_steps must be positive".into()));
        }
        if !(warmup_proportion > 0.0 && warmup_proportion < 1.0) {
            return Err(AutodiffError::Usage(format!(
                "warmup proportion must lie in (0, 1), got {warmup_proportion}"
            )));
        }
        Ok(Self {
            lr_max,
            total_steps,
            warmup_proportion,
        })
    }

    pub fn warmup_steps(&self) -> f64 {
        self.warmup_proportion * self.total_steps as f64
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(AutodiffError::Usage(format!(
                "step {step} beyond schedule end {}",
                self.total_steps
            )));
        }
        let t = step as f64;
        let total = self.total_steps as f64;
        let warm = self.warmup_steps();
        Ok(if t <= warm {
            self.lr_max * t / warm
        } else {
            self.lr_max * (total - t) / (total - warm)
        })
    }
}
