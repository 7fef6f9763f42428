use crate::error::{Error, Result};

/// Linear warmup followed by cosine decay with hard restarts.
///
/// After warmup, each cycle covers `cycle_length + 1` optimizer steps: the rate
/// starts at `base_lr`, reaches zero after `cycle_length` steps, then jumps back
/// to `base_lr`. Once `num_restarts + 1` cycles are used up the rate stays 0.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub cycle_length: u64,
    pub num_restarts: u64,
}

impl LrSchedule {
    pub fn new(
        base_lr: f64,
        warmup_steps: u64,
        cycle_length: u64,
        num_restarts: u64,
    ) -> Result<Self> {
        if !(base_lr >= 0.0 && base_lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {base_lr}")));
        }
        if cycle_length == 0 {
            return Err(Error::InvalidArgument("cycle_length must be >= 1".into()));
        }
        Ok(Self {
            base_lr,
            warmup_steps,
            cycle_length,
            num_restarts,
        })
    }

    /// Single cosine cycle spanning everything after warmup.
    pub fn single_cycle(base_lr: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        Self::new(
            base_lr,
            warmup_steps,
            total_steps.saturating_sub(warmup_steps).max(1),
            0,
        )
    }

    /// Flat `base_lr` with no warmup (a single cycle too long to decay).
    pub fn constant(base_lr: f64) -> Result<Self> {
        Self::new(base_lr, 0, u64::MAX / 2, 0)
    }

    pub fn lr_at_step(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let t = step - self.warmup_steps;
        let period = self.cycle_length + 1;
        if t / period > self.num_restarts {
            return 0.0;
        }
        let pos = (t % period) as f64 / self.cycle_length as f64;
        (self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * pos).cos())).max(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_starts_at_zero_and_reaches_base() {
        let s = LrSchedule::single_cycle(5e-6, 100, 1000).unwrap();
        assert_eq!(s.lr_at_step(0), 0.0);
        assert_eq!(s.lr_at_step(50), 2.5e-6);
        assert_eq!(s.lr_at_step(100), 5e-6);
    }

    #[test]
    fn cosine_endpoints_at_restart() {
        let s = LrSchedule::new(1e-3, 10, 40, 2).unwrap();
        assert!(s.lr_at_step(10 + 40) < 1e-12);
        assert_eq!(s.lr_at_step(10 + 41), 1e-3);
        assert_eq!(s.lr_at_step(10 + 82), 1e-3);
        // exhausted after three cycles
        assert_eq!(s.lr_at_step(10 + 3 * 41), 0.0);
    }

    #[test]
    fn constant_schedule_is_flat() {
        let s = LrSchedule::constant(2e-4).unwrap();
        assert!([0, 1, 1000, 1_000_000]
            .iter()
            .all(|&t| s.lr_at_step(t) == 2e-4));
    }

    #[test]
    fn zero_cycle_rejected() {
        assert!(LrSchedule::new(1e-3, 0, 0, 0).is_err());
    }
}
