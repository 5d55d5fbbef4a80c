//! Learning-rate schedule: linear warmup to the linearly scaled peak, then
//! cosine decay to `min_lr`.

use crate::error::{MumError, Result};
use crate::train::TrainConfig;

/// Peak learning rate from the linear scaling rule:
/// `base_lr / 256 × batch_size_for_scaling`.
pub fn peak_lr(cfg: &TrainConfig) -> f64 {
    cfg.base_lr / 256.0 * cfg.batch_size_for_scaling as f64
}

/// Learning rate at `step` in [0, total_steps]: 0 at step 0, linear to the
/// peak at `warmup_steps`, then `min_lr + (peak - min_lr)(1 + cos(π p))/2`
/// with `p = (step - warmup)/(total - warmup)`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(MumError::contract(
            "lr_at",
            format!("step {step} outside [0, {}]", cfg.total_steps),
        ));
    }
    let peak = peak_lr(cfg);
    if step < cfg.warmup_steps {
        return Ok(peak * step as f64 / cfg.warmup_steps as f64);
    }
    let denom = cfg.total_steps - cfg.warmup_steps;
    if denom == 0 {
        return Ok(peak);
    }
    let progress = (step - cfg.warmup_steps) as f64 / denom as f64;
    Ok(cfg.min_lr + (peak - cfg.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(total: usize, warmup: usize) -> TrainConfig {
        TrainConfig {
            warmup_steps: warmup,
            total_steps: total,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn linear_scaling_rule_peak() {
        let mut c = cfg(500_000, 25_000);
        c.base_lr = 1e-4;
        c.batch_size_for_scaling = 6144;
        let peak = peak_lr(&c);
        // 1e-4 / 256 * 6144 = 2.4e-3 in exact arithmetic; f64 evaluation of
        // the two decimal literals may differ in the last bit only
        assert!(
            (peak - 2.4e-3).abs() <= f64::EPSILON * 2.4e-3,
            "peak {peak:e}"
        );
        assert_eq!(peak, c.base_lr / 256.0 * 6144.0);
    }

    #[test]
    fn endpoints_are_exact() {
        let c = cfg(1000, 100);
        assert_eq!(lr_at(0, &c).unwrap(), 0.0);
        assert_eq!(lr_at(100, &c).unwrap(), peak_lr(&c));
        assert_eq!(lr_at(1000, &c).unwrap(), c.min_lr);
        assert!(lr_at(1001, &c).is_err());
    }

    #[test]
    fn continuous_and_nonnegative_on_grid() {
        let c = cfg(1000, 100);
        let peak = peak_lr(&c);
        let mut prev = lr_at(0, &c).unwrap();
        for step in 1..=1000 {
            let lr = lr_at(step, &c).unwrap();
            assert!(lr >= 0.0 && lr <= peak + 1e-18);
            // max slope is peak/warmup during warmup
            let bound = peak / c.warmup_steps as f64 + 1e-12;
            assert!((lr - prev).abs() <= bound, "jump at {step}");
            prev = lr;
        }
    }

    #[test]
    fn warmup_is_monotone_and_cosine_decays() {
        let c = cfg(2000, 500);
        for step in 1..=500 {
            assert!(lr_at(step, &c).unwrap() >= lr_at(step - 1, &c).unwrap());
        }
        for step in 501..=2000 {
            assert!(lr_at(step, &c).unwrap() <= lr_at(step - 1, &c).unwrap() + 1e-18);
        }
    }

    #[test]
    fn zero_warmup_starts_at_peak() {
        let c = cfg(100, 0);
        assert_eq!(lr_at(0, &c).unwrap(), peak_lr(&c));
    }
}
