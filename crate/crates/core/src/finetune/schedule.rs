/// Linear warmup from 0 to `base_lr` over `warmup` steps, then linear decay
/// to 0 at `total_steps`. Steps past the end are clamped.
pub fn lr_schedule(step: u64, total_steps: u64, base_lr: f64, warmup: u64) -> f64 {
    let step = step.min(total_steps);
    if step < warmup {
        base_lr * step as f64 / warmup as f64
    } else if total_steps == warmup {
        base_lr
    } else {
        base_lr * (total_steps - step) as f64 / (total_steps - warmup) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert!((lr_schedule(5, 100, 0.00025, 10) - 0.000125).abs() < 1e-18);
        assert_eq!(lr_schedule(10, 100, 0.00025, 10), 0.00025);
        assert_eq!(lr_schedule(100, 100, 0.00025, 10), 0.0);
        assert_eq!(lr_schedule(0, 100, 0.00025, 10), 0.0);
    }

    #[test]
    fn piecewise_linear_shape() {
        let (total, warmup, lr) = (60, 10, 1.0);
        let values: Vec<f64> = (0..=total).map(|s| lr_schedule(s, total, lr, warmup)).collect();
        let peak = values.iter().copied().fold(f64::MIN, f64::max);
        assert_eq!(peak, lr);
        assert_eq!(values.iter().position(|&v| v == peak), Some(warmup as usize));
        for w in values[..=warmup as usize].windows(2) {
            assert!((w[1] - w[0] - 0.1).abs() < 1e-12);
        }
        for w in values[warmup as usize..].windows(2) {
            assert!((w[0] - w[1] - 0.02).abs() < 1e-12);
        }
        assert_eq!(lr_schedule(70, total, lr, warmup), 0.0);
    }

    #[test]
    fn no_warmup_starts_at_peak() {
        assert_eq!(lr_schedule(0, 4, 2.0, 0), 2.0);
        assert_eq!(lr_schedule(2, 4, 2.0, 0), 1.0);
    }
}
