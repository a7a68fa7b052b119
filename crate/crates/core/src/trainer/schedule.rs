/// `lr0 * (1 - iter/T)^power`, clamped to zero past the end.
pub fn poly_lr(iter: u64, lr0: f64, power: f64, total_iters: u64) -> f64 {
    if total_iters == 0 {
        return lr0;
    }
    let frac = (iter as f64 / total_iters as f64).min(1.0);
    lr0 * (1.0 - frac).powf(power)
}

/// Linear ramp of the EMA decay from `start` to `end` over training.
pub fn tau_schedule(iter: u64, total_iters: u64, start: f64, end: f64) -> f64 {
    if total_iters == 0 {
        return start;
    }
    let frac = (iter as f64 / total_iters as f64).min(1.0);
    start + (end - start) * frac
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn poly() {
        assert_eq!(poly_lr(0, 2e-4, 0.9, 100), 2e-4);
        assert_eq!(poly_lr(100, 2e-4, 0.9, 100), 0.0);
        assert_abs_diff_eq!(poly_lr(50, 2e-4, 0.9, 100), 1.0718e-4, epsilon = 1e-8);
        let lrs: Vec<f64> = (0..=100).map(|i| poly_lr(i, 1.0, 0.9, 100)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn tau() {
        assert_eq!(tau_schedule(0, 1000, 0.995, 1.0), 0.995);
        assert_abs_diff_eq!(tau_schedule(1000, 1000, 0.995, 1.0), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(tau_schedule(500, 1000, 0.995, 1.0), 0.9975, epsilon = 1e-15);
    }
}
