//! Small numerical helpers used by the recursions.

/// Natural log of 2π.
pub const LN_TWO_PI: f64 = 1.8378770664093453;

/// Numerically stable `log(sum(exp(xs)))` with max subtraction.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Normalize `xs` in place to sum to one; returns the pre-normalization sum.
///
/// A zero or non-finite sum is left untouched and returned for the caller to
/// diagnose.
pub fn normalize(xs: &mut [f64]) -> f64 {
    let sum: f64 = xs.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        for x in xs.iter_mut() {
            *x /= sum;
        }
    }
    sum
}

/// Streaming log-sum-exp accumulator for sums too large to materialize.
#[derive(Debug, Clone)]
pub struct OnlineLogSumExp {
    max: f64,
    sum: f64,
}

impl OnlineLogSumExp {
    pub fn new() -> Self {
        Self {
            max: f64::NEG_INFINITY,
            sum: 0.0,
        }
    }

    pub fn push(&mut self, x: f64) {
        if x == f64::NEG_INFINITY {
            return;
        }
        if x > self.max {
            self.sum = self.sum * (self.max - x).exp() + 1.0;
            self.max = x;
        } else {
            self.sum += (x - self.max).exp();
        }
    }

    pub fn value(&self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.ln()
        }
    }
}

impl Default for OnlineLogSumExp {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn log_sum_exp_matches_direct() {
        let xs = [-1.0, -2.0, -3.0];
        let direct: f64 = xs.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert_relative_eq!(log_sum_exp(&xs), direct, epsilon = 1e-14);
    }

    #[test]
    fn log_sum_exp_handles_large_magnitudes() {
        let xs = [-1000.0, -1000.0];
        assert_relative_eq!(log_sum_exp(&xs), -1000.0 + 2.0_f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn online_accumulator_agrees_with_batch() {
        let xs = [-5.0, -1.0, -700.0, -0.5, -2.5];
        let mut acc = OnlineLogSumExp::new();
        for &x in &xs {
            acc.push(x);
        }
        assert_relative_eq!(acc.value(), log_sum_exp(&xs), epsilon = 1e-12);
    }

    #[test]
    fn empty_sums_are_minus_infinity() {
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert_eq!(OnlineLogSumExp::new().value(), f64::NEG_INFINITY);
    }
}
