//! Small shared estimators: overflow-safe log-mean-exp and Wilson intervals.

/// Summary of a log-mean-exp estimate over exponent samples `w_i`:
/// `log((1/n) sum exp(w_i))` computed shift-stably, with a delta-method
/// standard error and the importance-sampling effective sample size.
#[derive(Debug, Clone, Copy)]
pub struct LogMeanExp {
    pub value: f64,
    pub stderr: f64,
    pub ess: f64,
}

pub fn log_mean_exp(w: &[f64]) -> LogMeanExp {
    assert!(!w.is_empty());
    let n = w.len() as f64;
    let m = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for &x in w {
        let v = (x - m).exp();
        sum += v;
        sum_sq += v * v;
    }
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    // se(log mean) ~ sd / (mean sqrt(n)) by the delta method
    let stderr = if mean > 0.0 { var.sqrt() / (mean * n.sqrt()) } else { f64::INFINITY };
    let ess = if sum_sq > 0.0 { sum * sum / sum_sq } else { 0.0 };
    LogMeanExp { value: m + mean.ln(), stderr, ess }
}

/// Wilson score interval for a binomial proportion at normal quantile `z`.
pub fn wilson_interval(hits: usize, n: usize, z: f64) -> (f64, f64) {
    assert!(n > 0);
    let nf = n as f64;
    let p = hits as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn lme_constant_exponents_exact() {
        let w = vec![3.2; 500];
        let r = log_mean_exp(&w);
        assert_abs_diff_eq!(r.value, 3.2, epsilon = 1e-12);
        assert_abs_diff_eq!(r.stderr, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.ess, 500.0, epsilon = 1e-9);
    }

    #[test]
    fn lme_matches_naive_on_small_values() {
        let w: [f64; 4] = [0.1, -0.4, 0.9, 0.0];
        let naive = (w.iter().map(|x| f64::exp(*x)).sum::<f64>() / 4.0).ln();
        assert_abs_diff_eq!(log_mean_exp(&w).value, naive, epsilon = 1e-13);
    }

    #[test]
    fn lme_survives_huge_exponents() {
        let w = [900.0, 901.0, 899.5];
        let r = log_mean_exp(&w);
        assert!(r.value.is_finite());
        assert!(r.value > 899.0 && r.value < 901.0);
    }

    #[test]
    fn wilson_brackets_p_hat_and_stays_in_unit_interval() {
        let (lo, hi) = wilson_interval(7, 100, 1.96);
        assert!(0.0 <= lo && lo < 0.07 && 0.07 < hi && hi <= 1.0);
        let (lo0, hi0) = wilson_interval(0, 50, 1.96);
        assert_abs_diff_eq!(lo0, 0.0);
        assert!(hi0 > 0.0 && hi0 < 0.2);
        let (lo1, hi1) = wilson_interval(50, 50, 1.96);
        assert!(lo1 < 1.0);
        assert_abs_diff_eq!(hi1, 1.0);
    }
}
